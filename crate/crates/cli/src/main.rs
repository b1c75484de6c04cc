//! Command-line driver: stage artifacts into a run directory, then
//! simulate, sweep, and report.
//!
//! Typical flow:
//!
//! ```text
//! consilium gen-world --run runs/demo --seed 7
//! consilium build-kb --run runs/demo
//! consilium calibrate --run runs/demo
//! consilium train-mdpo --run runs/demo
//! consilium train-estimator --run runs/demo
//! consilium build-graph --run runs/demo
//! consilium simulate --run runs/demo
//! consilium sweep --run runs/demo --gammas 0.5,0.7,0.8,0.9,1.0
//! consilium report --run runs/demo
//! ```

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use consilium_core::harness::{
    compare_adaptive_vs_fixed, generate_world, recount_report, run_pipeline, write_run_dir,
    PipelineComponents, RunConfig, SyntheticWorld, WorldSpec,
};
use consilium_core::knowledge::{read_kb_dir, write_kb_dir};
use consilium_core::mdpo::{
    anchor_from_sample, read_crossmodal_jsonl, read_preference_jsonl, train_mdpo,
    write_crossmodal_jsonl, write_preference_jsonl, write_trace_csv, MdpoDatasets,
};
use consilium_core::metacog::{
    build_dependency_graph, train_estimator, ConfidenceEstimator, DependencyGraph, ParentMeans,
};
use consilium_core::policy::{CandidateFeaturizer, ToyPolicy};
use consilium_core::routing::{calibrate_stats, read_stats, write_stats};
use consilium_core::Result;

#[derive(Parser)]
#[command(
    name = "consilium",
    version,
    about = "Preference-trained expert routing with quorum-halted reasoning, simulated end to end"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every stage. Precedence: defaults, then --config
/// file, then explicit flags.
#[derive(Args, Clone)]
struct CommonOpts {
    /// Run directory holding all staged artifacts.
    #[arg(long, default_value = "runs/default")]
    run: PathBuf,
    /// Optional config file (partial JSON, framework key names).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    /// Federated sites (config key `N`).
    #[arg(long = "n-sites")]
    n_sites: Option<usize>,
    /// Quorum size (config key `M`).
    #[arg(long = "quorum")]
    quorum: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lambda_cm: Option<f64>,
    #[arg(long)]
    lambda_ra: Option<f64>,
    /// Anchor percentile q.
    #[arg(long)]
    q: Option<f64>,
}

impl CommonOpts {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! override_field {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag { config.$field = v; })*
            };
        }
        override_field!(
            seed => seed,
            beta => beta,
            k => k,
            n_sites => n_sites,
            quorum => quorum,
            gamma => gamma,
            tau => tau,
            t_max => t_max,
            epochs => epochs,
            batch_size => batch_size,
            learning_rate => learning_rate,
            lambda_cm => lambda_cm,
            lambda_ra => lambda_ra,
            q => q,
        );
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args, Clone)]
struct WorldOpts {
    #[arg(long)]
    domains: Option<usize>,
    #[arg(long)]
    docs_per_domain: Option<usize>,
    #[arg(long)]
    queries_per_domain: Option<usize>,
    #[arg(long)]
    heldout_per_domain: Option<usize>,
    #[arg(long)]
    answers: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    correct_rate: Option<f64>,
    #[arg(long)]
    image_dim: Option<usize>,
    #[arg(long)]
    text_dim: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
}

impl WorldOpts {
    fn spec(&self, seed: u64) -> WorldSpec {
        let mut spec = WorldSpec {
            seed,
            ..WorldSpec::default()
        };
        macro_rules! override_field {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag { spec.$field = v; })*
            };
        }
        override_field!(
            domains => num_domains,
            docs_per_domain => docs_per_domain,
            queries_per_domain => queries_per_domain,
            heldout_per_domain => heldout_per_domain,
            answers => num_answers,
            margin => separation_margin,
            noise => noise,
            correct_rate => correct_rate,
            image_dim => image_dim,
            text_dim => text_dim,
            embed_dim => embed_dim,
            hidden_dim => hidden_dim,
        );
        spec
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world plus preference/cross-modal datasets.
    GenWorld {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        world: WorldOpts,
    },
    /// Write per-domain vector stores and their manifest.
    BuildKb {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Estimate per-domain score statistics from the held-out queries.
    Calibrate {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Train the preference policy on the generated datasets.
    TrainMdpo {
        #[command(flatten)]
        common: CommonOpts,
        /// JSON array of reward samples to derive the anchor from,
        /// instead of scoring the calibration split.
        #[arg(long)]
        anchor_sample: Option<PathBuf>,
    },
    /// Train the confidence estimator on labeled hidden states.
    TrainEstimator {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Build the expert dependency graph and parent means.
    BuildGraph {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Route every query (phase 1 only) and write routing.jsonl.
    Route {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Full pipeline: route, federate, aggregate, report.
    Simulate {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Gamma sweep of adaptive halting against the fixed-depth baseline.
    Sweep {
        #[command(flatten)]
        common: CommonOpts,
        /// Comma-separated gamma grid.
        #[arg(long, default_value = "0.5,0.6,0.7,0.8,0.9,0.95,1.0")]
        gammas: String,
    },
    /// Recompute report.json from the run logs.
    Report {
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn load_world(run: &Path) -> Result<SyntheticWorld> {
    SyntheticWorld::load(&run.join("world.json"))
}

fn load_components(run: &Path) -> Result<PipelineComponents> {
    let components = PipelineComponents {
        kbs: read_kb_dir(&run.join("kb"))?,
        stats: read_stats(&run.join("stats.json"))?,
        estimator: ConfidenceEstimator::load(&run.join("estimator.json"))?,
        graph: DependencyGraph::load(&run.join("graph.json"))?,
        parent_means: ParentMeans::load(&run.join("parent_means.json"))?,
    };
    if components.kbs.is_empty() {
        return Err(consilium_core::Error::config("kb directory has no domains"));
    }
    Ok(components)
}

fn cmd_gen_world(common: &CommonOpts, world_opts: &WorldOpts) -> Result<()> {
    let config = common.resolve()?;
    let spec = world_opts.spec(config.seed);
    let world = generate_world(&spec)?;
    std::fs::create_dir_all(&common.run)?;
    world.save(&common.run.join("world.json"))?;
    write_preference_jsonl(
        &world.preference_data(),
        &common.run.join("preference.jsonl"),
    )?;
    write_crossmodal_jsonl(
        &world.crossmodal_data(),
        &common.run.join("crossmodal.jsonl"),
    )?;
    config.save(&common.run.join("config.json"))?;
    println!(
        "world: {} domains, {} queries, {} held-out, margin {}",
        spec.num_domains,
        world.queries.len(),
        world.heldout.len(),
        spec.separation_margin
    );
    Ok(())
}

fn cmd_build_kb(common: &CommonOpts) -> Result<()> {
    let world = load_world(&common.run)?;
    let kbs = world.domain_kbs()?;
    write_kb_dir(&kbs, &common.run.join("kb"))?;
    println!(
        "kb: {} domains, {} docs total",
        kbs.len(),
        kbs.iter().map(|kb| kb.len()).sum::<usize>()
    );
    Ok(())
}

fn cmd_calibrate(common: &CommonOpts) -> Result<()> {
    let config = common.resolve()?;
    let world = load_world(&common.run)?;
    let kbs = read_kb_dir(&common.run.join("kb"))?;
    let heldout = world.heldout_embedded()?;
    let stats = calibrate_stats(&heldout, &kbs, config.k, config.epsilon)?;
    write_stats(&stats, &common.run.join("stats.json"))?;
    for s in &stats {
        println!(
            "domain {}: mu {:.4} sigma {:.4} (n={})",
            s.domain_id, s.mu, s.sigma, s.sample_size
        );
    }
    Ok(())
}

fn cmd_train_mdpo(common: &CommonOpts, anchor_sample: Option<&Path>) -> Result<()> {
    let config = common.resolve()?;
    let anchor_override = match anchor_sample {
        Some(path) => {
            let rewards: Vec<f64> = serde_json::from_reader(std::fs::File::open(path)?)?;
            Some(anchor_from_sample(&rewards, config.q)?)
        }
        None => None,
    };
    let world = load_world(&common.run)?;
    let preference = read_preference_jsonl(&common.run.join("preference.jsonl"))?;
    let crossmodal = read_crossmodal_jsonl(&common.run.join("crossmodal.jsonl"))?;

    // hold the last fifth out of training as the anchor calibration split
    let split = preference.len() - preference.len() / 5;
    let datasets = MdpoDatasets {
        preference: preference[..split].to_vec(),
        crossmodal,
        calibration: preference[split..].to_vec(),
        calibration_disjoint: true,
    };

    let candidates = world.answer_labels.clone();
    let featurizer = CandidateFeaturizer::seeded(
        &candidates,
        world.spec.image_dim,
        world.spec.text_dim,
        config.seed,
    );
    let policy = ToyPolicy::uniform(featurizer.feature_dim(), candidates)?;
    let reference = policy.frozen_clone();
    let outcome = train_mdpo(
        &datasets,
        &policy,
        &reference,
        &featurizer,
        &config.mdpo(),
        anchor_override,
    )?;

    outcome.policy.save(&common.run.join("policy.json"))?;
    reference.save(&common.run.join("reference.json"))?;
    write_trace_csv(&outcome.trace, &common.run.join("loss_trace.csv"))?;
    let first = &outcome.trace[0];
    let last = outcome.trace.last().unwrap();
    println!(
        "anchor delta {:.6} (q={}, n={}, disjoint={})",
        outcome.anchor.delta,
        outcome.anchor.percentile_q,
        outcome.anchor.calibration_size,
        outcome.calibration_disjoint
    );
    println!(
        "loss: total {:.4} -> {:.4} over {} mini-batches",
        first.total,
        last.total,
        outcome.trace.len()
    );
    Ok(())
}

fn cmd_train_estimator(common: &CommonOpts) -> Result<()> {
    let config = common.resolve()?;
    let world = load_world(&common.run)?;
    let mut estimator =
        ConfidenceEstimator::seeded(world.spec.hidden_dim, config.hidden_dim, config.seed);
    estimator.alpha = config.alpha;
    estimator.epsilon_interp = config.epsilon_interp;
    estimator.u_low = config.u_low;
    estimator.u_high = config.u_high;
    let corpus = world.estimator_corpus(120);
    let trained = train_estimator(
        &corpus,
        &estimator,
        config.estimator_lr,
        config.estimator_steps,
    )?;
    trained.estimator.save(&common.run.join("estimator.json"))?;
    if trained.single_class_warning {
        eprintln!("warning: estimator corpus has a single correctness class");
    }
    println!(
        "estimator: loss {:.4} -> {:.4} over {} steps",
        trained.trace[0],
        trained.trace.last().unwrap(),
        trained.trace.len()
    );
    Ok(())
}

fn cmd_build_graph(common: &CommonOpts) -> Result<()> {
    let config = common.resolve()?;
    let world = load_world(&common.run)?;
    let table = world.gain_table(config.restarts);
    let graph = build_dependency_graph(
        world.spec.num_domains,
        &table,
        config.edge_threshold,
        Some(config.significance_level),
    )?;
    graph.save(&common.run.join("graph.json"))?;
    world
        .parent_means()
        .save(&common.run.join("parent_means.json"))?;
    println!(
        "graph: {} experts, {} significant edges",
        graph.num_experts,
        graph.edges.len()
    );
    Ok(())
}

fn cmd_route(common: &CommonOpts) -> Result<()> {
    use consilium_core::routing::{route, select_experts, RoutingRecord};
    use std::io::Write;
    let config = common.resolve()?;
    let world = load_world(&common.run)?;
    let kbs = read_kb_dir(&common.run.join("kb"))?;
    let stats = read_stats(&common.run.join("stats.json"))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(common.run.join("routing.jsonl"))?);
    let mut correct = 0usize;
    for query in &world.queries {
        let embedded = world.embed(query)?;
        let results = consilium_core::knowledge::retrieve_all(&kbs, &embedded, config.k)?;
        let dist = route(&results, &stats, config.tau)?;
        let selection = select_experts(&dist, config.entropy_threshold, config.max_active)?;
        if selection.primary() == query.true_domain {
            correct += 1;
        }
        let record = RoutingRecord {
            query_id: query.id.clone(),
            raw_scores: dist.raw_scores,
            normalized_scores: dist.normalized_scores,
            probs: dist.probs,
            active_experts: selection.active_experts,
            entropy: selection.entropy,
        };
        serde_json::to_writer(&mut out, &record)?;
        writeln!(out)?;
    }
    println!(
        "routing accuracy: {:.4} over {} queries",
        correct as f64 / world.queries.len() as f64,
        world.queries.len()
    );
    Ok(())
}

fn cmd_simulate(common: &CommonOpts) -> Result<()> {
    let config = common.resolve()?;
    let world = load_world(&common.run)?;
    let components = load_components(&common.run)?;
    let (report, artifacts) = run_pipeline(&world, &components, &config)?;
    write_run_dir(&common.run, &report, &artifacts)?;
    println!(
        "routing_accuracy {:.4} | task_accuracy {:.4} | f1 {:.4}",
        report.routing_accuracy, report.task_accuracy, report.f1
    );
    println!(
        "avg chain length: adaptive {:.3} vs fixed {:.3} ({:.2}% reduction)",
        report.avg_chain_length_adaptive, report.avg_chain_length_fixed, report.reduction_percent
    );
    Ok(())
}

fn cmd_sweep(common: &CommonOpts, gammas: &str) -> Result<()> {
    let config = common.resolve()?;
    let world = load_world(&common.run)?;
    let components = load_components(&common.run)?;
    let grid: Vec<f64> = gammas
        .split(',')
        .map(|g| {
            g.trim()
                .parse::<f64>()
                .map_err(|e| consilium_core::Error::config(format!("bad gamma `{g}`: {e}")))
        })
        .collect::<Result<_>>()?;
    let (rows, fixed) = compare_adaptive_vs_fixed(&world, &components, &config, &grid)?;
    consilium_core::harness::report::write_sweep_csv(&rows, &common.run.join("sweep.csv"))?;
    println!("gamma  accuracy  f1      avg_len  reduction%");
    for r in &rows {
        println!(
            "{:<6} {:<9.4} {:<7.4} {:<8.3} {:.2}",
            r.gamma, r.task_accuracy, r.f1, r.avg_chain_length, r.reduction_percent
        );
    }
    println!(
        "fixed depth: accuracy {:.4}, avg_len {:.3}",
        fixed.task_accuracy, fixed.avg_chain_length_adaptive
    );
    Ok(())
}

fn cmd_report(common: &CommonOpts) -> Result<()> {
    let world = load_world(&common.run)?;
    let report = recount_report(&common.run, &world)?;
    report.save(&common.run.join("report.json"))?;
    println!(
        "report.json re-emitted: routing {:.4}, accuracy {:.4}, f1 {:.4}",
        report.routing_accuracy, report.task_accuracy, report.f1
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenWorld { common, world } => cmd_gen_world(common, world),
        Command::BuildKb { common } => cmd_build_kb(common),
        Command::Calibrate { common } => cmd_calibrate(common),
        Command::TrainMdpo {
            common,
            anchor_sample,
        } => cmd_train_mdpo(common, anchor_sample.as_deref()),
        Command::TrainEstimator { common } => cmd_train_estimator(common),
        Command::BuildGraph { common } => cmd_build_graph(common),
        Command::Route { common } => cmd_route(common),
        Command::Simulate { common } => cmd_simulate(common),
        Command::Sweep { common, gammas } => cmd_sweep(common, gammas),
        Command::Report { common } => cmd_report(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
