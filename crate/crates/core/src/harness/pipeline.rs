//! End-to-end pipeline: route each query, run the federated reasoning
//! round on the selected expert, aggregate the halted chains, and score
//! the run.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::aggregation::{
    cluster_answers, embed_answer, resolve, synthesize, ConsensusMode, HashedBagEncoder,
    StubReviewer, SynthesisBackend,
};
use crate::error::{Error, Result};
use crate::federation::{run_federated, HaltEvent, Schedule};
use crate::harness::config::RunConfig;
use crate::harness::report::{macro_f1, RunReport, SweepRow, Timing};
use crate::harness::world::{SyntheticQuery, SyntheticWorld};
use crate::knowledge::{retrieve_all, DomainKB};
use crate::metacog::{
    build_dependency_graph, train_estimator, ConfidenceEstimator, DependencyGraph, ParentMeans,
};
use crate::routing::{route, select_experts, DomainStats, RoutingRecord};

/// Everything the per-query pipeline needs besides the world itself.
#[derive(Debug, Clone)]
pub struct PipelineComponents {
    pub kbs: Vec<DomainKB>,
    pub stats: Vec<DomainStats>,
    pub estimator: ConfidenceEstimator,
    pub graph: DependencyGraph,
    pub parent_means: ParentMeans,
}

/// Build all staged artifacts in memory from a world: stores, calibration
/// statistics, a trained estimator, the dependency graph and parent means.
pub fn prepare_components(
    world: &SyntheticWorld,
    config: &RunConfig,
) -> Result<PipelineComponents> {
    let kbs = world.domain_kbs()?;
    let heldout = world.heldout_embedded()?;
    let stats = crate::routing::calibrate_stats(&heldout, &kbs, config.k, config.epsilon)?;

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

    let table = world.gain_table(config.restarts);
    let graph = build_dependency_graph(
        world.spec.num_domains,
        &table,
        config.edge_threshold,
        Some(config.significance_level),
    )?;
    let parent_means = world.parent_means();

    Ok(PipelineComponents {
        kbs,
        stats,
        estimator: trained.estimator,
        graph,
        parent_means,
    })
}

/// Per-query federation summary line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FederationSummary {
    pub query_id: String,
    pub t_star: usize,
    pub cancelled_sites: Vec<usize>,
    pub executed_steps: Vec<usize>,
    pub events: Vec<HaltEvent>,
}

/// One per-step confidence record, tagged with its query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryStepRecord {
    pub query_id: String,
    pub site_id: usize,
    pub step: usize,
    pub u_base: f64,
    pub delta_stability: f64,
    pub confidence: f64,
    pub halted: bool,
}

/// Per-query consensus outcome line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub query_id: String,
    pub mode: ConsensusMode,
    pub final_answer: String,
    pub winning_cluster: Option<Vec<usize>>,
    pub clusters: Vec<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    pub from_stub: bool,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineArtifacts {
    pub routing: Vec<RoutingRecord>,
    pub federation: Vec<FederationSummary>,
    pub outcomes: Vec<OutcomeRecord>,
    pub steps: Vec<QueryStepRecord>,
    pub per_query_ms: Vec<f64>,
}

/// The augmented initial context handed to every site: query tag plus the
/// retrieved doc ids. Question text stays out so the synthesis prompt can
/// contain the question exactly once.
fn build_ctx0(query: &SyntheticQuery, domain: usize, doc_ids: &[String]) -> String {
    format!(
        "[query {} | expert domain {domain} | context docs: {}]",
        query.id,
        doc_ids.join(", ")
    )
}

fn run_one_query(
    world: &SyntheticWorld,
    components: &PipelineComponents,
    config: &RunConfig,
    query: &SyntheticQuery,
    reviewer: &dyn SynthesisBackend,
) -> Result<(
    RoutingRecord,
    FederationSummary,
    OutcomeRecord,
    Vec<QueryStepRecord>,
)> {
    // Phase 1: retrieval-aware routing
    let embedded = world.embed(query)?;
    let results = retrieve_all(&components.kbs, &embedded, config.k)?;
    let dist = route(&results, &components.stats, config.tau)?;
    let selection = select_experts(&dist, config.entropy_threshold, config.max_active)?;
    let routing_record = RoutingRecord {
        query_id: query.id.clone(),
        raw_scores: dist.raw_scores.clone(),
        normalized_scores: dist.normalized_scores.clone(),
        probs: dist.probs.clone(),
        active_experts: selection.active_experts.clone(),
        entropy: selection.entropy,
    };

    // Phase 2: federated adaptive reasoning on the primary expert
    let d_star = selection.primary();
    let expert = world.expert_for(d_star, query);
    let doc_ids: Vec<String> = results[d_star]
        .hits
        .iter()
        .map(|h| h.doc_id.clone())
        .collect();
    let ctx0 = build_ctx0(query, d_star, &doc_ids);
    let outcome = run_federated(
        &ctx0,
        &expert,
        &components.estimator,
        &components.graph,
        &components.parent_means,
        &config.federation(),
        Schedule::Sequential,
    )?;
    let federation_summary = FederationSummary {
        query_id: query.id.clone(),
        t_star: outcome.t_star,
        cancelled_sites: outcome.cancelled_sites.clone(),
        executed_steps: outcome.executed_steps.clone(),
        events: outcome.events.clone(),
    };
    let step_records: Vec<QueryStepRecord> = outcome
        .log
        .iter()
        .map(|r| QueryStepRecord {
            query_id: query.id.clone(),
            site_id: r.site_id,
            step: r.step,
            u_base: r.u_base,
            delta_stability: r.delta_stability,
            confidence: r.confidence,
            halted: r.halted,
        })
        .collect();

    // Phase 3: consensus
    let encoder = HashedBagEncoder::default();
    let embeddings = outcome
        .events
        .iter()
        .map(|e| embed_answer(&encoder, &e.answer, e.site_id, e.confidence))
        .collect::<Result<Vec<_>>>()?;
    let clusters = cluster_answers(&embeddings, config.cluster_radius, config.min_points)?;
    let consensus = resolve(
        &clusters,
        &outcome.events,
        config.supermajority_fraction,
        &query.id,
    )?;
    let (final_answer, from_stub) = match consensus.mode {
        ConsensusMode::Supermajority => (
            consensus
                .final_answer
                .clone()
                .expect("supermajority carries an answer"),
            false,
        ),
        ConsensusMode::Synthesis => {
            let prompt = consensus
                .prompt
                .as_deref()
                .expect("synthesis carries a prompt");
            let synthesized = synthesize(reviewer, prompt, &outcome.events)?;
            (synthesized.answer, synthesized.from_stub)
        }
    };
    let outcome_record = OutcomeRecord {
        query_id: query.id.clone(),
        mode: consensus.mode,
        final_answer,
        winning_cluster: consensus.winning_cluster,
        clusters: consensus.clusters,
        prompt: consensus.prompt,
        from_stub,
    };

    Ok((
        routing_record,
        federation_summary,
        outcome_record,
        step_records,
    ))
}

/// Run every world query through the three phases and score the run.
pub fn run_pipeline(
    world: &SyntheticWorld,
    components: &PipelineComponents,
    config: &RunConfig,
) -> Result<(RunReport, PipelineArtifacts)> {
    config.validate()?;
    if components.kbs.iter().any(|kb| kb.is_empty()) {
        return Err(Error::domain("pipeline needs non-empty knowledge bases"));
    }
    let reviewer = StubReviewer;
    let mut artifacts = PipelineArtifacts::default();
    let mut routed_correctly = 0usize;
    let mut gold = Vec::with_capacity(world.queries.len());
    let mut predicted = Vec::with_capacity(world.queries.len());
    let mut executed: Vec<usize> = Vec::new();

    for query in &world.queries {
        let start = Instant::now();
        let (routing, federation, outcome, steps) =
            run_one_query(world, components, config, query, &reviewer)?;
        artifacts
            .per_query_ms
            .push(start.elapsed().as_secs_f64() * 1e3);

        if routing.active_experts[0] == query.true_domain {
            routed_correctly += 1;
        }
        executed.extend(&federation.executed_steps);
        gold.push(query.true_answer.clone());
        predicted.push(outcome.final_answer.clone());

        artifacts.routing.push(routing);
        artifacts.federation.push(federation);
        artifacts.outcomes.push(outcome);
        artifacts.steps.extend(steps);
    }

    let n = world.queries.len();
    let task_accuracy =
        gold.iter().zip(&predicted).filter(|(g, p)| g == p).count() as f64 / n as f64;
    let avg_adaptive = crate::federation::average_chain_length(&executed)?;
    // with gamma unreachable every site runs exactly t_max steps, so the
    // fixed-depth average needs no second simulation
    let avg_fixed = config.t_max as f64;
    let report = RunReport {
        seed: config.seed,
        num_queries: n,
        routing_accuracy: routed_correctly as f64 / n as f64,
        task_accuracy,
        f1: macro_f1(&gold, &predicted, &world.answer_labels),
        avg_chain_length_adaptive: avg_adaptive,
        avg_chain_length_fixed: avg_fixed,
        reduction_percent: 100.0 * (1.0 - avg_adaptive / avg_fixed),
        config: config.clone(),
    };
    Ok((report, artifacts))
}

/// Adaptive-vs-fixed comparison over a gamma grid on identical queries and
/// seeds. The last implicit point is the fixed-depth baseline itself.
pub fn compare_adaptive_vs_fixed(
    world: &SyntheticWorld,
    components: &PipelineComponents,
    config: &RunConfig,
    gammas: &[f64],
) -> Result<(Vec<SweepRow>, RunReport)> {
    let fixed_config = RunConfig {
        gamma: 1.0,
        ..config.clone()
    };
    let (fixed_report, _) = run_pipeline(world, components, &fixed_config)?;

    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let gamma_config = RunConfig {
            gamma,
            ..config.clone()
        };
        let (report, _) = run_pipeline(world, components, &gamma_config)?;
        rows.push(SweepRow {
            gamma,
            task_accuracy: report.task_accuracy,
            f1: report.f1,
            avg_chain_length: report.avg_chain_length_adaptive,
            reduction_percent: report.reduction_percent,
        });
    }
    Ok((rows, fixed_report))
}

fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        writeln!(out)?;
    }
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path, stage: &str) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            stage: stage.into(),
            path: path.to_path_buf(),
        });
    }
    use std::io::BufRead;
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for line in file.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok(records)
}

/// Write the run directory: `report.json`, `routing.jsonl`,
/// `federation.jsonl`, `outcome.jsonl`, `steps.jsonl`, `config.json`,
/// and `timing.json`.
pub fn write_run_dir(dir: &Path, report: &RunReport, artifacts: &PipelineArtifacts) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    report.save(&dir.join("report.json"))?;
    report.config.save(&dir.join("config.json"))?;
    write_jsonl(&artifacts.routing, &dir.join("routing.jsonl"))?;
    write_jsonl(&artifacts.federation, &dir.join("federation.jsonl"))?;
    write_jsonl(&artifacts.outcomes, &dir.join("outcome.jsonl"))?;
    write_jsonl(&artifacts.steps, &dir.join("steps.jsonl"))?;
    if let Some(timing) = Timing::from_samples(artifacts.per_query_ms.clone()) {
        timing.save(&dir.join("timing.json"))?;
    }
    Ok(())
}

/// Recompute the report from the logs in a run directory plus the world,
/// an independent recount of what `run_pipeline` aggregated in memory.
pub fn recount_report(dir: &Path, world: &SyntheticWorld) -> Result<RunReport> {
    let config = RunConfig::load(&dir.join("config.json"))?;
    let routing: Vec<RoutingRecord> = read_jsonl(&dir.join("routing.jsonl"), "route")?;
    let federation: Vec<FederationSummary> = read_jsonl(&dir.join("federation.jsonl"), "simulate")?;
    let outcomes: Vec<OutcomeRecord> = read_jsonl(&dir.join("outcome.jsonl"), "simulate")?;

    let lookup = |id: &str| -> Result<&SyntheticQuery> {
        world
            .queries
            .iter()
            .find(|q| q.id == id)
            .ok_or_else(|| Error::domain(format!("query `{id}` not in world")))
    };

    let mut routed_correctly = 0usize;
    for record in &routing {
        if record.active_experts[0] == lookup(&record.query_id)?.true_domain {
            routed_correctly += 1;
        }
    }
    let mut gold = Vec::new();
    let mut predicted = Vec::new();
    for outcome in &outcomes {
        gold.push(lookup(&outcome.query_id)?.true_answer.clone());
        predicted.push(outcome.final_answer.clone());
    }
    let executed: Vec<usize> = federation
        .iter()
        .flat_map(|f| f.executed_steps.iter().copied())
        .collect();

    let n = routing.len();
    let avg_adaptive = crate::federation::average_chain_length(&executed)?;
    let avg_fixed = config.t_max as f64;
    Ok(RunReport {
        seed: config.seed,
        num_queries: n,
        routing_accuracy: routed_correctly as f64 / n as f64,
        task_accuracy: gold.iter().zip(&predicted).filter(|(g, p)| g == p).count() as f64
            / n as f64,
        f1: macro_f1(&gold, &predicted, &world.answer_labels),
        avg_chain_length_adaptive: avg_adaptive,
        avg_chain_length_fixed: avg_fixed,
        reduction_percent: 100.0 * (1.0 - avg_adaptive / avg_fixed),
        config,
    })
}
