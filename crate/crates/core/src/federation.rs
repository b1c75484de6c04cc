//! Multi-site adaptive reasoning with quorum termination.
//!
//! N sites expand the same augmented context independently. Each step a
//! site scores its own hidden state, adjusts for stability under a
//! parent-mean perturbation, and halts once the combined confidence clears
//! γ. The coordinator stops the whole round at `t*`, the step at which the
//! M-th site halted, and collects exactly the events from sites that
//! halted by then. Sites share no mutable state, so any execution schedule
//! yields the same outcome; the tests hold that to byte equality.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::metacog::{
    argmax, confidence, most_influential_parent, perturb, stability_adjustment,
    ConfidenceEstimator, DependencyGraph, ParentMeans,
};
use crate::policy::FeatureVector;

pub const DEFAULT_N_SITES: usize = 5;
pub const DEFAULT_QUORUM: usize = 3;
pub const DEFAULT_GAMMA: f64 = 0.8;
pub const DEFAULT_T_MAX: usize = 12;

/// What the federation loop needs from a reasoning expert. Implementations
/// must be deterministic in `(site_id, step)`; per-site divergence comes
/// from seeding inside the expert, never from shared mutable state.
pub trait SiteExpert: Sync {
    fn domain_id(&self) -> usize;
    fn answer_labels(&self) -> &[String];
    /// Decoder hidden state at step `t` (1-based) on the given site.
    fn hidden_state(&self, site_id: usize, step: usize) -> FeatureVector;
    /// Output distribution over the answer labels given a hidden state.
    fn predict(&self, h: &FeatureVector) -> Vec<f64>;
    /// The reasoning unit appended at step `t` when the site continues.
    fn reasoning_unit(&self, site_id: usize, step: usize) -> String;
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FederationConfig {
    pub n_sites: usize,
    pub quorum: usize,
    pub gamma: f64,
    pub t_max: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            n_sites: DEFAULT_N_SITES,
            quorum: DEFAULT_QUORUM,
            gamma: DEFAULT_GAMMA,
            t_max: DEFAULT_T_MAX,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.quorum == 0 || self.quorum > self.n_sites {
            return Err(Error::config(format!(
                "quorum must satisfy 1 <= M <= N, got M={} N={}",
                self.quorum, self.n_sites
            )));
        }
        if self.t_max == 0 {
            return Err(Error::config("t_max must be >= 1"));
        }
        // gamma == 1.0 is allowed and unreachable: it degenerates the run
        // to fixed depth since confidence is strictly below 1
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// One site's reasoning state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteState {
    pub site_id: usize,
    pub context: Vec<String>,
    pub step: usize,
    pub halted: bool,
    pub halt_step: Option<usize>,
    pub confidence_trace: Vec<f64>,
}

impl SiteState {
    pub fn new(site_id: usize, ctx0: String) -> Self {
        SiteState {
            site_id,
            context: vec![ctx0],
            step: 0,
            halted: false,
            halt_step: None,
            confidence_trace: Vec::new(),
        }
    }
}

/// What a site reports to the coordinator when it halts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaltEvent {
    pub site_id: usize,
    pub chain: Vec<String>,
    pub answer: String,
    pub confidence: f64,
    pub step: usize,
    pub forced: bool,
}

/// One line of the per-step run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub site_id: usize,
    pub step: usize,
    pub u_base: f64,
    pub delta_stability: f64,
    pub confidence: f64,
    pub halted: bool,
}

/// Advance one site by one step.
///
/// Computes the hidden state, the base score, the parent-perturbed
/// stability adjustment and the final confidence. At `c >= gamma` the site
/// halts and reports; at `t_max` without clearing gamma it halts with a
/// flagged forced event so aggregation always has input.
pub fn site_step(
    mut site: SiteState,
    expert: &dyn SiteExpert,
    estimator: &ConfidenceEstimator,
    graph: &DependencyGraph,
    parent_means: &ParentMeans,
    gamma: f64,
    t_max: usize,
) -> Result<(SiteState, Option<HaltEvent>, StepRecord)> {
    if site.halted {
        return Err(Error::domain(format!(
            "site {} is halted and cannot step",
            site.site_id
        )));
    }
    let t = site.step + 1;
    if t > t_max {
        return Err(Error::domain(format!(
            "site {} stepped past t_max={t_max}",
            site.site_id
        )));
    }

    let h = expert.hidden_state(site.site_id, t);
    let u_base = estimator.base_score(&h)?;
    let parent = most_influential_parent(graph, expert.domain_id())?;
    let delta = match parent.and_then(|k| parent_means.get(k)) {
        Some(mu) => {
            let h_perturbed = perturb(&h, mu, estimator.epsilon_interp)?;
            stability_adjustment(|x| expert.predict(x), &h, &h_perturbed, estimator.s_norm)?
        }
        // no parent to perturb toward: the adjustment is neutral
        None => 0.0,
    };
    let c = confidence(u_base, delta, estimator.alpha);

    site.step = t;
    site.confidence_trace.push(c);

    let mut event = None;
    if c >= gamma {
        site.halted = true;
        site.halt_step = Some(t);
        event = Some(HaltEvent {
            site_id: site.site_id,
            chain: site.context.clone(),
            answer: expert.answer_labels()[argmax(&expert.predict(&h))].clone(),
            confidence: c,
            step: t,
            forced: false,
        });
    } else {
        site.context.push(expert.reasoning_unit(site.site_id, t));
        if t == t_max {
            site.halted = true;
            site.halt_step = Some(t);
            event = Some(HaltEvent {
                site_id: site.site_id,
                chain: site.context.clone(),
                answer: expert.answer_labels()[argmax(&expert.predict(&h))].clone(),
                confidence: c,
                step: t,
                forced: true,
            });
        }
    }

    let record = StepRecord {
        site_id: site.site_id,
        step: t,
        u_base,
        delta_stability: delta,
        confidence: c,
        halted: site.halted,
    };
    Ok((site, event, record))
}

/// A full single-site trajectory: final state, the (exactly one) halt
/// event, and the per-step log.
#[derive(Debug, Clone)]
pub struct SiteRun {
    pub state: SiteState,
    pub event: HaltEvent,
    pub log: Vec<StepRecord>,
}

pub fn run_site(
    site_id: usize,
    ctx0: &str,
    expert: &dyn SiteExpert,
    estimator: &ConfidenceEstimator,
    graph: &DependencyGraph,
    parent_means: &ParentMeans,
    config: &FederationConfig,
) -> Result<SiteRun> {
    let mut site = SiteState::new(site_id, ctx0.to_string());
    let mut log = Vec::new();
    loop {
        let (next, event, record) = site_step(
            site,
            expert,
            estimator,
            graph,
            parent_means,
            config.gamma,
            config.t_max,
        )?;
        site = next;
        log.push(record);
        if let Some(event) = event {
            return Ok(SiteRun {
                state: site,
                event,
                log,
            });
        }
    }
}

/// How site trajectories are driven; all schedules must produce identical
/// outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    Sequential,
    ReverseSequential,
    Parallel,
}

/// Coordinator view of one federated round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FederationOutcome {
    /// The M-th smallest individual halt step.
    pub t_star: usize,
    /// Events from sites halted at or before `t_star`, ordered by
    /// `(step, site_id)`.
    pub events: Vec<HaltEvent>,
    pub cancelled_sites: Vec<usize>,
    /// Steps each site actually executed: its halt step, or `t_star` for
    /// sites cancelled mid-flight.
    pub executed_steps: Vec<usize>,
    /// Per-step records, truncated at `t_star` for cancelled sites.
    pub log: Vec<StepRecord>,
}

pub fn run_federated(
    ctx0: &str,
    expert: &dyn SiteExpert,
    estimator: &ConfidenceEstimator,
    graph: &DependencyGraph,
    parent_means: &ParentMeans,
    config: &FederationConfig,
    schedule: Schedule,
) -> Result<FederationOutcome> {
    config.validate()?;
    estimator.validate()?;

    let run_one = |site_id: usize| {
        run_site(
            site_id,
            ctx0,
            expert,
            estimator,
            graph,
            parent_means,
            config,
        )
    };

    let mut runs: Vec<Option<SiteRun>> = (0..config.n_sites).map(|_| None).collect();
    match schedule {
        Schedule::Sequential => {
            for (site_id, slot) in runs.iter_mut().enumerate() {
                *slot = Some(run_one(site_id)?);
            }
        }
        Schedule::ReverseSequential => {
            for (site_id, slot) in runs.iter_mut().enumerate().rev() {
                *slot = Some(run_one(site_id)?);
            }
        }
        Schedule::Parallel => {
            let results: Vec<Result<SiteRun>> = std::thread::scope(|scope| {
                let handles: Vec<_> = (0..config.n_sites)
                    .map(|site_id| scope.spawn(move || run_one(site_id)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("site thread panicked"))
                    .collect()
            });
            for (site_id, result) in results.into_iter().enumerate() {
                runs[site_id] = Some(result?);
            }
        }
    }
    let runs: Vec<SiteRun> = runs
        .into_iter()
        .map(|r| r.expect("all sites ran"))
        .collect();

    // t* = M-th order statistic of the individual halt steps
    let mut halt_steps: Vec<usize> = runs.iter().map(|r| r.event.step).collect();
    halt_steps.sort_unstable();
    let t_star = halt_steps[config.quorum - 1];

    let mut events: Vec<HaltEvent> = runs
        .iter()
        .filter(|r| r.event.step <= t_star)
        .map(|r| r.event.clone())
        .collect();
    events.sort_by_key(|e| (e.step, e.site_id));

    let cancelled_sites: Vec<usize> = runs
        .iter()
        .filter(|r| r.event.step > t_star)
        .map(|r| r.event.site_id)
        .collect();

    let executed_steps: Vec<usize> = runs.iter().map(|r| r.event.step.min(t_star)).collect();

    let mut log = Vec::new();
    for run in &runs {
        for record in &run.log {
            if record.step <= t_star {
                log.push(record.clone());
            }
        }
    }

    Ok(FederationOutcome {
        t_star,
        events,
        cancelled_sites,
        executed_steps,
        log,
    })
}

/// Mean executed reasoning steps per site over a set of step counts.
pub fn average_chain_length(step_counts: &[usize]) -> Result<f64> {
    if step_counts.is_empty() {
        return Err(Error::domain("no step counts to average"));
    }
    Ok(step_counts.iter().sum::<usize>() as f64 / step_counts.len() as f64)
}

/// Fixed-depth counterpart used for efficiency comparisons: every site
/// would run to `t_max`.
pub fn fixed_depth_config(config: &FederationConfig) -> FederationConfig {
    FederationConfig {
        gamma: 1.0,
        ..*config
    }
}

// Derived, not stored: the sigmoid of the logged base score, should anyone
// need the stage-1 confidence from a run log.
pub fn base_confidence_of(record: &StepRecord) -> f64 {
    sigmoid(record.u_base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metacog::GainTable;

    /// Deterministic scripted expert: hidden state is a 2-dim function of
    /// (site, step); answers peak on label 0 for even sites.
    struct ScriptedExpert {
        labels: Vec<String>,
        domain: usize,
        ramp: f64,
    }

    impl ScriptedExpert {
        fn new(ramp: f64) -> Self {
            ScriptedExpert {
                labels: vec!["yes".into(), "no".into()],
                domain: 0,
                ramp,
            }
        }
    }

    impl SiteExpert for ScriptedExpert {
        fn domain_id(&self) -> usize {
            self.domain
        }
        fn answer_labels(&self) -> &[String] {
            &self.labels
        }
        fn hidden_state(&self, site_id: usize, step: usize) -> FeatureVector {
            // confidence ramps with step at a per-site offset
            let x = self.ramp * (step as f64 + site_id as f64);
            FeatureVector::new(vec![x, -x]).unwrap()
        }
        fn predict(&self, h: &FeatureVector) -> Vec<f64> {
            let p = sigmoid(h.values()[0]);
            if p <= 0.0 || p >= 1.0 {
                // keep it a valid distribution at extremes
                return if h.values()[0] > 0.0 {
                    vec![1.0, 0.0]
                } else {
                    vec![0.0, 1.0]
                };
            }
            vec![p, 1.0 - p]
        }
        fn reasoning_unit(&self, site_id: usize, step: usize) -> String {
            format!("s{site_id}-step{step}")
        }
    }

    /// Estimator that maps hidden[0] straight through: z = h[0].
    fn passthrough_estimator() -> ConfidenceEstimator {
        let mut est = ConfidenceEstimator::seeded(2, 1, 0);
        est.weights_1 = vec![vec![10.0, 0.0]];
        est.bias_1 = vec![0.0];
        est.weights_2 = vec![1.0];
        est.bias_2 = 0.0;
        est
    }

    fn constant_score_estimator(z: f64) -> ConfidenceEstimator {
        let mut est = ConfidenceEstimator::seeded(2, 1, 0);
        est.weights_1 = vec![vec![0.0, 0.0]];
        est.bias_1 = vec![0.0];
        est.weights_2 = vec![0.0];
        est.bias_2 = z;
        est
    }

    fn no_graph() -> (DependencyGraph, ParentMeans) {
        (DependencyGraph::empty(1), ParentMeans::default())
    }

    #[test]
    fn immediately_confident_site_halts_at_step_one() {
        let expert = ScriptedExpert::new(1.0);
        let est = constant_score_estimator(5.0); // sigma(5) ≈ 0.993
        let (graph, means) = no_graph();
        let config = FederationConfig {
            n_sites: 1,
            quorum: 1,
            gamma: 0.9,
            t_max: 8,
        };
        let run = run_site(0, "ctx0", &expert, &est, &graph, &means, &config).unwrap();
        assert_eq!(run.event.step, 1);
        assert!(!run.event.forced);
        assert_eq!(run.event.chain.len(), 1, "only the initial context");
        assert_eq!(run.state.confidence_trace.len(), 1);
    }

    #[test]
    fn pinned_low_estimator_forces_a_halt_at_t_max() {
        let expert = ScriptedExpert::new(0.0);
        let est = constant_score_estimator(-5.0);
        let (graph, means) = no_graph();
        let config = FederationConfig {
            n_sites: 1,
            quorum: 1,
            gamma: 0.8,
            t_max: 6,
        };
        let run = run_site(0, "ctx0", &expert, &est, &graph, &means, &config).unwrap();
        assert_eq!(run.event.step, 6);
        assert!(run.event.forced);
        assert!(run.event.confidence < 0.8);
        // initial context plus one unit per non-halted step
        assert_eq!(run.event.chain.len(), 1 + 6);
        assert_eq!(run.log.len(), 6);
    }

    #[test]
    fn halted_site_cannot_step_again() {
        let expert = ScriptedExpert::new(1.0);
        let est = constant_score_estimator(5.0);
        let (graph, means) = no_graph();
        let run = run_site(
            0,
            "ctx0",
            &expert,
            &est,
            &graph,
            &means,
            &FederationConfig {
                n_sites: 1,
                quorum: 1,
                gamma: 0.5,
                t_max: 4,
            },
        )
        .unwrap();
        let err = site_step(run.state, &expert, &est, &graph, &means, 0.5, 4);
        assert!(err.is_err());
    }

    #[test]
    fn quorum_takes_the_mth_smallest_halt_step() {
        // ramp 0.35: z = 0.35·10·(t + site); site 4 crosses first
        let expert = ScriptedExpert::new(0.35);
        let est = passthrough_estimator();
        let (graph, means) = no_graph();
        let config = FederationConfig {
            n_sites: 5,
            quorum: 3,
            gamma: 0.97,
            t_max: 16,
        };
        let outcome = run_federated(
            "ctx0",
            &expert,
            &est,
            &graph,
            &means,
            &config,
            Schedule::Sequential,
        )
        .unwrap();

        // oracle: each site independently
        let mut steps: Vec<usize> = (0..5)
            .map(|s| {
                run_site(s, "ctx0", &expert, &est, &graph, &means, &config)
                    .unwrap()
                    .event
                    .step
            })
            .collect();
        steps.sort_unstable();
        assert_eq!(outcome.t_star, steps[2]);
        assert!(outcome.events.iter().all(|e| e.step <= outcome.t_star));
        assert!(outcome.events.len() >= 3);

        // no duplicate site contributions
        let mut ids: Vec<usize> = outcome.events.iter().map(|e| e.site_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), outcome.events.len());
    }

    #[test]
    fn quorum_of_n_waits_for_everyone() {
        let expert = ScriptedExpert::new(0.35);
        let est = passthrough_estimator();
        let (graph, means) = no_graph();
        let config = FederationConfig {
            n_sites: 4,
            quorum: 4,
            gamma: 0.97,
            t_max: 16,
        };
        let outcome = run_federated(
            "ctx0",
            &expert,
            &est,
            &graph,
            &means,
            &config,
            Schedule::Sequential,
        )
        .unwrap();
        let max_step = outcome.events.iter().map(|e| e.step).max().unwrap();
        assert_eq!(outcome.t_star, max_step);
        assert_eq!(outcome.events.len(), 4);
        assert!(outcome.cancelled_sites.is_empty());
    }

    #[test]
    fn schedules_agree_byte_for_byte() {
        let expert = ScriptedExpert::new(0.3);
        let est = passthrough_estimator();
        let (graph, means) = no_graph();
        let config = FederationConfig {
            n_sites: 6,
            quorum: 3,
            gamma: 0.95,
            t_max: 12,
        };
        let mut serialized = Vec::new();
        for schedule in [
            Schedule::Sequential,
            Schedule::ReverseSequential,
            Schedule::Parallel,
        ] {
            let outcome =
                run_federated("ctx0", &expert, &est, &graph, &means, &config, schedule).unwrap();
            serialized.push(serde_json::to_vec(&outcome).unwrap());
        }
        assert_eq!(serialized[0], serialized[1]);
        assert_eq!(serialized[0], serialized[2]);
    }

    #[test]
    fn site_trace_is_independent_of_other_sites() {
        let expert = ScriptedExpert::new(0.3);
        let est = passthrough_estimator();
        let (graph, means) = no_graph();
        let solo = FederationConfig {
            n_sites: 1,
            quorum: 1,
            gamma: 0.95,
            t_max: 12,
        };
        let crowd = FederationConfig {
            n_sites: 8,
            quorum: 8,
            gamma: 0.95,
            t_max: 12,
        };
        let solo_run = run_site(3, "ctx0", &expert, &est, &graph, &means, &solo).unwrap();
        let crowd_run = run_site(3, "ctx0", &expert, &est, &graph, &means, &crowd).unwrap();
        assert_eq!(
            solo_run.state.confidence_trace,
            crowd_run.state.confidence_trace
        );
    }

    #[test]
    fn parent_perturbation_lowers_confidence_for_unstable_predictions() {
        // graph 1 -> 0, parent mean far from the hidden state, so the
        // perturbed distribution diverges and delta goes negative
        let mut table = GainTable::new();
        table.insert((1, 0), vec![(0.9, 0.5), (0.88, 0.5), (0.92, 0.5)]);
        let graph = crate::metacog::build_dependency_graph(2, &table, 0.0, Some(0.05)).unwrap();
        let mut means = ParentMeans::default();
        means.insert(1, FeatureVector::new(vec![-40.0, 40.0]).unwrap());

        let expert = ScriptedExpert::new(0.12);
        let mut est = passthrough_estimator();
        est.epsilon_interp = 0.5;
        let config = FederationConfig {
            n_sites: 1,
            quorum: 1,
            gamma: 0.9999,
            t_max: 3,
        };
        let with_parent = run_site(0, "c", &expert, &est, &graph, &means, &config).unwrap();
        let no_graph = DependencyGraph::empty(2);
        let without = run_site(0, "c", &expert, &est, &no_graph, &means, &config).unwrap();
        for (a, b) in with_parent
            .state
            .confidence_trace
            .iter()
            .zip(&without.state.confidence_trace)
        {
            assert!(a < b, "perturbation should not raise confidence");
        }
        assert!(with_parent.log.iter().all(|r| r.delta_stability <= 0.0));
        assert!(without.log.iter().all(|r| r.delta_stability == 0.0));
    }

    #[test]
    fn gamma_one_degenerates_to_fixed_depth() {
        let expert = ScriptedExpert::new(0.5);
        let est = passthrough_estimator();
        let (graph, means) = no_graph();
        let config = fixed_depth_config(&FederationConfig {
            n_sites: 3,
            quorum: 2,
            gamma: 0.8,
            t_max: 5,
        });
        assert_eq!(config.gamma, 1.0);
        let outcome = run_federated(
            "ctx0",
            &expert,
            &est,
            &graph,
            &means,
            &config,
            Schedule::Sequential,
        )
        .unwrap();
        assert_eq!(outcome.t_star, 5);
        assert_eq!(outcome.events.len(), 3);
        assert!(outcome.events.iter().all(|e| e.forced && e.step == 5));
        assert_eq!(average_chain_length(&outcome.executed_steps).unwrap(), 5.0);
    }

    #[test]
    fn average_chain_length_arithmetic() {
        assert_eq!(average_chain_length(&[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(average_chain_length(&[2, 4]).unwrap(), 3.0);
        assert!(average_chain_length(&[]).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_quorum = FederationConfig {
            n_sites: 3,
            quorum: 4,
            gamma: 0.8,
            t_max: 5,
        };
        assert!(bad_quorum.validate().is_err());
        let bad_gamma = FederationConfig {
            gamma: 0.0,
            ..FederationConfig::default()
        };
        assert!(bad_gamma.validate().is_err());
        assert!(FederationConfig::default().validate().is_ok());
    }
}
