//! Three-stage zero-shot routing: aggregate retrieval scores, standardize
//! them against held-out statistics, and gate through a temperature softmax.
//!
//! There is nothing learned here — retrieval similarity is the gating
//! signal, which keeps routing decisions transparent and replayable.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::knowledge::{retrieve_all, DomainKB, MultimodalQuery, RetrievalResult};
use crate::math::{entropy, log_sum_exp, mean_std};

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_ENTROPY_THRESHOLD: f64 = 0.8;
pub const DEFAULT_MAX_ACTIVE: usize = 2;

/// Per-domain score statistics, estimated once on a held-out set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DomainStats {
    pub domain_id: usize,
    pub mu: f64,
    pub sigma: f64,
    pub epsilon: f64,
    pub sample_size: usize,
}

/// Softmax gating probabilities with the scores they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDistribution {
    pub probs: Vec<f64>,
    pub temperature: f64,
    pub raw_scores: Vec<f64>,
    pub normalized_scores: Vec<f64>,
}

impl RoutingDistribution {
    pub fn argmax(&self) -> usize {
        // ties fall to the lower domain id
        let mut best = 0;
        for (d, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = d;
            }
        }
        best
    }
}

/// Which experts a query activates, ordered by descending probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertSelection {
    pub active_experts: Vec<usize>,
    pub entropy: f64,
    pub multi_activated: bool,
}

impl ExpertSelection {
    pub fn primary(&self) -> usize {
        self.active_experts[0]
    }
}

/// Stage 1: arithmetic mean of the top-K similarities.
pub fn aggregate_scores(result: &RetrievalResult) -> Result<f64> {
    if result.hits.is_empty() {
        return Err(Error::domain(format!(
            "no retrieval hits to aggregate for domain {}",
            result.domain_id
        )));
    }
    Ok(result.hits.iter().map(|h| h.similarity).sum::<f64>() / result.hits.len() as f64)
}

/// Estimate per-domain score statistics from held-out queries.
///
/// Uses the population standard deviation, which is well-defined even for a
/// single held-out query.
pub fn calibrate_stats(
    heldout: &[MultimodalQuery],
    kbs: &[DomainKB],
    k: usize,
    epsilon: f64,
) -> Result<Vec<DomainStats>> {
    if heldout.is_empty() {
        return Err(Error::domain("held-out calibration set must be non-empty"));
    }
    if epsilon <= 0.0 {
        return Err(Error::domain("epsilon must be > 0"));
    }
    let mut per_domain: Vec<Vec<f64>> = vec![Vec::with_capacity(heldout.len()); kbs.len()];
    for query in heldout {
        for result in retrieve_all(kbs, query, k)? {
            let s = aggregate_scores(&result)?;
            per_domain[result.domain_id].push(s);
        }
    }
    Ok(per_domain
        .iter()
        .enumerate()
        .map(|(domain_id, scores)| {
            let (mu, sigma) = mean_std(scores);
            DomainStats {
                domain_id,
                mu,
                sigma,
                epsilon,
                sample_size: scores.len(),
            }
        })
        .collect())
}

/// Stage 2: `s̃ = (s − μ) / (σ + ε)`.
pub fn normalize_score(s: f64, stats: &DomainStats) -> f64 {
    (s - stats.mu) / (stats.sigma + stats.epsilon)
}

/// Stage 3: temperature softmax over normalized scores, max-shifted.
pub fn gate(normalized_scores: &[f64], temperature: f64) -> Result<RoutingDistribution> {
    if temperature <= 0.0 {
        return Err(Error::domain(format!(
            "softmax temperature must be > 0, got {temperature}"
        )));
    }
    if normalized_scores.is_empty() {
        return Err(Error::domain("gate needs at least one domain score"));
    }
    let scaled: Vec<f64> = normalized_scores.iter().map(|s| s / temperature).collect();
    let lse = log_sum_exp(&scaled);
    let probs: Vec<f64> = scaled.iter().map(|s| (s - lse).exp()).collect();
    Ok(RoutingDistribution {
        probs,
        temperature,
        raw_scores: normalized_scores.to_vec(),
        normalized_scores: normalized_scores.to_vec(),
    })
}

/// Full stage-1..3 pipeline from per-domain retrieval results.
pub fn route(
    results: &[RetrievalResult],
    stats: &[DomainStats],
    temperature: f64,
) -> Result<RoutingDistribution> {
    if results.len() != stats.len() {
        return Err(Error::config(format!(
            "{} retrieval results but {} domain stats",
            results.len(),
            stats.len()
        )));
    }
    let raw: Vec<f64> = results
        .iter()
        .map(aggregate_scores)
        .collect::<Result<_>>()?;
    let normalized: Vec<f64> = raw
        .iter()
        .zip(stats)
        .map(|(&s, st)| normalize_score(s, st))
        .collect();
    let mut dist = gate(&normalized, temperature)?;
    dist.raw_scores = raw;
    Ok(dist)
}

/// Entropy of the routing distribution normalized to [0, 1] by `ln D`.
/// Defined as 0 for a single domain.
pub fn normalized_entropy(probs: &[f64]) -> f64 {
    if probs.len() < 2 {
        return 0.0;
    }
    entropy(probs) / (probs.len() as f64).ln()
}

/// Pick the argmax expert, and under high routing uncertainty (normalized
/// entropy above the threshold) the top `max_active` experts.
pub fn select_experts(
    dist: &RoutingDistribution,
    entropy_threshold: f64,
    max_active: usize,
) -> Result<ExpertSelection> {
    if max_active == 0 {
        return Err(Error::domain("max_active must be >= 1"));
    }
    let h = normalized_entropy(&dist.probs);
    let mut order: Vec<usize> = (0..dist.probs.len()).collect();
    order.sort_by(|&a, &b| {
        dist.probs[b]
            .partial_cmp(&dist.probs[a])
            .unwrap()
            .then_with(|| a.cmp(&b))
    });
    let n_active = if h > entropy_threshold {
        max_active.min(dist.probs.len())
    } else {
        1
    };
    let active: Vec<usize> = order.into_iter().take(n_active).collect();
    Ok(ExpertSelection {
        multi_activated: active.len() > 1,
        active_experts: active,
        entropy: h,
    })
}

/// `stats.json`: the calibrated per-domain statistics.
pub fn write_stats(stats: &[DomainStats], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(file, stats)?;
    Ok(())
}

pub fn read_stats(path: &Path) -> Result<Vec<DomainStats>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            stage: "calibrate".into(),
            path: path.to_path_buf(),
        });
    }
    Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
}

/// One line of the routing decision log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub query_id: String,
    pub raw_scores: Vec<f64>,
    pub normalized_scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub active_experts: Vec<usize>,
    pub entropy: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::Hit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn result_with(sims: &[f64]) -> RetrievalResult {
        RetrievalResult {
            domain_id: 0,
            hits: sims
                .iter()
                .enumerate()
                .map(|(i, &similarity)| Hit {
                    doc_id: format!("d{i}"),
                    similarity,
                })
                .collect(),
            k: sims.len(),
        }
    }

    #[test]
    fn aggregation_is_the_arithmetic_mean() {
        assert_eq!(
            aggregate_scores(&result_with(&[0.5, 0.5, 0.5])).unwrap(),
            0.5
        );
        let s = aggregate_scores(&result_with(&[0.9, 0.8, 0.7])).unwrap();
        assert!((s - 0.8).abs() < 1e-15);
        assert!(aggregate_scores(&result_with(&[])).is_err());

        // sum/K oracle on random inputs
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.random_range(1..12);
            let sims: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let oracle = sims.iter().sum::<f64>() / n as f64;
            assert_eq!(aggregate_scores(&result_with(&sims)).unwrap(), oracle);
        }
    }

    #[test]
    fn normalization_centers_and_guards() {
        let stats = DomainStats {
            domain_id: 0,
            mu: 0.5,
            sigma: 0.1,
            epsilon: 1e-8,
            sample_size: 10,
        };
        assert_eq!(normalize_score(0.5, &stats), 0.0);
        let direct = (0.8 - 0.5) / (0.1 + 1e-8);
        assert_eq!(normalize_score(0.8, &stats), direct);

        let degenerate = DomainStats {
            sigma: 0.0,
            ..stats
        };
        let v = normalize_score(0.6, &degenerate);
        assert!(v.is_finite());
        assert_eq!(v, (0.6 - 0.5) / 1e-8);
    }

    #[test]
    fn calibration_matches_two_pass_oracle() {
        // degenerate: identical scores give sigma 0
        let (mu, sigma) = mean_std(&[0.3, 0.3, 0.3]);
        assert_eq!((mu, sigma), (0.3, 0.0));
        // {0.2, 0.4}: mu 0.3, population sigma 0.1
        let (mu, sigma) = mean_std(&[0.2, 0.4]);
        assert!((mu - 0.3).abs() < 1e-15);
        assert!((sigma - 0.1).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.random_range(1..30);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (mu, sigma) = mean_std(&xs);
            let mu_oracle = xs.iter().sum::<f64>() / n as f64;
            let var_oracle = xs.iter().map(|x| (x - mu_oracle).powi(2)).sum::<f64>() / n as f64;
            assert!((mu - mu_oracle).abs() < 1e-12);
            assert!((sigma - var_oracle.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_uniform_for_equal_scores() {
        for d in 1..6 {
            let dist = gate(&vec![0.7; d], 1.0).unwrap();
            for &p in &dist.probs {
                assert!((p - 1.0 / d as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_two_way_matches_softmax_oracle() {
        let dist = gate(&[1.0, 0.0], 1.0).unwrap();
        let z = 1.0 + (-1.0f64).exp();
        assert!((dist.probs[0] - 1.0 / z).abs() < 1e-12);
        assert!((dist.probs[1] - (-1.0f64).exp() / z).abs() < 1e-12);
    }

    #[test]
    fn gate_probabilities_sum_to_one_and_stay_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let d = rng.random_range(2..8);
            let scores: Vec<f64> = (0..d).map(|_| rng.random_range(-8.0..8.0)).collect();
            let tau = rng.random_range(0.5..5.0);
            let dist = gate(&scores, tau).unwrap();
            let total: f64 = dist.probs.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(dist.probs.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn gate_is_stable_for_extreme_scores() {
        // max-shift keeps the softmax finite out to |s| = 1e4
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..100 {
            let d = rng.random_range(2..8);
            let scores: Vec<f64> = (0..d).map(|_| rng.random_range(-1e4..1e4)).collect();
            let dist = gate(&scores, 1.0).unwrap();
            let total: f64 = dist.probs.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(dist.probs.iter().all(|p| p.is_finite() && *p >= 0.0));
        }
    }

    #[test]
    fn argmax_invariant_to_translation_and_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let d = rng.random_range(2..7);
            let scores: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let base = gate(&scores, 1.0).unwrap().argmax();
            for shift in [-100.0, 0.5, 42.0] {
                let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
                assert_eq!(gate(&shifted, 1.0).unwrap().argmax(), base);
            }
            for tau in [0.01, 0.37, 10.0, 2500.0] {
                assert_eq!(gate(&scores, tau).unwrap().argmax(), base);
            }
        }
    }

    #[test]
    fn temperature_scaling_identity() {
        // gate(s, tau/c) == gate(c*s, tau)
        let scores = [0.3, -1.2, 0.8];
        let c = 3.5;
        let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
        let a = gate(&scores, 1.0 / c).unwrap();
        let b = gate(&scaled, 1.0).unwrap();
        for (pa, pb) in a.probs.iter().zip(&b.probs) {
            assert!((pa - pb).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_rejects_bad_temperature() {
        assert!(gate(&[0.0], 0.0).is_err());
        assert!(gate(&[0.0], -1.0).is_err());
    }

    #[test]
    fn selection_single_expert_under_low_entropy() {
        let dist = gate_from_probs(vec![0.9, 0.05, 0.05]);
        let h = normalized_entropy(&dist.probs);
        // entropy evaluation oracle, written out term by term
        let oracle = -(0.9 * 0.9f64.ln() + 2.0 * 0.05 * 0.05f64.ln()) / 3.0f64.ln();
        assert!((h - oracle).abs() < 1e-12, "normalized entropy was {h}");
        assert!(h < 0.8);
        let sel = select_experts(&dist, 0.8, 2).unwrap();
        assert_eq!(sel.active_experts, vec![0]);
        assert!(!sel.multi_activated);
    }

    fn gate_from_probs(probs: Vec<f64>) -> RoutingDistribution {
        RoutingDistribution {
            raw_scores: probs.clone(),
            normalized_scores: probs.clone(),
            temperature: 1.0,
            probs,
        }
    }

    #[test]
    fn selection_multi_activates_at_maximal_entropy() {
        let dist = gate_from_probs(vec![0.25; 4]);
        assert!((normalized_entropy(&dist.probs) - 1.0).abs() < 1e-12);
        let sel = select_experts(&dist, 0.8, 2).unwrap();
        assert_eq!(sel.active_experts.len(), 2);
        assert!(sel.multi_activated);
        // uniform probabilities tie-break by ascending domain id
        assert_eq!(sel.active_experts, vec![0, 1]);
    }

    #[test]
    fn single_domain_never_multi_activates() {
        let dist = gate_from_probs(vec![1.0]);
        let sel = select_experts(&dist, 0.0, 4).unwrap();
        assert_eq!(sel.active_experts, vec![0]);
        assert!(!sel.multi_activated);
        assert_eq!(sel.entropy, 0.0);
    }

    #[test]
    fn selection_is_deterministic() {
        let dist = gate(&[0.11, 0.42, -0.3, 0.42], 0.7).unwrap();
        let a = select_experts(&dist, 0.5, 3).unwrap();
        let b = select_experts(&dist, 0.5, 3).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn stats_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.json");
        let stats = vec![
            DomainStats {
                domain_id: 0,
                mu: 0.41,
                sigma: 0.02,
                epsilon: 1e-8,
                sample_size: 64,
            },
            DomainStats {
                domain_id: 1,
                mu: 0.12,
                sigma: 0.0,
                epsilon: 1e-8,
                sample_size: 64,
            },
        ];
        write_stats(&stats, &path).unwrap();
        let loaded = read_stats(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[1].mu, 0.12);
        assert!(matches!(
            read_stats(&dir.path().join("absent.json")),
            Err(Error::MissingArtifact { .. })
        ));
    }
}
