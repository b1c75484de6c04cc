//! Consensus over halted reasoning chains.
//!
//! Final answers are embedded with a hashed bag-of-tokens encoder, grouped
//! by density-based clustering under cosine distance, and either adopted by
//! supermajority (taking the highest-confidence chain in the winning
//! cluster) or handed to a reviewer prompt that concatenates every chain
//! for conflict resolution. The reviewer itself is pluggable; the default
//! backend is an explicit stub.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::HaltEvent;
use crate::math::{dot, l2_norm};
use crate::policy::FeatureVector;

pub const DEFAULT_CLUSTER_RADIUS: f64 = 0.2;
pub const DEFAULT_MIN_POINTS: usize = 2;
pub const DEFAULT_SUPERMAJORITY_FRACTION: f64 = 2.0 / 3.0;

/// Reviewer instruction template with a `{Q}` placeholder.
pub const SYNTHESIS_PROMPT_TEMPLATE: &str = include_str!("../assets/synthesis_prompt.txt");

/// Deterministic sentence encoder: seeded FNV-1a token hashing into a
/// fixed number of buckets, L2-normalized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HashedBagEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashedBagEncoder {
    fn default() -> Self {
        HashedBagEncoder { dim: 256, seed: 0 }
    }
}

impl HashedBagEncoder {
    fn bucket(&self, token: &str) -> usize {
        // FNV-1a, seed-mixed; stable across platforms and releases
        let mut hash: u64 = 0xcbf29ce484222325 ^ self.seed.wrapping_mul(0x9e3779b97f4a7c15);
        for byte in token.bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        (hash % self.dim as u64) as usize
    }

    pub fn encode(&self, text: &str) -> Result<FeatureVector> {
        let mut counts = vec![0.0; self.dim];
        let mut any = false;
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            counts[self.bucket(&token.to_lowercase())] += 1.0;
            any = true;
        }
        if !any {
            return Err(Error::domain(format!(
                "answer text {text:?} has no tokens to embed"
            )));
        }
        let norm = l2_norm(&counts);
        FeatureVector::new(counts.into_iter().map(|c| c / norm).collect())
    }
}

/// A site's final answer in the shared semantic space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnswerEmbedding {
    pub answer_text: String,
    pub vector: FeatureVector,
    pub source_site: usize,
    pub confidence: f64,
}

pub fn embed_answer(
    encoder: &HashedBagEncoder,
    answer_text: &str,
    source_site: usize,
    confidence: f64,
) -> Result<AnswerEmbedding> {
    Ok(AnswerEmbedding {
        answer_text: answer_text.to_string(),
        vector: encoder.encode(answer_text)?,
        source_site,
        confidence,
    })
}

fn cosine_distance(a: &FeatureVector, b: &FeatureVector) -> f64 {
    1.0 - dot(a.values(), b.values()) / (l2_norm(a.values()) * l2_norm(b.values()))
}

/// Density-based clustering under cosine distance.
///
/// Core points (at least `min_points` neighbors within `radius`, counting
/// themselves) merge into connected clusters; non-core points join the
/// nearest core within `radius`; everything else becomes a singleton noise
/// cluster rather than being dropped, so resolution can still see it.
/// Clusters are site-id lists, canonically ordered, independent of input
/// order.
pub fn cluster_answers(
    embeddings: &[AnswerEmbedding],
    radius: f64,
    min_points: usize,
) -> Result<Vec<Vec<usize>>> {
    if embeddings.is_empty() {
        return Err(Error::domain("nothing to cluster"));
    }
    if radius <= 0.0 {
        return Err(Error::domain("cluster radius must be > 0"));
    }
    // canonical processing order removes any input-order dependence
    let mut points: Vec<&AnswerEmbedding> = embeddings.iter().collect();
    points.sort_by_key(|e| e.source_site);
    let n = points.len();

    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if cosine_distance(&points[i].vector, &points[j].vector) <= radius {
                neighbors[i].push(j);
            }
        }
    }
    let core: Vec<bool> = neighbors.iter().map(|ns| ns.len() >= min_points).collect();

    // connected components over mutually-reachable cores
    let mut cluster_of: Vec<Option<usize>> = vec![None; n];
    let mut next_cluster = 0;
    for start in 0..n {
        if !core[start] || cluster_of[start].is_some() {
            continue;
        }
        let id = next_cluster;
        next_cluster += 1;
        let mut stack = vec![start];
        cluster_of[start] = Some(id);
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p] {
                if core[q] && cluster_of[q].is_none() {
                    cluster_of[q] = Some(id);
                    stack.push(q);
                }
            }
        }
    }

    // border points attach to the nearest core in range
    for p in 0..n {
        if core[p] || cluster_of[p].is_some() {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for &q in &neighbors[p] {
            if core[q] {
                let d = cosine_distance(&points[p].vector, &points[q].vector);
                let better = match best {
                    None => true,
                    Some((bd, bq)) => {
                        d < bd || (d == bd && points[q].source_site < points[bq].source_site)
                    }
                };
                if better {
                    best = Some((d, q));
                }
            }
        }
        if let Some((_, q)) = best {
            cluster_of[p] = cluster_of[q];
        }
    }

    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); next_cluster];
    let mut noise: Vec<Vec<usize>> = Vec::new();
    for (p, point) in points.iter().enumerate() {
        match cluster_of[p] {
            Some(id) => clusters[id].push(point.source_site),
            None => noise.push(vec![point.source_site]),
        }
    }
    clusters.extend(noise);
    clusters.retain(|c| !c.is_empty());
    for c in &mut clusters {
        c.sort_unstable();
    }
    clusters.sort_by_key(|c| c[0]);
    Ok(clusters)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusMode {
    Supermajority,
    Synthesis,
}

/// Result of the consensus stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsensusOutcome {
    pub mode: ConsensusMode,
    /// Adopted answer; `None` until synthesis runs in synthesis mode.
    pub final_answer: Option<String>,
    pub winning_cluster: Option<Vec<usize>>,
    pub clusters: Vec<Vec<usize>>,
    /// Reviewer prompt, present in synthesis mode only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

/// Assemble the reviewer prompt: the instruction with `{Q}` substituted,
/// then every chain exactly once.
pub fn build_synthesis_prompt(question_text: &str, events: &[HaltEvent]) -> String {
    let mut prompt = SYNTHESIS_PROMPT_TEMPLATE.replace("{Q}", question_text);
    for event in events {
        prompt.push_str(&format!(
            "\n--- Reasoning path from site {} (confidence {:.4}) ---\n",
            event.site_id, event.confidence
        ));
        prompt.push_str(&event.chain.join("\n"));
        prompt.push('\n');
    }
    prompt
}

/// Adopt a supermajority cluster's best chain, or fall back to synthesis.
///
/// A cluster wins when its size strictly exceeds
/// `supermajority_fraction × |events|`. Within the winning cluster, forced
/// events are not eligible as the adopted answer unless every contributing
/// event was forced.
pub fn resolve(
    clusters: &[Vec<usize>],
    events: &[HaltEvent],
    supermajority_fraction: f64,
    question_text: &str,
) -> Result<ConsensusOutcome> {
    if events.is_empty() {
        return Err(Error::domain("no halt events to resolve"));
    }
    if !(0.0..1.0).contains(&supermajority_fraction) {
        return Err(Error::domain("supermajority fraction must lie in [0, 1)"));
    }
    let threshold = supermajority_fraction * events.len() as f64;
    let winning = clusters
        .iter()
        .filter(|c| c.len() as f64 > threshold)
        .max_by_key(|c| (c.len(), std::cmp::Reverse(c[0])));

    match winning {
        Some(cluster) => {
            let all_forced = events.iter().all(|e| e.forced);
            let members: Vec<&HaltEvent> = events
                .iter()
                .filter(|e| cluster.contains(&e.site_id))
                .collect();
            let eligible: Vec<&HaltEvent> = if all_forced {
                members.clone()
            } else {
                let unforced: Vec<&HaltEvent> =
                    members.iter().copied().filter(|e| !e.forced).collect();
                if unforced.is_empty() {
                    members.clone()
                } else {
                    unforced
                }
            };
            let best = eligible
                .into_iter()
                .min_by(|a, b| {
                    b.confidence
                        .partial_cmp(&a.confidence)
                        .unwrap()
                        .then_with(|| a.site_id.cmp(&b.site_id))
                })
                .expect("winning cluster has members");
            Ok(ConsensusOutcome {
                mode: ConsensusMode::Supermajority,
                final_answer: Some(best.answer.clone()),
                winning_cluster: Some(cluster.clone()),
                clusters: clusters.to_vec(),
                prompt: None,
            })
        }
        None => Ok(ConsensusOutcome {
            mode: ConsensusMode::Synthesis,
            final_answer: None,
            winning_cluster: None,
            clusters: clusters.to_vec(),
            prompt: Some(build_synthesis_prompt(question_text, events)),
        }),
    }
}

/// The reviewer contract for synthesis mode.
pub trait SynthesisBackend {
    fn review(&self, prompt: &str, events: &[HaltEvent]) -> Result<String>;
    /// True for the built-in placeholder backend.
    fn is_stub(&self) -> bool {
        false
    }
}

/// Default reviewer: no model behind it, returns the answer of the
/// globally highest-confidence chain and says so.
#[derive(Debug, Default, Clone)]
pub struct StubReviewer;

impl SynthesisBackend for StubReviewer {
    fn review(&self, _prompt: &str, events: &[HaltEvent]) -> Result<String> {
        events
            .iter()
            .min_by(|a, b| {
                b.confidence
                    .partial_cmp(&a.confidence)
                    .unwrap()
                    .then_with(|| a.site_id.cmp(&b.site_id))
            })
            .map(|e| e.answer.clone())
            .ok_or_else(|| Error::SynthesisUnavailable("no chains to review".into()))
    }

    fn is_stub(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub answer: String,
    /// Flags output produced by the placeholder backend rather than a real
    /// reviewer.
    pub from_stub: bool,
}

pub fn synthesize(
    backend: &dyn SynthesisBackend,
    prompt: &str,
    events: &[HaltEvent],
) -> Result<SynthesisResult> {
    let answer = backend
        .review(prompt, events)
        .map_err(|e| Error::SynthesisUnavailable(e.to_string()))?;
    Ok(SynthesisResult {
        answer,
        from_stub: backend.is_stub(),
    })
}
