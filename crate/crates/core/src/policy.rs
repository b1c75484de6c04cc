//! Toy candidate-scoring policies.
//!
//! A policy assigns a softmax distribution over a finite candidate-answer
//! set from per-candidate linear scores `w · φ(x, A)` with a single shared
//! weight vector. The feature map φ concatenates an image block and a text
//! block, so zeroing the image-block weights yields a policy whose scores
//! provably cannot depend on the image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::log_sum_exp;

/// A finite real vector. All entries are finite by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("feature vector contains non-finite values"));
        }
        Ok(FeatureVector(values))
    }

    /// All-zero vector of the given dimension.
    pub fn zeros(dim: usize) -> Self {
        FeatureVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Deterministic per-candidate feature map.
///
/// Candidate `c` gets `φ(x, c) = concat(I ⊙ s_img(c), Q ⊙ s_txt(c))` where
/// the signature vectors `s_img`, `s_txt` are frozen at construction from a
/// seed. Distinct candidates get distinct signatures, which is what makes
/// the shared-weight scores candidate-dependent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateFeaturizer {
    image_dim: usize,
    text_dim: usize,
    signatures: Vec<CandidateSignature>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CandidateSignature {
    candidate: String,
    image: Vec<f64>,
    text: Vec<f64>,
}

impl CandidateFeaturizer {
    pub fn seeded(candidates: &[String], image_dim: usize, text_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let signatures = candidates
            .iter()
            .map(|c| CandidateSignature {
                candidate: c.clone(),
                image: (0..image_dim).map(|_| normal.sample(&mut rng)).collect(),
                text: (0..text_dim).map(|_| normal.sample(&mut rng)).collect(),
            })
            .collect();
        CandidateFeaturizer {
            image_dim,
            text_dim,
            signatures,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.image_dim + self.text_dim
    }

    pub fn image_dim(&self) -> usize {
        self.image_dim
    }

    pub fn candidates(&self) -> Vec<String> {
        self.signatures
            .iter()
            .map(|s| s.candidate.clone())
            .collect()
    }

    /// One feature vector per candidate, in candidate order.
    pub fn features(
        &self,
        image: &FeatureVector,
        question: &FeatureVector,
    ) -> Result<Vec<FeatureVector>> {
        if image.dim() != self.image_dim {
            return Err(Error::Shape {
                expected: self.image_dim,
                got: image.dim(),
            });
        }
        if question.dim() != self.text_dim {
            return Err(Error::Shape {
                expected: self.text_dim,
                got: question.dim(),
            });
        }
        Ok(self
            .signatures
            .iter()
            .map(|sig| {
                let mut v = Vec::with_capacity(self.feature_dim());
                v.extend(image.values().iter().zip(&sig.image).map(|(x, s)| x * s));
                v.extend(question.values().iter().zip(&sig.text).map(|(x, s)| x * s));
                FeatureVector(v)
            })
            .collect())
    }
}

/// Linear-softmax policy over a finite candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    weights: Vec<f64>,
    candidates: Vec<String>,
    frozen: bool,
}

/// On-disk form of a policy: `{dim, candidate_set, weights, frozen}`.
#[derive(Debug, Serialize, Deserialize)]
struct PolicyCheckpoint {
    dim: usize,
    candidate_set: Vec<String>,
    weights: Vec<f64>,
    frozen: bool,
}

impl ToyPolicy {
    pub fn new(weights: Vec<f64>, candidates: Vec<String>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::domain("candidate set must be non-empty"));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::domain("policy weights must be finite"));
        }
        Ok(ToyPolicy {
            weights,
            candidates,
            frozen: false,
        })
    }

    /// Zero-weight (uniform) policy.
    pub fn uniform(dim: usize, candidates: Vec<String>) -> Result<Self> {
        ToyPolicy::new(vec![0.0; dim], candidates)
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn candidate_set(&self) -> &[String] {
        &self.candidates
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn candidate_index(&self, answer: &str) -> Result<usize> {
        self.candidates
            .iter()
            .position(|c| c == answer)
            .ok_or_else(|| Error::domain(format!("unknown answer id `{answer}`")))
    }

    /// A frozen copy, independent of any later updates to `self`.
    pub fn frozen_clone(&self) -> ToyPolicy {
        ToyPolicy {
            weights: self.weights.clone(),
            candidates: self.candidates.clone(),
            frozen: true,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn check_features(&self, features: &[FeatureVector]) -> Result<()> {
        if features.len() != self.candidates.len() {
            return Err(Error::Shape {
                expected: self.candidates.len(),
                got: features.len(),
            });
        }
        for f in features {
            if f.dim() != self.weights.len() {
                return Err(Error::Shape {
                    expected: self.weights.len(),
                    got: f.dim(),
                });
            }
        }
        Ok(())
    }

    fn scores(&self, features: &[FeatureVector]) -> Vec<f64> {
        features
            .iter()
            .map(|f| crate::math::dot(&self.weights, f.values()))
            .collect()
    }

    /// Log-probabilities for every candidate; exp of the outputs sums to 1.
    pub fn log_probs(&self, features: &[FeatureVector]) -> Result<Vec<f64>> {
        self.check_features(features)?;
        let scores = self.scores(features);
        let lse = log_sum_exp(&scores);
        Ok(scores.into_iter().map(|s| s - lse).collect())
    }

    /// log π(answer | x) given one feature vector per candidate.
    pub fn log_prob(&self, features: &[FeatureVector], answer: &str) -> Result<f64> {
        let idx = self.candidate_index(answer)?;
        Ok(self.log_probs(features)?[idx])
    }

    /// Analytic gradient of `log_prob` w.r.t. the weight vector:
    /// `φ(answer) − Σ_c p(c) φ(c)`.
    pub fn grad_log_prob(&self, features: &[FeatureVector], answer: &str) -> Result<Vec<f64>> {
        if self.frozen {
            return Err(Error::FrozenPolicy);
        }
        let idx = self.candidate_index(answer)?;
        self.check_features(features)?;
        let scores = self.scores(features);
        let lse = log_sum_exp(&scores);
        let mut grad = features[idx].values().to_vec();
        for (c, f) in features.iter().enumerate() {
            let p = (scores[c] - lse).exp();
            for (g, x) in grad.iter_mut().zip(f.values()) {
                *g -= p * x;
            }
        }
        Ok(grad)
    }

    /// One gradient-descent step: `w ← w − lr · grad`.
    pub fn gradient_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenPolicy);
        }
        if grad.len() != self.weights.len() {
            return Err(Error::Shape {
                expected: self.weights.len(),
                got: grad.len(),
            });
        }
        for (w, g) in self.weights.iter_mut().zip(grad) {
            *w -= lr * g;
        }
        Ok(())
    }

    /// Zero the image-block weights, making scores image-independent.
    pub fn zero_image_block(&mut self, image_dim: usize) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenPolicy);
        }
        if image_dim > self.weights.len() {
            return Err(Error::Shape {
                expected: self.weights.len(),
                got: image_dim,
            });
        }
        for w in &mut self.weights[..image_dim] {
            *w = 0.0;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = PolicyCheckpoint {
            dim: self.weights.len(),
            candidate_set: self.candidates.clone(),
            weights: self.weights.clone(),
            frozen: self.frozen,
        };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, &ckpt)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ToyPolicy> {
        let file = std::fs::File::open(path)?;
        let ckpt: PolicyCheckpoint = serde_json::from_reader(file)?;
        if ckpt.weights.len() != ckpt.dim {
            return Err(Error::domain(format!(
                "checkpoint dim {} does not match weight count {}",
                ckpt.dim,
                ckpt.weights.len()
            )));
        }
        let mut policy = ToyPolicy::new(ckpt.weights, ckpt.candidate_set)?;
        policy.frozen = ckpt.frozen;
        Ok(policy)
    }
}
