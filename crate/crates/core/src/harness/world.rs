//! Synthetic task worlds.
//!
//! A world is D domains with prototype inputs, per-domain document stores
//! embedded through the stock encoder, labeled queries whose domain
//! separation is verified at generation time, and a pair of hidden-state
//! prototypes ("confident" vs "diffuse") that drive the toy reasoning
//! expert. Everything derives from one seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::federation::SiteExpert;
use crate::knowledge::{
    embed_query, Doc, DomainKB, MultimodalQuery, QueryEncoder, ToyProjectionEncoder,
    TOY_ENCODER_SEED,
};
use crate::math::cosine;
use crate::mdpo::{CrossModalPair, PreferenceTuple};
use crate::metacog::EstimatorExample;
use crate::policy::FeatureVector;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub seed: u64,
    pub num_domains: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub docs_per_domain: usize,
    pub queries_per_domain: usize,
    pub heldout_per_domain: usize,
    pub num_answers: usize,
    pub separation_margin: f64,
    /// Input-space noise scale for queries and docs.
    pub noise: f64,
    /// Probability that a site's trajectory is correct when the matching
    /// expert handles the query.
    pub correct_rate: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            seed: 0,
            num_domains: 4,
            image_dim: 16,
            text_dim: 16,
            embed_dim: 32,
            hidden_dim: 8,
            docs_per_domain: 40,
            queries_per_domain: 25,
            heldout_per_domain: 10,
            num_answers: 4,
            separation_margin: 0.3,
            noise: 0.15,
            correct_rate: 0.85,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub id: String,
    pub image: FeatureVector,
    pub question: FeatureVector,
    pub true_domain: usize,
    pub true_answer: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DomainPrototype {
    image: FeatureVector,
    question: FeatureVector,
    embedding: FeatureVector,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    prototypes: Vec<DomainPrototype>,
    pub kbs: Vec<KbFile>,
    pub queries: Vec<SyntheticQuery>,
    pub heldout: Vec<SyntheticQuery>,
    pub answer_labels: Vec<String>,
    pub confident_prototype: FeatureVector,
    pub diffuse_prototype: FeatureVector,
}

/// Serializable store contents (DomainKB itself enforces invariants on
/// load).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KbFile {
    pub domain_id: usize,
    pub docs: Vec<Doc>,
}

const PROTOTYPE_ATTEMPTS: usize = 400;
const QUERY_ATTEMPTS: usize = 200;

fn sample_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> FeatureVector {
    let normal = Normal::new(0.0, scale).unwrap();
    FeatureVector::new((0..dim).map(|_| normal.sample(rng)).collect()).unwrap()
}

fn jitter(rng: &mut ChaCha8Rng, base: &FeatureVector, scale: f64) -> FeatureVector {
    let normal = Normal::new(0.0, scale).unwrap();
    FeatureVector::new(
        base.values()
            .iter()
            .map(|v| v + normal.sample(rng))
            .collect(),
    )
    .unwrap()
}

/// Margin of a query embedding: cosine to its own domain prototype minus
/// the best cosine to any other.
fn embedding_margin(embedding: &FeatureVector, prototypes: &[DomainPrototype], own: usize) -> f64 {
    let own_cos = cosine(embedding.values(), prototypes[own].embedding.values());
    let best_other = prototypes
        .iter()
        .enumerate()
        .filter(|(d, _)| *d != own)
        .map(|(_, p)| cosine(embedding.values(), p.embedding.values()))
        .fold(f64::NEG_INFINITY, f64::max);
    own_cos - best_other
}

pub fn generate_world(spec: &WorldSpec) -> Result<SyntheticWorld> {
    if spec.num_domains < 2 {
        return Err(Error::Generation("a world needs at least 2 domains".into()));
    }
    if spec.separation_margin < 0.0 {
        return Err(Error::Generation("separation margin must be >= 0".into()));
    }
    if spec.num_answers < 2 {
        return Err(Error::Generation("a world needs at least 2 answers".into()));
    }
    let encoder = ToyProjectionEncoder::seeded(
        spec.image_dim,
        spec.text_dim,
        spec.embed_dim,
        TOY_ENCODER_SEED,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // domain prototypes: resample until pairwise embedding cosines leave
    // room for the requested query margin
    let pairwise_cap = (1.0 - spec.separation_margin - 0.2).max(0.15);
    let mut prototypes: Vec<DomainPrototype> = Vec::new();
    let mut attempts = 0;
    while prototypes.len() < spec.num_domains {
        attempts += 1;
        if attempts > PROTOTYPE_ATTEMPTS {
            return Err(Error::Generation(format!(
                "could not place {} domain prototypes with margin {} in {} dims",
                spec.num_domains, spec.separation_margin, spec.embed_dim
            )));
        }
        let image = sample_vec(&mut rng, spec.image_dim, 1.0);
        let question = sample_vec(&mut rng, spec.text_dim, 1.0);
        let embedding = encoder.embed(&image, &question)?;
        let ok = prototypes
            .iter()
            .all(|p| cosine(embedding.values(), p.embedding.values()) < pairwise_cap);
        if ok {
            prototypes.push(DomainPrototype {
                image,
                question,
                embedding,
            });
        }
    }

    let answer_labels: Vec<String> = (0..spec.num_answers).map(|a| format!("ans{a}")).collect();

    let make_query = |rng: &mut ChaCha8Rng, domain: usize, id: String| -> Result<SyntheticQuery> {
        for _ in 0..QUERY_ATTEMPTS {
            let image = jitter(rng, &prototypes[domain].image, spec.noise);
            let question = jitter(rng, &prototypes[domain].question, spec.noise);
            let embedding = encoder.embed(&image, &question)?;
            if embedding_margin(&embedding, &prototypes, domain) >= spec.separation_margin {
                let answer = answer_labels[rng.random_range(0..spec.num_answers)].clone();
                return Ok(SyntheticQuery {
                    id,
                    image,
                    question,
                    true_domain: domain,
                    true_answer: answer,
                });
            }
        }
        Err(Error::Generation(format!(
            "could not satisfy margin {} for a domain-{domain} query",
            spec.separation_margin
        )))
    };

    let mut queries = Vec::new();
    let mut heldout = Vec::new();
    for domain in 0..spec.num_domains {
        for i in 0..spec.queries_per_domain {
            queries.push(make_query(&mut rng, domain, format!("q{domain}_{i:04}"))?);
        }
        for i in 0..spec.heldout_per_domain {
            heldout.push(make_query(&mut rng, domain, format!("h{domain}_{i:04}"))?);
        }
    }

    let mut kbs = Vec::new();
    for (domain, proto) in prototypes.iter().enumerate() {
        let mut docs = Vec::with_capacity(spec.docs_per_domain);
        for i in 0..spec.docs_per_domain {
            let image = jitter(&mut rng, &proto.image, spec.noise);
            let question = jitter(&mut rng, &proto.question, spec.noise);
            let vector = encoder.embed(&image, &question)?;
            docs.push(Doc {
                doc_id: format!("d{domain}_{i:04}"),
                text: format!("domain {domain} reference note {i}"),
                vector,
            });
        }
        kbs.push(KbFile {
            domain_id: domain,
            docs,
        });
    }

    // hidden-state prototypes for the reasoning expert: confident vs
    // diffuse trajectories live in opposite half-spaces
    let confident_prototype = {
        let v = sample_vec(&mut rng, spec.hidden_dim, 1.0);
        let n = crate::math::l2_norm(v.values());
        FeatureVector::new(v.values().iter().map(|x| x / n).collect())?
    };
    let diffuse_prototype =
        FeatureVector::new(confident_prototype.values().iter().map(|x| -x).collect())?;

    Ok(SyntheticWorld {
        spec: spec.clone(),
        prototypes,
        kbs,
        queries,
        heldout,
        answer_labels,
        confident_prototype,
        diffuse_prototype,
    })
}

impl SyntheticWorld {
    pub fn encoder(&self) -> ToyProjectionEncoder {
        ToyProjectionEncoder::seeded(
            self.spec.image_dim,
            self.spec.text_dim,
            self.spec.embed_dim,
            TOY_ENCODER_SEED,
        )
    }

    pub fn domain_kbs(&self) -> Result<Vec<DomainKB>> {
        self.kbs
            .iter()
            .map(|kb| DomainKB::new(kb.domain_id, self.spec.embed_dim, kb.docs.clone()))
            .collect()
    }

    pub fn embed(&self, query: &SyntheticQuery) -> Result<MultimodalQuery> {
        embed_query(&self.encoder(), &query.image, &query.question)
    }

    pub fn heldout_embedded(&self) -> Result<Vec<MultimodalQuery>> {
        self.heldout.iter().map(|q| self.embed(q)).collect()
    }

    pub fn answer_index(&self, answer: &str) -> Option<usize> {
        self.answer_labels.iter().position(|a| a == answer)
    }

    /// The toy reasoning expert for `domain` handling `query`.
    pub fn expert_for(&self, domain: usize, query: &SyntheticQuery) -> SyntheticExpert {
        SyntheticExpert {
            domain_id: domain,
            answer_labels: self.answer_labels.clone(),
            true_answer_idx: self
                .answer_index(&query.true_answer)
                .expect("query answer is in the label set"),
            query_key: stable_hash(&query.id),
            domain_match: domain == query.true_domain,
            correct_rate: self.spec.correct_rate,
            confident: self.confident_prototype.clone(),
            diffuse: self.diffuse_prototype.clone(),
            seed: self.spec.seed,
        }
    }

    /// Labeled hidden states for estimator training, drawn by the same
    /// construction the expert uses: correct near the confident prototype,
    /// incorrect near the diffuse one.
    pub fn estimator_corpus(&self, per_class: usize) -> Vec<EstimatorExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0xe571);
        let mut corpus = Vec::with_capacity(2 * per_class);
        for i in 0..2 * per_class {
            let correct = i % 2 == 0;
            let proto = if correct {
                &self.confident_prototype
            } else {
                &self.diffuse_prototype
            };
            let hidden = jitter(&mut rng, proto, 0.25);
            let true_label = rng.random_range(0..self.answer_labels.len());
            let predicted_dist = if correct {
                peaked_distribution(self.answer_labels.len(), true_label)
            } else {
                let wrong = (true_label + 1) % self.answer_labels.len();
                peaked_distribution(self.answer_labels.len(), wrong)
            };
            corpus.push(EstimatorExample {
                hidden,
                predicted_dist,
                true_label,
            });
        }
        corpus
    }

    /// Synthetic restart accuracies for the influence graph: each domain
    /// meaningfully boosts its cyclic successor, everything else hovers
    /// near zero gain.
    pub fn gain_table(&self, restarts: usize) -> crate::metacog::GainTable {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x9a17);
        let d = self.spec.num_domains;
        let mut table = crate::metacog::GainTable::new();
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    continue;
                }
                let boost = if j == (i + 1) % d { 0.12 } else { 0.0 };
                let runs: Vec<(f64, f64)> = (0..restarts)
                    .map(|_| {
                        let base: f64 = rng.random_range(0.45..0.55);
                        let with = (base + boost + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
                        (with, base)
                    })
                    .collect();
                table.insert((i, j), runs);
            }
        }
        table
    }

    /// Mean hidden state per expert over the held-out queries, the plain
    /// exchange standing in for secure aggregation.
    pub fn parent_means(&self) -> crate::metacog::ParentMeans {
        let mut means = crate::metacog::ParentMeans::default();
        for domain in 0..self.spec.num_domains {
            let mut acc = vec![0.0; self.spec.hidden_dim];
            let mut count = 0usize;
            for query in &self.heldout {
                let expert = self.expert_for(domain, query);
                for site in 0..2 {
                    for step in 1..=2 {
                        let h = expert.hidden_state(site, step);
                        for (a, v) in acc.iter_mut().zip(h.values()) {
                            *a += v;
                        }
                        count += 1;
                    }
                }
            }
            if count > 0 {
                for a in &mut acc {
                    *a /= count as f64;
                }
            }
            means.insert(domain, FeatureVector::new(acc).expect("finite mean"));
        }
        means
    }

    /// Preference tuples derived from the labeled queries: the true answer
    /// is preferred over a seeded wrong alternative.
    pub fn preference_data(&self) -> Vec<PreferenceTuple> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x9ef);
        self.queries
            .iter()
            .map(|q| {
                let chosen = q.true_answer.clone();
                let mut rejected = chosen.clone();
                while rejected == chosen {
                    rejected =
                        self.answer_labels[rng.random_range(0..self.answer_labels.len())].clone();
                }
                PreferenceTuple::new(
                    q.id.clone(),
                    q.image.clone(),
                    q.question.clone(),
                    chosen,
                    rejected,
                )
                .expect("chosen != rejected by construction")
            })
            .collect()
    }

    /// Cross-modal pairs: the query's own image supports its answer, an
    /// image drawn near a different domain's prototype contradicts it.
    pub fn crossmodal_data(&self) -> Vec<CrossModalPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0xc0de);
        self.queries
            .iter()
            .map(|q| {
                let other = (q.true_domain + 1 + rng.random_range(0..self.spec.num_domains - 1))
                    % self.spec.num_domains;
                let image_neg = jitter(&mut rng, &self.prototypes[other].image, self.spec.noise);
                CrossModalPair::new(
                    q.question.clone(),
                    q.true_answer.clone(),
                    q.image.clone(),
                    image_neg,
                )
                .expect("distinct images by construction")
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                stage: "gen-world".into(),
                path: path.to_path_buf(),
            });
        }
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }
}

fn stable_hash(s: &str) -> u64 {
    // FNV-1a
    let mut hash: u64 = 0xcbf29ce484222325;
    for byte in s.bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn peaked_distribution(n: usize, peak: usize) -> Vec<f64> {
    let rest = 0.1 / (n as f64 - 1.0);
    (0..n).map(|i| if i == peak { 0.9 } else { rest }).collect()
}

/// Deterministic toy reasoning expert.
///
/// Each site draws (once, from its seed) whether its trajectory is correct
/// and a private starting noise vector, then anneals its hidden state
/// toward the confident or diffuse prototype over the first few steps.
/// Everything is a pure function of `(seed, query, site, step)`.
#[derive(Debug, Clone)]
pub struct SyntheticExpert {
    domain_id: usize,
    answer_labels: Vec<String>,
    true_answer_idx: usize,
    query_key: u64,
    domain_match: bool,
    correct_rate: f64,
    confident: FeatureVector,
    diffuse: FeatureVector,
    seed: u64,
}

struct SiteDraw {
    correct: bool,
    ramp: f64,
    start: Vec<f64>,
}

impl SyntheticExpert {
    fn site_draw(&self, site_id: usize) -> SiteDraw {
        let mix = self
            .seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(self.query_key)
            .rotate_left(17)
            .wrapping_add(site_id as u64)
            .wrapping_mul(0xbf58476d1ce4e5b9);
        let mut rng = ChaCha8Rng::seed_from_u64(mix);
        let p = if self.domain_match {
            self.correct_rate
        } else {
            self.correct_rate * 0.3
        };
        let correct = rng.random_range(0.0..1.0) < p;
        let ramp = rng.random_range(1.5..6.0);
        let normal = Normal::new(0.0, 0.6).unwrap();
        let start = (0..self.confident.dim())
            .map(|_| normal.sample(&mut rng))
            .collect();
        SiteDraw {
            correct,
            ramp,
            start,
        }
    }

    fn wrong_answer_idx(&self) -> usize {
        let shift = 1 + (self.query_key as usize) % (self.answer_labels.len() - 1);
        (self.true_answer_idx + shift) % self.answer_labels.len()
    }
}

impl SiteExpert for SyntheticExpert {
    fn domain_id(&self) -> usize {
        self.domain_id
    }

    fn answer_labels(&self) -> &[String] {
        &self.answer_labels
    }

    fn hidden_state(&self, site_id: usize, step: usize) -> FeatureVector {
        let draw = self.site_draw(site_id);
        let proto = if draw.correct {
            &self.confident
        } else {
            &self.diffuse
        };
        let anneal = (step as f64 / draw.ramp).min(1.0);
        FeatureVector::new(
            proto
                .values()
                .iter()
                .zip(&draw.start)
                .map(|(&p, &s)| anneal * p + (1.0 - anneal) * s)
                .collect(),
        )
        .expect("finite hidden state")
    }

    fn predict(&self, h: &FeatureVector) -> Vec<f64> {
        // answer logits from alignment with the two prototypes
        let c_conf = cosine(h.values(), self.confident.values());
        let c_diff = cosine(h.values(), self.diffuse.values());
        let n = self.answer_labels.len();
        let mut logits = vec![-1.0; n];
        logits[self.true_answer_idx] = 3.0 * c_conf;
        logits[self.wrong_answer_idx()] = 3.0 * c_diff;
        let lse = crate::math::log_sum_exp(&logits);
        logits.into_iter().map(|l| (l - lse).exp()).collect()
    }

    fn reasoning_unit(&self, site_id: usize, step: usize) -> String {
        format!(
            "[site {site_id} step {step}] weighs domain-{} evidence",
            self.domain_id
        )
    }
}
