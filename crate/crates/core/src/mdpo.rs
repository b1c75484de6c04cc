//! Preference-loss family and its training loop.
//!
//! Three margin losses over implicit rewards — the plain preference loss,
//! a cross-modal loss that contrasts a supporting image against a
//! contradictory one for the same question/answer, and an anchored variant
//! that subtracts a calibration-set percentile from the margin — plus their
//! weighted composite and a deterministic gradient-descent trainer.
//!
//! All losses are computed in softplus form, `-log σ(m) = softplus(-m)`,
//! so margins of several hundred stay finite.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus};
use crate::policy::{CandidateFeaturizer, FeatureVector, ToyPolicy};

/// One preference record: input `x = (I, Q)` with a chosen and a rejected
/// candidate answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreferenceTuple {
    pub id: String,
    #[serde(rename = "image_vec")]
    pub image: FeatureVector,
    #[serde(rename = "question_vec")]
    pub question: FeatureVector,
    pub chosen: String,
    pub rejected: String,
}

impl PreferenceTuple {
    pub fn new(
        id: impl Into<String>,
        image: FeatureVector,
        question: FeatureVector,
        chosen: impl Into<String>,
        rejected: impl Into<String>,
    ) -> Result<Self> {
        let chosen = chosen.into();
        let rejected = rejected.into();
        if chosen == rejected {
            return Err(Error::domain(
                "preference tuple must have distinct chosen and rejected answers",
            ));
        }
        Ok(PreferenceTuple {
            id: id.into(),
            image,
            question,
            chosen,
            rejected,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.chosen == self.rejected {
            return Err(Error::domain(format!(
                "record `{}`: chosen and rejected answers are identical",
                self.id
            )));
        }
        Ok(())
    }
}

/// One cross-modal record: a question/answer pair with a supporting image
/// and a contradictory image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossModalPair {
    #[serde(rename = "question_vec")]
    pub question: FeatureVector,
    pub answer: String,
    #[serde(rename = "image_pos_vec")]
    pub image_pos: FeatureVector,
    #[serde(rename = "image_neg_vec")]
    pub image_neg: FeatureVector,
}

impl CrossModalPair {
    pub fn new(
        question: FeatureVector,
        answer: impl Into<String>,
        image_pos: FeatureVector,
        image_neg: FeatureVector,
    ) -> Result<Self> {
        if image_pos == image_neg {
            return Err(Error::domain(
                "cross-modal pair must have elementwise-distinct images",
            ));
        }
        Ok(CrossModalPair {
            question,
            answer: answer.into(),
            image_pos,
            image_neg,
        })
    }
}

/// Reward anchor: an empirical percentile of a calibration reward sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub delta: f64,
    pub percentile_q: f64,
    pub calibration_size: usize,
}

impl Anchor {
    pub fn zero() -> Self {
        Anchor {
            delta: 0.0,
            percentile_q: 0.0,
            calibration_size: 0,
        }
    }
}

/// Trainer hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpoConfig {
    pub beta: f64,
    pub lambda_cm: f64,
    pub lambda_ra: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub anchor_percentile: f64,
    pub seed: u64,
}

impl Default for MdpoConfig {
    fn default() -> Self {
        MdpoConfig {
            beta: 1.0,
            lambda_cm: 1.0,
            lambda_ra: 1.0,
            learning_rate: 0.1,
            epochs: 50,
            batch_size: 16,
            anchor_percentile: 50.0,
            seed: 0,
        }
    }
}

impl MdpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 {
            return Err(Error::config("beta must be > 0"));
        }
        if self.lambda_cm < 0.0 || self.lambda_ra < 0.0 {
            return Err(Error::config("loss weights must be >= 0"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

fn check_pair(policy: &ToyPolicy, reference: &ToyPolicy) -> Result<()> {
    if !reference.is_frozen() {
        return Err(Error::config("reference policy must be frozen"));
    }
    if policy.candidate_set() != reference.candidate_set() {
        return Err(Error::config(
            "policy and reference must share the same candidate set",
        ));
    }
    Ok(())
}

/// Implicit reward `β · (log π_θ(y|x) − log π_ref(y|x))`.
pub fn implicit_reward(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    features: &[FeatureVector],
    answer: &str,
    beta: f64,
) -> Result<f64> {
    check_pair(policy, reference)?;
    let lp = policy.log_prob(features, answer)?;
    let lp_ref = reference.log_prob(features, answer)?;
    Ok(beta * (lp - lp_ref))
}

/// Reward margin `r̂(x, y_w) − r̂(x, y_l)` for one preference tuple.
fn preference_margin(
    tuple: &PreferenceTuple,
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    featurizer: &CandidateFeaturizer,
    beta: f64,
) -> Result<f64> {
    let features = featurizer.features(&tuple.image, &tuple.question)?;
    let r_w = implicit_reward(policy, reference, &features, &tuple.chosen, beta)?;
    let r_l = implicit_reward(policy, reference, &features, &tuple.rejected, beta)?;
    Ok(r_w - r_l)
}

/// Reward margin `r̂(I_w, Q, A) − r̂(I_l, Q, A)` for one cross-modal pair.
fn crossmodal_margin(
    pair: &CrossModalPair,
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    featurizer: &CandidateFeaturizer,
    beta: f64,
) -> Result<f64> {
    let feats_pos = featurizer.features(&pair.image_pos, &pair.question)?;
    let feats_neg = featurizer.features(&pair.image_neg, &pair.question)?;
    let r_pos = implicit_reward(policy, reference, &feats_pos, &pair.answer, beta)?;
    let r_neg = implicit_reward(policy, reference, &feats_neg, &pair.answer, beta)?;
    Ok(r_pos - r_neg)
}

/// Mean `-log σ(margin)` over a preference batch.
pub fn dpo_loss(
    batch: &[PreferenceTuple],
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    featurizer: &CandidateFeaturizer,
    beta: f64,
) -> Result<f64> {
    ra_loss(batch, policy, reference, featurizer, beta, &Anchor::zero())
}

/// Mean `-log σ(margin − δ)` over a preference batch.
pub fn ra_loss(
    batch: &[PreferenceTuple],
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    featurizer: &CandidateFeaturizer,
    beta: f64,
    anchor: &Anchor,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::domain("preference batch must be non-empty"));
    }
    let mut total = 0.0;
    for tuple in batch {
        let m = preference_margin(tuple, policy, reference, featurizer, beta)?;
        total += softplus(-(m - anchor.delta));
    }
    Ok(total / batch.len() as f64)
}

/// Mean `-log σ(r̂(I_w,Q,A) − r̂(I_l,Q,A))` over a cross-modal batch.
pub fn cm_loss(
    batch: &[CrossModalPair],
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    featurizer: &CandidateFeaturizer,
    beta: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::domain("cross-modal batch must be non-empty"));
    }
    let mut total = 0.0;
    for pair in batch {
        let m = crossmodal_margin(pair, policy, reference, featurizer, beta)?;
        total += softplus(-m);
    }
    Ok(total / batch.len() as f64)
}

/// Nearest-rank empirical percentile: the `ceil(q/100 · n)`-th order
/// statistic, clamped to the first for `q = 0`.
pub fn percentile_nearest_rank(sample: &[f64], q: f64) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::domain("percentile of an empty sample"));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::domain(format!("percentile q={q} outside [0, 100]")));
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let rank = ((q / 100.0) * n as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// Estimate the anchor δ as the q-th percentile of `r̂_eval(x, y_w)` over a
/// calibration set, evaluated with the policy passed in at call time.
pub fn estimate_anchor(
    calibration: &[PreferenceTuple],
    eval_policy: &ToyPolicy,
    reference: &ToyPolicy,
    featurizer: &CandidateFeaturizer,
    beta: f64,
    q: f64,
) -> Result<Anchor> {
    if calibration.is_empty() {
        return Err(Error::domain("anchor calibration set must be non-empty"));
    }
    let mut rewards = Vec::with_capacity(calibration.len());
    for tuple in calibration {
        let features = featurizer.features(&tuple.image, &tuple.question)?;
        rewards.push(implicit_reward(
            eval_policy,
            reference,
            &features,
            &tuple.chosen,
            beta,
        )?);
    }
    anchor_from_sample(&rewards, q)
}

/// Build an anchor directly from a reward sample (e.g. a user-supplied file).
pub fn anchor_from_sample(rewards: &[f64], q: f64) -> Result<Anchor> {
    let delta = percentile_nearest_rank(rewards, q)?;
    Ok(Anchor {
        delta,
        percentile_q: q,
        calibration_size: rewards.len(),
    })
}

/// Per-component values of the composite loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MdpoComponents {
    pub dpo: f64,
    pub cm: f64,
    pub ra: f64,
    pub total: f64,
}

/// Composite loss `L_DPO + λ_CM · L_CM + λ_RA · L_RA`.
pub fn mdpo_total(
    batch_pref: &[PreferenceTuple],
    batch_cm: &[CrossModalPair],
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    featurizer: &CandidateFeaturizer,
    config: &MdpoConfig,
    anchor: &Anchor,
) -> Result<MdpoComponents> {
    let dpo = dpo_loss(batch_pref, policy, reference, featurizer, config.beta)?;
    let cm = cm_loss(batch_cm, policy, reference, featurizer, config.beta)?;
    let ra = ra_loss(
        batch_pref,
        policy,
        reference,
        featurizer,
        config.beta,
        anchor,
    )?;
    Ok(MdpoComponents {
        dpo,
        cm,
        ra,
        total: dpo + config.lambda_cm * cm + config.lambda_ra * ra,
    })
}

// Gradient of a mean margin loss: d/dw mean_i softplus(-(m_i - δ)) =
// mean_i [-σ(-(m_i - δ)) · dm_i/dw], with dm/dw given per batch kind.

fn accumulate_margin_grad(grad: &mut [f64], scale: f64, grad_w: &[f64], grad_l: &[f64], beta: f64) {
    for ((g, &gw), &gl) in grad.iter_mut().zip(grad_w).zip(grad_l) {
        *g += scale * beta * (gw - gl);
    }
}

/// `ra_loss` (which is `dpo_loss` at δ = 0) together with its gradient
/// w.r.t. the policy weights.
pub fn ra_loss_grad(
    batch: &[PreferenceTuple],
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    featurizer: &CandidateFeaturizer,
    beta: f64,
    anchor: &Anchor,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::domain("preference batch must be non-empty"));
    }
    check_pair(policy, reference)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; policy.dim()];
    let inv_n = 1.0 / batch.len() as f64;
    for tuple in batch {
        let features = featurizer.features(&tuple.image, &tuple.question)?;
        let m = preference_margin(tuple, policy, reference, featurizer, beta)?;
        let shifted = m - anchor.delta;
        loss += softplus(-shifted) * inv_n;
        let scale = -sigmoid(-shifted) * inv_n;
        let gw = policy.grad_log_prob(&features, &tuple.chosen)?;
        let gl = policy.grad_log_prob(&features, &tuple.rejected)?;
        accumulate_margin_grad(&mut grad, scale, &gw, &gl, beta);
    }
    Ok((loss, grad))
}

pub fn dpo_loss_grad(
    batch: &[PreferenceTuple],
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    featurizer: &CandidateFeaturizer,
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    ra_loss_grad(batch, policy, reference, featurizer, beta, &Anchor::zero())
}

pub fn cm_loss_grad(
    batch: &[CrossModalPair],
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    featurizer: &CandidateFeaturizer,
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::domain("cross-modal batch must be non-empty"));
    }
    check_pair(policy, reference)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; policy.dim()];
    let inv_n = 1.0 / batch.len() as f64;
    for pair in batch {
        let feats_pos = featurizer.features(&pair.image_pos, &pair.question)?;
        let feats_neg = featurizer.features(&pair.image_neg, &pair.question)?;
        let m = crossmodal_margin(pair, policy, reference, featurizer, beta)?;
        loss += softplus(-m) * inv_n;
        let scale = -sigmoid(-m) * inv_n;
        let g_pos = policy.grad_log_prob(&feats_pos, &pair.answer)?;
        let g_neg = policy.grad_log_prob(&feats_neg, &pair.answer)?;
        accumulate_margin_grad(&mut grad, scale, &g_pos, &g_neg, beta);
    }
    Ok((loss, grad))
}

/// Composite loss with its gradient w.r.t. the policy weights.
pub fn mdpo_total_grad(
    batch_pref: &[PreferenceTuple],
    batch_cm: &[CrossModalPair],
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    featurizer: &CandidateFeaturizer,
    config: &MdpoConfig,
    anchor: &Anchor,
) -> Result<(MdpoComponents, Vec<f64>)> {
    let (dpo, g_dpo) = dpo_loss_grad(batch_pref, policy, reference, featurizer, config.beta)?;
    let (ra, g_ra) = ra_loss_grad(
        batch_pref,
        policy,
        reference,
        featurizer,
        config.beta,
        anchor,
    )?;
    let (cm, g_cm) = if batch_cm.is_empty() && config.lambda_cm == 0.0 {
        (0.0, vec![0.0; policy.dim()])
    } else {
        cm_loss_grad(batch_cm, policy, reference, featurizer, config.beta)?
    };
    let mut grad = g_dpo;
    for ((g, &gc), &gr) in grad.iter_mut().zip(&g_cm).zip(&g_ra) {
        *g += config.lambda_cm * gc + config.lambda_ra * gr;
    }
    let components = MdpoComponents {
        dpo,
        cm,
        ra,
        total: dpo + config.lambda_cm * cm + config.lambda_ra * ra,
    };
    Ok((components, grad))
}

/// Training datasets. The calibration split feeds the anchor and must be
/// disjoint from the training tuples; that property is caller-enforced and
/// only recorded here.
#[derive(Debug, Clone)]
pub struct MdpoDatasets {
    pub preference: Vec<PreferenceTuple>,
    pub crossmodal: Vec<CrossModalPair>,
    pub calibration: Vec<PreferenceTuple>,
    pub calibration_disjoint: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossTraceRow {
    pub epoch: usize,
    pub batch: usize,
    pub dpo: f64,
    pub cm: f64,
    pub ra: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: ToyPolicy,
    pub anchor: Anchor,
    pub trace: Vec<LossTraceRow>,
    pub calibration_disjoint: bool,
}

/// Mini-batch gradient descent on the composite loss.
///
/// The anchor is computed once, before the epoch loop, from the calibration
/// split (or taken from `anchor_override`). Batch order is shuffled per
/// epoch from `config.seed`, so the run is deterministic end to end.
pub fn train_mdpo(
    data: &MdpoDatasets,
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    featurizer: &CandidateFeaturizer,
    config: &MdpoConfig,
    anchor_override: Option<Anchor>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_pair(policy, reference)?;
    if data.preference.is_empty() {
        return Err(Error::domain("training preference set must be non-empty"));
    }
    for tuple in data.preference.iter().chain(&data.calibration) {
        tuple.validate()?;
    }
    if data.crossmodal.is_empty() && config.lambda_cm > 0.0 {
        return Err(Error::domain(
            "cross-modal set must be non-empty when lambda_cm > 0",
        ));
    }

    let anchor = match anchor_override {
        Some(a) => a,
        None if data.calibration.is_empty() => Anchor::zero(),
        None => estimate_anchor(
            &data.calibration,
            policy,
            reference,
            featurizer,
            config.beta,
            config.anchor_percentile,
        )?,
    };

    let mut policy = policy.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = data.preference.len();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let cm_chunks: Vec<&[CrossModalPair]> = if data.crossmodal.is_empty() {
        Vec::new()
    } else {
        data.crossmodal.chunks(config.batch_size).collect()
    };
    let mut trace = Vec::with_capacity(config.epochs * batches_per_epoch);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<PreferenceTuple> =
                chunk.iter().map(|&i| data.preference[i].clone()).collect();
            let cm_batch: &[CrossModalPair] = if cm_chunks.is_empty() {
                &[]
            } else {
                cm_chunks[batch_idx % cm_chunks.len()]
            };
            let (components, grad) = mdpo_total_grad(
                &batch, cm_batch, &policy, reference, featurizer, config, &anchor,
            )?;
            if !components.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            policy.gradient_step(&grad, config.learning_rate)?;
            trace.push(LossTraceRow {
                epoch,
                batch: batch_idx,
                dpo: components.dpo,
                cm: components.cm,
                ra: components.ra,
                total: components.total,
            });
        }
    }

    Ok(TrainOutcome {
        policy,
        anchor,
        trace,
        calibration_disjoint: data.calibration_disjoint,
    })
}

pub fn write_trace_csv(trace: &[LossTraceRow], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,batch,dpo,cm,ra,total")?;
    for row in trace {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            row.epoch, row.batch, row.dpo, row.cm, row.ra, row.total
        )?;
    }
    Ok(())
}

pub fn write_preference_jsonl(records: &[PreferenceTuple], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        writeln!(out)?;
    }
    Ok(())
}

/// Load preference records; tuples with identical chosen/rejected answers
/// are rejected at load time.
pub fn read_preference_jsonl(path: &Path) -> Result<Vec<PreferenceTuple>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PreferenceTuple = serde_json::from_str(&line)?;
        rec.validate()?;
        records.push(rec);
    }
    Ok(records)
}

pub fn write_crossmodal_jsonl(records: &[CrossModalPair], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_crossmodal_jsonl(path: &Path) -> Result<Vec<CrossModalPair>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CrossModalPair = serde_json::from_str(&line)?;
        if rec.image_pos == rec.image_neg {
            return Err(Error::domain(
                "cross-modal record with identical positive and negative images",
            ));
        }
        records.push(rec);
    }
    Ok(records)
}
