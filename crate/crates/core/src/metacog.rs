//! Expert dependency graph and the two-stage confidence estimator.
//!
//! Stage 1 is a one-hidden-layer MLP (tanh hidden, sigmoid output) scoring
//! a decoder hidden state. Stage 2 perturbs the hidden state toward the
//! most influential parent expert's mean feature and penalizes the score by
//! the normalized Jensen-Shannon divergence between the output
//! distributions before and after the perturbation. The estimator is
//! trained with a squared-error uncertainty regression against correctness
//! targets.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::policy::FeatureVector;

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_EPSILON_INTERP: f64 = 0.1;
pub const DEFAULT_S_NORM: f64 = LN_2;
pub const DEFAULT_U_LOW: f64 = 0.1;
pub const DEFAULT_U_HIGH: f64 = 0.9;
pub const DEFAULT_HIDDEN_DIM: usize = 16;
pub const DEFAULT_SIGNIFICANCE: f64 = 0.05;
pub const DEFAULT_RESTARTS: usize = 5;

/// Influence of expert `i` on expert `j`: accuracy with `i`'s knowledge
/// shared minus baseline accuracy.
pub fn influence_score(acc_with: f64, acc_base: f64) -> Result<f64> {
    for acc in [acc_with, acc_base] {
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::domain(format!("accuracy {acc} outside [0, 1]")));
        }
    }
    Ok(acc_with - acc_base)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    pub mean_gain: f64,
    pub gains: Vec<f64>,
    pub significant: bool,
}

/// Directed acyclic graph of expert influences.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "GraphFile", into = "GraphFile")]
pub struct DependencyGraph {
    pub num_experts: usize,
    pub edges: Vec<GraphEdge>,
}

/// `graph.json` layout: explicit node list plus edges.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphFile {
    nodes: Vec<usize>,
    edges: Vec<GraphEdge>,
}

impl From<GraphFile> for DependencyGraph {
    fn from(f: GraphFile) -> Self {
        DependencyGraph {
            num_experts: f.nodes.len(),
            edges: f.edges,
        }
    }
}

impl From<DependencyGraph> for GraphFile {
    fn from(g: DependencyGraph) -> Self {
        GraphFile {
            nodes: (0..g.num_experts).collect(),
            edges: g.edges,
        }
    }
}

impl DependencyGraph {
    pub fn empty(num_experts: usize) -> Self {
        DependencyGraph {
            num_experts,
            edges: Vec::new(),
        }
    }

    pub fn parents_of(&self, expert: usize) -> impl Iterator<Item = &GraphEdge> {
        self.edges.iter().filter(move |e| e.to == expert)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                stage: "build-graph".into(),
                path: path.to_path_buf(),
            });
        }
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }
}

/// Accuracy pairs `(acc_with, acc_base)` per ordered expert pair, one entry
/// per restart.
pub type GainTable = BTreeMap<(usize, usize), Vec<(f64, f64)>>;

/// One-sided one-sample t-test p-value for H0: mean <= 0.
///
/// A zero-variance sample degenerates to p = 0 for a positive mean and
/// p = 1 otherwise.
fn positive_mean_p_value(gains: &[f64]) -> f64 {
    let n = gains.len() as f64;
    let mean = gains.iter().sum::<f64>() / n;
    let var = gains.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return if mean > 0.0 { 0.0 } else { 1.0 };
    }
    let t = mean / (var.sqrt() / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("valid dof");
    1.0 - dist.cdf(t)
}

/// Build the dependency graph from restart accuracy tables.
///
/// An edge `(i, j)` is retained iff its mean influence gain exceeds
/// `edge_threshold` and (when a significance level is given) a one-sample
/// t-test rejects a non-positive mean at that level. Cycles are then broken
/// by repeatedly removing the lowest-mean-gain edge on any remaining cycle.
pub fn build_dependency_graph(
    num_experts: usize,
    table: &GainTable,
    edge_threshold: f64,
    significance_level: Option<f64>,
) -> Result<DependencyGraph> {
    let mut edges = Vec::new();
    for (&(from, to), runs) in table {
        if from == to {
            return Err(Error::domain(format!(
                "self-influence entry ({from} -> {to}) is not allowed"
            )));
        }
        if from >= num_experts || to >= num_experts {
            return Err(Error::domain(format!(
                "expert pair ({from}, {to}) outside [0, {num_experts})"
            )));
        }
        if significance_level.is_some() && runs.len() < 2 {
            return Err(Error::config(format!(
                "edge ({from}, {to}) has {} restart(s); the significance test needs at least 2",
                runs.len()
            )));
        }
        if runs.is_empty() {
            return Err(Error::domain(format!(
                "edge ({from}, {to}) has no restart samples"
            )));
        }
        let gains = runs
            .iter()
            .map(|&(w, b)| influence_score(w, b))
            .collect::<Result<Vec<_>>>()?;
        let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
        let significant = match significance_level {
            None => true,
            Some(level) => positive_mean_p_value(&gains) < level,
        };
        if significant && mean_gain > edge_threshold {
            edges.push(GraphEdge {
                from,
                to,
                mean_gain,
                gains,
                significant,
            });
        }
    }
    prune_cycles(&mut edges, num_experts);
    Ok(DependencyGraph { num_experts, edges })
}

/// Find one directed cycle, returned as edge indices, or `None`.
fn find_cycle(edges: &[GraphEdge], num_experts: usize) -> Option<Vec<usize>> {
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_experts]; // (to, edge idx)
    for (idx, e) in edges.iter().enumerate() {
        adj[e.from].push((e.to, idx));
    }
    for row in &mut adj {
        row.sort();
    }

    // colors: 0 unvisited, 1 on stack, 2 done
    let mut color = vec![0u8; num_experts];
    let mut stack: Vec<(usize, usize)> = Vec::new(); // (node, edge taken into it)

    fn dfs(
        node: usize,
        adj: &[Vec<(usize, usize)>],
        color: &mut [u8],
        stack: &mut Vec<(usize, usize)>,
    ) -> Option<Vec<usize>> {
        color[node] = 1;
        for &(next, edge_idx) in &adj[node] {
            if color[next] == 1 {
                // cycle closes at `next`; collect edges from `next` onward
                let mut cycle = vec![edge_idx];
                let pos = stack.iter().position(|&(n, _)| n == next);
                if let Some(pos) = pos {
                    for &(_, e) in &stack[pos + 1..] {
                        cycle.push(e);
                    }
                }
                return Some(cycle);
            }
            if color[next] == 0 {
                stack.push((next, edge_idx));
                if let Some(cycle) = dfs(next, adj, color, stack) {
                    return Some(cycle);
                }
                stack.pop();
            }
        }
        color[node] = 2;
        None
    }

    for start in 0..num_experts {
        if color[start] == 0 {
            stack.clear();
            stack.push((start, usize::MAX));
            if let Some(mut cycle) = dfs(start, &adj, &mut color, &mut stack) {
                cycle.retain(|&e| e != usize::MAX);
                return Some(cycle);
            }
            stack.pop();
        }
    }
    None
}

/// Greedily remove the lowest-mean-gain edge on any cycle until acyclic.
fn prune_cycles(edges: &mut Vec<GraphEdge>, num_experts: usize) {
    while let Some(cycle) = find_cycle(edges, num_experts) {
        let victim = cycle
            .into_iter()
            .min_by(|&a, &b| {
                edges[a]
                    .mean_gain
                    .partial_cmp(&edges[b].mean_gain)
                    .unwrap()
                    .then_with(|| (edges[a].from, edges[a].to).cmp(&(edges[b].from, edges[b].to)))
            })
            .expect("cycle is non-empty");
        edges.remove(victim);
    }
}

/// The most influential parent of `d_star`: argmax mean gain over incoming
/// edges, ties to the lower expert id. `None` when `d_star` has no parents.
pub fn most_influential_parent(graph: &DependencyGraph, d_star: usize) -> Result<Option<usize>> {
    if d_star >= graph.num_experts {
        return Err(Error::domain(format!(
            "expert {d_star} outside [0, {})",
            graph.num_experts
        )));
    }
    Ok(graph
        .parents_of(d_star)
        .min_by(|a, b| {
            b.mean_gain
                .partial_cmp(&a.mean_gain)
                .unwrap()
                .then_with(|| a.from.cmp(&b.from))
        })
        .map(|e| e.from))
}

/// `h' = (1 − ε) h + ε μ_k`.
pub fn perturb(
    h: &FeatureVector,
    mu: &FeatureVector,
    epsilon_interp: f64,
) -> Result<FeatureVector> {
    if h.dim() != mu.dim() {
        return Err(Error::Shape {
            expected: h.dim(),
            got: mu.dim(),
        });
    }
    if !(0.0..=1.0).contains(&epsilon_interp) {
        return Err(Error::domain(format!(
            "interpolation epsilon {epsilon_interp} outside [0, 1]"
        )));
    }
    FeatureVector::new(
        h.values()
            .iter()
            .zip(mu.values())
            .map(|(&a, &b)| (1.0 - epsilon_interp) * a + epsilon_interp * b)
            .collect(),
    )
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::domain(
            "distribution has negative or non-finite mass",
        ));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!(
            "distribution sums to {total}, expected 1 within 1e-9"
        )));
    }
    Ok(())
}

/// Jensen-Shannon divergence in nats; symmetric, in `[0, ln 2]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            expected: p.len(),
            got: q.len(),
        });
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let mut js = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let mi = 0.5 * (pi + qi);
        if pi > 0.0 {
            js += 0.5 * pi * (pi / mi).ln();
        }
        if qi > 0.0 {
            js += 0.5 * qi * (qi / mi).ln();
        }
    }
    // rounding can leave a tiny negative residue when p ≈ q
    Ok(js.max(0.0))
}

/// `Δ = −JS(P(Y|h) ‖ P(Y|h')) / s`, in `[−1, 0]` when `s = ln 2`.
pub fn stability_adjustment<F>(
    expert_predict: F,
    h: &FeatureVector,
    h_perturbed: &FeatureVector,
    s_norm: f64,
) -> Result<f64>
where
    F: Fn(&FeatureVector) -> Vec<f64>,
{
    if s_norm <= 0.0 {
        return Err(Error::domain("normalization constant s must be > 0"));
    }
    let js = js_divergence(&expert_predict(h), &expert_predict(h_perturbed))?;
    Ok(-js / s_norm)
}

/// Final stability-adjusted confidence `σ(u_base + α Δ)`.
pub fn confidence(u_base: f64, delta: f64, alpha: f64) -> f64 {
    sigmoid(u_base + alpha * delta)
}

/// Mean hidden-state feature per expert, exchanged between sites in the
/// clear (the secure-aggregation seam is this type's construction).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParentMeans(pub BTreeMap<usize, FeatureVector>);

impl ParentMeans {
    pub fn get(&self, expert: usize) -> Option<&FeatureVector> {
        self.0.get(&expert)
    }

    pub fn insert(&mut self, expert: usize, mean: FeatureVector) {
        self.0.insert(expert, mean);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                stage: "build-graph".into(),
                path: path.to_path_buf(),
            });
        }
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }
}

/// One-hidden-layer MLP scorer with the stage-2 hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceEstimator {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Row-major `hidden_dim × input_dim`.
    pub weights_1: Vec<Vec<f64>>,
    pub bias_1: Vec<f64>,
    pub weights_2: Vec<f64>,
    pub bias_2: f64,
    pub alpha: f64,
    pub epsilon_interp: f64,
    pub s_norm: f64,
    pub u_low: f64,
    pub u_high: f64,
}

impl ConfidenceEstimator {
    pub fn seeded(input_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let init = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).unwrap();
        ConfidenceEstimator {
            input_dim,
            hidden_dim,
            weights_1: (0..hidden_dim)
                .map(|_| (0..input_dim).map(|_| init.sample(&mut rng)).collect())
                .collect(),
            bias_1: vec![0.0; hidden_dim],
            weights_2: (0..hidden_dim).map(|_| init.sample(&mut rng)).collect(),
            bias_2: 0.0,
            alpha: DEFAULT_ALPHA,
            epsilon_interp: DEFAULT_EPSILON_INTERP,
            s_norm: DEFAULT_S_NORM,
            u_low: DEFAULT_U_LOW,
            u_high: DEFAULT_U_HIGH,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.u_low && self.u_low < self.u_high && self.u_high <= 1.0) {
            return Err(Error::config(
                "uncertainty targets must satisfy 0 <= u_low < u_high <= 1",
            ));
        }
        if self.s_norm <= 0.0 {
            return Err(Error::config("s_norm must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.epsilon_interp) {
            return Err(Error::config("epsilon_interp must lie in [0, 1]"));
        }
        Ok(())
    }

    fn check_input(&self, h: &FeatureVector) -> Result<()> {
        if h.dim() != self.input_dim {
            return Err(Error::Shape {
                expected: self.input_dim,
                got: h.dim(),
            });
        }
        Ok(())
    }

    fn hidden_activations(&self, h: &FeatureVector) -> Vec<f64> {
        self.weights_1
            .iter()
            .zip(&self.bias_1)
            .map(|(row, b)| (crate::math::dot(row, h.values()) + b).tanh())
            .collect()
    }

    /// Pre-sigmoid score `z = W2 · tanh(W1 h + b1) + b2`.
    pub fn base_score(&self, h: &FeatureVector) -> Result<f64> {
        self.check_input(h)?;
        let act = self.hidden_activations(h);
        Ok(crate::math::dot(&self.weights_2, &act) + self.bias_2)
    }

    /// Stage-1 base confidence `u_base = σ(z)`, strictly inside (0, 1).
    pub fn base_confidence(&self, h: &FeatureVector) -> Result<f64> {
        Ok(sigmoid(self.base_score(h)?))
    }

    /// All parameters flattened as `[W1 row-major, b1, W2, b2]`.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for row in &self.weights_1 {
            flat.extend_from_slice(row);
        }
        flat.extend_from_slice(&self.bias_1);
        flat.extend_from_slice(&self.weights_2);
        flat.push(self.bias_2);
        flat
    }

    pub fn num_params(&self) -> usize {
        self.hidden_dim * self.input_dim + self.hidden_dim + self.hidden_dim + 1
    }

    pub fn with_params_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut est = self.clone();
        let mut it = flat.iter().copied();
        for row in &mut est.weights_1 {
            for w in row.iter_mut() {
                *w = it.next().unwrap();
            }
        }
        for b in &mut est.bias_1 {
            *b = it.next().unwrap();
        }
        for w in &mut est.weights_2 {
            *w = it.next().unwrap();
        }
        est.bias_2 = it.next().unwrap();
        Ok(est)
    }

    /// Squared-error uncertainty loss and its gradient over the flattened
    /// parameters, for one example with known correctness.
    fn reg_loss_grad(&self, h: &FeatureVector, correct: bool) -> Result<(f64, Vec<f64>)> {
        self.check_input(h)?;
        let target = if correct { self.u_low } else { self.u_high };
        let act = self.hidden_activations(h);
        let z = crate::math::dot(&self.weights_2, &act) + self.bias_2;
        let g = sigmoid(z);
        let residual = (1.0 - g) - target;
        let loss = residual * residual;

        // dL/dz = 2 residual · d(1−σ(z))/dz = −2 residual · σ'(z)
        let dz = -2.0 * residual * g * (1.0 - g);
        let mut grad_w1 = Vec::with_capacity(self.hidden_dim * self.input_dim);
        let mut grad_b1 = Vec::with_capacity(self.hidden_dim);
        for (i, &a) in act.iter().enumerate() {
            let d_pre = dz * self.weights_2[i] * (1.0 - a * a);
            grad_w1.extend(h.values().iter().map(|&x| d_pre * x));
            grad_b1.push(d_pre);
        }
        let mut grad = grad_w1;
        grad.extend(grad_b1);
        grad.extend(act.iter().map(|&a| dz * a));
        grad.push(dz);
        Ok((loss, grad))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                stage: "train-estimator".into(),
                path: path.to_path_buf(),
            });
        }
        let est: ConfidenceEstimator = serde_json::from_reader(std::fs::File::open(path)?)?;
        est.validate()?;
        Ok(est)
    }
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Regression target: low uncertainty when the prediction is correct, high
/// otherwise; loss `((1 − g_base(h)) − u*)²`.
pub fn uncertainty_reg_loss(
    estimator: &ConfidenceEstimator,
    h: &FeatureVector,
    predicted_dist: &[f64],
    true_label: usize,
    u_low: f64,
    u_high: f64,
) -> Result<f64> {
    if true_label >= predicted_dist.len() {
        return Err(Error::domain(format!(
            "true label {true_label} outside the {}-way output space",
            predicted_dist.len()
        )));
    }
    let correct = argmax(predicted_dist) == true_label;
    let target = if correct { u_low } else { u_high };
    let g = estimator.base_confidence(h)?;
    let residual = (1.0 - g) - target;
    Ok(residual * residual)
}

/// Loss and flat-parameter gradient for one labeled example; exposed for
/// gradient verification.
pub fn uncertainty_reg_loss_grad(
    estimator: &ConfidenceEstimator,
    h: &FeatureVector,
    correct: bool,
) -> Result<(f64, Vec<f64>)> {
    estimator.reg_loss_grad(h, correct)
}

/// A labeled hidden state for estimator training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorExample {
    pub hidden: FeatureVector,
    pub predicted_dist: Vec<f64>,
    pub true_label: usize,
}

impl EstimatorExample {
    pub fn is_correct(&self) -> bool {
        argmax(&self.predicted_dist) == self.true_label
    }
}

#[derive(Debug, Clone)]
pub struct EstimatorTraining {
    pub estimator: ConfidenceEstimator,
    /// Mean corpus loss at the start of each step; length == steps.
    pub trace: Vec<f64>,
    /// Set when the corpus has only correct or only incorrect examples.
    pub single_class_warning: bool,
}

/// Full-batch gradient descent on the uncertainty regression loss.
pub fn train_estimator(
    corpus: &[EstimatorExample],
    estimator: &ConfidenceEstimator,
    learning_rate: f64,
    steps: usize,
) -> Result<EstimatorTraining> {
    if corpus.is_empty() {
        return Err(Error::domain("estimator training corpus must be non-empty"));
    }
    estimator.validate()?;
    let n_correct = corpus.iter().filter(|ex| ex.is_correct()).count();
    let single_class_warning = n_correct == 0 || n_correct == corpus.len();

    let mut est = estimator.clone();
    let mut trace = Vec::with_capacity(steps);
    let inv_n = 1.0 / corpus.len() as f64;
    for _ in 0..steps {
        let mut mean_loss = 0.0;
        let mut grad = vec![0.0; est.num_params()];
        for ex in corpus {
            let (loss, g) = est.reg_loss_grad(&ex.hidden, ex.is_correct())?;
            mean_loss += loss * inv_n;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += gi * inv_n;
            }
        }
        trace.push(mean_loss);
        let mut params = est.params_flat();
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= learning_rate * g;
        }
        est = est.with_params_flat(&params)?;
    }
    Ok(EstimatorTraining {
        estimator: est,
        trace,
        single_class_warning,
    })
}
