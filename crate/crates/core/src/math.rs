//! Small numeric helpers shared across modules.

/// Logistic sigmoid, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// softplus(x) = ln(1 + e^x) without overflow.
///
/// `-log(sigmoid(m))` is `softplus(-m)`; this form stays finite for
/// margins up to the hundreds where the naive expression overflows.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// log(sum(exp(xs))) with max-shift.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    let sum: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + sum.ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; `NaN` only if either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (l2_norm(a) * l2_norm(b))
}

/// Population mean and standard deviation (two-pass).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Shannon entropy in nats; 0·ln 0 is taken as 0.
pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_matches_direct_form() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.5, 3.0] {
            let direct = 1.0 / (1.0 + (-x).exp());
            assert!((sigmoid(x) - direct).abs() < 1e-15);
        }
        assert!(sigmoid(800.0) == 1.0);
        assert!(sigmoid(-800.0) >= 0.0);
    }

    #[test]
    fn softplus_is_neg_log_sigmoid() {
        for &m in &[-20.0, -1.5, 0.0, 1.5, 20.0] {
            let expected = -sigmoid(m).ln();
            assert!((softplus(-m) - expected).abs() < 1e-12, "m={m}");
        }
        // no overflow at extreme margins
        assert!(softplus(-500.0).is_finite());
        assert!(softplus(500.0).is_finite());
        assert!((softplus(-20.0) - (1.0f64 + (-20.0f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn log_sum_exp_shifts() {
        let xs = [1000.0, 1000.0];
        assert!((log_sum_exp(&xs) - (1000.0 + 2.0f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn entropy_uniform_is_ln_n() {
        let p = [0.25; 4];
        assert!((entropy(&p) - 4.0f64.ln()).abs() < 1e-12);
    }
}
