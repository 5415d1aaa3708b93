//! Cross-entropy and the confusion-penalizing cross-entropy.
//!
//! For true class `i`, softmax output `q` and weight matrix `C`:
//!
//! ```text
//! L = c_ii·(−log q_i) + λ·Σ_{j≠i} c_ij·(−log(1 − q_j))
//! ```
//!
//! The second term grows as probability moves onto classes that `i` is
//! confused with. Its gradient with respect to the logits is
//!
//! ```text
//! S       = c_ii + λ·Σ_{j≠i} c_ij·q_j/(q_j − 1)
//! ∂L/∂φ_i = q_i·S − c_ii
//! ∂L/∂φ_k = q_k·S − λ·c_ik·q_k/(q_k − 1)     (k ≠ i)
//! ```
//!
//! Log arguments are clamped below at `ε`, and `q_j` is clamped above at
//! `1 − ε` inside the ratios, so both stay finite at the simplex vertices.

use crate::confusion::WeightMatrix;
use crate::error::{Error, Result};
use crate::numeric::{softmax, softmax_slice, DenseMatrix, LogitVector, ProbabilityVector, Rng};

pub const DEFAULT_LAMBDA: f64 = 5.0;
pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub weight_matrix: WeightMatrix,
    pub epsilon: f64,
}

impl LossConfig {
    pub fn new(lambda: f64, weight_matrix: WeightMatrix) -> Result<Self> {
        let cfg = Self {
            lambda,
            weight_matrix,
            epsilon: DEFAULT_EPSILON,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// λ = 0 and C = I: plain cross-entropy.
    pub fn standard(class_count: usize) -> Self {
        Self {
            lambda: 0.0,
            weight_matrix: WeightMatrix::identity(class_count),
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        self.epsilon = epsilon;
        self.validate()?;
        Ok(self)
    }

    pub fn class_count(&self) -> usize {
        self.weight_matrix.class_count()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(Error::Config(format!("epsilon {} outside (0, 1e-3]", self.epsilon)));
        }
        Ok(())
    }
}

/// The true class of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneHotLabel {
    class_index: usize,
    class_count: usize,
}

impl OneHotLabel {
    pub fn new(class_index: usize, class_count: usize) -> Result<Self> {
        if class_index >= class_count {
            return Err(Error::InvalidLabel {
                label: class_index,
                class_count,
            });
        }
        Ok(Self {
            class_index,
            class_count,
        })
    }

    pub fn index(&self) -> usize {
        self.class_index
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }
}

fn check_len(len: usize, label: &OneHotLabel, cfg: Option<&LossConfig>) -> Result<()> {
    if len != label.class_count {
        return Err(Error::Shape(format!(
            "{len} scores for a {}-class label",
            label.class_count
        )));
    }
    if let Some(cfg) = cfg {
        if cfg.class_count() != len {
            return Err(Error::Shape(format!(
                "{}x{0} weight matrix for {len} classes",
                cfg.class_count()
            )));
        }
    }
    Ok(())
}

/// `−log(max(q_i, ε))` with the default ε.
pub fn standard_ce(q: &ProbabilityVector, label: &OneHotLabel) -> Result<f64> {
    check_len(q.len(), label, None)?;
    Ok(-q.values()[label.index()].max(DEFAULT_EPSILON).ln())
}

pub fn improved_ce(q: &ProbabilityVector, label: &OneHotLabel, cfg: &LossConfig) -> Result<f64> {
    check_len(q.len(), label, Some(cfg))?;
    Ok(improved_ce_unchecked(q.values(), label.index(), cfg))
}

fn improved_ce_unchecked(q: &[f64], truth: usize, cfg: &LossConfig) -> f64 {
    let c = &cfg.weight_matrix;
    let eps = cfg.epsilon;
    let correct = c.get(truth, truth) * -q[truth].max(eps).ln();
    let penalty: f64 = q
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != truth)
        .map(|(j, &qj)| c.get(truth, j) * -(1.0 - qj).max(eps).ln())
        .sum();
    correct + cfg.lambda * penalty
}

/// Closed-form gradient of the improved loss with respect to the logits.
pub fn improved_ce_grad(logits: &LogitVector, label: &OneHotLabel, cfg: &LossConfig) -> Result<Vec<f64>> {
    check_len(logits.len(), label, Some(cfg))?;
    let q = softmax(logits);
    Ok(improved_ce_grad_from_probs(q.values(), label.index(), cfg))
}

fn improved_ce_grad_from_probs(q: &[f64], truth: usize, cfg: &LossConfig) -> Vec<f64> {
    let c = &cfg.weight_matrix;
    let ceiling = 1.0 - cfg.epsilon;
    // q/(q − 1) with q clamped away from 1
    let ratio = |v: f64| {
        let v = v.min(ceiling);
        v / (v - 1.0)
    };
    let c_ii = c.get(truth, truth);
    let weighted: f64 = q
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != truth)
        .map(|(j, &qj)| c.get(truth, j) * ratio(qj))
        .sum();
    let s = c_ii + cfg.lambda * weighted;
    q.iter()
        .enumerate()
        .map(|(k, &qk)| {
            if k == truth {
                qk * s - c_ii
            } else {
                qk * s - cfg.lambda * ratio(qk) * c.get(truth, k)
            }
        })
        .collect()
}

/// Improved loss evaluated on softmax of raw logits.
pub fn improved_ce_of_logits(logits: &[f64], truth: usize, cfg: &LossConfig) -> f64 {
    improved_ce_unchecked(&softmax_slice(logits), truth, cfg)
}

/// Central differences `(f(φ + h·e_k) − f(φ − h·e_k)) / 2h`.
pub fn finite_diff_grad<F>(loss_fn: F, logits: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(1e-8..=1e-3).contains(&step) {
        return Err(Error::Config(format!("finite-difference step {step} outside [1e-8, 1e-3]")));
    }
    let mut probe = logits.to_vec();
    Ok((0..logits.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + step;
            let up = loss_fn(&probe);
            probe[k] = orig - step;
            let down = loss_fn(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * step)
        })
        .collect())
}

/// Mean loss over the rows of a logits batch and its gradient, already
/// scaled by `1/N`.
pub fn batch_loss_and_grad(logits: &DenseMatrix, labels: &[usize], cfg: &LossConfig) -> Result<(f64, DenseMatrix)> {
    let (n, k) = logits.shape();
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} logit rows vs {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if cfg.class_count() != k {
        return Err(Error::Shape(format!(
            "{}-class loss for {k} logits",
            cfg.class_count()
        )));
    }
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = DenseMatrix::zeros(n, k);
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::InvalidLabel {
                label,
                class_count: k,
            });
        }
        let row = logits.row(r);
        let q = softmax_slice(row);
        total += improved_ce_unchecked(&q, label, cfg);
        for (g, v) in grad
            .row_mut(r)
            .iter_mut()
            .zip(improved_ce_grad_from_probs(&q, label, cfg))
        {
            *g = v * scale;
        }
    }
    Ok((total * scale, grad))
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central differences of [`improved_ce_of_logits`] at step `h`, with every
/// difference `L(φ + h·e_k) − L(φ − h·e_k)` expanded term by term.
///
/// Moving logit `k` by `t` shifts a log-sum-exp by `log1p(p_k·expm1(t))`,
/// where `p` is the softmax over the logits the sum runs over. Each term of
/// the loss is such a shift, so the difference is formed without
/// subtracting two nearly equal loss values. Plain central differences lose
/// about `ulp(L)/h ≈ 1e-9` to rounding, which is the same size as the
/// smallest gradient coordinates.
///
/// Coordinates where a clamp would engage fall back to
/// [`finite_diff_grad`].
pub fn central_diff_improved_ce(logits: &[f64], truth: usize, cfg: &LossConfig, h: f64) -> Result<Vec<f64>> {
    let k_len = logits.len();
    if truth >= k_len {
        return Err(Error::InvalidLabel {
            label: truth,
            class_count: k_len,
        });
    }
    if cfg.class_count() != k_len {
        return Err(Error::Shape(format!("{} classes in C, {k_len} logits", cfg.class_count())));
    }
    let plain = finite_diff_grad(|z| improved_ce_of_logits(z, truth, cfg), logits, h)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = e.iter().sum();
    let q: Vec<f64> = e.iter().map(|v| v / total).collect();
    // slack for the clamp test: q moves by at most about q·h
    let margin = 4.0 * cfg.epsilon;
    let clamped = q[truth] <= margin || q.iter().enumerate().any(|(j, &qj)| j != truth && 1.0 - qj <= margin);
    if clamped {
        return Ok(plain);
    }
    let (up, down) = (h.exp_m1(), (-h).exp_m1());
    let shift = |p: f64| (p * up).ln_1p() - (p * down).ln_1p();
    let c = &cfg.weight_matrix;
    Ok((0..k_len)
        .map(|k| {
            let d_lse = shift(q[k]);
            let mut diff = c.get(truth, truth) * (d_lse - if k == truth { 2.0 * h } else { 0.0 });
            for j in (0..k_len).filter(|&j| j != truth) {
                // −log(1 − q_j) = lse(φ) − lse(φ without j)
                let d_rest = if k == j {
                    0.0
                } else {
                    let rest: f64 = (0..k_len).filter(|&m| m != j).map(|m| e[m]).sum();
                    shift(e[k] / rest)
                };
                diff += cfg.lambda * c.get(truth, j) * (d_lse - d_rest);
            }
            diff / (2.0 * h)
        })
        .collect())
}

/// Settings for the randomized gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub min_classes: usize,
    pub max_classes: usize,
    pub lambdas: Vec<f64>,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 200,
            min_classes: 2,
            max_classes: 12,
            lambdas: vec![0.0, 0.5, 1.0, 5.0],
            step: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub trials: usize,
    pub max_relative_error: f64,
    /// Largest coordinate-wise `|analytic − numeric|` over all trials.
    pub max_abs_error: f64,
    /// (trial, class count, λ) of the worst coordinate.
    pub worst_trial: (usize, usize, f64),
}

/// Compares the closed-form gradient with central differences on random
/// logits, labels and weight matrices (entries uniform in `[0, 1]`, unit
/// diagonal). λ cycles through `cfg.lambdas`.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.min_classes < 2 || cfg.max_classes < cfg.min_classes {
        return Err(Error::Config(format!(
            "class range {}..{} invalid",
            cfg.min_classes, cfg.max_classes
        )));
    }
    if cfg.lambdas.is_empty() {
        return Err(Error::Config("no lambda values".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut report = GradcheckReport {
        trials: cfg.trials,
        max_relative_error: 0.0,
        max_abs_error: 0.0,
        worst_trial: (0, 0, 0.0),
    };
    for trial in 0..cfg.trials {
        let k = cfg.min_classes + rng.below(cfg.max_classes - cfg.min_classes + 1);
        let lambda = cfg.lambdas[trial % cfg.lambdas.len()];
        let mut weights = DenseMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                weights.set(i, j, if i == j { 1.0 } else { rng.next_f64() });
            }
        }
        let loss_cfg = LossConfig::new(lambda, WeightMatrix::new(weights)?)?;
        let logits: Vec<f64> = (0..k).map(|_| rng.gaussian(0.0, 1.5)).collect();
        let truth = rng.below(k);
        let analytic = improved_ce_grad(
            &LogitVector::new(logits.clone())?,
            &OneHotLabel::new(truth, k)?,
            &loss_cfg,
        )?;
        let numeric = central_diff_improved_ce(&logits, truth, &loss_cfg, cfg.step)?;
        for (a, n) in analytic.iter().zip(&numeric) {
            report.max_abs_error = report.max_abs_error.max((a - n).abs());
            let err = relative_error(*a, *n);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_trial = (trial, k, lambda);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;
    use proptest::prelude::*;

    fn probs(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    fn ones(k: usize) -> WeightMatrix {
        WeightMatrix::new(DenseMatrix::from_vec(k, k, vec![1.0; k * k]).unwrap()).unwrap()
    }

    #[test]
    fn standard_ce_values() {
        let l0 = OneHotLabel::new(0, 3).unwrap();
        assert_eq!(standard_ce(&probs(&[1.0, 0.0, 0.0]), &l0).unwrap(), 0.0);
        let uniform = probs(&[0.25; 4]);
        let ce = standard_ce(&uniform, &OneHotLabel::new(2, 4).unwrap()).unwrap();
        assert!((ce - 1.386_294_361_119_890_6).abs() < 1e-15);
        let ce = standard_ce(&probs(&[0.7, 0.2, 0.1]), &l0).unwrap();
        assert!((ce - 0.356_674_943_938_732_38).abs() < 1e-15);
        assert!(matches!(
            standard_ce(&probs(&[0.5, 0.5]), &l0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn improved_ce_values() {
        let q = probs(&[0.7, 0.2, 0.1]);
        let l0 = OneHotLabel::new(0, 3).unwrap();
        let plain = LossConfig::standard(3);
        assert_eq!(improved_ce(&q, &l0, &plain).unwrap(), standard_ce(&q, &l0).unwrap());

        let cfg = LossConfig::new(1.0, ones(3)).unwrap();
        // mpmath: −ln 0.7 − ln 0.8 − ln 0.9
        let v = improved_ce(&q, &l0, &cfg).unwrap();
        assert!((v - 0.685_179_010_910_768_44).abs() < 1e-15, "{v}");

        let vertex = probs(&[1.0, 0.0, 0.0]);
        let heavy = LossConfig::new(7.0, ones(3)).unwrap();
        assert_eq!(improved_ce(&vertex, &l0, &heavy).unwrap(), 0.0);
    }

    #[test]
    fn gradient_reduces_to_softmax_minus_onehot() {
        let logits = LogitVector::new(vec![0.3, -1.2, 2.0, 0.1]).unwrap();
        let label = OneHotLabel::new(2, 4).unwrap();
        let g = improved_ce_grad(&logits, &label, &LossConfig::standard(4)).unwrap();
        let q = softmax(&logits);
        for (k, (gk, qk)) in g.iter().zip(q.values()).enumerate() {
            let expected = qk - if k == 2 { 1.0 } else { 0.0 };
            assert_eq!(*gk, expected);
        }
    }

    #[test]
    fn gradient_hand_example() {
        let cfg = LossConfig::new(1.0, ones(2)).unwrap();
        let g = improved_ce_grad(
            &LogitVector::new(vec![0.0, 0.0]).unwrap(),
            &OneHotLabel::new(0, 2).unwrap(),
            &cfg,
        )
        .unwrap();
        assert!((g[0] + 1.0).abs() < 1e-15 && (g[1] - 1.0).abs() < 1e-15, "{g:?}");
        let fd = finite_diff_grad(|z| improved_ce_of_logits(z, 0, &cfg), &[0.0, 0.0], 1e-6).unwrap();
        assert!(relative_error(fd[0], -1.0) < 1e-8 && relative_error(fd[1], 1.0) < 1e-8);
    }

    #[test]
    fn gradient_random_k5_lambda5() {
        let mut rng = Rng::new(2024);
        let k = 5;
        let mut w = DenseMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                w.set(i, j, if i == j { 1.0 } else { rng.next_f64() });
            }
        }
        let cfg = LossConfig::new(5.0, WeightMatrix::new(w).unwrap()).unwrap();
        let logits: Vec<f64> = (0..k).map(|_| rng.gaussian(0.0, 1.0)).collect();
        let g = improved_ce_grad(
            &LogitVector::new(logits.clone()).unwrap(),
            &OneHotLabel::new(3, k).unwrap(),
            &cfg,
        )
        .unwrap();
        let fd = finite_diff_grad(|z| improved_ce_of_logits(z, 3, &cfg), &logits, 1e-6).unwrap();
        for (a, b) in g.iter().zip(&fd) {
            assert!(relative_error(*a, *b) < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_rejects_bad_input() {
        let cfg = LossConfig::standard(3);
        assert!(LogitVector::new(vec![0.0, f64::NAN, 1.0]).is_err());
        let logits = LogitVector::new(vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            improved_ce_grad(&logits, &OneHotLabel::new(0, 2).unwrap(), &cfg),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn finite_differences_on_simple_functions() {
        let sq = |z: &[f64]| z.iter().map(|v| v * v).sum::<f64>();
        let g = finite_diff_grad(sq, &[1.0, 2.0], 1e-6).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        assert_eq!(finite_diff_grad(|_| 3.0, &[1.0, 2.0, 3.0], 1e-4).unwrap(), vec![0.0; 3]);
        assert!(finite_diff_grad(sq, &[1.0], 1e-2).is_err());
    }

    #[test]
    fn gradcheck_suite_passes() {
        let report = run_gradcheck(&GradcheckConfig::default()).unwrap();
        assert!(report.max_relative_error < 1e-5, "{report:?}");
        for seed in 1..20 {
            let cfg = GradcheckConfig { seed, ..GradcheckConfig::default() };
            let report = run_gradcheck(&cfg).unwrap();
            assert!(report.max_relative_error < 1e-5, "{report:?}");
        }
    }

    #[test]
    fn expanded_differences_track_plain_differences() {
        let mut rng = Rng::new(77);
        for _ in 0..300 {
            let k = 2 + rng.below(11);
            let mut w = DenseMatrix::zeros(k, k);
            for i in 0..k {
                for j in 0..k {
                    w.set(i, j, if i == j { 1.0 } else { rng.next_f64() });
                }
            }
            let cfg = LossConfig::new(rng.next_f64() * 5.0, WeightMatrix::new(w).unwrap()).unwrap();
            let logits: Vec<f64> = (0..k).map(|_| rng.gaussian(0.0, 2.0)).collect();
            let truth = rng.below(k);
            let plain = finite_diff_grad(|z| improved_ce_of_logits(z, truth, &cfg), &logits, 1e-5).unwrap();
            let expanded = central_diff_improved_ce(&logits, truth, &cfg, 1e-5).unwrap();
            for (p, e) in plain.iter().zip(&expanded) {
                assert!((p - e).abs() < 1e-8, "{p} vs {e}");
            }
        }
    }

    #[test]
    fn expanded_differences_fall_back_under_clamping() {
        let cfg = LossConfig::standard(3);
        let logits = [-40.0, 0.0, 0.0];
        let expanded = central_diff_improved_ce(&logits, 0, &cfg, 1e-6).unwrap();
        let plain = finite_diff_grad(|z| improved_ce_of_logits(z, 0, &cfg), &logits, 1e-6).unwrap();
        assert_eq!(expanded, plain);
        assert!(central_diff_improved_ce(&logits, 3, &cfg, 1e-6).is_err());
    }

    #[test]
    fn batch_reduction() {
        let cfg = LossConfig::new(2.0, ones(3)).unwrap();
        let a = [0.5, -0.2, 1.0];
        let b = [-1.0, 0.3, 0.0];
        let one = DenseMatrix::from_vec(1, 3, a.to_vec()).unwrap();
        let (loss, grad) = batch_loss_and_grad(&one, &[1], &cfg).unwrap();
        let single = improved_ce_grad(&LogitVector::new(a.to_vec()).unwrap(), &OneHotLabel::new(1, 3).unwrap(), &cfg).unwrap();
        assert_eq!(loss, improved_ce_of_logits(&a, 1, &cfg));
        assert_eq!(grad.row(0), single.as_slice());

        let twice = DenseMatrix::from_rows(&[a.to_vec(), a.to_vec()]).unwrap();
        let (loss2, _) = batch_loss_and_grad(&twice, &[1, 1], &cfg).unwrap();
        assert_eq!(loss2, loss);

        let mixed = DenseMatrix::from_rows(&[a.to_vec(), b.to_vec()]).unwrap();
        let (mean, _) = batch_loss_and_grad(&mixed, &[1, 2], &cfg).unwrap();
        let expected = (improved_ce_of_logits(&a, 1, &cfg) + improved_ce_of_logits(&b, 2, &cfg)) / 2.0;
        assert!((mean - expected).abs() < 1e-15);

        assert!(matches!(batch_loss_and_grad(&mixed, &[1], &cfg), Err(Error::Shape(_))));
        assert!(matches!(
            batch_loss_and_grad(&mixed, &[1, 3], &cfg),
            Err(Error::InvalidLabel { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::new(-1.0, ones(2)).is_err());
        assert!(LossConfig::standard(2).with_epsilon(0.0).is_err());
        assert!(LossConfig::standard(2).with_epsilon(1e-2).is_err());
        assert!(OneHotLabel::new(2, 2).is_err());
    }

    fn random_case(k: usize, seed: u64) -> (ProbabilityVector, usize, WeightMatrix) {
        let mut rng = Rng::new(seed);
        let logits: Vec<f64> = (0..k).map(|_| rng.gaussian(0.0, 2.0)).collect();
        let mut w = DenseMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                w.set(i, j, if i == j { 0.05 + 0.95 * rng.next_f64() } else { rng.next_f64() });
            }
        }
        let q = softmax(&LogitVector::new(logits).unwrap());
        (q, rng.below(k), WeightMatrix::new(w).unwrap())
    }

    proptest! {
        #[test]
        fn zero_lambda_is_scaled_cross_entropy(k in 2usize..10, seed in any::<u64>()) {
            let (q, truth, w) = random_case(k, seed);
            let c_ii = w.get(truth, truth);
            let label = OneHotLabel::new(truth, k).unwrap();
            let cfg = LossConfig::new(0.0, w).unwrap();
            prop_assert_eq!(
                improved_ce(&q, &label, &cfg).unwrap(),
                c_ii * standard_ce(&q, &label).unwrap()
            );
        }

        #[test]
        fn loss_is_nonnegative(k in 2usize..10, seed in any::<u64>(), lambda in 0.0f64..10.0) {
            let (q, truth, w) = random_case(k, seed);
            let cfg = LossConfig::new(lambda, w).unwrap();
            let v = improved_ce(&q, &OneHotLabel::new(truth, k).unwrap(), &cfg).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert!(v > 0.0 || q.values()[truth] == 1.0);
        }

        #[test]
        fn shifting_mass_onto_a_confusing_class_costs(
            k in 3usize..8,
            seed in any::<u64>(),
            delta in 0.01f64..0.5,
        ) {
            let (q, truth, w) = random_case(k, seed);
            // Pick a confusing class j and a donor d, both ≠ truth; q_truth fixed.
            let j = (truth + 1) % k;
            let donor = (truth + 2) % k;
            let move_mass = q.values()[donor] * delta;
            prop_assume!(move_mass > 1e-9 && w.get(truth, j) > 0.0);
            let mut moved = q.values().to_vec();
            moved[donor] -= move_mass;
            moved[j] += move_mass;
            // The donor is a class the truth is not confused with.
            let mut weights = w.as_matrix().clone();
            weights.set(truth, donor, 0.0);
            let cfg = LossConfig::new(1.0, WeightMatrix::new(weights).unwrap()).unwrap();
            let label = OneHotLabel::new(truth, k).unwrap();
            let before = improved_ce(&q, &label, &cfg).unwrap();
            let after = improved_ce(&ProbabilityVector::new(moved).unwrap(), &label, &cfg).unwrap();
            prop_assert!(after > before, "{} !> {}", after, before);
        }
    }
}
