//! Training objectives: binary cross-entropy, its score-regression
//! regularized variant, and the sigmoid-smoothed detection cost, each
//! returning analytic gradients with respect to the scores (and, for the
//! soft cost, the two decision thresholds).

use crate::error::{Error, Result};

/// Numerically stable `log(1 + exp(x))`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let z = x.exp();
        z / (1.0 + z)
    }
}

fn sigmoid_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// Configuration of the smoothed detection-cost objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftCostConfig {
    /// Sigmoid sharpness of the indicator approximation.
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Weight of the score-regression regularizer.
    pub lambda_reg: f64,
}

impl Default for SoftCostConfig {
    fn default() -> Self {
        SoftCostConfig {
            alpha: 20.0,
            beta1: 99.0,
            beta2: 199.0,
            lambda_reg: 0.1,
        }
    }
}

impl SoftCostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.beta1 <= 0.0 || self.beta2 <= 0.0 || self.lambda_reg < 0.0 {
            return Err(Error::Domain(
                "soft cost config requires alpha, beta > 0 and lambda >= 0".into(),
            ));
        }
        Ok(())
    }
}

fn check_lengths(scores: &[f64], targets: &[bool]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Domain("loss over an empty batch".into()));
    }
    if scores.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} scores but {} targets",
            scores.len(),
            targets.len()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy of `sigmoid(s)` against 0/1 targets, with
/// its per-score gradient `(sigmoid(s) - t)/N`. Stable for |s| up to
/// several hundred.
pub fn bce_loss(scores: &[f64], targets: &[bool]) -> Result<(f64, Vec<f64>)> {
    check_lengths(scores, targets)?;
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&s, &t) in scores.iter().zip(targets) {
        // -log sigmoid(s) = softplus(-s); -log(1 - sigmoid(s)) = softplus(s)
        loss += if t { softplus(-s) } else { softplus(s) };
        let target = if t { 1.0 } else { 0.0 };
        grad.push((sigmoid(s) - target) / n);
    }
    Ok((loss / n, grad))
}

/// BCE plus `(lambda/N) sum (s_i - l_i)^2`, regressing toward reference
/// scores from the generative baseline.
pub fn bce_regularized(
    scores: &[f64],
    targets: &[bool],
    plda_scores: &[f64],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    if plda_scores.len() != scores.len() {
        return Err(Error::Dimension(format!(
            "{} scores but {} regression targets",
            scores.len(),
            plda_scores.len()
        )));
    }
    let (mut loss, mut grad) = bce_loss(scores, targets)?;
    let n = scores.len() as f64;
    for ((&s, &l), g) in scores.iter().zip(plda_scores).zip(grad.iter_mut()) {
        loss += lambda / n * (s - l) * (s - l);
        *g += 2.0 * lambda * (s - l) / n;
    }
    Ok((loss, grad))
}

fn class_counts(targets: &[bool]) -> (f64, f64) {
    let n_t = targets.iter().filter(|&&t| t).count() as f64;
    (n_t, targets.len() as f64 - n_t)
}

/// Smoothed miss rate: mean over targets of `1 - sigmoid(alpha (s - theta))`.
pub fn soft_pmiss(scores: &[f64], targets: &[bool], theta: f64, alpha: f64) -> Result<f64> {
    check_lengths(scores, targets)?;
    let (n_t, _) = class_counts(targets);
    if n_t == 0.0 {
        return Err(Error::Domain("soft_pmiss needs at least one target trial".into()));
    }
    let sum: f64 = scores
        .iter()
        .zip(targets)
        .filter(|(_, &t)| t)
        .map(|(&s, _)| 1.0 - sigmoid(alpha * (s - theta)))
        .sum();
    Ok(sum / n_t)
}

/// Smoothed false-alarm rate: mean over non-targets of `sigmoid(alpha (s - theta))`.
pub fn soft_pfa(scores: &[f64], targets: &[bool], theta: f64, alpha: f64) -> Result<f64> {
    check_lengths(scores, targets)?;
    let (_, n_nt) = class_counts(targets);
    if n_nt == 0.0 {
        return Err(Error::Domain("soft_pfa needs at least one non-target trial".into()));
    }
    let sum: f64 = scores
        .iter()
        .zip(targets)
        .filter(|(_, &t)| !t)
        .map(|(&s, _)| sigmoid(alpha * (s - theta)))
        .sum();
    Ok(sum / n_nt)
}

/// Smoothed normalized detection cost `P_miss + beta * P_fa` at one
/// threshold.
pub fn soft_cnorm(scores: &[f64], targets: &[bool], beta: f64, theta: f64, alpha: f64) -> Result<f64> {
    Ok(soft_pmiss(scores, targets, theta, alpha)? + beta * soft_pfa(scores, targets, theta, alpha)?)
}

/// The smoothed primary cost: the average of the soft normalized costs
/// at (beta1, theta1) and (beta2, theta2), with analytic gradients for
/// every score and both thresholds.
pub fn soft_cprimary(
    scores: &[f64],
    targets: &[bool],
    theta: [f64; 2],
    cfg: &SoftCostConfig,
) -> Result<(f64, Vec<f64>, [f64; 2])> {
    check_lengths(scores, targets)?;
    cfg.validate()?;
    let (n_t, n_nt) = class_counts(targets);
    if n_t == 0.0 || n_nt == 0.0 {
        return Err(Error::Domain(
            "soft_cprimary needs both target and non-target trials in the batch".into(),
        ));
    }
    let alpha = cfg.alpha;
    let betas = [cfg.beta1, cfg.beta2];
    let mut loss = 0.0;
    let mut dscore = vec![0.0; scores.len()];
    let mut dtheta = [0.0; 2];
    for k in 0..2 {
        let beta = betas[k];
        let th = theta[k];
        let mut pmiss = 0.0;
        let mut pfa = 0.0;
        for (i, (&s, &t)) in scores.iter().zip(targets).enumerate() {
            let z = alpha * (s - th);
            if t {
                pmiss += 1.0 - sigmoid(z);
                let d = -alpha * sigmoid_derivative(z) / n_t;
                dscore[i] += 0.5 * d;
                dtheta[k] -= 0.5 * d;
            } else {
                pfa += sigmoid(z);
                let d = beta * alpha * sigmoid_derivative(z) / n_nt;
                dscore[i] += 0.5 * d;
                dtheta[k] -= 0.5 * d;
            }
        }
        loss += 0.5 * (pmiss / n_t + beta * pfa / n_nt);
    }
    Ok((loss, dscore, dtheta))
}

/// Weighted sum `soft_cprimary + weight * bce`, the mixed objective.
pub fn soft_plus_bce(
    scores: &[f64],
    targets: &[bool],
    theta: [f64; 2],
    cfg: &SoftCostConfig,
    bce_weight: f64,
) -> Result<(f64, Vec<f64>, [f64; 2])> {
    let (soft, mut dscore, dtheta) = soft_cprimary(scores, targets, theta, cfg)?;
    let (bce, bce_grad) = bce_loss(scores, targets)?;
    for (g, b) in dscore.iter_mut().zip(&bce_grad) {
        *g += bce_weight * b;
    }
    Ok((soft + bce_weight * bce, dscore, dtheta))
}
