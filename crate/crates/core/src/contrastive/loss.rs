//! In-batch softmax contrastive losses over square score matrices.
//!
//! Row `i` is an image, column `t` a text; the diagonal holds the positive
//! pairs. The image-to-text term takes a softmax over each row, the
//! text-to-image term over each column, and the total is their mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::{ScoringMode, SimilarityMatrix};

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;

/// Softmax temperature; strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self(tau))
        } else {
            Err(Error::NonPositiveTau(tau))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Applies a gradient step and clamps into `[TAU_MIN, TAU_MAX]`.
    pub fn step(self, grad: f64, lr: f64) -> Self {
        Self((self.0 - lr * grad).clamp(TAU_MIN, TAU_MAX))
    }
}

/// Loss values for one square score matrix, with analytic gradients.
///
/// `grad_scores` is row-major with the same shape as the scores, and holds
/// `d loss / d s` for the total `loss`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub batch_size: usize,
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub loss: f64,
    pub grad_scores: Vec<f64>,
    pub grad_tau: f64,
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_contrastive(scores: &SimilarityMatrix, tau: Temperature) -> Result<LossReport> {
    if !scores.is_square() {
        return Err(Error::NonSquare {
            rows: scores.queries(),
            cols: scores.candidates(),
        });
    }
    let bs = scores.queries();
    if bs == 0 {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let tau = tau.value();
    let s = scores.scores();
    let logit = |r: usize, c: usize| s[r * bs + c] / tau;

    let row_lse: Vec<f64> = (0..bs).map(|r| logsumexp((0..bs).map(move |c| logit(r, c)))).collect();
    let col_lse: Vec<f64> = (0..bs).map(|c| logsumexp((0..bs).map(move |r| logit(r, c)))).collect();

    let n = bs as f64;
    let l_i2t = (0..bs).map(|i| row_lse[i] - logit(i, i)).sum::<f64>() / n;
    let l_t2i = (0..bs).map(|t| col_lse[t] - logit(t, t)).sum::<f64>() / n;
    let loss = 0.5 * (l_i2t + l_t2i);

    // d/ds of each term is (softmax - onehot) / (bs * tau); halved for the mean.
    let scale = 0.5 / (n * tau);
    let mut grad_scores = vec![0.0; bs * bs];
    let mut grad_tau = 0.0;
    for r in 0..bs {
        for c in 0..bs {
            let z = logit(r, c);
            let diag = if r == c { 2.0 } else { 0.0 };
            let g = scale * ((z - row_lse[r]).exp() + (z - col_lse[c]).exp() - diag);
            grad_scores[r * bs + c] = g;
            grad_tau -= g * s[r * bs + c] / tau;
        }
    }
    Ok(LossReport {
        batch_size: bs,
        l_i2t,
        l_t2i,
        loss,
        grad_scores,
        grad_tau,
    })
}

/// Image-text contrastive loss over global similarities.
pub fn itc_loss(scores: &SimilarityMatrix, tau: Temperature) -> Result<LossReport> {
    softmax_contrastive(scores, tau)
}

/// Bag-wise contrastive loss: the same softmax form over MaxSim scores.
pub fn bwc_loss(bag_scores: &SimilarityMatrix, tau: Temperature) -> Result<LossReport> {
    if bag_scores.mode() == ScoringMode::Global {
        return Err(Error::UnsupportedMode(
            "bag-wise loss needs a late-interaction score matrix".into(),
        ));
    }
    softmax_contrastive(bag_scores, tau)
}

/// Worst relative disagreement between analytic and central-difference
/// gradients (all score entries plus temperature). Relative error is
/// `|a - n| / max(|a|, |n|, floor)` where `floor` covers the round-off of
/// a central difference at this `epsilon`.
pub fn grad_check<F>(loss_fn: F, scores: &SimilarityMatrix, tau: Temperature, epsilon: f64) -> Result<f64>
where
    F: Fn(&SimilarityMatrix, Temperature) -> Result<LossReport>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidConfig(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let base = loss_fn(scores, tau)?;
    let floor = f64::EPSILON * base.loss.abs().max(1.0) / epsilon * 1e4;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(floor);

    let with_scores = |values: Vec<f64>| {
        SimilarityMatrix::new(scores.queries(), scores.candidates(), values, scores.mode())
    };
    let mut worst: f64 = 0.0;
    for idx in 0..scores.scores().len() {
        let mut plus = scores.scores().to_vec();
        let mut minus = plus.clone();
        plus[idx] += epsilon;
        minus[idx] -= epsilon;
        let fp = loss_fn(&with_scores(plus)?, tau)?.loss;
        let fm = loss_fn(&with_scores(minus)?, tau)?.loss;
        worst = worst.max(rel(base.grad_scores[idx], (fp - fm) / (2.0 * epsilon)));
    }
    let fp = loss_fn(scores, Temperature::new(tau.value() + epsilon)?)?.loss;
    let fm = loss_fn(scores, Temperature::new(tau.value() - epsilon)?)?.loss;
    worst = worst.max(rel(base.grad_tau, (fp - fm) / (2.0 * epsilon)));
    Ok(worst)
}
