//! Loss functions: MSE, MAE, binary cross-entropy, focal variants for both
//! classification and regression, and the soft orthogonality penalty.
//!
//! All losses are recorded on a [`Tape`] and return a scalar [`Value`], so
//! gradients flow to whatever produced the predictions.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Value};

/// Clamp applied to probabilities before any logarithm.
pub const BCE_EPS: f64 = 1e-7;

/// Focal modulation parameters. `gamma = 0` reduces the focal losses exactly
/// to their base loss; `alpha` is the class balance weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalConfig {
    pub gamma: f64,
    pub alpha: f64,
}

impl FocalConfig {
    pub fn new(gamma: f64, alpha: f64) -> Result<Self> {
        if gamma < 0.0 || !gamma.is_finite() {
            return Err(Error::Parameter(format!("focal gamma must be >= 0, got {gamma}")));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Parameter(format!("focal alpha must be in (0,1], got {alpha}")));
        }
        Ok(FocalConfig { gamma, alpha })
    }
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig { gamma: 0.0, alpha: 1.0 }
    }
}

fn check_same_shape(tape: &Tape, op: &'static str, a: Value, b: Value) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dimension(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

/// Mean of squared differences.
pub fn mse_loss(tape: &mut Tape, pred: Value, target: Value) -> Result<Value> {
    check_same_shape(tape, "mse_loss", pred, target)?;
    let e = tape.sub(pred, target)?;
    let sq = tape.mul(e, e)?;
    tape.mean(sq, None)
}

/// Mean absolute difference; subgradient 0 at exact ties.
pub fn mae_loss(tape: &mut Tape, pred: Value, target: Value) -> Result<Value> {
    check_same_shape(tape, "mae_loss", pred, target)?;
    let e = tape.sub(pred, target)?;
    let a = tape.abs(e);
    tape.mean(a, None)
}

fn check_binary_targets(tape: &Tape, y: Value) -> Result<()> {
    if let Some(&bad) = tape.data(y).iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain(format!("binary targets must be 0 or 1, got {bad}")));
    }
    Ok(())
}

/// Binary cross-entropy over probabilities, internally clamped to
/// `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce_loss(tape: &mut Tape, p: Value, y: Value) -> Result<Value> {
    check_same_shape(tape, "bce_loss", p, y)?;
    check_binary_targets(tape, y)?;
    let p = tape.clamp(p, BCE_EPS, 1.0 - BCE_EPS)?;
    let ones = tape.constant(Tensor::new(tape.shape(p).to_vec(), vec![1.0; tape.data(p).len()])?);
    let log_p = tape.log(p)?;
    let one_minus_p = tape.sub(ones, p)?;
    let log_1p = tape.log(one_minus_p)?;
    let one_minus_y = tape.sub(ones, y)?;
    let pos = tape.mul(y, log_p)?;
    let neg_term = tape.mul(one_minus_y, log_1p)?;
    let s = tape.add(pos, neg_term)?;
    let m = tape.mean(s, None)?;
    Ok(tape.neg(m))
}

/// Focal binary cross-entropy: mean of `−α·(1−p_t)^γ·log(p_t)` with
/// `p_t = p` where `y = 1` and `1 − p` where `y = 0`.
pub fn focal_bce(tape: &mut Tape, p: Value, y: Value, cfg: FocalConfig) -> Result<Value> {
    check_same_shape(tape, "focal_bce", p, y)?;
    check_binary_targets(tape, y)?;
    let p = tape.clamp(p, BCE_EPS, 1.0 - BCE_EPS)?;
    let ones = tape.constant(Tensor::new(tape.shape(p).to_vec(), vec![1.0; tape.data(p).len()])?);
    let one_minus_p = tape.sub(ones, p)?;
    let one_minus_y = tape.sub(ones, y)?;
    let pt_pos = tape.mul(y, p)?;
    let pt_neg = tape.mul(one_minus_y, one_minus_p)?;
    let p_t = tape.add(pt_pos, pt_neg)?;
    let one_minus_pt = tape.sub(ones, p_t)?;
    let focal_w = tape.powf(one_minus_pt, cfg.gamma)?;
    let log_pt = tape.log(p_t)?;
    let weighted = tape.mul(focal_w, log_pt)?;
    let m = tape.mean(weighted, None)?;
    let m = tape.neg(m);
    Ok(tape.scale(m, cfg.alpha))
}

/// Focal-modulated squared error: mean of `w·e²` with
/// `w = (1 − exp(−e²))^γ`, so small residuals are down-weighted and γ = 0
/// recovers plain MSE exactly.
pub fn focal_mse(tape: &mut Tape, pred: Value, target: Value, cfg: FocalConfig) -> Result<Value> {
    check_same_shape(tape, "focal_mse", pred, target)?;
    let e = tape.sub(pred, target)?;
    let e2 = tape.mul(e, e)?;
    let neg_e2 = tape.neg(e2);
    let exp_neg = tape.exp(neg_e2);
    let ones = tape.constant(Tensor::new(tape.shape(e2).to_vec(), vec![1.0; tape.data(e2).len()])?);
    let base = tape.sub(ones, exp_neg)?;
    let w = tape.powf(base, cfg.gamma)?;
    let weighted = tape.mul(w, e2)?;
    tape.mean(weighted, None)
}

/// Soft orthogonality penalty `λ·‖W·Wᵀ − I‖²_F` (rows-orthonormal
/// convention) for a `[out × in]` weight matrix.
pub fn soft_orthogonality_penalty(tape: &mut Tape, w: Value, lambda: f64) -> Result<Value> {
    let out_dim = tape.shape(w)[0];
    let wt = tape.transpose2(w)?;
    let gram = tape.matmul(w, wt)?;
    let mut eye = vec![0.0; out_dim * out_dim];
    for i in 0..out_dim {
        eye[i * out_dim + i] = 1.0;
    }
    let identity = tape.constant(Tensor::new(vec![out_dim, out_dim], eye)?);
    let diff = tape.sub(gram, identity)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq, None)?;
    Ok(tape.scale(s, lambda))
}
