//! Pretraining objective: BEV reconstruction loss, depth BCE, and the
//! alpha-weighted combination, all computed over every token.

use crate::camera::DepthTarget;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, VarId};

/// Default weight balancing the depth term against reconstruction.
pub const ALPHA_DEFAULT: f64 = 0.01;

/// Probability clamp bounds for the BCE terms.
pub const PROB_CLAMP: f64 = 1e-7;

/// Whether the depth BCE acts on softmax probabilities (default) or
/// independent per-bin sigmoids of the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthLossMode {
    SoftmaxBce,
    SigmoidBce,
}

impl std::str::FromStr for DepthLossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax_bce" => Ok(DepthLossMode::SoftmaxBce),
            "sigmoid_bce" => Ok(DepthLossMode::SigmoidBce),
            other => Err(Error::Config(format!("unknown depth loss mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for DepthLossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DepthLossMode::SoftmaxBce => "softmax_bce",
            DepthLossMode::SigmoidBce => "sigmoid_bce",
        })
    }
}

/// Mean squared error over the whole grid; no masking of loss locations.
pub fn rec_loss(tape: &mut Tape, student: VarId, teacher: VarId) -> Result<VarId> {
    if tape.shape(student) != tape.shape(teacher) {
        return Err(Error::ShapeMismatch {
            op: "rec_loss",
            lhs: tape.shape(student).to_vec(),
            rhs: tape.shape(teacher).to_vec(),
        });
    }
    let diff = tape.sub(student, teacher)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// Binary cross entropy against the one-hot depth target: mean over bins,
/// then over valid pixels. Invalid pixels contribute nothing. Returns the
/// scalar loss plus a flag set when no pixel was valid (loss is 0 then).
pub fn depth_loss(
    tape: &mut Tape,
    depth_probs: VarId,
    depth_logits: VarId,
    target: &DepthTarget,
    mode: DepthLossMode,
) -> Result<(VarId, bool)> {
    let shape = tape.shape(depth_probs).to_vec();
    if shape != tape.shape(depth_logits) || shape != target.one_hot.shape() {
        return Err(Error::ShapeMismatch {
            op: "depth_loss",
            lhs: shape,
            rhs: target.one_hot.shape().to_vec(),
        });
    }
    if target.valid_count == 0 {
        return Ok((tape.constant(Tensor::scalar(0.0)), true));
    }
    let bins = shape[2];

    let p = match mode {
        DepthLossMode::SoftmaxBce => depth_probs,
        DepthLossMode::SigmoidBce => tape.sigmoid(depth_logits)?,
    };
    let p = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;

    let t = tape.constant(target.one_hot.clone());
    let one_minus_t = tape.affine(t, -1.0, 1.0)?;
    let ln_p = tape.ln(p)?;
    let one_minus_p = tape.affine(p, -1.0, 1.0)?;
    let ln_1mp = tape.ln(one_minus_p)?;

    let pos = tape.mul(t, ln_p)?;
    let neg = tape.mul(one_minus_t, ln_1mp)?;
    let sum = tape.add(pos, neg)?;
    let bce = tape.affine(sum, -1.0, 0.0)?;

    // Mean over bins, then masked mean over valid pixels.
    let per_pixel = tape.sum_axis(bce, 2)?;
    let per_pixel = tape.affine(per_pixel, 1.0 / bins as f64, 0.0)?;
    let mask: Vec<f64> = target.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let mask = tape.constant(Tensor::new(vec![shape[0], shape[1]], mask)?);
    let masked = tape.mul(per_pixel, mask)?;
    let total = tape.sum(masked)?;
    let loss = tape.affine(total, 1.0 / target.valid_count as f64, 0.0)?;
    Ok((loss, false))
}

/// The combined objective and its recorded values.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub rec: f64,
    pub depth: f64,
    pub total: f64,
    pub alpha: f64,
    /// Set when depth_loss saw zero valid pixels.
    pub no_valid_depth: bool,
    pub rec_id: VarId,
    pub depth_id: VarId,
    pub total_id: VarId,
}

/// total = rec + alpha * depth.
pub fn total_loss(
    tape: &mut Tape,
    rec: VarId,
    depth: VarId,
    alpha: f64,
    no_valid_depth: bool,
) -> Result<LossTerms> {
    if alpha < 0.0 {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    let weighted = tape.affine(depth, alpha, 0.0)?;
    let total = tape.add(rec, weighted)?;
    Ok(LossTerms {
        rec: tape.value(rec).item(),
        depth: tape.value(depth).item(),
        total: tape.value(total).item(),
        alpha,
        no_valid_depth,
        rec_id: rec,
        depth_id: depth,
        total_id: total,
    })
}
