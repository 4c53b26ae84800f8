//! Patchify multi-view images, sample the random mask, and fill masked slots
//! with the shared mask token before decoding.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::{mix, Rng};
use crate::tensor::{Tape, Tensor, VarId};

/// Per-view boolean mask over the token grid; exactly round(ratio * h * w)
/// positions are masked in every view.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPattern {
    pub num_views: usize,
    pub rows: usize,
    pub cols: usize,
    pub ratio: f64,
    /// Flattened (N * h * w), true = masked.
    masked: Vec<bool>,
}

impl MaskPattern {
    /// Pattern with nothing masked; used when encoding full token sets
    /// (finetuning, reconstruction dumps).
    pub fn none(rows: usize, cols: usize, num_views: usize) -> Self {
        MaskPattern {
            num_views,
            rows,
            cols,
            ratio: 0.0,
            masked: vec![false; num_views * rows * cols],
        }
    }

    pub fn is_masked(&self, view: usize, token: usize) -> bool {
        self.masked[view * self.rows * self.cols + token]
    }

    pub fn masked_count_per_view(&self) -> usize {
        (self.ratio * (self.rows * self.cols) as f64).round() as usize
    }

    pub fn visible_count_per_view(&self) -> usize {
        self.rows * self.cols - self.masked_count_per_view()
    }

    /// Strictly increasing visible token positions for one view.
    pub fn visible_positions(&self, view: usize) -> Vec<usize> {
        let hw = self.rows * self.cols;
        (0..hw).filter(|&t| !self.is_masked(view, t)).collect()
    }

    pub fn masked_positions(&self, view: usize) -> Vec<usize> {
        let hw = self.rows * self.cols;
        (0..hw).filter(|&t| self.is_masked(view, t)).collect()
    }
}

/// Uniform sample without replacement of exactly round(ratio*h*w) positions
/// per view, independently across views; reproducible by seed.
pub fn sample_mask(
    seed: u64,
    rows: usize,
    cols: usize,
    num_views: usize,
    ratio: f64,
) -> Result<MaskPattern> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Mask(format!("ratio must be in (0, 1), got {ratio}")));
    }
    let hw = rows * cols;
    let k = (ratio * hw as f64).round() as usize;
    let mut masked = vec![false; num_views * hw];
    let mut rng = Rng::new(mix(seed, 0xa5c0de));
    for view in 0..num_views {
        for pos in rng.sample_without_replacement(k, hw) {
            masked[view * hw + pos] = true;
        }
    }
    Ok(MaskPattern {
        num_views,
        rows,
        cols,
        ratio,
        masked,
    })
}

/// Splits (N, 3, H, W) images into row-major per-token patch vectors of
/// length 3*patch*patch; lossless (see `unpatchify`).
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::BadShape {
            op: "patchify",
            shape: shape.to_vec(),
            reason: "want (views, 3, H, W)".into(),
        });
    }
    let (n, hh, ww) = (shape[0], shape[2], shape[3]);
    if hh % patch != 0 || ww % patch != 0 {
        return Err(Error::BadShape {
            op: "patchify",
            shape: shape.to_vec(),
            reason: format!("H and W must be divisible by patch {patch}"),
        });
    }
    let (h, w) = (hh / patch, ww / patch);
    let plen = 3 * patch * patch;
    let src = images.data();
    let mut out = vec![0.0; n * h * w * plen];
    for view in 0..n {
        for i in 0..h {
            for j in 0..w {
                let token = (view * h + i) * w + j;
                for c in 0..3 {
                    for pi in 0..patch {
                        for pj in 0..patch {
                            let sv = src[((view * 3 + c) * hh + i * patch + pi) * ww
                                + j * patch
                                + pj];
                            out[token * plen + (c * patch + pi) * patch + pj] = sv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, h * w, plen], out)
}

/// Inverse of `patchify`.
pub fn unpatchify(patches: &Tensor, patch: usize, rows: usize, cols: usize) -> Result<Tensor> {
    let shape = patches.shape();
    let plen = 3 * patch * patch;
    if shape.len() != 3 || shape[1] != rows * cols || shape[2] != plen {
        return Err(Error::BadShape {
            op: "unpatchify",
            shape: shape.to_vec(),
            reason: format!("want (views, {}, {plen})", rows * cols),
        });
    }
    let n = shape[0];
    let (hh, ww) = (rows * patch, cols * patch);
    let src = patches.data();
    let mut out = vec![0.0; n * 3 * hh * ww];
    for view in 0..n {
        for i in 0..rows {
            for j in 0..cols {
                let token = (view * rows + i) * cols + j;
                for c in 0..3 {
                    for pi in 0..patch {
                        for pj in 0..patch {
                            out[((view * 3 + c) * hh + i * patch + pi) * ww + j * patch + pj] =
                                src[token * plen + (c * patch + pi) * patch + pj];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, 3, hh, ww], out)
}

/// Encoder output over visible tokens plus where they belong.
#[derive(Debug, Clone)]
pub struct TokenSet {
    /// (N, L_vis, C) on the tape.
    pub tokens: VarId,
    /// Per view, strictly increasing visible positions.
    pub positions: Vec<Vec<usize>>,
}

/// Restores the full (N, h*w, C) token grid: visible slots carry encoder
/// outputs in their original spatial order, masked slots all carry the single
/// shared gradient-carrying mask token.
pub fn fill_mask(
    tape: &mut Tape,
    encoded: &TokenSet,
    mask_token: VarId,
    pattern: &MaskPattern,
) -> Result<VarId> {
    let shape = tape.shape(encoded.tokens).to_vec();
    let (n, hw) = (pattern.num_views, pattern.rows * pattern.cols);
    let l_vis = pattern.visible_count_per_view();
    if shape.len() != 3 || shape[0] != n || shape[1] != l_vis {
        return Err(Error::ShapeMismatch {
            op: "fill_mask",
            lhs: shape,
            rhs: vec![n, l_vis],
        });
    }
    if encoded.positions.len() != n {
        return Err(Error::Mask(format!(
            "positions cover {} views, pattern has {n}",
            encoded.positions.len()
        )));
    }
    let dim = shape[2];
    let mt_shape = tape.shape(mask_token).to_vec();
    if mt_shape != [1, dim] {
        return Err(Error::ShapeMismatch {
            op: "fill_mask",
            lhs: mt_shape,
            rhs: vec![1, dim],
        });
    }

    // Consistency between the provided positions and the pattern.
    let mut visible_rows = Vec::with_capacity(n * l_vis);
    let mut masked_rows = Vec::with_capacity(n * (hw - l_vis));
    for (view, pos) in encoded.positions.iter().enumerate() {
        if *pos != pattern.visible_positions(view) {
            return Err(Error::Mask(format!(
                "view {view}: token positions do not match the mask pattern"
            )));
        }
        visible_rows.extend(pos.iter().map(|p| view * hw + p));
        masked_rows.extend(pattern.masked_positions(view).iter().map(|p| view * hw + p));
    }

    let visible_flat = tape.reshape(encoded.tokens, &[n * l_vis, dim])?;
    // The shared token is replicated by a ones column so its gradient
    // accumulates from every masked location.
    let ones = tape.constant(Tensor::ones(&[masked_rows.len(), 1]));
    let mask_rep = tape.matmul(ones, mask_token)?;

    let values = tape.concat(&[visible_flat, mask_rep], 0)?;
    let mut indices = visible_rows;
    indices.extend(masked_rows);
    let full = tape.scatter_add(n * hw, Arc::new(indices), values)?;
    tape.reshape(full, &[n, hw, dim])
}
