//! Lift-Splat-Shoot projection: per-pixel outer product of the depth
//! distribution and semantic features, scattered into the BEV grid.
//!
//! The differentiable path is a composition of tape primitives (gather,
//! matmul, mul, scatter-add); `reference_lift_splat` is an independent
//! quadruple-loop used by verification.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::camera::FrustumPoints;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, VarId};

/// Ground-plane extent and resolution of the BEV grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl BevGridSpec {
    pub fn square(extent: f64, cells: usize) -> Self {
        BevGridSpec {
            x_min: -extent,
            x_max: extent,
            y_min: -extent,
            y_max: extent,
            nx: cells,
            ny: cells,
        }
    }

    pub fn cell_x(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    pub fn cell_y(&self) -> f64 {
        (self.y_max - self.y_min) / self.ny as f64
    }

    pub fn num_cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Half-open cells [edge, edge+cell); points on the max boundary fall
    /// outside. The z coordinate is ignored (full pillar collapse).
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let fx = ((x - self.x_min) / self.cell_x()).floor();
        let fy = ((y - self.y_min) / self.cell_y()).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.nx as f64 || fy >= self.ny as f64 {
            return None;
        }
        Some(fx as usize * self.ny + fy as usize)
    }
}

/// Precomputed routing of frustum points into BEV cells. Constant for a given
/// rig, bin spec, and grid; shared across training steps.
#[derive(Debug, Clone)]
pub struct SplatIndex {
    pub num_views: usize,
    pub num_bins: usize,
    pub rows: usize,
    pub cols: usize,
    pub num_cells: usize,
    /// Row into the flattened (N*B*h*w) depth vector, ascending.
    pub point_index: Arc<Vec<usize>>,
    /// Row into the flattened (N*h*w) feature matrix, aligned with point_index.
    pub feat_index: Arc<Vec<usize>>,
    /// Destination cell (ix * ny + iy), aligned with point_index.
    pub cell_index: Arc<Vec<usize>>,
}

pub fn build_splat_index(frustum: &FrustumPoints, spec: &BevGridSpec) -> SplatIndex {
    let (n, b, h, w) = (
        frustum.num_views,
        frustum.num_bins,
        frustum.rows,
        frustum.cols,
    );
    let mut point_index = Vec::new();
    let mut feat_index = Vec::new();
    let mut cell_index = Vec::new();
    let mut t = 0;
    for view in 0..n {
        for bin in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let p = frustum.at(view, bin, i, j);
                    if let Some(cell) = spec.cell_of(p[0], p[1]) {
                        point_index.push(t);
                        feat_index.push((view * h + i) * w + j);
                        cell_index.push(cell);
                    }
                    t += 1;
                }
            }
        }
    }
    SplatIndex {
        num_views: n,
        num_bins: b,
        rows: h,
        cols: w,
        num_cells: spec.num_cells(),
        point_index: Arc::new(point_index),
        feat_index: Arc::new(feat_index),
        cell_index: Arc::new(cell_index),
    }
}

/// Splats depth-weighted semantic features into the BEV grid.
///
/// `fsem` is (N, h*w, C), `depth` is (N, h*w, B) with bins summing to one per
/// pixel; the result is (C, nx*... ) reshaped to (C, nx, ny). Contributions
/// landing outside the extent were already dropped when the index was built;
/// in-extent contributions sum-pool in ascending point order.
pub fn lift_splat(
    tape: &mut Tape,
    fsem: VarId,
    depth: VarId,
    index: &SplatIndex,
    nx: usize,
    ny: usize,
) -> Result<VarId> {
    let fs_shape = tape.shape(fsem).to_vec();
    let d_shape = tape.shape(depth).to_vec();
    let (n, hw) = (index.num_views, index.rows * index.cols);
    let ok = fs_shape.len() == 3
        && d_shape.len() == 3
        && fs_shape[0] == n
        && d_shape[0] == n
        && fs_shape[1] == hw
        && d_shape[1] == hw
        && d_shape[2] == index.num_bins
        && nx * ny == index.num_cells;
    if !ok {
        return Err(Error::ShapeMismatch {
            op: "lift_splat",
            lhs: fs_shape,
            rhs: d_shape,
        });
    }
    let channels = fs_shape[2];

    // (N, hw, B) -> (N*B*hw, 1), matching the frustum's point ordering.
    let d_nbhw = tape.transpose(depth, 1, 2)?;
    let d_col = tape.reshape(d_nbhw, &[n * index.num_bins * hw, 1])?;
    let d_kept = tape.gather(d_col, index.point_index.clone())?;

    let fs_rows = tape.reshape(fsem, &[n * hw, channels])?;
    let f_kept = tape.gather(fs_rows, index.feat_index.clone())?;

    // Broadcast each kept depth across channels via a ones row.
    let ones = tape.constant(Tensor::ones(&[1, channels]));
    let weights = tape.matmul(d_kept, ones)?;
    let rows = tape.mul(f_kept, weights)?;

    let grid_rows = tape.scatter_add(index.num_cells, index.cell_index.clone(), rows)?;
    let grid_cn = tape.transpose(grid_rows, 0, 1)?;
    tape.reshape(grid_cn, &[channels, nx, ny])
}

/// Independent quadruple-loop reference in the external (N, C, h, w) /
/// (N, B, h, w) layout; used by verification and tests, never by the model.
pub fn reference_lift_splat(
    fsem: &Tensor,
    depth: &Tensor,
    frustum: &FrustumPoints,
    spec: &BevGridSpec,
) -> Result<Tensor> {
    let fs = fsem.shape();
    let ds = depth.shape();
    if fs.len() != 4 || ds.len() != 4 || fs[0] != ds[0] || fs[2..] != ds[2..] {
        return Err(Error::ShapeMismatch {
            op: "reference_lift_splat",
            lhs: fs.to_vec(),
            rhs: ds.to_vec(),
        });
    }
    let (n, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
    let b = ds[1];
    let mut grid = vec![0.0; c * spec.num_cells()];
    for view in 0..n {
        for bin in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let p = frustum.at(view, bin, i, j);
                    let Some(cell) = spec.cell_of(p[0], p[1]) else {
                        continue;
                    };
                    let d = depth.at(&[view, bin, i, j]);
                    for ch in 0..c {
                        grid[ch * spec.num_cells() + cell] += d * fsem.at(&[view, ch, i, j]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, spec.nx, spec.ny], grid)
}

/// Test hook used by verification's negative control: drops the first
/// `drop_points` in-extent contributions so conservation must fail.
pub fn corrupt_splat_index(index: &SplatIndex, drop_points: usize) -> SplatIndex {
    let skip = drop_points.min(index.point_index.len());
    SplatIndex {
        point_index: Arc::new(index.point_index[skip..].to_vec()),
        feat_index: Arc::new(index.feat_index[skip..].to_vec()),
        cell_index: Arc::new(index.cell_index[skip..].to_vec()),
        ..index.clone()
    }
}
