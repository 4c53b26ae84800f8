//! Pinhole camera rig, depth-bin discretization, and frustum-point generation
//! in the ego frame. Everything here is pure and thread-safe.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::Camera(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }
}

/// Camera-to-ego rigid transform.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraExtrinsics {
    /// Row-major 3x3 rotation taking camera-frame vectors into the ego frame.
    pub rotation: [f64; 9],
    /// Camera origin in the ego frame, meters.
    pub translation: [f64; 3],
}

impl CameraExtrinsics {
    pub fn new(rotation: [f64; 9], translation: [f64; 3]) -> Result<Self> {
        // R^T R = I and det = +1, both within 1e-9.
        for r in 0..3 {
            for c in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += rotation[k * 3 + r] * rotation[k * 3 + c];
                }
                let expect = if r == c { 1.0 } else { 0.0 };
                if (dot - expect).abs() > ORTHO_TOL {
                    return Err(Error::Camera(format!(
                        "rotation is not orthonormal: (R^T R)[{r}][{c}] = {dot}"
                    )));
                }
            }
        }
        let det = det3(&rotation);
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::Camera(format!("rotation determinant {det} != +1")));
        }
        Ok(CameraExtrinsics {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        CameraExtrinsics {
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            translation: [0.0; 3],
        }
    }

    /// Rotate a camera-frame vector into the ego frame.
    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0] * v[0] + r[1] * v[1] + r[2] * v[2],
            r[3] * v[0] + r[4] * v[1] + r[5] * v[2],
            r[6] * v[0] + r[7] * v[1] + r[8] * v[2],
        ]
    }

    /// Rotate an ego-frame vector into the camera frame (inverse rotation).
    pub fn rotate_inv(&self, v: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0] * v[0] + r[3] * v[1] + r[6] * v[2],
            r[1] * v[0] + r[4] * v[1] + r[7] * v[2],
            r[2] * v[0] + r[5] * v[1] + r[8] * v[2],
        ]
    }
}

fn det3(r: &[f64; 9]) -> f64 {
    r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
        + r[2] * (r[3] * r[7] - r[4] * r[6])
}

/// Uniform discretization of the metric depth range into `count` bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthBins {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
    #[serde(skip)]
    centers: Vec<f64>,
}

impl DepthBins {
    pub fn uniform(d_min: f64, d_max: f64, count: usize) -> Result<Self> {
        if !(d_min > 0.0 && d_max > d_min && count > 0) {
            return Err(Error::Camera(format!(
                "invalid depth bins: d_min={d_min}, d_max={d_max}, count={count}"
            )));
        }
        let width = (d_max - d_min) / count as f64;
        let centers = (0..count)
            .map(|b| d_min + (b as f64 + 0.5) * width)
            .collect();
        Ok(DepthBins {
            d_min,
            d_max,
            count,
            centers,
        })
    }

    /// Rebuilds centers after deserialization.
    pub fn restore(&mut self) {
        let width = (self.d_max - self.d_min) / self.count as f64;
        self.centers = (0..self.count)
            .map(|b| self.d_min + (b as f64 + 0.5) * width)
            .collect();
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Bin index for a metric depth; None when out of [d_min, d_max) or not
    /// finite.
    pub fn bin_of(&self, d: f64) -> Option<usize> {
        if !d.is_finite() || d < self.d_min || d >= self.d_max {
            return None;
        }
        let b = ((d - self.d_min) * self.count as f64 / (self.d_max - self.d_min)) as usize;
        Some(b.min(self.count - 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

/// N-view rig; all views share image dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub views: Vec<CameraView>,
    pub width: usize,
    pub height: usize,
}

impl CameraRig {
    pub fn new(views: Vec<CameraView>, width: usize, height: usize) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Camera("rig needs at least one view".into()));
        }
        Ok(CameraRig {
            views,
            width,
            height,
        })
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    /// Ring of `n` outward-facing cameras, yaw spaced 2*pi/n, mounted at a
    /// small radius above the ground plane.
    pub fn ring(n: usize, width: usize, height: usize) -> Result<Self> {
        let mut views = Vec::with_capacity(n);
        for k in 0..n {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            let (s, c) = theta.sin_cos();
            // Columns are the camera axes in ego coordinates:
            // x (image right), y (image down), z (optical forward).
            let rotation = [
                s, 0.0, c, //
                -c, 0.0, s, //
                0.0, -1.0, 0.0,
            ];
            let translation = [0.5 * c, 0.5 * s, 1.4];
            views.push(CameraView {
                intrinsics: CameraIntrinsics::new(
                    64.0,
                    64.0,
                    width as f64 / 2.0,
                    height as f64 / 2.0,
                )?,
                extrinsics: CameraExtrinsics::new(rotation, translation)?,
            });
        }
        CameraRig::new(views, width, height)
    }

    /// Flattened per-view camera descriptor fed to the camera-aware gate:
    /// (fx, fy, cx, cy, 9 rotation entries, 3 translation entries).
    pub fn param_vector(&self, view: usize) -> [f64; 16] {
        let v = &self.views[view];
        let mut out = [0.0; 16];
        out[0] = v.intrinsics.fx;
        out[1] = v.intrinsics.fy;
        out[2] = v.intrinsics.cx;
        out[3] = v.intrinsics.cy;
        out[4..13].copy_from_slice(&v.extrinsics.rotation);
        out[13..16].copy_from_slice(&v.extrinsics.translation);
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let views: Vec<RigViewJson> = self
            .views
            .iter()
            .map(|v| RigViewJson {
                fx: v.intrinsics.fx,
                fy: v.intrinsics.fy,
                cx: v.intrinsics.cx,
                cy: v.intrinsics.cy,
                rotation: v.extrinsics.rotation.to_vec(),
                translation: v.extrinsics.translation.to_vec(),
            })
            .collect();
        std::fs::write(path, serde_json::to_string_pretty(&views)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path, width: usize, height: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let raw: Vec<RigViewJson> = serde_json::from_str(&text)?;
        let mut views = Vec::with_capacity(raw.len());
        for v in raw {
            let rotation: [f64; 9] = v
                .rotation
                .try_into()
                .map_err(|_| Error::Camera("rotation must have 9 entries".into()))?;
            let translation: [f64; 3] = v
                .translation
                .try_into()
                .map_err(|_| Error::Camera("translation must have 3 entries".into()))?;
            views.push(CameraView {
                intrinsics: CameraIntrinsics::new(v.fx, v.fy, v.cx, v.cy)?,
                extrinsics: CameraExtrinsics::new(rotation, translation)?,
            });
        }
        CameraRig::new(views, width, height)
    }
}

#[derive(Serialize, Deserialize)]
struct RigViewJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: Vec<f64>,
    translation: Vec<f64>,
}

/// Back-projects pixel (u, v) at metric depth d into the ego frame:
/// R * (d*(u-cx)/fx, d*(v-cy)/fy, d) + t.
pub fn pixel_to_ego(
    u: f64,
    v: f64,
    d: f64,
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
) -> Result<[f64; 3]> {
    if d <= 0.0 {
        return Err(Error::Camera(format!("depth must be positive, got {d}")));
    }
    let cam = [
        d * (u - intr.cx) / intr.fx,
        d * (v - intr.cy) / intr.fy,
        d,
    ];
    let rot = extr.rotate(cam);
    Ok([
        rot[0] + extr.translation[0],
        rot[1] + extr.translation[1],
        rot[2] + extr.translation[2],
    ])
}

/// Inverse of pixel_to_ego: ego point -> (u, v, depth along camera z).
pub fn ego_to_pixel(
    p: [f64; 3],
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
) -> (f64, f64, f64) {
    let rel = [
        p[0] - extr.translation[0],
        p[1] - extr.translation[1],
        p[2] - extr.translation[2],
    ];
    let cam = extr.rotate_inv(rel);
    let d = cam[2];
    (
        intr.cx + intr.fx * cam[0] / d,
        intr.cy + intr.fy * cam[1] / d,
        d,
    )
}

/// Fixed ego-frame locations of every (view, depth-bin, token-row, token-col)
/// tuple; constants for the splat, no gradient needed.
#[derive(Debug, Clone)]
pub struct FrustumPoints {
    pub num_views: usize,
    pub num_bins: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major (N, B, h, w, 3).
    pub points: Vec<f64>,
}

impl FrustumPoints {
    pub fn at(&self, n: usize, b: usize, i: usize, j: usize) -> [f64; 3] {
        let idx = (((n * self.num_bins + b) * self.rows + i) * self.cols + j) * 3;
        [self.points[idx], self.points[idx + 1], self.points[idx + 2]]
    }
}

/// Ego-frame points at every token-pixel center and depth-bin center.
/// Token (i, j) maps to pixel center ((j+0.5)*patch, (i+0.5)*patch).
pub fn make_frustum(
    rows: usize,
    cols: usize,
    bins: &DepthBins,
    rig: &CameraRig,
    patch: usize,
) -> Result<FrustumPoints> {
    if patch * rows > rig.height || patch * cols > rig.width {
        return Err(Error::Camera(format!(
            "token grid {rows}x{cols} at stride {patch} exceeds image {}x{}",
            rig.height, rig.width
        )));
    }
    let n = rig.num_views();
    let b = bins.count;
    let mut points = Vec::with_capacity(n * b * rows * cols * 3);
    for view in &rig.views {
        for &depth in bins.centers() {
            for i in 0..rows {
                for j in 0..cols {
                    let u = (j as f64 + 0.5) * patch as f64;
                    let v = (i as f64 + 0.5) * patch as f64;
                    let p = pixel_to_ego(u, v, depth, &view.intrinsics, &view.extrinsics)?;
                    points.extend_from_slice(&p);
                }
            }
        }
    }
    Ok(FrustumPoints {
        num_views: n,
        num_bins: b,
        rows,
        cols,
        points,
    })
}

/// One-hot discrete depth target plus validity mask.
#[derive(Debug, Clone)]
pub struct DepthTarget {
    /// (N, h*w, B); all-zero rows where invalid.
    pub one_hot: Tensor,
    /// (N * h * w) flattened row-major.
    pub valid: Vec<bool>,
    pub valid_count: usize,
}

/// Discretizes a token-resolution depth map (N, h, w) into one-hot bins.
/// No-hit (non-finite) and out-of-range depths are marked invalid.
pub fn depth_to_target(depth_map: &Tensor, bins: &DepthBins) -> Result<DepthTarget> {
    let shape = depth_map.shape();
    if shape.len() != 3 {
        return Err(Error::BadShape {
            op: "depth_to_target",
            shape: shape.to_vec(),
            reason: "want (views, rows, cols)".into(),
        });
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let b = bins.count;
    let mut one_hot = vec![0.0; n * h * w * b];
    let mut valid = vec![false; n * h * w];
    let mut valid_count = 0;
    for (px, &d) in depth_map.data().iter().enumerate() {
        if let Some(bin) = bins.bin_of(d) {
            one_hot[px * b + bin] = 1.0;
            valid[px] = true;
            valid_count += 1;
        }
    }
    Ok(DepthTarget {
        one_hot: Tensor::new(vec![n, h * w, b], one_hot)?,
        valid,
        valid_count,
    })
}

/// Min-pools a full-resolution depth map (N, H, W) down to token resolution,
/// treating non-finite entries as no-hit. A block with no finite depth stays
/// no-hit (infinity). Foreground-dominant, mirroring sparse-projection
/// practice.
pub fn min_pool_depth(depth: &Tensor, patch: usize) -> Result<Tensor> {
    let shape = depth.shape();
    if shape.len() != 3 || shape[1] % patch != 0 || shape[2] % patch != 0 {
        return Err(Error::BadShape {
            op: "min_pool_depth",
            shape: shape.to_vec(),
            reason: format!("want (views, H, W) divisible by {patch}"),
        });
    }
    let (n, hh, ww) = (shape[0], shape[1], shape[2]);
    let (h, w) = (hh / patch, ww / patch);
    let src = depth.data();
    let mut out = vec![f64::INFINITY; n * h * w];
    for view in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut m = f64::INFINITY;
                for pi in 0..patch {
                    for pj in 0..patch {
                        let v = src[(view * hh + i * patch + pi) * ww + j * patch + pj];
                        if v.is_finite() && v < m {
                            m = v;
                        }
                    }
                }
                out[(view * h + i) * w + j] = m;
            }
        }
    }
    Tensor::new(vec![n, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_view() -> (CameraIntrinsics, CameraExtrinsics) {
        (
            CameraIntrinsics::new(100.0, 100.0, 32.0, 32.0).unwrap(),
            CameraExtrinsics::identity(),
        )
    }

    #[test]
    fn principal_ray_goes_straight_ahead() {
        let (intr, extr) = identity_view();
        let p = pixel_to_ego(32.0, 32.0, 5.0, &intr, &extr).unwrap();
        assert_eq!(p, [0.0, 0.0, 5.0]);
    }

    #[test]
    fn unit_off_axis_point() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 32.0, 32.0).unwrap();
        let extr = CameraExtrinsics::identity();
        let p = pixel_to_ego(132.0, 32.0, 1.0, &intr, &extr).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12 && (p[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotated_translated_case_matches_hand_computation() {
        // 90 degrees about z, translation (1,0,0); value confirmed by an
        // independent matrix multiply.
        let intr = CameraIntrinsics::new(100.0, 100.0, 32.0, 32.0).unwrap();
        let extr = CameraExtrinsics::new(
            [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            [1.0, 0.0, 0.0],
        )
        .unwrap();
        let p = pixel_to_ego(52.0, 12.0, 2.0, &intr, &extr).unwrap();
        assert!((p[0] - 1.4).abs() < 1e-12, "{p:?}");
        assert!((p[1] - 0.4).abs() < 1e-12, "{p:?}");
        assert!((p[2] - 2.0).abs() < 1e-12, "{p:?}");
    }

    #[test]
    fn nonpositive_depth_is_an_error() {
        let (intr, extr) = identity_view();
        assert!(pixel_to_ego(0.0, 0.0, 0.0, &intr, &extr).is_err());
        assert!(pixel_to_ego(0.0, 0.0, -3.0, &intr, &extr).is_err());
    }

    #[test]
    fn round_trip_recovers_pixel_and_depth() {
        let rig = CameraRig::ring(6, 112, 64).unwrap();
        for view in &rig.views {
            for &(u, v, d) in &[(3.7, 9.2, 1.5), (55.0, 31.0, 7.9), (111.0, 0.5, 2.2)] {
                let p = pixel_to_ego(u, v, d, &view.intrinsics, &view.extrinsics).unwrap();
                let (u2, v2, d2) = ego_to_pixel(p, &view.intrinsics, &view.extrinsics);
                assert!((u - u2).abs() < 1e-9, "{u} vs {u2}");
                assert!((v - v2).abs() < 1e-9, "{v} vs {v2}");
                assert!((d - d2).abs() < 1e-9, "{d} vs {d2}");
            }
        }
    }

    #[test]
    fn identity_extrinsics_z_equals_depth() {
        let (intr, extr) = identity_view();
        for &(u, v, d) in &[(0.0, 0.0, 0.3), (10.0, 50.0, 4.0), (63.9, 63.9, 8.9)] {
            let p = pixel_to_ego(u, v, d, &intr, &extr).unwrap();
            assert_eq!(p[2], d);
        }
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let r = [1.0, 0.0, 0.0, 0.0, 1.0, 0.1, 0.0, 0.0, 1.0];
        assert!(CameraExtrinsics::new(r, [0.0; 3]).is_err());
        // Reflection has determinant -1.
        let refl = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0];
        assert!(CameraExtrinsics::new(refl, [0.0; 3]).is_err());
    }

    #[test]
    fn single_point_frustum() {
        let intr = CameraIntrinsics::new(64.0, 64.0, 8.0, 8.0).unwrap();
        let rig = CameraRig::new(
            vec![CameraView {
                intrinsics: intr,
                extrinsics: CameraExtrinsics::identity(),
            }],
            16,
            16,
        )
        .unwrap();
        let bins = DepthBins::uniform(2.0, 4.0, 1).unwrap();
        let f = make_frustum(1, 1, &bins, &rig, 16).unwrap();
        assert_eq!(f.points.len(), 3);
        let p = f.at(0, 0, 0, 0);
        assert!((p[0]).abs() < 1e-12 && (p[1]).abs() < 1e-12 && (p[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_bins_differ_only_along_the_ray() {
        let rig = CameraRig::ring(1, 112, 64).unwrap();
        let bins = DepthBins::uniform(1.0, 9.0, 2).unwrap();
        let f = make_frustum(4, 7, &bins, &rig, 16).unwrap();
        assert_eq!(f.points.len(), 2 * 4 * 7 * 3);
        let view = &rig.views[0];
        for i in 0..4 {
            for j in 0..7 {
                let a = f.at(0, 0, i, j);
                let b = f.at(0, 1, i, j);
                // Both re-project to the same pixel at their own depths.
                let (ua, va, da) = ego_to_pixel(a, &view.intrinsics, &view.extrinsics);
                let (ub, vb, db) = ego_to_pixel(b, &view.intrinsics, &view.extrinsics);
                assert!((ua - ub).abs() < 1e-9 && (va - vb).abs() < 1e-9);
                assert!((da - 3.0).abs() < 1e-9 && (db - 7.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ring_frustum_counts_and_positive_camera_depth() {
        let rig = CameraRig::ring(4, 112, 64).unwrap();
        let bins = DepthBins::uniform(1.0, 9.0, 16).unwrap();
        let f = make_frustum(4, 7, &bins, &rig, 16).unwrap();
        // Brute-force enumeration over every (view, bin, row, col) tuple:
        // 4*16*4*7 = 1792 points, all at positive camera-frame depth.
        let mut total = 0;
        for (n, view) in rig.views.iter().enumerate() {
            for b in 0..16 {
                for i in 0..4 {
                    for j in 0..7 {
                        total += 1;
                        let p = f.at(n, b, i, j);
                        let (_, _, d) = ego_to_pixel(p, &view.intrinsics, &view.extrinsics);
                        assert!(d > 0.0);
                    }
                }
            }
        }
        assert_eq!(total, 1792);
        assert_eq!(f.points.len(), 1792 * 3);
    }

    #[test]
    fn depth_bin_boundaries() {
        let bins = DepthBins::uniform(1.0, 9.0, 16).unwrap();
        assert_eq!(bins.bin_of(1.0), Some(0));
        assert_eq!(bins.bin_of(9.0), None);
        assert_eq!(bins.bin_of(4.3), Some(6));
        assert_eq!(bins.bin_of(f64::INFINITY), None);
        assert_eq!(bins.bin_of(0.5), None);
    }

    #[test]
    fn depth_target_one_hot_and_validity() {
        let bins = DepthBins::uniform(1.0, 9.0, 16).unwrap();
        let depth = Tensor::new(
            vec![1, 2, 2],
            vec![1.0, 9.0, 4.3, f64::INFINITY],
        )
        .unwrap();
        let t = depth_to_target(&depth, &bins).unwrap();
        assert_eq!(t.valid, vec![true, false, true, false]);
        assert_eq!(t.valid_count, 2);
        // Exactly one hot bin per valid pixel; zero for invalid ones.
        for px in 0..4 {
            let row = &t.one_hot.data()[px * 16..(px + 1) * 16];
            let sum: f64 = row.iter().sum();
            assert_eq!(sum, if t.valid[px] { 1.0 } else { 0.0 });
        }
        assert_eq!(t.one_hot.data()[0 * 16], 1.0);
        assert_eq!(t.one_hot.data()[2 * 16 + 6], 1.0);
    }

    #[test]
    fn min_pool_takes_block_minimum_and_keeps_no_hit() {
        let mut data = vec![f64::INFINITY; 2 * 2 * 4];
        // View 0, block (0,0): finite depths, min 2.5.
        data[0] = 3.0;
        data[1] = 2.5;
        data[4] = 7.0;
        let depth = Tensor::new(vec![2, 2, 4], data).unwrap();
        let pooled = min_pool_depth(&depth, 2).unwrap();
        assert_eq!(pooled.shape(), &[2, 1, 2]);
        assert_eq!(pooled.data()[0], 2.5);
        assert!(pooled.data()[1].is_infinite());
        assert!(pooled.data()[2].is_infinite());
    }

    #[test]
    fn rig_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rig.json");
        let rig = CameraRig::ring(3, 112, 64).unwrap();
        rig.save_json(&path).unwrap();
        let back = CameraRig::load_json(&path, 112, 64).unwrap();
        assert_eq!(rig, back);
    }
}
