//! Deterministic synthetic multi-camera scenes and the oracle teacher grid
//! that stands in for a pretrained detector's BEV features.

use serde::{Deserialize, Serialize};

use crate::camera::CameraRig;
use crate::error::{Error, Result};
use crate::lss::BevGridSpec;
use crate::rng::{mix, Rng};
use crate::tensor::Tensor;

/// Axis-aligned box resting on the ground plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxObject {
    /// Center in ego meters.
    pub center: [f64; 3],
    /// Full extents in meters.
    pub size: [f64; 3],
    pub class_id: usize,
}

impl BoxObject {
    /// BEV footprint as (x_lo, x_hi, y_lo, y_hi).
    pub fn footprint(&self) -> (f64, f64, f64, f64) {
        (
            self.center[0] - self.size[0] / 2.0,
            self.center[0] + self.size[0] / 2.0,
            self.center[1] - self.size[1] / 2.0,
            self.center[1] + self.size[1] / 2.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<BoxObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Objects stay within +- extent meters of the origin.
    pub extent: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub num_classes: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            extent: 8.0,
            min_objects: 3,
            max_objects: 8,
            min_size: 0.8,
            max_size: 2.5,
            num_classes: 4,
        }
    }
}

/// BEV intersection-over-union of two footprints.
pub fn bev_iou(a: &BoxObject, b: &BoxObject) -> f64 {
    let (ax0, ax1, ay0, ay1) = a.footprint();
    let (bx0, bx1, by0, by1) = b.footprint();
    let ix = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let iy = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = ix * iy;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Reproducible scene sampling: objects drawn uniformly inside the extent,
/// rejecting placements that overlap an existing object by more than 50% IoU
/// in BEV.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    if cfg.min_objects < 1 || cfg.max_objects < cfg.min_objects || cfg.max_objects > 12 {
        return Err(Error::Scene(format!(
            "object count range [{}, {}] outside [1, 12]",
            cfg.min_objects, cfg.max_objects
        )));
    }
    let mut rng = Rng::new(mix(seed, 0x5ce9e));
    let count = cfg.min_objects + rng.below(cfg.max_objects - cfg.min_objects + 1);
    let mut objects: Vec<BoxObject> = Vec::with_capacity(count);
    for k in 0..count {
        let mut placed = false;
        for _attempt in 0..1000 {
            let size = [
                rng.range(cfg.min_size, cfg.max_size),
                rng.range(cfg.min_size, cfg.max_size),
                rng.range(cfg.min_size, cfg.max_size),
            ];
            let half = [size[0] / 2.0, size[1] / 2.0];
            let center = [
                rng.range(-cfg.extent + half[0], cfg.extent - half[0]),
                rng.range(-cfg.extent + half[1], cfg.extent - half[1]),
                size[2] / 2.0,
            ];
            let candidate = BoxObject {
                center,
                size,
                class_id: rng.below(cfg.num_classes),
            };
            if objects.iter().all(|o| bev_iou(o, &candidate) <= 0.5) {
                objects.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Scene(format!(
                "could not place object {k} after 1000 attempts"
            )));
        }
    }
    Ok(Scene { objects })
}

/// Multi-view render output: image channels are (class albedo * Lambertian
/// shade, normalized depth, hit mask); depth is meters along the camera
/// z-axis, infinity where nothing is hit.
#[derive(Debug, Clone)]
pub struct RenderedViews {
    /// (N, 3, H, W) in [0, 1].
    pub images: Tensor,
    /// (N, H, W).
    pub depth_maps: Tensor,
}

const LIGHT_DIR: [f64; 3] = [0.37139067635410377, -0.2785430072655778, 0.8856367981087884];
const GROUND_ALBEDO: f64 = 0.28;
const DEPTH_NORM: f64 = 16.0;

fn class_albedo(class_id: usize, num_classes: usize) -> f64 {
    0.35 + 0.55 * (class_id as f64 + 1.0) / num_classes.max(1) as f64
}

fn shade(normal: [f64; 3]) -> f64 {
    let ndotl = normal[0] * LIGHT_DIR[0] + normal[1] * LIGHT_DIR[1] + normal[2] * LIGHT_DIR[2];
    0.25 + 0.75 * ndotl.max(0.0)
}

/// Slab-method ray/box intersection. The ray is origin + t*dir with dir.z
/// normalized so t equals camera z-depth; returns entry t and outward normal.
fn ray_box(origin: [f64; 3], dir: [f64; 3], obj: &BoxObject) -> Option<(f64, [f64; 3])> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut entry_axis = 0usize;
    let mut entry_sign = 0.0f64;
    for axis in 0..3 {
        let lo = obj.center[axis] - obj.size[axis] / 2.0;
        let hi = obj.center[axis] + obj.size[axis] / 2.0;
        if dir[axis].abs() < 1e-12 {
            if origin[axis] < lo || origin[axis] > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[axis];
        let (mut t0, mut t1) = ((lo - origin[axis]) * inv, (hi - origin[axis]) * inv);
        let mut sign = -dir[axis].signum();
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            sign = -sign;
        }
        // Record which slab bounds the entry.
        if t0 > t_near {
            t_near = t0;
            entry_axis = axis;
            entry_sign = sign;
        }
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_far < 1e-9 || t_near < 1e-9 {
        // Inside or behind; treat as no usable front hit.
        return None;
    }
    let mut normal = [0.0; 3];
    normal[entry_axis] = entry_sign;
    Some((t_near, normal))
}

pub fn render_views(scene: &Scene, rig: &CameraRig, num_classes: usize) -> RenderedViews {
    let (n, h, w) = (rig.num_views(), rig.height, rig.width);
    let mut images = vec![0.0; n * 3 * h * w];
    let mut depths = vec![f64::INFINITY; n * h * w];
    for (view_idx, view) in rig.views.iter().enumerate() {
        let origin = view.extrinsics.translation;
        for v in 0..h {
            for u in 0..w {
                let cam_dir = [
                    (u as f64 + 0.5 - view.intrinsics.cx) / view.intrinsics.fx,
                    (v as f64 + 0.5 - view.intrinsics.cy) / view.intrinsics.fy,
                    1.0,
                ];
                let dir = view.extrinsics.rotate(cam_dir);
                let mut best_t = f64::INFINITY;
                let mut best_normal = [0.0; 3];
                let mut best_albedo = 0.0;
                for obj in &scene.objects {
                    if let Some((t, normal)) = ray_box(origin, dir, obj) {
                        if t < best_t {
                            best_t = t;
                            best_normal = normal;
                            best_albedo = class_albedo(obj.class_id, num_classes);
                        }
                    }
                }
                // Ground plane z = 0.
                if dir[2] < -1e-12 {
                    let t = -origin[2] / dir[2];
                    if t > 1e-9 && t < best_t {
                        best_t = t;
                        best_normal = [0.0, 0.0, 1.0];
                        best_albedo = GROUND_ALBEDO;
                    }
                }
                let px = (view_idx * h + v) * w + u;
                let base = view_idx * 3 * h * w;
                if best_t.is_finite() {
                    depths[px] = best_t;
                    images[base + (v * w + u)] = best_albedo * shade(best_normal);
                    images[base + h * w + (v * w + u)] = (best_t / DEPTH_NORM).min(1.0);
                    images[base + 2 * h * w + (v * w + u)] = 1.0;
                } else {
                    images[base + h * w + (v * w + u)] = 1.0;
                }
            }
        }
    }
    RenderedViews {
        images: Tensor::new(vec![n, 3, h, w], images).expect("shape"),
        depth_maps: Tensor::new(vec![n, h, w], depths).expect("shape"),
    }
}

/// Fraction of a grid cell covered by an object footprint (exact rectangle
/// intersection over cell area).
pub fn footprint_coverage(obj: &BoxObject, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    let (bx0, bx1, by0, by1) = obj.footprint();
    let ix = (x1.min(bx1) - x0.max(bx0)).max(0.0);
    let iy = (y1.min(by1) - y0.max(by0)).max(0.0);
    ix * iy / ((x1 - x0) * (y1 - y0))
}

/// Per-class unit-norm embedding, fixed by the seed.
fn class_embedding(seed: u64, stream: u64, channels: usize) -> Vec<f64> {
    let mut rng = Rng::new(mix(seed, stream));
    let mut e: Vec<f64> = (0..channels).map(|_| rng.normal()).collect();
    let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    e.iter_mut().for_each(|v| *v /= norm);
    e
}

/// Pre-blur teacher grid: every covered cell carries its dominant object's
/// class embedding scaled by coverage fraction; free cells carry the
/// background embedding scaled by 0.1.
pub fn teacher_bev_raw(
    scene: &Scene,
    spec: &BevGridSpec,
    channels: usize,
    seed: u64,
) -> Tensor {
    let max_class = scene.objects.iter().map(|o| o.class_id).max().unwrap_or(0);
    let embeddings: Vec<Vec<f64>> = (0..=max_class)
        .map(|c| class_embedding(seed, 1000 + c as u64, channels))
        .collect();
    let background = class_embedding(seed, 999, channels);

    let cells = spec.num_cells();
    let mut grid = vec![0.0; channels * cells];
    let (cw, ch_) = (spec.cell_x(), spec.cell_y());
    for ix in 0..spec.nx {
        for iy in 0..spec.ny {
            let x0 = spec.x_min + ix as f64 * cw;
            let y0 = spec.y_min + iy as f64 * ch_;
            let cell = ix * spec.ny + iy;
            let mut best_cov = 0.0;
            let mut best_obj: Option<&BoxObject> = None;
            for obj in &scene.objects {
                let cov = footprint_coverage(obj, x0, x0 + cw, y0, y0 + ch_);
                if cov > best_cov {
                    best_cov = cov;
                    best_obj = Some(obj);
                }
            }
            match best_obj {
                Some(obj) => {
                    for c in 0..channels {
                        grid[c * cells + cell] = embeddings[obj.class_id][c] * best_cov;
                    }
                }
                None => {
                    for c in 0..channels {
                        grid[c * cells + cell] = background[c] * 0.1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![channels, spec.nx, spec.ny], grid).expect("shape")
}

/// One pass of 3x3 box blur, averaging over in-bounds neighbors per channel.
pub fn box_blur_3x3(grid: &Tensor) -> Tensor {
    let shape = grid.shape();
    let (c, nx, ny) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; grid.numel()];
    for ch in 0..c {
        for ix in 0..nx {
            for iy in 0..ny {
                let mut sum = 0.0;
                let mut count = 0.0;
                for dx in -1i64..=1 {
                    for dy in -1i64..=1 {
                        let (jx, jy) = (ix as i64 + dx, iy as i64 + dy);
                        if jx < 0 || jy < 0 || jx >= nx as i64 || jy >= ny as i64 {
                            continue;
                        }
                        sum += grid.at(&[ch, jx as usize, jy as usize]);
                        count += 1.0;
                    }
                }
                out[(ch * nx + ix) * ny + iy] = sum / count;
            }
        }
    }
    Tensor::new(vec![c, nx, ny], out).expect("shape")
}

/// The oracle teacher: rasterized class embeddings, then one 3x3 box blur.
/// Deterministic function of (scene, seed).
pub fn teacher_bev(scene: &Scene, spec: &BevGridSpec, channels: usize, seed: u64) -> Tensor {
    box_blur_3x3(&teacher_bev_raw(scene, spec, channels, seed))
}

/// Binary BEV occupancy used by the transfer probe: a cell is occupied when
/// its center lies inside any object footprint.
pub fn occupancy_target(scene: &Scene, spec: &BevGridSpec) -> Tensor {
    let mut out = vec![0.0; spec.num_cells()];
    for ix in 0..spec.nx {
        for iy in 0..spec.ny {
            let x = spec.x_min + (ix as f64 + 0.5) * spec.cell_x();
            let y = spec.y_min + (iy as f64 + 0.5) * spec.cell_y();
            let hit = scene.objects.iter().any(|o| {
                let (x0, x1, y0, y1) = o.footprint();
                x >= x0 && x < x1 && y >= y0 && y < y1
            });
            if hit {
                out[ix * spec.ny + iy] = 1.0;
            }
        }
    }
    Tensor::new(vec![spec.num_cells()], out).expect("shape")
}
