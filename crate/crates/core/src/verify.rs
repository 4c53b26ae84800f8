//! The full invariant suite behind `geomim verify`: per-primitive gradient
//! checks, end-to-end pipeline gradient fidelity, splat equivalence against
//! the quadruple-loop reference, CVA locality, mask exactness, and the
//! schedule/loss constants. Also used by the acceptance tests.

use std::sync::Arc;

use crate::camera::{depth_to_target, DepthBins};
use crate::dataset::DatasetSpec;
use crate::error::Result;
use crate::loss::{depth_loss, DepthLossMode, ALPHA_DEFAULT};
use crate::lss::{build_splat_index, corrupt_splat_index, lift_splat, reference_lift_splat, BevGridSpec};
use crate::masking::sample_mask;
use crate::model::{cva_forward, ModelConfig, ModelParams};
use crate::rng::{mix, Rng};
use crate::tensor::{grad_check, Tape, Tensor};
use crate::trainer::{lr_schedule, pretrain_forward_from_patches, TrainConfig, TrainContext};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(CheckResult {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let width = self
            .checks
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(10)
            .max(10);
        let mut out = String::new();
        out.push_str(&format!("{:<width$}  {:<6}  detail\n", "check", "status"));
        out.push_str(&format!("{}\n", "-".repeat(width + 30)));
        for c in &self.checks {
            out.push_str(&format!(
                "{:<width$}  {:<6}  {}\n",
                c.name,
                if c.passed { "pass" } else { "FAIL" },
                c.detail
            ));
        }
        out
    }
}

pub const PRIMITIVE_GRAD_TOL: f64 = 1e-4;
pub const PIPELINE_GRAD_TOL: f64 = 1e-3;

/// Max relative gradient error for every tape primitive on random inputs in
/// [-1, 1] (ln uses positive inputs; clamp bounds sit outside the data
/// range). Returns (primitive name, max relative error).
pub fn primitive_grad_errors() -> Result<Vec<(&'static str, f64)>> {
    let mut rng = Rng::new(0x9fad);
    let mut out = Vec::new();
    let eps = 1e-5;
    let x23 = Tensor::rand_uniform(&mut rng, &[2, 3], -1.0, 1.0);
    let x234 = Tensor::rand_uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let r23 = Tensor::rand_uniform(&mut rng, &[2, 3], -1.0, 1.0);
    let r234 = Tensor::rand_uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let y23 = Tensor::rand_uniform(&mut rng, &[2, 3], -1.0, 1.0);
    let w34 = Tensor::rand_uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let r24 = Tensor::rand_uniform(&mut rng, &[2, 4], -1.0, 1.0);
    let bias3 = Tensor::rand_uniform(&mut rng, &[3], -1.0, 1.0);

    // Linear ops are weighted by a random constant so permutation or
    // indexing mistakes cannot cancel in the reduction.
    let y2 = y23.clone();
    let r2 = r23.clone();
    out.push((
        "add",
        grad_check(
            move |t, x| {
                let y = t.leaf(&y2);
                let r = t.leaf(&r2);
                let s = t.add(x, y)?;
                let w = t.mul(s, r)?;
                t.sum(w)
            },
            &x23,
            eps,
        )?,
    ));
    let b3 = bias3.clone();
    let r2 = r23.clone();
    out.push((
        "add_broadcast",
        grad_check(
            move |t, x| {
                let b = t.leaf(&b3.clone().with_requires_grad(true));
                let s = t.add(x, b)?;
                let r = t.leaf(&r2);
                let w = t.mul(s, r)?;
                t.sum(w)
            },
            &x23,
            eps,
        )?,
    ));
    let y2 = y23.clone();
    out.push((
        "multiply",
        grad_check(
            move |t, x| {
                let y = t.leaf(&y2);
                let s = t.mul(x, y)?;
                let s2 = t.mul(s, s)?;
                t.sum(s2)
            },
            &x23,
            eps,
        )?,
    ));
    out.push((
        "affine",
        grad_check(
            |t, x| {
                let s = t.affine(x, -1.7, 0.3)?;
                let s2 = t.mul(s, s)?;
                t.sum(s2)
            },
            &x23,
            eps,
        )?,
    ));
    let w = w34.clone();
    let r = r24.clone();
    out.push((
        "matmul",
        grad_check(
            move |t, x| {
                let wv = t.leaf(&w.clone().with_requires_grad(true));
                let p = t.matmul(x, wv)?;
                let rv = t.leaf(&r);
                let q = t.mul(p, rv)?;
                t.sum(q)
            },
            &x23,
            eps,
        )?,
    ));
    let r = r234.clone();
    out.push((
        "transpose",
        grad_check(
            move |t, x| {
                let y = t.transpose(x, 0, 2)?;
                let y = t.transpose(y, 0, 2)?;
                let rv = t.leaf(&r);
                let q = t.mul(y, rv)?;
                t.sum(q)
            },
            &x234,
            eps,
        )?,
    ));
    let r = r234.clone();
    out.push((
        "reshape",
        grad_check(
            move |t, x| {
                let y = t.reshape(x, &[6, 4])?;
                let y = t.reshape(y, &[2, 3, 4])?;
                let rv = t.leaf(&r);
                let q = t.mul(y, rv)?;
                t.sum(q)
            },
            &x234,
            eps,
        )?,
    ));
    out.push((
        "slice_concat",
        grad_check(
            |t, x| {
                let a = t.slice(x, 1, 0, 1)?;
                let b = t.slice(x, 1, 1, 2)?;
                let y = t.concat(&[b, a], 1)?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            },
            &x234,
            eps,
        )?,
    ));
    out.push((
        "softmax",
        grad_check(
            |t, x| {
                let s = t.softmax(x, 1)?;
                let s2 = t.mul(s, s)?;
                t.sum(s2)
            },
            &x234,
            eps,
        )?,
    ));
    out.push((
        "layer_norm",
        grad_check(
            |t, x| {
                let s = t.layer_norm(x, 1e-6)?;
                let s2 = t.mul(s, s)?;
                let m = t.mean(s2)?;
                let g = t.gelu(m)?;
                t.sum(g)
            },
            &x234,
            eps,
        )?,
    ));
    out.push((
        "gelu",
        grad_check(
            |t, x| {
                let g = t.gelu(x)?;
                t.sum(g)
            },
            &x234,
            eps,
        )?,
    ));
    out.push((
        "sigmoid",
        grad_check(
            |t, x| {
                let g = t.sigmoid(x)?;
                let g2 = t.mul(g, g)?;
                t.sum(g2)
            },
            &x234,
            eps,
        )?,
    ));
    let pos = Tensor::rand_uniform(&mut rng, &[2, 3], 0.5, 1.5);
    out.push((
        "ln",
        grad_check(
            |t, x| {
                let g = t.ln(x)?;
                t.sum(g)
            },
            &pos,
            eps,
        )?,
    ));
    out.push((
        "clamp",
        grad_check(
            |t, x| {
                let g = t.clamp(x, -2.0, 2.0)?;
                let g2 = t.mul(g, g)?;
                t.sum(g2)
            },
            &x23,
            eps,
        )?,
    ));
    out.push((
        "sum",
        grad_check(
            |t, x| {
                let s = t.sum(x)?;
                let s2 = t.mul(s, s)?;
                t.sum(s2)
            },
            &x23,
            eps,
        )?,
    ));
    out.push((
        "mean",
        grad_check(
            |t, x| {
                let s = t.mean(x)?;
                let s2 = t.mul(s, s)?;
                t.sum(s2)
            },
            &x23,
            eps,
        )?,
    ));
    let r = r23.clone();
    out.push((
        "sum_axis",
        grad_check(
            move |t, x| {
                let s = t.sum_axis(x, 2)?;
                let rv = t.leaf(&r);
                let q = t.mul(s, rv)?;
                t.sum(q)
            },
            &x234,
            eps,
        )?,
    ));
    let idx = Arc::new(vec![1usize, 1, 0, 1]);
    let r = Tensor::rand_uniform(&mut rng, &[4, 3, 4], -1.0, 1.0);
    out.push((
        "gather",
        grad_check(
            move |t, x| {
                let g = t.gather(x, idx.clone())?;
                let rv = t.leaf(&r);
                let q = t.mul(g, rv)?;
                t.sum(q)
            },
            &x234.clone(),
            eps,
        )?,
    ));
    // Scatter-add checked w.r.t. values with fixed indices.
    let idx = Arc::new(vec![3usize, 0, 3]);
    let r = Tensor::rand_uniform(&mut rng, &[5, 3], -1.0, 1.0);
    let vals = Tensor::rand_uniform(&mut rng, &[3, 3], -1.0, 1.0);
    out.push((
        "scatter_add",
        grad_check(
            move |t, x| {
                let s = t.scatter_add(5, idx.clone(), x)?;
                let rv = t.leaf(&r);
                let q = t.mul(s, rv)?;
                t.sum(q)
            },
            &vals,
            eps,
        )?,
    ));
    Ok(out)
}

/// Tiny end-to-end configuration (2 views, 2x2 tokens, dim 8, 4 bins).
pub fn tiny_pipeline() -> Result<(ModelParams, TrainContext)> {
    let cfg = ModelConfig {
        dim: 8,
        heads: 2,
        enc_depth: 1,
        dec_depth: 8,
        patch: 16,
        bins: 4,
        mlp_ratio: 2,
        views: 2,
        cva_positions: vec![2, 6],
        camera_gate: true,
    };
    let spec = DatasetSpec {
        views: 2,
        height: 32,
        width: 32,
        patch: 16,
        channels: 8,
        bins: DepthBins::uniform(1.0, 9.0, 4)?,
        bev: BevGridSpec::square(8.0, 8),
        ..DatasetSpec::default()
    };
    let rig = crate::camera::CameraRig::ring(2, 32, 32)?;
    let ctx = TrainContext::new(spec, rig)?;
    let model = ModelParams::init(&cfg, 0x7e57)?;
    Ok((model, ctx))
}

/// Synthetic prepared sample for the tiny pipeline (random but seeded).
pub fn tiny_sample(ctx: &TrainContext, seed: u64) -> Result<crate::trainer::PreparedSample> {
    let mut rng = Rng::new(mix(seed, 0x5a3b1e));
    let hw = ctx.rows * ctx.cols;
    let patches = Tensor::rand_uniform(
        &mut rng,
        &[ctx.spec.views, hw, 3 * ctx.spec.patch * ctx.spec.patch],
        0.0,
        1.0,
    );
    let mut depth = Tensor::rand_uniform(
        &mut rng,
        &[ctx.spec.views, ctx.rows, ctx.cols],
        ctx.spec.bins.d_min,
        ctx.spec.bins.d_max,
    );
    // A couple of no-hit pixels to exercise the validity mask.
    depth.data_mut()[0] = f64::INFINITY;
    let target = depth_to_target(&depth, &ctx.spec.bins)?;
    let teacher = Tensor::rand_uniform(
        &mut rng,
        &[ctx.spec.channels, ctx.spec.bev.nx, ctx.spec.bev.ny],
        -0.5,
        0.5,
    );
    Ok(crate::trainer::PreparedSample {
        patches,
        depth_target: target,
        teacher,
    })
}

/// Gradient fidelity of the composed loss pipeline w.r.t. a parameter tensor.
pub fn pipeline_grad_error_wrt(param_name: &str) -> Result<f64> {
    let (model, ctx) = tiny_pipeline()?;
    let sample = tiny_sample(&ctx, 1)?;
    let pattern = sample_mask(2, ctx.rows, ctx.cols, ctx.spec.views, 0.5)?;
    let x0 = model
        .named()
        .iter()
        .find(|(n, _)| n == param_name)
        .map(|(_, t)| (*t).clone())
        .unwrap_or_else(|| panic!("no parameter {param_name}"));
    let name = param_name.to_string();
    grad_check(
        move |tape, probe| {
            let mut ids = std::collections::BTreeMap::new();
            for (n, tensor) in model.named() {
                if n == name {
                    ids.insert(n, probe);
                } else {
                    ids.insert(n, tape.leaf(tensor));
                }
            }
            let bound = crate::model::BoundModel::from_map(model.cfg.clone(), ids);
            let patches = tape.leaf(&sample.patches);
            let (terms, _) = pretrain_forward_from_patches(
                tape,
                &bound,
                &ctx,
                patches,
                &sample.depth_target,
                &sample.teacher,
                &pattern,
                ALPHA_DEFAULT,
                DepthLossMode::SoftmaxBce,
            )?;
            Ok(terms.total_id)
        },
        &x0,
        1e-5,
    )
}

/// Gradient fidelity of the composed loss pipeline w.r.t. a 1-view 16x16
/// input image (one token).
pub fn pipeline_grad_error_wrt_input() -> Result<f64> {
    let cfg = ModelConfig {
        dim: 8,
        heads: 2,
        enc_depth: 1,
        dec_depth: 8,
        patch: 16,
        bins: 4,
        mlp_ratio: 2,
        views: 1,
        cva_positions: vec![2, 6],
        camera_gate: true,
    };
    let spec = DatasetSpec {
        views: 1,
        height: 16,
        width: 32,
        patch: 16,
        channels: 8,
        bins: DepthBins::uniform(1.0, 9.0, 4)?,
        bev: BevGridSpec::square(8.0, 8),
        ..DatasetSpec::default()
    };
    let rig = crate::camera::CameraRig::ring(1, 32, 16)?;
    let ctx = TrainContext::new(spec, rig)?;
    let model = ModelParams::init(&cfg, 0xfeed)?;
    let mut rng = Rng::new(3);
    let hw = ctx.rows * ctx.cols;
    let patches0 = Tensor::rand_uniform(&mut rng, &[1, hw, 768], 0.0, 1.0);
    let depth = Tensor::rand_uniform(&mut rng, &[1, ctx.rows, ctx.cols], 1.5, 8.5);
    let target = depth_to_target(&depth, &ctx.spec.bins)?;
    let teacher = Tensor::rand_uniform(&mut rng, &[8, 8, 8], -0.5, 0.5);
    let pattern = sample_mask(4, ctx.rows, ctx.cols, 1, 0.5)?;
    grad_check(
        move |tape, patches| {
            let mut ids = std::collections::BTreeMap::new();
            for (n, tensor) in model.named() {
                ids.insert(n, tape.leaf(tensor));
            }
            let bound = crate::model::BoundModel::from_map(model.cfg.clone(), ids);
            let (terms, _) = pretrain_forward_from_patches(
                tape,
                &bound,
                &ctx,
                patches,
                &target,
                &teacher,
                &pattern,
                ALPHA_DEFAULT,
                DepthLossMode::SoftmaxBce,
            )?;
            Ok(terms.total_id)
        },
        &patches0,
        1e-5,
    )
}

/// Splat equivalence and conservation over `trials` random small instances.
/// Returns (max abs diff vs reference, max conservation violation).
pub fn splat_equivalence(trials: usize) -> Result<(f64, f64)> {
    let mut rng = Rng::new(0x5817);
    let mut max_diff: f64 = 0.0;
    let mut max_violation: f64 = 0.0;
    for trial in 0..trials {
        let (n, b, h, w, c) = (2usize, 3usize, 2usize, 2usize, 2usize);
        let spec = BevGridSpec::square(2.0, 4);
        // Half the trials keep every point in extent to exercise exact
        // conservation; the rest push points outside.
        let spread = if trial % 2 == 0 { 1.9 } else { 3.0 };
        let pts: Vec<f64> = (0..n * b * h * w * 3)
            .map(|_| rng.range(-spread, spread))
            .collect();
        let frustum = crate::camera::FrustumPoints {
            num_views: n,
            num_bins: b,
            rows: h,
            cols: w,
            points: pts,
        };
        let fsem = Tensor::rand_uniform(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let mut depth = Tensor::rand_uniform(&mut rng, &[n, b, h, w], 0.05, 1.0);
        for view in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let s: f64 = (0..b).map(|bin| depth.at(&[view, bin, i, j])).sum();
                    for bin in 0..b {
                        let v = depth.at(&[view, bin, i, j]) / s;
                        depth.set(&[view, bin, i, j], v);
                    }
                }
            }
        }
        let slow = reference_lift_splat(&fsem, &depth, &frustum, &spec)?;

        let index = build_splat_index(&frustum, &spec);
        let mut fs_nhwc = Tensor::zeros(&[n, h * w, c]);
        let mut d_nhwb = Tensor::zeros(&[n, h * w, b]);
        for view in 0..n {
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        fs_nhwc.set(&[view, i * w + j, ch], fsem.at(&[view, ch, i, j]));
                    }
                    for bin in 0..b {
                        d_nhwb.set(&[view, i * w + j, bin], depth.at(&[view, bin, i, j]));
                    }
                }
            }
        }
        let mut tape = Tape::new();
        let fs = tape.leaf(&fs_nhwc);
        let d = tape.leaf(&d_nhwb);
        let grid = lift_splat(&mut tape, fs, d, &index, spec.nx, spec.ny)?;
        let fast = tape.value(grid);
        max_diff = max_diff.max(fast.max_abs_diff(&slow));

        if spread < 2.0 {
            for ch in 0..c {
                let gsum: f64 = (0..spec.num_cells())
                    .map(|cell| fast.data()[ch * spec.num_cells() + cell])
                    .sum();
                let mut fsum = 0.0;
                for view in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            fsum += fsem.at(&[view, ch, i, j]);
                        }
                    }
                }
                max_violation = max_violation.max((gsum - fsum).abs());
            }
        }
    }
    Ok((max_diff, max_violation))
}

/// Negative control: with a corrupted splat index, conservation must break.
pub fn splat_corruption_detected() -> Result<bool> {
    let mut rng = Rng::new(0xbad);
    let (n, b, h, w, c) = (2usize, 3usize, 2usize, 2usize, 2usize);
    let spec = BevGridSpec::square(2.0, 4);
    let pts: Vec<f64> = (0..n * b * h * w * 3)
        .map(|_| rng.range(-1.9, 1.9))
        .collect();
    let frustum = crate::camera::FrustumPoints {
        num_views: n,
        num_bins: b,
        rows: h,
        cols: w,
        points: pts,
    };
    let index = corrupt_splat_index(&build_splat_index(&frustum, &spec), 4);
    let fs = Tensor::rand_uniform(&mut rng, &[n, h * w, c], 0.5, 1.0);
    let mut d = Tensor::rand_uniform(&mut rng, &[n, h * w, b], 0.05, 1.0);
    for view in 0..n {
        for px in 0..h * w {
            let s: f64 = (0..b).map(|bin| d.at(&[view, px, bin])).sum();
            for bin in 0..b {
                let v = d.at(&[view, px, bin]) / s;
                d.set(&[view, px, bin], v);
            }
        }
    }
    let mut tape = Tape::new();
    let fsv = tape.leaf(&fs);
    let dv = tape.leaf(&d);
    let grid = lift_splat(&mut tape, fsv, dv, &index, spec.nx, spec.ny)?;
    let gsum: f64 = tape.value(grid).data().iter().sum();
    let fsum: f64 = fs.data().iter().sum();
    Ok((gsum - fsum).abs() > 1e-6)
}

/// Max absolute cross-row gradient through a CVA block (must be exactly 0).
pub fn cva_cross_row_gradient() -> Result<f64> {
    let cfg = ModelConfig {
        dim: 8,
        heads: 2,
        enc_depth: 0,
        dec_depth: 2,
        patch: 16,
        bins: 4,
        mlp_ratio: 2,
        views: 3,
        cva_positions: vec![1],
        camera_gate: false,
    };
    let model = ModelParams::init(&cfg, 0xc7a)?;
    let (h, w) = (4usize, 2usize);
    let mut rng = Rng::new(1);
    let input = Tensor::rand_uniform(&mut rng, &[3, h * w, cfg.dim], -1.0, 1.0)
        .with_requires_grad(true);
    let mut worst: f64 = 0.0;
    for target_row in 0..h {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.leaf(&input);
        let y = cva_forward(&mut tape, x, &bound, "dec.shared.0", h, w)?;
        let row = tape.slice(y, 1, target_row * w, w)?;
        let sq = tape.mul(row, row)?;
        let loss = tape.sum(sq)?;
        tape.backward(loss)?;
        let g = tape.grad(x).expect("input gradient");
        for view in 0..3 {
            for t in 0..h * w {
                if t / w != target_row {
                    for ch in 0..cfg.dim {
                        worst = worst.max(g.at(&[view, t, ch]).abs());
                    }
                }
            }
        }
    }
    Ok(worst)
}

/// Masking exactness over seeded draws: exact per-view counts and empirical
/// per-position frequency within 3 sigma of the ratio.
pub fn mask_statistics(draws: usize) -> Result<(bool, f64)> {
    let (h, w, n) = (4usize, 7usize, 2usize);
    let hw = h * w;
    let mut max_sigma_units: f64 = 0.0;
    for &ratio in &[0.25, 0.5, 0.75] {
        let expect = (ratio * hw as f64).round() as usize;
        let mut freq = vec![0usize; n * hw];
        for draw in 0..draws {
            let m = sample_mask(mix(0x101f, draw as u64), h, w, n, ratio)?;
            for view in 0..n {
                let count = (0..hw).filter(|&t| m.is_masked(view, t)).count();
                if count != expect {
                    return Ok((false, f64::NAN));
                }
                for t in 0..hw {
                    if m.is_masked(view, t) {
                        freq[view * hw + t] += 1;
                    }
                }
            }
        }
        let sigma = (ratio * (1.0 - ratio) / draws as f64).sqrt();
        for &f in &freq {
            let p = f as f64 / draws as f64;
            max_sigma_units = max_sigma_units.max((p - ratio).abs() / sigma);
        }
    }
    Ok((true, max_sigma_units))
}

/// Schedule and loss constants from the pretraining recipe.
pub fn constants_hold() -> (bool, String) {
    let cfg = TrainConfig {
        total_steps: 2000,
        warmup_steps: 500,
        base_lr: 2e-4,
        weight_decay: 0.01,
        alpha: ALPHA_DEFAULT,
        mask_ratio: 0.5,
        batch_size: 1,
        seed: 0,
        betas: (0.9, 0.999),
        eps: 1e-8,
        depth_loss_mode: DepthLossMode::SoftmaxBce,
        checkpoint_interval: 0,
    };
    let lr500 = lr_schedule(500, &cfg);
    let lr250 = lr_schedule(250, &cfg);
    let lr_end = lr_schedule(2000, &cfg);

    // Uniform 1/16 prediction against a one-hot target, closed form.
    let bins = DepthBins::uniform(1.0, 9.0, 16).expect("bins");
    let depth_map = Tensor::new(vec![1, 1, 1], vec![4.3]).expect("shape");
    let target = depth_to_target(&depth_map, &bins).expect("target");
    let probs = Tensor::full(&[1, 1, 16], 1.0 / 16.0);
    let logits = Tensor::zeros(&[1, 1, 16]);
    let mut tape = Tape::new();
    let p = tape.leaf(&probs);
    let lg = tape.leaf(&logits);
    let (l, _) = depth_loss(&mut tape, p, lg, &target, DepthLossMode::SoftmaxBce).expect("loss");
    let bce = tape.value(l).item();

    let ok = lr500 == 2e-4
        && lr250 == 1e-4
        && lr_end.abs() < 1e-20
        && ALPHA_DEFAULT == 0.01
        && (bce - 0.23379).abs() < 1e-5;
    (
        ok,
        format!(
            "lr(500)={lr500:.1e} lr(250)={lr250:.1e} lr(end)={lr_end:.1e} alpha={ALPHA_DEFAULT} bce={bce:.5}"
        ),
    )
}

/// Runs every check; `with_negative_control` also verifies that a corrupted
/// splat index is caught.
pub fn run_verification(with_negative_control: bool) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();

    let mut worst_primitive: f64 = 0.0;
    for (name, err) in primitive_grad_errors()? {
        worst_primitive = worst_primitive.max(err);
        report.push(
            &format!("grad/{name}"),
            err < PRIMITIVE_GRAD_TOL,
            format!("max rel err {err:.2e}"),
        );
    }

    for param in ["mask_token", "sem_head.w", "gate.fc1.w", "geo_head.b"] {
        let err = pipeline_grad_error_wrt(param)?;
        report.push(
            &format!("grad/pipeline[{param}]"),
            err < PIPELINE_GRAD_TOL,
            format!("max rel err {err:.2e}"),
        );
    }
    let err = pipeline_grad_error_wrt_input()?;
    report.push(
        "grad/pipeline[input]",
        err < PIPELINE_GRAD_TOL,
        format!("max rel err {err:.2e}"),
    );

    let (diff, violation) = splat_equivalence(50)?;
    report.push(
        "lss/brute_force_equivalence",
        diff < 1e-12,
        format!("max abs diff {diff:.2e}"),
    );
    report.push(
        "lss/mass_conservation",
        violation < 1e-9,
        format!("max violation {violation:.2e}"),
    );
    if with_negative_control {
        let caught = splat_corruption_detected()?;
        report.push(
            "lss/corruption_detected",
            caught,
            "conservation check fails on corrupted index".into(),
        );
    }

    let worst = cva_cross_row_gradient()?;
    report.push(
        "cva/row_locality",
        worst == 0.0,
        format!("max cross-row grad {worst:.2e}"),
    );

    let h = 4;
    let (w, n, c) = (7, 6, 64);
    let cva_ratio = crate::model::cva_flops(2 * h, w, n, c) as f64
        / crate::model::cva_flops(h, w, n, c) as f64;
    let global_ratio = crate::model::global_attention_flops(2 * h, w, n, c) as f64
        / crate::model::global_attention_flops(h, w, n, c) as f64;
    report.push(
        "cva/flop_scaling",
        cva_ratio == 2.0 && global_ratio == 4.0,
        format!("cva x{cva_ratio}, global x{global_ratio} under row doubling"),
    );

    let (counts_exact, sigma_units) = mask_statistics(1000)?;
    report.push(
        "mask/exact_counts",
        counts_exact,
        "round(ratio*h*w) per view over 1000 draws".into(),
    );
    report.push(
        "mask/frequency_3sigma",
        sigma_units < 3.0,
        format!("max deviation {sigma_units:.2} sigma"),
    );

    let (ok, detail) = constants_hold();
    report.push("constants/schedule_alpha_bce", ok, detail);

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_verification_passes() {
        let report = run_verification(true).unwrap();
        assert!(report.all_passed(), "\n{}", report.render());
    }

    #[test]
    fn report_renders_a_table() {
        let mut report = VerifyReport::default();
        report.push("a", true, "fine".into());
        report.push("b", false, "broken".into());
        let s = report.render();
        assert!(s.contains("pass") && s.contains("FAIL"));
        assert!(!report.all_passed());
    }
}
