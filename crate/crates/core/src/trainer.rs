//! Pretraining loop: warmup + cosine learning-rate schedule, per-step
//! pipeline (mask -> encode -> fill -> decode -> splat -> loss -> backward ->
//! update), metrics logging, and checkpointing.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::camera::{depth_to_target, min_pool_depth, CameraRig, DepthTarget};
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::dataset::{load_manifest, load_sample, DatasetSpec, Manifest};
use crate::error::{Error, Result};
use crate::loss::{depth_loss, rec_loss, total_loss, DepthLossMode, LossTerms};
use crate::lss::{build_splat_index, lift_splat, SplatIndex};
use crate::masking::{fill_mask, patchify, sample_mask, MaskPattern};
use crate::model::{decode, encode, BoundModel, ModelParams};
use crate::optim::AdamW;
use crate::rng::mix;
use crate::tensor::{Tape, Tensor, VarId};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub mask_ratio: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub depth_loss_mode: DepthLossMode,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
}

impl TrainConfig {
    pub fn from_run(run: &RunConfig) -> Self {
        TrainConfig {
            total_steps: run.train_steps,
            warmup_steps: run.train_warmup,
            base_lr: run.train_lr,
            weight_decay: run.train_weight_decay,
            alpha: run.train_alpha,
            mask_ratio: run.train_mask_ratio,
            batch_size: run.train_batch,
            seed: run.train_seed,
            betas: (0.9, 0.999),
            eps: 1e-8,
            depth_loss_mode: run.train_depth_loss_mode,
            checkpoint_interval: run.train_checkpoint_interval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // total_steps == 0 never evaluates the schedule (checkpoint-only run).
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be < total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "mask_ratio {} must be in (0, 1)",
                self.mask_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Linear warmup to base_lr, then cosine decay to 0 at total_steps.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        cfg.base_lr * step as f64 / cfg.warmup_steps as f64
    } else {
        let progress =
            (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
        cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Dataset sample preprocessed for the training pipeline.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    /// (N, h*w, 3*patch^2).
    pub patches: Tensor,
    pub depth_target: DepthTarget,
    /// (C, nx, ny).
    pub teacher: Tensor,
}

pub fn prepare_sample(sample: &crate::dataset::Sample, spec: &DatasetSpec) -> Result<PreparedSample> {
    let patches = patchify(&sample.images, spec.patch)?;
    let pooled = min_pool_depth(&sample.depth_maps, spec.patch)?;
    let depth_target = depth_to_target(&pooled, &spec.bins)?;
    Ok(PreparedSample {
        patches,
        depth_target,
        teacher: sample.teacher.clone(),
    })
}

/// Static per-run geometry shared by every step.
pub struct TrainContext {
    pub spec: DatasetSpec,
    pub rig: CameraRig,
    pub splat: SplatIndex,
    pub rows: usize,
    pub cols: usize,
}

impl TrainContext {
    pub fn new(spec: DatasetSpec, rig: CameraRig) -> Result<Self> {
        let rows = spec.height / spec.patch;
        let cols = spec.width / spec.patch;
        let frustum = crate::camera::make_frustum(rows, cols, &spec.bins, &rig, spec.patch)?;
        let splat = build_splat_index(&frustum, &spec.bev);
        Ok(TrainContext {
            spec,
            rig,
            splat,
            rows,
            cols,
        })
    }
}

/// Tape ids of the main intermediate artifacts, for dumps and diagnostics.
pub struct ForwardArtifacts {
    pub fsem: VarId,
    pub depth: VarId,
    pub depth_logits: VarId,
    pub bev: VarId,
}

/// One sample through the whole pipeline:
/// patchify -> mask -> encode -> fill -> decode -> lift-splat -> losses.
pub fn pretrain_forward(
    tape: &mut Tape,
    bound: &BoundModel,
    ctx: &TrainContext,
    sample: &PreparedSample,
    pattern: &MaskPattern,
    alpha: f64,
    mode: DepthLossMode,
) -> Result<(LossTerms, ForwardArtifacts)> {
    let patches = tape.leaf(&sample.patches);
    pretrain_forward_from_patches(
        tape,
        bound,
        ctx,
        patches,
        &sample.depth_target,
        &sample.teacher,
        pattern,
        alpha,
        mode,
    )
}

/// Same pipeline with the patch tensor already on the tape, so callers can
/// differentiate the loss with respect to the input image as well.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_forward_from_patches(
    tape: &mut Tape,
    bound: &BoundModel,
    ctx: &TrainContext,
    patches: VarId,
    depth_target: &DepthTarget,
    teacher: &Tensor,
    pattern: &MaskPattern,
    alpha: f64,
    mode: DepthLossMode,
) -> Result<(LossTerms, ForwardArtifacts)> {
    let tokens = encode(tape, bound, patches, pattern)?;
    let mask_token = bound.get("mask_token");
    let filled = fill_mask(tape, &tokens, mask_token, pattern)?;
    let out = decode(tape, bound, filled, &ctx.rig, ctx.rows, ctx.cols)?;
    let bev = lift_splat(
        tape,
        out.fsem,
        out.depth,
        &ctx.splat,
        ctx.spec.bev.nx,
        ctx.spec.bev.ny,
    )?;
    let teacher_id = tape.constant(teacher.clone());
    let rec = rec_loss(tape, bev, teacher_id)?;
    let (dep, no_valid) = depth_loss(tape, out.depth, out.depth_logits, depth_target, mode)?;
    let terms = total_loss(tape, rec, dep, alpha, no_valid)?;
    Ok((
        terms,
        ForwardArtifacts {
            fsem: out.fsem,
            depth: out.depth,
            depth_logits: out.depth_logits,
            bev,
        },
    ))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub rec: f64,
    pub depth: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// One optimizer step over a batch. Deterministic given (seed, step): the
/// mask seed derives statelessly from both.
pub fn pretrain_step(
    model: &mut ModelParams,
    opt: &mut AdamW,
    ctx: &TrainContext,
    batch: &[&PreparedSample],
    step: usize,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let step_seed = mix(cfg.seed, 0x57e9 ^ step as u64);

    let mut totals = Vec::new();
    let mut recs = 0.0;
    let mut deps = 0.0;
    let mut artifacts = Vec::new();
    for (i, sample) in batch.iter().enumerate() {
        let pattern = sample_mask(
            mix(step_seed, i as u64),
            ctx.rows,
            ctx.cols,
            ctx.spec.views,
            cfg.mask_ratio,
        )?;
        let (terms, art) = pretrain_forward(
            &mut tape,
            &bound,
            ctx,
            sample,
            &pattern,
            cfg.alpha,
            cfg.depth_loss_mode,
        )?;
        recs += terms.rec;
        deps += terms.depth;
        totals.push(terms.total_id);
        artifacts.push(art);
    }
    let mut loss = totals[0];
    for &t in &totals[1..] {
        loss = tape.add(loss, t)?;
    }
    if batch.len() > 1 {
        loss = tape.affine(loss, 1.0 / batch.len() as f64, 0.0)?;
    }
    let total_value = tape.value(loss).item();
    if !total_value.is_finite() {
        let mut diag = Vec::new();
        for (i, art) in artifacts.iter().enumerate() {
            diag.push(format!(
                "sample {i}: |fsem|={:.3e} |depth|={:.3e} |bev|={:.3e}",
                tape.value(art.fsem).norm2(),
                tape.value(art.depth).norm2(),
                tape.value(art.bev).norm2()
            ));
        }
        return Err(Error::TrainAbort {
            step,
            diagnostics: diag.join("; "),
        });
    }

    tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    let mut sq_sum = 0.0;
    for (name, grad) in tape.param_grads() {
        if let Some(g) = grad {
            sq_sum += g.data().iter().map(|v| v * v).sum::<f64>();
            grads.insert(name, g);
        }
    }
    let lr = lr_schedule(step, cfg);
    opt.step(model.named_mut(), &grads, lr);

    Ok(StepMetrics {
        step,
        lr,
        rec: recs / batch.len() as f64,
        depth: deps / batch.len() as f64,
        total: total_value,
        grad_norm: sq_sum.sqrt(),
    })
}

pub struct TrainSummary {
    pub metrics: Vec<StepMetrics>,
    pub final_checkpoint: PathBuf,
}

fn validate_against_manifest(run: &RunConfig, manifest: &Manifest) -> Result<()> {
    let spec = &manifest.spec;
    if spec.channels != run.model_dim {
        return Err(Error::Config(format!(
            "dataset teacher has {} channels but model dim is {}",
            spec.channels, run.model_dim
        )));
    }
    if spec.views != run.data_views {
        return Err(Error::Config(format!(
            "dataset has {} views but config expects {}",
            spec.views, run.data_views
        )));
    }
    if spec.patch != run.model_patch {
        return Err(Error::Config(format!(
            "dataset was built for patch {} but model uses {}",
            spec.patch, run.model_patch
        )));
    }
    Ok(())
}

/// Full pretraining run over a dataset directory. Writes metrics.jsonl
/// (deterministic), timings.jsonl (wall-clock, informational), the resolved
/// config, periodic checkpoints, and a final checkpoint.
pub fn run_pretrain(data_dir: &Path, out_dir: &Path, run: &RunConfig) -> Result<TrainSummary> {
    let cfg = TrainConfig::from_run(run);
    cfg.validate()?;
    let model_cfg = run.model_config();
    model_cfg.validate()?;

    let manifest = load_manifest(data_dir)?;
    validate_against_manifest(run, &manifest)?;
    if manifest.samples.is_empty() {
        return Err(Error::Dataset("dataset has no samples".into()));
    }

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("resolved.cfg"), run.to_text())?;

    let mut prepared = Vec::with_capacity(manifest.samples.len());
    let mut rig = None;
    for name in &manifest.samples {
        let sample = load_sample(data_dir, &manifest, name)?;
        prepared.push(prepare_sample(&sample, &manifest.spec)?);
        rig.get_or_insert(sample.rig);
    }
    let ctx = TrainContext::new(manifest.spec.clone(), rig.expect("at least one sample"))?;

    let mut model = ModelParams::init(&model_cfg, cfg.seed)?;
    let mut opt = AdamW::new(cfg.betas, cfg.eps, cfg.weight_decay);

    let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(out_dir.join("metrics.jsonl"))?);
    let mut timings_file = std::io::BufWriter::new(std::fs::File::create(out_dir.join("timings.jsonl"))?);

    let mut metrics = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let wall_start = std::time::Instant::now();
        let batch: Vec<&PreparedSample> = (0..cfg.batch_size)
            .map(|i| &prepared[(step * cfg.batch_size + i) % prepared.len()])
            .collect();
        let m = pretrain_step(&mut model, &mut opt, &ctx, &batch, step, &cfg)?;
        let wall_ms = wall_start.elapsed().as_secs_f64() * 1e3;
        serde_json::to_writer(&mut metrics_file, &m)?;
        metrics_file.write_all(b"\n")?;
        writeln!(
            timings_file,
            "{{\"step\":{},\"wall_ms\":{:.3}}}",
            step, wall_ms
        )?;
        metrics.push(m);

        if cfg.checkpoint_interval > 0
            && (step + 1) % cfg.checkpoint_interval == 0
            && step + 1 < cfg.total_steps
        {
            let ckpt = out_dir.join(format!("step_{:06}", step + 1));
            save_checkpoint(
                &ckpt,
                &model,
                Some(&opt),
                &CheckpointMeta {
                    config_hash: run.hash(),
                    step: step + 1,
                    rng_state: cfg.seed,
                    opt_step: opt.step_count,
                },
            )?;
        }
    }
    metrics_file.flush()?;
    timings_file.flush()?;

    let final_checkpoint = out_dir.join("checkpoint");
    save_checkpoint(
        &final_checkpoint,
        &model,
        Some(&opt),
        &CheckpointMeta {
            config_hash: run.hash(),
            step: cfg.total_steps,
            rng_state: cfg.seed,
            opt_step: opt.step_count,
        },
    )?;
    Ok(TrainSummary {
        metrics,
        final_checkpoint,
    })
}

/// 20-step moving average of the total loss ending at `end` (1-indexed step
/// count into `metrics`).
pub fn moving_average_total(metrics: &[StepMetrics], end: usize, window: usize) -> f64 {
    assert!(end >= window && end <= metrics.len());
    metrics[end - window..end].iter().map(|m| m.total).sum::<f64>() / window as f64
}
