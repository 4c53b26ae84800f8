//! Transfer probe standing in for downstream finetuning: a fresh 2-layer
//! head on top of the (pretrained or random) encoder, finetuned end to end
//! on binary BEV occupancy prediction over held-out scenes. Decoders and the
//! teacher are not used here.

use std::collections::BTreeMap;

use crate::config::RunConfig;
use crate::dataset::DatasetSpec;
use crate::error::Result;
use crate::loss::PROB_CLAMP;
use crate::masking::{patchify, MaskPattern};
use crate::model::{
    encode, push_block, push_block_mut, push_linear, push_linear_mut, BlockP, BoundModel, LinearP,
    ModelConfig, ModelParams,
};
use crate::optim::AdamW;
use crate::rng::{mix, Rng};
use crate::scene::{generate_scene, occupancy_target, render_views};
use crate::tensor::{Tape, Tensor, VarId};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub seed: u64,
    pub head_hidden: usize,
    /// Occupancy grid resolution (cells per side); the probe task may be
    /// coarser than the teacher grid.
    pub cells: usize,
    /// Scenes averaged per optimizer step.
    pub batch: usize,
}

impl ProbeConfig {
    pub fn from_run(run: &RunConfig) -> Self {
        ProbeConfig {
            steps: run.probe_steps,
            lr: run.probe_lr,
            weight_decay: 0.01,
            train_scenes: run.probe_train_scenes,
            eval_scenes: run.probe_eval_scenes,
            seed: run.probe_seed,
            head_hidden: run.probe_head_hidden,
            cells: run.probe_cells,
            batch: run.probe_batch,
        }
    }
}

/// Encoder weights plus the probe head; everything here is finetuned.
pub struct ProbeParams {
    cfg: ModelConfig,
    embed: LinearP,
    enc_blocks: Vec<BlockP>,
    fc1: LinearP,
    fc2: LinearP,
}

impl ProbeParams {
    /// Head dimensions derive from the rig/token geometry and the BEV grid.
    /// Tokens are pooled over the vertical axis only, keeping one pooled
    /// feature per (view, column) so azimuthal structure survives into the
    /// projection. `hidden` = 0 collapses the head to a single linear map.
    fn head(
        rng: &mut Rng,
        cfg: &ModelConfig,
        cols: usize,
        hidden: usize,
        cells: usize,
    ) -> (LinearP, LinearP) {
        let pooled = cfg.views * cols * cfg.dim;
        if hidden == 0 {
            return (
                LinearP {
                    w: Tensor::randn(rng, &[pooled, cells], (2.0 / (pooled + cells) as f64).sqrt()),
                    b: Tensor::zeros(&[cells]),
                },
                LinearP {
                    w: Tensor::zeros(&[0, 0]),
                    b: Tensor::zeros(&[0]),
                },
            );
        }
        (
            LinearP {
                w: Tensor::randn(rng, &[pooled, hidden], (2.0 / (pooled + hidden) as f64).sqrt()),
                b: Tensor::zeros(&[hidden]),
            },
            LinearP {
                w: Tensor::randn(rng, &[hidden, cells], (2.0 / (hidden + cells) as f64).sqrt()),
                b: Tensor::zeros(&[cells]),
            },
        )
    }

    /// Probe over a pretrained encoder: decoders are discarded, only the
    /// embed layer and encoder blocks carry over.
    pub fn from_pretrained(
        model: &ModelParams,
        head_seed: u64,
        cols: usize,
        hidden: usize,
        cells: usize,
    ) -> Self {
        let mut rng = Rng::new(mix(head_seed, 0x4ead));
        let (fc1, fc2) = Self::head(&mut rng, &model.cfg, cols, hidden, cells);
        ProbeParams {
            cfg: model.cfg.clone(),
            embed: model.embed.clone(),
            enc_blocks: model.enc_blocks.clone(),
            fc1,
            fc2,
        }
    }

    /// Control arm: the same architecture with a freshly initialized encoder.
    pub fn random(
        cfg: &ModelConfig,
        encoder_seed: u64,
        head_seed: u64,
        cols: usize,
        hidden: usize,
        cells: usize,
    ) -> Result<Self> {
        let fresh = ModelParams::init(cfg, encoder_seed)?;
        Ok(Self::from_pretrained(&fresh, head_seed, cols, hidden, cells))
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        push_linear(&mut out, "embed", &self.embed);
        for (i, b) in self.enc_blocks.iter().enumerate() {
            push_block(&mut out, &format!("enc.{i}"), b);
        }
        push_linear(&mut out, "probe.fc1", &self.fc1);
        push_linear(&mut out, "probe.fc2", &self.fc2);
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        push_linear_mut(&mut out, "embed", &mut self.embed);
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            push_block_mut(&mut out, &format!("enc.{i}"), b);
        }
        push_linear_mut(&mut out, "probe.fc1", &mut self.fc1);
        push_linear_mut(&mut out, "probe.fc2", &mut self.fc2);
        out
    }

    fn bind(&self, tape: &mut Tape) -> BoundModel {
        let mut ids = BTreeMap::new();
        for (name, tensor) in self.named() {
            ids.insert(name.clone(), tape.param(&name, tensor));
        }
        BoundModel::from_map(self.cfg.clone(), ids)
    }
}

/// One probe scene: full-resolution patches and the binary occupancy target.
pub struct ProbeScene {
    pub patches: Tensor,
    /// (1, nx*ny) of {0, 1}.
    pub occupancy: Tensor,
}

fn build_scene(seed: u64, spec: &DatasetSpec, grid: &crate::lss::BevGridSpec) -> Result<ProbeScene> {
    let scene = generate_scene(seed, &spec.scene)?;
    let rig = crate::camera::CameraRig::ring(spec.views, spec.width, spec.height)?;
    let rendered = render_views(&scene, &rig, spec.scene.num_classes);
    let patches = patchify(&rendered.images, spec.patch)?;
    let occ = occupancy_target(&scene, grid);
    Ok(ProbeScene {
        patches,
        occupancy: Tensor::new(vec![1, grid.num_cells()], occ.into_data())?,
    })
}

/// The probe's occupancy grid spans the same extent as the teacher grid at
/// its own resolution.
pub fn probe_grid(spec: &DatasetSpec, cells: usize) -> crate::lss::BevGridSpec {
    crate::lss::BevGridSpec {
        nx: cells,
        ny: cells,
        ..spec.bev
    }
}

/// Held-out streams, disjoint from the pretraining dataset's scene seeds.
pub fn probe_train_scenes(
    spec: &DatasetSpec,
    grid: &crate::lss::BevGridSpec,
    count: usize,
) -> Result<Vec<ProbeScene>> {
    (0..count)
        .map(|i| build_scene(mix(mix(spec.seed, 0x9b0be), i as u64), spec, grid))
        .collect()
}

pub fn probe_eval_scenes(
    spec: &DatasetSpec,
    grid: &crate::lss::BevGridSpec,
    count: usize,
) -> Result<Vec<ProbeScene>> {
    (0..count)
        .map(|i| build_scene(mix(mix(spec.seed, 0x9e7a1), i as u64), spec, grid))
        .collect()
}

/// encode (all tokens visible) -> mean-pool over the vertical axis ->
/// normalize -> 2-layer head -> per-cell occupancy logits. The normalization
/// equalizes feature scale between differently initialized encoders; both
/// arms get the identical head.
fn probe_logits(
    tape: &mut Tape,
    bound: &BoundModel,
    scene: &ProbeScene,
    rows: usize,
    cols: usize,
) -> Result<VarId> {
    let pattern = MaskPattern::none(rows, cols, bound.cfg.views);
    let patches = tape.leaf(&scene.patches);
    let tokens = encode(tape, bound, patches, &pattern)?;
    let n = bound.cfg.views;
    let dim = bound.cfg.dim;
    let by_row = tape.reshape(tokens.tokens, &[n, rows, cols * dim])?;
    let pooled = tape.sum_axis(by_row, 1)?;
    let pooled = tape.reshape(pooled, &[n * cols, dim])?;
    let pooled = tape.layer_norm(pooled, crate::model::LN_EPS)?;
    let flat = tape.reshape(pooled, &[1, n * cols * dim])?;
    if tape.value(bound.get("probe.fc2.b")).numel() == 0 {
        // Single learned linear map straight to the BEV cells.
        return crate::model::linear(tape, flat, bound, "probe.fc1");
    }
    let h = crate::model::linear(tape, flat, bound, "probe.fc1")?;
    let h = tape.gelu(h)?;
    crate::model::linear(tape, h, bound, "probe.fc2")
}

fn occupancy_bce(tape: &mut Tape, logits: VarId, target: &Tensor) -> Result<VarId> {
    let p = tape.sigmoid(logits)?;
    let p = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let t = tape.constant(target.clone());
    let one_minus_t = tape.affine(t, -1.0, 1.0)?;
    let ln_p = tape.ln(p)?;
    let one_minus_p = tape.affine(p, -1.0, 1.0)?;
    let ln_1mp = tape.ln(one_minus_p)?;
    let pos = tape.mul(t, ln_p)?;
    let neg = tape.mul(one_minus_t, ln_1mp)?;
    let s = tape.add(pos, neg)?;
    let bce = tape.affine(s, -1.0, 0.0)?;
    tape.mean(bce)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOutcome {
    pub eval_loss: f64,
    pub iou: f64,
}

fn evaluate(
    params: &ProbeParams,
    scenes: &[ProbeScene],
    rows: usize,
    cols: usize,
) -> Result<ProbeOutcome> {
    let mut loss_sum = 0.0;
    let mut inter = 0.0;
    let mut union = 0.0;
    for scene in scenes {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let logits = probe_logits(&mut tape, &bound, scene, rows, cols)?;
        let loss = occupancy_bce(&mut tape, logits, &scene.occupancy)?;
        loss_sum += tape.value(loss).item();
        let probs = tape.sigmoid(logits)?;
        for (p, t) in tape
            .value(probs)
            .data()
            .iter()
            .zip(scene.occupancy.data())
        {
            let pred = *p > 0.5;
            let truth = *t > 0.5;
            if pred && truth {
                inter += 1.0;
            }
            if pred || truth {
                union += 1.0;
            }
        }
    }
    Ok(ProbeOutcome {
        eval_loss: loss_sum / scenes.len() as f64,
        iou: if union == 0.0 { 1.0 } else { inter / union },
    })
}

/// Finetunes all weights (encoder + head) for the configured budget and
/// evaluates occupancy cross-entropy and thresholded IoU on held-out scenes.
/// With `steps` = 0 this reports the head-random-init evaluation unchanged.
pub fn probe_finetune(
    mut params: ProbeParams,
    spec: &DatasetSpec,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    let rows = spec.height / spec.patch;
    let cols = spec.width / spec.patch;
    let grid = probe_grid(spec, cfg.cells);
    let train = probe_train_scenes(spec, &grid, cfg.train_scenes)?;
    let eval = probe_eval_scenes(spec, &grid, cfg.eval_scenes)?;

    let mut opt = AdamW::new((0.9, 0.999), 1e-8, cfg.weight_decay);
    let warmup = (cfg.steps / 10).min(50).max(1);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        // Batched update: averaging the loss over several scenes damps
        // trajectory noise identically in both arms.
        let mut losses = Vec::with_capacity(cfg.batch);
        for i in 0..cfg.batch {
            let scene = &train[(step * cfg.batch + i) % train.len()];
            let logits = probe_logits(&mut tape, &bound, scene, rows, cols)?;
            losses.push(occupancy_bce(&mut tape, logits, &scene.occupancy)?);
        }
        let mut loss = losses[0];
        for &l in &losses[1..] {
            loss = tape.add(loss, l)?;
        }
        if cfg.batch > 1 {
            loss = tape.affine(loss, 1.0 / cfg.batch as f64, 0.0)?;
        }
        tape.backward(loss)?;
        let mut grads = BTreeMap::new();
        for (name, grad) in tape.param_grads() {
            if let Some(g) = grad {
                grads.insert(name, g);
            }
        }
        // Short linear warmup keeps the first adaptive steps from blowing up;
        // both arms see the identical schedule.
        let lr = if step < warmup {
            cfg.lr * (step + 1) as f64 / warmup as f64
        } else {
            cfg.lr
        };
        opt.step(params.named_mut(), &grads, lr);
    }
    evaluate(&params, &eval, rows, cols)
}

/// Pretrained-vs-random comparison with identical budgets: for each seed the
/// two arms share the head initialization and the probe data; only the
/// encoder weights differ.
pub fn probe_comparison(
    pretrained: &ModelParams,
    spec: &DatasetSpec,
    cfg: &ProbeConfig,
    seeds: &[u64],
) -> Result<Vec<(ProbeOutcome, ProbeOutcome)>> {
    let cells = probe_grid(spec, cfg.cells).num_cells();
    let cols = spec.width / spec.patch;
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let head_seed = mix(cfg.seed, seed);
        let pre =
            ProbeParams::from_pretrained(pretrained, head_seed, cols, cfg.head_hidden, cells);
        let ctl = ProbeParams::random(
            &pretrained.cfg,
            mix(head_seed, 0x11aa),
            head_seed,
            cols,
            cfg.head_hidden,
            cells,
        )?;
        let pre_out = probe_finetune(pre, spec, cfg)?;
        let ctl_out = probe_finetune(ctl, spec, cfg)?;
        out.push((pre_out, ctl_out));
    }
    Ok(out)
}
