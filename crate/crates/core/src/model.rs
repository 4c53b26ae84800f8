//! Encoder over visible tokens, the two decoupled decoders with a shared
//! first half, the Cross-View Attention block, and the camera-aware
//! squeeze-excitation gate.
//!
//! All forward paths run on a `Tape`; parameters live in `ModelParams` and
//! are bound onto the tape once per step by name.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::camera::CameraRig;
use crate::error::{Error, Result};
use crate::masking::{MaskPattern, TokenSet};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, VarId};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Token dimension C (also the BEV channel count).
    pub dim: usize,
    pub heads: usize,
    pub enc_depth: usize,
    /// Total decoder pipeline depth (shared half + branch half).
    pub dec_depth: usize,
    pub patch: usize,
    /// Depth bins B predicted by the geometry head.
    pub bins: usize,
    pub mlp_ratio: usize,
    /// View count N; sizes the learned view-index embedding in CVA.
    pub views: usize,
    /// 1-indexed positions in the decoder pipeline whose block is a CVA
    /// block. Positions in the branch half are instantiated per branch with
    /// untied weights.
    pub cva_positions: Vec<usize>,
    pub camera_gate: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            heads: 4,
            enc_depth: 4,
            dec_depth: 8,
            patch: 16,
            bins: 16,
            mlp_ratio: 4,
            views: 6,
            cva_positions: vec![2, 6],
            camera_gate: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Model(msg));
        if self.dim == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} must be divisible by heads {}", self.dim, self.heads));
        }
        if self.dim % 4 != 0 {
            return fail(format!("dim {} must be divisible by 4 for 2D position encoding", self.dim));
        }
        if self.dec_depth < 2 || self.dec_depth % 2 != 0 {
            return fail(format!("dec_depth {} must be even and >= 2", self.dec_depth));
        }
        if let Some(&p) = self.cva_positions.iter().find(|&&p| p < 1 || p > self.dec_depth) {
            return fail(format!("cva position {p} outside 1..={}", self.dec_depth));
        }
        if self.views == 0 || self.patch == 0 || self.bins == 0 || self.mlp_ratio == 0 {
            return fail("views, patch, bins, mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn shared_depth(&self) -> usize {
        self.dec_depth / 2
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch * self.patch
    }
}

// ── parameters ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LinearP {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearP {
    fn init(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        LinearP {
            w: Tensor::randn(rng, &[fan_in, fan_out], std),
            b: Tensor::zeros(&[fan_out]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockP {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub q: LinearP,
    pub k: LinearP,
    pub v: LinearP,
    pub o: LinearP,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub fc1: LinearP,
    pub fc2: LinearP,
}

impl BlockP {
    fn init(rng: &mut Rng, dim: usize, mlp_ratio: usize) -> Self {
        BlockP {
            ln1_g: Tensor::ones(&[dim]),
            ln1_b: Tensor::zeros(&[dim]),
            q: LinearP::init(rng, dim, dim),
            k: LinearP::init(rng, dim, dim),
            v: LinearP::init(rng, dim, dim),
            o: LinearP::init(rng, dim, dim),
            ln2_g: Tensor::ones(&[dim]),
            ln2_b: Tensor::zeros(&[dim]),
            fc1: LinearP::init(rng, dim, dim * mlp_ratio),
            fc2: LinearP::init(rng, dim * mlp_ratio, dim),
        }
    }
}

#[derive(Debug, Clone)]
pub enum DecBlockP {
    Std(BlockP),
    Cva { view_emb: Tensor, block: BlockP },
}

#[derive(Debug, Clone)]
pub struct GateP {
    pub fc1: LinearP,
    pub fc2: LinearP,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub embed: LinearP,
    pub enc_blocks: Vec<BlockP>,
    pub mask_token: Tensor,
    pub dec_shared: Vec<DecBlockP>,
    pub dec_sem: Vec<DecBlockP>,
    pub dec_geo: Vec<DecBlockP>,
    pub sem_head: LinearP,
    pub geo_head: LinearP,
    pub gate: GateP,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(crate::rng::mix(seed, 0x90de1));
        let dec_block = |rng: &mut Rng, position: usize| -> DecBlockP {
            if cfg.cva_positions.contains(&position) {
                DecBlockP::Cva {
                    view_emb: Tensor::randn(rng, &[cfg.views, cfg.dim], 0.02),
                    block: BlockP::init(rng, cfg.dim, cfg.mlp_ratio),
                }
            } else {
                DecBlockP::Std(BlockP::init(rng, cfg.dim, cfg.mlp_ratio))
            }
        };
        let shared = cfg.shared_depth();
        Ok(ModelParams {
            cfg: cfg.clone(),
            embed: LinearP::init(&mut rng, cfg.patch_len(), cfg.dim),
            enc_blocks: (0..cfg.enc_depth)
                .map(|_| BlockP::init(&mut rng, cfg.dim, cfg.mlp_ratio))
                .collect(),
            mask_token: Tensor::randn(&mut rng, &[1, cfg.dim], 0.02),
            dec_shared: (1..=shared).map(|p| dec_block(&mut rng, p)).collect(),
            dec_sem: (shared + 1..=cfg.dec_depth)
                .map(|p| dec_block(&mut rng, p))
                .collect(),
            dec_geo: (shared + 1..=cfg.dec_depth)
                .map(|p| dec_block(&mut rng, p))
                .collect(),
            sem_head: LinearP::init(&mut rng, cfg.dim, cfg.dim),
            geo_head: LinearP::init(&mut rng, cfg.dim, cfg.bins),
            gate: GateP {
                fc1: LinearP::init(&mut rng, 16, (cfg.dim / 4).max(1)),
                fc2: LinearP::init(&mut rng, (cfg.dim / 4).max(1), cfg.dim),
            },
        })
    }

    /// Deterministically ordered (name, tensor) pairs covering every
    /// parameter; checkpointing, binding, and the optimizer all share this.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        push_linear(&mut out, "embed", &self.embed);
        for (i, b) in self.enc_blocks.iter().enumerate() {
            push_block(&mut out, &format!("enc.{i}"), b);
        }
        out.push(("mask_token".to_string(), &self.mask_token));
        for (stack, name) in [
            (&self.dec_shared, "dec.shared"),
            (&self.dec_sem, "dec.sem"),
            (&self.dec_geo, "dec.geo"),
        ] {
            for (i, b) in stack.iter().enumerate() {
                match b {
                    DecBlockP::Std(b) => push_block(&mut out, &format!("{name}.{i}"), b),
                    DecBlockP::Cva { view_emb, block } => {
                        out.push((format!("{name}.{i}.view_emb"), view_emb));
                        push_block(&mut out, &format!("{name}.{i}"), block);
                    }
                }
            }
        }
        push_linear(&mut out, "sem_head", &self.sem_head);
        push_linear(&mut out, "geo_head", &self.geo_head);
        push_linear(&mut out, "gate.fc1", &self.gate.fc1);
        push_linear(&mut out, "gate.fc2", &self.gate.fc2);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        push_linear_mut(&mut out, "embed", &mut self.embed);
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            push_block_mut(&mut out, &format!("enc.{i}"), b);
        }
        out.push(("mask_token".to_string(), &mut self.mask_token));
        for (stack, name) in [
            (&mut self.dec_shared, "dec.shared"),
            (&mut self.dec_sem, "dec.sem"),
            (&mut self.dec_geo, "dec.geo"),
        ] {
            for (i, b) in stack.iter_mut().enumerate() {
                match b {
                    DecBlockP::Std(b) => push_block_mut(&mut out, &format!("{name}.{i}"), b),
                    DecBlockP::Cva { view_emb, block } => {
                        out.push((format!("{name}.{i}.view_emb"), view_emb));
                        push_block_mut(&mut out, &format!("{name}.{i}"), block);
                    }
                }
            }
        }
        push_linear_mut(&mut out, "sem_head", &mut self.sem_head);
        push_linear_mut(&mut out, "geo_head", &mut self.geo_head);
        push_linear_mut(&mut out, "gate.fc1", &mut self.gate.fc1);
        push_linear_mut(&mut out, "gate.fc2", &mut self.gate.fc2);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every parameter on the tape; forward code resolves them by
    /// name through the returned binding.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let mut ids = BTreeMap::new();
        for (name, tensor) in self.named() {
            let id = tape.param(&name, tensor);
            ids.insert(name, id);
        }
        BoundModel {
            cfg: self.cfg.clone(),
            ids,
        }
    }
}

pub(crate) fn push_linear<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, l: &'a LinearP) {
    out.push((format!("{prefix}.w"), &l.w));
    out.push((format!("{prefix}.b"), &l.b));
}

pub(crate) fn push_block<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, b: &'a BlockP) {
    out.push((format!("{prefix}.ln1.g"), &b.ln1_g));
    out.push((format!("{prefix}.ln1.b"), &b.ln1_b));
    push_linear(out, &format!("{prefix}.attn.q"), &b.q);
    push_linear(out, &format!("{prefix}.attn.k"), &b.k);
    push_linear(out, &format!("{prefix}.attn.v"), &b.v);
    push_linear(out, &format!("{prefix}.attn.o"), &b.o);
    out.push((format!("{prefix}.ln2.g"), &b.ln2_g));
    out.push((format!("{prefix}.ln2.b"), &b.ln2_b));
    push_linear(out, &format!("{prefix}.mlp.fc1"), &b.fc1);
    push_linear(out, &format!("{prefix}.mlp.fc2"), &b.fc2);
}

pub(crate) fn push_linear_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, l: &'a mut LinearP) {
    out.push((format!("{prefix}.w"), &mut l.w));
    out.push((format!("{prefix}.b"), &mut l.b));
}

pub(crate) fn push_block_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, b: &'a mut BlockP) {
    out.push((format!("{prefix}.ln1.g"), &mut b.ln1_g));
    out.push((format!("{prefix}.ln1.b"), &mut b.ln1_b));
    push_linear_mut(out, &format!("{prefix}.attn.q"), &mut b.q);
    push_linear_mut(out, &format!("{prefix}.attn.k"), &mut b.k);
    push_linear_mut(out, &format!("{prefix}.attn.v"), &mut b.v);
    push_linear_mut(out, &format!("{prefix}.attn.o"), &mut b.o);
    out.push((format!("{prefix}.ln2.g"), &mut b.ln2_g));
    out.push((format!("{prefix}.ln2.b"), &mut b.ln2_b));
    push_linear_mut(out, &format!("{prefix}.mlp.fc1"), &mut b.fc1);
    push_linear_mut(out, &format!("{prefix}.mlp.fc2"), &mut b.fc2);
}

/// Tape-bound parameters, resolved by name.
pub struct BoundModel {
    pub cfg: ModelConfig,
    ids: BTreeMap<String, VarId>,
}

impl BoundModel {
    /// Binding over an explicit subset of parameters (the transfer probe
    /// binds the encoder only).
    pub(crate) fn from_map(cfg: ModelConfig, ids: BTreeMap<String, VarId>) -> Self {
        BoundModel { cfg, ids }
    }

    pub fn get(&self, name: &str) -> VarId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.ids.contains_key(name)
    }
}

// ── position encoding ───────────────────────────────────────────────────

/// 2D sinusoidal position table (rows*cols, dim): first half encodes the row
/// index, second half the column index, each as interleaved sin/cos.
pub fn pos_encoding_2d(rows: usize, cols: usize, dim: usize) -> Tensor {
    assert_eq!(dim % 4, 0, "dim must be divisible by 4");
    let quarter = dim / 4;
    let mut out = vec![0.0; rows * cols * dim];
    for i in 0..rows {
        for j in 0..cols {
            let t = (i * cols + j) * dim;
            for k in 0..quarter {
                let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                out[t + 2 * k] = (i as f64 * omega).sin();
                out[t + 2 * k + 1] = (i as f64 * omega).cos();
                out[t + dim / 2 + 2 * k] = (j as f64 * omega).sin();
                out[t + dim / 2 + 2 * k + 1] = (j as f64 * omega).cos();
            }
        }
    }
    Tensor::new(vec![rows * cols, dim], out).expect("shape")
}

// ── forward helpers ─────────────────────────────────────────────────────

pub fn linear(tape: &mut Tape, x: VarId, bound: &BoundModel, prefix: &str) -> Result<VarId> {
    let w = bound.get(&format!("{prefix}.w"));
    let b = bound.get(&format!("{prefix}.b"));
    let h = tape.matmul(x, w)?;
    tape.add(h, b)
}

fn layer_norm_affine(tape: &mut Tape, x: VarId, bound: &BoundModel, prefix: &str) -> Result<VarId> {
    let g = bound.get(&format!("{prefix}.g"));
    let b = bound.get(&format!("{prefix}.b"));
    let n = tape.layer_norm(x, LN_EPS)?;
    let scaled = tape.mul(n, g)?;
    tape.add(scaled, b)
}

/// Multi-head self-attention over (groups, tokens, dim).
fn attention(tape: &mut Tape, x: VarId, bound: &BoundModel, prefix: &str) -> Result<VarId> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::BadShape {
            op: "attention",
            shape,
            reason: "want (groups, tokens, dim)".into(),
        });
    }
    let (g, l, c) = (shape[0], shape[1], shape[2]);
    let heads = bound.cfg.heads;
    let dh = c / heads;

    let split = |tape: &mut Tape, y: VarId| -> Result<VarId> {
        let y = tape.reshape(y, &[g, l, heads, dh])?;
        let y = tape.transpose(y, 1, 2)?;
        tape.reshape(y, &[g * heads, l, dh])
    };
    let q = linear(tape, x, bound, &format!("{prefix}.q"))?;
    let k = linear(tape, x, bound, &format!("{prefix}.k"))?;
    let v = linear(tape, x, bound, &format!("{prefix}.v"))?;
    let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);

    let kt = tape.transpose(k, 1, 2)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.affine(scores, 1.0 / (dh as f64).sqrt(), 0.0)?;
    let attn = tape.softmax(scaled, 2)?;
    let ctx = tape.matmul(attn, v)?;

    let ctx = tape.reshape(ctx, &[g, heads, l, dh])?;
    let ctx = tape.transpose(ctx, 1, 2)?;
    let merged = tape.reshape(ctx, &[g, l, c])?;
    linear(tape, merged, bound, &format!("{prefix}.o"))
}

fn mlp(tape: &mut Tape, x: VarId, bound: &BoundModel, prefix: &str) -> Result<VarId> {
    let h = linear(tape, x, bound, &format!("{prefix}.fc1"))?;
    let h = tape.gelu(h)?;
    linear(tape, h, bound, &format!("{prefix}.fc2"))
}

/// Pre-norm transformer block: x + attn(ln1(x)), then x + mlp(ln2(x)).
pub fn block_forward(tape: &mut Tape, x: VarId, bound: &BoundModel, prefix: &str) -> Result<VarId> {
    let n1 = layer_norm_affine(tape, x, bound, &format!("{prefix}.ln1"))?;
    let a = attention(tape, n1, bound, &format!("{prefix}.attn"))?;
    let x = tape.add(x, a)?;
    let n2 = layer_norm_affine(tape, x, bound, &format!("{prefix}.ln2"))?;
    let m = mlp(tape, n2, bound, &format!("{prefix}.mlp"))?;
    tape.add(x, m)
}

/// Cross-view attention: tokens of all views sharing a row index form one
/// group of N*w tokens; a learned view-index embedding is added and one
/// attention + MLP block runs inside each group. No token sees outside its
/// row group.
pub fn cva_forward(
    tape: &mut Tape,
    x: VarId,
    bound: &BoundModel,
    prefix: &str,
    rows: usize,
    cols: usize,
) -> Result<VarId> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[1] != rows * cols {
        return Err(Error::BadShape {
            op: "cva",
            shape,
            reason: format!("want (views, {}, dim)", rows * cols),
        });
    }
    let (n, hw, c) = (shape[0], shape[1], shape[2]);

    // Group-major permutation: row i collects (view, col) in view-major order.
    let mut perm = Vec::with_capacity(n * hw);
    let mut view_of_token = Vec::with_capacity(n * cols);
    for i in 0..rows {
        for view in 0..n {
            for j in 0..cols {
                perm.push(view * hw + i * cols + j);
            }
        }
    }
    for view in 0..n {
        for _ in 0..cols {
            view_of_token.push(view);
        }
    }

    let flat = tape.reshape(x, &[n * hw, c])?;
    let grouped = tape.gather(flat, Arc::new(perm.clone()))?;
    let grouped = tape.reshape(grouped, &[rows, n * cols, c])?;

    let view_emb = bound.get(&format!("{prefix}.view_emb"));
    let emb_rows = tape.gather(view_emb, Arc::new(view_of_token))?;
    let grouped = tape.add(grouped, emb_rows)?;

    let out = block_forward(tape, grouped, bound, prefix)?;

    let out_flat = tape.reshape(out, &[n * hw, c])?;
    let restored = tape.scatter_add(n * hw, Arc::new(perm), out_flat)?;
    tape.reshape(restored, &[n, hw, c])
}

/// Per-view channel gate conditioned on that view's camera parameters:
/// 16-vector -> linear -> GELU -> linear -> sigmoid, multiplied onto every
/// token of the view.
pub fn camera_gate(
    tape: &mut Tape,
    tokens: VarId,
    rig: &CameraRig,
    bound: &BoundModel,
) -> Result<VarId> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 3 || shape[0] != rig.num_views() {
        return Err(Error::Model(format!(
            "camera_gate: tokens {shape:?} vs rig with {} views",
            rig.num_views()
        )));
    }
    let (n, hw, c) = (shape[0], shape[1], shape[2]);
    let mut cam = Vec::with_capacity(n * 16);
    for view in 0..n {
        cam.extend_from_slice(&rig.param_vector(view));
    }
    let cam = tape.constant(Tensor::new(vec![n, 16], cam)?);
    let h = linear(tape, cam, bound, "gate.fc1")?;
    let h = tape.gelu(h)?;
    let h = linear(tape, h, bound, "gate.fc2")?;
    let gate = tape.sigmoid(h)?;

    // (N, C) -> (N, hw, C) by a ones column per view.
    let gate = tape.reshape(gate, &[n, 1, c])?;
    let ones = tape.constant(Tensor::ones(&[n, hw, 1]));
    let gate_full = tape.matmul(ones, gate)?;
    tape.mul(tokens, gate_full)
}

// ── encoder / decoder ───────────────────────────────────────────────────

/// Embeds visible patches, adds per-view 2D sinusoidal positions, and runs
/// the per-view encoder stack. No cross-view mixing happens here.
pub fn encode(
    tape: &mut Tape,
    bound: &BoundModel,
    patches: VarId,
    pattern: &MaskPattern,
) -> Result<TokenSet> {
    let shape = tape.shape(patches).to_vec();
    let (n, hw) = (pattern.num_views, pattern.rows * pattern.cols);
    let plen = bound.cfg.patch_len();
    if shape != [n, hw, plen] {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: shape,
            rhs: vec![n, hw, plen],
        });
    }
    let positions: Vec<Vec<usize>> = (0..n).map(|v| pattern.visible_positions(v)).collect();
    let l_vis = pattern.visible_count_per_view();

    let mut flat_idx = Vec::with_capacity(n * l_vis);
    let mut pos_idx = Vec::with_capacity(n * l_vis);
    for (view, ps) in positions.iter().enumerate() {
        flat_idx.extend(ps.iter().map(|p| view * hw + p));
        pos_idx.extend(ps.iter().copied());
    }

    let flat = tape.reshape(patches, &[n * hw, plen])?;
    let vis = tape.gather(flat, Arc::new(flat_idx))?;
    let vis = tape.reshape(vis, &[n, l_vis, plen])?;
    let mut x = linear(tape, vis, bound, "embed")?;

    let pos_table = tape.constant(pos_encoding_2d(pattern.rows, pattern.cols, bound.cfg.dim));
    let pos = tape.gather(pos_table, Arc::new(pos_idx))?;
    let pos = tape.reshape(pos, &[n, l_vis, bound.cfg.dim])?;
    x = tape.add(x, pos)?;

    for i in 0..bound.cfg.enc_depth {
        x = block_forward(tape, x, bound, &format!("enc.{i}"))?;
    }
    Ok(TokenSet {
        tokens: x,
        positions,
    })
}

/// Decoder outputs: dense semantic features and the per-pixel categorical
/// depth distribution, both in token-major layout.
pub struct DecodeOut {
    /// (N, h*w, C).
    pub fsem: VarId,
    /// (N, h*w, B) raw logits.
    pub depth_logits: VarId,
    /// (N, h*w, B) softmax probabilities over bins.
    pub depth: VarId,
}

/// Runs the shared half, then the semantic branch and the camera-gated
/// geometry branch. Decoder positions whose index is listed in
/// `cva_positions` use the CVA block.
pub fn decode(
    tape: &mut Tape,
    bound: &BoundModel,
    filled: VarId,
    rig: &CameraRig,
    rows: usize,
    cols: usize,
) -> Result<DecodeOut> {
    let cfg = &bound.cfg;
    let shape = tape.shape(filled).to_vec();
    if shape.len() != 3 || shape[0] != rig.num_views() {
        return Err(Error::Model(format!(
            "decode: filled tokens {shape:?} vs rig with {} views",
            rig.num_views()
        )));
    }
    if shape[0] != cfg.views {
        return Err(Error::Model(format!(
            "decode: rig has {} views but model was sized for {}",
            shape[0], cfg.views
        )));
    }
    let shared = cfg.shared_depth();

    // Decoder position table: per-view 2D positions, added after fill.
    let pos_table = pos_encoding_2d(rows, cols, cfg.dim);
    let pos = tape.constant(pos_table);
    let mut x = tape.add(filled, pos)?;

    let step = |tape: &mut Tape, x: VarId, name: String| -> Result<VarId> {
        if bound.has(&format!("{name}.view_emb")) {
            cva_forward(tape, x, bound, &name, rows, cols)
        } else {
            block_forward(tape, x, bound, &name)
        }
    };

    for i in 0..shared {
        x = step(tape, x, format!("dec.shared.{i}"))?;
    }

    let mut sem = x;
    for i in 0..cfg.dec_depth - shared {
        sem = step(tape, sem, format!("dec.sem.{i}"))?;
    }
    let fsem = linear(tape, sem, bound, "sem_head")?;

    let mut geo = if cfg.camera_gate {
        camera_gate(tape, x, rig, bound)?
    } else {
        x
    };
    for i in 0..cfg.dec_depth - shared {
        geo = step(tape, geo, format!("dec.geo.{i}"))?;
    }
    let depth_logits = linear(tape, geo, bound, "geo_head")?;
    let depth = tape.softmax(depth_logits, 2)?;

    Ok(DecodeOut {
        fsem,
        depth_logits,
        depth,
    })
}

/// (N, h*w, C) -> external (N, C, h, w) layout.
pub fn to_nchw(tape: &mut Tape, x: VarId, rows: usize, cols: usize) -> Result<VarId> {
    let shape = tape.shape(x).to_vec();
    let (n, c) = (shape[0], shape[2]);
    let t = tape.transpose(x, 1, 2)?;
    tape.reshape(t, &[n, c, rows, cols])
}

// ── counted attention cost ──────────────────────────────────────────────

/// FLOPs of the quadratic attention-matrix work (QK^T and attn*V) for
/// `groups` independent groups of `group_size` tokens at width `dim`.
pub fn attention_matrix_flops(groups: usize, group_size: usize, dim: usize) -> u64 {
    4 * groups as u64 * (group_size as u64).pow(2) * dim as u64
}

pub fn cva_flops(rows: usize, cols: usize, views: usize, dim: usize) -> u64 {
    attention_matrix_flops(rows, views * cols, dim)
}

pub fn global_attention_flops(rows: usize, cols: usize, views: usize, dim: usize) -> u64 {
    attention_matrix_flops(1, views * rows * cols, dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::sample_mask;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            dim: 8,
            heads: 2,
            enc_depth: 1,
            dec_depth: 4,
            patch: 4,
            bins: 4,
            mlp_ratio: 2,
            views: 2,
            cva_positions: vec![1, 3],
            camera_gate: true,
        }
    }

    #[test]
    fn named_and_named_mut_agree() {
        let mut params = ModelParams::init(&ModelConfig::default(), 0).unwrap();
        let names: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
        let names_mut: Vec<String> = params.named_mut().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, names_mut);
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len(), "duplicate parameter names");
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ModelParams::init(&ModelConfig::default(), 3).unwrap();
        let b = ModelParams::init(&ModelConfig::default(), 3).unwrap();
        for ((na, ta), (nb, tb)) in a.named().iter().zip(b.named().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn depth_zero_encoder_is_identity_on_embedded_tokens() {
        let cfg = ModelConfig {
            enc_depth: 0,
            ..tiny_cfg()
        };
        let params = ModelParams::init(&cfg, 1).unwrap();
        let mut rng = Rng::new(2);
        let images = Tensor::rand_uniform(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
        let patches = crate::masking::patchify(&images, 4).unwrap();
        let pattern = sample_mask(0, 2, 2, 2, 0.5).unwrap();

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let p = tape.leaf(&patches);
        let tokens = encode(&mut tape, &bound, p, &pattern).unwrap();

        // Reproduce embed + position by hand for one visible token.
        let view = 0;
        let pos0 = pattern.visible_positions(view)[0];
        let got = tape.value(tokens.tokens);
        let pe = pos_encoding_2d(2, 2, cfg.dim);
        for c in 0..cfg.dim {
            let mut expect = params.embed.b.data()[c];
            for k in 0..cfg.patch_len() {
                expect += patches.at(&[view, pos0, k]) * params.embed.w.at(&[k, c]);
            }
            expect += pe.at(&[pos0, c]);
            assert!((got.at(&[view, 0, c]) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_is_per_view_equivariant() {
        // Swapping two views swaps encoder outputs identically.
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 5).unwrap();
        let mut rng = Rng::new(6);
        let images = Tensor::rand_uniform(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
        // Find a seed whose mask is identical across both views so that
        // swapping view contents is an exact symmetry of the whole input.
        let pattern = (0..)
            .map(|s| sample_mask(s, 2, 2, 2, 0.5).unwrap())
            .find(|p| (0..4).all(|t| p.is_masked(0, t) == p.is_masked(1, t)))
            .unwrap();

        let run = |imgs: &Tensor| {
            let p = crate::masking::patchify(imgs, 4).unwrap();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let pid = tape.leaf(&p);
            let tokens = encode(&mut tape, &bound, pid, &pattern).unwrap();
            tape.value(tokens.tokens).clone()
        };
        let a = run(&images);

        let mut swapped = Tensor::zeros(&[2, 3, 8, 8]);
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    swapped.set(&[0, c, y, x], images.at(&[1, c, y, x]));
                    swapped.set(&[1, c, y, x], images.at(&[0, c, y, x]));
                }
            }
        }
        let b = run(&swapped);
        let lv = pattern.visible_count_per_view();
        for t in 0..lv {
            for c in 0..cfg.dim {
                assert_eq!(a.at(&[0, t, c]), b.at(&[1, t, c]));
                assert_eq!(a.at(&[1, t, c]), b.at(&[0, t, c]));
            }
        }
    }

    #[test]
    fn encoder_output_variance_in_range_after_init() {
        // Token variance through layer-normed blocks stays within [0.1, 10]
        // across 100 init seeds.
        let cfg = ModelConfig {
            views: 2,
            ..ModelConfig::default()
        };
        let pattern = sample_mask(0, 4, 7, 2, 0.5).unwrap();
        for seed in 0..100 {
            let params = ModelParams::init(&cfg, seed).unwrap();
            let mut rng = Rng::new(1000 + seed);
            let images = Tensor::rand_uniform(&mut rng, &[2, 3, 64, 112], 0.0, 1.0);
            let patches = crate::masking::patchify(&images, 16).unwrap();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let p = tape.leaf(&patches);
            let tokens = encode(&mut tape, &bound, p, &pattern).unwrap();
            let out = tape.value(tokens.tokens);
            let mean = out.data().iter().sum::<f64>() / out.numel() as f64;
            let var = out
                .data()
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / out.numel() as f64;
            assert!(
                (0.1..=10.0).contains(&var),
                "seed {seed}: output variance {var}"
            );
        }
    }

    #[test]
    fn cva_partition_arithmetic() {
        // N=4 views, w=7 -> h groups of exactly 28 tokens.
        let (n, h, w) = (4, 3, 7);
        let mut perm_count = vec![0usize; n * h * w];
        for i in 0..h {
            let mut group = 0;
            for view in 0..n {
                for j in 0..w {
                    perm_count[view * h * w + i * w + j] += 1;
                    group += 1;
                }
            }
            assert_eq!(group, 28);
        }
        assert!(perm_count.iter().all(|&c| c == 1));
    }

    #[test]
    fn cva_row_locality_in_values_and_gradients() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 7).unwrap();
        let (n, h, w, c) = (2, 3, 2, cfg.dim);
        let mut rng = Rng::new(8);
        let base = Tensor::rand_uniform(&mut rng, &[n, h * w, c], -1.0, 1.0);

        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x = tape.leaf(input);
            let y = cva_forward(&mut tape, x, &bound, "dec.shared.0", h, w).unwrap();
            tape.value(y).clone()
        };
        let a = run(&base);
        // Perturb a token in row 0; rows 1.. must be bit-identical.
        let mut perturbed = base.clone();
        perturbed.set(&[0, 0, 0], perturbed.at(&[0, 0, 0]) + 0.5);
        let b = run(&perturbed);
        for view in 0..n {
            for t in w..h * w {
                for ch in 0..c {
                    assert_eq!(a.at(&[view, t, ch]), b.at(&[view, t, ch]));
                }
            }
        }

        // Gradient locality: d(output row 2 sum)/d(input) is zero outside row 2.
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(&base.clone().with_requires_grad(true));
        let y = cva_forward(&mut tape, x, &bound, "dec.shared.0", h, w).unwrap();
        let row = tape.slice(y, 1, 2 * w, w).unwrap();
        let loss = tape.sum(row).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        for view in 0..n {
            for t in 0..h * w {
                let in_row = t / w == 2;
                let gnorm: f64 = (0..c).map(|ch| g.at(&[view, t, ch]).abs()).sum();
                if in_row {
                    assert!(gnorm > 0.0, "row-2 token should receive gradient");
                } else {
                    assert_eq!(gnorm, 0.0, "cross-row gradient leaked at token {t}");
                }
            }
        }
    }

    #[test]
    fn cva_rotating_views_rotates_outputs_with_zero_view_emb() {
        let cfg = tiny_cfg();
        let mut params = ModelParams::init(&cfg, 9).unwrap();
        for (name, t) in params.named_mut() {
            if name.ends_with("view_emb") {
                *t = Tensor::zeros(t.shape());
            }
        }
        let (n, h, w, c) = (2, 2, 2, cfg.dim);
        let mut rng = Rng::new(10);
        let base = Tensor::rand_uniform(&mut rng, &[n, h * w, c], -1.0, 1.0);
        let mut rotated = Tensor::zeros(&[n, h * w, c]);
        for view in 0..n {
            for t in 0..h * w {
                for ch in 0..c {
                    rotated.set(&[(view + 1) % n, t, ch], base.at(&[view, t, ch]));
                }
            }
        }
        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x = tape.leaf(input);
            let y = cva_forward(&mut tape, x, &bound, "dec.shared.0", h, w).unwrap();
            tape.value(y).clone()
        };
        let a = run(&base);
        let b = run(&rotated);
        for view in 0..n {
            for t in 0..h * w {
                for ch in 0..c {
                    let diff = (a.at(&[view, t, ch]) - b.at(&[(view + 1) % n, t, ch])).abs();
                    assert!(diff < 1e-12, "view rotation not respected: {diff}");
                }
            }
        }
    }

    #[test]
    fn gate_is_half_when_weights_are_zero() {
        let cfg = tiny_cfg();
        let mut params = ModelParams::init(&cfg, 11).unwrap();
        for (name, t) in params.named_mut() {
            if name.starts_with("gate.") {
                *t = Tensor::zeros(t.shape());
            }
        }
        let rig = crate::camera::CameraRig::ring(2, 8, 8).unwrap();
        let tokens = Tensor::full(&[2, 4, cfg.dim], 2.0);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(&tokens);
        let y = camera_gate(&mut tape, x, &rig, &bound).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0).abs() < 1e-12, "sigmoid(0) = 0.5 halves features");
        }
    }

    #[test]
    fn identical_views_receive_identical_gates() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 12).unwrap();
        // Two views with the same pose.
        let rig1 = crate::camera::CameraRig::ring(1, 8, 8).unwrap();
        let rig = crate::camera::CameraRig::new(
            vec![rig1.views[0].clone(), rig1.views[0].clone()],
            8,
            8,
        )
        .unwrap();
        let mut rng = Rng::new(13);
        let tokens = Tensor::rand_uniform(&mut rng, &[2, 4, cfg.dim], -1.0, 1.0);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(&tokens);
        let y = camera_gate(&mut tape, x, &rig, &bound).unwrap();
        let out = tape.value(y);
        for t in 0..4 {
            for c in 0..cfg.dim {
                let ratio_a = out.at(&[0, t, c]) / tokens.at(&[0, t, c]);
                let ratio_b = out.at(&[1, t, c]) / tokens.at(&[1, t, c]);
                assert!((ratio_a - ratio_b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_values_sit_inside_unit_interval() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 14).unwrap();
        let rig = crate::camera::CameraRig::ring(2, 8, 8).unwrap();
        let tokens = Tensor::ones(&[2, 4, cfg.dim]);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(&tokens);
        let y = camera_gate(&mut tape, x, &rig, &bound).unwrap();
        // With all-ones tokens the output equals the gate itself.
        for &v in tape.value(y).data() {
            assert!(v > 0.0 && v < 1.0, "gate value {v} outside (0,1)");
        }
    }

    #[test]
    fn gate_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 15).unwrap();
        let rig = crate::camera::CameraRig::ring(2, 8, 8).unwrap();
        let mut rng = Rng::new(16);
        let tokens = Tensor::rand_uniform(&mut rng, &[2, 4, cfg.dim], -1.0, 1.0);
        let w0 = params.gate.fc1.w.clone();
        let err = crate::tensor::grad_check(
            move |tape, w| {
                // Rebind with the probed fc1 weight.
                let mut ids = BTreeMap::new();
                for (name, tensor) in params.named() {
                    if name == "gate.fc1.w" {
                        continue;
                    }
                    ids.insert(name.clone(), tape.leaf(tensor));
                }
                ids.insert("gate.fc1.w".into(), w);
                let bound = BoundModel {
                    cfg: params.cfg.clone(),
                    ids,
                };
                let x = tape.leaf(&tokens);
                let y = camera_gate(tape, x, &rig, &bound)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "gate grad err {err}");
    }

    #[test]
    fn decode_shapes_and_depth_normalization() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, 17).unwrap();
        let rig = crate::camera::CameraRig::ring(6, 112, 64).unwrap();
        let mut rng = Rng::new(18);
        let filled = Tensor::rand_uniform(&mut rng, &[6, 28, 64], -1.0, 1.0);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(&filled);
        let out = decode(&mut tape, &bound, x, &rig, 4, 7).unwrap();

        let fsem_ext = to_nchw(&mut tape, out.fsem, 4, 7).unwrap();
        assert_eq!(tape.shape(fsem_ext), &[6, 64, 4, 7]);
        let d_ext = to_nchw(&mut tape, out.depth, 4, 7).unwrap();
        assert_eq!(tape.shape(d_ext), &[6, 16, 4, 7]);

        let d = tape.value(out.depth);
        for view in 0..6 {
            for t in 0..28 {
                let sum: f64 = (0..16).map(|b| d.at(&[view, t, b])).sum();
                assert!((sum - 1.0).abs() < 1e-9, "depth bin sum {sum}");
                for b in 0..16 {
                    assert!(d.at(&[view, t, b]) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn tied_branches_match_when_gate_disabled() {
        // With geometry weights tied to the semantic branch (bins widened to
        // C so the heads can be tied too) and the gate off, both branches
        // produce identical outputs.
        let cfg = ModelConfig {
            camera_gate: false,
            bins: tiny_cfg().dim,
            ..tiny_cfg()
        };
        let mut params = ModelParams::init(&cfg, 19).unwrap();
        params.dec_geo = params.dec_sem.clone();
        params.geo_head = params.sem_head.clone();
        let rig = crate::camera::CameraRig::ring(2, 8, 8).unwrap();
        let mut rng = Rng::new(20);
        let filled = Tensor::rand_uniform(&mut rng, &[2, 4, cfg.dim], -1.0, 1.0);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(&filled);
        let out = decode(&mut tape, &bound, x, &rig, 2, 2).unwrap();
        let fsem = tape.value(out.fsem).clone();
        let logits = tape.value(out.depth_logits).clone();
        assert_eq!(fsem.data(), logits.data());
    }

    #[test]
    fn flop_ratios_under_row_doubling() {
        let (w, n, c) = (7, 6, 64);
        for h in [4usize, 8, 16] {
            let cva_1 = cva_flops(h, w, n, c);
            let cva_2 = cva_flops(2 * h, w, n, c);
            assert_eq!(cva_2 as f64 / cva_1 as f64, 2.0);
            let g_1 = global_attention_flops(h, w, n, c);
            let g_2 = global_attention_flops(2 * h, w, n, c);
            assert_eq!(g_2 as f64 / g_1 as f64, 4.0);
        }
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = ModelConfig::default();
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.cva_positions = vec![9];
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.dec_depth = 7;
        assert!(cfg.validate().is_err());
    }
}
