//! Wengert tape: forward ops record themselves, backward replays in exact
//! reverse order computing vector-Jacobian products.
//!
//! A tape and its tensors are confined to one thread for the duration of a
//! forward/backward pass; parameters are snapshotted at registration.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Affine { x: VarId, scale: f64 },
    Matmul { a: VarId, b: VarId },
    Transpose { x: VarId, ax0: usize, ax1: usize },
    Reshape { x: VarId },
    Slice { x: VarId, axis: usize, start: usize, len: usize },
    Concat { xs: Vec<VarId>, axis: usize },
    Softmax { x: VarId, axis: usize },
    LayerNorm { x: VarId, eps: f64 },
    Gelu { x: VarId },
    Sigmoid { x: VarId },
    Ln { x: VarId },
    Clamp { x: VarId, lo: f64, hi: f64 },
    Sum { x: VarId },
    Mean { x: VarId },
    SumAxis { x: VarId, axis: usize },
    Gather { x: VarId, indices: Arc<Vec<usize>> },
    ScatterAdd { values: VarId, indices: Arc<Vec<usize>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Affine { .. } => "affine",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Ln { .. } => "ln",
            Op::Clamp { .. } => "clamp",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
        }
    }
}

pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, VarId)>,
    completed: bool,
    /// When set, every op verifies its output is finite (used by grad checks
    /// and abort diagnostics).
    pub check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            values: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            completed: false,
            check_finite: false,
        }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Result<VarId> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let id = VarId(self.values.len());
        self.ops.push(op);
        self.values.push(value);
        self.needs_grad.push(needs_grad);
        self.grads.push(None);
        Ok(id)
    }

    /// Records a leaf; gradient flows to it iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> VarId {
        let needs = t.requires_grad;
        self.push(Op::Leaf, t.clone(), needs).expect("leaf is always recordable")
    }

    /// Registers a named parameter leaf (snapshot clone, requires grad).
    pub fn param(&mut self, name: &str, t: &Tensor) -> VarId {
        debug_assert!(
            !self.params.iter().any(|(n, _)| n == name),
            "parameter {name} registered twice"
        );
        let id = self
            .push(Op::Leaf, t.clone().with_requires_grad(true), true)
            .expect("leaf is always recordable");
        self.params.push((name.to_string(), id));
        id
    }

    /// Records a constant leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.push(Op::Leaf, t.with_requires_grad(false), false)
            .expect("leaf is always recordable")
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.values[id.0].shape()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Gradient of the last backward pass w.r.t. `id`, if any flowed there.
    pub fn grad(&self, id: VarId) -> Option<Tensor> {
        self.grads[id.0].as_ref().map(|g| {
            Tensor::new(self.values[id.0].shape().to_vec(), g.clone()).expect("grad shape matches")
        })
    }

    /// Named parameter gradients after backward; parameters untouched by the
    /// loss are reported as None rather than silently zero-filled.
    pub fn param_grads(&self) -> Vec<(String, Option<Tensor>)> {
        self.params
            .iter()
            .map(|(name, id)| (name.clone(), self.grad(*id)))
            .collect()
    }

    // ── elementwise with trailing-shape (leading-batch) broadcast ──────

    fn broadcast_out_shape(
        &self,
        op: &'static str,
        a: VarId,
        b: VarId,
    ) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(sa.to_vec());
        }
        let (big, small) = if sa.len() >= sb.len() { (sa, sb) } else { (sb, sa) };
        if small.len() < big.len() && &big[big.len() - small.len()..] == small {
            return Ok(big.to_vec());
        }
        Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let out_shape = self.broadcast_out_shape("add", a, b)?;
        let da = self.values[a.0].data();
        let db = self.values[b.0].data();
        let out = elementwise_broadcast(da, db, |x, y| x + y);
        let needs = self.needs_grad[a.0] || self.needs_grad[b.0];
        self.push(Op::Add { a, b }, Tensor::new(out_shape, out)?, needs)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let out_shape = self.broadcast_out_shape("mul", a, b)?;
        let da = self.values[a.0].data();
        let db = self.values[b.0].data();
        let out = elementwise_broadcast(da, db, |x, y| x * y);
        let needs = self.needs_grad[a.0] || self.needs_grad[b.0];
        self.push(Op::Mul { a, b }, Tensor::new(out_shape, out)?, needs)
    }

    /// scale * x + shift, elementwise with compile-time constants.
    pub fn affine(&mut self, x: VarId, scale: f64, shift: f64) -> Result<VarId> {
        let v = &self.values[x.0];
        let out: Vec<f64> = v.data().iter().map(|e| scale * e + shift).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let needs = self.needs_grad[x.0];
        self.push(Op::Affine { x, scale }, t, needs)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let nb = self.affine(b, -1.0, 0.0)?;
        self.add(a, nb)
    }

    // ── matmul (batched over equal leading dims; 2-D side broadcasts) ──

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if ka != kb {
            return Err(mismatch());
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let lead: Vec<usize> = if lead_a == lead_b {
            lead_a.to_vec()
        } else if lead_a.is_empty() {
            lead_b.to_vec()
        } else if lead_b.is_empty() {
            lead_a.to_vec()
        } else {
            return Err(mismatch());
        };
        let batches: usize = lead.iter().product();
        let da = self.values[a.0].data();
        let db = self.values[b.0].data();
        let mut out = vec![0.0; batches * m * n];
        if lead_b.is_empty() {
            // Shared RHS: all batches stack into a single (batches*m, k) @
            // (k, n) product.
            mm_nn(da, db, &mut out, batches * m, ka, n);
        } else {
            for t in 0..batches {
                let aa = if lead_a.is_empty() { &da[..] } else { &da[t * m * ka..(t + 1) * m * ka] };
                let bb = &db[t * ka * n..(t + 1) * ka * n];
                mm_nn(aa, bb, &mut out[t * m * n..(t + 1) * m * n], m, ka, n);
            }
        }
        let mut out_shape = lead;
        out_shape.push(m);
        out_shape.push(n);
        let needs = self.needs_grad[a.0] || self.needs_grad[b.0];
        self.push(Op::Matmul { a, b }, Tensor::new(out_shape, out)?, needs)
    }

    // ── shape ops ──────────────────────────────────────────────────────

    pub fn transpose(&mut self, x: VarId, ax0: usize, ax1: usize) -> Result<VarId> {
        let shape = self.shape(x).to_vec();
        if ax0 >= shape.len() || ax1 >= shape.len() {
            return Err(Error::BadShape {
                op: "transpose",
                shape,
                reason: format!("axes ({ax0}, {ax1}) out of range"),
            });
        }
        let data = transpose_copy(self.values[x.0].data(), &shape, ax0, ax1);
        let mut out_shape = shape;
        out_shape.swap(ax0, ax1);
        let needs = self.needs_grad[x.0];
        self.push(Op::Transpose { x, ax0, ax1 }, Tensor::new(out_shape, data)?, needs)
    }

    pub fn reshape(&mut self, x: VarId, new_shape: &[usize]) -> Result<VarId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.values[x.0].numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        let t = Tensor::new(new_shape.to_vec(), self.values[x.0].data().to_vec())?;
        let needs = self.needs_grad[x.0];
        self.push(Op::Reshape { x }, t, needs)
    }

    pub fn slice(&mut self, x: VarId, axis: usize, start: usize, len: usize) -> Result<VarId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::BadShape {
                op: "slice",
                shape,
                reason: format!("axis {axis}, start {start}, len {len}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.values[x.0].data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.needs_grad[x.0];
        self.push(Op::Slice { x, axis, start, len }, Tensor::new(out_shape, out)?, needs)
    }

    pub fn concat(&mut self, xs: &[VarId], axis: usize) -> Result<VarId> {
        if xs.is_empty() {
            return Err(Error::BadShape {
                op: "concat",
                shape: vec![],
                reason: "no inputs".into(),
            });
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::BadShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut axis_total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &x in xs {
                let s = self.shape(x);
                let alen = s[axis];
                let src = self.values[x.0].data();
                out.extend_from_slice(&src[o * alen * inner..(o + 1) * alen * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = axis_total;
        let needs = xs.iter().any(|x| self.needs_grad[x.0]);
        self.push(
            Op::Concat { xs: xs.to_vec(), axis },
            Tensor::new(out_shape, out)?,
            needs,
        )
    }

    // ── nonlinearities and reductions ──────────────────────────────────

    pub fn softmax(&mut self, x: VarId, axis: usize) -> Result<VarId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::BadShape {
                op: "softmax",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let alen = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.values[x.0].data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * alen * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..alen {
                    mx = mx.max(src[base + k * inner]);
                }
                let mut sum = 0.0;
                for k in 0..alen {
                    let e = (src[base + k * inner] - mx).exp();
                    out[base + k * inner] = e;
                    sum += e;
                }
                for k in 0..alen {
                    out[base + k * inner] /= sum;
                }
            }
        }
        let needs = self.needs_grad[x.0];
        self.push(Op::Softmax { x, axis }, Tensor::new(shape, out)?, needs)
    }

    /// Normalizes over the last axis: (x - mean) / sqrt(var + eps).
    /// Learnable gain/bias are applied by the caller with mul/add.
    pub fn layer_norm(&mut self, x: VarId, eps: f64) -> Result<VarId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::BadShape {
            op: "layer_norm",
            shape: shape.clone(),
            reason: "rank 0".into(),
        })?;
        let src = self.values[x.0].data();
        let mut out = vec![0.0; src.len()];
        for line in 0..src.len() / d {
            let row = &src[line * d..(line + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for k in 0..d {
                out[line * d + k] = (row[k] - mean) * inv;
            }
        }
        let needs = self.needs_grad[x.0];
        self.push(Op::LayerNorm { x, eps }, Tensor::new(shape, out)?, needs)
    }

    pub fn gelu(&mut self, x: VarId) -> Result<VarId> {
        let v = &self.values[x.0];
        let out: Vec<f64> = v.data().iter().map(|&e| gelu_fwd(e)).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let needs = self.needs_grad[x.0];
        self.push(Op::Gelu { x }, t, needs)
    }

    pub fn sigmoid(&mut self, x: VarId) -> Result<VarId> {
        let v = &self.values[x.0];
        let out: Vec<f64> = v.data().iter().map(|&e| 1.0 / (1.0 + (-e).exp())).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let needs = self.needs_grad[x.0];
        self.push(Op::Sigmoid { x }, t, needs)
    }

    pub fn ln(&mut self, x: VarId) -> Result<VarId> {
        let v = &self.values[x.0];
        let out: Vec<f64> = v.data().iter().map(|e| e.ln()).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let needs = self.needs_grad[x.0];
        self.push(Op::Ln { x }, t, needs)
    }

    pub fn clamp(&mut self, x: VarId, lo: f64, hi: f64) -> Result<VarId> {
        let v = &self.values[x.0];
        let out: Vec<f64> = v.data().iter().map(|e| e.clamp(lo, hi)).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let needs = self.needs_grad[x.0];
        self.push(Op::Clamp { x, lo, hi }, t, needs)
    }

    pub fn sum(&mut self, x: VarId) -> Result<VarId> {
        let total: f64 = self.values[x.0].data().iter().sum();
        let needs = self.needs_grad[x.0];
        self.push(Op::Sum { x }, Tensor::scalar(total), needs)
    }

    pub fn mean(&mut self, x: VarId) -> Result<VarId> {
        let v = &self.values[x.0];
        if v.numel() == 0 {
            return Err(Error::BadShape {
                op: "mean",
                shape: v.shape().to_vec(),
                reason: "empty tensor".into(),
            });
        }
        let total: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        let needs = self.needs_grad[x.0];
        self.push(Op::Mean { x }, Tensor::scalar(total), needs)
    }

    pub fn sum_axis(&mut self, x: VarId, axis: usize) -> Result<VarId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::BadShape {
                op: "sum_axis",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let alen = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.values[x.0].data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..alen {
                let base = (o * alen + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let needs = self.needs_grad[x.0];
        self.push(Op::SumAxis { x, axis }, Tensor::new(out_shape, out)?, needs)
    }

    // ── indexed ops over axis-0 rows ───────────────────────────────────

    /// out[p] = x[indices[p]] for rows along axis 0.
    pub fn gather(&mut self, x: VarId, indices: Arc<Vec<usize>>) -> Result<VarId> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::BadShape {
                op: "gather",
                shape,
                reason: "rank 0".into(),
            });
        }
        let rows = shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::BadShape {
                op: "gather",
                shape,
                reason: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let row_len: usize = shape[1..].iter().product();
        let src = self.values[x.0].data();
        let mut out = Vec::with_capacity(indices.len() * row_len);
        for &i in indices.iter() {
            out.extend_from_slice(&src[i * row_len..(i + 1) * row_len]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let needs = self.needs_grad[x.0];
        self.push(Op::Gather { x, indices }, Tensor::new(out_shape, out)?, needs)
    }

    /// Indexed accumulation: out has `rows` rows, each values[p] is added into
    /// row indices[p]. Values are consumed in ascending input order, which
    /// fixes the floating-point accumulation order.
    pub fn scatter_add(
        &mut self,
        rows: usize,
        indices: Arc<Vec<usize>>,
        values: VarId,
    ) -> Result<VarId> {
        let shape = self.shape(values).to_vec();
        if shape.is_empty() || shape[0] != indices.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter_add",
                lhs: shape,
                rhs: vec![indices.len()],
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::BadShape {
                op: "scatter_add",
                shape,
                reason: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let row_len: usize = shape[1..].iter().product();
        let src = self.values[values.0].data();
        let mut out = vec![0.0; rows * row_len];
        for (p, &i) in indices.iter().enumerate() {
            let dst = &mut out[i * row_len..(i + 1) * row_len];
            let s = &src[p * row_len..(p + 1) * row_len];
            for (d, v) in dst.iter_mut().zip(s) {
                *d += v;
            }
        }
        let mut out_shape = shape;
        out_shape[0] = rows;
        let needs = self.needs_grad[values.0];
        self.push(
            Op::ScatterAdd { values, indices },
            Tensor::new(out_shape, out)?,
            needs,
        )
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Every leaf with requires_grad ends up
    /// holding d(loss)/d(leaf); calling twice without re-recording is an error.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.completed {
            return Err(Error::BackwardTwice);
        }
        if self.values[loss.0].numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.completed = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..self.ops.len()).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            let op = self.ops[i].clone();
            self.backward_op(&op, VarId(i));
            // Intermediate grads are dropped once consumed; leaves keep theirs.
            if !matches!(op, Op::Leaf) {
                self.grads[i] = None;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: VarId, delta: &[f64]) {
        if !self.needs_grad[target.0] {
            return;
        }
        let n = self.values[target.0].numel();
        debug_assert_eq!(delta.len(), n);
        match &mut self.grads[target.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.grads[target.0] = Some(delta.to_vec()),
        }
    }

    /// Accumulate a full-size delta into a possibly smaller (suffix
    /// broadcast) target by summing over leading blocks.
    fn accumulate_folded(&mut self, target: VarId, full: &[f64]) {
        if !self.needs_grad[target.0] {
            return;
        }
        let n = self.values[target.0].numel();
        let g = self.grads[target.0].get_or_insert_with(|| vec![0.0; n]);
        for block in full.chunks_exact(n) {
            for (gi, v) in g.iter_mut().zip(block) {
                *gi += v;
            }
        }
    }

    fn backward_op(&mut self, op: &Op, out: VarId) {
        let d_out = self.grads[out.0].clone().expect("grad present");
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate_folded(*a, &d_out);
                self.accumulate_folded(*b, &d_out);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let va = self.values[a.0].data().to_vec();
                let vb = self.values[b.0].data().to_vec();
                let da = elementwise_broadcast(&d_out, &vb, |d, y| d * y);
                self.accumulate_folded(a, &da);
                let db = elementwise_broadcast(&d_out, &va, |d, y| d * y);
                self.accumulate_folded(b, &db);
            }
            Op::Affine { x, scale } => {
                let delta: Vec<f64> = d_out.iter().map(|d| d * scale).collect();
                self.accumulate(*x, &delta);
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let lead_a = sa.len() > 2;
                let lead_b = sb.len() > 2;
                let batches = d_out.len() / (m * n);
                let va = self.values[a.0].data().to_vec();
                let vb = self.values[b.0].data().to_vec();
                if self.needs_grad[a.0] {
                    let mut d_a = vec![0.0; va.len()];
                    if !lead_b {
                        // Shared RHS: stack batches into one product.
                        mm_nt_acc(&d_out, &vb, &mut d_a, batches * m, n, k);
                    } else {
                        for t in 0..batches {
                            let dc = &d_out[t * m * n..(t + 1) * m * n];
                            let bb = &vb[t * k * n..(t + 1) * k * n];
                            let da = if lead_a {
                                &mut d_a[t * m * k..(t + 1) * m * k]
                            } else {
                                &mut d_a[..]
                            };
                            mm_nt_acc(dc, bb, da, m, n, k);
                        }
                    }
                    self.accumulate(a, &d_a);
                }
                if self.needs_grad[b.0] {
                    let mut d_b = vec![0.0; vb.len()];
                    if !lead_b {
                        mm_tn_acc(&va, &d_out, &mut d_b, batches * m, k, n);
                    } else {
                        for t in 0..batches {
                            let dc = &d_out[t * m * n..(t + 1) * m * n];
                            let aa = if lead_a { &va[t * m * k..(t + 1) * m * k] } else { &va[..] };
                            mm_tn_acc(aa, dc, &mut d_b[t * k * n..(t + 1) * k * n], m, k, n);
                        }
                    }
                    self.accumulate(b, &d_b);
                }
            }
            Op::Transpose { x, ax0, ax1 } => {
                let out_shape = self.shape(out).to_vec();
                let delta = transpose_copy(&d_out, &out_shape, *ax0, *ax1);
                self.accumulate(*x, &delta);
            }
            Op::Reshape { x } => {
                self.accumulate(*x, &d_out);
            }
            Op::Slice { x, axis, start, len } => {
                let shape = self.shape(*x).to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut delta = vec![0.0; self.values[x.0].numel()];
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    delta[dst..dst + len * inner].copy_from_slice(&d_out[src..src + len * inner]);
                }
                self.accumulate(*x, &delta);
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.shape(out).to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for &x in xs {
                    let alen = self.shape(x)[*axis];
                    if self.needs_grad[x.0] {
                        let mut delta = Vec::with_capacity(self.values[x.0].numel());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            delta.extend_from_slice(&d_out[base..base + alen * inner]);
                        }
                        self.accumulate(x, &delta);
                    }
                    offset += alen;
                }
            }
            Op::Softmax { x, axis } => {
                let shape = self.shape(out).to_vec();
                let alen = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let y = self.values[out.0].data().to_vec();
                let mut delta = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * alen * inner + i;
                        let mut dot = 0.0;
                        for k in 0..alen {
                            let idx = base + k * inner;
                            dot += d_out[idx] * y[idx];
                        }
                        for k in 0..alen {
                            let idx = base + k * inner;
                            delta[idx] = y[idx] * (d_out[idx] - dot);
                        }
                    }
                }
                self.accumulate(*x, &delta);
            }
            Op::LayerNorm { x, eps } => {
                let src = self.values[x.0].data().to_vec();
                let shape = self.shape(*x).to_vec();
                let d = *shape.last().unwrap();
                let mut delta = vec![0.0; src.len()];
                for line in 0..src.len() / d {
                    let row = &src[line * d..(line + 1) * d];
                    let dy = &d_out[line * d..(line + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for k in 0..d {
                        let xhat = (row[k] - mean) * inv;
                        m1 += dy[k];
                        m2 += dy[k] * xhat;
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for k in 0..d {
                        let xhat = (row[k] - mean) * inv;
                        delta[line * d + k] = inv * (dy[k] - m1 - xhat * m2);
                    }
                }
                self.accumulate(*x, &delta);
            }
            Op::Gelu { x } => {
                let src = self.values[x.0].data().to_vec();
                let delta: Vec<f64> = src
                    .iter()
                    .zip(&d_out)
                    .map(|(&e, d)| d * gelu_grad(e))
                    .collect();
                self.accumulate(*x, &delta);
            }
            Op::Sigmoid { x } => {
                let y = self.values[out.0].data().to_vec();
                let delta: Vec<f64> = y.iter().zip(&d_out).map(|(y, d)| d * y * (1.0 - y)).collect();
                self.accumulate(*x, &delta);
            }
            Op::Ln { x } => {
                let src = self.values[x.0].data().to_vec();
                let delta: Vec<f64> = src.iter().zip(&d_out).map(|(e, d)| d / e).collect();
                self.accumulate(*x, &delta);
            }
            Op::Clamp { x, lo, hi } => {
                let src = self.values[x.0].data().to_vec();
                let delta: Vec<f64> = src
                    .iter()
                    .zip(&d_out)
                    .map(|(&e, d)| if e >= *lo && e <= *hi { *d } else { 0.0 })
                    .collect();
                self.accumulate(*x, &delta);
            }
            Op::Sum { x } => {
                let g = d_out[0];
                let delta = vec![g; self.values[x.0].numel()];
                self.accumulate(*x, &delta);
            }
            Op::Mean { x } => {
                let n = self.values[x.0].numel();
                let g = d_out[0] / n as f64;
                let delta = vec![g; n];
                self.accumulate(*x, &delta);
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let alen = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut delta = vec![0.0; self.values[x.0].numel()];
                for o in 0..outer {
                    for k in 0..alen {
                        let base = (o * alen + k) * inner;
                        for i in 0..inner {
                            delta[base + i] = d_out[o * inner + i];
                        }
                    }
                }
                self.accumulate(*x, &delta);
            }
            Op::Gather { x, indices } => {
                let row_len: usize = self.shape(*x)[1..].iter().product();
                let mut delta = vec![0.0; self.values[x.0].numel()];
                for (p, &i) in indices.iter().enumerate() {
                    let dst = &mut delta[i * row_len..(i + 1) * row_len];
                    let src = &d_out[p * row_len..(p + 1) * row_len];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                self.accumulate(*x, &delta);
            }
            Op::ScatterAdd { values, indices } => {
                let row_len: usize = self.shape(*values)[1..].iter().product();
                let mut delta = Vec::with_capacity(self.values[values.0].numel());
                for &i in indices.iter() {
                    delta.extend_from_slice(&d_out[i * row_len..(i + 1) * row_len]);
                }
                self.accumulate(*values, &delta);
            }
        }
    }
}

// ── kernels ─────────────────────────────────────────────────────────────
//
// Large products go through matrixmultiply's blocked dgemm (single-threaded,
// deterministic); below the threshold its per-call packing overhead exceeds
// the work, so plain loops take over (per-head attention matrices).

const SMALL_GEMM: usize = 1 << 15;

/// C += A(m,k) @ B(k,n); C must be zeroed by the caller.
fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if m * k * n <= SMALL_GEMM {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// C(m,k) += A(m,n) @ B(k,n)^T — rows of B dotted with rows of A.
fn mm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    if m * n * k <= SMALL_GEMM {
        for i in 0..m {
            let arow = &a[i * n..(i + 1) * n];
            let crow = &mut c[i * k..(i + 1) * k];
            for (p, cv) in crow.iter_mut().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                let mut dot = 0.0;
                for (av, bv) in arow.iter().zip(brow) {
                    dot += av * bv;
                }
                *cv += dot;
            }
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0,
            a.as_ptr(), n as isize, 1,
            b.as_ptr(), 1, n as isize,
            1.0,
            c.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// C(k,n) += A(m,k)^T @ B(m,n).
fn mm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if m * k * n <= SMALL_GEMM {
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                let crow = &mut c[p * n..(p + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0,
            a.as_ptr(), 1, k as isize,
            b.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Elementwise combine where the shorter operand is a whole divisor of the
/// longer one and repeats over leading blocks. `f` receives (a, b) in the
/// caller's operand order.
fn elementwise_broadcast(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (na, nb) = (a.len(), b.len());
    if na == nb {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = Vec::with_capacity(na.max(nb));
    if na > nb {
        for block in a.chunks_exact(nb) {
            out.extend(block.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
    } else {
        for block in b.chunks_exact(na) {
            out.extend(a.iter().zip(block).map(|(&x, &y)| f(x, y)));
        }
    }
    out
}

/// Copy with two axes swapped: the shape factors into
/// (outer, A, mid, B, inner) around the swapped axes, and inner runs are
/// copied contiguously.
fn transpose_copy(src: &[f64], shape: &[usize], ax0: usize, ax1: usize) -> Vec<f64> {
    if ax0 == ax1 {
        return src.to_vec();
    }
    let (ax0, ax1) = (ax0.min(ax1), ax0.max(ax1));
    let outer: usize = shape[..ax0].iter().product();
    let len_a = shape[ax0];
    let mid: usize = shape[ax0 + 1..ax1].iter().product();
    let len_b = shape[ax1];
    let inner: usize = shape[ax1 + 1..].iter().product();

    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        let src_o = o * len_a * mid * len_b * inner;
        for b in 0..len_b {
            for m in 0..mid {
                for a in 0..len_a {
                    let s = src_o + ((a * mid + m) * len_b + b) * inner;
                    let d = src_o + ((b * mid + m) * len_a + a) * inner;
                    out[d..d + inner].copy_from_slice(&src[s..s + inner]);
                }
            }
        }
    }
    out
}

fn gelu_fwd(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    const KAPPA: f64 = 0.044715;
    let u = SQRT_2_OVER_PI * (x + KAPPA * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    const KAPPA: f64 = 0.044715;
    let u = SQRT_2_OVER_PI * (x + KAPPA * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * SQRT_2_OVER_PI * (1.0 + 3.0 * KAPPA * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut rng = Rng::new(0);
        let a = Tensor::randn(&mut rng, &[3, 3], 1.0);
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let mut tape = Tape::new();
        let ia = tape.leaf(&eye);
        let av = tape.leaf(&a);
        let out = tape.matmul(ia, av).unwrap();
        assert!(tape.value(out).max_abs_diff(&a) < 1e-15);
    }

    #[test]
    fn scatter_add_matches_definition() {
        let mut tape = Tape::new();
        let vals = tape.leaf(&t(&[3], &[2.0, 3.0, 5.0]));
        let out = tape
            .scatter_add(4, Arc::new(vec![1, 1, 3]), vals)
            .unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 5.0, 0.0, 5.0]);
    }

    #[test]
    fn backward_of_square_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_of_mean_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[4], &[1.0, 5.0, -2.0, 0.5]).with_requires_grad(true));
        let loss = tape.mean(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[2.0]).with_requires_grad(true));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::BackwardTwice)));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn detached_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn transpose_round_trip() {
        let mut rng = Rng::new(2);
        let x = Tensor::randn(&mut rng, &[2, 3, 4], 1.0);
        let mut tape = Tape::new();
        let a = tape.leaf(&x);
        let b = tape.transpose(a, 0, 2).unwrap();
        assert_eq!(tape.shape(b), &[4, 3, 2]);
        let c = tape.transpose(b, 0, 2).unwrap();
        assert_eq!(tape.value(c).data(), x.data());
    }

    #[test]
    fn slice_concat_round_trip() {
        let mut rng = Rng::new(3);
        let x = Tensor::randn(&mut rng, &[3, 5, 2], 1.0);
        let mut tape = Tape::new();
        let a = tape.leaf(&x);
        let left = tape.slice(a, 1, 0, 2).unwrap();
        let right = tape.slice(a, 1, 2, 3).unwrap();
        let back = tape.concat(&[left, right], 1).unwrap();
        assert_eq!(tape.value(back).data(), x.data());
    }

    #[test]
    fn leading_broadcast_add_folds_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[0.0; 6]).with_requires_grad(true));
        let b = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
        let y = tape.add(x, b).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn batched_matmul_broadcasts_rhs() {
        let mut rng = Rng::new(4);
        let a = Tensor::randn(&mut rng, &[4, 2, 3], 1.0);
        let b = Tensor::randn(&mut rng, &[3, 5], 1.0);
        let mut tape = Tape::new();
        let av = tape.leaf(&a);
        let bv = tape.leaf(&b);
        let c = tape.matmul(av, bv).unwrap();
        assert_eq!(tape.shape(c), &[4, 2, 5]);
        // Spot-check one batch against a flat 2-D matmul.
        let mut tape2 = Tape::new();
        let a1 = tape2.leaf(&Tensor::new(vec![2, 3], a.data()[6..12].to_vec()).unwrap());
        let b1 = tape2.leaf(&b);
        let c1 = tape2.matmul(a1, b1).unwrap();
        assert_eq!(&tape.value(c).data()[10..20], tape2.value(c1).data());
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut rng = Rng::new(9);
            let x = Tensor::randn(&mut rng, &[4, 4], 1.0);
            let w = Tensor::randn(&mut rng, &[4, 4], 1.0);
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let wv = tape.leaf(&w);
            let h = tape.matmul(xv, wv).unwrap();
            let s = tape.softmax(h, 1).unwrap();
            let g = tape.gelu(s).unwrap();
            let l = tape.mean(g).unwrap();
            tape.value(l).item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
