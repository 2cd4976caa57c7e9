//! Reverse-mode autodiff on an operation tape.
//!
//! Each op appends a node holding its output values and the ids of its
//! parents. `backward` walks the tape in reverse, accumulating gradients in
//! a fixed order, so gradients are bitwise reproducible.
//!
//! Composite losses are differentiated with `backward_weighted`, which runs
//! one reverse sweep per component and combines leaf gradients as
//! w₁·g₁ + w₂·g₂ + … left to right. That makes gradient linearity exact at
//! 64-bit by construction, and a zero-weighted component is skipped entirely
//! so its presence cannot perturb the others.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, kernels, Mask, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    AddBias { a: TensorId, bias: TensorId },
    MatMul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Reshape { a: TensorId },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    SliceRows { a: TensorId, start: usize },
    SliceCols { a: TensorId, start: usize },
    Embed { table: TensorId, ids: Vec<usize> },
    LayerNorm { a: TensorId, gamma: TensorId, beta: TensorId, eps: f64, stats: Vec<(f64, f64)> },
    Gelu { a: TensorId },
    Softmax { a: TensorId },
    MaskedSoftmax { a: TensorId, mask: Rc<Mask> },
    AttnApply { attn: TensorId, v: TensorId, mask: Rc<Mask> },
    Conv2dStride { x: TensorId, w: TensorId, b: TensorId, k: usize },
    AreaDown { x: TensorId, k: usize },
    PixelShuffle { x: TensorId, k: usize },
    PixelUnshuffle { x: TensorId, k: usize },
    CrossEntropy { logits: TensorId, targets: Vec<usize> },
    Mse { a: TensorId, b: TensorId },
    Sum { a: TensorId },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient per tape node, keyed by `TensorId`. Absent entries mean the node
/// did not influence the loss (or sits on a frozen path).
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<Vec<f64>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Detached copy of a node's value (constant with respect to the tape).
    pub fn value(&self, id: TensorId) -> Tensor {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            data: self.nodes[id.0].data.clone(),
            requires_grad: false,
        }
    }

    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        let needs = t.requires_grad;
        self.push_unchecked(t.data.clone(), t.shape.clone(), Op::Leaf, needs)
    }

    /// Leaf that never receives gradient regardless of the tensor's flag.
    pub fn constant(&mut self, t: &Tensor) -> TensorId {
        self.push_unchecked(t.data.clone(), t.shape.clone(), Op::Leaf, false)
    }

    fn push_unchecked(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs: bool) -> TensorId {
        self.nodes.push(Node { data, shape, op, needs_grad: needs });
        TensorId(self.nodes.len() - 1)
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, opname: &'static str) -> Result<TensorId> {
        ensure_finite(&data, opname)?;
        let needs = self.op_needs_grad(&op);
        Ok(self.push_unchecked(data, shape, op, needs))
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        let dep = |id: &TensorId| self.nodes[id.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::Add { a, b } | Op::Mul { a, b } | Op::Mse { a, b } => dep(a) || dep(b),
            Op::Scale { a, .. }
            | Op::Transpose { a }
            | Op::Reshape { a }
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::Gelu { a }
            | Op::Softmax { a }
            | Op::MaskedSoftmax { a, .. }
            | Op::Sum { a } => dep(a),
            Op::AddBias { a, bias } => dep(a) || dep(bias),
            Op::MatMul { a, b } => dep(a) || dep(b),
            Op::ConcatRows { parts } | Op::ConcatCols { parts } => parts.iter().any(dep),
            Op::Embed { table, .. } => dep(table),
            Op::LayerNorm { a, gamma, beta, .. } => dep(a) || dep(gamma) || dep(beta),
            Op::AttnApply { attn, v, .. } => dep(attn) || dep(v),
            Op::Conv2dStride { x, w, b, .. } => dep(x) || dep(w) || dep(b),
            Op::AreaDown { x, .. } | Op::PixelShuffle { x, .. } | Op::PixelUnshuffle { x, .. } => dep(x),
            Op::CrossEntropy { logits, .. } => dep(logits),
        }
    }

    fn want2d(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::dim(op, format!("expected 2-D, got {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    fn want3d(&self, id: TensorId, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape(id);
        if s.len() != 3 {
            return Err(Error::dim(op, format!("expected 3-D, got {:?}", s)));
        }
        Ok((s[0], s[1], s[2]))
    }

    // ── Forward ops ──────────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, Op::Add { a, b }, "add")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, Op::Scale { a, c }, "scale")
    }

    /// rows(a) + bias broadcast over rows; a is [n, m], bias is [m].
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (n, m) = self.want2d(a, "add_bias")?;
        if self.shape(bias) != [m] {
            return Err(Error::dim("add_bias", format!("bias {:?} vs cols {}", self.shape(bias), m)));
        }
        let mut data = self.data(a).to_vec();
        for r in 0..n {
            for (v, b) in data[r * m..(r + 1) * m].iter_mut().zip(self.data(bias)) {
                *v += b;
            }
        }
        self.push(data, vec![n, m], Op::AddBias { a, bias }, "add_bias")
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.want2d(a, "matmul")?;
        let (kb, n) = self.want2d(b, "matmul")?;
        if ka != kb {
            return Err(Error::dim("matmul", format!("[{m},{ka}] x [{kb},{n}]")));
        }
        let mut data = vec![0.0; m * n];
        kernels::matmul_nn(self.data(a), self.data(b), &mut data, m, ka, n);
        self.push(data, vec![m, n], Op::MatMul { a, b }, "matmul")
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (n, m) = self.want2d(a, "transpose")?;
        let src = self.data(a);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = src[i * m + j];
            }
        }
        self.push(data, vec![m, n], Op::Transpose { a }, "transpose")
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let n: usize = shape.iter().product();
        if n != self.data(a).len() {
            return Err(Error::dim("reshape", format!("{:?} -> {:?}", self.shape(a), shape)));
        }
        let data = self.data(a).to_vec();
        self.push(data, shape.to_vec(), Op::Reshape { a }, "reshape")
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows", "no parts".into()));
        }
        let (_, m) = self.want2d(parts[0], "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.want2d(p, "concat_rows")?;
            if c != m {
                return Err(Error::dim("concat_rows", format!("cols {c} vs {m}")));
            }
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        self.push(data, vec![rows, m], Op::ConcatRows { parts: parts.to_vec() }, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols", "no parts".into()));
        }
        let (n, _) = self.want2d(parts[0], "concat_cols")?;
        let mut widths = Vec::new();
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.want2d(p, "concat_cols")?;
            if r != n {
                return Err(Error::dim("concat_cols", format!("rows {r} vs {n}")));
            }
            widths.push(c);
            total += c;
        }
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for r in 0..n {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        self.push(data, vec![n, total], Op::ConcatCols { parts: parts.to_vec() }, "concat_cols")
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (n, m) = self.want2d(a, "slice_rows")?;
        if start + len > n {
            return Err(Error::index("slice_rows", format!("{start}+{len} > {n}")));
        }
        let data = self.data(a)[start * m..(start + len) * m].to_vec();
        self.push(data, vec![len, m], Op::SliceRows { a, start }, "slice_rows")
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (n, m) = self.want2d(a, "slice_cols")?;
        if start + len > m {
            return Err(Error::index("slice_cols", format!("{start}+{len} > {m}")));
        }
        let src = self.data(a);
        let mut data = vec![0.0; n * len];
        for r in 0..n {
            data[r * len..(r + 1) * len].copy_from_slice(&src[r * m + start..r * m + start + len]);
        }
        self.push(data, vec![n, len], Op::SliceCols { a, start }, "slice_cols")
    }

    /// Row gather: out[r] = table[ids[r]].
    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (v, m) = self.want2d(table, "embed")?;
        let mut data = Vec::with_capacity(ids.len() * m);
        for (r, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::index("embed", format!("id {id} at row {r} >= vocab {v}")));
            }
            data.extend_from_slice(&self.data(table)[id * m..(id + 1) * m]);
        }
        self.push(data, vec![ids.len(), m], Op::Embed { table, ids: ids.to_vec() }, "embed")
    }

    pub fn layer_norm(&mut self, a: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let (n, m) = self.want2d(a, "layer_norm")?;
        if self.shape(gamma) != [m] || self.shape(beta) != [m] {
            return Err(Error::dim("layer_norm", format!("gamma/beta vs cols {m}")));
        }
        let mut data = vec![0.0; n * m];
        let mut stats = Vec::with_capacity(n);
        for r in 0..n {
            let st = kernels::layer_norm_row(
                &self.data(a)[r * m..(r + 1) * m],
                self.data(gamma),
                self.data(beta),
                eps,
                &mut data[r * m..(r + 1) * m],
            );
            stats.push(st);
        }
        self.push(data, vec![n, m], Op::LayerNorm { a, gamma, beta, eps, stats }, "layer_norm")
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| kernels::gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, Op::Gelu { a }, "gelu")
    }

    /// Softmax over the last axis of a 2-D tensor.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let (n, m) = self.want2d(a, "softmax")?;
        let mut data = self.data(a).to_vec();
        for r in 0..n {
            kernels::softmax_row(&mut data[r * m..(r + 1) * m]);
        }
        self.push(data, vec![n, m], Op::Softmax { a }, "softmax")
    }

    /// Per-row softmax over mask-allowed columns; a must be [L, L] matching
    /// the mask. Disallowed entries come out exactly 0.
    pub fn masked_softmax(&mut self, a: TensorId, mask: Rc<Mask>) -> Result<TensorId> {
        let (n, m) = self.want2d(a, "masked_softmax")?;
        if n != mask.l || m != mask.l {
            return Err(Error::dim("masked_softmax", format!("[{n},{m}] vs mask {}", mask.l)));
        }
        let mut data = self.data(a).to_vec();
        for r in 0..n {
            kernels::masked_softmax_row(&mut data[r * m..(r + 1) * m], mask.row(r));
        }
        self.push(data, vec![n, m], Op::MaskedSoftmax { a, mask }, "masked_softmax")
    }

    /// out[i] = Σ_{j allowed for i} attn[i][j]·v[j]; disallowed columns are
    /// skipped entirely, never multiplied by zero.
    pub fn attn_apply(&mut self, attn: TensorId, v: TensorId, mask: Rc<Mask>) -> Result<TensorId> {
        let (l1, l2) = self.want2d(attn, "attn_apply")?;
        let (lv, dh) = self.want2d(v, "attn_apply")?;
        if l1 != mask.l || l2 != mask.l || lv != mask.l {
            return Err(Error::dim("attn_apply", format!("attn [{l1},{l2}], v rows {lv}, mask {}", mask.l)));
        }
        let mut data = vec![0.0; l1 * dh];
        let av = self.data(attn);
        let vv = self.data(v);
        for i in 0..l1 {
            let out_row = &mut data[i * dh..(i + 1) * dh];
            for j in 0..l2 {
                if mask.is_allowed(i, j) {
                    let a_ij = av[i * l2 + j];
                    for (o, x) in out_row.iter_mut().zip(&vv[j * dh..(j + 1) * dh]) {
                        *o += a_ij * x;
                    }
                }
            }
        }
        self.push(data, vec![l1, dh], Op::AttnApply { attn, v, mask }, "attn_apply")
    }

    /// Non-overlapping strided convolution (kernel size == stride). x is
    /// [h, w, ci], w is [k, k, ci, co] flattened as [k*k*ci, co], b is [co].
    pub fn conv2d_stride(&mut self, x: TensorId, w: TensorId, b: TensorId, k: usize) -> Result<TensorId> {
        let (h, wd, ci) = self.want3d(x, "conv2d_stride")?;
        let (wrows, co) = self.want2d(w, "conv2d_stride")?;
        if wrows != k * k * ci {
            return Err(Error::dim("conv2d_stride", format!("weight rows {wrows} vs k*k*ci {}", k * k * ci)));
        }
        if self.shape(b) != [co] {
            return Err(Error::dim("conv2d_stride", format!("bias {:?} vs co {co}", self.shape(b))));
        }
        if h % k != 0 || wd % k != 0 {
            return Err(Error::dim("conv2d_stride", format!("grid {h}x{wd} not divisible by k={k}")));
        }
        let mut data = vec![0.0; (h / k) * (wd / k) * co];
        kernels::conv2d_stride(self.data(x), self.data(w), self.data(b), h, wd, ci, co, k, &mut data);
        self.push(data, vec![h / k, wd / k, co], Op::Conv2dStride { x, w, b, k }, "conv2d_stride")
    }

    pub fn area_downsample(&mut self, x: TensorId, k: usize) -> Result<TensorId> {
        let (h, w, c) = self.want3d(x, "area_downsample")?;
        if h % k != 0 || w % k != 0 {
            return Err(Error::dim("area_downsample", format!("grid {h}x{w} not divisible by k={k}")));
        }
        let mut data = vec![0.0; (h / k) * (w / k) * c];
        kernels::area_downsample(self.data(x), h, w, c, k, &mut data);
        self.push(data, vec![h / k, w / k, c], Op::AreaDown { x, k }, "area_downsample")
    }

    /// [h, w, c·k²] → [h·k, w·k, c]; see kernels for the channel layout.
    pub fn pixel_shuffle(&mut self, x: TensorId, k: usize) -> Result<TensorId> {
        let (h, w, cin) = self.want3d(x, "pixel_shuffle")?;
        if cin % (k * k) != 0 {
            return Err(Error::dim("pixel_shuffle", format!("channels {cin} not divisible by k²={}", k * k)));
        }
        let c = cin / (k * k);
        let mut data = vec![0.0; h * k * w * k * c];
        kernels::pixel_shuffle(self.data(x), h, w, c, k, &mut data);
        self.push(data, vec![h * k, w * k, c], Op::PixelShuffle { x, k }, "pixel_shuffle")
    }

    /// [h·k, w·k, c] → [h, w, c·k²]; inverse of pixel_shuffle.
    pub fn pixel_unshuffle(&mut self, x: TensorId, k: usize) -> Result<TensorId> {
        let (hk, wk, c) = self.want3d(x, "pixel_unshuffle")?;
        if hk % k != 0 || wk % k != 0 {
            return Err(Error::dim("pixel_unshuffle", format!("grid {hk}x{wk} not divisible by k={k}")));
        }
        let (h, w) = (hk / k, wk / k);
        let mut data = vec![0.0; h * w * c * k * k];
        kernels::pixel_unshuffle(self.data(x), h, w, c, k, &mut data);
        self.push(data, vec![h, w, c * k * k], Op::PixelUnshuffle { x, k }, "pixel_unshuffle")
    }

    /// Mean cross-entropy from raw logits [n, v] against target ids.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let (n, v) = self.want2d(logits, "softmax_cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dim("softmax_cross_entropy", format!("{} targets vs {n} rows", targets.len())));
        }
        let lv = self.data(logits);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::index("softmax_cross_entropy", format!("target {t} >= vocab {v}")));
            }
            let row = &lv[r * v..(r + 1) * v];
            let mut mx = f64::NEG_INFINITY;
            for &x in row {
                if x > mx {
                    mx = x;
                }
            }
            let mut lse = 0.0;
            for &x in row {
                lse += (x - mx).exp();
            }
            total += mx + lse.ln() - row[t];
        }
        let loss = total * (1.0 / n as f64);
        self.push(vec![loss], vec![1], Op::CrossEntropy { logits, targets: targets.to_vec() }, "softmax_cross_entropy")
    }

    /// Mean squared error over all elements (mean reduction).
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mse", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let n = self.data(a).len();
        let mut total = 0.0;
        for (x, y) in self.data(a).iter().zip(self.data(b)) {
            let d = x - y;
            total += d * d;
        }
        let loss = total * (1.0 / n as f64);
        self.push(vec![loss], vec![1], Op::Mse { a, b }, "mse")
    }

    /// Sum of all elements, to a scalar.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let mut total = 0.0;
        for &x in self.data(a) {
            total += x;
        }
        self.push(vec![total], vec![1], Op::Sum { a }, "sum")
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss, seeded with 1.0.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        self.sweep(loss, &mut grads)?;
        Ok(Gradients { grads })
    }

    /// Gradient of Σ wᵢ·Lᵢ computed as one sweep per component, combined at
    /// every node as w₁·g₁ + w₂·g₂ + … in argument order. Zero weights are
    /// skipped, so a disabled component is bitwise absent.
    pub fn backward_weighted(&self, losses: &[(TensorId, f64)]) -> Result<Gradients> {
        let mut combined: Vec<Option<Vec<f64>>> = Vec::new();
        combined.resize_with(self.nodes.len(), || None);
        for &(loss, w) in losses {
            if w == 0.0 {
                continue;
            }
            let g = self.backward(loss)?;
            for (slot, part) in combined.iter_mut().zip(g.grads) {
                if let Some(p) = part {
                    match slot {
                        None => {
                            *slot = Some(p.iter().map(|x| w * x).collect());
                        }
                        Some(acc) => {
                            for (a, x) in acc.iter_mut().zip(&p) {
                                *a += w * x;
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: combined })
    }

    fn sweep(&self, from: TensorId, grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        for id in (0..=from.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            // Holding the grad by value keeps the borrow checker happy while
            // we mutate other entries.
            let g = grads[id].take().unwrap();
            self.propagate(id, &g, grads)?;
            grads[id] = Some(g);
        }
        Ok(())
    }

    fn add_grad(&self, grads: &mut [Option<Vec<f64>>], to: TensorId, delta: &[f64]) {
        if !self.nodes[to.0].needs_grad {
            return;
        }
        match &mut grads[to.0] {
            None => grads[to.0] = Some(delta.to_vec()),
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a += d;
                }
            }
        }
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.add_grad(grads, *a, g);
                self.add_grad(grads, *b, g);
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].needs_grad {
                    let d: Vec<f64> = g.iter().zip(self.data(*b)).map(|(gv, bv)| gv * bv).collect();
                    self.add_grad(grads, *a, &d);
                }
                if self.nodes[b.0].needs_grad {
                    let d: Vec<f64> = g.iter().zip(self.data(*a)).map(|(gv, av)| gv * av).collect();
                    self.add_grad(grads, *b, &d);
                }
            }
            Op::Scale { a, c } => {
                let d: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                self.add_grad(grads, *a, &d);
            }
            Op::AddBias { a, bias } => {
                self.add_grad(grads, *a, g);
                if self.nodes[bias.0].needs_grad {
                    let m = self.shape(*bias)[0];
                    let mut d = vec![0.0; m];
                    for row in g.chunks(m) {
                        for (dv, gv) in d.iter_mut().zip(row) {
                            *dv += gv;
                        }
                    }
                    self.add_grad(grads, *bias, &d);
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.nodes[a.0].needs_grad {
                    // dA = dC·Bᵀ
                    let mut d = vec![0.0; m * k];
                    kernels::matmul_nt(g, self.data(*b), &mut d, m, n, k);
                    self.add_grad(grads, *a, &d);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ·dC
                    let mut d = vec![0.0; k * n];
                    kernels::matmul_tn(self.data(*a), g, &mut d, m, k, n);
                    self.add_grad(grads, *b, &d);
                }
            }
            Op::Transpose { a } => {
                let (n, m) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut d = vec![0.0; n * m];
                for i in 0..m {
                    for j in 0..n {
                        d[j * m + i] = g[i * n + j];
                    }
                }
                self.add_grad(grads, *a, &d);
            }
            Op::Reshape { a } => {
                self.add_grad(grads, *a, g);
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.data(p).len();
                    self.add_grad(grads, p, &g[off..off + len]);
                    off += len;
                }
            }
            Op::ConcatCols { parts } => {
                let n = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.nodes[p.0].needs_grad {
                        let mut d = vec![0.0; n * w];
                        for r in 0..n {
                            d[r * w..(r + 1) * w].copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        self.add_grad(grads, p, &d);
                    }
                    off += w;
                }
            }
            Op::SliceRows { a, start } => {
                let (n, m) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut d = vec![0.0; n * m];
                d[start * m..start * m + g.len()].copy_from_slice(g);
                self.add_grad(grads, *a, &d);
            }
            Op::SliceCols { a, start } => {
                let (n, m) = (self.shape(*a)[0], self.shape(*a)[1]);
                let w = node.shape[1];
                let mut d = vec![0.0; n * m];
                for r in 0..n {
                    d[r * m + start..r * m + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                self.add_grad(grads, *a, &d);
            }
            Op::Embed { table, ids } => {
                if self.nodes[table.0].needs_grad {
                    let (v, m) = (self.shape(*table)[0], self.shape(*table)[1]);
                    let mut d = vec![0.0; v * m];
                    for (r, &tid) in ids.iter().enumerate() {
                        for (dv, gv) in d[tid * m..(tid + 1) * m].iter_mut().zip(&g[r * m..(r + 1) * m]) {
                            *dv += gv;
                        }
                    }
                    self.add_grad(grads, *table, &d);
                }
            }
            Op::LayerNorm { a, gamma, beta, stats, .. } => {
                let (n, m) = (self.shape(*a)[0], self.shape(*a)[1]);
                let x = self.data(*a);
                let gam = self.data(*gamma);
                let inv_m = 1.0 / m as f64;
                let mut dx = vec![0.0; n * m];
                let mut dgamma = vec![0.0; m];
                let mut dbeta = vec![0.0; m];
                for r in 0..n {
                    let (mean, inv_std) = stats[r];
                    let xr = &x[r * m..(r + 1) * m];
                    let gr = &g[r * m..(r + 1) * m];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..m {
                        let xhat = (xr[j] - mean) * inv_std;
                        let dxhat = gr[j] * gam[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma[j] += gr[j] * xhat;
                        dbeta[j] += gr[j];
                    }
                    for j in 0..m {
                        let xhat = (xr[j] - mean) * inv_std;
                        let dxhat = gr[j] * gam[j];
                        dx[r * m + j] = inv_std * (dxhat - inv_m * sum_dxhat - xhat * inv_m * sum_dxhat_xhat);
                    }
                }
                self.add_grad(grads, *a, &dx);
                self.add_grad(grads, *gamma, &dgamma);
                self.add_grad(grads, *beta, &dbeta);
            }
            Op::Gelu { a } => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect();
                self.add_grad(grads, *a, &d);
            }
            Op::Softmax { a } => {
                let (n, m) = (node.shape[0], node.shape[1]);
                let y = &node.data;
                let mut d = vec![0.0; n * m];
                for r in 0..n {
                    let yr = &y[r * m..(r + 1) * m];
                    let gr = &g[r * m..(r + 1) * m];
                    let mut s = 0.0;
                    for j in 0..m {
                        s += yr[j] * gr[j];
                    }
                    for j in 0..m {
                        d[r * m + j] = yr[j] * (gr[j] - s);
                    }
                }
                self.add_grad(grads, *a, &d);
            }
            Op::MaskedSoftmax { a, mask } => {
                let l = mask.l;
                let y = &node.data;
                let mut d = vec![0.0; l * l];
                for r in 0..l {
                    let yr = &y[r * l..(r + 1) * l];
                    let gr = &g[r * l..(r + 1) * l];
                    let row = mask.row(r);
                    let mut s = 0.0;
                    for j in 0..l {
                        if row[j] {
                            s += yr[j] * gr[j];
                        }
                    }
                    for j in 0..l {
                        if row[j] {
                            d[r * l + j] = yr[j] * (gr[j] - s);
                        }
                    }
                }
                self.add_grad(grads, *a, &d);
            }
            Op::AttnApply { attn, v, mask } => {
                let l = mask.l;
                let dh = self.shape(*v)[1];
                let av = self.data(*attn);
                let vv = self.data(*v);
                if self.nodes[attn.0].needs_grad {
                    let mut d = vec![0.0; l * l];
                    for i in 0..l {
                        let gr = &g[i * dh..(i + 1) * dh];
                        for j in 0..l {
                            if mask.is_allowed(i, j) {
                                d[i * l + j] = kernels::dot(gr, &vv[j * dh..(j + 1) * dh]);
                            }
                        }
                    }
                    self.add_grad(grads, *attn, &d);
                }
                if self.nodes[v.0].needs_grad {
                    let mut d = vec![0.0; l * dh];
                    for i in 0..l {
                        let gr = &g[i * dh..(i + 1) * dh];
                        for j in 0..l {
                            if mask.is_allowed(i, j) {
                                let a_ij = av[i * l + j];
                                for (dv, gv) in d[j * dh..(j + 1) * dh].iter_mut().zip(gr) {
                                    *dv += a_ij * gv;
                                }
                            }
                        }
                    }
                    self.add_grad(grads, *v, &d);
                }
            }
            Op::Conv2dStride { x, w, b, k } => {
                let (h, wd, ci) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let co = self.shape(*w)[1];
                let k = *k;
                let (oh, ow) = (h / k, wd / k);
                let xv = self.data(*x);
                let wv = self.data(*w);
                let need_x = self.nodes[x.0].needs_grad;
                let need_w = self.nodes[w.0].needs_grad;
                let need_b = self.nodes[b.0].needs_grad;
                let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
                let mut dw = if need_w { vec![0.0; wv.len()] } else { Vec::new() };
                let mut db = if need_b { vec![0.0; co] } else { Vec::new() };
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gr = &g[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
                        if need_b {
                            for (dv, gv) in db.iter_mut().zip(gr) {
                                *dv += gv;
                            }
                        }
                        for ky in 0..k {
                            for kx in 0..k {
                                let x_base = ((oy * k + ky) * wd + (ox * k + kx)) * ci;
                                for c_in in 0..ci {
                                    let w_base = ((ky * k + kx) * ci + c_in) * co;
                                    if need_w {
                                        let xval = xv[x_base + c_in];
                                        for (dv, gv) in dw[w_base..w_base + co].iter_mut().zip(gr) {
                                            *dv += xval * gv;
                                        }
                                    }
                                    if need_x {
                                        dx[x_base + c_in] += kernels::dot(&wv[w_base..w_base + co], gr);
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    self.add_grad(grads, *x, &dx);
                }
                if need_w {
                    self.add_grad(grads, *w, &dw);
                }
                if need_b {
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::AreaDown { x, k } => {
                let (h, w, c) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let k = *k;
                let ow = w / k;
                let inv = 1.0 / ((k * k) as f64);
                let mut d = vec![0.0; h * w * c];
                for iy in 0..h {
                    for ix in 0..w {
                        let g_base = ((iy / k) * ow + ix / k) * c;
                        let d_base = (iy * w + ix) * c;
                        for ch in 0..c {
                            d[d_base + ch] = g[g_base + ch] * inv;
                        }
                    }
                }
                self.add_grad(grads, *x, &d);
            }
            Op::PixelShuffle { x, k } => {
                // Gradient of a permutation is the inverse permutation.
                let (h, w, cin) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let c = cin / (k * k);
                let mut d = vec![0.0; h * w * cin];
                kernels::pixel_unshuffle(g, h, w, c, *k, &mut d);
                self.add_grad(grads, *x, &d);
            }
            Op::PixelUnshuffle { x, k } => {
                let (hk, wk, c) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let (h, w) = (hk / k, wk / k);
                let mut d = vec![0.0; hk * wk * c];
                kernels::pixel_shuffle(g, h, w, c, *k, &mut d);
                self.add_grad(grads, *x, &d);
            }
            Op::CrossEntropy { logits, targets } => {
                if self.nodes[logits.0].needs_grad {
                    let (n, v) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                    let lv = self.data(*logits);
                    let gscale = g[0] / n as f64;
                    let mut d = vec![0.0; n * v];
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &lv[r * v..(r + 1) * v];
                        let drow = &mut d[r * v..(r + 1) * v];
                        drow.copy_from_slice(row);
                        kernels::softmax_row(drow);
                        drow[t] -= 1.0;
                        for dv in drow.iter_mut() {
                            *dv *= gscale;
                        }
                    }
                    self.add_grad(grads, *logits, &d);
                }
            }
            Op::Mse { a, b } => {
                let n = self.data(*a).len() as f64;
                let scale = g[0] * 2.0 / n;
                if self.nodes[a.0].needs_grad {
                    let d: Vec<f64> = self
                        .data(*a)
                        .iter()
                        .zip(self.data(*b))
                        .map(|(x, y)| scale * (x - y))
                        .collect();
                    self.add_grad(grads, *a, &d);
                }
                if self.nodes[b.0].needs_grad {
                    let d: Vec<f64> = self
                        .data(*a)
                        .iter()
                        .zip(self.data(*b))
                        .map(|(x, y)| -scale * (x - y))
                        .collect();
                    self.add_grad(grads, *b, &d);
                }
            }
            Op::Sum { a } => {
                let d = vec![g[0]; self.data(*a).len()];
                self.add_grad(grads, *a, &d);
            }
        }
        Ok(())
    }
}
