//! Wengert tape: eager forward evaluation with recorded backward rules.
//!
//! Values live in an arena indexed by [`ValueId`]. Recording an operation
//! computes its output immediately and stores whatever the backward rule
//! needs. [`Tape::backward`] walks the arena in reverse, accumulating
//! gradients in a fixed order, so identical tapes yield bit-identical
//! gradients.
//!
//! Shape violations are programming errors and panic; numeric error states
//! (a non-finite value escaping an op) poison the tape and surface as
//! `Err` from [`Tape::ensure_finite`] / [`Tape::backward`].

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const LN_EPS: f32 = 1e-5;
const MASK_OFF: f32 = -1e9;

#[derive(Debug)]
pub enum Op {
    Leaf { requires_grad: bool },
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    MulScalar(ValueId, f32),
    /// `x[n,m] + bias[m]`, bias added to every row.
    AddRowBroadcast(ValueId, ValueId),
    Matmul(ValueId, ValueId),
    Transpose(ValueId),
    Reshape(ValueId),
    Relu(ValueId),
    Gelu(ValueId),
    Exp(ValueId),
    Softmax { x: ValueId, axis: usize },
    LogSoftmax { x: ValueId, axis: usize },
    LayerNorm { x: ValueId, gain: ValueId, bias: ValueId, xhat: Vec<f32>, inv_std: Vec<f32> },
    Sum(ValueId),
    Mean(ValueId),
    ConcatRows(Vec<ValueId>),
    SliceRows { x: ValueId, start: usize },
    SliceCols { x: ValueId, start: usize },
    ConcatCols(Vec<ValueId>),
    /// Row gather from an embedding table.
    Embedding { table: ValueId, indices: Vec<usize> },
    /// 2-D convolution, stride 1, zero padding `k/2` (spatial size preserved).
    Conv2d { x: ValueId, w: ValueId, b: ValueId, height: usize, width: usize },
    /// Mean cross-entropy of `softmax(logits)` rows against class targets.
    CrossEntropyLogits { logits: ValueId, targets: Vec<usize>, probs: Vec<f32> },
    /// `out[i] = x[i, idx[i]]`.
    GatherPerRow { x: ValueId, indices: Vec<usize> },
    MinElem(ValueId, ValueId),
    Clamp { x: ValueId, lo: f32, hi: f32 },
    L2NormalizeRows { x: ValueId, norms: Vec<f32> },
}

struct Node {
    data: Vec<f32>,
    shape: Vec<usize>,
    grad_needed: bool,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by [`ValueId`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient buffer for a leaf, zeros when the leaf is off every path to
    /// the loss.
    pub fn for_leaf(&self, id: ValueId, numel: usize) -> Vec<f32> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; numel],
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    poisoned: Option<String>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn num_values(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: ValueId) -> &[f32] {
        &self.nodes[id.0].data
    }

    /// Scalar value of a single-element node.
    pub fn value(&self, id: ValueId) -> f32 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn tensor(&self, id: ValueId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.data.clone())
    }

    /// Err if any recorded op produced a non-finite value.
    pub fn ensure_finite(&self) -> Result<(), TensorError> {
        match &self.poisoned {
            Some(op) => Err(TensorError::NonFinite(op.clone())),
            None => Ok(()),
        }
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> ValueId {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, requires_grad, Op::Leaf { requires_grad })
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> ValueId {
        self.leaf(t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> ValueId {
        self.leaf(shape, data, false)
    }

    pub fn scalar_constant(&mut self, v: f32) -> ValueId {
        self.leaf(vec![], vec![v], false)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, grad_needed: bool, op: Op) -> ValueId {
        if self.poisoned.is_none() && data.iter().any(|v| !v.is_finite()) {
            self.poisoned = Some(op_name(&op).to_string());
        }
        self.nodes.push(Node { data, shape, grad_needed, op });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].grad_needed
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data: Vec<f32> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push(shape, data, needs, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let data: Vec<f32> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push(shape, data, needs, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data: Vec<f32> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push(shape, data, needs, Op::Mul(a, b))
    }

    pub fn mul_scalar(&mut self, a: ValueId, c: f32) -> ValueId {
        let data: Vec<f32> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push(shape, data, needs, Op::MulScalar(a, c))
    }

    pub fn add_row_broadcast(&mut self, x: ValueId, bias: ValueId) -> ValueId {
        let (n, m) = self.dims2(x);
        assert_eq!(self.shape(bias), [m], "bias length mismatch");
        let mut data = self.data(x).to_vec();
        let b = self.data(bias);
        for r in 0..n {
            for c in 0..m {
                data[r * m + c] += b[c];
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        self.push(vec![n, m], data, needs, Op::AddRowBroadcast(x, bias))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let data: Vec<f32> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(shape, data, needs, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: ValueId) -> ValueId {
        let data: Vec<f32> = self.data(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(shape, data, needs, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: ValueId) -> ValueId {
        let data: Vec<f32> = self.data(x).iter().map(|v| v.exp()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(shape, data, needs, Op::Exp(x))
    }

    pub fn min_elem(&mut self, a: ValueId, b: ValueId) -> ValueId {
        assert_eq!(self.shape(a), self.shape(b), "min shape mismatch");
        let data: Vec<f32> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x.min(*y)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push(shape, data, needs, Op::MinElem(a, b))
    }

    pub fn clamp(&mut self, x: ValueId, lo: f32, hi: f32) -> ValueId {
        let data: Vec<f32> = self.data(x).iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(shape, data, needs, Op::Clamp { x, lo, hi })
    }

    // ── linear algebra ──────────────────────────────────────────────────

    fn dims2(&self, id: ValueId) -> (usize, usize) {
        let s = self.shape(id);
        assert_eq!(s.len(), 2, "expected matrix, got shape {:?}", s);
        (s[0], s[1])
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
        let mut out = vec![0.0f32; m * n];
        matmul_kernel(self.data(a), self.data(b), m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![m, n], out, needs, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, x: ValueId) -> ValueId {
        let (r, c) = self.dims2(x);
        let src = self.data(x);
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(x);
        self.push(vec![c, r], out, needs, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> ValueId {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data(x).len(),
            "reshape numel mismatch"
        );
        let data = self.data(x).to_vec();
        let needs = self.needs(x);
        self.push(shape, data, needs, Op::Reshape(x))
    }

    // ── normalization / softmax ─────────────────────────────────────────

    pub fn softmax(&mut self, x: ValueId, axis: usize) -> ValueId {
        let shape = self.nodes[x.0].shape.clone();
        let data = softmax_kernel(self.data(x), &shape, axis, false);
        let needs = self.needs(x);
        self.push(shape, data, needs, Op::Softmax { x, axis })
    }

    pub fn log_softmax(&mut self, x: ValueId, axis: usize) -> ValueId {
        let shape = self.nodes[x.0].shape.clone();
        let data = softmax_kernel(self.data(x), &shape, axis, true);
        let needs = self.needs(x);
        self.push(shape, data, needs, Op::LogSoftmax { x, axis })
    }

    /// Layer norm over the last axis of `x[n,d]`, then scale by `gain[d]`
    /// and shift by `bias[d]`.
    pub fn layer_norm(&mut self, x: ValueId, gain: ValueId, bias: ValueId) -> ValueId {
        let (n, d) = self.dims2(x);
        assert_eq!(self.shape(gain), [d]);
        assert_eq!(self.shape(bias), [d]);
        let src = self.data(x);
        let mut xhat = vec![0.0f32; n * d];
        let mut inv_std = vec![0.0f32; n];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                xhat[r * d + c] = (row[c] - mean) * is;
            }
        }
        let g = self.data(gain);
        let b = self.data(bias);
        let mut out = vec![0.0f32; n * d];
        for r in 0..n {
            for c in 0..d {
                out[r * d + c] = xhat[r * d + c] * g[c] + b[c];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(vec![n, d], out, needs, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    pub fn l2_normalize_rows(&mut self, x: ValueId) -> Result<ValueId, TensorError> {
        let (n, d) = self.dims2(x);
        let src = self.data(x);
        let mut norms = vec![0.0f32; n];
        for r in 0..n {
            let s: f32 = src[r * d..(r + 1) * d].iter().map(|v| v * v).sum();
            let norm = s.sqrt();
            if norm < 1e-12 {
                return Err(TensorError::ZeroNormRow(r));
            }
            norms[r] = norm;
        }
        let mut out = vec![0.0f32; n * d];
        for r in 0..n {
            for c in 0..d {
                out[r * d + c] = src[r * d + c] / norms[r];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![n, d], out, needs, Op::L2NormalizeRows { x, norms }))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let s: f32 = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(vec![], vec![s], needs, Op::Sum(x))
    }

    pub fn mean(&mut self, x: ValueId) -> ValueId {
        let n = self.data(x).len() as f32;
        let s: f32 = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(vec![], vec![s / n], needs, Op::Mean(x))
    }

    // ── structural ──────────────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty());
        let (_, m) = self.dims2(parts[0]);
        let mut rows = 0;
        let mut data = Vec::new();
        let mut needs = false;
        for &p in parts {
            let (r, c) = self.dims2(p);
            assert_eq!(c, m, "concat_rows column mismatch");
            rows += r;
            data.extend_from_slice(self.data(p));
            needs |= self.needs(p);
        }
        self.push(vec![rows, m], data, needs, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: ValueId, start: usize, len: usize) -> ValueId {
        let (n, m) = self.dims2(x);
        assert!(start + len <= n, "slice_rows out of range");
        let data = self.data(x)[start * m..(start + len) * m].to_vec();
        let needs = self.needs(x);
        self.push(vec![len, m], data, needs, Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: ValueId, start: usize, len: usize) -> ValueId {
        let (n, m) = self.dims2(x);
        assert!(start + len <= m, "slice_cols out of range");
        let src = self.data(x);
        let mut data = vec![0.0f32; n * len];
        for r in 0..n {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&src[r * m + start..r * m + start + len]);
        }
        let needs = self.needs(x);
        self.push(vec![n, len], data, needs, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty());
        let (n, _) = self.dims2(parts[0]);
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims2(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0f32; n * total];
        let mut needs = false;
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let (r, _) = self.dims2(p);
            assert_eq!(r, n, "concat_cols row mismatch");
            let src = self.data(p);
            for row in 0..n {
                data[row * total + off..row * total + off + w]
                    .copy_from_slice(&src[row * w..(row + 1) * w]);
            }
            needs |= self.needs(p);
            off += w;
        }
        self.push(vec![n, total], data, needs, Op::ConcatCols(parts.to_vec()))
    }

    /// Gather `indices` rows of `table[v,d]` into `[len(indices), d]`.
    pub fn embedding(&mut self, table: ValueId, indices: &[usize]) -> ValueId {
        let (v, d) = self.dims2(table);
        let src = self.data(table);
        let mut data = vec![0.0f32; indices.len() * d];
        for (i, &ix) in indices.iter().enumerate() {
            assert!(ix < v, "embedding index {} out of range {}", ix, v);
            data[i * d..(i + 1) * d].copy_from_slice(&src[ix * d..(ix + 1) * d]);
        }
        let needs = self.needs(table);
        self.push(
            vec![indices.len(), d],
            data,
            needs,
            Op::Embedding { table, indices: indices.to_vec() },
        )
    }

    /// 2-D convolution of `x[cin,h,w]` with `w[cout,cin,k,k]` plus bias
    /// `[cout]`; stride 1, zero padding `k/2`, so the spatial map is
    /// preserved.
    pub fn conv2d(&mut self, x: ValueId, w: ValueId, b: ValueId) -> ValueId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv input must be [cin,h,w]");
        assert_eq!(ws.len(), 4, "conv weight must be [cout,cin,k,k]");
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin);
        assert_eq!(ws[3], k);
        assert_eq!(self.shape(b), [cout]);
        let pad = k / 2;
        let xd = self.data(x);
        let wdta = self.data(w);
        let bd = self.data(b);
        let mut out = vec![0.0f32; cout * h * wd];
        for o in 0..cout {
            for y in 0..h {
                for xo in 0..wd {
                    let mut acc = bd[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            let yi = y as isize + ky as isize - pad as isize;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let xi = xo as isize + kx as isize - pad as isize;
                                if xi < 0 || xi >= wd as isize {
                                    continue;
                                }
                                acc += xd[(c * h + yi as usize) * wd + xi as usize]
                                    * wdta[((o * cin + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[(o * h + y) * wd + xo] = acc;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(vec![cout, h, wd], out, needs, Op::Conv2d { x, w, b, height: h, width: wd })
    }

    // ── loss helpers ────────────────────────────────────────────────────

    /// Mean cross-entropy between `softmax(logits[n,k])` and one-hot
    /// `targets`.
    pub fn cross_entropy_logits(&mut self, logits: ValueId, targets: &[usize]) -> ValueId {
        let (n, k) = self.dims2(logits);
        assert_eq!(targets.len(), n, "target count mismatch");
        let probs = softmax_kernel(self.data(logits), &[n, k], 1, false);
        let src = self.data(logits);
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < k, "target class {} out of range {}", t, k);
            let row = &src[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse: f32 = row.iter().map(|v| (v - max).exp()).sum::<f32>().ln() + max;
            total += f64::from(lse - row[t]);
        }
        let needs = self.needs(logits);
        self.push(
            vec![],
            vec![(total / n as f64) as f32],
            needs,
            Op::CrossEntropyLogits { logits, targets: targets.to_vec(), probs },
        )
    }

    /// `out[i] = x[i, indices[i]]` for each row of `x[n,m]`.
    pub fn gather_per_row(&mut self, x: ValueId, indices: &[usize]) -> ValueId {
        let (n, m) = self.dims2(x);
        assert_eq!(indices.len(), n);
        let src = self.data(x);
        let data: Vec<f32> = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < m, "gather index {} out of range {}", c, m);
                src[r * m + c]
            })
            .collect();
        let needs = self.needs(x);
        self.push(vec![n], data, needs, Op::GatherPerRow { x, indices: indices.to_vec() })
    }

    // ── composites ──────────────────────────────────────────────────────

    /// Scaled dot-product attention over matrices `q[n,dk]`, `k[m,dk]`,
    /// `v[m,dv]`. Returns `(output[n,dv], probs[n,m])`. `mask`, when given,
    /// is row-major `[n,m]` with `true` = attendable; masked scores get a
    /// large negative offset before the softmax.
    pub fn attention(
        &mut self,
        q: ValueId,
        k: ValueId,
        v: ValueId,
        mask: Option<&[bool]>,
    ) -> (ValueId, ValueId) {
        let (_, dk) = self.dims2(q);
        let kt = self.transpose(k);
        let scores = self.matmul(q, kt);
        let scaled = self.mul_scalar(scores, 1.0 / (dk as f32).sqrt());
        let logits = match mask {
            Some(mask) => {
                let (n, m) = self.dims2(scaled);
                assert_eq!(mask.len(), n * m, "mask shape mismatch");
                let bias: Vec<f32> =
                    mask.iter().map(|&keep| if keep { 0.0 } else { MASK_OFF }).collect();
                let bias = self.constant(vec![n, m], bias);
                self.add(scaled, bias)
            }
            None => scaled,
        };
        let probs = self.softmax(logits, 1);
        let out = self.matmul(probs, v);
        (out, probs)
    }

    /// Column mean over rows: `x[n,d] -> [1,d]`.
    pub fn mean_rows(&mut self, x: ValueId) -> ValueId {
        let (n, _) = self.dims2(x);
        let ones = self.constant(vec![1, n], vec![1.0 / n as f32; n]);
        self.matmul(ones, x)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss`. Every value that influences
    /// the loss and needs a gradient receives one; leaves off the path get
    /// zeros from [`Gradients::for_leaf`].
    pub fn backward(&self, loss: ValueId) -> Result<Gradients, TensorError> {
        self.ensure_finite()?;
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].grad_needed {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], id: ValueId, add: impl Fn(&mut [f32])) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id.0].data.len()]);
        }
        add(slot.as_mut().unwrap());
    }

    fn backward_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, gi) in ga.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (x, gi) in gb.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, gi) in ga.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (x, gi) in gb.iter_mut().zip(g) {
                        *x -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * bd[k];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * ad[k];
                    }
                });
            }
            Op::MulScalar(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * c;
                    }
                });
            }
            Op::AddRowBroadcast(x, bias) => {
                let m = self.shape(*bias)[0];
                self.accumulate(grads, *x, |gx| {
                    for (v, gi) in gx.iter_mut().zip(g) {
                        *v += gi;
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for (k, gi) in g.iter().enumerate() {
                        gb[k % m] += gi;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                // dA = g @ B^T
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bd[p * n + j];
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                });
                // dB = A^T @ g
                self.accumulate(grads, *b, |gb| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += ad[i * k + p] * g[i * n + j];
                            }
                            gb[p * n + j] += acc;
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| {
                    for (v, gi) in gx.iter_mut().zip(g) {
                        *v += gi;
                    }
                });
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                self.accumulate(grads, *x, |gx| {
                    for k in 0..g.len() {
                        if xd[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                self.accumulate(grads, *x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * gelu_grad(xd[k]);
                    }
                });
            }
            Op::Exp(x) => {
                let yd = &self.nodes[i].data;
                self.accumulate(grads, *x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * yd[k];
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[i].data;
                let shape = &self.nodes[i].shape;
                let (outer, len, inner) = axis_split(shape, *axis);
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let mut dot = 0.0f32;
                            for a in 0..len {
                                let idx = base + a * inner;
                                dot += g[idx] * y[idx];
                            }
                            for a in 0..len {
                                let idx = base + a * inner;
                                gx[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let y = &self.nodes[i].data;
                let shape = &self.nodes[i].shape;
                let (outer, len, inner) = axis_split(shape, *axis);
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let mut gsum = 0.0f32;
                            for a in 0..len {
                                gsum += g[base + a * inner];
                            }
                            for a in 0..len {
                                let idx = base + a * inner;
                                gx[idx] += g[idx] - y[idx].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = self.shape(*gain)[0];
                let n = self.shape(*x)[0];
                let gd = self.data(*gain);
                self.accumulate(grads, *gain, |gg| {
                    for r in 0..n {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for r in 0..n {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    for r in 0..n {
                        let mut mean_gh = 0.0f32;
                        let mut mean_ghx = 0.0f32;
                        for c in 0..d {
                            let gh = g[r * d + c] * gd[c];
                            mean_gh += gh;
                            mean_ghx += gh * xhat[r * d + c];
                        }
                        mean_gh /= d as f32;
                        mean_ghx /= d as f32;
                        for c in 0..d {
                            let gh = g[r * d + c] * gd[c];
                            gx[r * d + c] +=
                                inv_std[r] * (gh - mean_gh - xhat[r * d + c] * mean_ghx);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let gs = g[0];
                self.accumulate(grads, *x, |gx| {
                    for v in gx.iter_mut() {
                        *v += gs;
                    }
                });
            }
            Op::Mean(x) => {
                let gs = g[0] / self.nodes[x.0].data.len() as f32;
                self.accumulate(grads, *x, |gx| {
                    for v in gx.iter_mut() {
                        *v += gs;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].data.len();
                    self.accumulate(grads, p, |gp| {
                        for k in 0..len {
                            gp[k] += g[off + k];
                        }
                    });
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let m = self.shape(*x)[1];
                let off = start * m;
                self.accumulate(grads, *x, |gx| {
                    for (k, gi) in g.iter().enumerate() {
                        gx[off + k] += gi;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let m = self.shape(*x)[1];
                let len = self.nodes[i].shape[1];
                let n = self.nodes[i].shape[0];
                self.accumulate(grads, *x, |gx| {
                    for r in 0..n {
                        for c in 0..len {
                            gx[r * m + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = self.nodes[i].shape[0];
                let total = self.nodes[i].shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.accumulate(grads, p, |gp| {
                        for r in 0..n {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Embedding { table, indices } => {
                let d = self.shape(*table)[1];
                self.accumulate(grads, *table, |gt| {
                    for (row, &ix) in indices.iter().enumerate() {
                        for c in 0..d {
                            gt[ix * d + c] += g[row * d + c];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, height, width } => {
                let (h, wd) = (*height, *width);
                let ws = self.shape(*w);
                let (cout, cin, k) = (ws[0], ws[1], ws[2]);
                let pad = (k / 2) as isize;
                let xd = self.data(*x);
                let wdta = self.data(*w);
                self.accumulate(grads, *b, |gb| {
                    for o in 0..cout {
                        let plane = &g[o * h * wd..(o + 1) * h * wd];
                        gb[o] += plane.iter().sum::<f32>();
                    }
                });
                self.accumulate(grads, *w, |gw| {
                    for o in 0..cout {
                        for c in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let mut acc = 0.0f32;
                                    for y in 0..h {
                                        let yi = y as isize + ky as isize - pad;
                                        if yi < 0 || yi >= h as isize {
                                            continue;
                                        }
                                        for xo in 0..wd {
                                            let xi = xo as isize + kx as isize - pad;
                                            if xi < 0 || xi >= wd as isize {
                                                continue;
                                            }
                                            acc += g[(o * h + y) * wd + xo]
                                                * xd[(c * h + yi as usize) * wd + xi as usize];
                                        }
                                    }
                                    gw[((o * cin + c) * k + ky) * k + kx] += acc;
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    for c in 0..cin {
                        for yi in 0..h {
                            for xi in 0..wd {
                                let mut acc = 0.0f32;
                                for o in 0..cout {
                                    for ky in 0..k {
                                        let y = yi as isize - ky as isize + pad;
                                        if y < 0 || y >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let xo = xi as isize - kx as isize + pad;
                                            if xo < 0 || xo >= wd as isize {
                                                continue;
                                            }
                                            acc += g[(o * h + y as usize) * wd + xo as usize]
                                                * wdta[((o * cin + c) * k + ky) * k + kx];
                                        }
                                    }
                                }
                                gx[(c * h + yi) * wd + xi] += acc;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropyLogits { logits, targets, probs } => {
                let k = self.shape(*logits)[1];
                let n = targets.len();
                let gs = g[0] / n as f32;
                self.accumulate(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[r * k + c] += gs * (probs[r * k + c] - onehot);
                        }
                    }
                });
            }
            Op::GatherPerRow { x, indices } => {
                let m = self.shape(*x)[1];
                self.accumulate(grads, *x, |gx| {
                    for (r, &c) in indices.iter().enumerate() {
                        gx[r * m + c] += g[r];
                    }
                });
            }
            Op::MinElem(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| {
                    for k in 0..g.len() {
                        if ad[k] <= bd[k] {
                            ga[k] += g[k];
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for k in 0..g.len() {
                        if bd[k] < ad[k] {
                            gb[k] += g[k];
                        }
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.data(*x);
                let (lo, hi) = (*lo, *hi);
                self.accumulate(grads, *x, |gx| {
                    for k in 0..g.len() {
                        if xd[k] >= lo && xd[k] <= hi {
                            gx[k] += g[k];
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let d = self.shape(*x)[1];
                let y = &self.nodes[i].data;
                self.accumulate(grads, *x, |gx| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            gx[r * d + c] += (gr[c] - yr[c] * dot) / norm;
                        }
                    }
                });
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::MulScalar(..) => "mul_scalar",
        Op::AddRowBroadcast(..) => "add_row_broadcast",
        Op::Matmul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::Relu(..) => "relu",
        Op::Gelu(..) => "gelu",
        Op::Exp(..) => "exp",
        Op::Softmax { .. } => "softmax",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::Embedding { .. } => "embedding",
        Op::Conv2d { .. } => "conv2d",
        Op::CrossEntropyLogits { .. } => "cross_entropy_logits",
        Op::GatherPerRow { .. } => "gather_per_row",
        Op::MinElem(..) => "min_elem",
        Op::Clamp { .. } => "clamp",
        Op::L2NormalizeRows { .. } => "l2_normalize_rows",
    }
}

/// Split `shape` into (outer, axis length, inner) strides around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    if shape.is_empty() {
        return (1, 1, 1);
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Max-subtracted softmax (or log-softmax) along `axis`.
fn softmax_kernel(data: &[f32], shape: &[usize], axis: usize, log: bool) -> Vec<f32> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0f32; data.len()];
    for o in 0..outer {
        for ii in 0..inner {
            let base = o * len * inner + ii;
            let mut max = f32::NEG_INFINITY;
            for a in 0..len {
                max = max.max(data[base + a * inner]);
            }
            let mut denom = 0.0f32;
            for a in 0..len {
                denom += (data[base + a * inner] - max).exp();
            }
            if log {
                let lse = denom.ln();
                for a in 0..len {
                    let idx = base + a * inner;
                    out[idx] = data[idx] - max - lse;
                }
            } else {
                for a in 0..len {
                    let idx = base + a * inner;
                    out[idx] = (data[idx] - max).exp() / denom;
                }
            }
        }
    }
    out
}

fn matmul_kernel(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
