//! Reverse-mode automatic differentiation over a flat op arena.
//!
//! A [`Tape`] owns every tensor produced during one forward computation.
//! Ops evaluate eagerly and append a [`Node`] holding the result; a node
//! remembers how it was made only when at least one input is tracked, so
//! constants and detached data cost nothing at backward time. [`Tape::backward`]
//! walks the arena once in reverse and returns per-leaf gradients.
//!
//! The arena is append-only and every op reads values already on the tape,
//! which makes a replayed computation produce a bit-identical tape.

pub mod gradcheck;
pub mod kernels;

use crate::error::{Error, Result};

/// Handle to a tensor on a [`Tape`]. Cheap to copy; only meaningful for the
/// tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorRef {
    id: usize,
}

/// How a node's value was computed, with whatever the backward pass needs.
enum Op {
    /// Leaf or detached result: nothing flows through it.
    Constant,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Relu { a: usize },
    /// `[rows, cols] + [cols]`, bias added to every row.
    AddRowBroadcast { a: usize, bias: usize, cols: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    /// `out = aᵀ @ b` with `a: [k, m]`, `b: [k, n]`.
    MatmulTa { a: usize, b: usize, k: usize, m: usize, n: usize },
    /// `out = a @ bᵀ` with `a: [m, k]`, `b: [n, k]`.
    MatmulTb { a: usize, b: usize, m: usize, k: usize, n: usize },
    Conv2d {
        x: usize,
        w: usize,
        bias: usize,
        batch: usize,
        ci: usize,
        h: usize,
        wid: usize,
        co: usize,
        kh: usize,
        kw: usize,
        pad: usize,
    },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    /// Rows of length `s` normalized to zero mean / unit variance.
    RowNormalize { x: usize, s: usize, means: Vec<f64>, istds: Vec<f64> },
    /// `y[p, c, i] = x[p, c, i] * gamma[c] + beta[c]` over `planes x ch x inner`.
    ChannelAffine { x: usize, gamma: usize, beta: usize, planes: usize, ch: usize, inner: usize },
    Softmax { x: usize, cols: usize },
    /// Per-row cross entropy; softmax probabilities kept for backward.
    SoftmaxXent { x: usize, cols: usize, labels: Vec<usize>, probs: Vec<f64> },
    MeanAll { x: usize, n: usize },
    /// Column sums: `[rows, cols] -> [cols]`.
    SumAxis0 { x: usize, rows: usize, cols: usize },
    Reshape { x: usize },
    SliceRows { x: usize, start: usize, cols: usize, total_rows: usize },
    ConcatRows { a: usize, b: usize, rows_a: usize, cols: usize },
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    tracked: bool,
    op: Op,
}

/// Gradients returned by [`Tape::backward`], indexed by the node that earned
/// them. Only tracked nodes reachable from the loss have entries.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: TensorRef) -> Option<&[f64]> {
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }

    /// Move the gradient for `t` out, leaving `None` behind.
    pub fn take(&mut self, t: TensorRef) -> Option<Vec<f64>> {
        self.grads.get_mut(t.id).and_then(|g| g.take())
    }
}

/// Flat arena of tensors plus the recorded ops connecting them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, t: TensorRef) -> &[f64] {
        &self.nodes[t.id].value
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        &self.nodes[t.id].shape
    }

    pub fn is_tracked(&self, t: TensorRef) -> bool {
        self.nodes[t.id].tracked
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, t: TensorRef) -> f64 {
        debug_assert_eq!(self.nodes[t.id].value.len(), 1);
        self.nodes[t.id].value[0]
    }

    /// Put a tensor on the tape. Tracked leaves are differentiation roots.
    pub fn leaf(&mut self, value: Vec<f64>, shape: &[usize], tracked: bool) -> Result<TensorRef> {
        if value.len() != numel(shape) {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                detail: format!("{} values for shape {:?}", value.len(), shape),
            });
        }
        Ok(self.push(value, shape.to_vec(), tracked, Op::Constant))
    }

    /// Untracked leaf: participates in forward math, invisible to backward.
    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<TensorRef> {
        self.leaf(value, shape, false)
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, tracked: bool, op: Op) -> TensorRef {
        // An untracked result never needs replay context; drop it so backward
        // skips the node entirely.
        let op = if tracked { op } else { Op::Constant };
        self.nodes.push(Node { value, shape, tracked, op });
        TensorRef { id: self.nodes.len() - 1 }
    }

    fn same_shape(&self, op: &'static str, a: TensorRef, b: TensorRef) -> Result<()> {
        if self.nodes[a.id].shape != self.nodes[b.id].shape {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[a.id].shape, self.nodes[b.id].shape
                ),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.same_shape("add", a, b)?;
        let value: Vec<f64> = self.nodes[a.id]
            .value
            .iter()
            .zip(&self.nodes[b.id].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.id].shape.clone();
        let tracked = self.nodes[a.id].tracked || self.nodes[b.id].tracked;
        Ok(self.push(value, shape, tracked, Op::Add { a: a.id, b: b.id }))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.same_shape("sub", a, b)?;
        let value: Vec<f64> = self.nodes[a.id]
            .value
            .iter()
            .zip(&self.nodes[b.id].value)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.id].shape.clone();
        let tracked = self.nodes[a.id].tracked || self.nodes[b.id].tracked;
        Ok(self.push(value, shape, tracked, Op::Sub { a: a.id, b: b.id }))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.same_shape("mul", a, b)?;
        let value: Vec<f64> = self.nodes[a.id]
            .value
            .iter()
            .zip(&self.nodes[b.id].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.id].shape.clone();
        let tracked = self.nodes[a.id].tracked || self.nodes[b.id].tracked;
        Ok(self.push(value, shape, tracked, Op::Mul { a: a.id, b: b.id }))
    }

    pub fn scale(&mut self, a: TensorRef, c: f64) -> TensorRef {
        let value: Vec<f64> = self.nodes[a.id].value.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.id].shape.clone();
        let tracked = self.nodes[a.id].tracked;
        self.push(value, shape, tracked, Op::Scale { a: a.id, c })
    }

    pub fn relu(&mut self, a: TensorRef) -> TensorRef {
        let value: Vec<f64> = self.nodes[a.id].value.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.nodes[a.id].shape.clone();
        let tracked = self.nodes[a.id].tracked;
        self.push(value, shape, tracked, Op::Relu { a: a.id })
    }

    /// `[rows, cols] + [cols]`: add `bias` to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: TensorRef, bias: TensorRef) -> Result<TensorRef> {
        let (_rows, cols) = self.as_matrix("add_row_broadcast", a)?;
        if self.nodes[bias.id].value.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                detail: format!("bias len {} for {cols} columns", self.nodes[bias.id].value.len()),
            });
        }
        let mut value = self.nodes[a.id].value.clone();
        for row in value.chunks_exact_mut(cols) {
            for (v, &b) in row.iter_mut().zip(&self.nodes[bias.id].value) {
                *v += b;
            }
        }
        let shape = self.nodes[a.id].shape.clone();
        let tracked = self.nodes[a.id].tracked || self.nodes[bias.id].tracked;
        Ok(self.push(
            value,
            shape,
            tracked,
            Op::AddRowBroadcast { a: a.id, bias: bias.id, cols },
        ))
    }

    fn as_matrix(&self, op: &'static str, t: TensorRef) -> Result<(usize, usize)> {
        let shape = &self.nodes[t.id].shape;
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("expected a matrix, got shape {shape:?}"),
            });
        }
        Ok((shape[0], shape[1]))
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (m, k) = self.as_matrix("matmul", a)?;
        let (k2, n) = self.as_matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("[{m},{k}] @ [{k2},{n}]"),
            });
        }
        let mut value = vec![0.0; m * n];
        kernels::matmul(&self.nodes[a.id].value, &self.nodes[b.id].value, m, k, n, &mut value);
        let tracked = self.nodes[a.id].tracked || self.nodes[b.id].tracked;
        Ok(self.push(value, vec![m, n], tracked, Op::Matmul { a: a.id, b: b.id, m, k, n }))
    }

    /// `aᵀ @ b` with `a: [k, m]`, `b: [k, n]` -> `[m, n]`.
    pub fn matmul_ta(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (k, m) = self.as_matrix("matmul_ta", a)?;
        let (k2, n) = self.as_matrix("matmul_ta", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_ta",
                detail: format!("[{k},{m}]ᵀ @ [{k2},{n}]"),
            });
        }
        let mut value = vec![0.0; m * n];
        kernels::matmul_ta(&self.nodes[a.id].value, &self.nodes[b.id].value, k, m, n, &mut value);
        let tracked = self.nodes[a.id].tracked || self.nodes[b.id].tracked;
        Ok(self.push(value, vec![m, n], tracked, Op::MatmulTa { a: a.id, b: b.id, k, m, n }))
    }

    /// `a @ bᵀ` with `a: [m, k]`, `b: [n, k]` -> `[m, n]`.
    pub fn matmul_tb(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (m, k) = self.as_matrix("matmul_tb", a)?;
        let (n, k2) = self.as_matrix("matmul_tb", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_tb",
                detail: format!("[{m},{k}] @ [{n},{k2}]ᵀ"),
            });
        }
        let mut value = vec![0.0; m * n];
        kernels::matmul_tb(&self.nodes[a.id].value, &self.nodes[b.id].value, m, k, n, &mut value);
        let tracked = self.nodes[a.id].tracked || self.nodes[b.id].tracked;
        Ok(self.push(value, vec![m, n], tracked, Op::MatmulTb { a: a.id, b: b.id, m, k, n }))
    }

    /// Stride-1 convolution with symmetric zero padding.
    /// `x: [batch, ci, h, w]`, `w: [co, ci, kh, kw]`, `bias: [co]`.
    pub fn conv2d(
        &mut self,
        x: TensorRef,
        w: TensorRef,
        bias: TensorRef,
        pad: usize,
    ) -> Result<TensorRef> {
        let xs = self.nodes[x.id].shape.clone();
        let ws = self.nodes[w.id].shape.clone();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {xs:?}, weight {ws:?}"),
            });
        }
        let (batch, ci, h, wid) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        if self.nodes[bias.id].value.len() != co {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias len {} for {co} output channels", self.nodes[bias.id].value.len()),
            });
        }
        if h + 2 * pad < kh || wid + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {h}x{wid} (pad {pad})"),
            });
        }
        let (oh, ow) = kernels::conv2d_out_hw(h, wid, kh, kw, pad);
        let mut value = vec![0.0; batch * co * oh * ow];
        kernels::conv2d_forward(
            &self.nodes[x.id].value,
            &self.nodes[w.id].value,
            &self.nodes[bias.id].value,
            batch,
            ci,
            h,
            wid,
            co,
            kh,
            kw,
            pad,
            &mut value,
        );
        let tracked =
            self.nodes[x.id].tracked || self.nodes[w.id].tracked || self.nodes[bias.id].tracked;
        Ok(self.push(
            value,
            vec![batch, co, oh, ow],
            tracked,
            Op::Conv2d { x: x.id, w: w.id, bias: bias.id, batch, ci, h, wid, co, kh, kw, pad },
        ))
    }

    /// 2x2 max pooling, stride 2, on `[batch, c, h, w]` with even `h`, `w`.
    pub fn maxpool2(&mut self, x: TensorRef) -> Result<TensorRef> {
        let xs = self.nodes[x.id].shape.clone();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "maxpool2",
                detail: format!("need [b, c, 2i, 2j], got {xs:?}"),
            });
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let mut value = vec![0.0; planes * (h / 2) * (w / 2)];
        let mut argmax = vec![0usize; value.len()];
        kernels::maxpool2_forward(&self.nodes[x.id].value, planes, h, w, &mut value, &mut argmax);
        let tracked = self.nodes[x.id].tracked;
        Ok(self.push(
            value,
            vec![xs[0], xs[1], h / 2, w / 2],
            tracked,
            Op::MaxPool2 { x: x.id, argmax },
        ))
    }

    /// Normalize every contiguous group of `s` values to zero mean and unit
    /// variance. The caller chooses the grouping by how it lays out the data.
    pub fn row_normalize(&mut self, x: TensorRef, s: usize, eps: f64) -> Result<TensorRef> {
        let len = self.nodes[x.id].value.len();
        if s == 0 || len % s != 0 {
            return Err(Error::ShapeMismatch {
                op: "row_normalize",
                detail: format!("{len} values cannot be split into rows of {s}"),
            });
        }
        let mut value = vec![0.0; len];
        let (means, istds) =
            kernels::row_normalize_forward(&self.nodes[x.id].value, s, eps, &mut value);
        let shape = self.nodes[x.id].shape.clone();
        let tracked = self.nodes[x.id].tracked;
        Ok(self.push(value, shape, tracked, Op::RowNormalize { x: x.id, s, means, istds }))
    }

    /// Per-channel affine `x * gamma[c] + beta[c]` on `[batch, c, h, w]`.
    pub fn channel_affine(
        &mut self,
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
    ) -> Result<TensorRef> {
        let xs = self.nodes[x.id].shape.clone();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                detail: format!("need [b, c, h, w], got {xs:?}"),
            });
        }
        let (planes, ch, inner) = (xs[0], xs[1], xs[2] * xs[3]);
        if self.nodes[gamma.id].value.len() != ch || self.nodes[beta.id].value.len() != ch {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                detail: format!(
                    "gamma/beta lens {}/{} for {ch} channels",
                    self.nodes[gamma.id].value.len(),
                    self.nodes[beta.id].value.len()
                ),
            });
        }
        let mut value = self.nodes[x.id].value.clone();
        for b in 0..planes {
            for c in 0..ch {
                let g = self.nodes[gamma.id].value[c];
                let bt = self.nodes[beta.id].value[c];
                let span = &mut value[(b * ch + c) * inner..(b * ch + c + 1) * inner];
                for v in span.iter_mut() {
                    *v = *v * g + bt;
                }
            }
        }
        let tracked = self.nodes[x.id].tracked
            || self.nodes[gamma.id].tracked
            || self.nodes[beta.id].tracked;
        Ok(self.push(
            value,
            xs,
            tracked,
            Op::ChannelAffine { x: x.id, gamma: gamma.id, beta: beta.id, planes, ch, inner },
        ))
    }

    /// Row-wise softmax over the last axis of a matrix.
    pub fn softmax(&mut self, x: TensorRef) -> Result<TensorRef> {
        let (_, cols) = self.as_matrix("softmax", x)?;
        let mut value = vec![0.0; self.nodes[x.id].value.len()];
        kernels::softmax_rows(&self.nodes[x.id].value, cols, &mut value);
        let shape = self.nodes[x.id].shape.clone();
        let tracked = self.nodes[x.id].tracked;
        Ok(self.push(value, shape, tracked, Op::Softmax { x: x.id, cols }))
    }

    /// Per-row softmax cross entropy against integer labels: `[rows, cols] -> [rows]`.
    pub fn softmax_xent(&mut self, x: TensorRef, labels: &[usize]) -> Result<TensorRef> {
        let (rows, cols) = self.as_matrix("softmax_xent", x)?;
        if labels.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "softmax_xent",
                detail: format!("{} labels for {rows} rows", labels.len()),
            });
        }
        for &l in labels {
            if l >= cols {
                return Err(Error::LabelOutOfRange { label: l, len: cols });
            }
        }
        let mut value = vec![0.0; rows];
        kernels::softmax_xent_rows(&self.nodes[x.id].value, cols, labels, &mut value);
        let tracked = self.nodes[x.id].tracked;
        // Probabilities are cheap to keep and make backward a single pass.
        let mut probs = vec![0.0; self.nodes[x.id].value.len()];
        if tracked {
            kernels::softmax_rows(&self.nodes[x.id].value, cols, &mut probs);
        }
        Ok(self.push(
            value,
            vec![rows],
            tracked,
            Op::SoftmaxXent { x: x.id, cols, labels: labels.to_vec(), probs },
        ))
    }

    /// Mean of all elements -> scalar `[1]`.
    pub fn mean_all(&mut self, x: TensorRef) -> Result<TensorRef> {
        let n = self.nodes[x.id].value.len();
        if n == 0 {
            return Err(Error::EmptyQuery);
        }
        let mean = self.nodes[x.id].value.iter().sum::<f64>() / n as f64;
        let tracked = self.nodes[x.id].tracked;
        Ok(self.push(vec![mean], vec![1], tracked, Op::MeanAll { x: x.id, n }))
    }

    /// Column sums of a matrix: `[rows, cols] -> [cols]`.
    pub fn sum_axis0(&mut self, x: TensorRef) -> Result<TensorRef> {
        let (rows, cols) = self.as_matrix("sum_axis0", x)?;
        let mut value = vec![0.0; cols];
        for row in self.nodes[x.id].value.chunks_exact(cols) {
            for (o, &v) in value.iter_mut().zip(row) {
                *o += v;
            }
        }
        let tracked = self.nodes[x.id].tracked;
        Ok(self.push(value, vec![cols], tracked, Op::SumAxis0 { x: x.id, rows, cols }))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, x: TensorRef, shape: &[usize]) -> Result<TensorRef> {
        if numel(shape) != self.nodes[x.id].value.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.nodes[x.id].shape),
            });
        }
        let value = self.nodes[x.id].value.clone();
        let tracked = self.nodes[x.id].tracked;
        Ok(self.push(value, shape.to_vec(), tracked, Op::Reshape { x: x.id }))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        let (rows, cols) = self.as_matrix("slice_rows", x)?;
        if start + len > rows {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {start}..{} of {rows}", start + len),
            });
        }
        let value = self.nodes[x.id].value[start * cols..(start + len) * cols].to_vec();
        let tracked = self.nodes[x.id].tracked;
        Ok(self.push(
            value,
            vec![len, cols],
            tracked,
            Op::SliceRows { x: x.id, start, cols, total_rows: rows },
        ))
    }

    /// Stack two matrices with equal column counts: `[ra, c]` over `[rb, c]`.
    pub fn concat_rows(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (rows_a, cols) = self.as_matrix("concat_rows", a)?;
        let (rows_b, cols_b) = self.as_matrix("concat_rows", b)?;
        if cols != cols_b {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                detail: format!("{cols} vs {cols_b} columns"),
            });
        }
        let mut value = Vec::with_capacity((rows_a + rows_b) * cols);
        value.extend_from_slice(&self.nodes[a.id].value);
        value.extend_from_slice(&self.nodes[b.id].value);
        let tracked = self.nodes[a.id].tracked || self.nodes[b.id].tracked;
        Ok(self.push(
            value,
            vec![rows_a + rows_b, cols],
            tracked,
            Op::ConcatRows { a: a.id, b: b.id, rows_a, cols },
        ))
    }

    /// Reverse pass from a scalar tracked `loss`. Each tracked node reachable
    /// from the loss receives `d loss / d node` in the returned [`Gradients`].
    pub fn backward(&self, loss: TensorRef) -> Result<Gradients> {
        let node = &self.nodes[loss.id];
        if node.value.len() != 1 {
            return Err(Error::NonScalarLoss { shape: node.shape.clone() });
        }
        if !node.tracked {
            return Err(Error::UntrackedLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Add `contrib` into the gradient slot for `id` if that node is tracked.
    fn accum(&self, grads: &mut [Option<Vec<f64>>], id: usize, contrib: &[f64]) {
        if !self.nodes[id].tracked {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                for (o, &c) in g.iter_mut().zip(contrib) {
                    *o += c;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        match &self.nodes[id].op {
            Op::Constant => {}
            Op::Add { a, b } => {
                self.accum(grads, *a, g);
                self.accum(grads, *b, g);
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, g);
                if self.nodes[*b].tracked {
                    let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                    self.accum(grads, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].tracked {
                    let da: Vec<f64> =
                        g.iter().zip(&self.nodes[*b].value).map(|(&gv, &bv)| gv * bv).collect();
                    self.accum(grads, *a, &da);
                }
                if self.nodes[*b].tracked {
                    let db: Vec<f64> =
                        g.iter().zip(&self.nodes[*a].value).map(|(&gv, &av)| gv * av).collect();
                    self.accum(grads, *b, &db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|&v| v * c).collect();
                self.accum(grads, *a, &da);
            }
            Op::Relu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[*a].value)
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accum(grads, *a, &da);
            }
            Op::AddRowBroadcast { a, bias, cols } => {
                self.accum(grads, *a, g);
                if self.nodes[*bias].tracked {
                    let mut db = vec![0.0; *cols];
                    for row in g.chunks_exact(*cols) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accum(grads, *bias, &db);
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.nodes[*a].tracked {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_tb(g, &self.nodes[*b].value, *m, *n, *k, &mut da);
                    self.accum(grads, *a, &da);
                }
                if self.nodes[*b].tracked {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_ta(&self.nodes[*a].value, g, *m, *k, *n, &mut db);
                    self.accum(grads, *b, &db);
                }
            }
            Op::MatmulTa { a, b, k, m, n } => {
                if self.nodes[*a].tracked {
                    let mut da = vec![0.0; k * m];
                    kernels::matmul_tb(&self.nodes[*b].value, g, *k, *n, *m, &mut da);
                    self.accum(grads, *a, &da);
                }
                if self.nodes[*b].tracked {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul(&self.nodes[*a].value, g, *k, *m, *n, &mut db);
                    self.accum(grads, *b, &db);
                }
            }
            Op::MatmulTb { a, b, m, k, n } => {
                if self.nodes[*a].tracked {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul(g, &self.nodes[*b].value, *m, *n, *k, &mut da);
                    self.accum(grads, *a, &da);
                }
                if self.nodes[*b].tracked {
                    let mut db = vec![0.0; n * k];
                    kernels::matmul_ta(g, &self.nodes[*a].value, *m, *n, *k, &mut db);
                    self.accum(grads, *b, &db);
                }
            }
            Op::Conv2d { x, w, bias, batch, ci, h, wid, co, kh, kw, pad } => {
                if self.nodes[*x].tracked {
                    let mut dx = vec![0.0; batch * ci * h * wid];
                    kernels::conv2d_backward_input(
                        g,
                        &self.nodes[*w].value,
                        *batch,
                        *ci,
                        *h,
                        *wid,
                        *co,
                        *kh,
                        *kw,
                        *pad,
                        &mut dx,
                    );
                    self.accum(grads, *x, &dx);
                }
                if self.nodes[*w].tracked || self.nodes[*bias].tracked {
                    let mut dw = vec![0.0; co * ci * kh * kw];
                    let mut db = vec![0.0; *co];
                    kernels::conv2d_backward_weight(
                        g,
                        &self.nodes[*x].value,
                        *batch,
                        *ci,
                        *h,
                        *wid,
                        *co,
                        *kh,
                        *kw,
                        *pad,
                        &mut dw,
                        &mut db,
                    );
                    self.accum(grads, *w, &dw);
                    self.accum(grads, *bias, &db);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.nodes[*x].value.len()];
                kernels::maxpool2_backward(g, argmax, &mut dx);
                self.accum(grads, *x, &dx);
            }
            Op::RowNormalize { x, s, means, istds } => {
                let mut dx = vec![0.0; self.nodes[*x].value.len()];
                kernels::row_normalize_backward(g, &self.nodes[*x].value, *s, means, istds, &mut dx);
                self.accum(grads, *x, &dx);
            }
            Op::ChannelAffine { x, gamma, beta, planes, ch, inner } => {
                if self.nodes[*x].tracked {
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..*planes {
                        for c in 0..*ch {
                            let gm = self.nodes[*gamma].value[c];
                            let base = (b * ch + c) * inner;
                            for i in 0..*inner {
                                dx[base + i] = g[base + i] * gm;
                            }
                        }
                    }
                    self.accum(grads, *x, &dx);
                }
                if self.nodes[*gamma].tracked || self.nodes[*beta].tracked {
                    let mut dgamma = vec![0.0; *ch];
                    let mut dbeta = vec![0.0; *ch];
                    for b in 0..*planes {
                        for c in 0..*ch {
                            let base = (b * ch + c) * inner;
                            for i in 0..*inner {
                                dgamma[c] += g[base + i] * self.nodes[*x].value[base + i];
                                dbeta[c] += g[base + i];
                            }
                        }
                    }
                    self.accum(grads, *gamma, &dgamma);
                    self.accum(grads, *beta, &dbeta);
                }
            }
            Op::Softmax { x, cols } => {
                let p = &self.nodes[id].value;
                let mut dx = vec![0.0; p.len()];
                for ((dx_row, g_row), p_row) in
                    dx.chunks_exact_mut(*cols).zip(g.chunks_exact(*cols)).zip(p.chunks_exact(*cols))
                {
                    let dot: f64 = g_row.iter().zip(p_row).map(|(&gv, &pv)| gv * pv).sum();
                    for ((d, &gv), &pv) in dx_row.iter_mut().zip(g_row).zip(p_row) {
                        *d = pv * (gv - dot);
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::SoftmaxXent { x, cols, labels, probs } => {
                let mut dx = vec![0.0; probs.len()];
                for ((r, dx_row), p_row) in
                    dx.chunks_exact_mut(*cols).enumerate().zip(probs.chunks_exact(*cols))
                {
                    let gr = g[r];
                    for (d, &pv) in dx_row.iter_mut().zip(p_row) {
                        *d = gr * pv;
                    }
                    dx_row[labels[r]] -= gr;
                }
                self.accum(grads, *x, &dx);
            }
            Op::MeanAll { x, n } => {
                let s = g[0] / *n as f64;
                let dx = vec![s; *n];
                self.accum(grads, *x, &dx);
            }
            Op::SumAxis0 { x, rows, cols } => {
                let mut dx = vec![0.0; rows * cols];
                for dx_row in dx.chunks_exact_mut(*cols) {
                    dx_row.copy_from_slice(g);
                }
                self.accum(grads, *x, &dx);
            }
            Op::Reshape { x } => {
                self.accum(grads, *x, g);
            }
            Op::SliceRows { x, start, cols, total_rows } => {
                let mut dx = vec![0.0; total_rows * cols];
                dx[start * cols..start * cols + g.len()].copy_from_slice(g);
                self.accum(grads, *x, &dx);
            }
            Op::ConcatRows { a, b, rows_a, cols } => {
                let split = rows_a * cols;
                self.accum(grads, *a, &g[..split]);
                self.accum(grads, *b, &g[split..]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_values_eager() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let b = tape.constant(vec![3.0, -1.0], &[2]).unwrap();
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c), &[4.0, 1.0]);
        assert!(tape.is_tracked(c));
    }

    #[test]
    fn untracked_graph_stays_constant() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0], &[2]).unwrap();
        let b = tape.constant(vec![3.0, 4.0], &[2]).unwrap();
        let c = tape.mul(a, b).unwrap();
        assert!(!tape.is_tracked(c));
        let loss = tape.mean_all(c).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::UntrackedLoss)));
    }

    #[test]
    fn backward_two_term_chain() {
        // loss = mean((a - b) * (a - b)) with a tracked, b constant:
        // d loss / d a = 2 (a - b) / n.
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, -0.5, 2.0], &[3], true).unwrap();
        let b = tape.constant(vec![0.5, 0.5, 0.5], &[3]).unwrap();
        let d = tape.sub(a, b).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        let ga = grads.get(a).unwrap();
        for (i, &av) in [1.0, -0.5, 2.0].iter().enumerate() {
            let want = 2.0 * (av - 0.5) / 3.0;
            assert!((ga[i] - want).abs() < 1e-12);
        }
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn backward_fans_in_both_uses() {
        // loss = mean(a * a) uses `a` twice through the same node.
        let mut tape = Tape::new();
        let a = tape.leaf(vec![3.0], &[1], true).unwrap();
        let sq = tape.mul(a, a).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(a).unwrap()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_loss_required() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn softmax_xent_gradient_is_p_minus_onehot() {
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![0.2, -0.3, 1.1, 0.0, 0.0, 0.0], &[2, 3], true).unwrap();
        let per_row = tape.softmax_xent(logits, &[2, 0]).unwrap();
        let loss = tape.mean_all(per_row).unwrap();
        let grads = tape.backward(loss).unwrap();
        let p = {
            let mut p = vec![0.0; 6];
            kernels::softmax_rows(tape.value(logits), 3, &mut p);
            p
        };
        let g = grads.get(logits).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                let onehot = if (r == 0 && c == 2) || (r == 1 && c == 0) { 1.0 } else { 0.0 };
                let want = (p[r * 3 + c] - onehot) / 2.0;
                assert!((g[r * 3 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_routes_gradient_to_tracked_parent_only() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], &[1, 2], true).unwrap();
        let b = tape.constant(vec![5.0, 6.0], &[1, 2]).unwrap();
        let cat = tape.concat_rows(a, b).unwrap();
        let labels = [0usize, 1];
        let per_row = tape.softmax_xent(cat, &labels).unwrap();
        let loss = tape.mean_all(per_row).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn slice_rows_places_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2], true).unwrap();
        let mid = tape.slice_rows(a, 1, 1).unwrap();
        assert_eq!(tape.value(mid), &[3.0, 4.0]);
        let s = tape.mean_all(mid).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[0.0, 0.0, 0.5, 0.5, 0.0, 0.0]);
    }
}
