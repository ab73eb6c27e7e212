//! The recorded computation graph and its reverse sweep.
//!
//! Ops are appended in evaluation order, so the record list is already a
//! topological order and [`Tape::backward`] walks it once from the end.

use super::kernels::{self, MatRef, Window};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Probabilities entering the binary cross entropy are clamped to
/// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride and symmetric zero padding of a 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        win: Window,
        batch: usize,
        out_ch: usize,
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        /// Sweep over the output image whose window grid is the input.
        win: Window,
        batch: usize,
        in_ch: usize,
        x_mat: Vec<f64>,
    },
    Add {
        a: NodeId,
        b: NodeId,
        repeat: usize,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
        cols: usize,
    },
    Reshape {
        x: NodeId,
    },
    Concat {
        parts: Vec<(NodeId, usize)>,
        outer: usize,
        inner: usize,
    },
    Mean {
        x: NodeId,
    },
    L2Rows {
        x: NodeId,
        cols: usize,
        norms: Vec<f64>,
    },
    Bce {
        p: NodeId,
        labels: Vec<f64>,
    },
    Grl {
        x: NodeId,
        lambda: f64,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    SliceLast {
        x: NodeId,
        start: usize,
        last: usize,
    },
    TransposeLast2 {
        x: NodeId,
        batch: usize,
        a: usize,
        b: usize,
    },
    SliceRows {
        x: NodeId,
        offset: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Mean { .. } => "mean",
            Op::L2Rows { .. } => "l2_norm",
            Op::Bce { .. } => "bce",
            Op::Grl { .. } => "grl",
            Op::Scale { .. } => "scale",
            Op::SliceLast { .. } => "slice_last",
            Op::TransposeLast2 { .. } => "transpose",
            Op::SliceRows { .. } => "slice_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Single-threaded recorder of a differentiable computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by the leaf they belong to.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
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

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Copies the value of `id` out as a fresh tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape consistent")
    }

    /// Operation names in record order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records `t` as a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<NodeId> {
        if numel(&shape) != value.len() {
            return Err(Error::shape(format!(
                "constant of shape {shape:?} with {} values",
                value.len()
            )));
        }
        Ok(self.push(shape, value, false, Op::Leaf))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            MatRef::new(self.value(a), m, k),
            MatRef::new(self.value(b), k, n),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, m, k, n }))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape(format!("batch_matmul {sa:?} x {sb:?}")));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..batch {
            kernels::gemm(
                MatRef::new(&va[i * m * k..(i + 1) * m * k], m, k),
                MatRef::new(&vb[i * k * n..(i + 1) * k * n], k, n),
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![batch, m, n], out, rg, Op::BatchMatMul { a, b, batch, m, k, n }))
    }

    /// `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, `bias: [O]` -> `[N, O, Ho, Wo]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>, spec: ConvSpec) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape(format!("conv2d input {sx:?} with weight {sw:?}")));
        }
        let (batch, out_ch) = (sx[0], sw[0]);
        if let Some(b) = bias {
            if self.shape(b) != [out_ch] {
                return Err(Error::shape(format!(
                    "conv2d bias {:?} for {out_ch} filters",
                    self.shape(b)
                )));
            }
        }
        let win = Window::new(sx[1], sx[2], sx[3], sw[2], sw[3], spec.stride, spec.padding)
            .ok_or_else(|| Error::shape(format!("conv2d kernel {sw:?} does not fit input {sx:?} with {spec:?}")))?;
        let area = win.out_area();
        let mut cols = vec![0.0; win.col_rows() * batch * area];
        kernels::im2col(self.value(x), batch, &win, &mut cols);
        let mut tmp = vec![0.0; out_ch * batch * area];
        kernels::gemm(
            MatRef::new(self.value(w), out_ch, win.col_rows()),
            MatRef::new(&cols, win.col_rows(), batch * area),
            0.0,
            &mut tmp,
        );
        let mut out = vec![0.0; tmp.len()];
        kernels::swap_outer(&tmp, out_ch, batch, area, &mut out);
        if let Some(b) = bias {
            let bv = self.value(b);
            for (chunk, i) in out.chunks_mut(area).zip((0..out_ch).cycle()) {
                chunk.iter_mut().for_each(|v| *v += bv[i]);
            }
        }
        let mut ids = vec![x, w];
        ids.extend(bias);
        let rg = self.rg(&ids);
        if !rg {
            cols = Vec::new();
        }
        Ok(self.push(
            vec![batch, out_ch, win.out_h, win.out_w],
            out,
            rg,
            Op::Conv2d {
                x,
                w,
                bias,
                win,
                batch,
                out_ch,
                cols,
            },
        ))
    }

    /// Adjoint of [`Tape::conv2d`] in its input: `x: [N, Cin, H, W]`,
    /// `w: [Cin, Cout, kh, kw]` -> `[N, Cout, (H-1)s - 2p + kh, (W-1)s - 2p + kw]`.
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>, spec: ConvSpec) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || spec.stride == 0 {
            return Err(Error::shape(format!(
                "conv_transpose2d input {sx:?} with weight {sw:?}"
            )));
        }
        let (batch, in_ch, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (out_ch, kh, kw) = (sw[1], sw[2], sw[3]);
        let grow = |n: usize, k: usize| {
            ((n - 1) * spec.stride + k)
                .checked_sub(2 * spec.padding)
                .filter(|&v| v > 0)
        };
        let (Some(oh), Some(ow)) = (grow(h, kh), grow(wd, kw)) else {
            return Err(Error::shape(format!(
                "conv_transpose2d output would be empty for {sx:?}"
            )));
        };
        if let Some(b) = bias {
            if self.shape(b) != [out_ch] {
                return Err(Error::shape("conv_transpose2d bias size"));
            }
        }
        let win = Window::new(out_ch, oh, ow, kh, kw, spec.stride, spec.padding)
            .filter(|g| g.out_h == h && g.out_w == wd)
            .ok_or_else(|| Error::shape("conv_transpose2d geometry"))?;
        let hw = h * wd;
        let mut x_mat = vec![0.0; in_ch * batch * hw];
        kernels::swap_outer(self.value(x), batch, in_ch, hw, &mut x_mat);
        let mut cols = vec![0.0; win.col_rows() * batch * hw];
        kernels::gemm(
            MatRef::t(self.value(w), in_ch, win.col_rows()),
            MatRef::new(&x_mat, in_ch, batch * hw),
            0.0,
            &mut cols,
        );
        let mut out = vec![0.0; batch * out_ch * oh * ow];
        kernels::col2im(&cols, batch, &win, &mut out);
        if let Some(b) = bias {
            let bv = self.value(b);
            for (chunk, i) in out.chunks_mut(oh * ow).zip((0..out_ch).cycle()) {
                chunk.iter_mut().for_each(|v| *v += bv[i]);
            }
        }
        let mut ids = vec![x, w];
        ids.extend(bias);
        let rg = self.rg(&ids);
        if !rg {
            x_mat = Vec::new();
        }
        Ok(self.push(
            vec![batch, out_ch, oh, ow],
            out,
            rg,
            Op::ConvTranspose2d {
                x,
                w,
                bias,
                win,
                batch,
                in_ch,
                x_mat,
            },
        ))
    }

    /// Elementwise `a + b`, where `b` may also be broadcast over the leading
    /// dimensions of `a` (its shape must equal a suffix of `a`'s shape).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(Error::shape(format!("add {sa:?} + {sb:?}")));
        }
        let vb = self.value(b);
        let nb = vb.len();
        let out: Vec<f64> = self.value(a).iter().enumerate().map(|(i, &v)| v + vb[i % nb]).collect();
        let repeat = out.len() / nb.max(1);
        let rg = self.rg(&[a, b]);
        Ok(self.push(sa, out, rg, Op::Add { a, b, repeat }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("sub {:?} - {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Sub { a, b }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Relu { x })
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let cols = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::shape("softmax of a rank-0 tensor"))?;
        if cols == 0 {
            return Err(Error::shape("softmax over an empty axis"));
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::Softmax { x, cols }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape(format!("reshape {:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), out, rg, Op::Reshape { x }))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::shape("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} for rank {}", first.len())));
        }
        let mut parts = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let s = self.shape(id);
            let same =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return Err(Error::shape(format!("concat {s:?} with {first:?} along {axis}")));
            }
            parts.push((id, s[axis]));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(id, len) in &parts {
                out.extend_from_slice(&self.value(id)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(shape, out, rg, Op::Concat { parts, outer, inner }))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1], vec![m], rg, Op::Mean { x }))
    }

    /// Unsquared Euclidean norm of each row (`x` viewed as `[shape[0], rest]`).
    pub fn l2_norm_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        let rows = *s.first().ok_or_else(|| Error::shape("l2_norm of a rank-0 tensor"))?;
        let cols = self.value(x).len().checked_div(rows).unwrap_or(0);
        let norms: Vec<f64> = self
            .value(x)
            .chunks(cols.max(1))
            .take(rows)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![rows], norms.clone(), rg, Op::L2Rows { x, cols, norms }))
    }

    /// Per-sample `-(d ln p + (1 - d) ln(1 - p))` with `p` clamped to
    /// `[BCE_CLAMP, 1 - BCE_CLAMP]`. `labels` are constants.
    pub fn bce(&mut self, p: NodeId, labels: &[f64]) -> Result<NodeId> {
        if self.shape(p).len() != 1 || self.shape(p)[0] != labels.len() {
            return Err(Error::shape(format!(
                "bce on {:?} with {} labels",
                self.shape(p),
                labels.len()
            )));
        }
        let out = self
            .value(p)
            .iter()
            .zip(labels)
            .map(|(&q, &d)| {
                let q = q.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(d * q.ln() + (1.0 - d) * (1.0 - q).ln())
            })
            .collect();
        let rg = self.rg(&[p]);
        Ok(self.push(
            vec![labels.len()],
            out,
            rg,
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Gradient reversal: identity forward, `-lambda * upstream` backward.
    pub fn grl(&mut self, x: NodeId, lambda: f64) -> NodeId {
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Grl { x, lambda })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).iter().map(|v| c * v).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Scale { x, c })
    }

    /// `x[..., start..start + len]`.
    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let last = *s.last().ok_or_else(|| Error::shape("slice of a rank-0 tensor"))?;
        if start + len > last || len == 0 {
            return Err(Error::shape(format!("slice {start}..{} of axis {last}", start + len)));
        }
        let out: Vec<f64> = self
            .value(x)
            .chunks(last)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().expect("rank checked") = len;
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, rg, Op::SliceLast { x, start, last }))
    }

    /// `x[start..start + len, ...]` along the first axis.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let rows = *s.first().ok_or_else(|| Error::shape("row slice of a rank-0 tensor"))?;
        if start + len > rows || len == 0 {
            return Err(Error::shape(format!("rows {start}..{} of {rows}", start + len)));
        }
        let width = numel(&s[1..]);
        let out = self.value(x)[start * width..(start + len) * width].to_vec();
        let mut shape = s;
        shape[0] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::SliceRows {
                x,
                offset: start * width,
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(format!("transpose of {s:?}")));
        }
        let (a, b) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s[..s.len() - 2]);
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for n in 0..batch {
            let (src, dst) = (&v[n * a * b..(n + 1) * a * b], &mut out[n * a * b..(n + 1) * a * b]);
            for i in 0..a {
                for j in 0..b {
                    dst[j * a + i] = src[i * b + j];
                }
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, rg, Op::TransposeLast2 { x, batch, a, b }))
    }

    /// Bit pattern of every non-differentiable switch in the graph: relu
    /// signs, BCE clamps and zero-norm rows. Two evaluations with equal
    /// patterns lie on the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => out.extend(self.value(*x).iter().map(|&v| v > 0.0)),
                Op::Bce { p, .. } => out.extend(
                    self.value(*p)
                        .iter()
                        .flat_map(|&q| [q < BCE_CLAMP, q > 1.0 - BCE_CLAMP]),
                ),
                Op::L2Rows { norms, .. } => out.extend(norms.iter().map(|&n| n == 0.0)),
                _ => {}
            }
        }
        out
    }

    /// Reverse sweep from a scalar (or any) output seeded with ones.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let seed = vec![1.0; self.value(output).len()];
        self.backward_with(output, seed)
    }

    /// Reverse sweep from `output` seeded with `upstream`.
    pub fn backward_with(&self, output: NodeId, upstream: Vec<f64>) -> Result<Gradients> {
        if upstream.len() != self.value(output).len() {
            return Err(Error::shape("upstream gradient size"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(upstream);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if rg(*a) {
                    let ga = grad_buf(grads, *a, m * k);
                    kernels::gemm(MatRef::new(g, m, n), MatRef::t(self.value(*b), k, n), 1.0, ga);
                }
                if rg(*b) {
                    let gb = grad_buf(grads, *b, k * n);
                    kernels::gemm(MatRef::t(self.value(*a), m, k), MatRef::new(g, m, n), 1.0, gb);
                }
            }
            Op::BatchMatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if rg(*a) {
                    let vb = self.value(*b);
                    let ga = grad_buf(grads, *a, batch * m * k);
                    for i in 0..*batch {
                        kernels::gemm(
                            MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n),
                            MatRef::t(&vb[i * k * n..(i + 1) * k * n], k, n),
                            1.0,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if rg(*b) {
                    let va = self.value(*a);
                    let gb = grad_buf(grads, *b, batch * k * n);
                    for i in 0..*batch {
                        kernels::gemm(
                            MatRef::t(&va[i * m * k..(i + 1) * m * k], m, k),
                            MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n),
                            1.0,
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                win,
                batch,
                out_ch,
                cols,
            } => {
                let area = win.out_area();
                let ncols = batch * area;
                let mut g_mat = vec![0.0; g.len()];
                kernels::swap_outer(g, *batch, *out_ch, area, &mut g_mat);
                if rg(*w) {
                    let gw = grad_buf(grads, *w, out_ch * win.col_rows());
                    kernels::gemm(
                        MatRef::new(&g_mat, *out_ch, ncols),
                        MatRef::t(cols, win.col_rows(), ncols),
                        1.0,
                        gw,
                    );
                }
                if let Some(b) = bias.filter(|b| rg(*b)) {
                    let gb = grad_buf(grads, b, *out_ch);
                    for (o, row) in g_mat.chunks(ncols).enumerate() {
                        gb[o] += row.iter().sum::<f64>();
                    }
                }
                if rg(*x) {
                    let mut gcols = vec![0.0; win.col_rows() * ncols];
                    kernels::gemm(
                        MatRef::t(self.value(*w), *out_ch, win.col_rows()),
                        MatRef::new(&g_mat, *out_ch, ncols),
                        0.0,
                        &mut gcols,
                    );
                    let gx = grad_buf(grads, *x, self.value(*x).len());
                    kernels::col2im(&gcols, *batch, win, gx);
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                bias,
                win,
                batch,
                in_ch,
                x_mat,
            } => {
                let hw = win.out_area();
                let ncols = batch * hw;
                let mut gcols = vec![0.0; win.col_rows() * ncols];
                kernels::im2col(g, *batch, win, &mut gcols);
                if rg(*w) {
                    let gw = grad_buf(grads, *w, in_ch * win.col_rows());
                    kernels::gemm(
                        MatRef::new(x_mat, *in_ch, ncols),
                        MatRef::t(&gcols, win.col_rows(), ncols),
                        1.0,
                        gw,
                    );
                }
                if let Some(b) = bias.filter(|b| rg(*b)) {
                    let plane = win.h * win.w;
                    let gb = grad_buf(grads, b, win.channels);
                    for (chunk, o) in g.chunks(plane).zip((0..win.channels).cycle()) {
                        gb[o] += chunk.iter().sum::<f64>();
                    }
                }
                if rg(*x) {
                    let mut gx_mat = vec![0.0; in_ch * ncols];
                    kernels::gemm(
                        MatRef::new(self.value(*w), *in_ch, win.col_rows()),
                        MatRef::new(&gcols, win.col_rows(), ncols),
                        0.0,
                        &mut gx_mat,
                    );
                    let mut gx_local = vec![0.0; gx_mat.len()];
                    kernels::swap_outer(&gx_mat, *in_ch, *batch, hw, &mut gx_local);
                    let gx = grad_buf(grads, *x, gx_local.len());
                    for (a, b) in gx.iter_mut().zip(&gx_local) {
                        *a += b;
                    }
                }
            }
            Op::Add { a, b, repeat } => {
                if rg(*a) {
                    let ga = grad_buf(grads, *a, g.len());
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if rg(*b) {
                    let nb = g.len() / (*repeat).max(1);
                    let gb = grad_buf(grads, *b, nb);
                    for chunk in g.chunks(nb) {
                        for (x, y) in gb.iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if rg(*a) {
                    let ga = grad_buf(grads, *a, g.len());
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if rg(*b) {
                    let gb = grad_buf(grads, *b, g.len());
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            Op::Relu { x } => {
                if rg(*x) {
                    let xv = self.value(*x);
                    let gx = grad_buf(grads, *x, g.len());
                    for ((d, &v), &u) in gx.iter_mut().zip(xv).zip(g) {
                        if v > 0.0 {
                            *d += u;
                        }
                    }
                }
            }
            Op::Softmax { x, cols } => {
                if rg(*x) {
                    let y = &node.value;
                    let gx = grad_buf(grads, *x, g.len());
                    for ((yr, gr), dr) in y.chunks(*cols).zip(g.chunks(*cols)).zip(gx.chunks_mut(*cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yy * (gg - dot);
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if rg(*x) {
                    let gx = grad_buf(grads, *x, g.len());
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(id, len) in parts {
                    if rg(id) {
                        let gx = grad_buf(grads, id, outer * len * inner);
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (a, b) in gx[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Mean { x } => {
                if rg(*x) {
                    let n = self.value(*x).len();
                    let s = g[0] / n as f64;
                    for v in grad_buf(grads, *x, n).iter_mut() {
                        *v += s;
                    }
                }
            }
            Op::L2Rows { x, cols, norms } => {
                if rg(*x) {
                    let xv = self.value(*x);
                    let gx = grad_buf(grads, *x, xv.len());
                    for (i, (&nrm, &gi)) in norms.iter().zip(g).enumerate() {
                        if nrm > 0.0 {
                            let s = gi / nrm;
                            for (d, &v) in gx[i * cols..(i + 1) * cols]
                                .iter_mut()
                                .zip(&xv[i * cols..(i + 1) * cols])
                            {
                                *d += s * v;
                            }
                        }
                    }
                }
            }
            Op::Bce { p, labels } => {
                if rg(*p) {
                    let pv = self.value(*p);
                    let gp = grad_buf(grads, *p, pv.len());
                    for ((d, (&q, &lab)), &u) in gp.iter_mut().zip(pv.iter().zip(labels)).zip(g) {
                        if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&q) {
                            *d += u * (-lab / q + (1.0 - lab) / (1.0 - q));
                        }
                    }
                }
            }
            Op::Grl { x, lambda } => {
                if rg(*x) {
                    let s = -*lambda;
                    let gx = grad_buf(grads, *x, g.len());
                    for (a, &b) in gx.iter_mut().zip(g) {
                        *a += s * b;
                    }
                }
            }
            Op::Scale { x, c } => {
                if rg(*x) {
                    let gx = grad_buf(grads, *x, g.len());
                    for (a, &b) in gx.iter_mut().zip(g) {
                        *a += c * b;
                    }
                }
            }
            Op::SliceLast { x, start, last } => {
                if rg(*x) {
                    let len = node.shape.last().copied().unwrap_or(0);
                    let gx = grad_buf(grads, *x, self.value(*x).len());
                    for (row, gr) in gx.chunks_mut(*last).zip(g.chunks(len)) {
                        for (a, b) in row[*start..*start + len].iter_mut().zip(gr) {
                            *a += b;
                        }
                    }
                }
            }
            Op::SliceRows { x, offset } => {
                if rg(*x) {
                    let gx = grad_buf(grads, *x, self.value(*x).len());
                    for (a, b) in gx[*offset..*offset + g.len()].iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            Op::TransposeLast2 { x, batch, a, b } => {
                if rg(*x) {
                    let (a, b) = (*a, *b);
                    let gx = grad_buf(grads, *x, g.len());
                    for n in 0..*batch {
                        let (src, dst) = (&g[n * a * b..(n + 1) * a * b], &mut gx[n * a * b..(n + 1) * a * b]);
                        for i in 0..a {
                            for j in 0..b {
                                dst[i * b + j] += src[j * a + i];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> NodeId {
        tape.leaf(&Tensor::new(shape.to_vec(), data).unwrap().with_grad(true))
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut t = Tape::new();
        let x = var(&mut t, &[3], vec![-1.0, 0.0, 2.0]);
        let y = t.relu(x);
        assert_eq!(t.value(y), &[0.0, 0.0, 2.0]);
        let g = t.backward_with(y, vec![5.0, 6.0, 7.0]).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 7.0]);
    }

    #[test]
    fn softmax_of_zero_row_is_uniform() {
        let mut t = Tape::new();
        let x = var(&mut t, &[2, 4], vec![0.0; 8]);
        let y = t.softmax(x).unwrap();
        assert!(t.value(y).iter().all(|&v| (v - 0.25).abs() < 1e-16));
    }

    #[test]
    fn grl_is_identity_forward_and_negates_backward() {
        let mut t = Tape::new();
        let x = var(&mut t, &[2], vec![0.1, -3.7]);
        let y = t.grl(x, 0.5);
        assert_eq!(t.value(y), t.value(x));
        let g = t.backward_with(y, vec![2.0, -4.0]).unwrap();
        assert_eq!(g.get(x).unwrap(), &[-1.0, 2.0]);
    }

    #[test]
    fn gradient_accumulates_over_fan_out() {
        let mut t = Tape::new();
        let x = var(&mut t, &[1, 2], vec![1.0, 2.0]);
        let s = t.scale(x, 3.0);
        let y = t.add(s, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn bias_broadcast_sums_gradient() {
        let mut t = Tape::new();
        let x = t.constant(vec![3, 2], vec![0.0; 6]).unwrap();
        let b = var(&mut t, &[2], vec![1.0, -1.0]);
        let y = t.add(x, b).unwrap();
        assert_eq!(t.value(y), &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(b).unwrap(), &[3.0, 3.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = var(&mut t, &[2, 3], vec![0.0; 6]);
        let b = var(&mut t, &[2, 3], vec![0.0; 6]);
        assert!(t.matmul(a, b).is_err());
        assert!(t.slice_last(a, 2, 2).is_err());
        assert!(t.bce(a, &[0.0; 6]).is_err());
        let x = var(&mut t, &[1, 2, 4, 4], vec![0.0; 32]);
        let w = var(&mut t, &[3, 1, 3, 3], vec![0.0; 27]);
        assert!(t.conv2d(x, w, None, ConvSpec { stride: 1, padding: 0 }).is_err());
    }

    #[test]
    fn slice_rows_routes_gradient() {
        let mut t = Tape::new();
        let x = var(&mut t, &[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = t.slice_rows(x, 1, 2).unwrap();
        assert_eq!(t.shape(y), &[2, 2]);
        assert_eq!(t.value(y), &[3.0, 4.0, 5.0, 6.0]);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(t.slice_rows(x, 2, 2).is_err());
    }

    #[test]
    fn l2_norm_has_zero_subgradient_at_origin() {
        let mut t = Tape::new();
        let x = var(&mut t, &[2, 2], vec![0.0, 0.0, 3.0, 4.0]);
        let n = t.l2_norm_rows(x).unwrap();
        assert_eq!(t.value(n), &[0.0, 5.0]);
        let g = t.backward(n).unwrap();
        let g = g.get(x).unwrap();
        assert_eq!(&g[..2], &[0.0, 0.0]);
        assert!((g[2] - 0.6).abs() < 1e-15 && (g[3] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn bce_is_ln2_at_half_and_clamped() {
        let mut t = Tape::new();
        let p = var(&mut t, &[3], vec![0.5, 0.5, 0.0]);
        let l = t.bce(p, &[0.0, 1.0, 1.0]).unwrap();
        let v = t.value(l);
        assert!((v[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((v[1] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((v[2] - (-(BCE_CLAMP.ln()))).abs() < 1e-12);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap()[2], 0.0);
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> with shared weights and no bias.
        let spec = ConvSpec { stride: 2, padding: 2 };
        let mut t = Tape::new();
        let xs: Vec<f64> = (0..2 * 3 * 8 * 16)
            .map(|i| ((i * 7919) % 23) as f64 / 23.0 - 0.5)
            .collect();
        let ws: Vec<f64> = (0..4 * 3 * 6 * 6)
            .map(|i| ((i * 104729) % 17) as f64 / 17.0 - 0.5)
            .collect();
        let x = t.constant(vec![2, 3, 8, 16], xs.clone()).unwrap();
        let w = t.constant(vec![4, 3, 6, 6], ws.clone()).unwrap();
        let y = t.conv2d(x, w, None, spec).unwrap();
        assert_eq!(t.shape(y), &[2, 4, 4, 8]);
        let ys: Vec<f64> = (0..t.value(y).len()).map(|i| ((i * 31) % 13) as f64 - 6.0).collect();
        let lhs: f64 = t.value(y).iter().zip(&ys).map(|(a, b)| a * b).sum();
        // conv_transpose weight layout is [Cin, Cout, kh, kw] = [4, 3, 6, 6].
        let yn = t.constant(vec![2, 4, 4, 8], ys).unwrap();
        let wt = t.constant(vec![4, 3, 6, 6], ws).unwrap();
        let xt = t.conv_transpose2d(yn, wt, None, spec).unwrap();
        assert_eq!(t.shape(xt), &[2, 3, 8, 16]);
        let rhs: f64 = t.value(xt).iter().zip(&xs).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}
