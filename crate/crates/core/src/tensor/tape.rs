//! Define-by-run reverse-mode tape.
//!
//! Every forward op appends one node holding its output value and the
//! operand handles its backward rule needs. [`Tape::backward`] walks the
//! nodes once in reverse recording order. A tape is rebuilt for every
//! forward pass and is owned by a single thread.

use num_complex::Complex64;

use super::fft::{irfft_into, require_pow2, rfft_into};
use super::kernels::{conv1d_backward, conv1d_forward, dot, gemm, ConvGeom};
use super::Tensor;
use crate::error::{contract, sizing, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        bias: Var,
    },
    Matmul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        tb: bool,
    },
    Reshape(Var),
    SwapLast2 {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Swish(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    LogSigmoid(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    MeanLast(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Subsample {
        x: Var,
        stride: usize,
    },
    Concat(Var, Var),
    Narrow {
        x: Var,
        start: usize,
    },
    Rfft(Var),
    Irfft(Var),
    SegmentSplit {
        x: Var,
        segments: usize,
    },
    SegmentMerge {
        x: Var,
        segments: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    CosineRows(Var, Var),
    ContrastiveCe {
        s: Var,
        targets: Vec<f64>,
        eps: f64,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Concat(a, b) | CosineRows(a, b) => vec![*a, *b],
            AddBias { x, bias } => vec![*x, *bias],
            Matmul { a, b, .. } => vec![*a, *b],
            Conv1d { x, w, .. } => vec![*x, *w],
            Scale(x, _)
            | Reshape(x)
            | Swish(x)
            | Sigmoid(x)
            | Tanh(x)
            | LeakyRelu(x, _)
            | LogSigmoid(x)
            | SoftmaxRows(x)
            | Sum(x)
            | Mean(x)
            | MeanLast(x)
            | Rfft(x)
            | Irfft(x) => vec![*x],
            SwapLast2 { x, .. }
            | GatherRows { x, .. }
            | Upsample { x, .. }
            | Subsample { x, .. }
            | Narrow { x, .. }
            | SegmentSplit { x, .. }
            | SegmentMerge { x, .. } => vec![*x],
            CrossEntropy { logits, .. } => vec![*logits],
            ContrastiveCe { s, .. } => vec![*s],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    finite: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a leaf; `None` if the leaf does not require grad or the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a leaf, zero-filled when the loss does not reach it.
    pub fn get_or_zeros(&self, v: Var, numel: usize) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; numel])
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// `[outer, axis1, inner]` view of a tensor of rank >= 2.
fn axis1_dims(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let finite = if cfg!(debug_assertions) {
            let finite = value.is_finite();
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].finite);
            debug_assert!(
                finite || !inputs_finite,
                "non-finite output from {op:?} on finite inputs"
            );
            finite
        } else {
            true
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            finite,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let finite = value.is_finite();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            finite,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(sizing(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, op)
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map_unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    /// Adds a `[C]` bias along axis 1 of a `[N, C, ...]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(bias) != [shape[1]] {
            return Err(sizing(format!(
                "bias {:?} does not match axis 1 of {shape:?}",
                self.shape(bias)
            )));
        }
        let (outer, c, inner) = axis1_dims(&shape);
        let b = self.data(bias);
        let mut data = self.data(x).to_vec();
        for o in 0..outer {
            for ch in 0..c {
                let bv = b[ch];
                for v in &mut data[(o * c + ch) * inner..][..inner] {
                    *v += bv;
                }
            }
        }
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias { x, bias }))
    }

    pub fn swish(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v * sigmoid(v), Op::Swish(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map_unary(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    /// `ln σ(x)`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, log_sigmoid, Op::LogSigmoid(x))
    }

    // ── Linear algebra and layout ────────────────────────────────────

    /// Batched product. `a` is `[M, K]` or `[B, M, K]`; `b` is `[K, N]` /
    /// `[B, K, N]`, or the transposed layout `[N, K]` / `[B, N, K]` when
    /// `transpose_b` is set.
    pub fn matmul_ex(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, bk, n, rank3) = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (bk, n) = if transpose_b {
                    (sb[1], sb[0])
                } else {
                    (sb[0], sb[1])
                };
                (1, sa[0], sa[1], bk, n, false)
            }
            (3, 3) if sa[0] == sb[0] => {
                let (bk, n) = if transpose_b {
                    (sb[2], sb[1])
                } else {
                    (sb[1], sb[2])
                };
                (sa[0], sa[1], sa[2], bk, n, true)
            }
            _ => return Err(sizing(format!("matmul of {sa:?} and {sb:?}"))),
        };
        if k != bk {
            return Err(sizing(format!("matmul inner dims {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for i in 0..batch {
                gemm(
                    false,
                    transpose_b,
                    m,
                    n,
                    k,
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let shape = if rank3 { vec![batch, m, n] } else { vec![m, n] };
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                tb: transpose_b,
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// `[B, R, C]` → `[B, C, R]`.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(sizing(format!("swap_last2 expects rank 3, got {shape:?}")));
        }
        let (batch, rows, cols) = (shape[0], shape[1], shape[2]);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let base = b * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    out[base + c * rows + r] = src[base + r * cols + c];
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![batch, cols, rows], out)?,
            Op::SwapLast2 {
                x,
                batch,
                rows,
                cols,
            },
        ))
    }

    /// Cross-correlation of `x: [N, C_in, L]` with `kernel: [C_out, C_in, K]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(kernel).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(sizing(format!("conv1d input {sx:?} with kernel {sw:?}")));
        }
        if stride == 0 {
            return Err(sizing("conv1d stride must be positive"));
        }
        let padded = sx[2] + 2 * padding;
        if sw[2] > padded {
            return Err(sizing(format!(
                "conv1d kernel {} longer than padded input {padded}",
                sw[2]
            )));
        }
        let geom = ConvGeom {
            n: sx[0],
            c_in: sx[1],
            c_out: sw[0],
            len: sx[2],
            kernel: sw[2],
            stride,
            padding,
            len_out: (padded - sw[2]) / stride + 1,
        };
        let mut out = vec![0.0; geom.n * geom.c_out * geom.len_out];
        conv1d_forward(&geom, self.data(x), self.data(kernel), &mut out);
        Ok(self.push(
            Tensor::new(vec![geom.n, geom.c_out, geom.len_out], out)?,
            Op::Conv1d { x, w: kernel, geom },
        ))
    }

    /// Row-wise softmax over the last axis, max-shifted.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| sizing("softmax of a scalar"))?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(cols) {
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
        Ok(self.push(Tensor::new(shape, data)?, Op::SoftmaxRows(x)))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean over the last axis: `[..., L]` → `[...]`.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(sizing(format!("mean_last needs rank >= 2, got {shape:?}")));
        }
        let len = shape[shape.len() - 1];
        let data = self
            .data(x)
            .chunks(len)
            .map(|c| c.iter().sum::<f64>() / len as f64)
            .collect();
        let value = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        Ok(self.push(value, Op::MeanLast(x)))
    }

    // ── Indexing and resampling ──────────────────────────────────────

    /// Rows of `x` along axis 0 at `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        if idx.is_empty() {
            return Err(sizing("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(sizing(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        let width = self.value(x).numel() / rows;
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Embedding-table lookup: `table: [R, D]`, one row per label.
    pub fn embedding(&mut self, table: Var, labels: &[usize]) -> Result<Var> {
        if self.shape(table).len() != 2 {
            return Err(sizing("embedding table must be rank 2"));
        }
        let rows = self.shape(table)[0];
        if let Some(&bad) = labels.iter().find(|&&l| l >= rows) {
            return Err(contract(format!("label {bad} outside [0, {rows})")));
        }
        self.gather_rows(table, labels)
    }

    /// Nearest-neighbour upsampling along the last axis.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if factor == 0 || shape.len() < 2 {
            return Err(sizing("upsample needs factor >= 1 and rank >= 2"));
        }
        let len = *shape.last().unwrap();
        let mut out = Vec::with_capacity(self.value(x).numel() * factor);
        for row in self.data(x).chunks(len) {
            for &v in row {
                out.extend(std::iter::repeat_n(v, factor));
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len * factor;
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Upsample { x, factor }))
    }

    /// Keeps every `stride`-th sample along the last axis.
    pub fn subsample(&mut self, x: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(sizing("subsample stride must be positive"));
        }
        if stride == 1 {
            return Ok(x);
        }
        let shape = self.shape(x).to_vec();
        let len = *shape.last().unwrap();
        let len_out = len.div_ceil(stride);
        let mut out = Vec::with_capacity(self.value(x).numel() / len * len_out);
        for row in self.data(x).chunks(len) {
            out.extend(row.iter().step_by(stride));
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len_out;
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Subsample { x, stride }))
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(sizing(format!("concat {sa:?} with {sb:?}")));
        }
        let (outer, ca, inner) = axis1_dims(&sa);
        let cb = sb[1];
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            out.extend_from_slice(&da[o * ca * inner..(o + 1) * ca * inner]);
            out.extend_from_slice(&db[o * cb * inner..(o + 1) * cb * inner]);
        }
        let mut shape = sa;
        shape[1] = ca + cb;
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(a, b)))
    }

    /// Channels `[start, start + len)` along axis 1.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || len == 0 || start + len > shape[1] {
            return Err(sizing(format!(
                "narrow [{start}, {}) of {shape:?}",
                start + len
            )));
        }
        let (outer, c, inner) = axis1_dims(&shape);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * c + start) * inner..(o * c + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[1] = len;
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Narrow { x, start }))
    }

    // ── Spectral ─────────────────────────────────────────────────────

    /// Real FFT along the last axis of `[N, C, L]`, giving `[N, 2C, L/2+1]`
    /// with real parts in channels `0..C` and imaginary parts in `C..2C`.
    pub fn rfft(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(sizing(format!("rfft expects [N, C, L], got {shape:?}")));
        }
        let (n, c, len) = (shape[0], shape[1], shape[2]);
        require_pow2(len)?;
        let bins = len / 2 + 1;
        let src = self.data(x);
        let mut out = vec![0.0; n * 2 * c * bins];
        let mut spec = vec![Complex64::new(0.0, 0.0); bins];
        for s in 0..n {
            for ch in 0..c {
                rfft_into(&src[(s * c + ch) * len..][..len], &mut spec);
                let re = (s * 2 * c + ch) * bins;
                let im = (s * 2 * c + c + ch) * bins;
                for (b, z) in spec.iter().enumerate() {
                    out[re + b] = z.re;
                    out[im + b] = z.im;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![n, 2 * c, bins], out)?, Op::Rfft(x)))
    }

    /// Inverse of [`Tape::rfft`]: `[N, 2C, B]` → `[N, C, 2(B-1)]`.
    pub fn irfft(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[1] % 2 != 0 || shape[2] < 2 {
            return Err(sizing(format!(
                "irfft expects [N, 2C, B>=2], got {shape:?}"
            )));
        }
        let (n, c, bins) = (shape[0], shape[1] / 2, shape[2]);
        let len = 2 * (bins - 1);
        require_pow2(len)?;
        let src = self.data(x);
        let mut out = vec![0.0; n * c * len];
        let mut spec = vec![Complex64::new(0.0, 0.0); bins];
        for s in 0..n {
            for ch in 0..c {
                let re = (s * 2 * c + ch) * bins;
                let im = (s * 2 * c + c + ch) * bins;
                for (b, z) in spec.iter_mut().enumerate() {
                    *z = Complex64::new(src[re + b], src[im + b]);
                }
                irfft_into(&spec, &mut out[(s * c + ch) * len..][..len]);
            }
        }
        Ok(self.push(Tensor::new(vec![n, c, len], out)?, Op::Irfft(x)))
    }

    /// `[N, C, L]` → `[N·S, C, L/S]`: segment `s` of sample `n` becomes
    /// batch entry `n·S + s`.
    pub fn segment_split(&mut self, x: Var, segments: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || segments == 0 || shape[2] % segments != 0 {
            return Err(sizing(format!(
                "cannot split {shape:?} into {segments} segments"
            )));
        }
        if segments == 1 {
            return Ok(x);
        }
        let (n, c, len) = (shape[0], shape[1], shape[2]);
        let seg = len / segments;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for s in 0..segments {
                for ch in 0..c {
                    let from = (b * c + ch) * len + s * seg;
                    let to = ((b * segments + s) * c + ch) * seg;
                    out[to..to + seg].copy_from_slice(&src[from..from + seg]);
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![n * segments, c, seg], out)?,
            Op::SegmentSplit { x, segments },
        ))
    }

    /// Inverse of [`Tape::segment_split`].
    pub fn segment_merge(&mut self, x: Var, segments: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || segments == 0 || shape[0] % segments != 0 {
            return Err(sizing(format!(
                "cannot merge {shape:?} from {segments} segments"
            )));
        }
        if segments == 1 {
            return Ok(x);
        }
        let (n, c, seg) = (shape[0] / segments, shape[1], shape[2]);
        let len = seg * segments;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for s in 0..segments {
                for ch in 0..c {
                    let to = (b * c + ch) * len + s * seg;
                    let from = ((b * segments + s) * c + ch) * seg;
                    out[to..to + seg].copy_from_slice(&src[from..from + seg]);
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![n, c, len], out)?,
            Op::SegmentMerge { x, segments },
        ))
    }

    // ── Losses ───────────────────────────────────────────────────────

    /// Mean softmax cross-entropy of `[N, R]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(sizing(format!(
                "cross_entropy logits {shape:?} with {} labels",
                labels.len()
            )));
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(contract(format!("label {bad} outside [0, {classes})")));
        }
        let mut total = 0.0;
        for (row, &label) in self.data(logits).chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let loss = total / labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Cosine similarity of matching rows of two `[P, D]` tensors → `[P]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine_rows")?;
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(sizing(format!("cosine_rows expects [P, D], got {shape:?}")));
        }
        let d = shape[1];
        let mut out = Vec::with_capacity(shape[0]);
        for (ra, rb) in self.data(a).chunks(d).zip(self.data(b).chunks(d)) {
            let na = dot(ra, ra).sqrt();
            let nb = dot(rb, rb).sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(contract("cosine similarity of a zero vector is undefined"));
            }
            out.push((dot(ra, rb) / (na * nb)).clamp(-1.0, 1.0));
        }
        Ok(self.push(Tensor::new(vec![shape[0]], out)?, Op::CosineRows(a, b)))
    }

    /// Per-pair binary cross-entropy on remapped similarities
    /// `clamp((s + 1) / 2, eps, 1 - eps)` against pair labels in {0, 1}.
    pub fn contrastive_ce(&mut self, s: Var, targets: &[f64], eps: f64) -> Result<Var> {
        let shape = self.shape(s).to_vec();
        if shape.len() != 1 || shape[0] != targets.len() {
            return Err(sizing(format!(
                "contrastive_ce similarities {shape:?} with {} targets",
                targets.len()
            )));
        }
        let data = self
            .data(s)
            .iter()
            .zip(targets)
            .map(|(&sv, &y)| contrastive_value(sv, y, eps))
            .collect();
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::ContrastiveCe {
                s,
                targets: targets.to_vec(),
                eps,
            },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| {
                    for ((dv, gv), bv) in d.iter_mut().zip(g).zip(db) {
                        *dv += gv * bv;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((dv, gv), av) in d.iter_mut().zip(g).zip(da) {
                        *dv += gv * av;
                    }
                });
            }
            Op::Scale(x, f) => self.acc(grads, *x, |d| axpy(d, g, *f)),
            Op::AddBias { x, bias } => {
                self.acc(grads, *x, |d| axpy(d, g, 1.0));
                let (outer, c, inner) = axis1_dims(node.value.shape());
                self.acc(grads, *bias, |d| {
                    for o in 0..outer {
                        for (ch, dv) in d.iter_mut().enumerate().take(c) {
                            *dv += g[(o * c + ch) * inner..][..inner].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                tb,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| {
                    for i in 0..*batch {
                        let gs = &g[i * m * n..(i + 1) * m * n];
                        let bs = &bd[i * k * n..(i + 1) * k * n];
                        let ds = &mut d[i * m * k..(i + 1) * m * k];
                        // dA = dC · op(B)^T
                        gemm(false, !*tb, m, k, n, gs, bs, ds);
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..*batch {
                        let gs = &g[i * m * n..(i + 1) * m * n];
                        let as_ = &ad[i * m * k..(i + 1) * m * k];
                        let ds = &mut d[i * k * n..(i + 1) * k * n];
                        if *tb {
                            // dB[N, K] = dC^T · A
                            gemm(true, false, n, k, m, gs, as_, ds);
                        } else {
                            // dB[K, N] = A^T · dC
                            gemm(true, false, k, n, m, as_, gs, ds);
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |d| axpy(d, g, 1.0)),
            Op::SwapLast2 {
                x,
                batch,
                rows,
                cols,
            } => {
                self.acc(grads, *x, |d| {
                    for b in 0..*batch {
                        let base = b * rows * cols;
                        for r in 0..*rows {
                            for c in 0..*cols {
                                d[base + r * cols + c] += g[base + c * rows + r];
                            }
                        }
                    }
                });
            }
            Op::Conv1d { x, w, geom } => {
                let (xd, wd) = (self.data(*x), self.data(*w));
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let mut dx = need_x.then(|| vec![0.0; xd.len()]);
                let mut dw = need_w.then(|| vec![0.0; wd.len()]);
                conv1d_backward(geom, xd, wd, g, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    self.acc(grads, *x, |d| axpy(d, &dx, 1.0));
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, |d| axpy(d, &dw, 1.0));
                }
            }
            Op::Swish(x) => {
                let xd = self.data(*x);
                self.acc(grads, *x, |d| {
                    for (((dv, gv), &xv), &yv) in d.iter_mut().zip(g).zip(xd).zip(y) {
                        // σ(x) = y / x away from zero saves an exp
                        let s = if xv.abs() > 1e-3 { yv / xv } else { sigmoid(xv) };
                        *dv += gv * s * (1.0 + xv * (1.0 - s));
                    }
                });
            }
            Op::Sigmoid(x) => self.acc(grads, *x, |d| {
                for ((dv, gv), yv) in d.iter_mut().zip(g).zip(y) {
                    *dv += gv * yv * (1.0 - yv);
                }
            }),
            Op::Tanh(x) => self.acc(grads, *x, |d| {
                for ((dv, gv), yv) in d.iter_mut().zip(g).zip(y) {
                    *dv += gv * (1.0 - yv * yv);
                }
            }),
            Op::LeakyRelu(x, slope) => {
                let xd = self.data(*x);
                self.acc(grads, *x, |d| {
                    for ((dv, gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        *dv += if xv > 0.0 { *gv } else { gv * slope };
                    }
                });
            }
            Op::LogSigmoid(x) => {
                let xd = self.data(*x);
                self.acc(grads, *x, |d| {
                    for ((dv, gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        *dv += gv * sigmoid(-xv);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let cols = *node.value.shape().last().unwrap();
                self.acc(grads, *x, |d| {
                    for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                    {
                        let inner: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += yv * (gv - inner);
                        }
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let scale = g[0] / self.value(*x).numel() as f64;
                self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += scale));
            }
            Op::MeanLast(x) => {
                let len = *self.shape(*x).last().unwrap();
                let inv = 1.0 / len as f64;
                self.acc(grads, *x, |d| {
                    for (row, gv) in d.chunks_mut(len).zip(g) {
                        row.iter_mut().for_each(|v| *v += gv * inv);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let width = node.value.numel() / idx.len();
                self.acc(grads, *x, |d| {
                    for (j, &i) in idx.iter().enumerate() {
                        axpy(
                            &mut d[i * width..(i + 1) * width],
                            &g[j * width..(j + 1) * width],
                            1.0,
                        );
                    }
                });
            }
            Op::Upsample { x, factor } => self.acc(grads, *x, |d| {
                for (dv, gc) in d.iter_mut().zip(g.chunks(*factor)) {
                    *dv += gc.iter().sum::<f64>();
                }
            }),
            Op::Subsample { x, stride } => {
                let len = *self.shape(*x).last().unwrap();
                let len_out = *node.value.shape().last().unwrap();
                self.acc(grads, *x, |d| {
                    for (row, gr) in d.chunks_mut(len).zip(g.chunks(len_out)) {
                        for (t, gv) in gr.iter().enumerate() {
                            row[t * stride] += gv;
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let (outer, ca, inner) = axis1_dims(self.shape(*a));
                let cb = self.shape(*b)[1];
                let c = ca + cb;
                self.acc(grads, *a, |d| {
                    for o in 0..outer {
                        axpy(
                            &mut d[o * ca * inner..(o + 1) * ca * inner],
                            &g[o * c * inner..][..ca * inner],
                            1.0,
                        );
                    }
                });
                self.acc(grads, *b, |d| {
                    for o in 0..outer {
                        axpy(
                            &mut d[o * cb * inner..(o + 1) * cb * inner],
                            &g[(o * c + ca) * inner..][..cb * inner],
                            1.0,
                        );
                    }
                });
            }
            Op::Narrow { x, start } => {
                let (outer, c, inner) = axis1_dims(self.shape(*x));
                let len = node.value.shape()[1];
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        axpy(
                            &mut d[(o * c + start) * inner..][..len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                            1.0,
                        );
                    }
                });
            }
            Op::Rfft(x) => {
                let shape = self.shape(*x);
                let (n, c, len) = (shape[0], shape[1], shape[2]);
                let bins = len / 2 + 1;
                self.acc(grads, *x, |d| {
                    let mut spec = vec![Complex64::new(0.0, 0.0); bins];
                    let mut buf = vec![0.0; len];
                    for s in 0..n {
                        for ch in 0..c {
                            let re = (s * 2 * c + ch) * bins;
                            let im = (s * 2 * c + c + ch) * bins;
                            for (b, z) in spec.iter_mut().enumerate() {
                                let w = if b == 0 || b == bins - 1 {
                                    len as f64
                                } else {
                                    len as f64 / 2.0
                                };
                                *z = Complex64::new(g[re + b], g[im + b]) * w;
                            }
                            irfft_into(&spec, &mut buf);
                            axpy(&mut d[(s * c + ch) * len..][..len], &buf, 1.0);
                        }
                    }
                });
            }
            Op::Irfft(x) => {
                let shape = self.shape(*x);
                let (n, c, bins) = (shape[0], shape[1] / 2, shape[2]);
                let len = 2 * (bins - 1);
                self.acc(grads, *x, |d| {
                    let mut spec = vec![Complex64::new(0.0, 0.0); bins];
                    for s in 0..n {
                        for ch in 0..c {
                            rfft_into(&g[(s * c + ch) * len..][..len], &mut spec);
                            let re = (s * 2 * c + ch) * bins;
                            let im = (s * 2 * c + c + ch) * bins;
                            for (b, z) in spec.iter().enumerate() {
                                let edge = b == 0 || b == bins - 1;
                                let w = if edge { 1.0 } else { 2.0 } / len as f64;
                                d[re + b] += z.re * w;
                                if !edge {
                                    d[im + b] += z.im * w;
                                }
                            }
                        }
                    }
                });
            }
            Op::SegmentSplit { x, segments } => {
                let shape = self.shape(*x);
                let (n, c, len) = (shape[0], shape[1], shape[2]);
                let seg = len / segments;
                self.acc(grads, *x, |d| {
                    for b in 0..n {
                        for s in 0..*segments {
                            for ch in 0..c {
                                let to = (b * c + ch) * len + s * seg;
                                let from = ((b * segments + s) * c + ch) * seg;
                                axpy(&mut d[to..to + seg], &g[from..from + seg], 1.0);
                            }
                        }
                    }
                });
            }
            Op::SegmentMerge { x, segments } => {
                let shape = self.shape(*x);
                let (n, c, seg) = (shape[0] / segments, shape[1], shape[2]);
                let len = seg * segments;
                self.acc(grads, *x, |d| {
                    for b in 0..n {
                        for s in 0..*segments {
                            for ch in 0..c {
                                let from = (b * c + ch) * len + s * seg;
                                let to = ((b * segments + s) * c + ch) * seg;
                                axpy(&mut d[to..to + seg], &g[from..from + seg], 1.0);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels } => {
                let classes = self.shape(*logits)[1];
                let ld = self.data(*logits);
                let scale = g[0] / labels.len() as f64;
                self.acc(grads, *logits, |d| {
                    for ((dr, row), &label) in
                        d.chunks_mut(classes).zip(ld.chunks(classes)).zip(labels)
                    {
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for (j, (dv, v)) in dr.iter_mut().zip(row).enumerate() {
                            let p = (v - max).exp() / z;
                            let t = if j == label { 1.0 } else { 0.0 };
                            *dv += scale * (p - t);
                        }
                    }
                });
            }
            Op::CosineRows(a, b) => {
                let dim = self.shape(*a)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                let mut da = vec![0.0; ad.len()];
                let mut db = vec![0.0; bd.len()];
                for (p, gv) in g.iter().enumerate() {
                    let ra = &ad[p * dim..(p + 1) * dim];
                    let rb = &bd[p * dim..(p + 1) * dim];
                    let na = dot(ra, ra).sqrt();
                    let nb = dot(rb, rb).sqrt();
                    let s = y[p];
                    for j in 0..dim {
                        da[p * dim + j] += gv * (rb[j] / (na * nb) - s * ra[j] / (na * na));
                        db[p * dim + j] += gv * (ra[j] / (na * nb) - s * rb[j] / (nb * nb));
                    }
                }
                self.acc(grads, *a, |d| axpy(d, &da, 1.0));
                self.acc(grads, *b, |d| axpy(d, &db, 1.0));
            }
            Op::ContrastiveCe { s, targets, eps } => {
                let sd = self.data(*s);
                self.acc(grads, *s, |d| {
                    for (((dv, gv), &sv), &t) in d.iter_mut().zip(g).zip(sd).zip(targets) {
                        let mapped = (sv + 1.0) / 2.0;
                        if mapped <= *eps || mapped >= 1.0 - eps {
                            continue;
                        }
                        *dv += gv * 0.5 * (-t / mapped + (1.0 - t) / (1.0 - mapped));
                    }
                });
            }
        }
    }

    /// Accumulates into the gradient slot of `v` if it participates.
    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

pub(crate) fn contrastive_value(s: f64, y: f64, eps: f64) -> f64 {
    let mapped = ((s + 1.0) / 2.0).clamp(eps, 1.0 - eps);
    -(y * mapped.ln() + (1.0 - y) * (1.0 - mapped).ln())
}
