use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm running statistics. Momentum and epsilon are configurable;
/// defaults follow the common 0.1 / 1e-5 convention.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

pub enum BnMode<'a> {
    /// Normalize with batch statistics and update the running estimates.
    Train(&'a mut RunningStats),
    /// Normalize with the running estimates.
    Eval(&'a RunningStats),
}

struct BnSaved {
    mean: Vec<f32>,
    inv_std: Vec<f32>,
    batch_stats: bool,
}

struct NtXentSaved {
    normed: Vec<f32>,
    norms: Vec<f32>,
    probs: Vec<f32>,
}

struct CosineSaved {
    norm_a: f64,
    norm_b: f64,
    cos: f64,
}

enum Op {
    Leaf,
    Conv2d { x: usize, k: usize, geom: ConvGeom },
    ConvTranspose2d { x: usize, k: usize, geom: ConvGeom },
    ChannelBias { x: usize, b: usize },
    Dense { x: usize, w: usize, b: usize, n: usize, d_in: usize, d_out: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, saved: Option<BnSaved> },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Abs(usize),
    Square(usize),
    Clamp { x: usize, lo: f32, hi: f32 },
    Scale { x: usize, c: f32 },
    AddScalar(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Reshape(usize),
    Sum(usize),
    RowSum(usize),
    SliceCols { x: usize, start: usize },
    ConcatCols(usize, usize),
    GatherCols { x: usize, index: Vec<usize> },
    Cosine { a: usize, b: usize, saved: Option<CosineSaved> },
    NtXent { x: usize, tau: f32, saved: Option<NtXentSaved> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv2d_transpose",
            Op::ChannelBias { .. } => "channel_bias",
            Op::Dense { .. } => "dense",
            Op::BatchNorm { .. } => "batch_norm_2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Clamp { .. } => "clamp",
            Op::Scale { .. } => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::RowSum(_) => "row_sum",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherCols { .. } => "gather_cols",
            Op::Cosine { .. } => "cosine_similarity",
            Op::NtXent { .. } => "nt_xent",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// A single-threaded differentiation tape.
///
/// Leaf gradients accumulate across [`Graph::backward`] calls until
/// [`Graph::zero_grad`] is called.
pub struct Graph {
    nodes: Vec<Node>,
    save: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            save: true,
        }
    }

    /// A graph that skips the extra buffers only backward needs. Calling
    /// backward through such nodes fails with [`Error::MissingActivation`].
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            save: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A tracked leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// An untracked leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn params<'a>(&mut self, values: impl IntoIterator<Item = &'a Tensor>) -> Vec<Var> {
        values.into_iter().map(|t| self.param(t.clone())).collect()
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

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a leaf, or zeros if backward never reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("output of {}", op.name()),
            });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, inputs: &[Var]) -> bool {
        self.save && inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ── convolution ────────────────────────────────────────────────────────

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::conv(self.shape(x), self.shape(kernel), stride, padding)?;
        let out = kernels::conv_forward(self.value(x).data(), self.value(kernel).data(), &geom);
        let value = Tensor::new(geom.output_shape().to_vec(), out)?;
        self.push(value, Op::Conv2d { x: x.0, k: kernel.0, geom }, &[x.0, kernel.0])
    }

    /// Adjoint of [`Graph::conv2d`]; `kernel` is `(c_in, c_out, k, k)` in the
    /// transposed convolution's own channel terms.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::transpose(self.shape(x), self.shape(kernel), stride, padding)?;
        let out =
            kernels::conv_backward_input(self.value(x).data(), self.value(kernel).data(), &geom);
        let value = Tensor::new(geom.input_shape().to_vec(), out)?;
        self.push(
            value,
            Op::ConvTranspose2d { x: x.0, k: kernel.0, geom },
            &[x.0, kernel.0],
        )
    }

    /// Adds a per-channel bias to an NCHW tensor.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || self.shape(bias) != [shape[1]] {
            return Err(Error::shape(
                "channel_bias",
                format!("input {shape:?} with bias {:?}", self.shape(bias)),
            ));
        }
        let plane = shape[2] * shape[3];
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let c = b[i % shape[1]];
            chunk.iter_mut().for_each(|v| *v += c);
        }
        self.push(Tensor::new(shape, out)?, Op::ChannelBias { x: x.0, b: bias.0 }, &[x.0, bias.0])
    }

    // ── dense / normalization ──────────────────────────────────────────────

    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || self.shape(bias) != [ws[1]] {
            return Err(Error::shape(
                "dense",
                format!(
                    "input {xs:?}, weight {ws:?}, bias {:?}",
                    self.shape(bias)
                ),
            ));
        }
        let (n, d_in, d_out) = (xs[0], xs[1], ws[1]);
        let out = kernels::dense_forward(
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            d_in,
            d_out,
        );
        self.push(
            Tensor::new(vec![n, d_out], out)?,
            Op::Dense { x: x.0, w: weight.0, b: bias.0, n, d_in, d_out },
            &[x.0, weight.0, bias.0],
        )
    }

    pub fn batch_norm_2d(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || self.shape(gamma) != [shape[1]] || self.shape(beta) != [shape[1]] {
            return Err(Error::shape(
                "batch_norm_2d",
                format!(
                    "input {shape:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let count = n * plane;
        let xv = self.value(x).data();
        let (mean, inv_std, batch_stats) = match mode {
            BnMode::Train(stats) => {
                if count == 0 {
                    return Err(Error::shape("batch_norm_2d", "empty batch in train mode"));
                }
                if stats.mean.len() != c {
                    return Err(Error::shape(
                        "batch_norm_2d",
                        format!("running stats for {} channels, input has {c}", stats.mean.len()),
                    ));
                }
                let mut mean = vec![0.0f32; c];
                let mut inv_std = vec![0.0f32; c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        s += xv[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0f64;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        ss += xv[off..off + plane]
                            .iter()
                            .map(|&v| (v as f64 - m).powi(2))
                            .sum::<f64>();
                    }
                    let var = ss / count as f64;
                    mean[ch] = m as f32;
                    inv_std[ch] = (1.0 / (var + stats.eps as f64).sqrt()) as f32;
                    let unbiased = if count > 1 { ss / (count - 1) as f64 } else { var };
                    let mo = stats.momentum;
                    stats.mean[ch] = (1.0 - mo) * stats.mean[ch] + mo * m as f32;
                    stats.var[ch] = (1.0 - mo) * stats.var[ch] + mo * unbiased as f32;
                }
                (mean, inv_std, true)
            }
            BnMode::Eval(stats) => {
                if stats.mean.len() != c {
                    return Err(Error::shape(
                        "batch_norm_2d",
                        format!("running stats for {} channels, input has {c}", stats.mean.len()),
                    ));
                }
                let inv_std = stats.var.iter().map(|&v| 1.0 / (v + stats.eps).sqrt()).collect();
                (stats.mean.clone(), inv_std, false)
            }
        };
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![0.0f32; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                let (m, s, ga, be) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
                for (o, &v) in out[off..off + plane].iter_mut().zip(&xv[off..off + plane]) {
                    *o = ga * (v - m) * s + be;
                }
            }
        }
        let saved = self.tracked(&[x, gamma, beta]).then_some(BnSaved {
            mean,
            inv_std,
            batch_stats,
        });
        self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, saved },
            &[x.0, gamma.0, beta.0],
        )
    }

    // ── elementwise ────────────────────────────────────────────────────────

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(value, op, &[x.0])
    }

    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x.0), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x.0), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x.0), f32::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x.0), f32::exp)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x.0), f32::abs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x.0), |v| v * v)
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        self.unary(x, Op::Clamp { x: x.0, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        self.unary(x, Op::Scale { x: x.0, c }, |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Result<Var> {
        self.unary(x, Op::AddScalar(x.0), |v| v + c)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, op, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a.0, b.0), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a.0, b.0), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a.0, b.0), "mul", |x, y| x * y)
    }

    // ── shape / reduction ──────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x.0), &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum() as f32;
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f32;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums everything but the leading axis: `(n, ...) -> (n)`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().first().ok_or_else(|| Error::shape("row_sum", "0-D input"))?;
        let data = (0..n)
            .map(|i| t.row(i).iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect();
        self.push(Tensor::new(vec![n], data)?, Op::RowSum(x.0), &[x.0])
    }

    /// Columns `start..start + width` of an `(n, d)` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || start + width > shape[1] {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {shape:?}", start + width),
            ));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(shape[0] * width);
        for i in 0..shape[0] {
            data.extend_from_slice(&t.row(i)[start..start + width]);
        }
        self.push(Tensor::new(vec![shape[0], width], data)?, Op::SliceCols { x: x.0, start }, &[x.0])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape("concat_cols", format!("{sa:?} with {sb:?}")));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(sa[0] * (sa[1] + sb[1]));
        for i in 0..sa[0] {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        self.push(
            Tensor::new(vec![sa[0], sa[1] + sb[1]], data)?,
            Op::ConcatCols(a.0, b.0),
            &[a.0, b.0],
        )
    }

    /// `out[:, j] = x[:, index[j]]`.
    pub fn gather_cols(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || index.iter().any(|&j| j >= shape[1]) {
            return Err(Error::shape(
                "gather_cols",
                format!("index out of range for {shape:?}"),
            ));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(shape[0] * index.len());
        for i in 0..shape[0] {
            let row = t.row(i);
            data.extend(index.iter().map(|&j| row[j]));
        }
        self.push(
            Tensor::new(vec![shape[0], index.len()], data)?,
            Op::GatherCols { x: x.0, index: index.to_vec() },
            &[x.0],
        )
    }

    // ── similarity losses ──────────────────────────────────────────────────

    /// Cosine similarity of two equally-sized vectors, as a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::shape(
                "cosine_similarity",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let norm_a = va.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let norm_b = vb.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        for norm in [norm_a, norm_b] {
            if norm < 1e-12 {
                return Err(Error::DegenerateEmbedding { norm });
            }
        }
        let dot: f64 = va.iter().zip(vb).map(|(&x, &y)| x as f64 * y as f64).sum();
        let cos = (dot / (norm_a * norm_b)).clamp(-1.0, 1.0);
        let saved = self.tracked(&[a, b]).then_some(CosineSaved { norm_a, norm_b, cos });
        self.push(
            Tensor::scalar(cos as f32),
            Op::Cosine { a: a.0, b: b.0, saved },
            &[a.0, b.0],
        )
    }

    /// Normalized temperature-scaled cross entropy over `2n` embeddings laid
    /// out as `[view_a(0..n); view_b(0..n)]`, so row `i` pairs with row
    /// `(i + n) mod 2n`. For each anchor the denominator runs over all
    /// `2n - 1` other rows, positive included; the result is the sum over
    /// all `2n` anchors.
    pub fn nt_xent(&mut self, x: Var, tau: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] < 2 || shape[0] % 2 != 0 {
            return Err(Error::shape(
                "nt_xent",
                format!("expected (2n, d) embeddings with n >= 1, got {shape:?}"),
            ));
        }
        if tau <= 0.0 {
            return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
        }
        let (rows, d) = (shape[0], shape[1]);
        let half = rows / 2;
        let t = self.value(x);
        let mut normed = vec![0.0f32; rows * d];
        let mut norms = vec![0.0f32; rows];
        for i in 0..rows {
            let r = t.row(i);
            let norm = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::DegenerateEmbedding { norm });
            }
            norms[i] = norm as f32;
            for (o, &v) in normed[i * d..(i + 1) * d].iter_mut().zip(r) {
                *o = (v as f64 / norm) as f32;
            }
        }
        let mut sim = vec![0.0f32; rows * rows];
        kernels::gemm(false, true, rows, rows, d, &normed, &normed, 0.0, &mut sim);
        let mut probs = vec![0.0f32; rows * rows];
        let mut total = 0.0f64;
        for a in 0..rows {
            let pos = (a + half) % rows;
            let logits: Vec<f64> = (0..rows).map(|j| sim[a * rows + j] as f64 / tau as f64).collect();
            let max = (0..rows)
                .filter(|&j| j != a)
                .map(|j| logits[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..rows).filter(|&j| j != a).map(|j| (logits[j] - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - logits[pos];
            for j in 0..rows {
                if j != a {
                    probs[a * rows + j] = ((logits[j] - lse).exp()) as f32;
                }
            }
        }
        let saved = self.tracked(&[x]).then_some(NtXentSaved { normed, norms, probs });
        self.push(Tensor::scalar(total as f32), Op::NtXent { x: x.0, tau, saved }, &[x.0])
    }

    // ── backward ───────────────────────────────────────────────────────────

    /// Accumulates gradients of `output` into every tracked leaf. `seed` is
    /// the upstream gradient; it may be omitted only for scalar outputs.
    pub fn backward(&mut self, output: Var, seed: Option<&Tensor>) -> Result<()> {
        let out_shape = self.shape(output).to_vec();
        let seed = match seed {
            Some(s) => {
                if s.shape() != out_shape.as_slice() {
                    return Err(Error::shape(
                        "backward",
                        format!("seed {:?} for output {out_shape:?}", s.shape()),
                    ));
                }
                if !s.is_finite() {
                    return Err(Error::NonFinite { context: "backward seed".into() });
                }
                s.data().to_vec()
            }
            None => {
                if self.value(output).len() != 1 {
                    return Err(Error::shape(
                        "backward",
                        format!("non-scalar output {out_shape:?} needs an explicit seed"),
                    ));
                }
                vec![1.0]
            }
        };
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[i];
        let missing = || Error::MissingActivation { node: i, op: node.op.name() };
        let val = |j: usize| self.nodes[j].value.data();
        let mut acc = |j: usize, contrib: Vec<f32>| {
            if !self.nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let needs = |j: usize| self.nodes[j].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, geom } => {
                if needs(*x) {
                    acc(*x, kernels::conv_backward_input(g, val(*k), geom));
                }
                if needs(*k) {
                    acc(*k, kernels::conv_backward_kernel(val(*x), g, geom));
                }
            }
            Op::ConvTranspose2d { x, k, geom } => {
                if needs(*x) {
                    acc(*x, kernels::conv_forward(g, val(*k), geom));
                }
                if needs(*k) {
                    acc(*k, kernels::conv_backward_kernel(g, val(*x), geom));
                }
            }
            Op::ChannelBias { x, b } => {
                let shape = node.value.shape();
                let (c, plane) = (shape[1], shape[2] * shape[3]);
                if needs(*b) {
                    let mut gb = vec![0.0f64; c];
                    for (idx, chunk) in g.chunks(plane).enumerate() {
                        gb[idx % c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
                    }
                    acc(*b, gb.into_iter().map(|v| v as f32).collect());
                }
                acc(*x, g.to_vec());
            }
            Op::Dense { x, w, b, n, d_in, d_out } => {
                let (n, d_in, d_out) = (*n, *d_in, *d_out);
                if needs(*x) {
                    let mut gx = vec![0.0; n * d_in];
                    kernels::gemm(false, true, n, d_in, d_out, g, val(*w), 0.0, &mut gx);
                    acc(*x, gx);
                }
                if needs(*w) {
                    let mut gw = vec![0.0; d_in * d_out];
                    kernels::gemm(true, false, d_in, d_out, n, val(*x), g, 0.0, &mut gw);
                    acc(*w, gw);
                }
                if needs(*b) {
                    let mut gb = vec![0.0f64; d_out];
                    for row in g.chunks(d_out) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
                    }
                    acc(*b, gb.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let saved = saved.as_ref().ok_or_else(missing)?;
                let shape = node.value.shape();
                let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let xv = val(*x);
                let gam = val(*gamma);
                let count = (n * plane) as f64;
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        let (m, s) = (saved.mean[ch], saved.inv_std[ch]);
                        for (&gv, &xv) in g[off..off + plane].iter().zip(&xv[off..off + plane]) {
                            sum_g[ch] += gv as f64;
                            sum_gx[ch] += gv as f64 * ((xv - m) * s) as f64;
                        }
                    }
                }
                if needs(*x) {
                    let mut gx = vec![0.0f32; xv.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let (m, s) = (saved.mean[ch], saved.inv_std[ch]);
                            let scale = gam[ch] * s;
                            if saved.batch_stats {
                                let mg = sum_g[ch] / count;
                                let mgx = sum_gx[ch] / count;
                                for ((o, &gv), &xv) in gx[off..off + plane]
                                    .iter_mut()
                                    .zip(&g[off..off + plane])
                                    .zip(&xv[off..off + plane])
                                {
                                    let xhat = ((xv - m) * s) as f64;
                                    *o = (scale as f64 * (gv as f64 - mg - xhat * mgx)) as f32;
                                }
                            } else {
                                for (o, &gv) in gx[off..off + plane].iter_mut().zip(&g[off..off + plane]) {
                                    *o = scale * gv;
                                }
                            }
                        }
                    }
                    acc(*x, gx);
                }
                if needs(*gamma) {
                    acc(*gamma, sum_gx.iter().map(|&v| v as f32).collect());
                }
                if needs(*beta) {
                    acc(*beta, sum_g.iter().map(|&v| v as f32).collect());
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, g.iter().zip(xv).map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 }).collect());
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(&gv, &y)| gv * y * (1.0 - y)).collect());
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(&gv, &y)| gv * (1.0 - y * y)).collect());
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(&gv, &y)| gv * y).collect());
            }
            Op::Abs(x) => {
                let xv = val(*x);
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > 0.0 { gv } else if v < 0.0 { -gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Square(x) => {
                let xv = val(*x);
                acc(*x, g.iter().zip(xv).map(|(&gv, &v)| 2.0 * v * gv).collect());
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v >= *lo && v <= *hi { gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Scale { x, c } => acc(*x, g.iter().map(|&v| v * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(&gv, &v)| gv * v).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(&gv, &v)| gv * v).collect());
                }
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::RowSum(x) => {
                let len = val(*x).len();
                let width = len / g.len().max(1);
                acc(*x, (0..len).map(|j| g[j / width]).collect());
            }
            Op::SliceCols { x, start } => {
                let in_shape = self.nodes[*x].value.shape();
                let (n, d) = (in_shape[0], in_shape[1]);
                let width = node.value.shape()[1];
                let mut gx = vec![0.0; n * d];
                for r in 0..n {
                    gx[r * d + start..r * d + start + width].copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                acc(*x, gx);
            }
            Op::ConcatCols(a, b) => {
                let da = self.nodes[*a].value.shape()[1];
                let db = self.nodes[*b].value.shape()[1];
                let n = node.value.shape()[0];
                if needs(*a) {
                    acc(*a, (0..n).flat_map(|r| g[r * (da + db)..r * (da + db) + da].to_vec()).collect());
                }
                if needs(*b) {
                    acc(*b, (0..n).flat_map(|r| g[r * (da + db) + da..(r + 1) * (da + db)].to_vec()).collect());
                }
            }
            Op::GatherCols { x, index } => {
                let in_shape = self.nodes[*x].value.shape();
                let (n, d) = (in_shape[0], in_shape[1]);
                let w = index.len();
                let mut gx = vec![0.0; n * d];
                for r in 0..n {
                    for (j, &src) in index.iter().enumerate() {
                        gx[r * d + src] += g[r * w + j];
                    }
                }
                acc(*x, gx);
            }
            Op::Cosine { a, b, saved } => {
                let s = saved.as_ref().ok_or_else(missing)?;
                let (va, vb) = (val(*a), val(*b));
                let up = g[0] as f64;
                let inv = 1.0 / (s.norm_a * s.norm_b);
                if needs(*a) {
                    let ga = va
                        .iter()
                        .zip(vb)
                        .map(|(&x, &y)| (up * (y as f64 * inv - s.cos * x as f64 / (s.norm_a * s.norm_a))) as f32)
                        .collect();
                    acc(*a, ga);
                }
                if needs(*b) {
                    let gb = va
                        .iter()
                        .zip(vb)
                        .map(|(&x, &y)| (up * (x as f64 * inv - s.cos * y as f64 / (s.norm_b * s.norm_b))) as f32)
                        .collect();
                    acc(*b, gb);
                }
            }
            Op::NtXent { x, tau, saved } => {
                let s = saved.as_ref().ok_or_else(missing)?;
                let shape = self.nodes[*x].value.shape();
                let (rows, d) = (shape[0], shape[1]);
                let half = rows / 2;
                // dL/dsim[a][j] = (p[a][j] - [j == pos(a)]) / tau for j != a
                let mut gs = vec![0.0f32; rows * rows];
                for a in 0..rows {
                    let pos = (a + half) % rows;
                    for j in 0..rows {
                        if j == a {
                            continue;
                        }
                        let ind = if j == pos { 1.0 } else { 0.0 };
                        gs[a * rows + j] = g[0] * (s.probs[a * rows + j] - ind) / tau;
                    }
                }
                // sim = N N^T, so dN = (G + G^T) N
                let mut sym = vec![0.0f32; rows * rows];
                for a in 0..rows {
                    for j in 0..rows {
                        sym[a * rows + j] = gs[a * rows + j] + gs[j * rows + a];
                    }
                }
                let mut gn = vec![0.0f32; rows * d];
                kernels::gemm(false, false, rows, d, rows, &sym, &s.normed, 0.0, &mut gn);
                // through the row normalization u / |u|
                let mut gx = vec![0.0f32; rows * d];
                for r in 0..rows {
                    let nr = &s.normed[r * d..(r + 1) * d];
                    let gr = &gn[r * d..(r + 1) * d];
                    let proj: f64 = nr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                    let inv = 1.0 / s.norms[r] as f64;
                    for ((o, &nv), &gv) in gx[r * d..(r + 1) * d].iter_mut().zip(nr).zip(gr) {
                        *o = ((gv as f64 - nv as f64 * proj) * inv) as f32;
                    }
                }
                acc(*x, gx);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = g.input(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y), &Tensor::full(&[1, 1, 2, 2], 4.0));
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f32> = (0..18).map(|i| i as f32 * 0.5 - 3.0).collect();
        let x = g.input(t(&[2, 1, 3, 3], &data));
        let k = g.input(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
    }

    #[test]
    fn conv_shape_error_names_dimensions() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3, 8, 8]));
        let k = g.input(Tensor::zeros(&[4, 2, 4, 4]));
        let err = g.conv2d(x, k, 2, 1).unwrap_err().to_string();
        assert!(err.contains("3 channels") && err.contains("[4, 2, 4, 4]"), "{err}");
    }

    #[test]
    fn transpose_of_single_pixel_stamps_kernel() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 1, 1, 1], 2.5));
        let kdata: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let k = g.input(t(&[1, 1, 4, 4], &kdata));
        let y = g.conv2d_transpose(x, k, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        let expected: Vec<f32> = kdata.iter().map(|v| v * 2.5).collect();
        assert_eq!(g.value(y).data(), expected.as_slice());
    }

    #[test]
    fn transpose_of_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 3, 4, 4]));
        let k = g.input(Tensor::full(&[3, 2, 4, 4], 0.7));
        let y = g.conv2d_transpose(x, k, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 8, 8]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_values_and_indicator_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[2], &[-1.0, 2.0]));
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s, None).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[1], &[0.0]));
        let y = g.relu(x).unwrap();
        g.backward(y, None).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn relu_identity_on_positive() {
        let mut g = Graph::new();
        let x = g.input(t(&[4], &[0.1, 1.0, 3.5, 100.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn dense_examples() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2], &[1.0, 2.0]));
        let w = g.input(t(&[2, 1], &[1.0, 1.0]));
        let b = g.input(t(&[1], &[0.0]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);

        let mut g = Graph::new();
        let data = [0.5, -1.0, 2.0, 3.0, 0.0, -4.0];
        let x = g.input(t(&[2, 3], &data));
        let w = g.input(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let b = g.input(Tensor::zeros(&[3]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &data);

        let w_bad = g.input(Tensor::zeros(&[2, 3]));
        assert!(g.dense(x, w_bad, b).is_err());
    }

    #[test]
    fn batch_norm_examples() {
        let gamma = Tensor::full(&[2], 1.0);
        // constant per channel -> zeros (gamma 1, beta 0)
        let mut stats = RunningStats::new(2);
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2, 1, 2], &[3., 3., 7., 7., 3., 3., 7., 7.]));
        let ga = g.input(gamma.clone());
        let be = g.input(Tensor::zeros(&[2]));
        let y = g.batch_norm_2d(x, ga, be, BnMode::Train(&mut stats)).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        // running mean moved toward the batch means by the momentum
        assert!((stats.mean[0] - 0.3).abs() < 1e-6 && (stats.mean[1] - 0.7).abs() < 1e-6);

        let be = g.input(Tensor::full(&[2], 0.5));
        let mut stats = RunningStats::new(2);
        let y = g.batch_norm_2d(x, ga, be, BnMode::Train(&mut stats)).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.5));

        // channel {0, 2} -> {-1, 1} up to the epsilon
        let mut stats = RunningStats::new(1);
        let x = g.input(t(&[1, 1, 1, 2], &[0.0, 2.0]));
        let ga = g.input(Tensor::full(&[1], 1.0));
        let be = g.input(Tensor::zeros(&[1]));
        let y = g.batch_norm_2d(x, ga, be, BnMode::Train(&mut stats)).unwrap();
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        let out = g.value(y).data();
        assert!((out[0] as f64 + expected).abs() < 1e-6);
        assert!((out[1] as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn batch_norm_eval_before_training_uses_initial_stats() {
        let stats = RunningStats::new(1);
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 1, 3], &[1.0, -2.0, 0.5]));
        let ga = g.input(Tensor::full(&[1], 1.0));
        let be = g.input(Tensor::zeros(&[1]));
        let y = g.batch_norm_2d(x, ga, be, BnMode::Eval(&stats)).unwrap();
        let s = 1.0 / (1.0f32 + 1e-5).sqrt();
        for (o, v) in g.value(y).data().iter().zip([1.0, -2.0, 0.5]) {
            assert!((o - v * s).abs() < 1e-7);
        }
    }

    #[test]
    fn cosine_examples() {
        let cases = [
            ([1.0, 0.0], [0.0, 1.0], 0.0),
            ([2.0, 0.0], [1.0, 0.0], 1.0),
            ([1.0, 1.0], [1.0, 0.0], std::f32::consts::FRAC_1_SQRT_2),
        ];
        for (a, b, want) in cases {
            let mut g = Graph::new();
            let va = g.input(t(&[2], &a));
            let vb = g.input(t(&[2], &b));
            let c = g.cosine_similarity(va, vb).unwrap();
            assert!((g.value(c).item() - want).abs() < 1e-6);
        }
        let mut g = Graph::new();
        let va = g.input(t(&[2], &[0.0, 0.0]));
        let vb = g.input(t(&[2], &[1.0, 0.0]));
        assert!(matches!(
            g.cosine_similarity(va, vb),
            Err(Error::DegenerateEmbedding { .. })
        ));
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, -2.0]));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s, None).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn seeded_backward_and_accumulation() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.reshape(x, &[3]).unwrap();
        let ones = Tensor::full(&[3], 1.0);
        g.backward(y, Some(&ones)).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        g.backward(y, Some(&ones)).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(g.backward(y, None).is_err(), "non-scalar without seed");
        assert!(g.backward(y, Some(&Tensor::zeros(&[3]))).is_err(), "wrong seed shape");

        let mut g = Graph::inference();
        let x = g.param(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let l = g.nt_xent(x, 0.5).unwrap();
        assert!(matches!(g.backward(l, None), Err(Error::MissingActivation { .. })));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[100.0]));
        assert!(matches!(g.exp(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn nt_xent_hand_values() {
        // n = 1, identical pair: only term in the denominator is the positive
        let mut g = Graph::new();
        let x = g.input(t(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]));
        let l = g.nt_xent(x, 0.5).unwrap();
        assert!(g.value(l).item().abs() < 1e-6);

        // n = 2, pairs (e1, e1) and (e2, e2)
        let mut g = Graph::new();
        let x = g.input(t(&[4, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]));
        let l = g.nt_xent(x, 0.5).unwrap();
        let e2 = std::f64::consts::E.powi(2);
        let per_anchor = -(e2 / (e2 + 2.0)).ln();
        assert!((per_anchor - 0.23956).abs() < 5e-5);
        assert!((g.value(l).item() as f64 - 4.0 * per_anchor).abs() < 1e-5);
        assert!((g.value(l).item() - 0.95825).abs() < 1e-4);
    }
}
