use num_complex::Complex64;

use super::fft::FftPlan;
use super::kernels::{self, CausalConv, ConvDims, SsmParamSlices};
use super::Tensor;
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Gelu,
    Exp,
    Log,
    Sigmoid,
    Relu,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Gelu => {
                let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-channel batch mean and variance.
pub type BatchStats = (Vec<f64>, Vec<f64>);

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Fixed affine map from stored running statistics.
    Frozen { mean: &'a [f64], var: &'a [f64] },
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    BiasAdd { x: Var, bias: Var },
    ChannelMul { x: Var, w: Var },
    MatMul(Var, Var),
    Conv1d { x: Var, w: Var, stride: usize, pad_left: usize },
    Unary(Var, Unary),
    Softmax { x: Var, axis: usize },
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    CausalConv { u: Var, k: Var },
    Reverse(Var),
    SsmKernel { params: [Var; 7], len: usize, pair_factor: f64 },
    AttnPool { values: Var, weights: Var },
    PairDot { a: Var, b: Var, pairs: Vec<(usize, usize)> },
    Gather { x: Var, positions: Vec<usize> },
    Reshape(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    MaskedBce { logits: Var, targets: Vec<f64>, mask: Vec<bool>, count: usize },
    MaskedL1 { pred: Var, targets: Vec<f64>, mask: Vec<bool>, count: usize },
    Fft { x: Var, inverse: bool, in_len: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in execution order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

fn dims_bct(t: &Tensor) -> (usize, usize, usize) {
    let d = t.dims3();
    (d[0], d[1], d[2])
}

impl Graph {
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(av.shape(), data).expect("shape checked");
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|v| v * s).collect()).unwrap();
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    fn channel_check(&self, op: &'static str, x: Var, c: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        let cs = self.shape(c);
        if xs.len() < 2 || cs.len() != 1 || cs[0] != xs[1] {
            return Err(Error::shape(op, format!("x {xs:?} with per-channel {cs:?}")));
        }
        Ok(dims_bct(self.value(x)))
    }

    /// Adds `bias[c]` along axis 1 of a `[B, C]` or `[B, C, T]` tensor.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c, t) = self.channel_check("bias_add", x, bias)?;
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data();
        for (k, row) in out.data_mut().chunks_mut(t.max(1)).enumerate() {
            let s = bv[k % c];
            row.iter_mut().for_each(|v| *v += s);
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::BiasAdd { x, bias }, rg))
    }

    /// Multiplies by `w[c]` along axis 1.
    pub fn channel_mul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (_, c, t) = self.channel_check("channel_mul", x, w)?;
        let mut out = self.value(x).clone();
        let wv = self.value(w).data();
        for (k, row) in out.data_mut().chunks_mut(t.max(1)).enumerate() {
            let s = wv[k % c];
            row.iter_mut().for_each(|v| *v *= s);
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::ChannelMul { x, w }, rg))
    }

    /// `[M, K] · [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::MatMul(a, b), rg))
    }

    fn conv_dims(&self, x: Var, w: Var, stride: usize, pad: (usize, usize)) -> Result<ConvDims> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(Error::shape("conv1d", format!("input {xs:?}, weight {ws:?}")));
        }
        let t_out = kernels::conv1d_out_len(xs[2], ws[2], stride, pad).ok_or_else(|| {
            Error::shape(
                "conv1d",
                format!("input {xs:?} too short for kernel {} / stride {stride}", ws[2]),
            )
        })?;
        Ok(ConvDims {
            batch: xs[0],
            c_in: xs[1],
            t_in: xs[2],
            c_out: ws[0],
            k: ws[2],
            stride,
            pad_left: pad.0,
            t_out,
        })
    }

    /// Cross-correlation of `x: [B, Cin, T]` with `w: [Cout, Cin, K]`,
    /// zero padding `(left, right)`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: (usize, usize)) -> Result<Var> {
        let d = self.conv_dims(x, w, stride, pad)?;
        let data = kernels::conv1d_forward(self.value(x).data(), self.value(w).data(), &d);
        let value = Tensor::new(&[d.batch, d.c_out, d.t_out], data)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                stride,
                pad_left: pad.0,
            },
            rg,
        ))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|&v| f.apply(v)).collect()).unwrap();
        let rg = self.rg(&[x]);
        self.push(value, Op::Unary(x, f), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(op, format!("axis {axis} for shape {:?}", self.shape(x))));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let xv = self.value(x);
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut out = xv.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| d[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (d[idx(j)] - max).exp();
                    d[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    d[idx(j)] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check_axis(if mean { "mean" } else { "sum" }, x, axis)?;
        let xv = self.value(x);
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &xv.data()[(o * n + j) * inner..][..inner];
                for (d, s) in data[o * inner..][..inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            let s = 1.0 / n as f64;
            data.iter_mut().for_each(|v| *v *= s);
        }
        let rg = self.rg(&[x]);
        let op = if mean { Op::Mean { x, axis } } else { Op::Sum { x, axis } };
        Ok(self.push(Tensor::new(&shape, data)?, op, rg))
    }

    /// Sum over `axis`; the axis is removed from the shape.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Batch normalization over the batch and time axes of `[B, C, T]` (or
    /// `[B, C]`). In train mode the per-channel batch mean and unbiased
    /// variance are returned so the caller can update running statistics.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (b, c, t) = self.channel_check("batchnorm1d", x, gamma)?;
        if self.shape(beta) != self.shape(gamma) {
            return Err(Error::shape("batchnorm1d", "gamma and beta differ"));
        }
        let xv = self.value(x).data();
        let m = (b * t) as f64;
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        s += xv[(bi * c + ci) * t..][..t].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut ss = 0.0;
                    for bi in 0..b {
                        ss += xv[(bi * c + ci) * t..][..t].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ci] = mu;
                    var[ci] = ss / m;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v })
                    .collect();
                let stats = (mean.clone(), unbiased);
                (mean, var, Some(stats))
            }
            BatchNormMode::Frozen { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm1d", "running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * t;
                for j in base..base + t {
                    let h = (xv[j] - mean[ci]) * inv_std[ci];
                    xhat[j] = h;
                    out[j] = gv[ci] * h + bv[ci];
                }
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let train = matches!(mode, BatchNormMode::Train);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Layer normalization across channels (axis 1) at every `(batch, time)`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (b, c, t) = self.channel_check("layernorm", x, gamma)?;
        if self.shape(beta) != self.shape(gamma) {
            return Err(Error::shape("layernorm", "gamma and beta differ"));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; b * t];
        for bi in 0..b {
            for ti in 0..t {
                let idx = |ci: usize| (bi * c + ci) * t + ti;
                let mu = (0..c).map(|ci| xv[idx(ci)]).sum::<f64>() / c as f64;
                let var = (0..c).map(|ci| (xv[idx(ci)] - mu).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + NORM_EPS).sqrt();
                inv_std[bi * t + ti] = is;
                for ci in 0..c {
                    let h = (xv[idx(ci)] - mu) * is;
                    xhat[idx(ci)] = h;
                    out[idx(ci)] = gv[ci] * h + bv[ci];
                }
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Per-channel causal convolution of `u: [B, C, T]` with `k: [C, L]`,
    /// evaluated with the FFT.
    pub fn causal_conv(&mut self, u: Var, k: Var) -> Result<Var> {
        let (us, ks) = (self.shape(u), self.shape(k));
        if us.len() != 3 || ks.len() != 2 || ks[0] != us[1] || ks[1] == 0 {
            return Err(Error::shape("causal_conv", format!("input {us:?}, kernel {ks:?}")));
        }
        let cc = CausalConv::new(us[0], us[1], us[2], ks[1]);
        let data = cc.forward(self.value(u).data(), self.value(k).data());
        let value = Tensor::new(self.shape(u), data)?;
        let rg = self.rg(&[u, k]);
        Ok(self.push(value, Op::CausalConv { u, k }, rg))
    }

    /// Reverses the time (last) axis of a `[B, C, T]` tensor.
    pub fn reverse_time(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 3 {
            return Err(Error::shape("reverse_time", format!("{:?}", self.shape(x))));
        }
        let value = reverse_rows(self.value(x));
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reverse(x), rg))
    }

    /// Convolution kernel `[C, len]` of a diagonal state-space layer.
    ///
    /// `params` are, in order: `log_dt [C]`, `log(-Re Λ) [C,N]`, `Im Λ`,
    /// `Re B`, `Im B`, `Re C`, `Im C` (all `[C,N]`). Each stored mode stands
    /// for a conjugate pair when `pair_factor` is 2.
    pub fn ssm_kernel(&mut self, params: [Var; 7], len: usize, pair_factor: f64) -> Result<Var> {
        let mut slices = self.ssm_slices(&params)?;
        slices.pair_factor = pair_factor;
        let data = slices.kernel(len);
        let channels = slices.channels;
        let rg = self.rg(&params);
        Ok(self.push(
            Tensor::new(&[channels, len], data)?,
            Op::SsmKernel {
                params,
                len,
                pair_factor,
            },
            rg,
        ))
    }

    fn ssm_slices(&self, p: &[Var; 7]) -> Result<SsmParamSlices<'_>> {
        let ds = self.shape(p[0]);
        let ms = self.shape(p[1]);
        if ds.len() != 1 || ms.len() != 2 || ms[0] != ds[0] {
            return Err(Error::shape("ssm_kernel", format!("log_dt {ds:?}, modes {ms:?}")));
        }
        for v in &p[2..] {
            if self.shape(*v) != ms {
                return Err(Error::shape("ssm_kernel", format!("{:?} vs {ms:?}", self.shape(*v))));
            }
        }
        Ok(SsmParamSlices {
            channels: ms[0],
            modes: ms[1],
            log_dt: self.value(p[0]).data(),
            log_neg_re: self.value(p[1]).data(),
            im: self.value(p[2]).data(),
            b_re: self.value(p[3]).data(),
            b_im: self.value(p[4]).data(),
            c_re: self.value(p[5]).data(),
            c_im: self.value(p[6]).data(),
            pair_factor: 2.0,
        })
    }

    /// `out[b, c] = Σ_t weights[b, t] · values[b, c, t]`; `weights` is
    /// `[B, 1, T]`.
    pub fn attn_pool(&mut self, values: Var, weights: Var) -> Result<Var> {
        let (vs, ws) = (self.shape(values), self.shape(weights));
        if vs.len() != 3 || ws.len() != 3 || ws[0] != vs[0] || ws[1] != 1 || ws[2] != vs[2] {
            return Err(Error::shape("attn_pool", format!("values {vs:?}, weights {ws:?}")));
        }
        let (b, c, t) = (vs[0], vs[1], vs[2]);
        let v = self.value(values).data();
        let w = self.value(weights).data();
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let wrow = &w[bi * t..][..t];
            for ci in 0..c {
                out[bi * c + ci] = v[(bi * c + ci) * t..][..t].iter().zip(wrow).map(|(a, b)| a * b).sum();
            }
        }
        let rg = self.rg(&[values, weights]);
        Ok(self.push(Tensor::new(&[b, c], out)?, Op::AttnPool { values, weights }, rg))
    }

    /// Channel dot products between positions of two `[B, C, T]` tensors.
    /// Each pair holds flat `(batch * T + time)` indices into `a` and `b`.
    pub fn pair_dot(&mut self, a: Var, b: Var, pairs: Vec<(usize, usize)>) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[1] != sb[1] {
            return Err(Error::shape("pair_dot", format!("{sa:?} vs {sb:?}")));
        }
        let (c, ta, tb) = (sa[1], sa[2], sb[2]);
        let (na, nb) = (sa[0] * ta, sb[0] * tb);
        if pairs.iter().any(|&(i, j)| i >= na || j >= nb) {
            return Err(Error::shape("pair_dot", "pair index out of range"));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<f64> = pairs
            .iter()
            .map(|&(i, j)| {
                let (ab, at) = (i / ta, i % ta);
                let (bb, bt) = (j / tb, j % tb);
                (0..c)
                    .map(|ci| av[(ab * c + ci) * ta + at] * bv[(bb * c + ci) * tb + bt])
                    .sum()
            })
            .collect();
        let n = out.len();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[n], out)?, Op::PairDot { a, b, pairs }, rg))
    }

    /// Collects time columns of `x: [B, C, T]` at flat `(batch * T + time)`
    /// positions into a `[1, C, M]` tensor.
    pub fn gather_positions(&mut self, x: Var, positions: Vec<usize>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::shape("gather_positions", format!("expected [B, C, T], got {s:?}")));
        }
        let (c, t) = (s[1], s[2]);
        if positions.iter().any(|&p| p >= s[0] * t) {
            return Err(Error::shape("gather_positions", "position out of range"));
        }
        let xv = self.value(x).data();
        let m = positions.len();
        let mut out = vec![0.0; c * m];
        for (j, &p) in positions.iter().enumerate() {
            let (b, ti) = (p / t, p % t);
            for ci in 0..c {
                out[ci * m + j] = xv[(b * c + ci) * t + ti];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[1, c, m], out)?, Op::Gather { x, positions }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Mean softmax cross-entropy of `logits: [M, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() || targets.iter().any(|&t| t >= s[1]) {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?}, {} targets", targets.len()),
            ));
        }
        let (m, k) = (s[0], s[1]);
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; m * k];
        let mut loss = 0.0;
        for r in 0..m {
            let row = &lv[r * k..][..k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
            for (p, v) in probs[r * k..][..k].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / m.max(1) as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    fn masked_check(&self, op: &'static str, x: Var, targets: &[f64], mask: &[bool]) -> Result<usize> {
        let n = self.value(x).len();
        if targets.len() != n || mask.len() != n {
            return Err(Error::shape(op, format!("{n} outputs, {} targets, {} mask", targets.len(), mask.len())));
        }
        Ok(mask.iter().filter(|m| **m).count())
    }

    /// Mean binary cross-entropy with logits over mask-true cells; `None`
    /// when no cell is selected.
    pub fn masked_bce(&mut self, logits: Var, targets: &[f64], mask: &[bool]) -> Result<Option<Var>> {
        let count = self.masked_check("masked_bce", logits, targets, mask)?;
        if count == 0 {
            return Ok(None);
        }
        let lv = self.value(logits).data();
        let total: f64 = lv
            .iter()
            .zip(targets)
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|((&x, &y), _)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(&[logits]);
        Ok(Some(self.push(
            Tensor::scalar(total / count as f64),
            Op::MaskedBce {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            rg,
        )))
    }

    /// Mean absolute error over mask-true cells; `None` when no cell is
    /// selected.
    pub fn masked_l1(&mut self, pred: Var, targets: &[f64], mask: &[bool]) -> Result<Option<Var>> {
        let count = self.masked_check("masked_l1", pred, targets, mask)?;
        if count == 0 {
            return Ok(None);
        }
        let pv = self.value(pred).data();
        let total: f64 = pv
            .iter()
            .zip(targets)
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|((p, t), _)| (p - t).abs())
            .sum();
        let rg = self.rg(&[pred]);
        Ok(Some(self.push(
            Tensor::scalar(total / count as f64),
            Op::MaskedL1 {
                pred,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            rg,
        )))
    }

    fn fft_op(&mut self, x: Var, n: usize, inverse: bool) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[1] != 2 || !n.is_power_of_two() || s[2] > n {
            return Err(Error::shape(
                if inverse { "ifft" } else { "fft" },
                format!("complex input {s:?} (expected [R, 2, L]) with length {n}"),
            ));
        }
        let (rows, in_len) = (s[0], s[2]);
        let out = complex_rows(self.value(x).data(), rows, in_len, n, |buf, plan| {
            if inverse {
                plan.inverse(buf)
            } else {
                plan.forward(buf)
            }
        });
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[rows, 2, n], out)?, Op::Fft { x, inverse, in_len }, rg))
    }

    /// Complex FFT of `[R, 2, L]` rows (real/imag on axis 1), zero-padded to
    /// `n`.
    pub fn fft(&mut self, x: Var, n: usize) -> Result<Var> {
        self.fft_op(x, n, false)
    }

    /// Inverse complex FFT (with `1/n`) of `[R, 2, L]` rows.
    pub fn ifft(&mut self, x: Var, n: usize) -> Result<Var> {
        self.fft_op(x, n, true)
    }

    /// Reverse-mode sweep from a scalar `loss`. The tape is cleared
    /// afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.map(|d| Tensor::new(node.value.shape(), d).expect("gradient shape matches value"))
            })
            .collect();
        self.nodes.clear();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<f64>| accumulate(grads, v, contrib);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        acc(v, g.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, g.to_vec());
                }
                if wants(*b) {
                    acc(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::BiasAdd { x, bias } => {
                let (b, c, t) = dims_bct(&self.nodes[x.0].value);
                if wants(*x) {
                    acc(*x, g.to_vec());
                }
                if wants(*bias) {
                    let mut gb = vec![0.0; c];
                    for bi in 0..b {
                        for (ci, gbv) in gb.iter_mut().enumerate() {
                            *gbv += g[(bi * c + ci) * t..][..t].iter().sum::<f64>();
                        }
                    }
                    acc(*bias, gb);
                }
            }
            Op::ChannelMul { x, w } => {
                let (b, c, t) = dims_bct(&self.nodes[x.0].value);
                let (xv, wv) = (val(*x), val(*w));
                if wants(*x) {
                    let mut gx = g.to_vec();
                    for bi in 0..b {
                        for ci in 0..c {
                            gx[(bi * c + ci) * t..][..t].iter_mut().for_each(|v| *v *= wv[ci]);
                        }
                    }
                    acc(*x, gx);
                }
                if wants(*w) {
                    let mut gw = vec![0.0; c];
                    for bi in 0..b {
                        for (ci, gwv) in gw.iter_mut().enumerate() {
                            let base = (bi * c + ci) * t;
                            *gwv += g[base..base + t].iter().zip(&xv[base..base + t]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    acc(*w, gw);
                }
            }
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    acc(*a, kernels::matmul_bt(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    acc(*b, kernels::matmul_at(val(*a), g, m, k, n));
                }
            }
            Op::Conv1d { x, w, stride, pad_left } => {
                let xs = self.nodes[x.0].value.shape();
                let ws = self.nodes[w.0].value.shape();
                let d = ConvDims {
                    batch: xs[0],
                    c_in: xs[1],
                    t_in: xs[2],
                    c_out: ws[0],
                    k: ws[2],
                    stride: *stride,
                    pad_left: *pad_left,
                    t_out: node.value.shape()[2],
                };
                let (gx, gw) = kernels::conv1d_backward(val(*x), val(*w), g, &d, wants(*x), wants(*w));
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                if let Some(gw) = gw {
                    acc(*w, gw);
                }
            }
            Op::Unary(x, f) => {
                let xv = val(*x);
                let yv = node.value.data();
                acc(
                    *x,
                    g.iter()
                        .zip(xv.iter().zip(yv))
                        .map(|(g, (&x, &y))| g * f.derivative(x, y))
                        .collect(),
                );
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let xs = self.nodes[x.0].value.shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let s = if matches!(node.op, Op::Mean { .. }) { 1.0 / n as f64 } else { 1.0 };
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for (d, gv) in gx[(o * n + j) * inner..][..inner].iter_mut().zip(&g[o * inner..][..inner]) {
                            *d = gv * s;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::SumAll(x) => acc(*x, vec![g[0]; self.nodes[x.0].value.len()]),
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (b, c, t) = dims_bct(&self.nodes[x.0].value);
                let gv = val(*gamma);
                let m = (b * t) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * t;
                        for j in base..base + t {
                            sum_g[ci] += g[j];
                            sum_gx[ci] += g[j] * xhat[j];
                        }
                    }
                }
                if wants(*gamma) {
                    acc(*gamma, sum_gx.clone());
                }
                if wants(*beta) {
                    acc(*beta, sum_g.clone());
                }
                if wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * t;
                            let k = gv[ci] * inv_std[ci];
                            for j in base..base + t {
                                gx[j] = if *train {
                                    k * (g[j] - sum_g[ci] / m - xhat[j] * sum_gx[ci] / m)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                    acc(*x, gx);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (b, c, t) = dims_bct(&self.nodes[x.0].value);
                let gv = val(*gamma);
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut gx = vec![0.0; g.len()];
                for bi in 0..b {
                    for ti in 0..t {
                        let idx = |ci: usize| (bi * c + ci) * t + ti;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for ci in 0..c {
                            let j = idx(ci);
                            ggamma[ci] += g[j] * xhat[j];
                            gbeta[ci] += g[j];
                            let gh = g[j] * gv[ci];
                            s1 += gh;
                            s2 += gh * xhat[j];
                        }
                        let is = inv_std[bi * t + ti];
                        let cf = c as f64;
                        for (ci, &gc) in gv.iter().enumerate() {
                            let j = idx(ci);
                            let gh = g[j] * gc;
                            gx[j] = is * (gh - s1 / cf - xhat[j] * s2 / cf);
                        }
                    }
                }
                if wants(*x) {
                    acc(*x, gx);
                }
                if wants(*gamma) {
                    acc(*gamma, ggamma);
                }
                if wants(*beta) {
                    acc(*beta, gbeta);
                }
            }
            Op::CausalConv { u, k } => {
                let us = self.nodes[u.0].value.shape();
                let ks = self.nodes[k.0].value.shape();
                let cc = CausalConv::new(us[0], us[1], us[2], ks[1]);
                let (gu, gk) = cc.backward(val(*u), val(*k), g, wants(*u), wants(*k));
                if let Some(gu) = gu {
                    acc(*u, gu);
                }
                if let Some(gk) = gk {
                    acc(*k, gk);
                }
            }
            Op::Reverse(x) => {
                let gt = Tensor::new(node.value.shape(), g.to_vec()).unwrap();
                acc(*x, reverse_rows(&gt).into_data());
            }
            Op::SsmKernel { params, len, pair_factor } => {
                let mut slices = self.ssm_slices(params).expect("validated in forward");
                slices.pair_factor = *pair_factor;
                let gs = slices.kernel_backward(g, *len);
                for (p, gp) in params.iter().zip(gs) {
                    if wants(*p) {
                        acc(*p, gp);
                    }
                }
            }
            Op::AttnPool { values, weights } => {
                let vs = self.nodes[values.0].value.shape();
                let (b, c, t) = (vs[0], vs[1], vs[2]);
                let (v, w) = (val(*values), val(*weights));
                if wants(*values) {
                    let mut gv = vec![0.0; v.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let gg = g[bi * c + ci];
                            for (d, wv) in gv[(bi * c + ci) * t..][..t].iter_mut().zip(&w[bi * t..][..t]) {
                                *d = gg * wv;
                            }
                        }
                    }
                    acc(*values, gv);
                }
                if wants(*weights) {
                    let mut gw = vec![0.0; w.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let gg = g[bi * c + ci];
                            for (d, vv) in gw[bi * t..][..t].iter_mut().zip(&v[(bi * c + ci) * t..][..t]) {
                                *d += gg * vv;
                            }
                        }
                    }
                    acc(*weights, gw);
                }
            }
            Op::PairDot { a, b, pairs } => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (c, ta, tb) = (sa[1], sa[2], sb[2]);
                let (av, bv) = (val(*a), val(*b));
                let mut ga = wants(*a).then(|| vec![0.0; av.len()]);
                let mut gb = wants(*b).then(|| vec![0.0; bv.len()]);
                for (&(i, j), &gg) in pairs.iter().zip(g) {
                    if gg == 0.0 {
                        continue;
                    }
                    let (ab, at) = (i / ta, i % ta);
                    let (bb, bt) = (j / tb, j % tb);
                    for ci in 0..c {
                        let ia = (ab * c + ci) * ta + at;
                        let ib = (bb * c + ci) * tb + bt;
                        if let Some(ga) = ga.as_mut() {
                            ga[ia] += gg * bv[ib];
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[ib] += gg * av[ia];
                        }
                    }
                }
                if let Some(ga) = ga {
                    acc(*a, ga);
                }
                if let Some(gb) = gb {
                    acc(*b, gb);
                }
            }
            Op::Gather { x, positions } => {
                let s = self.nodes[x.0].value.shape();
                let (c, t) = (s[1], s[2]);
                let m = positions.len();
                let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                for (j, &p) in positions.iter().enumerate() {
                    let (b, ti) = (p / t, p % t);
                    for ci in 0..c {
                        gx[(b * c + ci) * t + ti] += g[ci * m + j];
                    }
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::CrossEntropy { logits, targets, probs } => {
                let k = self.nodes[logits.0].value.shape()[1];
                let m = targets.len().max(1) as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0] / m).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * k + t] -= g[0] / m;
                }
                acc(*logits, gl);
            }
            Op::MaskedBce { logits, targets, mask, count } => {
                let s = g[0] / *count as f64;
                let gl = val(*logits)
                    .iter()
                    .zip(targets)
                    .zip(mask)
                    .map(|((&x, &y), &m)| if m { s * (sigmoid(x) - y) } else { 0.0 })
                    .collect();
                acc(*logits, gl);
            }
            Op::MaskedL1 { pred, targets, mask, count } => {
                let s = g[0] / *count as f64;
                let gp = val(*pred)
                    .iter()
                    .zip(targets)
                    .zip(mask)
                    .map(|((&p, &t), &m)| {
                        if m && p != t {
                            s * (p - t).signum()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(*pred, gp);
            }
            Op::Fft { x, inverse, in_len } => {
                // Adjoint of the unnormalized DFT is n·IDFT; of the IDFT, DFT/n.
                let s = node.value.shape();
                let (rows, n) = (s[0], s[2]);
                let nf = n as f64;
                let full = complex_rows(g, rows, n, n, |buf, plan| {
                    if *inverse {
                        plan.forward(buf);
                        buf.iter_mut().for_each(|v| *v /= nf);
                    } else {
                        plan.inverse(buf);
                        buf.iter_mut().for_each(|v| *v *= nf);
                    }
                });
                let mut gx = vec![0.0; rows * 2 * in_len];
                for r in 0..rows {
                    for part in 0..2 {
                        gx[(r * 2 + part) * in_len..][..*in_len]
                            .copy_from_slice(&full[(r * 2 + part) * n..][..*in_len]);
                    }
                }
                acc(*x, gx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn reverse_rows(x: &Tensor) -> Tensor {
    let (b, c, t) = dims_bct(x);
    let mut out = x.clone();
    for r in 0..b * c {
        out.data_mut()[r * t..][..t].reverse();
    }
    out
}

fn complex_rows(
    data: &[f64],
    rows: usize,
    in_len: usize,
    n: usize,
    f: impl Fn(&mut [Complex64], &FftPlan),
) -> Vec<f64> {
    let plan = FftPlan::new(n);
    let mut out = vec![0.0; rows * 2 * n];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for r in 0..rows {
        buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        let re = &data[(r * 2) * in_len..][..in_len];
        let im = &data[(r * 2 + 1) * in_len..][..in_len];
        for (j, b) in buf.iter_mut().take(in_len).enumerate() {
            *b = Complex64::new(re[j], im[j]);
        }
        f(&mut buf, &plan);
        for (j, v) in buf.iter().enumerate() {
            out[(r * 2) * n + j] = v.re;
            out[(r * 2 + 1) * n + j] = v.im;
        }
    }
    out
}
