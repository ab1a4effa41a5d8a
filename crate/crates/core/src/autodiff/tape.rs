use crate::autodiff::params::{ParamId, ParamStore};
use crate::autodiff::tensor::{matmul_nn, matmul_nt, matmul_tn, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::CounterRng;

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Param(ParamId),
    Constant,
    Matmul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// `x: m×n` plus row-broadcast bias `b: 1×n`.
    AddBias {
        x: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: S,
    },
    /// Elementwise product with a `1×1` tape scalar (gate application).
    MulScalarVar {
        x: Var,
        s: Var,
    },
    Transpose {
        x: Var,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols {
        xs: Vec<(Var, usize)>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    GatherCols {
        x: Var,
        idx: Vec<usize>,
    },
    Relu {
        x: Var,
    },
    Swish {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Sqrt {
        x: Var,
    },
    Clamp01 {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<S>,
        inv: Vec<S>,
    },
    Dropout {
        x: Var,
        mask: Vec<S>,
    },
    SoftmaxRows {
        x: Var,
        inv_temp: S,
    },
    LogSoftmaxRows {
        x: Var,
    },
    LogSumExp {
        x: Var,
        axis: usize,
    },
    LogAddExp {
        a: Var,
        b: Var,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    DepthwiseConv1d {
        x: Var,
        w: Var,
        pad: usize,
    },
    /// Forward emits fixed values; backward passes the gradient through
    /// unchanged (straight-through estimator). Deliberately not part of the
    /// finite-difference suite: its backward is not the true Jacobian.
    StraightThrough {
        x: Var,
    },
}

struct Node<S> {
    op: Op<S>,
    out: Tensor<S>,
}

/// Eager execution trace. Ops compute forward immediately and record enough
/// to replay the chain rule in reverse topological order (creation order is
/// topological by construction). Also counts multiply-accumulate operations
/// executed by matmul/conv primitives, which is the FLOPs measurement used
/// by the cost-model oracle.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    macs: u64,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    /// Multiply-accumulate count of all matmul/conv forwards so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].out
    }

    fn push(&mut self, op: Op<S>, out: Tensor<S>) -> Var {
        self.nodes.push(Node { op, out });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(Op::Constant, t)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(S::from_f64(v)))
    }

    /// Register a parameter leaf; the current value is snapshotted.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let t = store.value(id).clone();
        self.push(Op::Param(id), t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = matmul_nn(ta, tb);
        self.macs += (ta.rows() * ta.cols() * tb.cols()) as u64;
        Ok(self.push(Op::Matmul { a, b }, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(tb.data()) {
            *o += v;
        }
        Ok(self.push(Op::Add { a, b }, out))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = tx.clone();
        let n = tx.cols();
        for r in 0..tx.rows() {
            for c in 0..n {
                *out.at_mut(r, c) += tb.at(0, c);
            }
        }
        Ok(self.push(Op::AddBias { x, b }, out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(tb.data()) {
            *o = *o * v;
        }
        Ok(self.push(Op::Mul { a, b }, out))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cs = S::from_f64(c);
        let out = self.value(x).map(|v| v * cs);
        self.push(Op::Scale { x, c: cs }, out)
    }

    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if !ts.is_scalar() {
            return Err(Error::Shape {
                op: "mul_scalar_var",
                lhs: self.value(x).shape().to_vec(),
                rhs: ts.shape().to_vec(),
            });
        }
        let sv = ts.item();
        let out = self.value(x).map(|v| v * sv);
        Ok(self.push(Op::MulScalarVar { x, s }, out))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = Tensor::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                *out.at_mut(j, i) = tx.at(i, j);
            }
        }
        self.push(Op::Transpose { x }, out)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if start + len > tx.rows() {
            return Err(Error::Dimension {
                op: "slice_rows",
                msg: format!("rows {}..{} out of {}", start, start + len, tx.rows()),
            });
        }
        let c = tx.cols();
        let data = tx.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(len, c, data)?;
        Ok(self.push(Op::SliceRows { x, start }, out))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if start + len > tx.cols() {
            return Err(Error::Dimension {
                op: "slice_cols",
                msg: format!("cols {}..{} out of {}", start, start + len, tx.cols()),
            });
        }
        let mut out = Tensor::zeros(tx.rows(), len);
        for r in 0..tx.rows() {
            for j in 0..len {
                *out.at_mut(r, j) = tx.at(r, start + j);
            }
        }
        Ok(self.push(Op::SliceCols { x, start }, out))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Dimension {
                op: "concat_cols",
                msg: "empty input list".into(),
            });
        }
        let rows = self.value(xs[0]).rows();
        let mut widths = Vec::with_capacity(xs.len());
        let mut total = 0;
        for &v in xs {
            let t = self.value(v);
            if t.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![rows],
                    rhs: t.shape().to_vec(),
                });
            }
            widths.push(t.cols());
            total += t.cols();
        }
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            for r in 0..rows {
                for j in 0..w {
                    *out.at_mut(r, off + j) = self.value(v).at(r, j);
                }
            }
            off += w;
        }
        let pairs = xs.iter().copied().zip(widths).collect();
        Ok(self.push(Op::ConcatCols { xs: pairs }, out))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tx.rows()) {
            return Err(Error::Dimension {
                op: "gather_rows",
                msg: format!("row index {} out of {}", bad, tx.rows()),
            });
        }
        let c = tx.cols();
        let mut out = Tensor::zeros(idx.len(), c);
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..c {
                *out.at_mut(r, j) = tx.at(i, j);
            }
        }
        Ok(self.push(
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            out,
        ))
    }

    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tx.cols()) {
            return Err(Error::Dimension {
                op: "gather_cols",
                msg: format!("col index {} out of {}", bad, tx.cols()),
            });
        }
        let mut out = Tensor::zeros(tx.rows(), idx.len());
        for r in 0..tx.rows() {
            for (j, &i) in idx.iter().enumerate() {
                *out.at_mut(r, j) = tx.at(r, i);
            }
        }
        Ok(self.push(
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
            },
            out,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push(Op::Relu { x }, out)
    }

    pub fn swish(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(Op::Swish { x }, out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid { x }, out)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.sqrt());
        self.push(Op::Sqrt { x }, out)
    }

    pub fn clamp01(&mut self, x: Var) -> Var {
        let one = S::one();
        let out = self.value(x).map(|v| {
            if v < S::zero() {
                S::zero()
            } else if v > one {
                one
            } else {
                v
            }
        });
        self.push(Op::Clamp01 { x }, out)
    }

    /// Row-wise layer normalization with learnable gain/bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, n) = (tx.rows(), tx.cols());
        for (nm, v) in [("gamma", gamma), ("beta", beta)] {
            let t = self.value(v);
            if t.rows() != 1 || t.cols() != n {
                return Err(Error::Shape {
                    op: if nm == "gamma" { "layer_norm_gamma" } else { "layer_norm_beta" },
                    lhs: tx.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let eps = S::from_f64(LN_EPS);
        let nf = S::from_f64(n as f64);
        let mut mean = Vec::with_capacity(r);
        let mut inv = Vec::with_capacity(r);
        let mut out = Tensor::zeros(r, n);
        let tx = self.value(x);
        let tg = self.value(gamma).clone();
        let tb = self.value(beta).clone();
        for i in 0..r {
            let row = tx.row(i);
            let mut mu = S::zero();
            for &v in row {
                mu += v;
            }
            mu = mu / nf;
            let mut var = S::zero();
            for &v in row {
                let d = v - mu;
                var += d * d;
            }
            var = var / nf;
            let iv = S::one() / (var + eps).sqrt();
            for j in 0..n {
                *out.at_mut(i, j) = (tx.at(i, j) - mu) * iv * tg.at(0, j) + tb.at(0, j);
            }
            mean.push(mu);
            inv.push(iv);
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv,
            },
            out,
        ))
    }

    /// Inverted dropout with a mask drawn from the counter stream `key`.
    /// `rate == 0` is an exact no-op (returns `x` itself).
    pub fn dropout(&mut self, x: Var, rate: f64, key: u64) -> Result<Var> {
        if rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Domain {
                op: "dropout",
                msg: format!("rate {rate} outside [0,1)"),
            });
        }
        let mut rng = CounterRng::from_key(key);
        let keep = S::from_f64(1.0 / (1.0 - rate));
        let tx = self.value(x);
        let mask: Vec<S> = (0..tx.numel())
            .map(|_| if rng.uniform() < rate { S::zero() } else { keep })
            .collect();
        let mut out = tx.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o = *o * m;
        }
        Ok(self.push(Op::Dropout { x, mask }, out))
    }

    /// Row softmax of `x / temperature`, computed with max-subtraction.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 {
            return Err(Error::Domain {
                op: "softmax_rows",
                msg: format!("temperature {temperature} must be positive"),
            });
        }
        let inv_temp = S::from_f64(1.0 / temperature);
        let tx = self.value(x);
        let (r, n) = (tx.rows(), tx.cols());
        let mut out = Tensor::zeros(r, n);
        for i in 0..r {
            let row = tx.row(i);
            let mut m = S::neg_infinity();
            for &v in row {
                m = m.max(v);
            }
            let mut sum = S::zero();
            for j in 0..n {
                let e = ((row[j] - m) * inv_temp).exp();
                *out.at_mut(i, j) = e;
                sum += e;
            }
            for j in 0..n {
                *out.at_mut(i, j) = out.at(i, j) / sum;
            }
        }
        Ok(self.push(Op::SoftmaxRows { x, inv_temp }, out))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (r, n) = (tx.rows(), tx.cols());
        let mut out = Tensor::zeros(r, n);
        for i in 0..r {
            let row = tx.row(i);
            let mut m = S::neg_infinity();
            for &v in row {
                m = m.max(v);
            }
            let mut sum = S::zero();
            for &v in row {
                sum += (v - m).exp();
            }
            let lse = m + sum.ln();
            for j in 0..n {
                *out.at_mut(i, j) = row[j] - lse;
            }
        }
        self.push(Op::LogSoftmaxRows { x }, out)
    }

    /// log Σ exp along `axis` (0 = down columns, 1 = along rows), with
    /// max-subtraction. An all `-inf` slice yields `-inf`.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, n) = (tx.rows(), tx.cols());
        let reduced = if axis == 1 { n } else { r };
        if axis > 1 {
            return Err(Error::Dimension {
                op: "logsumexp",
                msg: format!("axis {axis} out of range for 2-D tensor"),
            });
        }
        if reduced == 0 {
            return Err(Error::Dimension {
                op: "logsumexp",
                msg: "reduction over an empty axis".into(),
            });
        }
        let out = if axis == 1 {
            let mut o = Tensor::zeros(r, 1);
            for i in 0..r {
                *o.at_mut(i, 0) = lse_slice(tx.row(i));
            }
            o
        } else {
            let mut o = Tensor::zeros(1, n);
            for j in 0..n {
                let col: Vec<S> = (0..r).map(|i| tx.at(i, j)).collect();
                *o.at_mut(0, j) = lse_slice(&col);
            }
            o
        };
        Ok(self.push(Op::LogSumExp { x, axis }, out))
    }

    /// Elementwise log(exp(a) + exp(b)); `-inf` is the absorbing identity.
    pub fn logaddexp(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "logaddexp",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(tb.data()) {
            *o = lae(*o, bv);
        }
        Ok(self.push(Op::LogAddExp { a, b }, out))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = S::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        self.push(Op::SumAll { x }, Tensor::scalar(acc))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let nf = S::from_f64(tx.numel() as f64);
        let mut acc = S::zero();
        for &v in tx.data() {
            acc += v;
        }
        self.push(Op::MeanAll { x }, Tensor::scalar(acc / nf))
    }

    /// 1-D convolution over time. `x: T×Cin`, `w: (kernel·Cin)×Cout` with
    /// tap-major weight rows; the input is zero-padded by `pad` frames on
    /// each side, so every tap executes a MAC.
    pub fn conv1d(&mut self, x: Var, w: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (t_in, cin) = (tx.rows(), tx.cols());
        if tw.rows() != kernel * cin {
            return Err(Error::Shape {
                op: "conv1d",
                lhs: vec![kernel * cin, tw.cols()],
                rhs: tw.shape().to_vec(),
            });
        }
        let cout = tw.cols();
        let padded = t_in + 2 * pad;
        if padded < kernel || stride == 0 {
            return Err(Error::Dimension {
                op: "conv1d",
                msg: format!("{t_in} frames too short for kernel {kernel} (pad {pad})"),
            });
        }
        let t_out = (padded - kernel) / stride + 1;
        let mut xpad = Tensor::zeros(padded, cin);
        for t in 0..t_in {
            for c in 0..cin {
                *xpad.at_mut(t + pad, c) = tx.at(t, c);
            }
        }
        let mut out = Tensor::zeros(t_out, cout);
        for t in 0..t_out {
            for dt in 0..kernel {
                for ci in 0..cin {
                    let xv = xpad.at(t * stride + dt, ci);
                    let wrow = tw.row(dt * cin + ci);
                    let orow = &mut out.data_mut()[t * cout..(t + 1) * cout];
                    for co in 0..cout {
                        orow[co] += xv * wrow[co];
                    }
                }
            }
        }
        self.macs += (t_out * kernel * cin * cout) as u64;
        Ok(self.push(
            Op::Conv1d {
                x,
                w,
                kernel,
                stride,
                pad,
            },
            out,
        ))
    }

    /// Per-channel 1-D convolution, stride 1. `x: T×C`, `w: kernel×C`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (t_in, ch) = (tx.rows(), tx.cols());
        let kernel = tw.rows();
        if tw.cols() != ch {
            return Err(Error::Shape {
                op: "depthwise_conv1d",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let padded = t_in + 2 * pad;
        if padded < kernel {
            return Err(Error::Dimension {
                op: "depthwise_conv1d",
                msg: format!("{t_in} frames too short for kernel {kernel} (pad {pad})"),
            });
        }
        let t_out = padded - kernel + 1;
        let mut xpad = Tensor::zeros(padded, ch);
        for t in 0..t_in {
            for c in 0..ch {
                *xpad.at_mut(t + pad, c) = tx.at(t, c);
            }
        }
        let mut out = Tensor::zeros(t_out, ch);
        for t in 0..t_out {
            for dt in 0..kernel {
                for c in 0..ch {
                    *out.at_mut(t, c) += xpad.at(t + dt, c) * tw.at(dt, c);
                }
            }
        }
        self.macs += (t_out * kernel * ch) as u64;
        Ok(self.push(Op::DepthwiseConv1d { x, w, pad }, out))
    }

    /// Emit `values` in the forward pass while routing gradients straight
    /// through to `x`.
    pub fn straight_through(&mut self, x: Var, values: Tensor<S>) -> Result<Var> {
        if self.value(x).shape() != values.shape() {
            return Err(Error::Shape {
                op: "straight_through",
                lhs: self.value(x).shape().to_vec(),
                rhs: values.shape().to_vec(),
            });
        }
        Ok(self.push(Op::StraightThrough { x }, values))
    }

    /// Reverse pass from a scalar loss; accumulates dLoss/dθ into the
    /// gradients of every parameter leaf. Calling twice on the same tape
    /// accumulates twice.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<S>) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Param(id) => {
                    let dst = store.grad_mut(*id);
                    for (d, &s) in dst.data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
                Op::Matmul { a, b } => {
                    let da = matmul_nt(&g, &self.nodes[b.0].out);
                    let db = matmul_tn(&self.nodes[a.0].out, &g);
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::Add { a, b } => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g);
                }
                Op::AddBias { x, b } => {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            *db.at_mut(0, c) += g.at(r, c);
                        }
                    }
                    accum(&mut grads, *x, g);
                    accum(&mut grads, *b, db);
                }
                Op::Mul { a, b } => {
                    let ta = self.nodes[a.0].out.clone();
                    let tb = self.nodes[b.0].out.clone();
                    let mut da = g.clone();
                    for (d, &v) in da.data_mut().iter_mut().zip(tb.data()) {
                        *d = *d * v;
                    }
                    let mut db = g;
                    for (d, &v) in db.data_mut().iter_mut().zip(ta.data()) {
                        *d = *d * v;
                    }
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    accum(&mut grads, *x, g.map(|v| v * c));
                }
                Op::MulScalarVar { x, s } => {
                    let sv = self.nodes[s.0].out.item();
                    let tx = &self.nodes[x.0].out;
                    let mut ds = S::zero();
                    for (&gv, &xv) in g.data().iter().zip(tx.data()) {
                        ds += gv * xv;
                    }
                    accum(&mut grads, *x, g.map(|v| v * sv));
                    accum(&mut grads, *s, Tensor::scalar(ds));
                }
                Op::Transpose { x } => {
                    let mut dx = Tensor::zeros(g.cols(), g.rows());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            *dx.at_mut(c, r) = g.at(r, c);
                        }
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::SliceRows { x, start } => {
                    let tx = &self.nodes[x.0].out;
                    let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            *dx.at_mut(start + r, c) = g.at(r, c);
                        }
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let tx = &self.nodes[x.0].out;
                    let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            *dx.at_mut(r, start + c) = g.at(r, c);
                        }
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::ConcatCols { xs } => {
                    let parts: Vec<(Var, usize)> = xs.clone();
                    let mut off = 0;
                    for (v, w) in parts {
                        let mut dv = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            for c in 0..w {
                                *dv.at_mut(r, c) = g.at(r, off + c);
                            }
                        }
                        accum(&mut grads, v, dv);
                        off += w;
                    }
                }
                Op::GatherRows { x, idx } => {
                    let idx = idx.clone();
                    let tx = &self.nodes[x.0].out;
                    let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..g.cols() {
                            *dx.at_mut(i, c) += g.at(r, c);
                        }
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::GatherCols { x, idx } => {
                    let idx = idx.clone();
                    let tx = &self.nodes[x.0].out;
                    let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                    for r in 0..g.rows() {
                        for (j, &i) in idx.iter().enumerate() {
                            *dx.at_mut(r, i) += g.at(r, j);
                        }
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::Relu { x } => {
                    let tx = &self.nodes[x.0].out;
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(tx.data()) {
                        if v <= S::zero() {
                            *d = S::zero();
                        }
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::Swish { x } => {
                    let tx = &self.nodes[x.0].out;
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(tx.data()) {
                        let s = sigmoid(v);
                        *d = *d * (s + v * s * (S::one() - s));
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let ty = &self.nodes[i].out;
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(ty.data()) {
                        *d = *d * y * (S::one() - y);
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::Sqrt { x } => {
                    let ty = &self.nodes[i].out;
                    let half = S::from_f64(0.5);
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(ty.data()) {
                        // subgradient 0 at the origin keeps converged
                        // orthogonality losses NaN-free
                        *d = if y > S::zero() { *d * half / y } else { S::zero() };
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::Clamp01 { x } => {
                    let tx = &self.nodes[x.0].out;
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(tx.data()) {
                        if v <= S::zero() || v >= S::one() {
                            *d = S::zero();
                        }
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (mean, inv) = (mean.clone(), inv.clone());
                    let tx = self.nodes[x.0].out.clone();
                    let tg = self.nodes[gamma.0].out.clone();
                    let (r, n) = (tx.rows(), tx.cols());
                    let nf = S::from_f64(n as f64);
                    let mut dx = Tensor::zeros(r, n);
                    let mut dgamma = Tensor::zeros(1, n);
                    let mut dbeta = Tensor::zeros(1, n);
                    for ri in 0..r {
                        let (mu, iv) = (mean[ri], inv[ri]);
                        let mut sum_gy = S::zero();
                        let mut sum_gy_xhat = S::zero();
                        let mut xhat = vec![S::zero(); n];
                        let mut gy = vec![S::zero(); n];
                        for j in 0..n {
                            xhat[j] = (tx.at(ri, j) - mu) * iv;
                            gy[j] = g.at(ri, j) * tg.at(0, j);
                            sum_gy += gy[j];
                            sum_gy_xhat += gy[j] * xhat[j];
                            *dgamma.at_mut(0, j) += g.at(ri, j) * xhat[j];
                            *dbeta.at_mut(0, j) += g.at(ri, j);
                        }
                        let a = sum_gy / nf;
                        let b = sum_gy_xhat / nf;
                        for j in 0..n {
                            *dx.at_mut(ri, j) = iv * (gy[j] - a - xhat[j] * b);
                        }
                    }
                    accum(&mut grads, x, dx);
                    accum(&mut grads, gamma, dgamma);
                    accum(&mut grads, beta, dbeta);
                }
                Op::Dropout { x, mask } => {
                    let mask = mask.clone();
                    let mut dx = g;
                    for (d, &m) in dx.data_mut().iter_mut().zip(&mask) {
                        *d = *d * m;
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::SoftmaxRows { x, inv_temp } => {
                    let it = *inv_temp;
                    let ty = self.nodes[i].out.clone();
                    let (r, n) = (ty.rows(), ty.cols());
                    let mut dx = Tensor::zeros(r, n);
                    for ri in 0..r {
                        let mut dot = S::zero();
                        for j in 0..n {
                            dot += g.at(ri, j) * ty.at(ri, j);
                        }
                        for j in 0..n {
                            *dx.at_mut(ri, j) = ty.at(ri, j) * (g.at(ri, j) - dot) * it;
                        }
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::LogSoftmaxRows { x } => {
                    let ty = self.nodes[i].out.clone();
                    let (r, n) = (ty.rows(), ty.cols());
                    let mut dx = Tensor::zeros(r, n);
                    for ri in 0..r {
                        let mut gsum = S::zero();
                        for j in 0..n {
                            gsum += g.at(ri, j);
                        }
                        for j in 0..n {
                            *dx.at_mut(ri, j) = g.at(ri, j) - ty.at(ri, j).exp() * gsum;
                        }
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::LogSumExp { x, axis } => {
                    let axis = *axis;
                    let tx = self.nodes[x.0].out.clone();
                    let ty = self.nodes[i].out.clone();
                    let (r, n) = (tx.rows(), tx.cols());
                    let mut dx = Tensor::zeros(r, n);
                    for ri in 0..r {
                        for j in 0..n {
                            let (o, gg) = if axis == 1 {
                                (ty.at(ri, 0), g.at(ri, 0))
                            } else {
                                (ty.at(0, j), g.at(0, j))
                            };
                            if o > S::neg_infinity() {
                                let w = (tx.at(ri, j) - o).exp();
                                if w > S::zero() {
                                    *dx.at_mut(ri, j) = gg * w;
                                }
                            }
                        }
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::LogAddExp { a, b } => {
                    let ta = self.nodes[a.0].out.clone();
                    let tb = self.nodes[b.0].out.clone();
                    let ty = self.nodes[i].out.clone();
                    let mut da = Tensor::zeros(ta.rows(), ta.cols());
                    let mut db = Tensor::zeros(tb.rows(), tb.cols());
                    for idx2 in 0..ty.numel() {
                        let o = ty.data()[idx2];
                        if o == S::neg_infinity() {
                            continue;
                        }
                        let gv = g.data()[idx2];
                        let wa = (ta.data()[idx2] - o).exp();
                        let wb = (tb.data()[idx2] - o).exp();
                        da.data_mut()[idx2] = gv * wa;
                        db.data_mut()[idx2] = gv * wb;
                    }
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::SumAll { x } => {
                    let tx = &self.nodes[x.0].out;
                    let gv = g.item();
                    accum(&mut grads, *x, Tensor::full(tx.rows(), tx.cols(), gv));
                }
                Op::MeanAll { x } => {
                    let tx = &self.nodes[x.0].out;
                    let gv = g.item() / S::from_f64(tx.numel() as f64);
                    accum(&mut grads, *x, Tensor::full(tx.rows(), tx.cols(), gv));
                }
                Op::Conv1d {
                    x,
                    w,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (x, w) = (*x, *w);
                    let (kernel, stride, pad) = (*kernel, *stride, *pad);
                    let tx = self.nodes[x.0].out.clone();
                    let tw = self.nodes[w.0].out.clone();
                    let (t_in, cin) = (tx.rows(), tx.cols());
                    let cout = tw.cols();
                    let padded = t_in + 2 * pad;
                    let t_out = g.rows();
                    let mut xpad = Tensor::zeros(padded, cin);
                    for t in 0..t_in {
                        for c in 0..cin {
                            *xpad.at_mut(t + pad, c) = tx.at(t, c);
                        }
                    }
                    let mut dxpad = Tensor::zeros(padded, cin);
                    let mut dw = Tensor::zeros(kernel * cin, cout);
                    for t in 0..t_out {
                        for dt in 0..kernel {
                            for ci in 0..cin {
                                let xi = t * stride + dt;
                                let xv = xpad.at(xi, ci);
                                let mut acc = S::zero();
                                for co in 0..cout {
                                    let gv = g.at(t, co);
                                    acc += gv * tw.at(dt * cin + ci, co);
                                    *dw.at_mut(dt * cin + ci, co) += xv * gv;
                                }
                                *dxpad.at_mut(xi, ci) += acc;
                            }
                        }
                    }
                    let mut dx = Tensor::zeros(t_in, cin);
                    for t in 0..t_in {
                        for c in 0..cin {
                            *dx.at_mut(t, c) = dxpad.at(t + pad, c);
                        }
                    }
                    accum(&mut grads, x, dx);
                    accum(&mut grads, w, dw);
                }
                Op::DepthwiseConv1d { x, w, pad } => {
                    let (x, w, pad) = (*x, *w, *pad);
                    let tx = self.nodes[x.0].out.clone();
                    let tw = self.nodes[w.0].out.clone();
                    let (t_in, ch) = (tx.rows(), tx.cols());
                    let kernel = tw.rows();
                    let padded = t_in + 2 * pad;
                    let t_out = g.rows();
                    let mut xpad = Tensor::zeros(padded, ch);
                    for t in 0..t_in {
                        for c in 0..ch {
                            *xpad.at_mut(t + pad, c) = tx.at(t, c);
                        }
                    }
                    let mut dxpad = Tensor::zeros(padded, ch);
                    let mut dw = Tensor::zeros(kernel, ch);
                    for t in 0..t_out {
                        for dt in 0..kernel {
                            for c in 0..ch {
                                let gv = g.at(t, c);
                                *dxpad.at_mut(t + dt, c) += gv * tw.at(dt, c);
                                *dw.at_mut(dt, c) += gv * xpad.at(t + dt, c);
                            }
                        }
                    }
                    let mut dx = Tensor::zeros(t_in, ch);
                    for t in 0..t_in {
                        for c in 0..ch {
                            *dx.at_mut(t, c) = dxpad.at(t + pad, c);
                        }
                    }
                    accum(&mut grads, x, dx);
                    accum(&mut grads, w, dw);
                }
                Op::StraightThrough { x } => {
                    accum(&mut grads, *x, g);
                }
            }
        }
        Ok(())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

fn lse_slice<S: Scalar>(xs: &[S]) -> S {
    let mut m = S::neg_infinity();
    for &v in xs {
        m = m.max(v);
    }
    if m == S::neg_infinity() {
        return m;
    }
    let mut sum = S::zero();
    for &v in xs {
        sum += (v - m).exp();
    }
    m + sum.ln()
}

#[inline]
fn lae<S: Scalar>(a: S, b: S) -> S {
    let m = a.max(b);
    if m == S::neg_infinity() {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn accum<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(acc) => {
            debug_assert_eq!(acc.shape(), g.shape());
            for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += x;
            }
        }
        slot @ None => {
            *slot = Some(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with<S: Scalar>(name: &str, t: Tensor<S>) -> (ParamStore<S>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register(name, t).unwrap();
        (s, id)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let (mut store, id) = store_with("w", Tensor::<f64>::from_f64_slice(2, 3, &[1.0; 6]).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let l = tape.sum_all(w);
        tape.backward(l, &mut store).unwrap();
        assert!(store.grad(id).data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn zero_scaled_loss_has_zero_gradient() {
        let (mut store, id) = store_with("w", Tensor::<f64>::from_f64_slice(1, 4, &[2.0; 4]).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let s = tape.swish(w);
        let l0 = tape.sum_all(s);
        let l = tape.scale(l0, 0.0);
        tape.backward(l, &mut store).unwrap();
        assert!(store.grad(id).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let (mut store, id) = store_with("w", Tensor::<f64>::from_f64_slice(1, 3, &[1.0, 2.0, 3.0]).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let sq = tape.mul(w, w).unwrap();
        let l = tape.sum_all(sq);
        tape.backward(l, &mut store).unwrap();
        let once: Vec<f64> = store.grad(id).data().to_vec();
        tape.backward(l, &mut store).unwrap();
        let twice: Vec<f64> = store.grad(id).data().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (mut store, id) = store_with("w", Tensor::<f64>::zeros(2, 2));
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        assert!(matches!(tape.backward(w, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_rows_hand_cases() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::from_f64_slice(2, 2, &[2f64.ln(), 0.0, 0.0, 0.0]).unwrap());
        let y1 = tape.softmax_rows(x, 1.0).unwrap();
        assert!((tape.value(y1).at(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((tape.value(y1).at(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((tape.value(y1).at(1, 0) - 0.5).abs() < 1e-15);
        let y2 = tape.softmax_rows(x, 0.5).unwrap();
        assert!((tape.value(y2).at(0, 0) - 0.8).abs() < 1e-12);
        assert!((tape.value(y2).at(0, 1) - 0.2).abs() < 1e-12);
        assert!(tape.softmax_rows(x, 0.0).is_err());
        assert!(tape.softmax_rows(x, -1.0).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = CounterRng::new(11, &[0]);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::rand_uniform(8, 16, 1e4, &mut rng));
        let y = tape.softmax_rows(x, 0.37).unwrap();
        for r in 0..8 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
        }
    }

    #[test]
    fn logsumexp_hand_cases() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::from_f64_slice(1, 2, &[0.0, 0.0]).unwrap());
        let l = tape.logsumexp(a, 1).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);

        let b = tape.constant(Tensor::from_f64_slice(1, 2, &[f64::NEG_INFINITY, 3.0]).unwrap());
        let l = tape.logsumexp(b, 1).unwrap();
        assert_eq!(tape.value(l).item(), 3.0);

        let c = tape.constant(Tensor::from_f64_slice(1, 2, &[1000.0, 1000.0]).unwrap());
        let l = tape.logsumexp(c, 1).unwrap();
        assert!((tape.value(l).item() - (1000.0 + 2f64.ln())).abs() < 1e-12);

        let empty = tape.constant(Tensor::zeros(1, 0));
        assert!(tape.logsumexp(empty, 1).is_err());
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn mac_counter_tracks_matmul_and_conv() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::zeros(3, 4));
        let b = tape.constant(Tensor::zeros(4, 2));
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.macs(), 24);
        let x = tape.constant(Tensor::zeros(10, 2));
        let w = tape.constant(Tensor::zeros(3 * 2, 5));
        tape.conv1d(x, w, 3, 2, 1).unwrap();
        // ceil(10/2) = 5 output frames
        assert_eq!(tape.macs(), 24 + 5 * 3 * 2 * 5);
    }

    #[test]
    fn dropout_zero_rate_is_identity_node() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 2));
        let y = tape.dropout(x, 0.0, 123).unwrap();
        assert_eq!(x, y);
    }
}
