use std::fmt;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Smallest denominator magnitude [`Tape::div`] accepts by default.
pub const DEFAULT_DIV_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward = Box<dyn Fn(&Tensor, &Tensor, &[f64]) -> Vec<f64>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    ScaleBy(Var, Var),
    Pow(Var, f64),
    SignedPow(Var, f64),
    Relu(Var),
    Sqrt(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    Sign(Var),
    Sum(Var),
    Mean(Var),
    BatchMean(Var),
    SumLast(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    SpatialMean(Var),
    SpatialVar(Var),
    SpatialCov(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    NormalizeRows(Var, f64),
    ProxyAggregate {
        x: Var,
        k: usize,
    },
    Custom {
        x: Var,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one [`Tape::backward`] pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require a gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but takes ownership of the buffer.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Linear record of operations for reverse-mode differentiation.
///
/// An operation is recorded with its backward rule only when at least one
/// input requires a gradient; otherwise its output is stored as a constant.
/// A tape supports exactly one [`Tape::backward`] call; [`Tape::clear`]
/// resets it for the next step.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    div_eps: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("consumed", &self.consumed)
            .finish()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Split a shape into (leading dims, spatial size) treating the last two
/// axes as the spatial plane.
fn spatial_split(op: &'static str, shape: &[usize]) -> Result<(Vec<usize>, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(op, format!("need at least 2 axes, got {shape:?}")));
    }
    let lead = &shape[..shape.len() - 2];
    let n = shape[shape.len() - 2] * shape[shape.len() - 1];
    let out = if lead.is_empty() { vec![1] } else { lead.to_vec() };
    Ok((out, n))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            div_eps: DEFAULT_DIV_EPS,
        }
    }

    pub fn with_div_eps(mut self, eps: f64) -> Self {
        self.div_eps = eps;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded value so the tape can serve the next step.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    fn push(&mut self, name: &'static str, value: Tensor, parents: &[Var], op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::guard(name, "operation produced a non-finite value"));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        Ok(Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("add", a, b, |x, y| x + y)?;
        self.push("add", v, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, &[a, b], Op::Mul(a, b))
    }

    /// Elementwise quotient. Fails with a numeric-guard error when any
    /// denominator is smaller in magnitude than the tape's epsilon; callers
    /// that divide by possibly-small values must add a stabilizer first.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let eps = self.div_eps;
        if let Some(d) = self.value(b).data().iter().find(|d| d.abs() < eps) {
            return Err(Error::guard(
                "div",
                format!("denominator {d:e} below epsilon {eps:e}"),
            ));
        }
        let v = self.zip("div", a, b, |x, y| x / y)?;
        self.push("div", v, &[a, b], Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.map(x, |a| a + c);
        self.push("add_scalar", v, &[x], Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.map(x, |a| a * c);
        self.push("mul_scalar", v, &[x], Op::MulScalar(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.mul_scalar(x, -1.0)
    }

    /// Multiply every element of `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self
            .value(s)
            .item()
            .map_err(|_| Error::dim("scale_by", "scale operand must hold one value"))?;
        let v = self.map(x, |a| a * sv);
        self.push("scale_by", v, &[x, s], Op::ScaleBy(x, s))
    }

    /// `x^e` for a real exponent. A negative base with a non-integer
    /// exponent is rejected; use [`Tape::signed_pow`] for that case.
    pub fn pow(&mut self, x: Var, e: f64) -> Result<Var> {
        if e.fract() != 0.0 {
            if let Some(b) = self.value(x).data().iter().find(|&&b| b < 0.0) {
                return Err(Error::guard(
                    "pow",
                    format!("negative base {b} with non-integer exponent {e}"),
                ));
            }
        }
        let v = self.map(x, |a| a.powf(e));
        self.push("pow", v, &[x], Op::Pow(x, e))
    }

    /// Sign-preserving power `sign(x)·|x|^e`.
    pub fn signed_pow(&mut self, x: Var, e: f64) -> Result<Var> {
        let v = self.map(x, |a| if a == 0.0 { 0.0 } else { a.signum() * a.abs().powf(e) });
        self.push("signed_pow", v, &[x], Op::SignedPow(x, e))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, |a| a.max(0.0));
        self.push("relu", v, &[x], Op::Relu(x))
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(b) = self.value(x).data().iter().find(|&&b| b < 0.0) {
            return Err(Error::guard("sqrt", format!("negative input {b}")));
        }
        let v = self.map(x, f64::sqrt);
        self.push("sqrt", v, &[x], Op::Sqrt(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(b) = self.value(x).data().iter().find(|&&b| b <= 0.0) {
            return Err(Error::guard("log", format!("non-positive input {b}")));
        }
        let v = self.map(x, f64::ln);
        self.push("log", v, &[x], Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, f64::exp);
        self.push("exp", v, &[x], Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, f64::abs);
        self.push("abs", v, &[x], Op::Abs(x))
    }

    /// Sign with `sign(0) = 0`; its gradient is zero everywhere.
    pub fn sign(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, |a| if a == 0.0 { 0.0 } else { a.signum() });
        self.push("sign", v, &[x], Op::Sign(x))
    }

    /// Elementwise map with a caller-supplied backward rule
    /// `(input, output, upstream) -> input gradient`.
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: impl Fn(f64) -> f64,
        backward: impl Fn(&Tensor, &Tensor, &[f64]) -> Vec<f64> + 'static,
    ) -> Result<Var> {
        let v = self.map(x, forward);
        self.push(
            "custom",
            v,
            &[x],
            Op::Custom {
                x,
                backward: Box::new(backward),
            },
        )
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), &[x], Op::Mean(x))
    }

    /// Mean over the leading (batch) axis.
    pub fn batch_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let b = t.shape()[0];
        let inner = t.len() / b;
        let mut out = vec![0.0; inner];
        for row in t.data().chunks(inner) {
            add_into(&mut out, row);
        }
        out.iter_mut().for_each(|v| *v /= b as f64);
        let shape = if t.shape().len() == 1 { vec![1] } else { t.shape()[1..].to_vec() };
        self.push("batch_mean", Tensor::new(shape, out)?, &[x], Op::BatchMean(x))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().expect("tensor has at least one axis");
        let out: Vec<f64> = t.data().chunks(n).map(|c| c.iter().sum()).collect();
        let shape = if t.shape().len() == 1 {
            vec![1]
        } else {
            t.shape()[..t.shape().len() - 1].to_vec()
        };
        self.push("sum_last", Tensor::new(shape, out)?, &[x], Op::SumLast(x))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {:?} by {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        self.push("matmul", Tensor::new(vec![m, n], out)?, &[a, b], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::dim("transpose", format!("need 2 axes, got {:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        self.push("transpose", Tensor::new(vec![c, r], out)?, &[x], Op::Transpose(x))
    }

    // ---- convolutional -----------------------------------------------

    /// 2-D convolution of `x: [B, Cin, H, W]` with `w: [Cout, Cin, k, k]`
    /// and bias `b: [Cout]`, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::dim(
                "conv2d",
                format!("input {xs:?} / kernel {ws:?} must be 4-D with square kernel"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::dim(
                "conv2d",
                format!("input has {} channels, kernel expects {}", xs[1], ws[1]),
            ));
        }
        if tb.len() != ws[0] {
            return Err(Error::dim("conv2d", format!("bias length {} != {}", tb.len(), ws[0])));
        }
        if stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[2] {
            return Err(Error::dim("conv2d", "kernel larger than padded input or zero stride"));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            height: xs[2],
            width: xs[3],
            out_ch: ws[0],
            kernel: ws[2],
            stride,
            pad,
        };
        let (out, cols) = kernels::conv2d_forward(&geom, tx.data(), tw.data(), tb.data());
        let shape = vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        let keep = [x, w, b].iter().any(|v| self.requires_grad(*v));
        let op = Op::Conv2d {
            x,
            w,
            b,
            geom,
            cols: if keep { cols } else { Vec::new() },
        };
        self.push("conv2d", Tensor::new(shape, out)?, &[x, w, b], op)
    }

    /// Non-overlapping `size × size` max pooling over the last two axes.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() < 2 || size == 0 || s[s.len() - 2] < size || s[s.len() - 1] < size {
            return Err(Error::dim("max_pool2d", format!("cannot pool {s:?} by {size}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = t.len() / (h * w);
        let (out, arg) = kernels::maxpool_forward(t.data(), planes, h, w, size);
        let mut shape = s.to_vec();
        let n = shape.len();
        shape[n - 2] = h / size;
        shape[n - 1] = w / size;
        self.push("max_pool2d", Tensor::new(shape, out)?, &[x], Op::MaxPool { x, arg })
    }

    // ---- spatial statistics ------------------------------------------

    /// Mean over the last two axes: `[.., H, W] -> [..]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (shape, n) = spatial_split("spatial_mean", t.shape())?;
        let out = t.data().chunks(n).map(|c| c.iter().sum::<f64>() / n as f64).collect();
        self.push("spatial_mean", Tensor::new(shape, out)?, &[x], Op::SpatialMean(x))
    }

    /// Global average pooling; identical to [`Tape::spatial_mean`].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.spatial_mean(x)
    }

    /// Population variance over the last two axes.
    pub fn spatial_var(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (shape, n) = spatial_split("spatial_var", t.shape())?;
        let out = t
            .data()
            .chunks(n)
            .map(|c| {
                let mu = c.iter().sum::<f64>() / n as f64;
                c.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64
            })
            .collect();
        self.push("spatial_var", Tensor::new(shape, out)?, &[x], Op::SpatialVar(x))
    }

    /// Population covariance of two equally shaped maps over the last two axes.
    pub fn spatial_cov(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("spatial_cov", ta, tb)?;
        let (shape, n) = spatial_split("spatial_cov", ta.shape())?;
        let out = ta
            .data()
            .chunks(n)
            .zip(tb.data().chunks(n))
            .map(|(ca, cb)| {
                let ma = ca.iter().sum::<f64>() / n as f64;
                let mb = cb.iter().sum::<f64>() / n as f64;
                ca.iter().zip(cb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n as f64
            })
            .collect();
        self.push("spatial_cov", Tensor::new(shape, out)?, &[a, b], Op::SpatialCov(a, b))
    }

    // ---- normalisation & selection -----------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().expect("non-empty shape");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let shape = t.shape().to_vec();
        self.push("softmax", Tensor::new(shape, out)?, &[x], Op::Softmax(x))
    }

    /// Numerically stable `log(softmax(x))` over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().expect("non-empty shape");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let (arg, m) = row
                .iter()
                .cloned()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
            // log(1 + rest) keeps tiny non-max contributions instead of rounding them away.
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != arg)
                .map(|(_, v)| (v - m).exp())
                .sum();
            let log_z = rest.ln_1p();
            row.iter_mut().for_each(|v| *v = (*v - m) - log_z);
        }
        let shape = t.shape().to_vec();
        self.push("log_softmax", Tensor::new(shape, out)?, &[x], Op::LogSoftmax(x))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", format!("{s:?} incompatible with {base:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        self.push("concat", Tensor::new(shape, out)?, inputs, op)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push("reshape", v, &[x], Op::Reshape(x))
    }

    /// Select `x[b, idx[b]]` from a `[B, N]` tensor.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || t.shape()[0] != idx.len() {
            return Err(Error::dim(
                "pick",
                format!("{} indices for shape {:?}", idx.len(), t.shape()),
            ));
        }
        let n = t.shape()[1];
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::dim("pick", format!("index {bad} out of {n} columns")));
        }
        let out = idx.iter().enumerate().map(|(b, &i)| t.data()[b * n + i]).collect();
        let op = Op::Pick {
            x,
            idx: idx.to_vec(),
        };
        self.push("pick", Tensor::new(vec![idx.len()], out)?, &[x], op)
    }

    /// Scale each row of a `[R, D]` tensor by `1 / sqrt(|row|² + eps)`.
    ///
    /// With `eps = 0` a row whose norm falls below the tape's division
    /// epsilon is a numeric-guard error.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::dim("normalize_rows", format!("need 2 axes, got {:?}", t.shape())));
        }
        let d = t.shape()[1];
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let sq = row.iter().map(|v| v * v).sum::<f64>();
            let norm = (sq + eps).sqrt();
            if norm < self.div_eps {
                return Err(Error::guard("normalize_rows", format!("row norm {norm:e} too small")));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let shape = t.shape().to_vec();
        self.push("normalize_rows", Tensor::new(shape, out)?, &[x], Op::NormalizeRows(x, eps))
    }

    /// Collapse groups of `k` adjacent columns of a `[B, C·k]` similarity
    /// matrix into `[B, C]`, each group reduced to its softmax-weighted mean.
    pub fn proxy_aggregate(&mut self, x: Var, k: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || k == 0 || !t.shape()[1].is_multiple_of(k) {
            return Err(Error::dim(
                "proxy_aggregate",
                format!("{:?} not divisible into groups of {k}", t.shape()),
            ));
        }
        let (b, c) = (t.shape()[0], t.shape()[1] / k);
        let out = t
            .data()
            .chunks(k)
            .map(|g| {
                let m = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let (mut num, mut den) = (0.0, 0.0);
                for &s in g {
                    let w = (s - m).exp();
                    num += w * s;
                    den += w;
                }
                num / den
            })
            .collect();
        self.push(
            "proxy_aggregate",
            Tensor::new(vec![b, c], out)?,
            &[x],
            Op::ProxyAggregate { x, k },
        )
    }

    // ---- reverse pass ------------------------------------------------

    /// Replay the tape in reverse from the scalar `loss`.
    ///
    /// Every node that requires a gradient receives one; leaves the loss
    /// does not depend on receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("backward already ran on this tape; clear it first".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("loss is not recorded on this tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                if !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(data) => Tensor { shape, data },
                    None => Tensor::zeros(&shape),
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => add_into(existing, &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce() -> Vec<f64>) {
        if self.nodes[v.0].requires_grad {
            self.accumulate(grads, v, f());
        }
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let elementwise = |x: &[f64], f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<f64> {
            g.iter().zip(x).zip(y).map(|((&g, &x), &y)| f(g, x, y)).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_with(grads, *a, || g.to_vec());
                self.accumulate_with(grads, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate_with(grads, *a, || g.to_vec());
                self.accumulate_with(grads, *b, || g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                self.accumulate_with(grads, *a, || g.iter().zip(val(*b)).map(|(g, b)| g * b).collect());
                self.accumulate_with(grads, *b, || g.iter().zip(val(*a)).map(|(g, a)| g * a).collect());
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                self.accumulate_with(grads, *a, || g.iter().zip(vb).map(|(g, b)| g / b).collect());
                self.accumulate_with(grads, *b, || {
                    g.iter().zip(y).zip(vb).map(|((g, y), b)| -g * y / b).collect()
                });
            }
            Op::AddScalar(x) => self.accumulate_with(grads, *x, || g.to_vec()),
            Op::MulScalar(x, c) => self.accumulate_with(grads, *x, || g.iter().map(|v| v * c).collect()),
            Op::ScaleBy(x, s) => {
                let sv = val(*s)[0];
                self.accumulate_with(grads, *x, || g.iter().map(|v| v * sv).collect());
                self.accumulate_with(grads, *s, || {
                    vec![g.iter().zip(val(*x)).map(|(g, x)| g * x).sum()]
                });
            }
            Op::Pow(x, e) => {
                let e = *e;
                self.accumulate_with(grads, *x, || {
                    elementwise(val(*x), &|g, x, _| {
                        if x == 0.0 && e < 1.0 {
                            0.0
                        } else {
                            g * e * x.powf(e - 1.0)
                        }
                    })
                });
            }
            Op::SignedPow(x, e) => {
                let e = *e;
                self.accumulate_with(grads, *x, || {
                    elementwise(val(*x), &|g, x, _| {
                        if x == 0.0 && e < 1.0 {
                            0.0
                        } else {
                            g * e * x.abs().powf(e - 1.0)
                        }
                    })
                });
            }
            Op::Relu(x) => self.accumulate_with(grads, *x, || {
                elementwise(val(*x), &|g, x, _| if x > 0.0 { g } else { 0.0 })
            }),
            Op::Sqrt(x) => self.accumulate_with(grads, *x, || {
                elementwise(val(*x), &|g, _, y| if y > 0.0 { g * 0.5 / y } else { 0.0 })
            }),
            Op::Log(x) => self.accumulate_with(grads, *x, || elementwise(val(*x), &|g, x, _| g / x)),
            Op::Exp(x) => self.accumulate_with(grads, *x, || elementwise(val(*x), &|g, _, y| g * y)),
            Op::Abs(x) => self.accumulate_with(grads, *x, || {
                elementwise(val(*x), &|g, x, _| if x == 0.0 { 0.0 } else { g * x.signum() })
            }),
            Op::Sign(x) => self.accumulate_with(grads, *x, || vec![0.0; g.len()]),
            Op::Custom { x, backward } => self.accumulate_with(grads, *x, || {
                backward(&self.nodes[x.0].value, &node.value, g)
            }),
            Op::Sum(x) => self.accumulate_with(grads, *x, || vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                self.accumulate_with(grads, *x, || vec![g[0] / n as f64; n])
            }
            Op::BatchMean(x) => {
                let xs = self.nodes[x.0].value.shape();
                let b = xs[0];
                let inner = val(*x).len() / b;
                self.accumulate_with(grads, *x, || {
                    let mut out = Vec::with_capacity(b * inner);
                    for _ in 0..b {
                        out.extend(g.iter().map(|v| v / b as f64));
                    }
                    out
                })
            }
            Op::SumLast(x) => {
                let n = *self.nodes[x.0].value.shape().last().unwrap();
                self.accumulate_with(grads, *x, || g.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect())
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                self.accumulate_with(grads, *a, || {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, val(*b), true, 0.0, &mut da);
                    da
                });
                self.accumulate_with(grads, *b, || {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(*a), true, g, false, 0.0, &mut db);
                    db
                });
            }
            Op::Transpose(x) => {
                let s = self.nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                self.accumulate_with(grads, *x, || {
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[i * c + j] = g[j * r + i];
                        }
                    }
                    out
                })
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let need = (self.requires_grad(*x), self.requires_grad(*w), self.requires_grad(*b));
                let cg = kernels::conv2d_backward(geom, cols, val(*w), g, need);
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(db) = cg.db {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MaxPool { x, arg } => self.accumulate_with(grads, *x, || {
                let mut dx = vec![0.0; val(*x).len()];
                for (gv, &src) in g.iter().zip(arg) {
                    dx[src] += gv;
                }
                dx
            }),
            Op::SpatialMean(x) => {
                let n = val(*x).len() / g.len();
                self.accumulate_with(grads, *x, || {
                    g.iter().flat_map(|&v| std::iter::repeat_n(v / n as f64, n)).collect()
                })
            }
            Op::SpatialVar(x) => {
                let xv = val(*x);
                let n = xv.len() / g.len();
                self.accumulate_with(grads, *x, || {
                    let mut out = Vec::with_capacity(xv.len());
                    for (c, &gv) in xv.chunks(n).zip(g) {
                        let mu = c.iter().sum::<f64>() / n as f64;
                        out.extend(c.iter().map(|v| gv * 2.0 * (v - mu) / n as f64));
                    }
                    out
                })
            }
            Op::SpatialCov(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let n = va.len() / g.len();
                let centered_times = |other: &[f64]| -> Vec<f64> {
                    let mut out = Vec::with_capacity(other.len());
                    for (c, &gv) in other.chunks(n).zip(g) {
                        let mu = c.iter().sum::<f64>() / n as f64;
                        out.extend(c.iter().map(|v| gv * (v - mu) / n as f64));
                    }
                    out
                };
                self.accumulate_with(grads, *a, || centered_times(vb));
                self.accumulate_with(grads, *b, || centered_times(va));
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                self.accumulate_with(grads, *x, || {
                    let mut out = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        out.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                    }
                    out
                })
            }
            Op::LogSoftmax(x) => {
                let n = *node.value.shape().last().unwrap();
                self.accumulate_with(grads, *x, || {
                    let mut out = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                        let total: f64 = gr.iter().sum();
                        out.extend(yr.iter().zip(gr).map(|(y, g)| g - y.exp() * total));
                    }
                    out
                })
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.nodes[v.0].value.shape()[*axis] * inner;
                    self.accumulate_with(grads, *v, || {
                        let mut out = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            out.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                        }
                        out
                    });
                    offset += chunk;
                }
            }
            Op::Reshape(x) => self.accumulate_with(grads, *x, || g.to_vec()),
            Op::Pick { x, idx } => {
                let n = self.nodes[x.0].value.shape()[1];
                self.accumulate_with(grads, *x, || {
                    let mut out = vec![0.0; idx.len() * n];
                    for (b, (&i, &gv)) in idx.iter().zip(g).enumerate() {
                        out[b * n + i] = gv;
                    }
                    out
                })
            }
            Op::NormalizeRows(x, eps) => {
                let xv = val(*x);
                let d = node.value.shape()[1];
                self.accumulate_with(grads, *x, || {
                    let mut out = Vec::with_capacity(xv.len());
                    for ((xr, yr), gr) in xv.chunks(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                        let norm = (xr.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        out.extend(yr.iter().zip(gr).map(|(y, g)| (g - y * dot) / norm));
                    }
                    out
                })
            }
            Op::ProxyAggregate { x, k } => {
                let xv = val(*x);
                self.accumulate_with(grads, *x, || {
                    let mut out = Vec::with_capacity(xv.len());
                    for ((grp, &agg), &gv) in xv.chunks(*k).zip(y).zip(g) {
                        let m = grp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = grp.iter().map(|s| (s - m).exp()).sum();
                        out.extend(grp.iter().map(|&s| {
                            let w = (s - m).exp() / z;
                            gv * w * (1.0 + s - agg)
                        }));
                    }
                    out
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn add_shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[3.0, 4.0, 5.0]));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn global_average_pool_of_two_by_two() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_padding_and_stride_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 8, 8], 1.0));
        let w = tape.constant(Tensor::full(&[4, 3, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 8, 8]);
        // Corner sees a 2x2 window per channel.
        assert_eq!(tape.value(y).data()[0], 12.0);
        let z = tape.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.shape(z), &[2, 4, 4, 4]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn relu_gates_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[-1.0, 1.0]));
        let r = tape.relu(w).unwrap();
        let loss = tape.mean(r).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.0, 0.5]);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let u = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(u).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_twice_is_state_error() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[1], &[3.0]));
        let loss = tape.mul(w, w).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::State(_))));
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn division_guard() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 1.0]));
        let b = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.div(a, b), Err(Error::NumericGuard { .. })));
    }

    #[test]
    fn fractional_power_of_negative_is_guarded() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[-0.5, 0.25]));
        assert!(matches!(tape.pow(a, 0.5), Err(Error::NumericGuard { .. })));
        let sq = tape.pow(a, 2.0).unwrap();
        assert_eq!(tape.value(sq).data(), &[0.25, 0.0625]);
        let sp = tape.signed_pow(a, 0.5).unwrap();
        assert!((tape.value(sp).data()[0] + 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(tape.value(sp).data()[1], 0.5);
    }

    #[test]
    fn constants_record_no_rules() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(a).unwrap();
        assert!(!tape.requires_grad(s));
    }

    #[test]
    fn concat_middle_axis() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.param(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = tape.mul(c, w).unwrap();
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn max_pool_routes_gradient_to_winner() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 1, 2, 2], &[1.0, 4.0, 3.0, 2.0]));
        let p = tape.max_pool2d(x, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[4.0]);
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn proxy_aggregate_weights_by_softmax() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 1.0]));
        let a = tape.proxy_aggregate(x, 2).unwrap();
        let e = std::f64::consts::E;
        assert!((tape.value(a).data()[0] - e / (1.0 + e)).abs() < 1e-15);
    }
}
