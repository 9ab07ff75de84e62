//! Dense float64 tensors and the primitive operations the autodiff tape records.
//!
//! Every primitive has a pure forward (`forward_op`) and a vector-Jacobian
//! product (`vjp`). The tape in [`crate::tape`] only stitches these together.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op} expects {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable does not belong to this tape")]
    DetachedGraph,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor. A scalar has an empty shape.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "new",
                detail: format!("shape {:?} holds {} values, data has {}", shape, n, data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("vector length must be nonzero")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("zero-sized dimension")
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(vec![n, n], data).expect("identity size must be nonzero")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.data.len()]);
    }

    fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }
}

/// Primitive operations. Shapes follow these rules:
///
/// * `Add`/`Sub`/`Mul` accept a right operand whose shape equals the left's,
///   is a trailing suffix of it, or holds a single element; it is broadcast.
/// * `Matmul` takes `[m,k]·[k,n]` or `[m,k]·[k]`.
/// * `Concat` and `Slice` work along the leading axis.
/// * `Softmax`/`LogSoftmax` normalise along the last axis.
/// * `SliceLast`/`ConcatLast`/`RowSum` work along the last axis of a matrix.
/// * `BatchOuter` maps `[B,m],[B,n]` to `[B,m,n]`; `BatchMatVec` maps
///   `[B,m,n],[B,n]` to `[B,m]`.
/// * `Conv2d` takes input `[N,C,H,W]`, weight `[O,C,k,k]`, bias `[O]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Matmul,
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    Reshape(Vec<usize>),
    Flatten,
    Concat,
    Slice { start: usize, len: usize },
    Transpose,
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
    Sum,
    Mean,
    Outer,
    Log,
    Exp,
    Neg,
    Recip,
    Softmax,
    LogSoftmax,
    Conv2d { stride: usize, pad: usize },
    SliceLast { start: usize, len: usize },
    ConcatLast,
    RowSum,
    BatchOuter,
    BatchMatVec,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Matmul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::ScalarMul(_) => "scalar-mul",
            Op::Reshape(_) => "reshape",
            Op::Flatten => "flatten",
            Op::Concat => "concat",
            Op::Slice { .. } => "split",
            Op::Transpose => "transpose",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Outer => "outer-product",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Neg => "negate",
            Op::Recip => "reciprocal",
            Op::Softmax => "softmax-lastdim",
            Op::LogSoftmax => "log-softmax-lastdim",
            Op::Conv2d { .. } => "conv2d",
            Op::SliceLast { .. } => "column-slice",
            Op::ConcatLast => "column-concat",
            Op::RowSum => "row-sum",
            Op::BatchOuter => "batch-outer",
            Op::BatchMatVec => "batch-matvec",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Matmul | Op::Add | Op::Sub | Op::Mul | Op::Outer | Op::ConcatLast | Op::BatchOuter | Op::BatchMatVec => {
                Some(2)
            }
            Op::Conv2d { .. } => Some(3),
            Op::Concat => None,
            _ => Some(1),
        }
    }
}

fn mismatch(op: &Op, detail: String) -> TensorError {
    TensorError::ShapeMismatch {
        op: op.name(),
        detail,
    }
}

/// How a right operand broadcasts onto the left: the right buffer is
/// repeated with period `period`.
fn broadcast_period(op: &Op, a: &[usize], b: &[usize]) -> Result<usize> {
    let nb: usize = b.iter().product();
    if a == b || nb == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b) {
        Ok(nb)
    } else {
        Err(mismatch(op, format!("cannot broadcast {:?} onto {:?}", b, a)))
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
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

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Evaluates one primitive. Pure: no tape, no gradient bookkeeping.
pub fn forward_op(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(TensorError::Arity {
                op: op.name(),
                expected: n,
                got: inputs.len(),
            });
        }
    } else if inputs.is_empty() {
        return Err(TensorError::Arity {
            op: op.name(),
            expected: 1,
            got: 0,
        });
    }
    let out = forward_unchecked(op, inputs)?;
    if out.data.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: op.name() });
    }
    Ok(out)
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape.clone(), x.data.iter().map(|&v| f(v)).collect())
}

fn forward_unchecked(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let a = inputs[0];
    Ok(match op {
        Op::Matmul => {
            let b = inputs[1];
            if a.rank() != 2 || !(b.rank() == 1 || b.rank() == 2) || a.shape[1] != b.shape[0] {
                return Err(mismatch(op, format!("{:?} x {:?}", a.shape, b.shape)));
            }
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = if b.rank() == 2 { b.shape[1] } else { 1 };
            let out = matmul_raw(&a.data, &b.data, m, k, n);
            let shape = if b.rank() == 2 { vec![m, n] } else { vec![m] };
            Tensor::from_parts(shape, out)
        }
        Op::Add | Op::Sub | Op::Mul => {
            let b = inputs[1];
            let p = broadcast_period(op, &a.shape, &b.shape)?;
            let data = a
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = b.data[i % p];
                    match op {
                        Op::Add => x + y,
                        Op::Sub => x - y,
                        _ => x * y,
                    }
                })
                .collect();
            Tensor::from_parts(a.shape.clone(), data)
        }
        Op::ScalarMul(c) => map(a, |v| v * c),
        Op::Reshape(shape) => {
            if shape.iter().product::<usize>() != a.numel() || shape.contains(&0) {
                return Err(mismatch(op, format!("{:?} -> {:?}", a.shape, shape)));
            }
            Tensor::from_parts(shape.clone(), a.data.clone())
        }
        Op::Flatten => Tensor::from_parts(vec![a.numel()], a.data.clone()),
        Op::Concat => {
            if a.rank() == 0 {
                return Err(mismatch(op, "cannot concatenate scalars".into()));
            }
            let tail = &a.shape[1..];
            let mut lead = 0;
            let mut data = Vec::new();
            for t in inputs {
                if t.rank() != a.rank() || &t.shape[1..] != tail {
                    return Err(mismatch(op, format!("{:?} vs {:?}", t.shape, a.shape)));
                }
                lead += t.shape[0];
                data.extend_from_slice(&t.data);
            }
            let mut shape = a.shape.clone();
            shape[0] = lead;
            Tensor::from_parts(shape, data)
        }
        Op::Slice { start, len } => {
            if a.rank() == 0 || *len == 0 || start + len > a.shape[0] {
                return Err(mismatch(
                    op,
                    format!("rows {}..{} of {:?}", start, start + len, a.shape),
                ));
            }
            let row: usize = a.shape[1..].iter().product();
            let mut shape = a.shape.clone();
            shape[0] = *len;
            Tensor::from_parts(shape, a.data[start * row..(start + len) * row].to_vec())
        }
        Op::Transpose => {
            if a.rank() != 2 {
                return Err(mismatch(op, format!("expected a matrix, got {:?}", a.shape)));
            }
            let (r, c) = (a.shape[0], a.shape[1]);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = a.data[i * c + j];
                }
            }
            Tensor::from_parts(vec![c, r], data)
        }
        Op::Relu => map(a, |v| v.max(0.0)),
        Op::Tanh => map(a, f64::tanh),
        Op::Sigmoid => map(a, sigmoid),
        Op::Softplus => map(a, softplus),
        Op::Sum => Tensor::scalar(a.data.iter().sum()),
        Op::Mean => Tensor::scalar(a.data.iter().sum::<f64>() / a.numel() as f64),
        Op::Outer => {
            let b = inputs[1];
            if a.rank() != 1 || b.rank() != 1 {
                return Err(mismatch(op, format!("{:?} (x) {:?}", a.shape, b.shape)));
            }
            let mut data = Vec::with_capacity(a.numel() * b.numel());
            for &x in &a.data {
                data.extend(b.data.iter().map(|&y| x * y));
            }
            Tensor::from_parts(vec![a.numel(), b.numel()], data)
        }
        Op::Log => map(a, f64::ln),
        Op::Exp => map(a, f64::exp),
        Op::Neg => map(a, |v| -v),
        Op::Recip => map(a, |v| 1.0 / v),
        Op::Softmax | Op::LogSoftmax => {
            let n = *a.shape.last().unwrap_or(&1);
            let mut data = Vec::with_capacity(a.numel());
            for row in a.data.chunks(n) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                if matches!(op, Op::Softmax) {
                    data.extend(row.iter().map(|v| (v - lse).exp()));
                } else {
                    data.extend(row.iter().map(|v| v - lse));
                }
            }
            Tensor::from_parts(a.shape.clone(), data)
        }
        Op::Conv2d { stride, pad } => conv2d_forward(op, a, inputs[1], inputs[2], *stride, *pad)?,
        Op::SliceLast { start, len } => {
            if a.rank() != 2 || *len == 0 || start + len > a.shape[1] {
                return Err(mismatch(op, format!("columns {}..{} of {:?}", start, start + len, a.shape)));
            }
            let c = a.shape[1];
            let data = a.data.chunks(c).flat_map(|row| row[*start..start + len].iter().copied()).collect();
            Tensor::from_parts(vec![a.shape[0], *len], data)
        }
        Op::ConcatLast => {
            let b = inputs[1];
            if a.rank() != 2 || b.rank() != 2 || a.shape[0] != b.shape[0] {
                return Err(mismatch(op, format!("{:?} | {:?}", a.shape, b.shape)));
            }
            let (ca, cb) = (a.shape[1], b.shape[1]);
            let mut data = Vec::with_capacity(a.numel() + b.numel());
            for (ra, rb) in a.data.chunks(ca).zip(b.data.chunks(cb)) {
                data.extend_from_slice(ra);
                data.extend_from_slice(rb);
            }
            Tensor::from_parts(vec![a.shape[0], ca + cb], data)
        }
        Op::RowSum => {
            if a.rank() != 2 {
                return Err(mismatch(op, format!("expected a matrix, got {:?}", a.shape)));
            }
            let data = a.data.chunks(a.shape[1]).map(|r| r.iter().sum()).collect();
            Tensor::from_parts(vec![a.shape[0]], data)
        }
        Op::BatchOuter => {
            let b = inputs[1];
            if a.rank() != 2 || b.rank() != 2 || a.shape[0] != b.shape[0] {
                return Err(mismatch(op, format!("{:?} (x) {:?}", a.shape, b.shape)));
            }
            let (bs, m, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut data = Vec::with_capacity(bs * m * n);
            for (ra, rb) in a.data.chunks(m).zip(b.data.chunks(n)) {
                for &x in ra {
                    data.extend(rb.iter().map(|&y| x * y));
                }
            }
            Tensor::from_parts(vec![bs, m, n], data)
        }
        Op::BatchMatVec => {
            let v = inputs[1];
            if a.rank() != 3 || v.rank() != 2 || a.shape[0] != v.shape[0] || a.shape[2] != v.shape[1] {
                return Err(mismatch(op, format!("{:?} x {:?}", a.shape, v.shape)));
            }
            let (bs, m, n) = (a.shape[0], a.shape[1], a.shape[2]);
            let mut data = Vec::with_capacity(bs * m);
            for (mat, vec) in a.data.chunks(m * n).zip(v.data.chunks(n)) {
                data.extend(mat.chunks(n).map(|row| row.iter().zip(vec).map(|(x, y)| x * y).sum::<f64>()));
            }
            Tensor::from_parts(vec![bs, m], data)
        }
    })
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(op: &Op, x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<ConvDims> {
    if x.rank() != 4 || w.rank() != 4 || b.rank() != 1 || stride == 0 {
        return Err(mismatch(
            op,
            format!("input {:?}, weight {:?}, bias {:?}", x.shape, w.shape, b.shape),
        ));
    }
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, wc, k, k2) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    if wc != c || k != k2 || b.shape[0] != o {
        return Err(mismatch(
            op,
            format!("input {:?}, weight {:?}, bias {:?}", x.shape, w.shape, b.shape),
        ));
    }
    let (oh, ow) = match (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => return Err(mismatch(op, format!("kernel {} larger than padded input {:?}", k, x.shape))),
    };
    Ok(ConvDims {
        n,
        c,
        h,
        w: wd,
        o,
        k,
        oh,
        ow,
    })
}

fn conv2d_forward(op: &Op, x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let d = conv_dims(op, x, w, b, stride, pad)?;
    let mut out = vec![0.0; d.n * d.o * d.oh * d.ow];
    for ni in 0..d.n {
        for oc in 0..d.o {
            let obase = (ni * d.o + oc) * d.oh * d.ow;
            out[obase..obase + d.oh * d.ow].fill(b.data[oc]);
            for ic in 0..d.c {
                let xbase = (ni * d.c + ic) * d.h * d.w;
                let wbase = (oc * d.c + ic) * d.k * d.k;
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let wv = w.data[wbase + ky * d.k + kx];
                        for oy in 0..d.oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * d.w;
                            let orow = obase + oy * d.ow;
                            for ox in 0..d.ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                out[orow + ox] += wv * x.data[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![d.n, d.o, d.oh, d.ow], out))
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    g: &[f64],
    need: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let d = conv_dims(&Op::Conv2d { stride, pad }, x, w, b, stride, pad).expect("validated in forward");
    let mut gx = need[0].then(|| vec![0.0; x.numel()]);
    let mut gw = need[1].then(|| vec![0.0; w.numel()]);
    let gb = need[2].then(|| {
        let mut gb = vec![0.0; d.o];
        for ni in 0..d.n {
            for (oc, acc) in gb.iter_mut().enumerate() {
                let obase = (ni * d.o + oc) * d.oh * d.ow;
                *acc += g[obase..obase + d.oh * d.ow].iter().sum::<f64>();
            }
        }
        gb
    });
    for ni in 0..d.n {
        for oc in 0..d.o {
            let obase = (ni * d.o + oc) * d.oh * d.ow;
            for ic in 0..d.c {
                let xbase = (ni * d.c + ic) * d.h * d.w;
                let wbase = (oc * d.c + ic) * d.k * d.k;
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let wv = w.data[wbase + ky * d.k + kx];
                        let mut wacc = 0.0;
                        for oy in 0..d.oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * d.w;
                            let orow = obase + oy * d.ow;
                            for ox in 0..d.ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let go = g[orow + ox];
                                wacc += go * x.data[xrow + ix as usize];
                                if let Some(gx) = gx.as_mut() {
                                    gx[xrow + ix as usize] += go * wv;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[wbase + ky * d.k + kx] += wacc;
                        }
                    }
                }
            }
        }
    }
    vec![gx, gw, gb]
}

/// Vector-Jacobian product of one primitive: given the upstream gradient
/// `g` of the output, returns the gradient for each input flagged in `need`.
pub fn vjp(op: &Op, inputs: &[&Tensor], out: &Tensor, g: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
    let a = inputs[0];
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Vec<f64>>> {
        vec![need[0].then(|| (0..g.len()).map(|i| g[i] * f(i)).collect())]
    };
    match op {
        Op::Matmul => {
            let b = inputs[1];
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = if b.rank() == 2 { b.shape[1] } else { 1 };
            // dA = G·Bᵀ, dB = Aᵀ·G
            let ga = need[0].then(|| {
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let brow = &b.data[p * n..(p + 1) * n];
                        ga[i * k + p] = g[i * n..(i + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                ga
            });
            let gb = need[1].then(|| {
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = a.data[i * k + p];
                        for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
                gb
            });
            vec![ga, gb]
        }
        Op::Add | Op::Sub | Op::Mul => {
            let b = inputs[1];
            let p = b.numel();
            let ga = need[0].then(|| match op {
                Op::Mul => g.iter().enumerate().map(|(i, gv)| gv * b.data[i % p]).collect(),
                _ => g.to_vec(),
            });
            let gb = need[1].then(|| {
                let mut gb = vec![0.0; p];
                for (i, gv) in g.iter().enumerate() {
                    gb[i % p] += match op {
                        Op::Add => *gv,
                        Op::Sub => -gv,
                        _ => gv * a.data[i],
                    };
                }
                gb
            });
            vec![ga, gb]
        }
        Op::ScalarMul(c) => elementwise(&|_| *c),
        Op::Reshape(_) | Op::Flatten => vec![need[0].then(|| g.to_vec())],
        Op::Concat => {
            let mut offset = 0;
            inputs
                .iter()
                .zip(need)
                .map(|(t, &nd)| {
                    let r = nd.then(|| g[offset..offset + t.numel()].to_vec());
                    offset += t.numel();
                    r
                })
                .collect()
        }
        Op::Slice { start, len } => vec![need[0].then(|| {
            let row: usize = a.shape[1..].iter().product();
            let mut ga = vec![0.0; a.numel()];
            ga[start * row..(start + len) * row].copy_from_slice(g);
            ga
        })],
        Op::Transpose => vec![need[0].then(|| {
            let (r, c) = (a.shape[0], a.shape[1]);
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] = g[j * r + i];
                }
            }
            ga
        })],
        Op::Relu => elementwise(&|i| if a.data[i] > 0.0 { 1.0 } else { 0.0 }),
        Op::Tanh => elementwise(&|i| 1.0 - out.data[i] * out.data[i]),
        Op::Sigmoid => elementwise(&|i| out.data[i] * (1.0 - out.data[i])),
        Op::Softplus => elementwise(&|i| sigmoid(a.data[i])),
        Op::Sum => vec![need[0].then(|| vec![g[0]; a.numel()])],
        Op::Mean => vec![need[0].then(|| vec![g[0] / a.numel() as f64; a.numel()])],
        Op::Outer => {
            let b = inputs[1];
            let (m, n) = (a.numel(), b.numel());
            let ga = need[0].then(|| {
                (0..m)
                    .map(|i| g[i * n..(i + 1) * n].iter().zip(&b.data).map(|(x, y)| x * y).sum())
                    .collect()
            });
            let gb = need[1].then(|| {
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        gb[j] += g[i * n + j] * a.data[i];
                    }
                }
                gb
            });
            vec![ga, gb]
        }
        Op::Log => elementwise(&|i| 1.0 / a.data[i]),
        Op::Exp => elementwise(&|i| out.data[i]),
        Op::Neg => elementwise(&|_| -1.0),
        Op::Recip => elementwise(&|i| -out.data[i] * out.data[i]),
        Op::Softmax => vec![need[0].then(|| {
            let n = *a.shape.last().unwrap_or(&1);
            let mut ga = Vec::with_capacity(g.len());
            for (grow, yrow) in g.chunks(n).zip(out.data.chunks(n)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                ga.extend(grow.iter().zip(yrow).map(|(gv, y)| y * (gv - dot)));
            }
            ga
        })],
        Op::LogSoftmax => vec![need[0].then(|| {
            let n = *a.shape.last().unwrap_or(&1);
            let mut ga = Vec::with_capacity(g.len());
            for (grow, lrow) in g.chunks(n).zip(out.data.chunks(n)) {
                let total: f64 = grow.iter().sum();
                ga.extend(grow.iter().zip(lrow).map(|(gv, l)| gv - l.exp() * total));
            }
            ga
        })],
        Op::Conv2d { stride, pad } => conv2d_backward(a, inputs[1], inputs[2], *stride, *pad, g, need),
        Op::SliceLast { start, len } => vec![need[0].then(|| {
            let c = a.shape[1];
            let mut ga = vec![0.0; a.numel()];
            for (row, grow) in ga.chunks_mut(c).zip(g.chunks(*len)) {
                row[*start..start + len].copy_from_slice(grow);
            }
            ga
        })],
        Op::ConcatLast => {
            let b = inputs[1];
            let (ca, cb) = (a.shape[1], b.shape[1]);
            let pick = |lo: usize, w: usize| -> Vec<f64> {
                g.chunks(ca + cb).flat_map(|r| r[lo..lo + w].iter().copied()).collect()
            };
            vec![need[0].then(|| pick(0, ca)), need[1].then(|| pick(ca, cb))]
        }
        Op::RowSum => vec![need[0].then(|| {
            let c = a.shape[1];
            g.iter().flat_map(|&gv| std::iter::repeat_n(gv, c)).collect()
        })],
        Op::BatchOuter => {
            let b = inputs[1];
            let (m, n) = (a.shape[1], b.shape[1]);
            let ga = need[0].then(|| {
                let mut ga = Vec::with_capacity(a.numel());
                for (gb, rb) in g.chunks(m * n).zip(b.data.chunks(n)) {
                    ga.extend(gb.chunks(n).map(|gr| gr.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>()));
                }
                ga
            });
            let gb = need[1].then(|| {
                let mut out = vec![0.0; b.numel()];
                for ((gb, ra), o) in g.chunks(m * n).zip(a.data.chunks(m)).zip(out.chunks_mut(n)) {
                    for (gr, &x) in gb.chunks(n).zip(ra) {
                        for (ov, gv) in o.iter_mut().zip(gr) {
                            *ov += gv * x;
                        }
                    }
                }
                out
            });
            vec![ga, gb]
        }
        Op::BatchMatVec => {
            let v = inputs[1];
            let (m, n) = (a.shape[1], a.shape[2]);
            // dA[b] = g[b] v[b]ᵀ, dv[b] = A[b]ᵀ g[b]
            let ga = need[0].then(|| {
                let mut ga = Vec::with_capacity(a.numel());
                for (gr, vr) in g.chunks(m).zip(v.data.chunks(n)) {
                    for &gv in gr {
                        ga.extend(vr.iter().map(|&x| gv * x));
                    }
                }
                ga
            });
            let gv = need[1].then(|| {
                let mut out = vec![0.0; v.numel()];
                for ((mat, gr), o) in a.data.chunks(m * n).zip(g.chunks(m)).zip(out.chunks_mut(n)) {
                    for (row, &gval) in mat.chunks(n).zip(gr) {
                        for (ov, x) in o.iter_mut().zip(row) {
                            *ov += gval * x;
                        }
                    }
                }
                out
            });
            vec![ga, gv]
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
    fn matmul_matrix_vector() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let x = t(&[2], &[1.0, 1.0]);
        let y = forward_op(&Op::Matmul, &[&a, &x]).unwrap();
        assert_eq!(y.shape(), &[2]);
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn reshape_then_flatten_roundtrips() {
        let v = t(&[6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let m = forward_op(&Op::Reshape(vec![2, 3]), &[&v]).unwrap();
        assert_eq!(m.shape(), &[2, 3]);
        let back = forward_op(&Op::Flatten, &[&m]).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let z = t(&[4], &[0.0; 4]);
        let p = forward_op(&Op::Softmax, &[&z]).unwrap();
        assert_eq!(p.data(), &[0.25; 4]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2], &[0.0; 2]);
        let err = forward_op(&Op::Matmul, &[&a, &b]).unwrap_err();
        match err {
            TensorError::ShapeMismatch { op, detail } => {
                assert_eq!(op, "matmul");
                assert!(detail.contains("[2, 3]"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(forward_op(&Op::Add, &[&a, &t(&[2], &[1.0, 1.0])]).is_err());
    }

    #[test]
    fn log_of_zero_is_non_finite_error() {
        let z = t(&[1], &[0.0]);
        assert_eq!(
            forward_op(&Op::Log, &[&z]).unwrap_err(),
            TensorError::NonFinite { op: "log" }
        );
    }

    #[test]
    fn broadcast_bias_over_rows() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2], &[10.0, 20.0]);
        let y = forward_op(&Op::Add, &[&a, &b]).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let x = t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = t(&[1, 1, 3, 3], &k);
        let b = t(&[1], &[0.5]);
        let y = forward_op(&Op::Conv2d { stride: 1, pad: 1 }, &[&x, &w, &b]).unwrap();
        let expect: Vec<f64> = x.data().iter().map(|v| v + 0.5).collect();
        assert_eq!(y.data(), expect.as_slice());
        let y2 = forward_op(&Op::Conv2d { stride: 2, pad: 1 }, &[&x, &w, &b]).unwrap();
        assert_eq!(y2.shape(), &[1, 1, 2, 2]);
        assert_eq!(y2.data(), &[1.5, 3.5, 7.5, 9.5]);
    }
}
