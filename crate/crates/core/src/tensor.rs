//! Dense `f64` tensors and a define-by-run tape for reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every training step. Forward primitives append
//! nodes in topological order; [`Tape::backward`] walks them in reverse and
//! accumulates gradients, so shared subexpressions receive the sum of their
//! downstream contributions.

use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("log of non-positive value {0}")]
    NonPositiveLog(f64),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable {0} is not on this tape")]
    UnknownVar(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

/// Row-major dense tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(mismatch(
                "tensor",
                format!("shape {:?} holds {} values, got {}", shape, n, values.len()),
            ));
        }
        Ok(Self { shape, values })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: vec![v],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![v; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("values", &self.values)
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Zero padding mode for depthwise convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output length equals input length.
    Same,
    /// No padding; output length is `len - kernel + 1`.
    Valid,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Relu,
    Clamp(f64, f64),
    Affine(f64, f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Concat(Vec<Var>),
    Slice {
        src: Var,
        start: usize,
    },
    Reshape(Var),
    Mean(Var),
    Sum(Var),
    ConvDepthwise {
        input: Var,
        kernel: Var,
        channels: usize,
        len: usize,
        ks: usize,
        pad_left: usize,
        out_len: usize,
    },
    Spectrum {
        input: Var,
        plan: FftPlan,
    },
}

/// Forward DFT plan shared by spectrum nodes.
#[derive(Clone)]
pub struct FftPlan(Arc<dyn Fft<f64>>);

impl FftPlan {
    pub fn new(len: usize) -> Self {
        Self(FftPlanner::new().plan_fft_forward(len))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.len() == 0
    }

    /// Complex DFT, `X[k] = sum_t x_t e^{-2 pi i k t / W}`.
    pub fn transform(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.0.process(&mut buf);
        // Bins that are real for real input get an exact +0 imaginary part
        // so the phase does not flip between pi and -pi on rounding noise.
        let w = x.len();
        buf[0].im = 0.0;
        if w.is_multiple_of(2) {
            buf[w / 2].im = 0.0;
        }
        buf
    }

    /// Re, Im, magnitude and phase as a flat `[4, W]` buffer.
    pub fn channels(&self, x: &[f64]) -> Vec<f64> {
        let w = x.len();
        let mut out = vec![0.0; 4 * w];
        for (k, c) in self.transform(x).iter().enumerate() {
            out[k] = c.re;
            out[w + k] = c.im;
            out[2 * w + k] = c.norm();
            out[3 * w + k] = c.im.atan2(c.re);
        }
        out
    }
}

impl fmt::Debug for FftPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FftPlan({})", self.0.len())
    }
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Append-only record of forward computations.
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Finite-value checking follows `debug_assertions`.
    pub fn new() -> Self {
        Self::with_finite_check(cfg!(debug_assertions))
    }

    pub fn with_finite_check(check_finite: bool) -> Self {
        Self {
            nodes: Vec::new(),
            check_finite,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_raw(Op::Leaf, t.shape, t.values, true)
    }

    /// A non-differentiable input (data, detached state).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(Op::Constant, t.shape, t.values, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    /// Copies the forward value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            values: n.value.clone(),
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(v.0))
        }
    }

    fn push_raw(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, op: Op, shape: Vec<usize>, value: Vec<f64>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && value.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(op, shape, value, requires_grad))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (na, nb) = (self.numel(a), self.numel(b));
        let shape = if self.shape(a) == self.shape(b) || nb == 1 {
            self.shape(a).to_vec()
        } else if na == 1 {
            self.shape(b).to_vec()
        } else {
            return Err(mismatch(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        };
        let n = na.max(nb);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let value: Vec<f64> = (0..n)
            .map(|i| f(av[if na == 1 { 0 } else { i }], bv[if nb == 1 { 0 } else { i }]))
            .collect();
        self.push(name, Op::Binary(kind, a, b), shape, value, &[a, b])
    }

    /// Elementwise sum; a single-element operand broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        self.check(a)?;
        let (name, f): (&'static str, fn(f64, f64, f64) -> f64) = match kind {
            Unary::Sigmoid => ("sigmoid", |x, _, _| sigmoid(x)),
            Unary::Tanh => ("tanh", |x, _, _| x.tanh()),
            Unary::Exp => ("exp", |x, _, _| x.exp()),
            Unary::Log => ("log", |x, _, _| x.ln()),
            Unary::Relu => ("relu", |x, _, _| x.max(0.0)),
            Unary::Clamp(..) => ("clamp", |x, lo, hi| x.clamp(lo, hi)),
            Unary::Affine(..) => ("affine", |x, s, b| s * x + b),
        };
        let (p, q) = match kind {
            Unary::Clamp(lo, hi) => (lo, hi),
            Unary::Affine(s, b) => (s, b),
            _ => (0.0, 0.0),
        };
        let av = &self.nodes[a.0].value;
        if let Unary::Log = kind {
            if let Some(&bad) = av.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                return Err(TensorError::NonPositiveLog(bad));
            }
        }
        let value: Vec<f64> = av.iter().map(|&x| f(x, p, q)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, Op::Unary(kind, a), shape, value, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    /// Gradient is zero outside `(lo, hi)`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(Unary::Clamp(lo, hi), a)
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary(Unary::Affine(scale, shift), a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -1.0, 1.0)
    }

    /// `[m,k] x [k,n] -> [m,n]`, or `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.is_empty() || sb.len() > 2 {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        if sb[0] != k {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = vec![0.0; m * n];
        if n == 1 {
            for (i, o) in value.iter_mut().enumerate() {
                *o = dot(&av[i * k..(i + 1) * k], bv);
            }
        } else {
            matmul_rows(av, bv, &mut value, m, k, n);
        }
        let shape = if sb.len() == 2 { vec![m, n] } else { vec![m] };
        self.push("matmul", Op::MatMul { a, b, m, k, n }, shape, value, &[a, b])
    }

    /// Flattens and joins the inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument("concat of nothing".into()));
        }
        let mut value = Vec::new();
        for &p in parts {
            self.check(p)?;
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let shape = vec![value.len()];
        self.push("concat", Op::Concat(parts.to_vec()), shape, value, parts)
    }

    /// Contiguous range of the flattened input, returned as a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let n = self.numel(a);
        if start + len > n {
            return Err(mismatch("slice", format!("[{start}, {}) out of {n}", start + len)));
        }
        let value = self.nodes[a.0].value[start..start + len].to_vec();
        self.push("slice", Op::Slice { src: a, start }, vec![len], value, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let n: usize = shape.iter().product();
        if n != self.numel(a) {
            return Err(mismatch("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let value = self.nodes[a.0].value.clone();
        self.push("reshape", Op::Reshape(a), shape.to_vec(), value, &[a])
    }

    /// DFT of a length-`W` vector as a `[4, W]` node: Re, Im, |X|, phase.
    /// Where |X| is zero the magnitude and phase rows pass no gradient.
    pub fn spectrum(&mut self, a: Var, plan: &FftPlan) -> Result<Var> {
        self.check(a)?;
        let w = plan.len();
        if self.numel(a) != w || w == 0 {
            return Err(mismatch("spectrum", format!("{:?} for window {w}", self.shape(a))));
        }
        let value = plan.channels(&self.nodes[a.0].value);
        let op = Op::Spectrum {
            input: a,
            plan: plan.clone(),
        };
        self.push("spectrum", op, vec![4, w], value, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = &self.nodes[a.0].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Op::Mean(a), Vec::new(), vec![m], &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.nodes[a.0].value.iter().sum::<f64>();
        self.push("sum", Op::Sum(a), Vec::new(), vec![s], &[a])
    }

    /// Per-channel convolution of `input [C, L]` with `kernel [C, ks]`.
    ///
    /// This is a true convolution (the kernel is flipped):
    /// `y[c,i] = sum_j kernel[c,j] * x[c, i + ks - 1 - j - pad_left]`.
    pub fn conv1d_depthwise(&mut self, input: Var, kernel: Var, padding: Padding) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        let (channels, len) = match si.as_slice() {
            [l] => (1, *l),
            [c, l] => (*c, *l),
            _ => return Err(mismatch("conv1d_depthwise", format!("input {si:?}"))),
        };
        let ks = match sk.as_slice() {
            [k] if channels == 1 => *k,
            [c, k] if *c == channels => *k,
            _ => {
                return Err(mismatch(
                    "conv1d_depthwise",
                    format!("kernel {sk:?} for input {si:?}"),
                ))
            }
        };
        if ks == 0 {
            return Err(mismatch("conv1d_depthwise", "empty kernel"));
        }
        let (pad_left, out_len) = match padding {
            Padding::Same => ((ks - 1) / 2, len),
            Padding::Valid => {
                if ks > len {
                    return Err(mismatch("conv1d_depthwise", format!("kernel {ks} longer than {len}")));
                }
                (0, len - ks + 1)
            }
        };
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[kernel.0].value;
        let mut value = vec![0.0; channels * out_len];
        for c in 0..channels {
            for i in 0..out_len {
                let mut acc = 0.0;
                for j in 0..ks {
                    if let Some(idx) = conv_index(i, j, ks, pad_left, len) {
                        acc += w[c * ks + j] * x[c * len + idx];
                    }
                }
                value[c * out_len + i] = acc;
            }
        }
        let shape = if si.len() == 1 { vec![out_len] } else { vec![channels, out_len] };
        self.push(
            "conv1d_depthwise",
            Op::ConvDepthwise {
                input,
                kernel,
                channels,
                len,
                ks,
                pad_left,
                out_len,
            },
            shape,
            value,
            &[input, kernel],
        )
    }

    /// Mixes channels: `input [C_in, L]`, `weight [C_out, C_in]` -> `[C_out, L]`.
    pub fn conv1d_pointwise(&mut self, input: Var, weight: Var) -> Result<Var> {
        self.matmul(weight, input)
    }

    /// Reverse pass from a scalar `loss`; d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.numel(loss) != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (na, nb) = (av.len(), bv.len());
                let ai = |i: usize| if na == 1 { 0 } else { i };
                let bi = |i: usize| if nb == 1 { 0 } else { i };
                if wants(a) {
                    let ga = slot(grads, a, na);
                    for (i, &gi) in g.iter().enumerate() {
                        ga[ai(i)] += match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * bv[bi(i)],
                            Binary::Div => gi / bv[bi(i)],
                        };
                    }
                }
                if wants(b) {
                    let gb = slot(grads, b, nb);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[bi(i)] += match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * av[ai(i)],
                            Binary::Div => {
                                let d = bv[bi(i)];
                                -gi * av[ai(i)] / (d * d)
                            }
                        };
                    }
                }
            }
            Op::Unary(kind, a) => {
                if !wants(*a) {
                    return;
                }
                let x = &self.nodes[a.0].value;
                let y = &node.value;
                let ga = slot(grads, *a, x.len());
                for i in 0..g.len() {
                    let d = match kind {
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Tanh => 1.0 - y[i] * y[i],
                        Unary::Exp => y[i],
                        Unary::Log => 1.0 / x[i],
                        Unary::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Clamp(lo, hi) => {
                            if x[i] > *lo && x[i] < *hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Affine(s, _) => *s,
                    };
                    ga[i] += g[i] * d;
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if wants(*a) {
                    // dA[i,p] = sum_j g[i,j] * B[p,j]
                    let ga = slot(grads, *a, m * k);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        let out = &mut ga[i * k..(i + 1) * k];
                        if n == 1 {
                            axpy(out, gi[0], bv);
                        } else {
                            for (p, o) in out.iter_mut().enumerate() {
                                *o += dot(gi, &bv[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
                if wants(*b) {
                    // dB[p,j] = sum_i A[i,p] * g[i,j]
                    let gb = slot(grads, *b, k * n);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        let ai = &av[i * k..(i + 1) * k];
                        if n == 1 {
                            axpy(gb, gi[0], ai);
                        } else {
                            for (p, &aip) in ai.iter().enumerate() {
                                axpy(&mut gb[p * n..(p + 1) * n], aip, gi);
                            }
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    if wants(p) {
                        let gp = slot(grads, p, n);
                        for (o, &gi) in gp.iter_mut().zip(&g[off..off + n]) {
                            *o += gi;
                        }
                    }
                    off += n;
                }
            }
            Op::Slice { src, start } => {
                if wants(*src) {
                    let n = self.nodes[src.0].value.len();
                    let gs = slot(grads, *src, n);
                    for (o, &gi) in gs[*start..*start + g.len()].iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
            Op::Reshape(src) => {
                if wants(*src) {
                    let gs = slot(grads, *src, g.len());
                    for (o, &gi) in gs.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
            Op::Mean(src) | Op::Sum(src) => {
                if wants(*src) {
                    let n = self.nodes[src.0].value.len();
                    let d = if matches!(node.op, Op::Mean(_)) { g[0] / n as f64 } else { g[0] };
                    for o in slot(grads, *src, n).iter_mut() {
                        *o += d;
                    }
                }
            }
            Op::ConvDepthwise {
                input,
                kernel,
                channels,
                len,
                ks,
                pad_left,
                out_len,
            } => {
                let (channels, len, ks, pad_left, out_len) = (*channels, *len, *ks, *pad_left, *out_len);
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[kernel.0].value;
                if wants(*input) {
                    let gx = slot(grads, *input, channels * len);
                    for c in 0..channels {
                        for i in 0..out_len {
                            let gi = g[c * out_len + i];
                            for j in 0..ks {
                                if let Some(idx) = conv_index(i, j, ks, pad_left, len) {
                                    gx[c * len + idx] += w[c * ks + j] * gi;
                                }
                            }
                        }
                    }
                }
                if wants(*kernel) {
                    let gw = slot(grads, *kernel, channels * ks);
                    for c in 0..channels {
                        for i in 0..out_len {
                            let gi = g[c * out_len + i];
                            for j in 0..ks {
                                if let Some(idx) = conv_index(i, j, ks, pad_left, len) {
                                    gw[c * ks + j] += x[c * len + idx] * gi;
                                }
                            }
                        }
                    }
                }
            }
            Op::Spectrum { input, plan } => {
                if !wants(*input) {
                    return;
                }
                let w = plan.len();
                let y = &node.value;
                let buf: Vec<Complex64> = (0..w)
                    .map(|k| {
                        let (re, im, mag) = (y[k], y[w + k], y[2 * w + k]);
                        let (mut a, mut b) = (g[k], g[w + k]);
                        if mag > 0.0 {
                            let (gm, gp) = (g[2 * w + k], g[3 * w + k]);
                            a += gm * re / mag - gp * im / (mag * mag);
                            b += gm * im / mag + gp * re / (mag * mag);
                        }
                        Complex64::new(a, -b)
                    })
                    .collect();
                let mut buf = buf;
                plan.0.process(&mut buf);
                let gx = slot(grads, *input, w);
                for (o, c) in gx.iter_mut().zip(&buf) {
                    *o += c.re;
                }
            }
        }
    }
}

/// `out[m, n] = a[m, k] * b[k, n]`, accumulated into `out`.
fn matmul_rows(av: &[f64], bv: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &av[i * k..(i + 1) * k];
        let o = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in row.iter().enumerate() {
            axpy(o, aip, &bv[p * n..(p + 1) * n]);
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, ar) = a.split_at(a.len() / 4 * 4);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(4).zip(bc.chunks_exact(4)) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

/// `y += alpha * x`
#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

#[inline]
fn conv_index(i: usize, j: usize, ks: usize, pad_left: usize, len: usize) -> Option<usize> {
    let idx = (i + ks - 1 - j) as isize - pad_left as isize;
    (idx >= 0 && (idx as usize) < len).then_some(idx as usize)
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

/// Output of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; `None` when `v` did not influence the loss.
    /// Leaves always have an entry (zeros if unreachable).
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_default()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Compares reverse-mode gradients of `f` against central finite differences
/// and returns the maximum relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over all
/// parameter coordinates.
pub fn grad_check<F, E>(f: F, params: &[Tensor], epsilon: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    grad_check_sampled(f, params, epsilon, usize::MAX)
}

/// Like [`grad_check`], but probes at most `max_per_param` evenly strided
/// coordinates of each parameter tensor.
pub fn grad_check_sampled<F, E>(
    f: F,
    params: &[Tensor],
    epsilon: f64,
    max_per_param: usize,
) -> std::result::Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(TensorError::InvalidArgument(format!("epsilon {epsilon} outside (0, 1e-2]")).into());
    }
    let eval = |ps: &[Tensor]| -> std::result::Result<f64, E> {
        let mut tape = Tape::with_finite_check(true);
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.numel(out) != 1 {
            return Err(TensorError::NotScalar(tape.shape(out).to_vec()).into());
        }
        Ok(tape.value(out)[0])
    };

    let mut tape = Tape::with_finite_check(true);
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).first().copied().unwrap_or(f64::NAN);
    let grads = tape.backward(out)?;
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::NonDeterministic {
            first: base,
            second: again,
        }
        .into());
    }

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.wrt(vars[pi]);
        let n = p.numel();
        let count = n.min(max_per_param.max(1));
        for s in 0..count {
            let idx = if count == n { s } else { s * n / count };
            let orig = p.values[idx];
            work[pi].values[idx] = orig + epsilon;
            let up = eval(&work)?;
            work[pi].values[idx] = orig - epsilon;
            let down = eval(&work)?;
            work[pi].values[idx] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
