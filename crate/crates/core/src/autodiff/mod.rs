//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Graph`] records primitive applications in topological order together
//! with their forward values. [`Graph::backward`] sweeps the tape once in
//! reverse. The recorded ops can be replayed with substituted leaves, which
//! is what [`check_gradients`] uses for finite differences.

mod check;
pub mod conv;
mod optim;

pub use check::{check_gradients, GradCheckOptions, GradCheckReport, InputCheck};
pub use optim::{adam_step, AdamConfig, AdamState, BoundParams, ParamSet};

use std::collections::HashMap;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft;
use crate::par::Exec;
use crate::tensor::{CTensor, Tensor};
use conv::ConvGeom;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Real(Tensor),
    Complex(CTensor),
}

impl Value {
    fn shape(&self) -> &[usize] {
        match self {
            Value::Real(t) => t.shape(),
            Value::Complex(c) => c.shape(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    MatMul,
    /// `[.., D] + [D]`
    AddBias,
    /// `[N, C, H, W] + [C]`
    ChannelBias,
    Conv2d {
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        stride: usize,
        pad: usize,
        out_pad: usize,
    },
    LeakyRelu(f64),
    Tanh,
    Exp,
    Log1p,
    Abs,
    Sum,
    Mean,
    Fft2,
    Magnitude,
    FftShift,
    MinMaxNorm,
    Clamp {
        lo: f64,
        hi: f64,
    },
    Reshape(Vec<usize>),
    ConcatCols,
    SliceChannel(usize),
    PadReplicate(usize),
    StopGrad,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Value,
}

/// Dynamic tape of primitive applications.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    exec: Exec,
}

/// Gradients keyed by node.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.map.remove(&id)
    }
}

fn real<'a>(v: &'a Value, op: &'static str) -> Result<&'a Tensor> {
    match v {
        Value::Real(t) => Ok(t),
        Value::Complex(_) => Err(Error::InvalidArgument(format!("{op} expects a real input"))),
    }
}

fn last2(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::InvalidShape { op, msg: format!("needs rank ≥ 2, got {shape:?}") });
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    Ok((shape.iter().product::<usize>() / (h * w), h, w))
}

fn nchw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        _ => Err(Error::InvalidShape { op, msg: format!("expected [N, C, H, W], got {shape:?}") }),
    }
}

fn with_last2(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let r = s.len();
    s[r - 2] = h;
    s[r - 1] = w;
    s
}

/// Geometry of the convolution adjoint to a transposed convolution.
fn convt_geom(cout: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> Result<ConvGeom> {
    let oh = (h - 1) * stride + k + out_pad;
    let ow = (w - 1) * stride + k + out_pad;
    if oh < 2 * pad + 1 || ow < 2 * pad + 1 || out_pad >= stride {
        return Err(Error::InvalidArgument("invalid transposed-conv geometry".into()));
    }
    let g = ConvGeom::new(cout, oh - 2 * pad, ow - 2 * pad, k, stride, pad)
        .ok_or_else(|| Error::InvalidArgument("invalid transposed-conv geometry".into()))?;
    if g.oh != h || g.ow != w {
        return Err(Error::InvalidArgument("transposed-conv geometry does not invert".into()));
    }
    Ok(g)
}

/// Evaluates one primitive. Shared by graph construction and replay.
fn forward_op(op: &Op, ins: &[&Value], exec: Exec) -> Result<Value> {
    let r = |i: usize, name: &'static str| real(ins[i], name);
    let out = match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Add => r(0, "add")?.add(r(1, "add")?)?,
        Op::Sub => r(0, "sub")?.sub(r(1, "sub")?)?,
        Op::Mul => r(0, "mul")?.mul(r(1, "mul")?)?,
        Op::Div => r(0, "div")?.div(r(1, "div")?)?,
        Op::Scale(s) => r(0, "scale")?.scale(*s),
        Op::AddScalar(s) => r(0, "add_scalar")?.add_scalar(*s),
        Op::MatMul => r(0, "matmul")?.matmul_with(r(1, "matmul")?, exec)?,
        Op::AddBias => {
            let (x, b) = (r(0, "add_bias")?, r(1, "add_bias")?);
            let d = *x.shape().last().unwrap_or(&0);
            if b.numel() != d {
                return Err(Error::ShapeMismatch { op: "add_bias", left: x.shape().to_vec(), right: b.shape().to_vec() });
            }
            let bd = b.data();
            let data = x.data().iter().enumerate().map(|(i, &v)| v + bd[i % d]).collect();
            Tensor::new(x.shape().to_vec(), data)?
        }
        Op::ChannelBias => {
            let (x, b) = (r(0, "channel_bias")?, r(1, "channel_bias")?);
            let (_, c, h, w) = nchw(x.shape(), "channel_bias")?;
            if b.numel() != c {
                return Err(Error::ShapeMismatch { op: "channel_bias", left: x.shape().to_vec(), right: b.shape().to_vec() });
            }
            let bd = b.data();
            let data = x.data().iter().enumerate().map(|(i, &v)| v + bd[(i / (h * w)) % c]).collect();
            Tensor::new(x.shape().to_vec(), data)?
        }
        Op::Conv2d { stride, pad } => {
            let (x, w) = (r(0, "conv2d")?, r(1, "conv2d")?);
            let (n, c, h, wd) = nchw(x.shape(), "conv2d")?;
            let (o, wc, k, k2) = nchw(w.shape(), "conv2d weight")?;
            if wc != c || k != k2 {
                return Err(Error::ShapeMismatch { op: "conv2d", left: x.shape().to_vec(), right: w.shape().to_vec() });
            }
            let g = ConvGeom::new(c, h, wd, k, *stride, *pad)
                .ok_or_else(|| Error::InvalidArgument("conv2d kernel larger than padded input".into()))?;
            let data = conv::conv_forward(exec, x.data(), n, w.data(), o, &g);
            Tensor::new(vec![n, o, g.oh, g.ow], data)?
        }
        Op::ConvT2d { stride, pad, out_pad } => {
            let (x, w) = (r(0, "conv_transpose2d")?, r(1, "conv_transpose2d")?);
            let (n, cin, h, wd) = nchw(x.shape(), "conv_transpose2d")?;
            let (wc, cout, k, k2) = nchw(w.shape(), "conv_transpose2d weight")?;
            if wc != cin || k != k2 {
                return Err(Error::ShapeMismatch { op: "conv_transpose2d", left: x.shape().to_vec(), right: w.shape().to_vec() });
            }
            let g = convt_geom(cout, h, wd, k, *stride, *pad, *out_pad)?;
            let data = conv::convt_forward(exec, x.data(), n, w.data(), cin, &g);
            Tensor::new(vec![n, cout, g.h, g.w], data)?
        }
        Op::LeakyRelu(a) => r(0, "leaky_relu")?.map(|x| if x > 0.0 { x } else { a * x }),
        Op::Tanh => r(0, "tanh")?.map(f64::tanh),
        Op::Exp => r(0, "exp")?.map(f64::exp),
        Op::Log1p => r(0, "log1p")?.map(f64::ln_1p),
        Op::Abs => r(0, "abs")?.map(f64::abs),
        Op::Sum => Tensor::scalar(r(0, "sum")?.sum()),
        Op::Mean => Tensor::scalar(r(0, "mean")?.mean()),
        Op::Fft2 => {
            let x = r(0, "fft2")?;
            let (b, h, w) = last2(x.shape(), "fft2")?;
            let (hp, wp) = fft::padded_dims(h, w);
            let mut data = Vec::with_capacity(b * hp * wp);
            for i in 0..b {
                let plane = Tensor::new(vec![h, w], x.data()[i * h * w..(i + 1) * h * w].to_vec())?;
                data.extend_from_slice(fft::fft2_with(&plane, exec)?.data());
            }
            return Ok(Value::Complex(CTensor::new(with_last2(x.shape(), hp, wp), data)?));
        }
        Op::Magnitude => match ins[0] {
            Value::Complex(c) => c.abs(),
            Value::Real(_) => return Err(Error::InvalidArgument("magnitude expects a complex input".into())),
        },
        Op::FftShift => {
            let x = r(0, "fftshift")?;
            let (b, h, w) = last2(x.shape(), "fftshift")?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::InvalidShape { op: "fftshift", msg: format!("needs even extents, got {h}×{w}") });
            }
            let mut data = Vec::with_capacity(x.numel());
            for i in 0..b {
                data.extend(fft::fftshift_slice(&x.data()[i * h * w..(i + 1) * h * w], h, w));
            }
            Tensor::new(x.shape().to_vec(), data)?
        }
        Op::MinMaxNorm => {
            let x = r(0, "min_max_norm")?;
            let (b, h, w) = last2(x.shape(), "min_max_norm")?;
            let n = h * w;
            let mut data = vec![0.0; x.numel()];
            for i in 0..b {
                let s = &x.data()[i * n..(i + 1) * n];
                let (lo, hi) = (s.iter().copied().fold(f64::INFINITY, f64::min), s.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                if hi > lo {
                    for (o, &v) in data[i * n..(i + 1) * n].iter_mut().zip(s) {
                        *o = (v - lo) / (hi - lo);
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), data)?
        }
        Op::Clamp { lo, hi } => r(0, "clamp")?.map(|x| x.clamp(*lo, *hi)),
        Op::Reshape(shape) => r(0, "reshape")?.reshape(shape)?,
        Op::ConcatCols => {
            let (a, b) = (r(0, "concat_cols")?, r(1, "concat_cols")?);
            match (a.shape(), b.shape()) {
                ([n, p], [m, q]) if n == m => {
                    let mut data = Vec::with_capacity(n * (p + q));
                    for i in 0..*n {
                        data.extend_from_slice(&a.data()[i * p..(i + 1) * p]);
                        data.extend_from_slice(&b.data()[i * q..(i + 1) * q]);
                    }
                    Tensor::new(vec![*n, p + q], data)?
                }
                _ => return Err(Error::ShapeMismatch { op: "concat_cols", left: a.shape().to_vec(), right: b.shape().to_vec() }),
            }
        }
        Op::SliceChannel(ch) => {
            let x = r(0, "slice_channel")?;
            let (n, c, h, w) = nchw(x.shape(), "slice_channel")?;
            if *ch >= c {
                return Err(Error::InvalidArgument(format!("channel {ch} out of range for {c}")));
            }
            let mut data = Vec::with_capacity(n * h * w);
            for b in 0..n {
                let off = (b * c + ch) * h * w;
                data.extend_from_slice(&x.data()[off..off + h * w]);
            }
            Tensor::new(vec![n, 1, h, w], data)?
        }
        Op::PadReplicate(p) => {
            let x = r(0, "pad_replicate")?;
            let (b, h, w) = last2(x.shape(), "pad_replicate")?;
            let (ph, pw) = (h + 2 * p, w + 2 * p);
            let mut data = Vec::with_capacity(b * ph * pw);
            for i in 0..b {
                let s = &x.data()[i * h * w..(i + 1) * h * w];
                for rr in 0..ph {
                    let sr = (rr as isize - *p as isize).clamp(0, h as isize - 1) as usize;
                    for cc in 0..pw {
                        let sc = (cc as isize - *p as isize).clamp(0, w as isize - 1) as usize;
                        data.push(s[sr * w + sc]);
                    }
                }
            }
            Tensor::new(with_last2(x.shape(), ph, pw), data)?
        }
        Op::StopGrad => r(0, "stop_grad")?.clone(),
    };
    Ok(Value::Real(out))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_exec(exec: Exec) -> Self {
        Graph { nodes: Vec::new(), exec }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(id.0, self.nodes.len()));
        }
        Ok(())
    }

    /// Adds an input tensor (parameter, data or constant).
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), value: Value::Real(t) });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t)
    }

    fn push(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        for &i in inputs {
            self.check(i)?;
        }
        let value = {
            let ins: Vec<&Value> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            forward_op(&op, &ins, self.exec)?
        };
        self.nodes.push(Node { op, inputs: inputs.to_vec(), value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Forward value of a real node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].value {
            Value::Real(t) => t,
            Value::Complex(_) => panic!("node {} is complex", id.0),
        }
    }

    pub fn value_of(&self, id: NodeId) -> Result<&Value> {
        self.check(id)?;
        Ok(&self.nodes[id.0].value)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Div, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.push(Op::Scale(s), &[a])
    }
    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.push(Op::AddScalar(s), &[a])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul, &[a, b])
    }
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::AddBias, &[x, b])
    }
    pub fn channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::ChannelBias, &[x, b])
    }
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidArgument(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        self.push(Op::Conv2d { stride, pad }, &[x, w])
    }
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize, out_pad: usize) -> Result<NodeId> {
        self.push(Op::ConvT2d { stride, pad, out_pad }, &[x, w])
    }
    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        self.push(Op::LeakyRelu(slope), &[x])
    }
    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh, &[x])
    }
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Exp, &[x])
    }
    pub fn log1p(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Log1p, &[x])
    }
    /// `|x|` with subgradient 0 at 0.
    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Abs, &[x])
    }
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, &[x])
    }
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Mean, &[x])
    }
    /// Per-plane FFT over the last two axes (zero-padded to powers of two).
    pub fn fft2(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Fft2, &[x])
    }
    pub fn magnitude(&mut self, z: NodeId) -> Result<NodeId> {
        self.push(Op::Magnitude, &[z])
    }
    pub fn fftshift(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::FftShift, &[x])
    }
    /// Per-plane min-max normalization to `[0, 1]`; constant planes map to 0.
    pub fn min_max_norm(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::MinMaxNorm, &[x])
    }
    /// Clamp with a straight-through gradient.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.push(Op::Clamp { lo, hi }, &[x])
    }
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape(shape.to_vec()), &[x])
    }
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::ConcatCols, &[a, b])
    }
    pub fn slice_channel(&mut self, x: NodeId, c: usize) -> Result<NodeId> {
        self.push(Op::SliceChannel(c), &[x])
    }
    pub fn pad_replicate(&mut self, x: NodeId, p: usize) -> Result<NodeId> {
        self.push(Op::PadReplicate(p), &[x])
    }
    /// Identity forward, zero gradient.
    pub fn stop_grad(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::StopGrad, &[x])
    }
    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, &[x, x])
    }

    /// Gradients of the scalar `output` with respect to each node in `wrt`.
    pub fn backward(&self, output: NodeId, wrt: &[NodeId]) -> Result<Gradients> {
        self.check(output)?;
        for &w in wrt {
            self.check(w)?;
        }
        let out_val = match &self.nodes[output.0].value {
            Value::Real(t) if t.numel() == 1 => t,
            v => return Err(Error::InvalidArgument(format!("backward needs a scalar output, got shape {:?}", v.shape()))),
        };
        let mut needed = vec![false; output.0 + 1];
        needed[output.0] = true;
        for i in (0..=output.0).rev() {
            if needed[i] {
                for inp in &self.nodes[i].inputs {
                    needed[inp.0] = true;
                }
            }
        }
        let mut grads: Vec<Option<Value>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Value::Real(Tensor::full(out_val.shape(), 1.0)));
        for i in (0..=output.0).rev() {
            if !needed[i] || self.nodes[i].inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let contribs = self.backward_op(node, &g)?;
            for (inp, c) in node.inputs.iter().zip(contribs) {
                if let Some(c) = c {
                    accumulate(&mut grads[inp.0], c)?;
                }
            }
            // Keep the node's own gradient around for `wrt` lookups.
            grads[i] = Some(g);
        }
        let mut map = HashMap::new();
        for &w in wrt {
            let g = match grads.get(w.0).and_then(|g| g.clone()) {
                Some(Value::Real(t)) => t,
                Some(Value::Complex(_)) => return Err(Error::InvalidArgument("gradient requested for a complex node".into())),
                None => match &self.nodes[w.0].value {
                    Value::Real(t) => Tensor::zeros(t.shape()),
                    Value::Complex(_) => return Err(Error::InvalidArgument("gradient requested for a complex node".into())),
                },
            };
            map.insert(w, g);
        }
        Ok(Gradients { map })
    }

    fn backward_op(&self, node: &Node, g: &Value) -> Result<Vec<Option<Value>>> {
        let inv = |i: usize| &self.nodes[node.inputs[i].0].value;
        let rin = |i: usize| real(inv(i), "backward");
        let exec = self.exec;
        let out_real = || real(&node.value, "backward");
        let gr = || real(g, "backward");
        let some = |t: Tensor| Some(Value::Real(t));
        let res = match &node.op {
            Op::Leaf => vec![],
            Op::Add => vec![some(gr()?.clone()), some(gr()?.clone())],
            Op::Sub => vec![some(gr()?.clone()), some(gr()?.scale(-1.0))],
            Op::Mul => {
                let (a, b, g) = (rin(0)?, rin(1)?, gr()?);
                vec![some(g.mul(b)?), some(g.mul(a)?)]
            }
            Op::Div => {
                let (a, b, g) = (rin(0)?, rin(1)?, gr()?);
                let ga = g.div(b)?;
                let gb = Tensor::new(
                    b.shape().to_vec(),
                    g.data().iter().zip(a.data()).zip(b.data()).map(|((g, a), b)| -g * a / (b * b)).collect(),
                )?;
                vec![some(ga), some(gb)]
            }
            Op::Scale(s) => vec![some(gr()?.scale(*s))],
            Op::AddScalar(_) => vec![some(gr()?.clone())],
            Op::MatMul => {
                let (a, b, g) = (rin(0)?, rin(1)?, gr()?);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut ga = vec![0.0; m * k];
                crate::tensor::gemm_bt(exec, m, n, k, g.data(), b.data(), &mut ga);
                let mut gb = vec![0.0; k * n];
                crate::tensor::gemm_at(exec, m, k, n, a.data(), g.data(), &mut gb);
                vec![some(Tensor::new(vec![m, k], ga)?), some(Tensor::new(vec![k, n], gb)?)]
            }
            Op::AddBias => {
                let (b, g) = (rin(1)?, gr()?);
                let d = b.numel();
                let mut gb = vec![0.0; d];
                for (i, v) in g.data().iter().enumerate() {
                    gb[i % d] += v;
                }
                vec![some(g.clone()), some(Tensor::new(b.shape().to_vec(), gb)?)]
            }
            Op::ChannelBias => {
                let (x, b, g) = (rin(0)?, rin(1)?, gr()?);
                let (_, c, h, w) = nchw(x.shape(), "channel_bias")?;
                let mut gb = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    gb[(i / (h * w)) % c] += v;
                }
                vec![some(g.clone()), some(Tensor::new(b.shape().to_vec(), gb)?)]
            }
            Op::Conv2d { stride, pad } => {
                let (x, w, g) = (rin(0)?, rin(1)?, gr()?);
                let (n, c, h, wd) = nchw(x.shape(), "conv2d")?;
                let (o, _, k, _) = nchw(w.shape(), "conv2d")?;
                let geom = ConvGeom::new(c, h, wd, k, *stride, *pad).expect("validated on forward");
                let (dx, dw) = conv::conv_backward(exec, x.data(), n, w.data(), o, &geom, g.data());
                vec![some(Tensor::new(x.shape().to_vec(), dx)?), some(Tensor::new(w.shape().to_vec(), dw)?)]
            }
            Op::ConvT2d { stride, pad, out_pad } => {
                let (x, w, g) = (rin(0)?, rin(1)?, gr()?);
                let (n, cin, h, wd) = nchw(x.shape(), "conv_transpose2d")?;
                let (_, cout, k, _) = nchw(w.shape(), "conv_transpose2d")?;
                let geom = convt_geom(cout, h, wd, k, *stride, *pad, *out_pad)?;
                let (dx, dw) = conv::convt_backward(exec, x.data(), n, w.data(), cin, &geom, g.data());
                vec![some(Tensor::new(x.shape().to_vec(), dx)?), some(Tensor::new(w.shape().to_vec(), dw)?)]
            }
            Op::LeakyRelu(a) => {
                let d = rin(0)?.map(|x| if x > 0.0 { 1.0 } else { *a });
                vec![some(gr()?.mul(&d)?)]
            }
            Op::Tanh => {
                let d = out_real()?.map(|y| 1.0 - y * y);
                vec![some(gr()?.mul(&d)?)]
            }
            Op::Exp => vec![some(gr()?.mul(out_real()?)?)],
            Op::Log1p => {
                let d = rin(0)?.map(|x| 1.0 / (1.0 + x));
                vec![some(gr()?.mul(&d)?)]
            }
            Op::Abs => {
                let d = rin(0)?.map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                vec![some(gr()?.mul(&d)?)]
            }
            Op::Sum => {
                let x = rin(0)?;
                vec![some(Tensor::full(x.shape(), gr()?.item()))]
            }
            Op::Mean => {
                let x = rin(0)?;
                vec![some(Tensor::full(x.shape(), gr()?.item() / x.numel() as f64))]
            }
            Op::Fft2 => {
                let x = rin(0)?;
                let gc = match g {
                    Value::Complex(c) => c,
                    Value::Real(_) => unreachable!("fft2 output is complex"),
                };
                let (b, h, w) = last2(x.shape(), "fft2")?;
                let (hp, wp) = fft::padded_dims(h, w);
                let mut dx = Vec::with_capacity(x.numel());
                for i in 0..b {
                    let plane = CTensor::new(vec![hp, wp], gc.data()[i * hp * wp..(i + 1) * hp * wp].to_vec())?;
                    let adj = fft::fft2_adjoint(&plane)?;
                    for r in 0..h {
                        for c in 0..w {
                            dx.push(adj.data()[r * wp + c].re);
                        }
                    }
                }
                vec![some(Tensor::new(x.shape().to_vec(), dx)?)]
            }
            Op::Magnitude => {
                let z = match inv(0) {
                    Value::Complex(c) => c,
                    Value::Real(_) => unreachable!("validated on forward"),
                };
                let g = gr()?;
                let data = z
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(z, &g)| {
                        let m = z.norm();
                        if m > 0.0 {
                            z * (g / m)
                        } else {
                            Complex64::new(0.0, 0.0)
                        }
                    })
                    .collect();
                vec![Some(Value::Complex(CTensor::new(z.shape().to_vec(), data)?))]
            }
            Op::FftShift => {
                // Even-extent shifts are involutions, so the adjoint is the shift itself.
                let g = gr()?;
                let (b, h, w) = last2(g.shape(), "fftshift")?;
                let mut data = Vec::with_capacity(g.numel());
                for i in 0..b {
                    data.extend(fft::fftshift_slice(&g.data()[i * h * w..(i + 1) * h * w], h, w));
                }
                vec![some(Tensor::new(g.shape().to_vec(), data)?)]
            }
            Op::MinMaxNorm => {
                let (x, g) = (rin(0)?, gr()?);
                let (b, h, w) = last2(x.shape(), "min_max_norm")?;
                let n = h * w;
                let mut dx = vec![0.0; x.numel()];
                for i in 0..b {
                    let s = &x.data()[i * n..(i + 1) * n];
                    let gs = &g.data()[i * n..(i + 1) * n];
                    let (amin, lo) = argext(s, |a, b| a < b);
                    let (amax, hi) = argext(s, |a, b| a > b);
                    if hi <= lo {
                        continue;
                    }
                    let d = hi - lo;
                    let mut to_lo = 0.0;
                    let mut to_hi = 0.0;
                    let out = &mut dx[i * n..(i + 1) * n];
                    for j in 0..n {
                        out[j] = gs[j] / d;
                        to_lo += gs[j] * (s[j] - hi) / (d * d);
                        to_hi -= gs[j] * (s[j] - lo) / (d * d);
                    }
                    out[amin] += to_lo;
                    out[amax] += to_hi;
                }
                vec![some(Tensor::new(x.shape().to_vec(), dx)?)]
            }
            Op::Clamp { .. } => vec![some(gr()?.clone())],
            Op::Reshape(_) => {
                let x = rin(0)?;
                vec![some(gr()?.reshape(x.shape())?)]
            }
            Op::ConcatCols => {
                let (a, b, g) = (rin(0)?, rin(1)?, gr()?);
                let (n, p, q) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut ga = Vec::with_capacity(n * p);
                let mut gb = Vec::with_capacity(n * q);
                for i in 0..n {
                    let row = &g.data()[i * (p + q)..(i + 1) * (p + q)];
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                vec![some(Tensor::new(vec![n, p], ga)?), some(Tensor::new(vec![n, q], gb)?)]
            }
            Op::SliceChannel(ch) => {
                let (x, g) = (rin(0)?, gr()?);
                let (n, c, h, w) = nchw(x.shape(), "slice_channel")?;
                let mut dx = vec![0.0; x.numel()];
                for b in 0..n {
                    let off = (b * c + ch) * h * w;
                    dx[off..off + h * w].copy_from_slice(&g.data()[b * h * w..(b + 1) * h * w]);
                }
                vec![some(Tensor::new(x.shape().to_vec(), dx)?)]
            }
            Op::PadReplicate(p) => {
                let (x, g) = (rin(0)?, gr()?);
                let (b, h, w) = last2(x.shape(), "pad_replicate")?;
                let (ph, pw) = (h + 2 * p, w + 2 * p);
                let mut dx = vec![0.0; x.numel()];
                for i in 0..b {
                    let gs = &g.data()[i * ph * pw..(i + 1) * ph * pw];
                    let out = &mut dx[i * h * w..(i + 1) * h * w];
                    for rr in 0..ph {
                        let sr = (rr as isize - *p as isize).clamp(0, h as isize - 1) as usize;
                        for cc in 0..pw {
                            let sc = (cc as isize - *p as isize).clamp(0, w as isize - 1) as usize;
                            out[sr * w + sc] += gs[rr * pw + cc];
                        }
                    }
                }
                vec![some(Tensor::new(x.shape().to_vec(), dx)?)]
            }
            Op::StopGrad => vec![None],
        };
        Ok(res)
    }

    /// Re-evaluates the tape with some leaves replaced. Clamp nodes are
    /// evaluated as their straight-through surrogate
    /// `x - x_base + clamp(x_base)` so finite differences see the same
    /// derivative the backward pass uses.
    pub(crate) fn replay(&self, overrides: &[(NodeId, &Tensor)], upto: NodeId) -> Result<Vec<Value>> {
        let mut vals: Vec<Value> = Vec::with_capacity(upto.0 + 1);
        for (i, node) in self.nodes[..=upto.0].iter().enumerate() {
            let v = match &node.op {
                Op::Leaf => match overrides.iter().find(|(id, _)| id.0 == i) {
                    Some((_, t)) => Value::Real((*t).clone()),
                    None => node.value.clone(),
                },
                Op::Clamp { .. } => {
                    let x = real(&vals[node.inputs[0].0], "clamp")?;
                    let base_in = real(&self.nodes[node.inputs[0].0].value, "clamp")?;
                    let base_out = real(&node.value, "clamp")?;
                    let data = x.data().iter().zip(base_in.data()).zip(base_out.data()).map(|((x, xb), yb)| x - xb + yb).collect();
                    Value::Real(Tensor::new(x.shape().to_vec(), data)?)
                }
                op => {
                    let ins: Vec<&Value> = node.inputs.iter().map(|id| &vals[id.0]).collect();
                    forward_op(op, &ins, self.exec)?
                }
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Branch signature of every non-smooth node: sign patterns for
    /// abs/leaky-relu inputs and arg-extrema for min-max normalization.
    pub(crate) fn kink_signature(&self, vals: &[Value]) -> Vec<u64> {
        let mut sig = Vec::new();
        for node in &self.nodes[..vals.len()] {
            match node.op {
                Op::Abs | Op::LeakyRelu(_) => {
                    if let Value::Real(x) = &vals[node.inputs[0].0] {
                        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                        for &v in x.data() {
                            let s = if v > 0.0 {
                                1
                            } else if v < 0.0 {
                                2
                            } else {
                                3
                            };
                            h = (h ^ s).wrapping_mul(0x1000_0000_01b3);
                        }
                        sig.push(h);
                    }
                }
                Op::MinMaxNorm => {
                    if let Value::Real(x) = &vals[node.inputs[0].0] {
                        if let Ok((b, h, w)) = last2(x.shape(), "min_max_norm") {
                            for i in 0..b {
                                let s = &x.data()[i * h * w..(i + 1) * h * w];
                                sig.push(first_near(s, argext(s, |a, b| a < b).1));
                                sig.push(first_near(s, argext(s, |a, b| a > b).1));
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        sig
    }
}

// Ties up to rounding (conjugate-symmetric spectra) map to one index.
fn first_near(s: &[f64], e: f64) -> u64 {
    let tol = 1e-9 * e.abs().max(1.0);
    s.iter().position(|&v| (v - e).abs() <= tol).unwrap_or(0) as u64
}

fn argext(s: &[f64], better: impl Fn(f64, f64) -> bool) -> (usize, f64) {
    let mut best = (0, s[0]);
    for (i, &v) in s.iter().enumerate().skip(1) {
        if better(v, best.1) {
            best = (i, v);
        }
    }
    best
}

fn accumulate(slot: &mut Option<Value>, c: Value) -> Result<()> {
    match slot {
        None => *slot = Some(c),
        Some(Value::Real(a)) => match c {
            Value::Real(b) => a.axpy(1.0, &b)?,
            Value::Complex(_) => return Err(Error::InvalidArgument("mixed gradient kinds".into())),
        },
        Some(Value::Complex(a)) => match c {
            Value::Complex(b) => {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            Value::Real(_) => return Err(Error::InvalidArgument("mixed gradient kinds".into())),
        },
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.square(x).unwrap();
        let grads = g.backward(y, &[x]).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn rejects_non_scalar_and_unknown() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        let y = g.tanh(x).unwrap();
        assert!(g.backward(y, &[x]).is_err());
        let s = g.sum(y).unwrap();
        assert!(matches!(g.backward(s, &[NodeId(99)]), Err(Error::UnknownNode(99, _))));
    }

    #[test]
    fn backward_is_pure() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[3], |i| i as f64 - 1.0));
        let y = g.exp(x).unwrap();
        let s = g.sum(y).unwrap();
        let before = g.value(y).clone();
        let a = g.backward(s, &[x]).unwrap();
        let b = g.backward(s, &[x]).unwrap();
        assert_eq!(g.value(y), &before);
        assert_eq!(a.get(x), b.get(x));
    }

    #[test]
    fn abs_subgradient_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![-2.0, 0.0, 5.0]).unwrap());
        let a = g.abs(x).unwrap();
        let s = g.sum(a).unwrap();
        let gr = g.backward(s, &[x]).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn clamp_is_straight_through() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![10.0, 0.5]).unwrap());
        let c = g.clamp(x, 0.0, 1.0).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 0.5]);
        let s = g.sum(c).unwrap();
        let gr = g.backward(s, &[x]).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn stop_grad_blocks() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let c = g.stop_grad(x).unwrap();
        let y = g.mul(x, c).unwrap();
        let gr = g.backward(y, &[x]).unwrap();
        assert_eq!(gr.get(x).unwrap().item(), 2.0);
    }
}
