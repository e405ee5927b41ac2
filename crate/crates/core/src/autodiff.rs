//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Graph`]; node inputs always have
//! smaller indices than the node itself, so a reverse sweep over the tape is
//! a valid topological order for the chain rule.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation, with whatever the backward pass needs beyond the
/// input values.
#[derive(Clone, Debug)]
pub enum OpKind {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var },
    Relu(Var),
    SoftmaxChannel(Var),
    Log(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    ScalarMul(Var, f32),
    ConcatChannel(Vec<Var>),
    MaxPool2x2 { input: Var, argmax: Vec<u32> },
    UpsampleNearest2x(Var),
    Dropout { input: Var, scale: Vec<f32> },
    ReduceMean(Var),
    ReduceSum(Var),
    Clamp { input: Var, lo: f32, hi: f32 },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Relu(_) => "relu",
            OpKind::SoftmaxChannel(_) => "softmax_over_channel",
            OpKind::Log(_) => "log",
            OpKind::Add(..) => "add",
            OpKind::Sub(..) => "sub",
            OpKind::Mul(..) => "mul",
            OpKind::Div(..) => "div",
            OpKind::ScalarMul(..) => "scalar_mul",
            OpKind::ConcatChannel(_) => "concat_channel",
            OpKind::MaxPool2x2 { .. } => "maxpool2x2",
            OpKind::UpsampleNearest2x(_) => "upsample_nearest2x",
            OpKind::Dropout { .. } => "dropout",
            OpKind::ReduceMean(_) => "reduce_mean",
            OpKind::ReduceSum(_) => "reduce_sum",
            OpKind::Clamp { .. } => "clamp",
        }
    }
}

struct Node {
    value: Tensor,
    op: OpKind,
    requires_grad: bool,
}

/// Operation tape. Confined to one thread; build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
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

    pub fn op(&self, v: Var) -> &OpKind {
        &self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, OpKind::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor, op: OpKind, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: OpKind, inputs: &[Var]) -> Result<Var> {
        if !value.data().iter().fold(true, |ok, v| ok & v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn spatial(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize, usize)> {
        let t = self.value(v);
        t.nchw().ok_or_else(|| Error::shape(op, format!("expected (C,H,W) or (N,C,H,W), got {:?}", t.shape())))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Stride-1 convolution with zero padding that preserves `H, W`.
    /// `weight` is `(C_out, C_in, k, k)` with odd `k`, `bias` is `(C_out)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, ci, h, w) = self.spatial("conv2d", input)?;
        let ws = self.value(weight).shape().to_vec();
        let [co, wci, k, k2] = ws[..] else {
            return Err(Error::shape("conv2d", format!("weight must be rank 4, got {ws:?}")));
        };
        if wci != ci || k != k2 || k % 2 == 0 {
            return Err(Error::shape("conv2d", format!("input {ci} channels, weight {ws:?}")));
        }
        if self.value(bias).shape() != [co] {
            return Err(Error::shape("conv2d", format!("bias {:?}", self.value(bias).shape())));
        }
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let b = self.value(bias).data();
        let hw = h * w;
        let kk = ci * k * k;
        let mut out = vec![0.0f32; n * co * hw];
        let mut scratch = take_scratch(if k == 1 { 0 } else { kk * hw });
        let cols = &mut scratch[..];
        for img in 0..n {
            let xs = &x[img * ci * hw..(img + 1) * ci * hw];
            let os = &mut out[img * co * hw..(img + 1) * co * hw];
            for (o, plane) in os.chunks_mut(hw).enumerate() {
                plane.fill(b[o]);
            }
            let src: &[f32] = if k == 1 {
                xs
            } else {
                im2col(xs, ci, h, w, k, cols);
                cols
            };
            gemm(co, kk, hw, wt, (kk, 1), src, (hw, 1), os, 1.0);
        }
        return_scratch(scratch);
        let mut shape = self.value(input).shape().to_vec();
        let r = shape.len();
        shape[r - 3] = co;
        let value = Tensor::new(shape, out)?;
        self.record(value, OpKind::Conv2d { input, weight, bias }, &[input, weight, bias])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v.max(0.0)).collect())?;
        self.record(value, OpKind::Relu(x), &[x])
    }

    /// Softmax across the channel axis at every spatial position.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.spatial("softmax_over_channel", x)?;
        let t = self.value(x);
        let hw = h * w;
        let src = t.data();
        let mut out = vec![0.0f32; src.len()];
        for img in 0..n {
            let base = img * c * hw;
            for p in 0..hw {
                let mut m = f32::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(src[base + ch * hw + p]);
                }
                let mut z = 0.0f32;
                for ch in 0..c {
                    let e = (src[base + ch * hw + p] - m).exp();
                    out[base + ch * hw + p] = e;
                    z += e;
                }
                for ch in 0..c {
                    out[base + ch * hw + p] /= z;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.record(value, OpKind::SoftmaxChannel(x), &[x])
    }

    /// Natural log. Every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = t.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::LogDomain { value: bad });
        }
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.ln()).collect())?;
        self.record(value, OpKind::Log(x), &[x])
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("add", a, b, |x, y| x + y)?;
        self.record(value, OpKind::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("sub", a, b, |x, y| x - y)?;
        self.record(value, OpKind::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("mul", a, b, |x, y| x * y)?;
        self.record(value, OpKind::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("div", a, b, |x, y| x / y)?;
        self.record(value, OpKind::Div(a, b), &[a, b])
    }

    pub fn scalar_mul(&mut self, x: Var, s: f32) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect())?;
        self.record(value, OpKind::ScalarMul(x, s), &[x])
    }

    /// Concatenates along the channel axis; all other dims must agree.
    pub fn concat_channel(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_channel", "no inputs"));
        }
        let (n, _, h, w) = self.spatial("concat_channel", parts[0])?;
        let rank = self.value(parts[0]).rank();
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.spatial("concat_channel", p)?;
            if (pn, ph, pw) != (n, h, w) || self.value(p).rank() != rank {
                return Err(Error::shape("concat_channel", format!("{:?}", self.value(p).shape())));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for img in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.nchw().unwrap().1;
                out.extend_from_slice(&t.data()[img * pc * hw..(img + 1) * pc * hw]);
            }
        }
        let mut shape = self.value(parts[0]).shape().to_vec();
        shape[rank - 3] = total_c;
        let value = Tensor::new(shape, out)?;
        self.record(value, OpKind::ConcatChannel(parts.to_vec()), parts)
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.spatial("maxpool2x2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2x2", format!("odd spatial dims {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xx + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let mut shape = self.value(x).shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let value = Tensor::new(shape, out)?;
        self.record(value, OpKind::MaxPool2x2 { input: x, argmax }, &[x])
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.spatial("upsample_nearest2x", x)?;
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                let row = &s[(y / 2) * w..(y / 2 + 1) * w];
                for (xx, v) in d[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                    *v = row[xx / 2];
                }
            }
        }
        let mut shape = self.value(x).shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let value = Tensor::new(shape, out)?;
        self.record(value, OpKind::UpsampleNearest2x(x), &[x])
    }

    /// Inverted dropout: each element is zeroed with probability `p` and the
    /// survivors are scaled by `1/(1-p)`. Draws one uniform per element from
    /// `stream`, in row-major order.
    pub fn dropout(&mut self, x: Var, p: f32, stream: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout p={p} outside [0,1)")));
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let scale: Vec<f32> = (0..t.len()).map(|_| if stream.uniform() < p { 0.0 } else { keep }).collect();
        let data = t.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.record(value, OpKind::Dropout { input: x, scale }, &[x])
    }

    pub fn reduce_sum(&mut self, x: Var) -> Result<Var> {
        let s: f32 = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(s), OpKind::ReduceSum(x), &[x])
    }

    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: f32 = t.data().iter().sum::<f32>() / t.len() as f32;
        self.record(Tensor::scalar(s), OpKind::ReduceMean(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.clamp(lo, hi)).collect())?;
        self.record(value, OpKind::Clamp { input: x, lo, hi }, &[x])
    }

    /// Reverse sweep from the scalar `loss`. Afterwards every leaf that
    /// requires grad has a gradient (zeros if `loss` does not depend on it).
    /// A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph("graph already consumed by backward".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!("loss must be scalar, got shape {:?}", self.value(loss).shape())));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, OpKind::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
        }
        self.grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if matches!(node.op, OpKind::Leaf) && node.requires_grad {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                    Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            OpKind::Leaf => {}
            OpKind::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |d| {
                    for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            OpKind::SoftmaxChannel(x) => {
                let (n, c, h, w) = self.value(*x).nchw().unwrap();
                let y = node.value.data();
                let hw = h * w;
                acc(*x, &mut |d| {
                    for img in 0..n {
                        let base = img * c * hw;
                        for p in 0..hw {
                            let mut dot = 0.0f32;
                            for ch in 0..c {
                                let k = base + ch * hw + p;
                                dot += g[k] * y[k];
                            }
                            for ch in 0..c {
                                let k = base + ch * hw + p;
                                d[k] += y[k] * (g[k] - dot);
                            }
                        }
                    }
                });
            }
            OpKind::Log(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |d| {
                    for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                        *d += gi / xi;
                    }
                });
            }
            OpKind::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
            }
            OpKind::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi));
            }
            OpKind::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for ((d, gi), bi) in d.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, gi), ai) in d.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                });
            }
            OpKind::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for ((d, gi), bi) in d.iter_mut().zip(g).zip(bv) {
                        *d += gi / bi;
                    }
                });
                acc(*b, &mut |d| {
                    for (((d, gi), ai), bi) in d.iter_mut().zip(g).zip(av).zip(bv) {
                        *d -= gi * ai / (bi * bi);
                    }
                });
            }
            OpKind::ScalarMul(x, s) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * s));
            }
            OpKind::ConcatChannel(parts) => {
                let (n, total_c, h, w) = node.value.nchw().unwrap();
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).nchw().unwrap().1;
                    acc(p, &mut |d| {
                        for img in 0..n {
                            let src = &g[(img * total_c + offset) * hw..(img * total_c + offset + pc) * hw];
                            let dst = &mut d[img * pc * hw..(img + 1) * pc * hw];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    });
                    offset += pc;
                }
            }
            OpKind::MaxPool2x2 { input, argmax } => {
                acc(*input, &mut |d| {
                    for (&src, gi) in argmax.iter().zip(g) {
                        d[src as usize] += gi;
                    }
                });
            }
            OpKind::UpsampleNearest2x(x) => {
                let (n, c, h, w) = self.value(*x).nchw().unwrap();
                let ow = 2 * w;
                acc(*x, &mut |d| {
                    for plane in 0..n * c {
                        let gs = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        let ds = &mut d[plane * h * w..(plane + 1) * h * w];
                        for (y, grow) in gs.chunks(ow).enumerate() {
                            let drow = &mut ds[(y / 2) * w..(y / 2 + 1) * w];
                            for (xx, gi) in grow.iter().enumerate() {
                                drow[xx / 2] += gi;
                            }
                        }
                    }
                });
            }
            OpKind::Dropout { input, scale } => {
                acc(*input, &mut |d| {
                    for ((d, gi), s) in d.iter_mut().zip(g).zip(scale) {
                        *d += gi * s;
                    }
                });
            }
            OpKind::ReduceSum(x) => {
                let gi = g[0];
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += gi));
            }
            OpKind::ReduceMean(x) => {
                let gi = g[0] / self.value(*x).len() as f32;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += gi));
            }
            OpKind::Clamp { input, lo, hi } => {
                let xv = self.value(*input).data();
                acc(*input, &mut |d| {
                    for ((d, gi), xi) in d.iter_mut().zip(g).zip(xv) {
                        if xi >= lo && xi <= hi {
                            *d += gi;
                        }
                    }
                });
            }
            OpKind::Conv2d { input, weight, bias } => {
                self.conv2d_backward(*input, *weight, *bias, g, grads);
            }
        }
        Ok(())
    }

    fn conv2d_backward(&self, input: Var, weight: Var, bias: Var, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let (n, ci, h, w) = self.value(input).nchw().unwrap();
        let ws = self.value(weight).shape();
        let (co, k) = (ws[0], ws[2]);
        let hw = h * w;
        let kk = ci * k * k;
        let x = self.value(input).data();
        let wt = self.value(weight).data();

        let slot = |v: Var, grads: &mut [Option<Vec<f32>>]| -> Option<Vec<f32>> {
            if self.nodes[v.0].requires_grad {
                Some(grads[v.0].take().unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]))
            } else {
                None
            }
        };
        let mut gb = slot(bias, grads);
        let mut gw = slot(weight, grads);
        let mut gx = slot(input, grads);

        let mut scratch = take_scratch(if k == 1 { 0 } else { kk * hw });
        let cols = &mut scratch[..];
        for img in 0..n {
            let go = &g[img * co * hw..(img + 1) * co * hw];
            if let Some(gb) = gb.as_mut() {
                for (o, plane) in go.chunks(hw).enumerate() {
                    gb[o] += plane.iter().sum::<f32>();
                }
            }
            let xs = &x[img * ci * hw..(img + 1) * ci * hw];
            if let Some(gw) = gw.as_mut() {
                let src: &[f32] = if k == 1 {
                    xs
                } else {
                    im2col(xs, ci, h, w, k, cols);
                    cols
                };
                // dW (co x kk) += dOut (co x hw) * cols^T (hw x kk)
                gemm(co, hw, kk, go, (hw, 1), src, (1, hw), gw, 1.0);
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx[img * ci * hw..(img + 1) * ci * hw];
                if k == 1 {
                    // dX (ci x hw) += W^T (ci x co) * dOut (co x hw)
                    gemm(ci, co, hw, wt, (1, kk), go, (hw, 1), dst, 1.0);
                } else {
                    gemm(kk, co, hw, wt, (1, kk), go, (hw, 1), cols, 0.0);
                    col2im_add(cols, ci, h, w, k, dst);
                }
            }
        }
        return_scratch(scratch);
        if let Some(v) = gb {
            grads[bias.0] = Some(v);
        }
        if let Some(v) = gw {
            grads[weight.0] = Some(v);
        }
        if let Some(v) = gx {
            grads[input.0] = Some(v);
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f32>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Per-thread patch-matrix buffer, reused across conv calls to avoid
/// page-faulting a fresh allocation each time. Contents are unspecified.
fn take_scratch(len: usize) -> Vec<f32> {
    let mut v = SCRATCH.with(|s| std::mem::take(&mut *s.borrow_mut()));
    if v.len() < len {
        v.resize(len, 0.0);
    }
    v.truncate(len);
    v
}

fn return_scratch(v: Vec<f32>) {
    SCRATCH.with(|s| {
        let mut slot = s.borrow_mut();
        if v.capacity() > slot.capacity() {
            *slot = v;
        }
    });
}

/// `c = a * b + beta * c` for row-major `c` of size `m x n`; `a` is `m x k`
/// and `b` is `k x n`, each given with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds a `(C,H,W)` image into a `(C*k*k, H*W)` patch matrix for a
/// same-padded stride-1 `k x k` convolution.
fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, cols: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    drow[..x_lo].fill(0.0);
                    drow[x_hi..].fill(0.0);
                    let s0 = (x_lo as isize + dx) as usize;
                    drow[x_lo..x_hi].copy_from_slice(&srow[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f32], c: usize, h: usize, w: usize, k: usize, x: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x_lo as isize + dx) as usize;
                    let prow = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                    let crow = &src[y * w + x_lo..y * w + x_hi];
                    prow.iter_mut().zip(crow).for_each(|(p, c)| *p += c);
                }
            }
        }
    }
}

/// Plain SGD: `w <- w - lr * grad`.
pub fn sgd_update(weights: &mut [f32], grad: &[f32], lr: f32) -> Result<()> {
    if weights.len() != grad.len() {
        return Err(Error::shape("sgd_step", format!("{} weights, {} grads", weights.len(), grad.len())));
    }
    for (w, g) in weights.iter_mut().zip(grad) {
        *w -= lr * g;
    }
    Ok(())
}
