//! Reverse-mode automatic differentiation over a flat tape of f64 tensors.
//!
//! Backward rules are themselves expressed as tape operations, so gradients
//! stay differentiable: calling [`Tape::grad`] on a value produced by an
//! earlier `grad` yields exact second-order derivatives. That is what the
//! discriminator's gradient penalty needs.
//!
//! The op set is deliberately small: elementwise arithmetic, a few
//! broadcast/reduce shapes, dense linear maps, strided (de)convolutions
//! and the Sobel stencils. Shape errors are programming errors and panic.

use ndarray::{ArrayD, IxDyn};
use rayon::prelude::*;

use crate::sobel::{sobel_x_adjoint_raw, sobel_x_raw, sobel_y_adjoint_raw, sobel_y_raw};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    Abs(Var),
    Reciprocal(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
    BroadcastScalar(Var),
    BroadcastPerSample(Var),
    ChannelSum(Var),
    ChannelMean(Var),
    BroadcastChannel(Var),
    Reshape(Var),
    SliceChannel(Var, usize),
    PadChannel(Var, usize),
    /// y[b,o] = sum_m x[b,m] w[o,m]
    Linear(Var, Var),
    /// y[b,m] = sum_o g[b,o] w[o,m] (input-gradient of Linear)
    LinearGradX(Var, Var),
    /// y[o,m] = sum_b g[b,o] x[b,m] (weight-gradient of Linear; args (x, g))
    LinearGradW(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    /// gw[cg,cx,ky,kx] = sum_{b,oh,ow} g[b,cg,oh,ow] x[b,cx,oh*s-p+ky,ow*s-p+kx]
    ConvKernelGrad {
        img: Var,
        gout: Var,
        stride: usize,
        pad: usize,
    },
    SobelX(Var, f64),
    SobelXAdj(Var, f64),
    SobelY(Var, f64),
    SobelYAdj(Var, f64),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on non-scalar var");
        *val.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "mul shape mismatch"
        );
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let rg = self.rg(a);
        self.push(v, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| c * x);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        let rg = self.rg(a);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        let rg = self.rg(a);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn reciprocal(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        let rg = self.rg(a);
        self.push(v, Op::Reciprocal(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.nodes[a.0]
            .value
            .mapv(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let v = ArrayD::from_elem(IxDyn(&[]), x.sum() / x.len() as f64);
        let rg = self.rg(a);
        self.push(v, Op::Mean(a), rg)
    }

    /// `[B, ...] -> [B]`, summing all trailing axes.
    pub fn sum_per_sample(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let b = x.shape()[0];
        let inner: usize = x.len() / b.max(1);
        let flat = x.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(b);
        for s in 0..b {
            out.push(flat[s * inner..(s + 1) * inner].iter().sum());
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[b]), out).unwrap();
        let rg = self.rg(a);
        self.push(v, Op::SumPerSample(a), rg)
    }

    fn broadcast_scalar(&mut self, a: Var, shape: &[usize]) -> Var {
        let s = self.scalar(a);
        let v = ArrayD::from_elem(IxDyn(shape), s);
        let rg = self.rg(a);
        self.push(v, Op::BroadcastScalar(a), rg)
    }

    fn broadcast_per_sample(&mut self, a: Var, shape: &[usize]) -> Var {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.ndim(), 1);
        assert_eq!(x.shape()[0], shape[0]);
        let b = shape[0];
        let inner: usize = shape.iter().skip(1).product();
        let src = x.as_slice().unwrap();
        let mut out = Vec::with_capacity(b * inner);
        for s in 0..b {
            out.extend(std::iter::repeat(src[s]).take(inner));
        }
        let v = ArrayD::from_shape_vec(IxDyn(shape), out).unwrap();
        let rg = self.rg(a);
        self.push(v, Op::BroadcastPerSample(a), rg)
    }

    /// `[B,C,H,W] -> [C]`.
    pub fn channel_sum(&mut self, a: Var) -> Var {
        let v = channel_sum_raw(&self.nodes[a.0].value);
        let rg = self.rg(a);
        self.push(v, Op::ChannelSum(a), rg)
    }

    pub fn channel_mean(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let c = x.shape()[1];
        let count = (x.len() / c.max(1)) as f64;
        let v = channel_sum_raw(x).mapv(|s| s / count);
        let rg = self.rg(a);
        self.push(v, Op::ChannelMean(a), rg)
    }

    /// `[C] -> [B,C,H,W]`.
    pub fn broadcast_channel(&mut self, a: Var, shape: &[usize]) -> Var {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.ndim(), 1);
        assert_eq!(x.shape()[0], shape[1], "channel count mismatch");
        let src = x.as_slice().unwrap().to_vec();
        let (b, c) = (shape[0], shape[1]);
        let hw: usize = shape[2..].iter().product();
        let mut out = Vec::with_capacity(b * c * hw);
        for _ in 0..b {
            for &cv in src.iter().take(c) {
                out.extend(std::iter::repeat(cv).take(hw));
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(shape), out).unwrap();
        let rg = self.rg(a);
        self.push(v, Op::BroadcastChannel(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape size mismatch");
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    /// `[B,C,H,W] -> [B,1,H,W]` picking channel `c`.
    pub fn slice_channel(&mut self, a: Var, c: usize) -> Var {
        let x = &self.nodes[a.0].value;
        let v = x
            .index_axis(ndarray::Axis(1), c)
            .to_owned()
            .insert_axis(ndarray::Axis(1))
            .into_dyn();
        let rg = self.rg(a);
        self.push(v, Op::SliceChannel(a, c), rg)
    }

    /// `[B,1,H,W] -> [B,C,H,W]`, placing the input at channel `c`, zero elsewhere.
    pub fn pad_channel(&mut self, a: Var, c: usize, channels: usize) -> Var {
        let x = &self.nodes[a.0].value;
        let (b, one, h, w) = as4(x.shape());
        assert_eq!(one, 1);
        let mut out = ArrayD::zeros(IxDyn(&[b, channels, h, w]));
        out.index_axis_mut(ndarray::Axis(1), c)
            .assign(&x.index_axis(ndarray::Axis(1), 0));
        let rg = self.rg(a);
        self.push(out, Op::PadChannel(a, c), rg)
    }

    /// Dense map y[b,o] = sum_m x[b,m] w[o,m].
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let v = linear_raw(&self.nodes[x.0].value, &self.nodes[w.0].value);
        let rg = self.rg(x) || self.rg(w);
        self.push(v, Op::Linear(x, w), rg)
    }

    fn linear_grad_x(&mut self, g: Var, w: Var) -> Var {
        let v = linear_grad_x_raw(&self.nodes[g.0].value, &self.nodes[w.0].value);
        let rg = self.rg(g) || self.rg(w);
        self.push(v, Op::LinearGradX(g, w), rg)
    }

    fn linear_grad_w(&mut self, x: Var, g: Var) -> Var {
        let v = linear_grad_w_raw(&self.nodes[x.0].value, &self.nodes[g.0].value);
        let rg = self.rg(x) || self.rg(g);
        self.push(v, Op::LinearGradW(x, g), rg)
    }

    /// Cross-correlation with weights `[Co,Ci,kh,kw]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let v = conv2d_raw(&self.nodes[x.0].value, &self.nodes[w.0].value, stride, pad);
        let rg = self.rg(x) || self.rg(w);
        self.push(v, Op::Conv2d { x, w, stride, pad }, rg)
    }

    /// Transposed convolution with weights `[Ci,Co,kh,kw]` (adjoint of conv2d).
    pub fn conv_t2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let v = conv_t2d_raw(&self.nodes[x.0].value, &self.nodes[w.0].value, stride, pad);
        let rg = self.rg(x) || self.rg(w);
        self.push(v, Op::ConvT2d { x, w, stride, pad }, rg)
    }

    fn conv_kernel_grad(
        &mut self,
        img: Var,
        gout: Var,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Var {
        let v = conv_kernel_grad_raw(
            &self.nodes[img.0].value,
            &self.nodes[gout.0].value,
            kh,
            kw,
            stride,
            pad,
        );
        let rg = self.rg(img) || self.rg(gout);
        self.push(
            v,
            Op::ConvKernelGrad {
                img,
                gout,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Sobel estimate of the +x derivative, per sample and channel, with
    /// replicate padding; the 1/(8 dx) scale is baked in.
    pub fn sobel_x(&mut self, a: Var, dx: f64) -> Var {
        let v = apply_slabs(&self.nodes[a.0].value, |f, out, h, w| {
            sobel_x_raw(f, h, w, dx, out)
        });
        let rg = self.rg(a);
        self.push(v, Op::SobelX(a, dx), rg)
    }

    pub fn sobel_y(&mut self, a: Var, dy: f64) -> Var {
        let v = apply_slabs(&self.nodes[a.0].value, |f, out, h, w| {
            sobel_y_raw(f, h, w, dy, out)
        });
        let rg = self.rg(a);
        self.push(v, Op::SobelY(a, dy), rg)
    }

    fn sobel_x_adj(&mut self, a: Var, dx: f64) -> Var {
        let v = apply_slabs(&self.nodes[a.0].value, |f, out, h, w| {
            sobel_x_adjoint_raw(f, h, w, dx, out)
        });
        let rg = self.rg(a);
        self.push(v, Op::SobelXAdj(a, dx), rg)
    }

    fn sobel_y_adj(&mut self, a: Var, dy: f64) -> Var {
        let v = apply_slabs(&self.nodes[a.0].value, |f, out, h, w| {
            sobel_y_adjoint_raw(f, h, w, dy, out)
        });
        let rg = self.rg(a);
        self.push(v, Op::SobelYAdj(a, dy), rg)
    }

    /// Reverse sweep from a scalar `output`; returns one adjoint per `wrt`
    /// entry (`None` when the output does not depend on it). Adjoints are
    /// ordinary tape variables, so they can be differentiated again.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Option<Var>> {
        assert_eq!(
            self.nodes[output.0].value.len(),
            1,
            "grad needs a scalar output"
        );
        let n = output.0 + 1;
        // mark nodes the output depends on through grad-requiring paths
        let mut needed = vec![false; n];
        let mut stack = vec![output.0];
        needed[output.0] = true;
        while let Some(id) = stack.pop() {
            for p in parents(&self.nodes[id].op) {
                if self.nodes[p.0].requires_grad && !needed[p.0] {
                    needed[p.0] = true;
                    stack.push(p.0);
                }
            }
        }
        let mut adj: Vec<Option<Var>> = vec![None; n];
        let ones = ArrayD::from_elem(self.nodes[output.0].value.raw_dim(), 1.0);
        adj[output.0] = Some(self.constant(ones));
        for id in (0..n).rev() {
            if !needed[id] {
                continue;
            }
            let Some(g) = adj[id] else { continue };
            let op = self.nodes[id].op.clone();
            let me = Var(id);
            match op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    self.accum(&mut adj, &needed, a, g);
                    self.accum(&mut adj, &needed, b, g);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut adj, &needed, a, g);
                    if self.want(&needed, b) {
                        let nb = self.neg(g);
                        self.accum(&mut adj, &needed, b, nb);
                    }
                }
                Op::Mul(a, b) => {
                    if self.want(&needed, a) {
                        let c = self.mul(g, b);
                        self.accum(&mut adj, &needed, a, c);
                    }
                    if self.want(&needed, b) {
                        let c = self.mul(g, a);
                        self.accum(&mut adj, &needed, b, c);
                    }
                }
                Op::Neg(a) => {
                    if self.want(&needed, a) {
                        let c = self.neg(g);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::Scale(a, s) => {
                    if self.want(&needed, a) {
                        let c = self.scale(g, s);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::AddScalar(a) => self.accum(&mut adj, &needed, a, g),
                Op::Exp(a) => {
                    if self.want(&needed, a) {
                        let c = self.mul(g, me);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::Sqrt(a) => {
                    if self.want(&needed, a) {
                        let two = self.scale(me, 2.0);
                        let inv = self.reciprocal(two);
                        let c = self.mul(g, inv);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::Square(a) => {
                    if self.want(&needed, a) {
                        let ax = self.scale(a, 2.0);
                        let c = self.mul(g, ax);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::Abs(a) => {
                    if self.want(&needed, a) {
                        let sign = self.nodes[a.0].value.mapv(|x| {
                            if x > 0.0 {
                                1.0
                            } else if x < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        });
                        let s = self.constant(sign);
                        let c = self.mul(g, s);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::Reciprocal(a) => {
                    if self.want(&needed, a) {
                        let y2 = self.square(me);
                        let m = self.mul(g, y2);
                        let c = self.neg(m);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    if self.want(&needed, a) {
                        let mask = self.nodes[a.0]
                            .value
                            .mapv(|x| if x > 0.0 { 1.0 } else { slope });
                        let m = self.constant(mask);
                        let c = self.mul(g, m);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::Sum(a) => {
                    if self.want(&needed, a) {
                        let shape: Vec<usize> = self.nodes[a.0].value.shape().to_vec();
                        let c = self.broadcast_scalar(g, &shape);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::Mean(a) => {
                    if self.want(&needed, a) {
                        let shape: Vec<usize> = self.nodes[a.0].value.shape().to_vec();
                        let len: usize = shape.iter().product::<usize>().max(1);
                        let b = self.broadcast_scalar(g, &shape);
                        let c = self.scale(b, 1.0 / len as f64);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::SumPerSample(a) => {
                    if self.want(&needed, a) {
                        let shape: Vec<usize> = self.nodes[a.0].value.shape().to_vec();
                        let c = self.broadcast_per_sample(g, &shape);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::BroadcastScalar(a) => {
                    if self.want(&needed, a) {
                        let c = self.sum(g);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::BroadcastPerSample(a) => {
                    if self.want(&needed, a) {
                        let c = self.sum_per_sample(g);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::ChannelSum(a) => {
                    if self.want(&needed, a) {
                        let shape: Vec<usize> = self.nodes[a.0].value.shape().to_vec();
                        let c = self.broadcast_channel(g, &shape);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::ChannelMean(a) => {
                    if self.want(&needed, a) {
                        let shape: Vec<usize> = self.nodes[a.0].value.shape().to_vec();
                        let count = (shape[0] * shape[2] * shape[3]) as f64;
                        let b = self.broadcast_channel(g, &shape);
                        let c = self.scale(b, 1.0 / count);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::BroadcastChannel(a) => {
                    if self.want(&needed, a) {
                        let c = self.channel_sum(g);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::Reshape(a) => {
                    if self.want(&needed, a) {
                        let shape: Vec<usize> = self.nodes[a.0].value.shape().to_vec();
                        let c = self.reshape(g, &shape);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::SliceChannel(a, ch) => {
                    if self.want(&needed, a) {
                        let channels = self.nodes[a.0].value.shape()[1];
                        let c = self.pad_channel(g, ch, channels);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::PadChannel(a, ch) => {
                    if self.want(&needed, a) {
                        let c = self.slice_channel(g, ch);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::Linear(x, w) => {
                    if self.want(&needed, x) {
                        let c = self.linear_grad_x(g, w);
                        self.accum(&mut adj, &needed, x, c);
                    }
                    if self.want(&needed, w) {
                        let c = self.linear_grad_w(x, g);
                        self.accum(&mut adj, &needed, w, c);
                    }
                }
                Op::LinearGradX(gy, w) => {
                    // y[b,m] = sum_o gy[b,o] w[o,m]
                    if self.want(&needed, gy) {
                        let c = self.linear(g, w);
                        self.accum(&mut adj, &needed, gy, c);
                    }
                    if self.want(&needed, w) {
                        let c = self.linear_grad_w(g, gy);
                        self.accum(&mut adj, &needed, w, c);
                    }
                }
                Op::LinearGradW(x, gy) => {
                    // y[o,m] = sum_b gy[b,o] x[b,m]
                    if self.want(&needed, x) {
                        let c = self.linear_grad_x(gy, g);
                        self.accum(&mut adj, &needed, x, c);
                    }
                    if self.want(&needed, gy) {
                        let c = self.linear(x, g);
                        self.accum(&mut adj, &needed, gy, c);
                    }
                }
                Op::Conv2d { x, w, stride, pad } => {
                    if self.want(&needed, x) {
                        let c = self.conv_t2d(g, w, stride, pad);
                        self.accum(&mut adj, &needed, x, c);
                    }
                    if self.want(&needed, w) {
                        let (kh, kw) = kernel_hw(&self.nodes[w.0].value);
                        let c = self.conv_kernel_grad(x, g, kh, kw, stride, pad);
                        self.accum(&mut adj, &needed, w, c);
                    }
                }
                Op::ConvT2d { x, w, stride, pad } => {
                    if self.want(&needed, x) {
                        let c = self.conv2d(g, w, stride, pad);
                        self.accum(&mut adj, &needed, x, c);
                    }
                    if self.want(&needed, w) {
                        // image and output-grad roles swap for the transposed map
                        let (kh, kw) = kernel_hw(&self.nodes[w.0].value);
                        let c = self.conv_kernel_grad(g, x, kh, kw, stride, pad);
                        self.accum(&mut adj, &needed, w, c);
                    }
                }
                Op::ConvKernelGrad {
                    img,
                    gout,
                    stride,
                    pad,
                    ..
                } => {
                    if self.want(&needed, img) {
                        let c = self.conv_t2d(gout, g, stride, pad);
                        self.accum(&mut adj, &needed, img, c);
                    }
                    if self.want(&needed, gout) {
                        let c = self.conv2d(img, g, stride, pad);
                        self.accum(&mut adj, &needed, gout, c);
                    }
                }
                Op::SobelX(a, d) => {
                    if self.want(&needed, a) {
                        let c = self.sobel_x_adj(g, d);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::SobelXAdj(a, d) => {
                    if self.want(&needed, a) {
                        let c = self.sobel_x(g, d);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::SobelY(a, d) => {
                    if self.want(&needed, a) {
                        let c = self.sobel_y_adj(g, d);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
                Op::SobelYAdj(a, d) => {
                    if self.want(&needed, a) {
                        let c = self.sobel_y(g, d);
                        self.accum(&mut adj, &needed, a, c);
                    }
                }
            }
        }
        wrt.iter()
            .map(|v| {
                assert!(v.0 < n, "wrt var created after the output");
                adj[v.0]
            })
            .collect()
    }

    fn want(&self, needed: &[bool], p: Var) -> bool {
        p.0 < needed.len() && needed[p.0] && self.nodes[p.0].requires_grad
    }

    fn accum(&mut self, adj: &mut [Option<Var>], needed: &[bool], p: Var, contrib: Var) {
        if !self.want(needed, p) {
            return;
        }
        adj[p.0] = Some(match adj[p.0] {
            Some(prev) => self.add(prev, contrib),
            None => contrib,
        });
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Exp(a)
        | Op::Sqrt(a)
        | Op::Square(a)
        | Op::Abs(a)
        | Op::Reciprocal(a)
        | Op::LeakyRelu(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumPerSample(a)
        | Op::BroadcastScalar(a)
        | Op::BroadcastPerSample(a)
        | Op::ChannelSum(a)
        | Op::ChannelMean(a)
        | Op::BroadcastChannel(a)
        | Op::Reshape(a)
        | Op::SliceChannel(a, _)
        | Op::PadChannel(a, _)
        | Op::SobelX(a, _)
        | Op::SobelXAdj(a, _)
        | Op::SobelY(a, _)
        | Op::SobelYAdj(a, _) => vec![*a],
        Op::Linear(a, b) | Op::LinearGradX(a, b) | Op::LinearGradW(a, b) => vec![*a, *b],
        Op::Conv2d { x, w, .. } | Op::ConvT2d { x, w, .. } => vec![*x, *w],
        Op::ConvKernelGrad { img, gout, .. } => vec![*img, *gout],
    }
}

fn as4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected a 4-d tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

fn kernel_hw(w: &ArrayD<f64>) -> (usize, usize) {
    let s = w.shape();
    (s[2], s[3])
}

fn channel_sum_raw(x: &ArrayD<f64>) -> ArrayD<f64> {
    let (b, c, h, w) = as4(x.shape());
    let hw = h * w;
    let flat = x.as_slice().expect("standard layout");
    let mut out = vec![0.0f64; c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            out[ci] += flat[base..base + hw].iter().sum::<f64>();
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[c]), out).unwrap()
}

fn linear_raw(x: &ArrayD<f64>, w: &ArrayD<f64>) -> ArrayD<f64> {
    let xv = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let wv = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    assert_eq!(xv.ncols(), wv.ncols(), "linear: inner dims disagree");
    xv.dot(&wv.t()).into_dyn()
}

fn linear_grad_x_raw(g: &ArrayD<f64>, w: &ArrayD<f64>) -> ArrayD<f64> {
    let gv = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let wv = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    gv.dot(&wv).into_dyn()
}

fn linear_grad_w_raw(x: &ArrayD<f64>, g: &ArrayD<f64>) -> ArrayD<f64> {
    let xv = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let gv = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    gv.t().dot(&xv).into_dyn()
}

fn conv2d_raw(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
    let (b, ci, h, wd) = as4(x.shape());
    let (co, ciw, kh, kw) = as4(w.shape());
    assert_eq!(ci, ciw, "conv2d channel mismatch");
    assert!(
        h + 2 * pad >= kh && wd + 2 * pad >= kw,
        "kernel larger than padded input"
    );
    assert_eq!((h + 2 * pad - kh) % stride, 0, "conv2d: height not divisible");
    assert_eq!((wd + 2 * pad - kw) % stride, 0, "conv2d: width not divisible");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let mut out = vec![0.0f64; b * co * oh * ow];
    out.par_chunks_mut(co * oh * ow)
        .enumerate()
        .for_each(|(bi, ob)| {
            for coi in 0..co {
                let oslab = &mut ob[coi * oh * ow..(coi + 1) * oh * ow];
                for cii in 0..ci {
                    let xslab = &xs[(bi * ci + cii) * h * wd..(bi * ci + cii + 1) * h * wd];
                    let wbase = (coi * ci + cii) * kh * kw;
                    for ky in 0..kh {
                        let (oy_lo, oy_hi) = tap_range(oh, h, stride, pad, ky);
                        for kx in 0..kw {
                            let wv = ws[wbase + ky * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (ox_lo, ox_hi) = tap_range(ow, wd, stride, pad, kx);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + ky - pad;
                                let xrow = &xslab[iy * wd..(iy + 1) * wd];
                                let orow = &mut oslab[oy * ow..(oy + 1) * ow];
                                let ix0 = ox_lo * stride + kx - pad;
                                for (o, xv) in orow[ox_lo..ox_hi]
                                    .iter_mut()
                                    .zip(xrow[ix0..].iter().step_by(stride))
                                {
                                    *o += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        });
    ArrayD::from_shape_vec(IxDyn(&[b, co, oh, ow]), out).unwrap()
}

/// Output index range [lo, hi) with 0 <= o*stride + k - pad < extent.
#[inline]
fn tap_range(o_extent: usize, extent: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let hi_excl = (extent + pad).saturating_sub(k).div_ceil(stride);
    (lo.min(o_extent), hi_excl.min(o_extent))
}

fn conv_t2d_raw(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
    let (b, ci, h, wd) = as4(x.shape());
    let (ciw, co, kh, kw) = as4(w.shape());
    assert_eq!(ci, ciw, "conv_t2d channel mismatch");
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let mut out = vec![0.0f64; b * co * oh * ow];
    out.par_chunks_mut(co * oh * ow)
        .enumerate()
        .for_each(|(bi, ob)| {
            for cii in 0..ci {
                let xslab = &xs[(bi * ci + cii) * h * wd..(bi * ci + cii + 1) * h * wd];
                for coi in 0..co {
                    let oslab = &mut ob[coi * oh * ow..(coi + 1) * oh * ow];
                    let wbase = (cii * co + coi) * kh * kw;
                    for ky in 0..kh {
                        let (iy_lo, iy_hi) = tap_range(h, oh, stride, pad, ky);
                        for kx in 0..kw {
                            let wv = ws[wbase + ky * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (ix_lo, ix_hi) = tap_range(wd, ow, stride, pad, kx);
                            if ix_lo >= ix_hi {
                                continue;
                            }
                            for iy in iy_lo..iy_hi {
                                let oy = iy * stride + ky - pad;
                                let xrow = &xslab[iy * wd..(iy + 1) * wd];
                                let orow = &mut oslab[oy * ow..(oy + 1) * ow];
                                let ox0 = ix_lo * stride + kx - pad;
                                for (xv, o) in xrow[ix_lo..ix_hi]
                                    .iter()
                                    .zip(orow[ox0..].iter_mut().step_by(stride))
                                {
                                    *o += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        });
    ArrayD::from_shape_vec(IxDyn(&[b, co, oh, ow]), out).unwrap()
}

fn conv_kernel_grad_raw(
    img: &ArrayD<f64>,
    gout: &ArrayD<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (b, cim, h, wd) = as4(img.shape());
    let (bg, cg, oh, ow) = as4(gout.shape());
    assert_eq!(b, bg, "batch mismatch");
    let is = img.as_slice().unwrap();
    let gs = gout.as_slice().unwrap();
    let kernel_len = cg * cim * kh * kw;
    // per-sample partials, summed in index order for determinism
    let partials: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let mut out = vec![0.0f64; kernel_len];
            for cgi in 0..cg {
                let gslab = &gs[(bi * cg + cgi) * oh * ow..(bi * cg + cgi + 1) * oh * ow];
                for cii in 0..cim {
                    let islab = &is[(bi * cim + cii) * h * wd..(bi * cim + cii + 1) * h * wd];
                    let obase = (cgi * cim + cii) * kh * kw;
                    for ky in 0..kh {
                        let (oy_lo, oy_hi) = tap_range(oh, h, stride, pad, ky);
                        for kx in 0..kw {
                            let (ox_lo, ox_hi) = tap_range(ow, wd, stride, pad, kx);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let mut acc = 0.0;
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + ky - pad;
                                let irow = &islab[iy * wd..(iy + 1) * wd];
                                let grow = &gslab[oy * ow..(oy + 1) * ow];
                                let ix0 = ox_lo * stride + kx - pad;
                                for (g, iv) in grow[ox_lo..ox_hi]
                                    .iter()
                                    .zip(irow[ix0..].iter().step_by(stride))
                                {
                                    acc += g * iv;
                                }
                            }
                            out[obase + ky * kw + kx] += acc;
                        }
                    }
                }
            }
            out
        })
        .collect();
    let mut out = vec![0.0f64; kernel_len];
    for part in partials {
        for (o, p) in out.iter_mut().zip(&part) {
            *o += p;
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[cg, cim, kh, kw]), out).unwrap()
}

/// Apply an `[H*W] -> [H*W]` slab kernel to every (sample, channel) of a
/// 4-d tensor.
fn apply_slabs(
    x: &ArrayD<f64>,
    f: impl Fn(&[f64], &mut [f64], usize, usize) + Copy,
) -> ArrayD<f64> {
    let (b, c, h, w) = as4(x.shape());
    let xs = x.as_slice().unwrap();
    let mut out = vec![0.0f64; b * c * h * w];
    let hw = h * w;
    for s in 0..b * c {
        f(&xs[s * hw..(s + 1) * hw], &mut out[s * hw..(s + 1) * hw], h, w);
    }
    ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), out).unwrap()
}

/// Central finite differences of a scalar function, step `h` per coordinate.
pub fn finite_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut pert = x.to_vec();
    for i in 0..x.len() {
        let orig = pert[i];
        pert[i] = orig + step;
        let fp = f(&pert);
        pert[i] = orig - step;
        let fm = f(&pert);
        pert[i] = orig;
        g[i] = (fp - fm) / (2.0 * step);
    }
    g
}
