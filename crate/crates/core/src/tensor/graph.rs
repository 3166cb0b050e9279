//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value. `backward` walks
//! the tape from the loss towards the leaves and accumulates vector-Jacobian
//! products. Nodes that cannot reach a trainable leaf are skipped.

use std::collections::HashMap;

use super::kernels::{self, ConvGeometry};
use super::{chw, ParamSet, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter name → leaf handle on one graph.
#[derive(Clone, Debug, Default)]
pub struct Bindings(HashMap<String, Var>);

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    pub fn eval<T: Real>(self, x: T) -> T {
        match self {
            Activation::Sigmoid => kernels::sigmoid(x),
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(alpha) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::of(alpha)
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn slope<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(alpha) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::of(alpha)
                }
            }
            Activation::Tanh => T::one() - y * y,
        }
    }

    pub fn apply<T: Real>(self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| self.eval(v))
    }
}

/// Backward rule for an operation defined outside the tape.
pub trait CustomBackward<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, in input order.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleChannels {
        x: Var,
        s: Var,
    },
    ScalePositions {
        x: Var,
        s: Var,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    ColumnCosine {
        x: Var,
        o: Var,
        eps: T,
    },
    ChannelCosine {
        x: Var,
        o: Var,
        eps: T,
    },
    Narrow {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of one forward computation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    /// Sign of every input entry to a ReLU or leaky ReLU, in recording order.
    /// Two recordings with equal patterns lie on the same linear piece of
    /// every kinked activation.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Act {
                x,
                kind: Activation::Relu | Activation::LeakyRelu(_),
            } = node.op
            {
                out.extend(self.nodes[x.0].value.data().iter().map(|v| *v > T::zero()));
            }
        }
        out
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Named leaf that receives a gradient when `trainable`.
    pub fn param(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Var {
        let v = self.push(value, Op::Leaf, trainable);
        self.params.push((name.to_string(), v));
        v
    }

    /// Registers every entry of `params` as a leaf.
    pub fn bind(&mut self, params: &ParamSet<T>) -> Bindings {
        Bindings(
            params
                .iter()
                .map(|e| {
                    let v = self.param(&e.name, e.value.clone(), e.trainable);
                    (e.name.clone(), v)
                })
                .collect(),
        )
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [geo.out_channels] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), geo.out_channels),
                ));
            }
        }
        let data = kernels::conv_forward(
            &geo,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![geo.out_channels, geo.out_h, geo.out_w], data)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geo }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = kind.apply(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::Act { x, kind }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `out[c,h,w] = x[c,h,w] * s[c]`
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (c, h, w) = chw(self.shape(x), "scale_channels")?;
        if self.shape(s) != [c] {
            return Err(Error::shape(
                "scale_channels",
                format!("scales {:?} for {c} channels", self.shape(s)),
            ));
        }
        let hw = h * w;
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .zip(sv)
            .flat_map(|(plane, &k)| plane.iter().map(move |&v| v * k))
            .collect();
        let value = Tensor::new(vec![c, h, w], data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::ScaleChannels { x, s }, rg))
    }

    /// `out[c,h,w] = x[c,h,w] * s[h,w]`
    pub fn scale_positions(&mut self, x: Var, s: Var) -> Result<Var> {
        let (c, h, w) = chw(self.shape(x), "scale_positions")?;
        if self.shape(s) != [h, w] {
            return Err(Error::shape(
                "scale_positions",
                format!("scale map {:?} for {h}x{w} positions", self.shape(s)),
            ));
        }
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .flat_map(|plane| plane.iter().zip(sv).map(|(&v, &k)| v * k))
            .collect();
        let value = Tensor::new(vec![c, h, w], data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::ScalePositions { x, s }, rg))
    }

    /// Mean over the spatial extent: `[C,H,W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw(self.shape(x), "global_avg_pool")?;
        let inv = T::of(1.0 / (h * w) as f64);
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![c], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Fully connected layer `w[out,in] * x[in] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (out, inp) = match *ws {
            [o, i] => (o, i),
            _ => return Err(Error::shape("linear", format!("weight must be 2-D, got {ws:?}"))),
        };
        if xs != [inp] || bs != [out] {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let xv = self.value(x).data();
        let data = self
            .value(w)
            .data()
            .chunks(inp)
            .zip(self.value(b).data())
            .map(|(row, &bias)| row.iter().zip(xv).map(|(&a, &v)| a * v).sum::<T>() + bias)
            .collect();
        let value = Tensor::new(vec![out], data)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    fn check_same(&self, x: Var, o: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let dims = chw(self.shape(x), op)?;
        if self.shape(x) != self.shape(o) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(x), self.shape(o)),
            ));
        }
        Ok(dims)
    }

    /// Guarded cosine similarity between the channel columns of `x` and `o`
    /// at every spatial position: `[C,H,W] x2 -> [H,W]`.
    pub fn column_cosine(&mut self, x: Var, o: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.check_same(x, o, "column_cosine")?;
        let hw = h * w;
        let (xv, ov) = (self.value(x).data(), self.value(o).data());
        let eps_t = T::of(eps);
        let mut col_x = vec![T::zero(); c];
        let mut col_o = vec![T::zero(); c];
        let data = (0..hw)
            .map(|p| {
                for ch in 0..c {
                    col_x[ch] = xv[ch * hw + p];
                    col_o[ch] = ov[ch * hw + p];
                }
                kernels::guarded_cosine(&col_x, &col_o, eps_t)
            })
            .collect();
        let value = Tensor::new(vec![h, w], data)?;
        let rg = self.rg(x) || self.rg(o);
        Ok(self.push(value, Op::ColumnCosine { x, o, eps: eps_t }, rg))
    }

    /// Guarded cosine similarity between whole flattened channel maps:
    /// `[C,H,W] x2 -> [C]`.
    pub fn channel_cosine(&mut self, x: Var, o: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.check_same(x, o, "channel_cosine")?;
        let hw = h * w;
        let eps_t = T::of(eps);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .zip(self.value(o).data().chunks(hw))
            .map(|(a, b)| kernels::guarded_cosine(a, b, eps_t))
            .collect();
        let value = Tensor::new(vec![c], data)?;
        let rg = self.rg(x) || self.rg(o);
        Ok(self.push(value, Op::ChannelCosine { x, o, eps: eps_t }, rg))
    }

    /// Slice `len` rows along the leading axis starting at `start`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let lead = *shape.first().ok_or_else(|| Error::shape("narrow", "scalar input"))?;
        if len == 0 || start + len > lead {
            return Err(Error::shape(
                "narrow",
                format!("rows {start}..{} of {lead}", start + len),
            ));
        }
        let row: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Narrow { x, start }, rg))
    }

    /// Concatenates along the leading axis. Trailing extents must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &v in xs {
            let s = self.shape(v);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat", format!("{s:?} vs trailing {tail:?}")));
            }
            lead += s[0];
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::Concat(xs.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        rule: Box<dyn CustomBackward<T>>,
    ) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            rg,
        )
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let by_name = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients {
            by_var: grads,
            by_name,
        })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geo } => {
                let cg = kernels::conv_backward(
                    geo,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    self.rg(*x),
                );
                if let Some(dx) = cg.input {
                    acc(*x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                }
                acc(*w, Tensor::new(self.shape(*w).to_vec(), cg.weight)?);
                if let Some(b) = b {
                    acc(*b, Tensor::new(vec![geo.out_channels], cg.bias)?);
                }
            }
            Op::Act { x, kind } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let data = gd
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(&gi, (&xi, &yi))| gi * kind.slope(xi, yi))
                    .collect();
                acc(*x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(bv).map(|(&gi, &y)| gi * y).collect();
                let db = gd.iter().zip(av).map(|(&gi, &x)| gi * x).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), da)?);
                acc(*b, Tensor::new(g.shape().to_vec(), db)?);
            }
            Op::ScaleChannels { x, s } => {
                let (_, h, w) = chw(g.shape(), "scale_channels")?;
                let hw = h * w;
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                let dx = gd
                    .chunks(hw)
                    .zip(sv)
                    .flat_map(|(plane, &k)| plane.iter().map(move |&v| v * k))
                    .collect();
                let ds = gd
                    .chunks(hw)
                    .zip(xv.chunks(hw))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                    .collect();
                acc(*x, Tensor::new(g.shape().to_vec(), dx)?);
                acc(*s, Tensor::new(vec![sv.len()], ds)?);
            }
            Op::ScalePositions { x, s } => {
                let (_, h, w) = chw(g.shape(), "scale_positions")?;
                let hw = h * w;
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                let dx = gd
                    .chunks(hw)
                    .flat_map(|plane| plane.iter().zip(sv).map(|(&v, &k)| v * k))
                    .collect();
                let mut ds = vec![T::zero(); hw];
                for (gp, xp) in gd.chunks(hw).zip(xv.chunks(hw)) {
                    for ((d, &a), &b) in ds.iter_mut().zip(gp).zip(xp) {
                        *d += a * b;
                    }
                }
                acc(*x, Tensor::new(g.shape().to_vec(), dx)?);
                acc(*s, Tensor::new(vec![h, w], ds)?);
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = chw(self.shape(*x), "global_avg_pool")?;
                let inv = T::of(1.0 / (h * w) as f64);
                let data = gd
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v * inv, h * w))
                    .collect();
                acc(*x, Tensor::new(vec![c, h, w], data)?);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let inp = xv.len();
                let dw = gd
                    .iter()
                    .flat_map(|&gi| xv.iter().map(move |&v| gi * v))
                    .collect();
                let mut dx = vec![T::zero(); inp];
                for (row, &gi) in wv.chunks(inp).zip(gd) {
                    for (d, &a) in dx.iter_mut().zip(row) {
                        *d += a * gi;
                    }
                }
                acc(*w, Tensor::new(self.shape(*w).to_vec(), dw)?);
                acc(*x, Tensor::new(vec![inp], dx)?);
                acc(*b, g.clone());
            }
            Op::ColumnCosine { x, o, eps } => {
                let (c, h, w) = chw(self.shape(*x), "column_cosine")?;
                let hw = h * w;
                let (xv, ov) = (self.value(*x).data(), self.value(*o).data());
                let mut dx = vec![T::zero(); c * hw];
                let mut d_o = vec![T::zero(); c * hw];
                let mut cx = vec![T::zero(); c];
                let mut co = vec![T::zero(); c];
                let mut gx = vec![T::zero(); c];
                let mut go = vec![T::zero(); c];
                for p in 0..hw {
                    for ch in 0..c {
                        cx[ch] = xv[ch * hw + p];
                        co[ch] = ov[ch * hw + p];
                    }
                    cosine_vjp(&cx, &co, *eps, gd[p], &mut gx, &mut go);
                    for ch in 0..c {
                        dx[ch * hw + p] = gx[ch];
                        d_o[ch * hw + p] = go[ch];
                    }
                }
                acc(*x, Tensor::new(vec![c, h, w], dx)?);
                acc(*o, Tensor::new(vec![c, h, w], d_o)?);
            }
            Op::ChannelCosine { x, o, eps } => {
                let (c, h, w) = chw(self.shape(*x), "channel_cosine")?;
                let hw = h * w;
                let (xv, ov) = (self.value(*x).data(), self.value(*o).data());
                let mut dx = vec![T::zero(); c * hw];
                let mut d_o = vec![T::zero(); c * hw];
                for ch in 0..c {
                    let r = ch * hw..(ch + 1) * hw;
                    cosine_vjp(
                        &xv[r.clone()],
                        &ov[r.clone()],
                        *eps,
                        gd[ch],
                        &mut dx[r.clone()],
                        &mut d_o[r],
                    );
                }
                acc(*x, Tensor::new(vec![c, h, w], dx)?);
                acc(*o, Tensor::new(vec![c, h, w], d_o)?);
            }
            Op::Narrow { x, start } => {
                let shape = self.shape(*x);
                let row: usize = shape[1..].iter().product();
                let mut dx = Tensor::zeros(shape);
                dx.data_mut()[start * row..start * row + gd.len()].copy_from_slice(gd);
                acc(*x, dx);
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &v in xs {
                    let n = self.value(v).len();
                    acc(v, Tensor::new(self.shape(v).to_vec(), gd[offset..offset + n].to_vec())?);
                    offset += n;
                }
            }
            Op::Sum(x) => {
                acc(*x, Tensor::full(self.shape(*x), gd[0]));
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = rule.backward(&ins, &node.value, g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::shape(
                        "custom backward",
                        format!("{} returned {} grads for {} inputs", rule.name(), gs.len(), inputs.len()),
                    ));
                }
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        acc(v, gi);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Vector-Jacobian product of `s = <a,b> / (|a||b| + eps)`.
fn cosine_vjp<T: Real>(a: &[T], b: &[T], eps: T, g: T, ga: &mut [T], gb: &mut [T]) {
    let (mut dot, mut aa, mut bb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    let d = na * nb + eps;
    let inv_d = T::one() / d;
    // ds/da = b/d - dot * nb / d^2 * a/|a|; the second term vanishes with a.
    let ka = if na > T::zero() {
        dot * nb * inv_d * inv_d / na
    } else {
        T::zero()
    };
    let kb = if nb > T::zero() {
        dot * na * inv_d * inv_d / nb
    } else {
        T::zero()
    };
    for i in 0..a.len() {
        ga[i] = g * (b[i] * inv_d - ka * a[i]);
        gb[i] = g * (a[i] * inv_d - kb * b[i]);
    }
}

/// Result of a reverse pass.
pub struct Gradients<T: Real> {
    by_var: Vec<Option<Tensor<T>>>,
    by_name: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a named parameter; zeros when the loss does not depend on it.
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Gradient of any recorded node, if one reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.by_name.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn into_named(self) -> Vec<(String, Tensor<T>)> {
        self.by_name
    }
}
