//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradients of every leaf that requires them. Parameters are pulled from a
//! [`ParamStore`] by value, so a graph never borrows the store and the store can
//! be updated between phases of a training step.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};

enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MulConst(usize, Rc<Tensor<T>>),
    Abs(usize),
    Square(usize),
    Sigmoid(usize),
    LeakyRelu(usize, T),
    Relu(usize),
    PowScalar(usize, T),
    Sum(usize),
    Mean(usize),
    MeanSpatial(usize),
    SumPerChannel(usize),
    ScaleChannels(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    InstanceNorm {
        x: usize,
        inv_std: Vec<T>,
    },
    Upsample2x(usize),
    AvgPool2(usize),
    Concat(Vec<usize>),
    SliceChannels {
        x: usize,
        start: usize,
    },
    Warp {
        src: usize,
        flow: usize,
    },
    SeparableValid {
        x: usize,
        kernel: Rc<Vec<T>>,
    },
    Softmax(usize),
    LogSoftmax(usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    param_cache: RefCell<HashMap<ParamId, usize>>,
    frozen: HashSet<ParamId>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf created with [`Graph::variable`]; `None` if no path reached it.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&v.id)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &HashMap<ParamId, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor<T>> {
        self.params
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            param_cache: RefCell::new(HashMap::new()),
            frozen: HashSet::new(),
        }
    }

    /// Graph on which the listed parameters are constants: gradients still flow
    /// through them but none are accumulated for them.
    pub fn with_frozen(frozen: impl IntoIterator<Item = ParamId>) -> Self {
        Graph {
            frozen: frozen.into_iter().collect(),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// Free leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf { param: None }, true)
    }

    /// Leaf holding a copy of a stored parameter. Repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.param_cache.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let v = self.push(
            store.get(id).clone(),
            Op::Leaf { param: Some(id) },
            !self.frozen.contains(&id),
        );
        self.param_cache.borrow_mut().insert(id, v.id);
        v
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels<'g>(&'g self, parts: &[Var<'g, T>]) -> Var<'g, T> {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let [n, _, h, w] = values[0].dims4();
        let total_c: usize = values.iter().map(|v| v.dims4()[1]).sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for v in &values {
                let [vn, c, vh, vw] = v.dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat shape mismatch");
                out.extend_from_slice(&v.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.id));
        self.push(
            Tensor::from_vec(&[n, total_c, h, w], out),
            Op::Concat(parts.iter().map(|p| p.id).collect()),
            rg,
        )
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.numel(), 1, "backward requires a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        let mut out = Gradients {
            leaves: HashMap::new(),
            params: HashMap::new(),
        };
        if !nodes[root.id].requires_grad {
            return out;
        }
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), T::one()));

        let acc = |grads: &mut Vec<Option<Tensor<T>>>, id: usize, g: Tensor<T>| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let ew = |g: &Tensor<T>, f: &dyn Fn(usize, T) -> T| -> Tensor<T> {
            Tensor::from_vec(g.shape(), g.data().iter().enumerate().map(|(i, &v)| f(i, v)).collect())
        };

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| nodes[i].value.clone();
            match &node.op {
                Op::Leaf { param } => match param {
                    Some(p) => {
                        out.params.insert(*p, g);
                    }
                    None => {
                        out.leaves.insert(id, g);
                    }
                },
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, ew(&g, &|i, v| v * vb.data()[i]));
                    }
                    if nodes[*b].requires_grad {
                        acc(&mut grads, *b, ew(&g, &|i, v| v * va.data()[i]));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, ew(&g, &|i, v| v / vb.data()[i]));
                    }
                    if nodes[*b].requires_grad {
                        acc(
                            &mut grads,
                            *b,
                            ew(&g, &|i, v| {
                                let d = vb.data()[i];
                                -v * va.data()[i] / (d * d)
                            }),
                        );
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|v| v * *s)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::MulConst(a, c) => acc(&mut grads, *a, ew(&g, &|i, v| v * c.data()[i])),
                Op::Abs(a) => {
                    let va = val(*a);
                    acc(
                        &mut grads,
                        *a,
                        ew(&g, &|i, v| {
                            let x = va.data()[i];
                            if x > T::zero() {
                                v
                            } else if x < T::zero() {
                                -v
                            } else {
                                T::zero()
                            }
                        }),
                    );
                }
                Op::Square(a) => {
                    let va = val(*a);
                    let two = T::lit(2.0);
                    acc(&mut grads, *a, ew(&g, &|i, v| two * v * va.data()[i]));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(
                        &mut grads,
                        *a,
                        ew(&g, &|i, v| {
                            let s = y.data()[i];
                            v * s * (T::one() - s)
                        }),
                    );
                }
                Op::LeakyRelu(a, slope) => {
                    let va = val(*a);
                    acc(
                        &mut grads,
                        *a,
                        ew(&g, &|i, v| if va.data()[i] > T::zero() { v } else { v * *slope }),
                    );
                }
                Op::Relu(a) => {
                    let va = val(*a);
                    acc(
                        &mut grads,
                        *a,
                        ew(&g, &|i, v| if va.data()[i] > T::zero() { v } else { T::zero() }),
                    );
                }
                Op::PowScalar(a, p) => {
                    let va = val(*a);
                    acc(
                        &mut grads,
                        *a,
                        ew(&g, &|i, v| {
                            let x = va.data()[i];
                            if x > T::zero() {
                                v * *p * x.powf(*p - T::one())
                            } else {
                                T::zero()
                            }
                        }),
                    );
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    acc(&mut grads, *a, Tensor::full(nodes[*a].value.shape(), gv));
                }
                Op::Mean(a) => {
                    let n = T::from_usize(nodes[*a].value.numel()).unwrap();
                    acc(&mut grads, *a, Tensor::full(nodes[*a].value.shape(), g.item() / n));
                }
                Op::MeanSpatial(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    let plane = shape[2] * shape[3];
                    let inv = T::one() / T::from_usize(plane).unwrap();
                    let mut d = Vec::with_capacity(plane * g.numel());
                    for &gv in g.data() {
                        d.extend(std::iter::repeat_n(gv * inv, plane));
                    }
                    acc(&mut grads, *a, Tensor::from_vec(&shape, d));
                }
                Op::SumPerChannel(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                    let mut d = Vec::with_capacity(n * c * plane);
                    for _ in 0..n {
                        for ch in 0..c {
                            d.extend(std::iter::repeat_n(g.data()[ch], plane));
                        }
                    }
                    acc(&mut grads, *a, Tensor::from_vec(&shape, d));
                }
                Op::ScaleChannels(x, s) => {
                    let (vx, vs) = (val(*x), val(*s));
                    let [n, c, h, w] = vx.dims4();
                    let plane = h * w;
                    if nodes[*x].requires_grad {
                        acc(&mut grads, *x, ew(&g, &|i, v| v * vs.data()[(i / plane) % c]));
                    }
                    if nodes[*s].requires_grad {
                        let mut ds = vec![T::zero(); c];
                        for b in 0..n {
                            for (ch, d) in ds.iter_mut().enumerate() {
                                let base = (b * c + ch) * plane;
                                *d += g.data()[base..base + plane]
                                    .iter()
                                    .zip(&vx.data()[base..base + plane])
                                    .map(|(&a, &b)| a * b)
                                    .sum::<T>();
                            }
                        }
                        acc(&mut grads, *s, Tensor::from_vec(&[c], ds));
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (vx, vw) = (val(*x), val(*w));
                    let need_db = b.map(|b| nodes[b].requires_grad).unwrap_or(false);
                    let (dx, dw, db) = kernels::conv2d_backward(
                        vx.data(),
                        vw.data(),
                        g.data(),
                        geom,
                        nodes[*x].requires_grad,
                        nodes[*w].requires_grad,
                        need_db,
                    );
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, Tensor::from_vec(vx.shape(), dx));
                    }
                    if let Some(dw) = dw {
                        acc(&mut grads, *w, Tensor::from_vec(vw.shape(), dw));
                    }
                    if let (Some(db), Some(b)) = (db, b) {
                        acc(&mut grads, *b, Tensor::from_vec(&[geom.co], db));
                    }
                }
                Op::InstanceNorm { x, inv_std } => {
                    let [_, _, h, w] = node.value.dims4();
                    let dx = kernels::instance_norm_backward(node.value.data(), inv_std, g.data(), h * w);
                    acc(&mut grads, *x, Tensor::from_vec(node.value.shape(), dx));
                }
                Op::Upsample2x(a) => {
                    let [n, c, h, w] = nodes[*a].value.dims4();
                    let dx = kernels::upsample2x_backward(g.data(), n * c, h, w);
                    acc(&mut grads, *a, Tensor::from_vec(&[n, c, h, w], dx));
                }
                Op::AvgPool2(a) => {
                    let [n, c, h, w] = nodes[*a].value.dims4();
                    let dx = kernels::avg_pool2_backward(g.data(), n * c, h, w);
                    acc(&mut grads, *a, Tensor::from_vec(&[n, c, h, w], dx));
                }
                Op::Concat(parts) => {
                    let [n, total_c, h, w] = g.dims4();
                    let plane = h * w;
                    let mut offset = 0;
                    for &p in parts {
                        let c = nodes[p].value.dims4()[1];
                        if nodes[p].requires_grad {
                            let mut d = Vec::with_capacity(n * c * plane);
                            for b in 0..n {
                                let base = (b * total_c + offset) * plane;
                                d.extend_from_slice(&g.data()[base..base + c * plane]);
                            }
                            acc(&mut grads, p, Tensor::from_vec(&[n, c, h, w], d));
                        }
                        offset += c;
                    }
                }
                Op::SliceChannels { x, start } => {
                    let [n, c, h, w] = nodes[*x].value.dims4();
                    let len = g.dims4()[1];
                    let plane = h * w;
                    let mut d = vec![T::zero(); n * c * plane];
                    for b in 0..n {
                        let dst = (b * c + start) * plane;
                        let src = b * len * plane;
                        d[dst..dst + len * plane].copy_from_slice(&g.data()[src..src + len * plane]);
                    }
                    acc(&mut grads, *x, Tensor::from_vec(&[n, c, h, w], d));
                }
                Op::Warp { src, flow } => {
                    let (vs, vf) = (val(*src), val(*flow));
                    let [n, c, h, w] = vs.dims4();
                    let (ds, df) = kernels::warp_backward(
                        vs.data(),
                        vf.data(),
                        g.data(),
                        n,
                        c,
                        h,
                        w,
                        nodes[*src].requires_grad,
                        nodes[*flow].requires_grad,
                    );
                    if let Some(ds) = ds {
                        acc(&mut grads, *src, Tensor::from_vec(vs.shape(), ds));
                    }
                    if let Some(df) = df {
                        acc(&mut grads, *flow, Tensor::from_vec(vf.shape(), df));
                    }
                }
                Op::SeparableValid { x, kernel } => {
                    let [n, c, h, w] = nodes[*x].value.dims4();
                    let dx = kernels::separable_valid_backward(g.data(), n * c, h, w, kernel);
                    acc(&mut grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
                }
                Op::Softmax(a) => {
                    let [n, c, h, w] = node.value.dims4();
                    let plane = h * w;
                    let y = node.value.data();
                    let mut d = vec![T::zero(); y.len()];
                    for b in 0..n {
                        for q in 0..plane {
                            let idx = |ch: usize| (b * c + ch) * plane + q;
                            let dot: T = (0..c).map(|ch| g.data()[idx(ch)] * y[idx(ch)]).sum();
                            for ch in 0..c {
                                d[idx(ch)] = y[idx(ch)] * (g.data()[idx(ch)] - dot);
                            }
                        }
                    }
                    acc(&mut grads, *a, Tensor::from_vec(&[n, c, h, w], d));
                }
                Op::LogSoftmax(a) => {
                    let [n, c, h, w] = node.value.dims4();
                    let plane = h * w;
                    let y = node.value.data();
                    let mut d = vec![T::zero(); y.len()];
                    for b in 0..n {
                        for q in 0..plane {
                            let idx = |ch: usize| (b * c + ch) * plane + q;
                            let gs: T = (0..c).map(|ch| g.data()[idx(ch)]).sum();
                            for ch in 0..c {
                                d[idx(ch)] = g.data()[idx(ch)] - y[idx(ch)].exp() * gs;
                            }
                        }
                    }
                    acc(&mut grads, *a, Tensor::from_vec(&[n, c, h, w], d));
                }
            }
        }
        out
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dims4(&self) -> [usize; 4] {
        self.graph.nodes.borrow()[self.id].value.dims4()
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'g, T> {
        let v = self.value().map(f);
        self.graph.push(v, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'g, T>, op: Op<T>, f: impl Fn(T, T) -> T) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(Tensor::from_vec(a.shape(), data), op, rg)
    }

    pub fn add(&self, o: &Var<'g, T>) -> Var<'g, T> {
        self.binary(o, Op::Add(self.id, o.id), |a, b| a + b)
    }

    pub fn sub(&self, o: &Var<'g, T>) -> Var<'g, T> {
        self.binary(o, Op::Sub(self.id, o.id), |a, b| a - b)
    }

    pub fn mul(&self, o: &Var<'g, T>) -> Var<'g, T> {
        self.binary(o, Op::Mul(self.id, o.id), |a, b| a * b)
    }

    pub fn div(&self, o: &Var<'g, T>) -> Var<'g, T> {
        self.binary(o, Op::Div(self.id, o.id), |a, b| a / b)
    }

    pub fn scale(&self, s: T) -> Var<'g, T> {
        self.unary(Op::Scale(self.id, s), |v| v * s)
    }

    pub fn add_scalar(&self, s: T) -> Var<'g, T> {
        self.unary(Op::AddScalar(self.id), |v| v + s)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&self, c: Rc<Tensor<T>>) -> Var<'g, T> {
        let a = self.value();
        assert_eq!(a.shape(), c.shape());
        let data = a.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        self.graph.push(
            Tensor::from_vec(a.shape(), data),
            Op::MulConst(self.id, c),
            self.requires_grad(),
        )
    }

    pub fn abs(&self) -> Var<'g, T> {
        self.unary(Op::Abs(self.id), |v| v.abs())
    }

    pub fn square(&self) -> Var<'g, T> {
        self.unary(Op::Square(self.id), |v| v * v)
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        self.unary(Op::Sigmoid(self.id), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn leaky_relu(&self, slope: T) -> Var<'g, T> {
        self.unary(
            Op::LeakyRelu(self.id, slope),
            |v| if v > T::zero() { v } else { v * slope },
        )
    }

    pub fn relu(&self) -> Var<'g, T> {
        self.unary(Op::Relu(self.id), |v| if v > T::zero() { v } else { T::zero() })
    }

    /// `x^p` for positive inputs, 0 elsewhere (including the gradient).
    pub fn pow_scalar(&self, p: T) -> Var<'g, T> {
        self.unary(Op::PowScalar(self.id, p), |v| {
            if v > T::zero() {
                v.powf(p)
            } else {
                T::zero()
            }
        })
    }

    pub fn sum(&self) -> Var<'g, T> {
        let s = self.value().data().iter().copied().sum();
        self.graph
            .push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'g, T> {
        let v = self.value();
        let s = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).unwrap();
        self.graph
            .push(Tensor::scalar(s), Op::Mean(self.id), self.requires_grad())
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn mean_spatial(&self) -> Var<'g, T> {
        let v = self.value();
        let [n, c, h, w] = v.dims4();
        let plane = h * w;
        let inv = T::one() / T::from_usize(plane).unwrap();
        let data = v
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.graph.push(
            Tensor::from_vec(&[n, c, 1, 1], data),
            Op::MeanSpatial(self.id),
            self.requires_grad(),
        )
    }

    /// `[n, c, h, w] -> [c]` sum over batch and space.
    pub fn sum_per_channel(&self) -> Var<'g, T> {
        let v = self.value();
        let [n, c, h, w] = v.dims4();
        let plane = h * w;
        let mut out = vec![T::zero(); c];
        for b in 0..n {
            for (ch, o) in out.iter_mut().enumerate() {
                let base = (b * c + ch) * plane;
                *o += v.data()[base..base + plane].iter().copied().sum::<T>();
            }
        }
        self.graph.push(
            Tensor::from_vec(&[c], out),
            Op::SumPerChannel(self.id),
            self.requires_grad(),
        )
    }

    /// Multiplies channel `c` of an NCHW tensor by `scales[c]`.
    pub fn scale_channels(&self, scales: &Var<'g, T>) -> Var<'g, T> {
        let (vx, vs) = (self.value(), scales.value());
        let [_, c, h, w] = vx.dims4();
        assert_eq!(vs.shape(), &[c], "channel scale shape");
        let plane = h * w;
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * vs.data()[(i / plane) % c])
            .collect();
        let rg = self.requires_grad() || scales.requires_grad();
        self.graph.push(
            Tensor::from_vec(vx.shape(), data),
            Op::ScaleChannels(self.id, scales.id),
            rg,
        )
    }

    /// 2D cross-correlation; `weight` is `[co, ci, k, k]`, `bias` is `[co]`.
    pub fn conv2d(&self, weight: &Var<'g, T>, bias: Option<&Var<'g, T>>, stride: usize, pad: usize) -> Var<'g, T> {
        let (vx, vw) = (self.value(), weight.value());
        let [n, ci, h, w] = vx.dims4();
        let [co, wci, k, k2] = vw.dims4();
        assert_eq!(ci, wci, "conv input channels {ci} vs weight {wci}");
        assert_eq!(k, k2, "square kernels only");
        let geom = ConvGeom {
            n,
            ci,
            h,
            w,
            co,
            k,
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let vb = bias.map(|b| b.value());
        let out = kernels::conv2d_forward(vx.data(), vw.data(), vb.as_ref().map(|b| b.data()), &geom);
        let rg = self.requires_grad() || weight.requires_grad() || bias.map(|b| b.requires_grad()).unwrap_or(false);
        self.graph.push(
            Tensor::from_vec(&[n, co, ho, wo], out),
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
            },
            rg,
        )
    }

    pub fn instance_norm(&self) -> Var<'g, T> {
        let v = self.value();
        let [n, c, h, w] = v.dims4();
        let (out, inv_std) = kernels::instance_norm_forward(v.data(), n * c, h * w);
        self.graph.push(
            Tensor::from_vec(v.shape(), out),
            Op::InstanceNorm { x: self.id, inv_std },
            self.requires_grad(),
        )
    }

    pub fn upsample2x(&self) -> Var<'g, T> {
        let v = self.value();
        let [n, c, h, w] = v.dims4();
        let out = kernels::upsample2x_forward(v.data(), n * c, h, w);
        self.graph.push(
            Tensor::from_vec(&[n, c, 2 * h, 2 * w], out),
            Op::Upsample2x(self.id),
            self.requires_grad(),
        )
    }

    pub fn avg_pool2(&self) -> Var<'g, T> {
        let v = self.value();
        let [n, c, h, w] = v.dims4();
        let out = kernels::avg_pool2_forward(v.data(), n * c, h, w);
        self.graph.push(
            Tensor::from_vec(&[n, c, h / 2, w / 2], out),
            Op::AvgPool2(self.id),
            self.requires_grad(),
        )
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Var<'g, T> {
        let v = self.value().channels(start, len);
        self.graph
            .push(v, Op::SliceChannels { x: self.id, start }, self.requires_grad())
    }

    /// Bilinear resampling `out(p) = self(p + flow(p))` with border clamping.
    pub fn warp(&self, flow: &Var<'g, T>) -> Var<'g, T> {
        let (vs, vf) = (self.value(), flow.value());
        let [n, c, h, w] = vs.dims4();
        assert_eq!(vf.dims4(), [n, 2, h, w], "flow must be [n, 2, h, w]");
        let out = kernels::warp_forward(vs.data(), vf.data(), n, c, h, w);
        let rg = self.requires_grad() || flow.requires_grad();
        self.graph.push(
            Tensor::from_vec(vs.shape(), out),
            Op::Warp {
                src: self.id,
                flow: flow.id,
            },
            rg,
        )
    }

    /// Separable filtering without padding; output loses `len(kernel) - 1` pixels per axis.
    pub fn separable_valid(&self, kernel: Rc<Vec<T>>) -> Var<'g, T> {
        let v = self.value();
        let [n, c, h, w] = v.dims4();
        let k = kernel.len();
        assert!(h >= k && w >= k, "image {h}x{w} smaller than filter {k}");
        let out = kernels::separable_valid_forward(v.data(), n * c, h, w, &kernel);
        self.graph.push(
            Tensor::from_vec(&[n, c, h + 1 - k, w + 1 - k], out),
            Op::SeparableValid { x: self.id, kernel },
            self.requires_grad(),
        )
    }

    pub fn softmax_channels(&self) -> Var<'g, T> {
        let v = self.value();
        let [n, c, h, w] = v.dims4();
        let out = kernels::softmax_channels(v.data(), n, c, h * w, false);
        self.graph.push(
            Tensor::from_vec(v.shape(), out),
            Op::Softmax(self.id),
            self.requires_grad(),
        )
    }

    pub fn log_softmax_channels(&self) -> Var<'g, T> {
        let v = self.value();
        let [n, c, h, w] = v.dims4();
        let out = kernels::softmax_channels(v.data(), n, c, h * w, true);
        self.graph.push(
            Tensor::from_vec(v.shape(), out),
            Op::LogSoftmax(self.id),
            self.requires_grad(),
        )
    }
}
