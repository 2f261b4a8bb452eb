//! Reverse-mode automatic differentiation.
//!
//! Model code is written once against [`Exec`]. [`Graph`] records a tape and
//! can differentiate it; [`Eager`] evaluates the same code without keeping
//! intermediate activations alive, which is what inference over large tiles
//! needs.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{shape_err, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::{MatMut, MatRef, Real};
use crate::tensor::Tensor;

/// Instance-norm variance epsilon.
pub const NORM_EPS: f64 = 1e-5;

/// Primitive operations shared by the recording and eager executors.
pub trait Exec<T: Real> {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;

    /// A value that never receives gradients.
    fn constant(&mut self, t: Tensor<T>) -> Self::V;

    /// A trainable parameter. Executors that do not differentiate treat it
    /// like a constant.
    fn param(&mut self, t: &Tensor<T>) -> Self::V;

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, geom: ConvGeom) -> Result<Self::V>;

    fn conv_transpose2d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        geom: ConvGeom,
        output_padding: usize,
    ) -> Result<Self::V>;

    fn reflect_pad(&mut self, x: &Self::V, pad: usize) -> Result<Self::V>;

    fn instance_norm(&mut self, x: &Self::V) -> Result<Self::V>;

    fn relu(&mut self, x: &Self::V) -> Self::V;

    fn leaky_relu(&mut self, x: &Self::V, slope: f64) -> Self::V;

    fn tanh(&mut self, x: &Self::V) -> Self::V;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;

    fn max_pool2d(&mut self, x: &Self::V, kernel: usize, stride: usize) -> Result<Self::V>;

    fn bmm(&mut self, a: &Self::V, b: &Self::V, ta: bool, tb: bool) -> Result<Self::V>;

    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V>;

    fn softmax_last(&mut self, x: &Self::V) -> Result<Self::V>;

    fn gather_locations(&mut self, x: &Self::V, locations: &[usize]) -> Result<Self::V>;

    fn linear(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V>;

    fn l2_normalize_last(&mut self, x: &Self::V) -> Result<Self::V>;

    /// A copy of `x` that is cut from the gradient tape.
    fn detach(&mut self, x: &Self::V) -> Self::V;

    /// Non-local attention read-out.
    ///
    /// `query: [N, C, Q]`, `key: [N, C, K]`, `value: [N, C, K]`,
    /// `gate: [1, 1, 1, 1]`. Computes the relation map
    /// `P = gate * relu(query^T key)` (`[N, Q, K]`), normalises each row of `P`
    /// with a softmax and returns `value softmax(P)^T` as `[N, C, Q]`.
    fn attention(&mut self, query: &Self::V, key: &Self::V, value: &Self::V, gate: &Self::V) -> Result<Self::V> {
        let rel = self.bmm(query, key, true, false)?;
        let rel = self.relu(&rel);
        let (n, q, k) = self.value(&rel).dims3()?;
        let rel4 = self.reshape(&rel, &[n, 1, q, k])?;
        let gated = self.conv2d(&rel4, gate, None, ConvGeom::new(1, 1, 0))?;
        let gated = self.reshape(&gated, &[n, q, k])?;
        let weights = self.softmax_last(&gated)?;
        self.bmm(value, &weights, false, true)
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvT { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ReflectPad { x: Var, pad: usize },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: f64 },
    Tanh { x: Var },
    Add { a: Var, b: Var },
    MaxPool { x: Var, argmax: Vec<u32> },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Reshape { x: Var },
    Softmax { x: Var },
    Gather { x: Var, locations: Vec<usize> },
    Linear { x: Var, w: Var, b: Option<Var> },
    L2Norm { x: Var, norms: Vec<T> },
    PatchNce { q: Var, k: Var, probs: Vec<f64>, temperature: f64 },
    MseConst { x: Var, target: f64 },
    BceConst { x: Var, target: f64 },
    L1Mean { a: Var, b: Var },
    WeightedSum { terms: Vec<(Var, f64)> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A gradient tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf value; gradients are tracked when `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a rank-0 or single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0].as_f64()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn rg_opt(&self, a: Var, b: Var, c: Option<Var>) -> bool {
        self.rg(&[a, b]) || c.is_some_and(|c| self.rg(&[c]))
    }

    fn t(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let y = self.t(x).map(f);
        let rg = self.rg(&[x]);
        self.push(y, op, rg)
    }

    /// Patch-wise contrastive loss over `[N, S, D]` stacks, see
    /// [`kernels::patch_nce`].
    pub fn patch_nce(&mut self, q: Var, k: Var, temperature: f64) -> Result<Var> {
        let (loss, probs) = kernels::patch_nce(self.t(q), self.t(k), temperature)?;
        let rg = self.rg(&[q, k]);
        Ok(self.push(Tensor::scalar(T::of(loss)), Op::PatchNce { q, k, probs, temperature }, rg))
    }

    /// `mean((x - target)^2)`.
    pub fn mse_to_const(&mut self, x: Var, target: f64) -> Result<Var> {
        let v = kernels::mse_to_const(self.t(x), target)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(T::of(v)), Op::MseConst { x, target }, rg))
    }

    /// Binary cross-entropy of logits against a constant label.
    pub fn bce_to_const(&mut self, x: Var, target: f64) -> Result<Var> {
        let v = kernels::bce_logits_to_const(self.t(x), target)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(T::of(v)), Op::BceConst { x, target }, rg))
    }

    /// `mean(|a - b|)`.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::l1_mean(self.t(a), self.t(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(T::of(v)), Op::L1Mean { a, b }, rg))
    }

    /// `sum_i weight_i * term_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc = 0.0;
        for &(v, w) in terms {
            if self.t(v).numel() != 1 {
                return Err(shape_err("weighted_sum", format!("term has shape {:?}", self.t(v).shape())));
            }
            acc += w * self.scalar(v);
        }
        let rg = self.rg(&terms.iter().map(|t| t.0).collect::<Vec<_>>());
        Ok(self.push(Tensor::scalar(T::of(acc)), Op::WeightedSum { terms: terms.to_vec() }, rg))
    }

    /// Back-propagate from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let root_val = &self.nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(shape_err("backward", format!("root must be a scalar, got {:?}", root_val.shape())));
        }
        grads[root.0] = Some(Tensor::full(root_val.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.axpy(T::one(), &g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let cg = kernels::conv2d_backward(self.t(*x), self.t(*w), g, *geom, self.rg(&[*x]), self.rg(&[*w]))?;
                if let Some(gx) = cg.input {
                    self.acc(grads, *x, gx)?;
                }
                if let Some(gw) = cg.weight {
                    self.acc(grads, *w, gw)?;
                }
                if let Some(b) = b {
                    self.acc(grads, *b, cg.bias)?;
                }
            }
            Op::ConvT { x, w, b, geom } => {
                let cg = kernels::conv_transpose2d_backward(
                    self.t(*x),
                    self.t(*w),
                    g,
                    *geom,
                    self.rg(&[*x]),
                    self.rg(&[*w]),
                )?;
                if let Some(gx) = cg.input {
                    self.acc(grads, *x, gx)?;
                }
                if let Some(gw) = cg.weight {
                    self.acc(grads, *w, gw)?;
                }
                if let Some(b) = b {
                    self.acc(grads, *b, cg.bias)?;
                }
            }
            Op::ReflectPad { x, pad } => {
                let gx = kernels::reflect_pad_backward(self.t(*x).shape(), g, *pad)?;
                self.acc(grads, *x, gx)?;
            }
            Op::InstanceNorm { x, inv_std } => {
                let gx = kernels::instance_norm_backward(y, inv_std, g)?;
                self.acc(grads, *x, gx)?;
            }
            Op::Relu { x } => {
                let xv = self.t(*x);
                let d = xv.data().iter().zip(g.data()).map(|(&a, &gv)| if a > T::zero() { gv } else { T::zero() });
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), d.collect())?)?;
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.t(*x);
                let s = T::of(*slope);
                let d = xv.data().iter().zip(g.data()).map(|(&a, &gv)| if a > T::zero() { gv } else { gv * s });
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), d.collect())?)?;
            }
            Op::Tanh { x } => {
                let d = y.data().iter().zip(g.data()).map(|(&t, &gv)| gv * (T::one() - t * t));
                self.acc(grads, *x, Tensor::from_vec(y.shape(), d.collect())?)?;
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, g.clone())?;
                self.acc(grads, *b, g.clone())?;
            }
            Op::MaxPool { x, argmax } => {
                let gx = kernels::max_pool2d_backward(self.t(*x).shape(), argmax, g);
                self.acc(grads, *x, gx)?;
            }
            Op::Bmm { a, b, ta, tb } => {
                let (ga, gb) = kernels::bmm_backward(self.t(*a), self.t(*b), *ta, *tb, g)?;
                self.acc(grads, *a, ga)?;
                self.acc(grads, *b, gb)?;
            }
            Op::Reshape { x } => {
                let gx = g.clone().reshape(self.t(*x).shape())?;
                self.acc(grads, *x, gx)?;
            }
            Op::Softmax { x } => {
                let gx = kernels::softmax_last_backward(y, g)?;
                self.acc(grads, *x, gx)?;
            }
            Op::Gather { x, locations } => {
                let gx = kernels::gather_locations_backward(self.t(*x).shape(), locations, g);
                self.acc(grads, *x, gx)?;
            }
            Op::Linear { x, w, b } => {
                let lg = kernels::linear_backward(self.t(*x), self.t(*w), g)?;
                if let Some(gx) = lg.input {
                    self.acc(grads, *x, gx)?;
                }
                if let Some(gw) = lg.weight {
                    self.acc(grads, *w, gw)?;
                }
                if let Some(b) = b {
                    self.acc(grads, *b, lg.bias)?;
                }
            }
            Op::L2Norm { x, norms } => {
                let gx = kernels::l2_normalize_last_backward(y, norms, g)?;
                self.acc(grads, *x, gx)?;
            }
            Op::PatchNce { q, k, probs, temperature } => {
                let up = g.data()[0].as_f64();
                let (gq, gk) = kernels::patch_nce_backward(self.t(*q), self.t(*k), probs, *temperature, up)?;
                self.acc(grads, *q, gq)?;
                self.acc(grads, *k, gk)?;
            }
            Op::MseConst { x, target } => {
                let xv = self.t(*x);
                let scale = 2.0 * g.data()[0].as_f64() / xv.numel() as f64;
                let gx = xv.map(|v| T::of(scale * (v.as_f64() - target)));
                self.acc(grads, *x, gx)?;
            }
            Op::BceConst { x, target } => {
                let xv = self.t(*x);
                let scale = g.data()[0].as_f64() / xv.numel() as f64;
                let gx = xv.map(|v| {
                    let sig = 1.0 / (1.0 + (-v.as_f64()).exp());
                    T::of(scale * (sig - target))
                });
                self.acc(grads, *x, gx)?;
            }
            Op::L1Mean { a, b } => {
                let (av, bv) = (self.t(*a), self.t(*b));
                let scale = T::of(g.data()[0].as_f64() / av.numel() as f64);
                let sign: Vec<T> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&p, &q)| {
                        if p > q {
                            scale
                        } else if p < q {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let ga = Tensor::from_vec(av.shape(), sign)?;
                let gb = ga.map(|v| -v);
                self.acc(grads, *a, ga)?;
                self.acc(grads, *b, gb)?;
            }
            Op::WeightedSum { terms } => {
                let up = g.data()[0].as_f64();
                for &(v, w) in terms {
                    let shape = self.t(v).shape().to_vec();
                    self.acc(grads, v, Tensor::full(&shape, T::of(up * w)))?;
                }
            }
        }
        Ok(())
    }
}

impl<T: Real> Exec<T> for Graph<T> {
    type V = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn param(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.clone(), true)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, geom: ConvGeom) -> Result<Var> {
        let y = kernels::conv2d(self.t(*x), self.t(*w), b.map(|b| self.t(*b)), geom)?;
        let rg = self.rg_opt(*x, *w, b.copied());
        Ok(self.push(y, Op::Conv2d { x: *x, w: *w, b: b.copied(), geom }, rg))
    }

    fn conv_transpose2d(
        &mut self,
        x: &Var,
        w: &Var,
        b: Option<&Var>,
        geom: ConvGeom,
        output_padding: usize,
    ) -> Result<Var> {
        let y = kernels::conv_transpose2d(self.t(*x), self.t(*w), b.map(|b| self.t(*b)), geom, output_padding)?;
        let rg = self.rg_opt(*x, *w, b.copied());
        Ok(self.push(y, Op::ConvT { x: *x, w: *w, b: b.copied(), geom }, rg))
    }

    fn reflect_pad(&mut self, x: &Var, pad: usize) -> Result<Var> {
        let y = kernels::reflect_pad(self.t(*x), pad)?;
        let rg = self.rg(&[*x]);
        Ok(self.push(y, Op::ReflectPad { x: *x, pad }, rg))
    }

    fn instance_norm(&mut self, x: &Var) -> Result<Var> {
        let (y, inv_std) = kernels::instance_norm(self.t(*x), NORM_EPS)?;
        let rg = self.rg(&[*x]);
        Ok(self.push(y, Op::InstanceNorm { x: *x, inv_std }, rg))
    }

    fn relu(&mut self, x: &Var) -> Var {
        self.unary(*x, |v| v.max(T::zero()), Op::Relu { x: *x })
    }

    fn leaky_relu(&mut self, x: &Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.unary(*x, move |v| if v > T::zero() { v } else { v * s }, Op::LeakyRelu { x: *x, slope })
    }

    fn tanh(&mut self, x: &Var) -> Var {
        self.unary(*x, |v| v.tanh(), Op::Tanh { x: *x })
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (av, bv) = (self.t(*a), self.t(*b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| p + q).collect();
        let y = Tensor::from_vec(av.shape(), data)?;
        let rg = self.rg(&[*a, *b]);
        Ok(self.push(y, Op::Add { a: *a, b: *b }, rg))
    }

    fn max_pool2d(&mut self, x: &Var, kernel: usize, stride: usize) -> Result<Var> {
        let (y, argmax) = kernels::max_pool2d(self.t(*x), kernel, stride)?;
        let rg = self.rg(&[*x]);
        Ok(self.push(y, Op::MaxPool { x: *x, argmax }, rg))
    }

    fn bmm(&mut self, a: &Var, b: &Var, ta: bool, tb: bool) -> Result<Var> {
        let y = kernels::bmm(self.t(*a), self.t(*b), ta, tb)?;
        let rg = self.rg(&[*a, *b]);
        Ok(self.push(y, Op::Bmm { a: *a, b: *b, ta, tb }, rg))
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let y = self.t(*x).clone().reshape(shape)?;
        let rg = self.rg(&[*x]);
        Ok(self.push(y, Op::Reshape { x: *x }, rg))
    }

    fn softmax_last(&mut self, x: &Var) -> Result<Var> {
        let y = kernels::softmax_last(self.t(*x))?;
        let rg = self.rg(&[*x]);
        Ok(self.push(y, Op::Softmax { x: *x }, rg))
    }

    fn gather_locations(&mut self, x: &Var, locations: &[usize]) -> Result<Var> {
        let y = kernels::gather_locations(self.t(*x), locations)?;
        let rg = self.rg(&[*x]);
        Ok(self.push(y, Op::Gather { x: *x, locations: locations.to_vec() }, rg))
    }

    fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let y = kernels::linear(self.t(*x), self.t(*w), b.map(|b| self.t(*b)))?;
        let rg = self.rg_opt(*x, *w, b.copied());
        Ok(self.push(y, Op::Linear { x: *x, w: *w, b: b.copied() }, rg))
    }

    fn l2_normalize_last(&mut self, x: &Var) -> Result<Var> {
        let (y, norms) = kernels::l2_normalize_last(self.t(*x))?;
        let rg = self.rg(&[*x]);
        Ok(self.push(y, Op::L2Norm { x: *x, norms }, rg))
    }

    fn detach(&mut self, x: &Var) -> Var {
        let t = self.t(*x).clone();
        self.leaf(t, false)
    }
}

/// Executor that evaluates immediately and keeps nothing for backward.
#[derive(Default)]
pub struct Eager {
    /// Query rows processed per attention block; bounds the relation-map
    /// scratch to `rows * keys` elements.
    pub attention_rows: Option<usize>,
}

const ATTENTION_BUDGET: usize = 1 << 22;

impl<T: Real> Exec<T> for Eager {
    type V = Rc<Tensor<T>>;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T> {
        v
    }

    fn constant(&mut self, t: Tensor<T>) -> Self::V {
        Rc::new(t)
    }

    fn param(&mut self, t: &Tensor<T>) -> Self::V {
        Rc::new(t.clone())
    }

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, geom: ConvGeom) -> Result<Self::V> {
        Ok(Rc::new(kernels::conv2d(x, w, b.map(|b| &**b), geom)?))
    }

    fn conv_transpose2d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        geom: ConvGeom,
        op: usize,
    ) -> Result<Self::V> {
        Ok(Rc::new(kernels::conv_transpose2d(x, w, b.map(|b| &**b), geom, op)?))
    }

    fn reflect_pad(&mut self, x: &Self::V, pad: usize) -> Result<Self::V> {
        Ok(Rc::new(kernels::reflect_pad(x, pad)?))
    }

    fn instance_norm(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(kernels::instance_norm(x, NORM_EPS)?.0))
    }

    fn relu(&mut self, x: &Self::V) -> Self::V {
        Rc::new(x.map(|v| v.max(T::zero())))
    }

    fn leaky_relu(&mut self, x: &Self::V, slope: f64) -> Self::V {
        let s = T::of(slope);
        Rc::new(x.map(|v| if v > T::zero() { v } else { v * s }))
    }

    fn tanh(&mut self, x: &Self::V) -> Self::V {
        Rc::new(x.map(|v| v.tanh()))
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        if a.shape() != b.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&p, &q)| p + q).collect();
        Ok(Rc::new(Tensor::from_vec(a.shape(), data)?))
    }

    fn max_pool2d(&mut self, x: &Self::V, kernel: usize, stride: usize) -> Result<Self::V> {
        Ok(Rc::new(kernels::max_pool2d(x, kernel, stride)?.0))
    }

    fn bmm(&mut self, a: &Self::V, b: &Self::V, ta: bool, tb: bool) -> Result<Self::V> {
        Ok(Rc::new(kernels::bmm(a, b, ta, tb)?))
    }

    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V> {
        Ok(Rc::new((**x).clone().reshape(shape)?))
    }

    fn softmax_last(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(kernels::softmax_last(x)?))
    }

    fn gather_locations(&mut self, x: &Self::V, locations: &[usize]) -> Result<Self::V> {
        Ok(Rc::new(kernels::gather_locations(x, locations)?))
    }

    fn linear(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V> {
        Ok(Rc::new(kernels::linear(x, w, b.map(|b| &**b))?))
    }

    fn l2_normalize_last(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(kernels::l2_normalize_last(x)?.0))
    }

    fn detach(&mut self, x: &Self::V) -> Self::V {
        x.clone()
    }

    fn attention(&mut self, query: &Self::V, key: &Self::V, value: &Self::V, gate: &Self::V) -> Result<Self::V> {
        let (n, c, q) = query.dims3()?;
        let (nk, ck, k) = key.dims3()?;
        if value.shape() != key.shape() || nk != n || ck != c {
            return Err(shape_err(
                "attention",
                format!("query {:?}, key {:?}, value {:?}", query.shape(), key.shape(), value.shape()),
            ));
        }
        if gate.numel() != 1 {
            return Err(shape_err("attention", "gate must hold a single weight"));
        }
        let gate = gate.data()[0];
        let rows = self.attention_rows.unwrap_or(ATTENTION_BUDGET / k.max(1)).clamp(1, q.max(1));
        let mut out = vec![T::zero(); n * c * q];
        let mut rel = vec![T::zero(); rows * k];
        for ni in 0..n {
            let qn = &query.data()[ni * c * q..(ni + 1) * c * q];
            let kn = &key.data()[ni * c * k..(ni + 1) * c * k];
            let vn = &value.data()[ni * c * k..(ni + 1) * c * k];
            let on = &mut out[ni * c * q..(ni + 1) * c * q];
            let mut r0 = 0;
            while r0 < q {
                let r1 = (r0 + rows).min(q);
                let m = r1 - r0;
                let qchunk = MatRef { data: &qn[r0..], rows: c, cols: m, row_stride: q, col_stride: 1 };
                T::gemm(
                    T::one(),
                    qchunk.t(),
                    MatRef::dense(kn, c, k),
                    T::zero(),
                    MatMut::dense(&mut rel[..m * k], m, k),
                );
                for row in rel[..m * k].chunks_mut(k) {
                    let mut mx = T::neg_infinity();
                    for v in row.iter_mut() {
                        *v = v.max(T::zero()) * gate;
                        mx = mx.max(*v);
                    }
                    let mut sum = 0.0f64;
                    for v in row.iter_mut() {
                        *v = (*v - mx).exp();
                        sum += v.as_f64();
                    }
                    let inv = T::of(1.0 / sum);
                    for v in row.iter_mut() {
                        *v *= inv;
                    }
                }
                let dst = MatMut { data: &mut on[r0..], rows: c, cols: m, row_stride: q, col_stride: 1 };
                T::gemm(T::one(), MatRef::dense(vn, c, k), MatRef::dense(&rel[..m * k], m, k).t(), T::zero(), dst);
                r0 = r1;
            }
        }
        Ok(Rc::new(Tensor::from_vec(&[n, c, q], out)?))
    }
}
