//! Differentiable operations behind a single [`Graph`] trait so that the
//! network wiring is written once and runs either eagerly or on a [`Tape`].

use std::rc::Rc;

use num_complex::Complex64;

use super::array::{conv2d, conv2d_backward, Array};
use crate::error::{invalid, LabError, Result};
use crate::forward::{nll_gradient, normal_operator, MulticoilKSpace, NllConfig, SensitivityMaps};
use crate::image::{ComplexImage2D, RealImage2D};
use crate::metrics::ssim_and_grad;
use crate::sampling::SamplingMask;

/// The data-consistency gradient `x ↦ ∇ nll(x)` of one acquisition.
#[derive(Debug, Clone)]
pub struct Likelihood {
    pub y: MulticoilKSpace,
    pub sensitivities: SensitivityMaps,
    pub mask: SamplingMask,
    pub cfg: NllConfig,
}

/// Two-channel `[re, im]` feature map from a complex image.
pub fn complex_to_array(img: &ComplexImage2D) -> Array {
    let (h, w) = img.shape();
    let mut data = Vec::with_capacity(2 * h * w);
    data.extend(img.data().iter().map(|v| v.re));
    data.extend(img.data().iter().map(|v| v.im));
    Array::new(vec![2, h, w], data)
}

pub fn array_to_complex(a: &Array) -> Result<ComplexImage2D> {
    let (c, h, w) = a.chw();
    if c != 2 {
        return invalid(format!("expected 2 channels, got {c}"));
    }
    let hw = h * w;
    ComplexImage2D::new(
        h,
        w,
        (0..hw).map(|p| Complex64::new(a.data[p], a.data[hw + p])).collect(),
    )
}

impl Likelihood {
    pub fn gradient(&self, x: &Array) -> Result<Array> {
        let g = nll_gradient(&array_to_complex(x)?, &self.y, &self.sensitivities, &self.mask, self.cfg)?;
        Ok(complex_to_array(&g))
    }

    /// Vector-Jacobian product of [`Self::gradient`]. The real Jacobian of
    /// `x ↦ A*A x / σ²` is symmetric, so this is the same operator.
    fn backward(&self, g: &Array) -> Result<Array> {
        let n = normal_operator(&array_to_complex(g)?, &self.sensitivities, &self.mask)?;
        Ok(complex_to_array(&n.scaled(1.0 / self.cfg.sigma_sq)))
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn magnitude(x: &Array) -> Array {
    let (_, h, w) = x.chw();
    let hw = h * w;
    let data = (0..hw).map(|p| x.data[p].hypot(x.data[hw + p])).collect();
    Array::new(vec![1, h, w], data)
}

fn to_real_image(a: &Array) -> Result<RealImage2D> {
    let (_, h, w) = a.chw();
    RealImage2D::new(h, w, a.data.clone())
}

fn l1_mean(a: &Array, target: &RealImage2D) -> f64 {
    let s: f64 = a.data.iter().zip(target.data()).map(|(p, t)| (p - t).abs()).sum();
    s / a.len() as f64
}

pub trait Graph {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Array;
    fn constant(&mut self, a: Array) -> Self::V;

    fn conv(&mut self, x: &Self::V, weight: &Self::V, bias: &Self::V) -> Self::V;
    fn relu(&mut self, x: &Self::V) -> Self::V;
    fn sigmoid(&mut self, x: &Self::V) -> Self::V;
    fn tanh(&mut self, x: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn scale(&mut self, a: &Self::V, s: f64) -> Self::V;
    fn concat(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn channels(&mut self, a: &Self::V, start: usize, len: usize) -> Self::V;
    fn nll_grad(&mut self, x: &Self::V, lik: &Rc<Likelihood>) -> Result<Self::V>;
}

/// Plain evaluation without recording.
#[derive(Debug, Default)]
pub struct Eager;

impl Graph for Eager {
    type V = Rc<Array>;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Array {
        v
    }
    fn constant(&mut self, a: Array) -> Self::V {
        Rc::new(a)
    }
    fn conv(&mut self, x: &Self::V, weight: &Self::V, bias: &Self::V) -> Self::V {
        Rc::new(conv2d(x, weight, bias))
    }
    fn relu(&mut self, x: &Self::V) -> Self::V {
        Rc::new(x.map(|v| v.max(0.0)))
    }
    fn sigmoid(&mut self, x: &Self::V) -> Self::V {
        Rc::new(x.map(sigmoid))
    }
    fn tanh(&mut self, x: &Self::V) -> Self::V {
        Rc::new(x.map(f64::tanh))
    }
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(a.zip(b, |u, v| u + v))
    }
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(a.zip(b, |u, v| u - v))
    }
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(a.zip(b, |u, v| u * v))
    }
    fn scale(&mut self, a: &Self::V, s: f64) -> Self::V {
        Rc::new(a.map(|u| u * s))
    }
    fn concat(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(Array::concat(a, b))
    }
    fn channels(&mut self, a: &Self::V, start: usize, len: usize) -> Self::V {
        Rc::new(a.channels(start, len))
    }
    fn nll_grad(&mut self, x: &Self::V, lik: &Rc<Likelihood>) -> Result<Self::V> {
        Ok(Rc::new(lik.gradient(x)?))
    }
}

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv(NodeId, NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat(NodeId, NodeId),
    Channels(NodeId, usize),
    NllGrad(NodeId, Rc<Likelihood>),
    Magnitude(NodeId),
    L1Mean(NodeId, Rc<RealImage2D>),
    /// `1 − SSIM(input, target)` with its gradient stored at record time.
    SsimLoss(NodeId, Array),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
}

/// Reverse-mode recording of every operation applied to its nodes.
#[derive(Debug, Default)]
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

    fn push(&mut self, value: Array, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, a: Array) -> NodeId {
        self.push(a, Op::Leaf)
    }

    pub fn magnitude(&mut self, x: NodeId) -> NodeId {
        let v = magnitude(&self.nodes[x].value);
        self.push(v, Op::Magnitude(x))
    }

    /// Mean absolute difference to a fixed target, as a scalar node.
    pub fn l1_mean(&mut self, x: NodeId, target: &Rc<RealImage2D>) -> Result<NodeId> {
        let a = &self.nodes[x].value;
        let (_, h, w) = a.chw();
        if (h, w) != target.shape() {
            return invalid("L1 target shape mismatch");
        }
        let v = l1_mean(a, target);
        Ok(self.push(Array::scalar(v), Op::L1Mean(x, Rc::clone(target))))
    }

    /// `1 − SSIM(x, target)` as a scalar node.
    pub fn ssim_loss(&mut self, x: NodeId, target: &RealImage2D) -> Result<NodeId> {
        let a = &self.nodes[x].value;
        let (s, g) = ssim_and_grad(&to_real_image(a)?, target)?;
        let grad = Array::new(a.shape.clone(), g.data().iter().map(|v| -v).collect());
        Ok(self.push(Array::scalar(1.0 - s), Op::SsimLoss(x, grad)))
    }

    /// Which side of its kink every non-smooth operation evaluated on: ReLU
    /// inputs, L1 residual signs and zero magnitudes.
    pub fn kink_pattern(&self) -> Vec<i8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let val = |n: NodeId| &self.nodes[n].value;
            match &node.op {
                Op::Relu(x) => out.extend(val(*x).data.iter().map(|&v| (v > 0.0) as i8)),
                Op::Magnitude(_) => out.extend(node.value.data.iter().map(|&v| (v > 0.0) as i8)),
                Op::L1Mean(x, t) => out.extend(val(*x).data.iter().zip(t.data()).map(|(p, t)| (p - t).signum() as i8)),
                _ => {}
            }
        }
        out
    }

    /// Gradients of scalar node `root` with respect to every node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.nodes[root].value.len() != 1 {
            return invalid("backward needs a scalar root");
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Array::new(self.nodes[root].value.shape.clone(), vec![1.0]));

        fn acc(grads: &mut [Option<Array>], id: NodeId, g: Array) {
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let val = |n: NodeId| &self.nodes[n].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Conv(x, wt, b) => {
                    let (gx, gw, gb) = conv2d_backward(val(*x), val(*wt), &g);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *wt, gw);
                    acc(&mut grads, *b, gb);
                }
                Op::Relu(x) => {
                    let gx = g.zip(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = g.zip(&node.value, |gv, s| gv * s * (1.0 - s));
                    acc(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let gx = g.zip(&node.value, |gv, t| gv * (1.0 - t * t));
                    acc(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, g.zip(val(*b), |u, v| u * v));
                    acc(&mut grads, *b, g.zip(val(*a), |u, v| u * v));
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|v| v * s)),
                Op::Concat(a, b) => {
                    let (ca, _, _) = val(*a).chw();
                    let (cb, _, _) = val(*b).chw();
                    acc(&mut grads, *a, g.channels(0, ca));
                    acc(&mut grads, *b, g.channels(ca, cb));
                }
                Op::Channels(a, start) => {
                    let (c, h, w) = val(*a).chw();
                    let (len, _, _) = g.chw();
                    let mut full = Array::zeros(vec![c, h, w]);
                    full.data[start * h * w..(start + len) * h * w].copy_from_slice(&g.data);
                    acc(&mut grads, *a, full);
                }
                Op::NllGrad(x, lik) => acc(&mut grads, *x, lik.backward(&g)?),
                Op::Magnitude(x) => {
                    let xv = val(*x);
                    let (_, h, w) = xv.chw();
                    let hw = h * w;
                    let mut gx = Array::zeros(xv.shape.clone());
                    for p in 0..hw {
                        let m = node.value.data[p];
                        if m > 0.0 {
                            gx.data[p] = g.data[p] * xv.data[p] / m;
                            gx.data[hw + p] = g.data[p] * xv.data[hw + p] / m;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::L1Mean(x, target) => {
                    let xv = val(*x);
                    let n = xv.len() as f64;
                    let scale = g.data[0] / n;
                    let data = xv
                        .data
                        .iter()
                        .zip(target.data())
                        .map(|(p, t)| scale * (p - t).signum() * ((p - t) != 0.0) as u8 as f64)
                        .collect();
                    acc(&mut grads, *x, Array::new(xv.shape.clone(), data));
                }
                Op::SsimLoss(x, grad) => acc(&mut grads, *x, grad.map(|v| v * g.data[0])),
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`]; nodes that do not influence the root have
/// no gradient.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.grads[id].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array> {
        self.grads[id].take()
    }
}

impl Graph for Tape {
    type V = NodeId;

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Array {
        &self.nodes[*v].value
    }
    fn constant(&mut self, a: Array) -> NodeId {
        self.push(a, Op::Leaf)
    }
    fn conv(&mut self, x: &NodeId, weight: &NodeId, bias: &NodeId) -> NodeId {
        let v = conv2d(&self.nodes[*x].value, &self.nodes[*weight].value, &self.nodes[*bias].value);
        self.push(v, Op::Conv(*x, *weight, *bias))
    }
    fn relu(&mut self, x: &NodeId) -> NodeId {
        let v = self.nodes[*x].value.map(|v| v.max(0.0));
        self.push(v, Op::Relu(*x))
    }
    fn sigmoid(&mut self, x: &NodeId) -> NodeId {
        let v = self.nodes[*x].value.map(sigmoid);
        self.push(v, Op::Sigmoid(*x))
    }
    fn tanh(&mut self, x: &NodeId) -> NodeId {
        let v = self.nodes[*x].value.map(f64::tanh);
        self.push(v, Op::Tanh(*x))
    }
    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = self.nodes[*a].value.zip(&self.nodes[*b].value, |u, v| u + v);
        self.push(v, Op::Add(*a, *b))
    }
    fn sub(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = self.nodes[*a].value.zip(&self.nodes[*b].value, |u, v| u - v);
        self.push(v, Op::Sub(*a, *b))
    }
    fn mul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = self.nodes[*a].value.zip(&self.nodes[*b].value, |u, v| u * v);
        self.push(v, Op::Mul(*a, *b))
    }
    fn scale(&mut self, a: &NodeId, s: f64) -> NodeId {
        let v = self.nodes[*a].value.map(|u| u * s);
        self.push(v, Op::Scale(*a, s))
    }
    fn concat(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = Array::concat(&self.nodes[*a].value, &self.nodes[*b].value);
        self.push(v, Op::Concat(*a, *b))
    }
    fn channels(&mut self, a: &NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[*a].value.channels(start, len);
        self.push(v, Op::Channels(*a, start))
    }
    fn nll_grad(&mut self, x: &NodeId, lik: &Rc<Likelihood>) -> Result<NodeId> {
        let v = lik.gradient(&self.nodes[*x].value)?;
        Ok(self.push(v, Op::NllGrad(*x, Rc::clone(lik))))
    }
}

/// Maps a non-finite array to a divergence error.
pub fn ensure_finite(a: &Array, what: &str) -> Result<()> {
    if a.is_finite() {
        Ok(())
    } else {
        Err(LabError::NumericalDivergence(format!("non-finite {what}")))
    }
}
