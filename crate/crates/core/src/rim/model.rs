//! The recurrent cell, its unrolled inference and the trajectory loss.

use std::rc::Rc;

use rand::Rng;

use super::array::Array;
use super::graph::{array_to_complex, complex_to_array, ensure_finite, Eager, Graph, Likelihood, NodeId, Tape};
use crate::error::{invalid, Result};
use crate::forward::{adjoint, MulticoilKSpace, NllConfig, SensitivityMaps};
use crate::image::{ComplexImage2D, RealImage2D};
use crate::metrics::ssim;
use crate::sampling::SamplingMask;
use crate::seed;

/// Input channels of the cell: `Re x, Im x, Re ∇, Im ∇`.
pub const INPUT_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RimConfig {
    pub time_steps: usize,
    pub hidden_channels: usize,
    /// Kernel sizes of the input conv, the recurrent/middle convs and the
    /// output conv.
    pub kernel_sizes: (usize, usize, usize),
    /// Divide the cell input by the recorded `x₀` standard deviation and
    /// multiply the update by it.
    pub standardize_inputs: bool,
}

impl Default for RimConfig {
    fn default() -> Self {
        Self {
            time_steps: 8,
            hidden_channels: 16,
            kernel_sizes: (5, 3, 3),
            standardize_inputs: true,
        }
    }
}

impl RimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_steps == 0 {
            return invalid("time_steps must be at least 1");
        }
        if self.hidden_channels == 0 {
            return invalid("hidden_channels must be at least 1");
        }
        let (a, b, c) = self.kernel_sizes;
        if [a, b, c].iter().any(|k| k % 2 == 0) {
            return invalid(format!("kernel sizes must be odd, got {:?}", self.kernel_sizes));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn parameter_specs(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.hidden_channels;
        let (ki, kh, ko) = self.kernel_sizes;
        let mut specs = vec![
            ("conv_in.weight".to_string(), vec![h, INPUT_CHANNELS, ki, ki]),
            ("conv_in.bias".to_string(), vec![h]),
        ];
        let gru = |name: &str| {
            vec![
                (format!("{name}.gates.weight"), vec![2 * h, 2 * h, kh, kh]),
                (format!("{name}.gates.bias"), vec![2 * h]),
                (format!("{name}.candidate.weight"), vec![h, 2 * h, kh, kh]),
                (format!("{name}.candidate.bias"), vec![h]),
            ]
        };
        specs.extend(gru("gru1"));
        specs.push(("conv_mid.weight".to_string(), vec![h, h, kh, kh]));
        specs.push(("conv_mid.bias".to_string(), vec![h]));
        specs.extend(gru("gru2"));
        specs.push(("conv_out.weight".to_string(), vec![2, h, ko, ko]));
        specs.push(("conv_out.bias".to_string(), vec![2]));
        specs
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_specs().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

// Indices into the parameter list.
const CONV_IN: usize = 0;
const GRU1: usize = 2;
const CONV_MID: usize = 6;
const GRU2: usize = 8;
const CONV_OUT: usize = 12;
const N_PARAMS: usize = 14;

#[derive(Debug, Clone, PartialEq)]
pub struct RimModel {
    pub config: RimConfig,
    pub params: Vec<Array>,
    /// Standard deviation used by `standardize_inputs`; 1 until calibrated.
    pub input_std: f64,
}

impl RimModel {
    /// Uniform `±√(1/fan_in)` weights and biases, output conv zeroed.
    pub fn new(config: RimConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(init_seed);
        let specs = config.parameter_specs();
        let mut params = Vec::with_capacity(specs.len());
        let mut bound = 0.0;
        for (name, shape) in &specs {
            if shape.len() == 4 {
                bound = (1.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt();
            }
            let n: usize = shape.iter().product();
            let data = if name.starts_with("conv_out") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            params.push(Array::new(shape.clone(), data));
        }
        Ok(Self { config, params, input_std: 1.0 })
    }

    pub fn zeros(config: RimConfig) -> Result<Self> {
        config.validate()?;
        let params = config.parameter_specs().into_iter().map(|(_, s)| Array::zeros(s)).collect();
        Ok(Self { config, params, input_std: 1.0 })
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.config.parameter_specs().into_iter().map(|(n, _)| n).collect()
    }

    pub fn parameter(&self, name: &str) -> Option<&Array> {
        let idx = self.parameter_names().iter().position(|n| n == name)?;
        self.params.get(idx)
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Array> {
        let idx = self.parameter_names().iter().position(|n| n == name)?;
        self.params.get_mut(idx)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = self.config.parameter_specs();
        if specs.len() != self.params.len() {
            return invalid("parameter list does not match config");
        }
        for ((name, shape), p) in specs.iter().zip(&self.params) {
            if &p.shape != shape {
                return invalid(format!("parameter {name} has shape {:?}, expected {shape:?}", p.shape));
            }
            if !p.is_finite() {
                return invalid(format!("parameter {name} is not finite"));
            }
        }
        if !(self.input_std > 0.0 && self.input_std.is_finite()) {
            return invalid("input_std must be positive");
        }
        Ok(())
    }

    fn input_scale(&self) -> Option<f64> {
        self.config.standardize_inputs.then_some(self.input_std)
    }
}

/// Hidden states of the two recurrent blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct RimState {
    pub s1: Array,
    pub s2: Array,
}

impl RimState {
    pub fn zeros(hidden: usize, height: usize, width: usize) -> Self {
        Self {
            s1: Array::zeros(vec![hidden, height, width]),
            s2: Array::zeros(vec![hidden, height, width]),
        }
    }
}

fn conv_gru<G: Graph>(g: &mut G, p: &[G::V], input: &G::V, state: &G::V, hidden: usize) -> G::V {
    let both = g.concat(input, state);
    let pre = g.conv(&both, &p[0], &p[1]);
    let gates = g.sigmoid(&pre);
    let z = g.channels(&gates, 0, hidden);
    let r = g.channels(&gates, hidden, hidden);
    let rs = g.mul(&r, state);
    let cand_in = g.concat(input, &rs);
    let cand_pre = g.conv(&cand_in, &p[2], &p[3]);
    let cand = g.tanh(&cand_pre);
    let diff = g.sub(&cand, state);
    let upd = g.mul(&z, &diff);
    g.add(state, &upd)
}

/// One application of the cell; returns `(Δx, s1', s2')`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn cell<G: Graph>(
    g: &mut G,
    p: &[G::V],
    hidden: usize,
    input_scale: Option<f64>,
    x: &G::V,
    grad: &G::V,
    s1: &G::V,
    s2: &G::V,
) -> (G::V, G::V, G::V) {
    let mut inp = g.concat(x, grad);
    if let Some(std) = input_scale {
        inp = g.scale(&inp, 1.0 / std);
    }
    let a = g.conv(&inp, &p[CONV_IN], &p[CONV_IN + 1]);
    let a = g.relu(&a);
    let s1n = conv_gru(g, &p[GRU1..GRU1 + 4], &a, s1, hidden);
    let b = g.conv(&s1n, &p[CONV_MID], &p[CONV_MID + 1]);
    let b = g.relu(&b);
    let s2n = conv_gru(g, &p[GRU2..GRU2 + 4], &b, s2, hidden);
    let mut dx = g.conv(&s2n, &p[CONV_OUT], &p[CONV_OUT + 1]);
    if let Some(std) = input_scale {
        dx = g.scale(&dx, std);
    }
    (dx, s1n, s2n)
}

/// Unrolls `T` steps from `x0`, returning `x_1 … x_T`.
pub(crate) fn unroll<G: Graph>(
    g: &mut G,
    p: &[G::V],
    model: &RimModel,
    lik: &Rc<Likelihood>,
    x0: G::V,
) -> Result<Vec<G::V>> {
    let (_, h, w) = g.value(&x0).chw();
    let hidden = model.config.hidden_channels;
    let mut s1 = g.constant(Array::zeros(vec![hidden, h, w]));
    let mut s2 = g.constant(Array::zeros(vec![hidden, h, w]));
    let mut x = x0;
    let mut out = Vec::with_capacity(model.config.time_steps);
    for t in 0..model.config.time_steps {
        let grad = g.nll_grad(&x, lik)?;
        let (dx, a, b) = cell(g, p, hidden, model.input_scale(), &x, &grad, &s1, &s2);
        x = g.add(&x, &dx);
        ensure_finite(g.value(&x), &format!("reconstruction at step {}", t + 1))?;
        s1 = a;
        s2 = b;
        out.push(x.clone());
    }
    Ok(out)
}

/// `Δx_t, s_{t+1} = f(∇_t, x_t, s_t)`.
pub fn rim_step(
    model: &RimModel,
    x_t: &ComplexImage2D,
    grad_t: &ComplexImage2D,
    state: &RimState,
) -> Result<(ComplexImage2D, RimState)> {
    model.validate()?;
    let (h, w) = x_t.shape();
    if grad_t.shape() != (h, w) {
        return invalid(format!("gradient shape {:?} differs from image {:?}", grad_t.shape(), (h, w)));
    }
    let expected = vec![model.config.hidden_channels, h, w];
    if state.s1.shape != expected || state.s2.shape != expected {
        return invalid(format!("state shape must be {expected:?}"));
    }
    let mut g = Eager;
    let p: Vec<_> = model.params.iter().map(|a| g.constant(a.clone())).collect();
    let x = g.constant(complex_to_array(x_t));
    let grad = g.constant(complex_to_array(grad_t));
    let s1 = g.constant(state.s1.clone());
    let s2 = g.constant(state.s2.clone());
    let (dx, s1n, s2n) = cell(&mut g, &p, model.config.hidden_channels, model.input_scale(), &x, &grad, &s1, &s2);
    Ok((
        array_to_complex(&dx)?,
        RimState { s1: (*s1n).clone(), s2: (*s2n).clone() },
    ))
}

fn likelihood(y: &MulticoilKSpace, s: &SensitivityMaps, mask: &SamplingMask, cfg: NllConfig) -> Result<Rc<Likelihood>> {
    let shape = mask.shape();
    if y.shape() != shape || s.shape() != shape {
        return invalid("k-space, sensitivities and mask must share one shape");
    }
    if y.n_coils() != s.n_coils() {
        return invalid("coil count differs between k-space and sensitivities");
    }
    Ok(Rc::new(Likelihood {
        y: y.clone(),
        sensitivities: s.clone(),
        mask: mask.clone(),
        cfg,
    }))
}

/// Zero-filled SENSE start `x₀ = Σₖ Sᵏ* F⁻¹(ỹᵏ)`.
pub fn initial_estimate(y: &MulticoilKSpace, s: &SensitivityMaps) -> Result<ComplexImage2D> {
    adjoint(y, s)
}

/// Trajectory `x_1 … x_T` of the unrolled machine.
pub fn rim_infer(
    model: &RimModel,
    y: &MulticoilKSpace,
    s: &SensitivityMaps,
    mask: &SamplingMask,
    cfg: NllConfig,
) -> Result<Vec<ComplexImage2D>> {
    model.validate()?;
    let lik = likelihood(y, s, mask, cfg)?;
    let mut g = Eager;
    let p: Vec<_> = model.params.iter().map(|a| g.constant(a.clone())).collect();
    let x0 = g.constant(complex_to_array(&initial_estimate(y, s)?));
    unroll(&mut g, &p, model, &lik, x0)?
        .iter()
        .map(|v| array_to_complex(v))
        .collect()
}

/// `(1/T) Σₜ (mean|x̃ − |x_t|| + 1 − SSIM(|x_t|, x̃))`.
pub fn rim_loss(trajectory: &[ComplexImage2D], target: &RealImage2D) -> Result<f64> {
    if trajectory.is_empty() {
        return invalid("trajectory is empty");
    }
    let mut total = 0.0;
    for x in trajectory {
        if x.shape() != target.shape() {
            return invalid(format!("trajectory image {:?} differs from target {:?}", x.shape(), target.shape()));
        }
        let mag = x.abs();
        let l1: f64 = mag.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>()
            / mag.data().len() as f64;
        total += l1 + (1.0 - ssim(&mag, target)?);
    }
    Ok(total * (1.0 / trajectory.len() as f64))
}

/// A recorded forward pass with the loss as root.
pub struct Recorded {
    pub tape: Tape,
    pub params: Vec<NodeId>,
    pub loss: NodeId,
}

/// Records the unrolled machine and its loss for one acquisition.
pub fn record_loss(
    model: &RimModel,
    y: &MulticoilKSpace,
    s: &SensitivityMaps,
    mask: &SamplingMask,
    cfg: NllConfig,
    target: &Rc<RealImage2D>,
) -> Result<Recorded> {
    model.validate()?;
    if target.shape() != mask.shape() {
        return invalid("target shape differs from the acquisition");
    }
    let lik = likelihood(y, s, mask, cfg)?;
    let mut tape = Tape::new();
    let params: Vec<NodeId> = model.params.iter().map(|a| tape.leaf(a.clone())).collect();
    let x0 = tape.constant(complex_to_array(&initial_estimate(y, s)?));
    let traj = unroll(&mut tape, &params, model, &lik, x0)?;
    let mut total: Option<NodeId> = None;
    for x in traj.iter() {
        let m = tape.magnitude(*x);
        let l1 = tape.l1_mean(m, target)?;
        let ss = tape.ssim_loss(m, target)?;
        let term = tape.add(&l1, &ss);
        total = Some(match total {
            Some(t) => tape.add(&t, &term),
            None => term,
        });
    }
    let loss = tape.scale(&total.expect("T >= 1"), 1.0 / traj.len() as f64);
    Ok(Recorded { tape, params, loss })
}

/// Loss value and per-parameter gradients for one acquisition.
pub fn loss_and_gradients(
    model: &RimModel,
    y: &MulticoilKSpace,
    s: &SensitivityMaps,
    mask: &SamplingMask,
    cfg: NllConfig,
    target: &RealImage2D,
) -> Result<(f64, Vec<Array>)> {
    let rec = record_loss(model, y, s, mask, cfg, &Rc::new(target.clone()))?;
    let loss = rec.tape.value(&rec.loss).data[0];
    let mut grads = rec.tape.backward(rec.loss)?;
    let out = rec
        .params
        .iter()
        .zip(&model.params)
        .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Array::zeros(p.shape.clone())))
        .collect();
    Ok((loss, out))
}

const _: () = assert!(N_PARAMS == CONV_OUT + 2);
