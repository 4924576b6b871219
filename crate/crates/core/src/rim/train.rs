//! Adam training over freshly masked acquisitions, and a finite-difference
//! check of the tape gradients.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;

use super::array::Array;
use super::model::{initial_estimate, loss_and_gradients, record_loss, RimModel};
use crate::error::{invalid, LabError, Result};
use crate::forward::{estimate_sensitivities_from_acs, MulticoilKSpace, NllConfig, SensitivityMaps};
use crate::image::RealImage2D;
use crate::sampling::{apply_mask, extract_acs, make_mask, MaskRng, MaskScheme, SamplingMask};
use crate::seed;

const ORDER_STREAM: u64 = 0x6f72_6465_72;
const MASK_STREAM: u64 = 0x6d61_736b;
const ACCEL_STREAM: u64 = 0x6163_63;

/// One fully sampled slice with its reconstruction target.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub volume: usize,
    pub kspace: MulticoilKSpace,
    pub target: RealImage2D,
    /// Fixed maps; when absent they are estimated from each mask's ACS region.
    pub sensitivities: Option<SensitivityMaps>,
}

/// A subsampled acquisition ready for the network.
#[derive(Debug, Clone)]
pub struct Acquisition {
    pub y: MulticoilKSpace,
    pub sensitivities: SensitivityMaps,
    pub mask: SamplingMask,
    pub target: RealImage2D,
    pub nll: NllConfig,
}

impl Acquisition {
    pub fn loss_and_gradients(&self, model: &RimModel) -> Result<(f64, Vec<Array>)> {
        loss_and_gradients(model, &self.y, &self.sensitivities, &self.mask, self.nll, &self.target)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_iters: usize,
    /// Iterations at which the learning rate is multiplied by `decay_factor`.
    pub decay_at: Vec<usize>,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Accelerations drawn uniformly per sample and iteration.
    pub accelerations: Vec<f64>,
    pub scheme: MaskScheme,
    pub seed: u64,
    pub nll: NllConfig,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 1,
            learning_rate: 1e-4,
            warmup_iters: 100,
            decay_at: Vec::new(),
            decay_factor: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            accelerations: vec![5.0, 10.0],
            scheme: MaskScheme::Radial,
            seed: 0,
            nll: NllConfig::default(),
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return invalid("learning_rate must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return invalid("Adam hyper-parameters out of range");
        }
        if self.accelerations.is_empty() || self.accelerations.iter().any(|&r| !(r >= 1.0)) {
            return invalid("accelerations must be a non-empty list of values >= 1");
        }
        if matches!(self.scheme, MaskScheme::Custom) {
            return invalid("training needs a generated mask scheme");
        }
        Ok(())
    }

    /// Linear warm-up followed by step decay.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let warm = if self.warmup_iters > 0 {
            ((iteration + 1) as f64 / self.warmup_iters as f64).min(1.0)
        } else {
            1.0
        };
        let decays = self.decay_at.iter().filter(|&&m| iteration >= m).count();
        self.learning_rate * warm * self.decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub steps: u64,
}

impl Adam {
    pub fn new(params: &[Array]) -> Self {
        let zeros = || params.iter().map(|p| Array::zeros(p.shape.clone())).collect();
        Self { m: zeros(), v: zeros(), steps: 0 }
    }

    pub fn update(&mut self, params: &mut [Array], grads: &[Array], lr: f64, sched: &TrainSchedule) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - sched.beta1.powi(t);
        let c2 = 1.0 - sched.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g.data[i];
                m.data[i] = sched.beta1 * m.data[i] + (1.0 - sched.beta1) * gi;
                v.data[i] = sched.beta2 * v.data[i] + (1.0 - sched.beta2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= lr * mh / (vh.sqrt() + sched.eps);
            }
        }
    }
}

/// Resumable optimizer loop.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: RimModel,
    pub adam: Adam,
    pub iteration: usize,
    pub schedule: TrainSchedule,
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n as f64;
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
}

impl Trainer {
    pub fn new(model: RimModel, schedule: TrainSchedule) -> Result<Self> {
        schedule.validate()?;
        model.validate()?;
        let adam = Adam::new(&model.params);
        Ok(Self { model, adam, iteration: 0, schedule })
    }

    /// Continues from a saved optimizer state.
    pub fn resume(model: RimModel, adam: Adam, iteration: usize, schedule: TrainSchedule) -> Result<Self> {
        schedule.validate()?;
        model.validate()?;
        if adam.m.len() != model.params.len() || adam.m.iter().zip(&model.params).any(|(m, p)| m.shape != p.shape) {
            return invalid("optimizer state does not match the model");
        }
        Ok(Self { model, adam, iteration, schedule })
    }

    fn iterations_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.schedule.batch_size.min(n_samples))
    }

    /// Epoch that `iteration` belongs to.
    pub fn epoch_of(&self, n_samples: usize, iteration: usize) -> usize {
        iteration / self.iterations_per_epoch(n_samples)
    }

    /// Indices of the samples used at `iteration`.
    pub fn batch_indices(&self, n_samples: usize, iteration: usize) -> Vec<usize> {
        let bs = self.schedule.batch_size.min(n_samples);
        let per_epoch = self.iterations_per_epoch(n_samples);
        let (epoch, pos) = (iteration / per_epoch, iteration % per_epoch);
        let mut order: Vec<usize> = (0..n_samples).collect();
        order.shuffle(&mut seed::rng(seed::derive(self.schedule.seed, &[ORDER_STREAM, epoch as u64])));
        order[pos * bs..((pos + 1) * bs).min(n_samples)].to_vec()
    }

    /// The subsampled acquisition of `sample` during `epoch`. Slices of one
    /// volume share their mask and acceleration within an epoch.
    pub fn acquisition(&self, sample: &TrainingSample, epoch: usize) -> Result<Acquisition> {
        let keys = [epoch as u64, sample.volume as u64];
        let mut pick = seed::rng(seed::derive(self.schedule.seed, &[&[ACCEL_STREAM][..], &keys].concat()));
        let accel = self.schedule.accelerations[pick.gen_range(0..self.schedule.accelerations.len())];
        let (h, w) = sample.kspace.shape();
        let mask_seed = seed::derive(self.schedule.seed, &[&[MASK_STREAM][..], &keys].concat());
        let mask = make_mask(self.schedule.scheme, h, w, accel, MaskRng::new(mask_seed))?;
        let y = apply_mask(&mask, &sample.kspace)?;
        let sensitivities = match &sample.sensitivities {
            Some(s) => s.clone(),
            None => estimate_sensitivities_from_acs(&y, &extract_acs(&mask)?)?,
        };
        Ok(Acquisition { y, sensitivities, mask, target: sample.target.clone(), nll: self.schedule.nll })
    }

    /// One optimizer step; returns the batch-mean loss.
    pub fn step(&mut self, data: &[TrainingSample]) -> Result<f64> {
        if data.is_empty() {
            return invalid("training set is empty");
        }
        let shape = data[0].kspace.shape();
        if data.iter().any(|s| s.kspace.shape() != shape) {
            return invalid("training slices differ in size");
        }
        let it = self.iteration;
        let epoch = self.epoch_of(data.len(), it);
        let batch: Vec<Acquisition> = self
            .batch_indices(data.len(), it)
            .into_iter()
            .map(|idx| self.acquisition(&data[idx], epoch))
            .collect::<Result<_>>()?;

        if it == 0 && self.model.config.standardize_inputs {
            let x0s = batch
                .iter()
                .map(|a| initial_estimate(&a.y, &a.sensitivities))
                .collect::<Result<Vec<_>>>()?;
            let values = x0s.iter().flat_map(|x| x.data().iter().flat_map(|v| [v.re, v.im]));
            let std = population_std(values);
            if std > 0.0 && std.is_finite() {
                self.model.input_std = std;
            }
        }

        let mut total = 0.0;
        let mut sum: Option<Vec<Array>> = None;
        for acq in &batch {
            let (loss, grads) = acq.loss_and_gradients(&self.model)?;
            total += loss;
            match &mut sum {
                Some(s) => s.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                None => sum = Some(grads),
            }
        }
        let n = batch.len() as f64;
        let loss = total / n;
        if !loss.is_finite() {
            return Err(LabError::NumericalDivergence(format!("non-finite loss at iteration {it}")));
        }
        let grads: Vec<Array> = sum.expect("non-empty batch").iter().map(|g| g.map(|v| v / n)).collect();
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(LabError::NumericalDivergence(format!("non-finite gradient at iteration {it}")));
        }
        let lr = self.schedule.learning_rate_at(it);
        self.adam.update(&mut self.model.params, &grads, lr, &self.schedule);
        self.iteration += 1;
        Ok(loss)
    }

    /// Steps until `schedule.iterations`, reporting each loss.
    pub fn run(&mut self, data: &[TrainingSample], mut on_step: impl FnMut(usize, f64)) -> Result<Vec<f64>> {
        let mut losses = Vec::new();
        while self.iteration < self.schedule.iterations {
            let it = self.iteration;
            let loss = self.step(data)?;
            on_step(it, loss);
            losses.push(loss);
        }
        Ok(losses)
    }
}

/// Trains a copy of `model`, returning it with the per-iteration losses.
pub fn rim_train(model: &RimModel, data: &[TrainingSample], schedule: &TrainSchedule) -> Result<(RimModel, Vec<f64>)> {
    let mut trainer = Trainer::new(model.clone(), schedule.clone())?;
    let losses = trainer.run(data, |_, _| {})?;
    Ok((trainer.model, losses))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub relative_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub checked: usize,
    /// Entries whose `±h` probes fall on different sides of a ReLU, L1 or
    /// magnitude kink, where central differences do not estimate the
    /// derivative.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    pub groups: Vec<GroupCheck>,
}

/// Central-difference step of [`tape_gradcheck`].
pub const GRADCHECK_STEP: f64 = 1e-4;

/// Compares tape gradients of the loss against central differences for each
/// parameter tensor. `max_entries` limits the checked entries per tensor to
/// an evenly spaced subset.
pub fn tape_gradcheck(model: &RimModel, acq: &Acquisition, max_entries: Option<usize>) -> Result<GradcheckReport> {
    let (_, analytic) = acq.loss_and_gradients(model)?;
    let target = Rc::new(acq.target.clone());
    let eval = |m: &RimModel| -> Result<(f64, Vec<i8>)> {
        let rec = record_loss(m, &acq.y, &acq.sensitivities, &acq.mask, acq.nll, &target)?;
        Ok((super::graph::Graph::value(&rec.tape, &rec.loss).data[0], rec.tape.kink_pattern()))
    };
    let names = model.parameter_names();
    let mut probe = model.clone();
    let mut groups = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let n = model.params[k].len();
        let picks: Vec<usize> = match max_entries {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let (mut diff, mut an, mut nu, mut skipped) = (0.0, 0.0, 0.0, 0);
        for &i in &picks {
            let orig = probe.params[k].data[i];
            probe.params[k].data[i] = orig + GRADCHECK_STEP;
            let (up, up_kinks) = eval(&probe)?;
            probe.params[k].data[i] = orig - GRADCHECK_STEP;
            let (down, down_kinks) = eval(&probe)?;
            probe.params[k].data[i] = orig;
            if up_kinks != down_kinks {
                skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
            let a = analytic[k].data[i];
            diff += (a - numeric).powi(2);
            an += a * a;
            nu += numeric * numeric;
        }
        let (diff, an, nu) = (diff.sqrt(), an.sqrt(), nu.sqrt());
        let scale = an.max(nu);
        let relative_error = if scale > 0.0 { diff / scale } else { 0.0 };
        groups.push(GroupCheck {
            name: name.clone(),
            relative_error,
            analytic_norm: an,
            numeric_norm: nu,
            checked: picks.len() - skipped,
            skipped,
        });
    }
    let max_relative_error = groups.iter().map(|g| g.relative_error).fold(0.0, f64::max);
    Ok(GradcheckReport { max_relative_error, groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_step_decay() {
        let s = TrainSchedule {
            learning_rate: 1.0,
            warmup_iters: 4,
            decay_at: vec![10, 20],
            ..Default::default()
        };
        assert_eq!(s.learning_rate_at(0), 0.25);
        assert_eq!(s.learning_rate_at(3), 1.0);
        assert_eq!(s.learning_rate_at(9), 1.0);
        assert!((s.learning_rate_at(10) - 0.2).abs() < 1e-15);
        assert!((s.learning_rate_at(25) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let sched = TrainSchedule::default();
        let mut p = vec![Array::new(vec![3], vec![1.0, 2.0, 3.0])];
        let g = vec![Array::new(vec![3], vec![0.5, -2.0, 0.0])];
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &g, 0.1, &sched);
        // m̂ = g, v̂ = g², so the step is lr·sign(g) up to ε.
        assert!((p[0].data[0] - 0.9).abs() < 1e-7);
        assert!((p[0].data[1] - 2.1).abs() < 1e-7);
        assert_eq!(p[0].data[2], 3.0);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let model = RimModel::zeros(Default::default()).unwrap();
        let t = Trainer::new(model, TrainSchedule { batch_size: 3, seed: 9, ..Default::default() }).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|i| t.batch_indices(8, i)).collect();
        seen.sort();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
        assert_eq!(t.batch_indices(8, 2).len(), 2);
    }
}
