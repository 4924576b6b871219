//! Non-learned reconstructions: zero-filled RSS / SENSE baselines and a
//! Tikhonov-regularized MAP estimate solved with conjugate gradients.

use num_complex::Complex64;

use crate::error::{invalid, LabError, Result};
use crate::fft::ifft2c;
use crate::forward::{adjoint, forward, normal_operator, rss, MulticoilKSpace, NllConfig, SensitivityMaps};
use crate::image::{ComplexImage2D, RealImage2D};
use crate::sampling::SamplingMask;

/// `nll(x) + λ‖x‖²`, minimized by [`solve_map_cg`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapObjective {
    pub data_term: NllConfig,
    pub reg_lambda: f64,
    pub max_iters: usize,
    /// Stop once `‖r‖ / ‖b‖` drops below this.
    pub tol: f64,
}

impl Default for MapObjective {
    fn default() -> Self {
        Self {
            data_term: NllConfig::default(),
            reg_lambda: 1e-3,
            max_iters: 50,
            tol: 1e-6,
        }
    }
}

impl MapObjective {
    pub fn validate(&self) -> Result<()> {
        if !(self.reg_lambda >= 0.0) || !self.reg_lambda.is_finite() {
            return invalid(format!("reg_lambda must be >= 0, got {}", self.reg_lambda));
        }
        if !(self.tol > 0.0) {
            return invalid(format!("tol must be > 0, got {}", self.tol));
        }
        if self.max_iters == 0 {
            return invalid("max_iters must be positive");
        }
        NllConfig::new(self.data_term.sigma_sq).map(|_| ())
    }

    /// `(1/σ²) Σₖ ‖U ∘ F(Sᵏ ∘ x) − ỹᵏ‖² + λ‖x‖²`.
    pub fn value(&self, x: &ComplexImage2D, y: &MulticoilKSpace, s: &SensitivityMaps, mask: &SamplingMask) -> Result<f64> {
        Ok(crate::forward::nll(x, y, s, mask, self.data_term)? + self.reg_lambda * x.norm_sqr())
    }
}

#[derive(Debug, Clone)]
pub struct CgSolution {
    pub image: ComplexImage2D,
    pub iterations: usize,
    /// Final `‖r‖ / ‖b‖`.
    pub relative_residual: f64,
    /// `‖r‖` before the first and after every iteration.
    pub residual_history: Vec<f64>,
    /// Objective before the first and after every iteration.
    pub objective_history: Vec<f64>,
}

/// RSS of the inverse-transformed (zero-filled) coil k-spaces.
pub fn zero_filled_rss(y: &MulticoilKSpace) -> Result<RealImage2D> {
    let images = y.coils().iter().map(ifft2c).collect::<Result<Vec<_>>>()?;
    rss(&images)
}

/// `Σₖ Sᵏ* F⁻¹(ỹᵏ)`, the sensitivity-weighted zero-filled image.
pub fn zero_filled_sense(y: &MulticoilKSpace, s: &SensitivityMaps) -> Result<ComplexImage2D> {
    adjoint(y, s)
}

fn re_dot(a: &ComplexImage2D, b: &ComplexImage2D) -> f64 {
    a.data().iter().zip(b.data()).map(|(u, v)| u.re * v.re + u.im * v.im).sum()
}

fn ensure_finite(x: &ComplexImage2D, rr: f64, iteration: usize) -> Result<()> {
    if x.is_finite() && rr.is_finite() {
        Ok(())
    } else {
        Err(LabError::NumericalDivergence(format!("non-finite CG state at iteration {iteration}")))
    }
}

/// Conjugate-residual iteration on `(A*A + λσ² I) x = A*ỹ`, the stationarity
/// condition of [`MapObjective::value`] (`(A*A + λI) x = A*ỹ` at σ² = 1),
/// started from the zero-filled SENSE image.
///
/// The system is Hermitian positive (semi-)definite, so both `‖r‖` and the
/// objective decrease monotonically.
pub fn solve_map_cg(
    y: &MulticoilKSpace,
    s: &SensitivityMaps,
    mask: &SamplingMask,
    obj: &MapObjective,
) -> Result<CgSolution> {
    obj.validate()?;
    let shift = Complex64::new(obj.reg_lambda * obj.data_term.sigma_sq, 0.0);
    let apply = |v: &ComplexImage2D| -> Result<ComplexImage2D> {
        let mut out = normal_operator(v, s, mask)?;
        out.axpy(shift, v);
        Ok(out)
    };

    let b = adjoint(&crate::sampling::apply_mask(mask, y)?, s)?;
    let b_norm = b.norm();
    let mut x = zero_filled_sense(y, s)?;
    let mut r = b.sub(&apply(&x)?);
    let mut ar = apply(&r)?;
    let mut p = r.clone();
    let mut ap = ar.clone();
    let mut rr = re_dot(&r, &r);
    let mut rar = re_dot(&r, &ar);
    ensure_finite(&x, rr, 0)?;

    let mut residual_history = vec![rr.sqrt()];
    let mut objective_history = vec![obj.value(&x, y, s, mask)?];
    let rel = |rr: f64| if b_norm > 0.0 { rr.sqrt() / b_norm } else { rr.sqrt() };

    let mut iterations = 0;
    while iterations < obj.max_iters && rel(rr) >= obj.tol {
        let apap = re_dot(&ap, &ap);
        if !(rar > 0.0 && apap > 0.0) {
            break;
        }
        let alpha = rar / apap;
        x.axpy(Complex64::new(alpha, 0.0), &p);
        r.axpy(Complex64::new(-alpha, 0.0), &ap);
        ar = apply(&r)?;
        let rar_next = re_dot(&r, &ar);
        rr = re_dot(&r, &r);
        iterations += 1;
        ensure_finite(&x, rr, iterations)?;
        let beta = rar_next / rar;
        for (pv, rv) in p.data_mut().iter_mut().zip(r.data()) {
            *pv = rv + *pv * beta;
        }
        for (qv, av) in ap.data_mut().iter_mut().zip(ar.data()) {
            *qv = av + *qv * beta;
        }
        rar = rar_next;
        residual_history.push(rr.sqrt());
        objective_history.push(obj.value(&x, y, s, mask)?);
    }

    Ok(CgSolution {
        image: x,
        iterations,
        relative_residual: rel(rr),
        residual_history,
        objective_history,
    })
}

/// Plain gradient descent on [`MapObjective::value`] with step `1 / L`,
/// `L = 2(‖A‖² / σ² + λ)`; used as an independent check of the CG solver.
pub fn solve_map_gradient_descent(
    y: &MulticoilKSpace,
    s: &SensitivityMaps,
    mask: &SamplingMask,
    obj: &MapObjective,
    steps: usize,
    op_norm_sq: f64,
) -> Result<ComplexImage2D> {
    obj.validate()?;
    let lipschitz = 2.0 * (op_norm_sq / obj.data_term.sigma_sq + obj.reg_lambda);
    let step = 1.0 / lipschitz;
    let mut x = zero_filled_sense(y, s)?;
    for _ in 0..steps {
        // Real-coordinate gradient: 2·(Wirtinger gradient) + 2λx.
        let mut g = crate::forward::nll_gradient(&x, y, s, mask, obj.data_term)?.scaled(2.0);
        g.axpy(Complex64::new(2.0 * obj.reg_lambda, 0.0), &x);
        x.axpy(Complex64::new(-step, 0.0), &g);
    }
    Ok(x)
}

/// `x̂ = argmin`, evaluated through `forward` for data-consistency checks.
pub fn predicted_kspace(x: &ComplexImage2D, s: &SensitivityMaps, mask: &SamplingMask) -> Result<MulticoilKSpace> {
    forward(x, s, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{simulate_acquisition, simulate_sensitivities, AcquisitionSim};
    use crate::phantom::shepp_logan_phantom;
    use crate::sampling::{apply_mask, make_radial_mask, MaskRng};

    fn setup(mask: &SamplingMask, noise: f64) -> (MulticoilKSpace, SensitivityMaps, RealImage2D) {
        let (h, w) = mask.shape();
        let phantom = shepp_logan_phantom(h, w).unwrap();
        let s = simulate_sensitivities(h, w, 4).unwrap();
        let sim = AcquisitionSim {
            phantom: phantom.clone(),
            sensitivities: s.clone(),
            noise_std: noise,
            rng_seed: 3,
        };
        let (y, _) = simulate_acquisition(&sim, mask).unwrap();
        (y, s, phantom)
    }

    #[test]
    fn zero_filled_full_sampling_is_true_rss() {
        let full = SamplingMask::full(32, 32);
        let (y, s, phantom) = setup(&full, 0.0);
        let zf = zero_filled_rss(&y).unwrap();
        // Noiseless RSS with normalized maps is the phantom itself.
        for (a, b) in zf.data().iter().zip(phantom.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        let sense = zero_filled_sense(&y, &s).unwrap();
        assert_eq!(sense, adjoint(&y, &s).unwrap());
    }

    #[test]
    fn sense_matches_hand_composition() {
        let mask = make_radial_mask(32, 32, 3.0, MaskRng::new(2)).unwrap();
        let (y, s, _) = setup(&mask, 0.01);
        let got = zero_filled_sense(&y, &s).unwrap();
        let mut expected = ComplexImage2D::zeros(32, 32);
        for (yk, sk) in y.coils().iter().zip(s.maps()) {
            let img = ifft2c(yk).unwrap();
            for i in 0..32 {
                for j in 0..32 {
                    let v = expected.get(i, j) + sk.get(i, j).conj() * img.get(i, j);
                    expected.set(i, j, v);
                }
            }
        }
        assert!(got.sub(&expected).norm() <= 1e-12 * expected.norm());
    }

    #[test]
    fn full_sampling_needs_no_iterations() {
        let full = SamplingMask::full(32, 32);
        let (y, s, phantom) = setup(&full, 0.0);
        let obj = MapObjective { reg_lambda: 0.0, ..Default::default() };
        let sol = solve_map_cg(&y, &s, &full, &obj).unwrap();
        assert!(sol.iterations <= 2);
        let x = ComplexImage2D::from_real(&phantom);
        assert!(sol.image.sub(&x).norm() / x.norm() < 1e-8);
    }

    #[test]
    fn huge_lambda_shrinks_to_zero() {
        let mask = make_radial_mask(32, 32, 3.0, MaskRng::new(1)).unwrap();
        let (y, s, _) = setup(&mask, 0.0);
        let x0 = zero_filled_sense(&y, &s).unwrap();
        let obj = MapObjective { reg_lambda: 1e12, ..Default::default() };
        let sol = solve_map_cg(&y, &s, &mask, &obj).unwrap();
        assert!(sol.image.norm() < 1e-6 * x0.norm());
    }

    #[test]
    fn noiseless_lambda_zero_is_data_consistent() {
        let mask = crate::sampling::make_rectilinear_mask(32, 32, 2.0, MaskRng::new(4)).unwrap();
        let (y, s, _) = setup(&mask, 0.0);
        let obj = MapObjective { reg_lambda: 0.0, max_iters: 5000, tol: 1e-14, ..Default::default() };
        let sol = solve_map_cg(&y, &s, &mask, &obj).unwrap();
        let pred = predicted_kspace(&sol.image, &s, &mask).unwrap();
        let y_norm: f64 = y.coils().iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        let diff: f64 = pred.coils().iter().zip(y.coils()).map(|(a, b)| a.sub(b).norm_sqr()).sum::<f64>().sqrt();
        assert!(diff / y_norm < 1e-6, "{} after {} iterations, rel {}", diff / y_norm, sol.iterations, sol.relative_residual);
    }

    #[test]
    fn solver_is_deterministic() {
        let mask = make_radial_mask(32, 32, 4.0, MaskRng::new(8)).unwrap();
        let (y, s, _) = setup(&mask, 0.01);
        let obj = MapObjective::default();
        let a = solve_map_cg(&y, &s, &mask, &obj).unwrap();
        let b = solve_map_cg(&y, &s, &mask, &obj).unwrap();
        assert_eq!(a.image, b.image);
        let _ = apply_mask(&mask, &y).unwrap();
    }

    #[test]
    fn invalid_objective_rejected() {
        let obj = MapObjective { tol: 0.0, ..Default::default() };
        assert!(obj.validate().is_err());
        let obj = MapObjective { reg_lambda: -1.0, ..Default::default() };
        assert!(obj.validate().is_err());
    }
}
