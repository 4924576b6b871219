//! Multicoil acquisition model.
//!
//! `A x = { U ∘ F(Sᵏ ∘ x) }ₖ`, its adjoint `A* y = Σₖ Sᵏ* ∘ F⁻¹(U ∘ yᵏ)`, the
//! Gaussian negative log-likelihood and its gradient, root-sum-of-squares
//! combination, ACS sensitivity estimation and noisy acquisition simulation.
//!
//! Coil loops run sequentially in coil order so every sum is bit-stable.

use num_complex::Complex64;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::fft::{fft2c, ifft2c};
use crate::image::{ComplexImage2D, RealImage2D};
use crate::sampling::{apply_mask, AcsRegion, SamplingMask};
use crate::seed;

/// Guard added to the RSS denominator of estimated sensitivities.
pub const SENSITIVITY_EPS: f64 = 1e-12;

/// Pixels whose calibration RSS falls below this fraction of the maximum get
/// zero sensitivity.
pub const SUPPORT_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMaps {
    maps: Vec<ComplexImage2D>,
}

impl SensitivityMaps {
    pub fn new(maps: Vec<ComplexImage2D>) -> Result<Self> {
        let Some(first) = maps.first() else {
            return invalid("at least one sensitivity map is required");
        };
        if maps.iter().any(|m| m.shape() != first.shape()) {
            return invalid("sensitivity maps differ in shape");
        }
        Ok(Self { maps })
    }

    pub fn n_coils(&self) -> usize {
        self.maps.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.maps[0].shape()
    }

    pub fn maps(&self) -> &[ComplexImage2D] {
        &self.maps
    }

    /// `Σₖ |Sᵏ|²` per pixel.
    pub fn power(&self) -> RealImage2D {
        let (h, w) = self.shape();
        let mut out = RealImage2D::zeros(h, w);
        for m in &self.maps {
            for (o, v) in out.data_mut().iter_mut().zip(m.data()) {
                *o += v.norm_sqr();
            }
        }
        out
    }
}

/// Stack of per-coil k-spaces, optionally tagged with the mask applied to it.
#[derive(Debug, Clone, PartialEq)]
pub struct MulticoilKSpace {
    coils: Vec<ComplexImage2D>,
    mask: Option<SamplingMask>,
}

impl MulticoilKSpace {
    pub fn new(coils: Vec<ComplexImage2D>, mask: Option<SamplingMask>) -> Result<Self> {
        let Some(first) = coils.first() else {
            return invalid("at least one coil is required");
        };
        let shape = first.shape();
        if coils.iter().any(|c| c.shape() != shape) {
            return invalid("coil k-spaces differ in shape");
        }
        if let Some(m) = &mask {
            if m.shape() != shape {
                return invalid("mask shape differs from k-space shape");
            }
            for c in &coils {
                let off_mask = c
                    .data()
                    .iter()
                    .zip(m.bits())
                    .any(|(v, &b)| b == 0 && (v.re != 0.0 || v.im != 0.0));
                if off_mask {
                    return invalid("k-space has non-zero entries outside its mask");
                }
            }
        }
        Ok(Self { coils, mask })
    }

    pub fn n_coils(&self) -> usize {
        self.coils.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.coils[0].shape()
    }

    pub fn coils(&self) -> &[ComplexImage2D] {
        &self.coils
    }

    pub fn mask(&self) -> Option<&SamplingMask> {
        self.mask.as_ref()
    }
}

/// Ground truth plus coil setup for a simulated acquisition.
#[derive(Debug, Clone)]
pub struct AcquisitionSim {
    pub phantom: RealImage2D,
    pub sensitivities: SensitivityMaps,
    /// Standard deviation of each real and imaginary noise component.
    pub noise_std: f64,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllConfig {
    pub sigma_sq: f64,
}

impl Default for NllConfig {
    fn default() -> Self {
        Self { sigma_sq: 1.0 }
    }
}

impl NllConfig {
    pub fn new(sigma_sq: f64) -> Result<Self> {
        if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
            return invalid(format!("sigma_sq must be positive, got {sigma_sq}"));
        }
        Ok(Self { sigma_sq })
    }
}

fn check_shape(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return invalid(format!("{what}: shape {a:?} does not match {b:?}"));
    }
    Ok(())
}

fn mul_elementwise(a: &ComplexImage2D, b: &ComplexImage2D) -> ComplexImage2D {
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= v;
    }
    out
}

fn mask_in_place(img: &mut ComplexImage2D, mask: &SamplingMask) {
    for (v, &b) in img.data_mut().iter_mut().zip(mask.bits()) {
        if b == 0 {
            *v = Complex64::new(0.0, 0.0);
        }
    }
}

/// Accumulates `Sᵏ* ∘ img` into `acc`.
fn add_conj_weighted(acc: &mut ComplexImage2D, s: &ComplexImage2D, img: &ComplexImage2D) {
    for ((a, sv), v) in acc.data_mut().iter_mut().zip(s.data()).zip(img.data()) {
        *a += sv.conj() * v;
    }
}

/// Gaussian coil profiles on a ring around the image center, jointly
/// normalized so that `Σₖ |Sᵏ|² = 1` at every pixel.
pub fn simulate_sensitivities(height: usize, width: usize, n_coils: usize) -> Result<SensitivityMaps> {
    if height == 0 || width == 0 || n_coils == 0 {
        return invalid("simulate_sensitivities needs positive dimensions and coil count");
    }
    let min_dim = height.min(width) as f64;
    let ring = 0.6 * min_dim / 2.0;
    let sigma = 0.5 * min_dim;
    let ci = (height as f64 - 1.0) / 2.0;
    let cj = (width as f64 - 1.0) / 2.0;

    let mut maps: Vec<ComplexImage2D> = (0..n_coils)
        .map(|k| {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / n_coils as f64;
            let (pi, pj) = (ci + ring * phi.sin(), cj + ring * phi.cos());
            ComplexImage2D::from_fn(height, width, |i, j| {
                let (di, dj) = (i as f64 - pi, j as f64 - pj);
                let mag = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
                let phase = phi
                    + 0.5
                        * std::f64::consts::PI
                        * ((i as f64 - ci) / height as f64 * phi.sin()
                            + (j as f64 - cj) / width as f64 * phi.cos());
                Complex64::from_polar(mag, phase)
            })
        })
        .collect();

    let power = SensitivityMaps { maps: maps.clone() }.power();
    for m in maps.iter_mut() {
        for (v, p) in m.data_mut().iter_mut().zip(power.data()) {
            *v /= p.sqrt();
        }
    }
    SensitivityMaps::new(maps)
}

/// Symmetric Hann taper of length `n` without zero end points.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * (k + 1) as f64 / (n + 1) as f64).cos()))
        .collect()
}

/// Hann window supported on the ACS region, zero elsewhere.
pub fn acs_window(acs: &SamplingMask) -> RealImage2D {
    let (h, w) = acs.shape();
    let region = acs.acs_region();
    let bits = acs.bits();
    match region {
        AcsRegion::Disk { radius } => {
            let (ci, cj) = ((h / 2) as f64, (w / 2) as f64);
            RealImage2D::from_fn(h, w, |i, j| {
                if bits[i * w + j] == 0 {
                    return 0.0;
                }
                let r = (i as f64 - ci).hypot(j as f64 - cj);
                0.5 * (1.0 + (std::f64::consts::PI * r / (radius + 1.0)).cos())
            })
        }
        _ => {
            // Separable taper over the bounding box of the sampled points.
            let (mut i0, mut i1, mut j0, mut j1) = (h, 0, w, 0);
            for i in 0..h {
                for j in 0..w {
                    if bits[i * w + j] == 1 {
                        i0 = i0.min(i);
                        i1 = i1.max(i);
                        j0 = j0.min(j);
                        j1 = j1.max(j);
                    }
                }
            }
            if i0 > i1 {
                return RealImage2D::zeros(h, w);
            }
            let wr = hann(i1 - i0 + 1);
            let wc = hann(j1 - j0 + 1);
            RealImage2D::from_fn(h, w, |i, j| {
                if bits[i * w + j] == 0 || i < i0 || i > i1 || j < j0 || j > j1 {
                    0.0
                } else {
                    wr[i - i0] * wc[j - j0]
                }
            })
        }
    }
}

/// Sensitivities from the Hann-windowed calibration region:
/// `Sᵏ = cᵏ / (RSS(c) + ε)` with `cᵏ` the low-resolution coil images.
pub fn estimate_sensitivities_from_acs(ksp: &MulticoilKSpace, acs: &SamplingMask) -> Result<SensitivityMaps> {
    check_shape("estimate_sensitivities_from_acs", ksp.shape(), acs.shape())?;
    if acs.count() == 0 {
        return invalid("empty ACS region");
    }
    let window = acs_window(acs);
    let mut low_res = Vec::with_capacity(ksp.n_coils());
    for coil in ksp.coils() {
        let mut windowed = coil.clone();
        for (v, &wv) in windowed.data_mut().iter_mut().zip(window.data()) {
            *v *= wv;
        }
        low_res.push(ifft2c(&windowed)?);
    }
    let combined = rss(&low_res)?;
    let cutoff = SUPPORT_THRESHOLD * combined.max();
    let maps = low_res
        .into_iter()
        .map(|mut c| {
            for (v, &r) in c.data_mut().iter_mut().zip(combined.data()) {
                if r < cutoff {
                    *v = Complex64::new(0.0, 0.0);
                } else {
                    *v /= r + SENSITIVITY_EPS;
                }
            }
            c
        })
        .collect();
    SensitivityMaps::new(maps)
}

/// `ỹᵏ = U ∘ F(Sᵏ ∘ x)`.
pub fn forward(x: &ComplexImage2D, s: &SensitivityMaps, mask: &SamplingMask) -> Result<MulticoilKSpace> {
    check_shape("forward", x.shape(), s.shape())?;
    check_shape("forward", x.shape(), mask.shape())?;
    let mut coils = Vec::with_capacity(s.n_coils());
    for sk in s.maps() {
        let mut k = fft2c(&mul_elementwise(sk, x))?;
        mask_in_place(&mut k, mask);
        coils.push(k);
    }
    MulticoilKSpace::new(coils, Some(mask.clone()))
}

/// `Σₖ Sᵏ* ∘ F⁻¹(U ∘ yᵏ)`, with `U` the mask carried by `y` (identity if none).
pub fn adjoint(y: &MulticoilKSpace, s: &SensitivityMaps) -> Result<ComplexImage2D> {
    check_shape("adjoint", y.shape(), s.shape())?;
    if y.n_coils() != s.n_coils() {
        return invalid(format!(
            "adjoint: {} coils of k-space but {} sensitivity maps",
            y.n_coils(),
            s.n_coils()
        ));
    }
    let (h, w) = y.shape();
    let mut acc = ComplexImage2D::zeros(h, w);
    for (yk, sk) in y.coils().iter().zip(s.maps()) {
        let img = match y.mask() {
            Some(m) => {
                let mut masked = yk.clone();
                mask_in_place(&mut masked, m);
                ifft2c(&masked)?
            }
            None => ifft2c(yk)?,
        };
        add_conj_weighted(&mut acc, sk, &img);
    }
    Ok(acc)
}

/// Root-sum-of-squares `(Σₖ |x̃ᵏ|²)^½`.
///
/// Uses the squared magnitudes of the standard RSS combination.
pub fn rss(coil_images: &[ComplexImage2D]) -> Result<RealImage2D> {
    let Some(first) = coil_images.first() else {
        return invalid("rss of an empty coil list");
    };
    let (h, w) = first.shape();
    let mut acc = vec![0.0; h * w];
    for img in coil_images {
        check_shape("rss", img.shape(), (h, w))?;
        for (a, v) in acc.iter_mut().zip(img.data()) {
            *a += v.norm_sqr();
        }
    }
    acc.iter_mut().for_each(|a| *a = a.sqrt());
    RealImage2D::new(h, w, acc)
}

fn check_nll_inputs(x: &ComplexImage2D, y: &MulticoilKSpace, s: &SensitivityMaps, mask: &SamplingMask) -> Result<()> {
    check_shape("nll", x.shape(), s.shape())?;
    check_shape("nll", x.shape(), y.shape())?;
    check_shape("nll", x.shape(), mask.shape())?;
    if y.n_coils() != s.n_coils() {
        return invalid("nll: coil count mismatch between data and sensitivities");
    }
    Ok(())
}

/// Per-coil residuals `U ∘ F(Sᵏ ∘ x) − ỹᵏ`.
fn residuals(x: &ComplexImage2D, y: &MulticoilKSpace, s: &SensitivityMaps, mask: &SamplingMask) -> Result<Vec<ComplexImage2D>> {
    let pred = forward(x, s, mask)?;
    Ok(pred
        .coils()
        .iter()
        .zip(y.coils())
        .map(|(p, yk)| p.sub(yk))
        .collect())
}

/// `(1/σ²) Σₖ ‖U ∘ F(Sᵏ ∘ x) − ỹᵏ‖²`.
pub fn nll(
    x: &ComplexImage2D,
    y: &MulticoilKSpace,
    s: &SensitivityMaps,
    mask: &SamplingMask,
    cfg: NllConfig,
) -> Result<f64> {
    check_nll_inputs(x, y, s, mask)?;
    let total: f64 = residuals(x, y, s, mask)?.iter().map(|r| r.norm_sqr()).sum();
    Ok(total / cfg.sigma_sq)
}

/// `(1/σ²) Σₖ Sᵏ* ∘ F⁻¹(U ∘ (U ∘ F(Sᵏ ∘ x) − ỹᵏ))`.
///
/// This is the conjugate (Wirtinger) gradient; finite differences of [`nll`]
/// with respect to the real and imaginary parts give twice this value.
pub fn nll_gradient(
    x: &ComplexImage2D,
    y: &MulticoilKSpace,
    s: &SensitivityMaps,
    mask: &SamplingMask,
    cfg: NllConfig,
) -> Result<ComplexImage2D> {
    check_nll_inputs(x, y, s, mask)?;
    let (h, w) = x.shape();
    let mut acc = ComplexImage2D::zeros(h, w);
    for (mut r, sk) in residuals(x, y, s, mask)?.into_iter().zip(s.maps()) {
        mask_in_place(&mut r, mask);
        add_conj_weighted(&mut acc, sk, &ifft2c(&r)?);
    }
    Ok(acc.scaled(1.0 / cfg.sigma_sq))
}

/// `A*A v = Σₖ Sᵏ* ∘ F⁻¹(U ∘ F(Sᵏ ∘ v))`, the normal operator.
pub fn normal_operator(v: &ComplexImage2D, s: &SensitivityMaps, mask: &SamplingMask) -> Result<ComplexImage2D> {
    adjoint(&forward(v, s, mask)?, s)
}

/// Fully sampled noisy k-space `F(Sᵏ ∘ x) + eᵏ`, masked, together with the
/// RSS of the noiseless coil images.
pub fn simulate_acquisition(sim: &AcquisitionSim, mask: &SamplingMask) -> Result<(MulticoilKSpace, RealImage2D)> {
    let x = ComplexImage2D::from_real(&sim.phantom);
    check_shape("simulate_acquisition", x.shape(), sim.sensitivities.shape())?;
    check_shape("simulate_acquisition", x.shape(), mask.shape())?;
    if !(sim.noise_std >= 0.0) {
        return invalid("noise_std must be non-negative");
    }
    let mut rng = seed::rng(sim.rng_seed);
    let normal = if sim.noise_std > 0.0 {
        Some(Normal::new(0.0, sim.noise_std).map_err(|e| crate::LabError::InvalidArgument(e.to_string()))?)
    } else {
        None
    };

    let mut clean_images = Vec::with_capacity(sim.sensitivities.n_coils());
    let mut coils = Vec::with_capacity(sim.sensitivities.n_coils());
    for sk in sim.sensitivities.maps() {
        let coil_img = mul_elementwise(sk, &x);
        let mut k = fft2c(&coil_img)?;
        if let Some(n) = &normal {
            for v in k.data_mut() {
                let re = n.sample(&mut rng);
                let im = n.sample(&mut rng);
                *v += Complex64::new(re, im);
            }
        }
        clean_images.push(coil_img);
        coils.push(k);
    }
    let full = MulticoilKSpace::new(coils, None)?;
    Ok((apply_mask(mask, &full)?, rss(&clean_images)?))
}
