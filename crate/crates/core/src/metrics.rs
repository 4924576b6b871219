//! Image-quality metrics: PSNR, SSIM and pixel-domain VIF.
//!
//! All three take `data_range = max(target)`. SSIM uses an 11×11 Gaussian
//! window (σ = 1.5) over the valid region only; VIF-p follows the classic
//! four-scale pixel-domain formulation with σ_n² = 2 on images rescaled so that
//! `max(target)` maps to 255. The SSIM gradient used by the training loss
//! comes from the same code path as the evaluation metric.

use std::fmt::Write as _;

use crate::error::{invalid, Result};
use crate::image::RealImage2D;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const VIF_NOISE_VAR: f64 = 2.0;
pub const VIF_SCALES: usize = 4;
pub const VIF_PEAK: f64 = 255.0;
/// Smallest side length for which all four VIF scales have a non-empty
/// valid region.
pub const VIF_MIN_SIZE: usize = 41;

fn check_pair(pred: &RealImage2D, target: &RealImage2D) -> Result<()> {
    if pred.shape() != target.shape() {
        return invalid(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    Ok(())
}

fn data_range(target: &RealImage2D) -> Result<f64> {
    let r = target.max();
    if !(r > 0.0 && r.is_finite()) {
        return invalid(format!("target must have a positive finite maximum, got {r}"));
    }
    Ok(r)
}

/// `10·log10(max(target)² / MSE)`; `+∞` when the images are identical.
pub fn psnr(pred: &RealImage2D, target: &RealImage2D) -> Result<f64> {
    check_pair(pred, target)?;
    let range = data_range(target)?;
    let mse = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

/// Normalized 1D Gaussian of odd length `n`.
pub fn gaussian_kernel(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..n)
        .map(|k| (-(k as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region correlation.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for i in 0..h {
        let row = &img[i * w..(i + 1) * w];
        for j in 0..ow {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * row[j + t];
            }
            tmp[i * ow + j] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for (t, kv) in k.iter().enumerate() {
            let src = &tmp[(i + t) * ow..(i + t + 1) * ow];
            let dst = &mut out[i * ow..(i + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    (out, oh, ow)
}

/// Adjoint of [`filter_valid`]: scatters an `oh×ow` map back to `h×w`.
fn filter_valid_adjoint(g: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for i in 0..oh {
        for (t, kv) in k.iter().enumerate() {
            let src = &g[i * ow..(i + 1) * ow];
            let dst = &mut tmp[(i + t) * ow..(i + t + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..ow {
            let v = tmp[i * ow + j];
            for (t, kv) in k.iter().enumerate() {
                out[i * w + j + t] += kv * v;
            }
        }
    }
    out
}

struct SsimMaps {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    var_x: Vec<f64>,
    var_y: Vec<f64>,
    cov: Vec<f64>,
    c1: f64,
    c2: f64,
}

impl SsimMaps {
    fn compute(x: &RealImage2D, y: &RealImage2D, range: f64) -> Self {
        let (h, w) = x.shape();
        let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
        let xd = x.data();
        let yd = y.data();
        let xx: Vec<f64> = xd.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = yd.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xd.iter().zip(yd).map(|(a, b)| a * b).collect();
        let (mu_x, _, _) = filter_valid(xd, h, w, &k);
        let (mu_y, _, _) = filter_valid(yd, h, w, &k);
        let (exx, _, _) = filter_valid(&xx, h, w, &k);
        let (eyy, _, _) = filter_valid(&yy, h, w, &k);
        let (exy, _, _) = filter_valid(&xy, h, w, &k);
        let var_x = exx.iter().zip(&mu_x).map(|(e, m)| e - m * m).collect();
        let var_y = eyy.iter().zip(&mu_y).map(|(e, m)| e - m * m).collect();
        let cov = exy
            .iter()
            .zip(mu_x.iter().zip(&mu_y))
            .map(|(e, (a, b))| e - a * b)
            .collect();
        Self {
            mu_x,
            mu_y,
            var_x,
            var_y,
            cov,
            c1: (SSIM_K1 * range).powi(2),
            c2: (SSIM_K2 * range).powi(2),
        }
    }

    fn local(&self, p: usize) -> f64 {
        let (mx, my) = (self.mu_x[p], self.mu_y[p]);
        ((2.0 * mx * my + self.c1) * (2.0 * self.cov[p] + self.c2))
            / ((mx * mx + my * my + self.c1) * (self.var_x[p] + self.var_y[p] + self.c2))
    }

    fn contrast_structure(&self, p: usize) -> f64 {
        (2.0 * self.cov[p] + self.c2) / (self.var_x[p] + self.var_y[p] + self.c2)
    }

    fn mean(&self) -> f64 {
        let n = self.mu_x.len();
        (0..n).map(|p| self.local(p)).sum::<f64>() / n as f64
    }
}

fn check_ssim_size(img: &RealImage2D) -> Result<()> {
    if img.height() < SSIM_WINDOW || img.width() < SSIM_WINDOW {
        return invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {:?}",
            img.shape()
        ));
    }
    Ok(())
}

/// Mean SSIM with `data_range = max(target)`.
pub fn ssim(pred: &RealImage2D, target: &RealImage2D) -> Result<f64> {
    ssim_with_range(pred, target, data_range(target)?)
}

pub fn ssim_with_range(pred: &RealImage2D, target: &RealImage2D, range: f64) -> Result<f64> {
    check_pair(pred, target)?;
    check_ssim_size(pred)?;
    Ok(SsimMaps::compute(pred, target, range).mean())
}

/// Mean of the contrast-structure factor `(2σxy + C2) / (σx² + σy² + C2)`
/// of the SSIM map.
pub fn ssim_contrast_structure(pred: &RealImage2D, target: &RealImage2D, range: f64) -> Result<f64> {
    check_pair(pred, target)?;
    check_ssim_size(pred)?;
    let maps = SsimMaps::compute(pred, target, range);
    let n = maps.mu_x.len();
    Ok((0..n).map(|p| maps.contrast_structure(p)).sum::<f64>() / n as f64)
}

/// SSIM and its gradient with respect to `pred` (target held fixed).
pub fn ssim_and_grad(pred: &RealImage2D, target: &RealImage2D) -> Result<(f64, RealImage2D)> {
    check_pair(pred, target)?;
    check_ssim_size(pred)?;
    let range = data_range(target)?;
    let (h, w) = pred.shape();
    let maps = SsimMaps::compute(pred, target, range);
    let n = maps.mu_x.len();
    let inv_n = 1.0 / n as f64;
    let mut d_m1 = vec![0.0; n];
    let mut d_m2 = vec![0.0; n];
    let mut d_m12 = vec![0.0; n];
    let mut total = 0.0;
    for p in 0..n {
        let (mx, my) = (maps.mu_x[p], maps.mu_y[p]);
        let a1 = 2.0 * mx * my + maps.c1;
        let a2 = 2.0 * maps.cov[p] + maps.c2;
        let b1 = mx * mx + my * my + maps.c1;
        let b2 = maps.var_x[p] + maps.var_y[p] + maps.c2;
        let s = maps.local(p);
        total += s;
        let ds_dmu = s * (2.0 * my / a1 - 2.0 * mx / b1);
        let ds_dvar = -s / b2;
        let ds_dcov = s * 2.0 / a2;
        d_m1[p] = inv_n * (ds_dmu - 2.0 * mx * ds_dvar - my * ds_dcov);
        d_m2[p] = inv_n * ds_dvar;
        d_m12[p] = inv_n * ds_dcov;
    }
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let g1 = filter_valid_adjoint(&d_m1, h, w, &k);
    let g2 = filter_valid_adjoint(&d_m2, h, w, &k);
    let g12 = filter_valid_adjoint(&d_m12, h, w, &k);
    let grad: Vec<f64> = (0..h * w)
        .map(|i| g1[i] + 2.0 * pred.data()[i] * g2[i] + target.data()[i] * g12[i])
        .collect();
    Ok((total / n as f64, RealImage2D::new(h, w, grad)?))
}

fn downsample2(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(oh * ow);
    for i in (0..h).step_by(2) {
        for j in (0..w).step_by(2) {
            out.push(img[i * w + j]);
        }
    }
    (out, oh, ow)
}

/// Pixel-domain visual information fidelity, summed over four scales.
pub fn vif_p(pred: &RealImage2D, target: &RealImage2D) -> Result<f64> {
    check_pair(pred, target)?;
    if pred.height() < VIF_MIN_SIZE || pred.width() < VIF_MIN_SIZE {
        return invalid(format!(
            "VIF-p needs images of at least {VIF_MIN_SIZE}x{VIF_MIN_SIZE}, got {:?}",
            pred.shape()
        ));
    }
    let scale = VIF_PEAK / data_range(target)?;
    let mut reference: Vec<f64> = target.data().iter().map(|v| v * scale).collect();
    let mut distorted: Vec<f64> = pred.data().iter().map(|v| v * scale).collect();
    let (mut h, mut w) = target.shape();

    let mut num = 0.0;
    let mut den = 0.0;
    for s in 1..=VIF_SCALES {
        let n = (1usize << (VIF_SCALES - s + 1)) + 1;
        let k = gaussian_kernel(n, n as f64 / 5.0);
        if s > 1 {
            let (r, rh, rw) = filter_valid(&reference, h, w, &k);
            let (d, _, _) = filter_valid(&distorted, h, w, &k);
            let (r2, nh, nw) = downsample2(&r, rh, rw);
            let (d2, _, _) = downsample2(&d, rh, rw);
            reference = r2;
            distorted = d2;
            h = nh;
            w = nw;
        }
        let rr: Vec<f64> = reference.iter().map(|v| v * v).collect();
        let dd: Vec<f64> = distorted.iter().map(|v| v * v).collect();
        let rd: Vec<f64> = reference.iter().zip(&distorted).map(|(a, b)| a * b).collect();
        let (mu1, _, _) = filter_valid(&reference, h, w, &k);
        let (mu2, _, _) = filter_valid(&distorted, h, w, &k);
        let (e11, _, _) = filter_valid(&rr, h, w, &k);
        let (e22, _, _) = filter_valid(&dd, h, w, &k);
        let (e12, _, _) = filter_valid(&rd, h, w, &k);
        for p in 0..mu1.len() {
            let (n_p, d_p) = vif_terms(
                e11[p] - mu1[p] * mu1[p],
                e22[p] - mu2[p] * mu2[p],
                e12[p] - mu1[p] * mu2[p],
            );
            num += n_p;
            den += d_p;
        }
    }
    Ok(num / den)
}

/// Per-pixel numerator and denominator contributions of VIF-p.
pub(crate) fn vif_terms(sigma1_sq: f64, sigma2_sq: f64, sigma12: f64) -> (f64, f64) {
    let mut s1 = sigma1_sq.max(0.0);
    let s2 = sigma2_sq.max(0.0);
    let mut g = sigma12 / (s1 + 1e-10);
    let mut sv = s2 - g * sigma12;
    if s1 < 1e-10 {
        g = 0.0;
        sv = s2;
        s1 = 0.0;
    }
    if s2 < 1e-10 {
        g = 0.0;
        sv = 0.0;
    }
    if g < 0.0 {
        sv = s2;
        g = 0.0;
    }
    if sv <= 1e-10 {
        sv = 1e-10;
    }
    (
        (1.0 + g * g * s1 / (sv + VIF_NOISE_VAR)).log10(),
        (1.0 + s1 / VIF_NOISE_VAR).log10(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceMetrics {
    pub slice_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub vif: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Population (N-denominator) standard deviation.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_slice: Vec<SliceMetrics>,
    pub psnr: Summary,
    pub ssim: Summary,
    pub vif: Summary,
}

impl MetricsReport {
    pub fn from_rows(per_slice: Vec<SliceMetrics>) -> Result<Self> {
        if per_slice.is_empty() {
            return invalid("metrics report needs at least one slice");
        }
        let col = |f: fn(&SliceMetrics) -> f64| per_slice.iter().map(f).collect::<Vec<_>>();
        Ok(Self {
            psnr: Summary::of(&col(|r| r.psnr)),
            ssim: Summary::of(&col(|r| r.ssim)),
            vif: Summary::of(&col(|r| r.vif)),
            per_slice,
        })
    }

    /// `slice_id,psnr_db,ssim,vif` rows followed by `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slice_id,psnr_db,ssim,vif\n");
        for r in &self.per_slice {
            let _ = writeln!(out, "{},{},{},{}", r.slice_id, r.psnr, r.ssim, r.vif);
        }
        let _ = writeln!(out, "mean,{},{},{}", self.psnr.mean, self.ssim.mean, self.vif.mean);
        let _ = writeln!(out, "std,{},{},{}", self.psnr.std, self.ssim.std, self.vif.std);
        out
    }

    /// Parses the per-slice rows of [`MetricsReport::to_csv`] and recomputes
    /// the aggregates.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if n == 0 || line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(crate::LabError::Format(format!("bad metrics row: {line}")));
            }
            if f[0] == "mean" || f[0] == "std" {
                continue;
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| crate::LabError::Format(format!("bad number '{s}': {e}")))
            };
            rows.push(SliceMetrics {
                slice_id: f[0].to_string(),
                psnr: num(f[1])?,
                ssim: num(f[2])?,
                vif: num(f[3])?,
            });
        }
        Self::from_rows(rows)
    }
}

pub fn evaluate_pair(slice_id: &str, pred: &RealImage2D, target: &RealImage2D) -> Result<SliceMetrics> {
    Ok(SliceMetrics {
        slice_id: slice_id.to_string(),
        psnr: psnr(pred, target)?,
        ssim: ssim(pred, target)?,
        vif: vif_p(pred, target)?,
    })
}

/// Per-slice metrics with ids `0, 1, …` plus their aggregates.
pub fn evaluate_pair_set(preds: &[RealImage2D], targets: &[RealImage2D]) -> Result<MetricsReport> {
    if preds.len() != targets.len() {
        return invalid(format!(
            "{} predictions but {} targets",
            preds.len(),
            targets.len()
        ));
    }
    let rows = preds
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(k, (p, t))| evaluate_pair(&k.to_string(), p, t))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_rows(rows)
}
