//! Independent scalar-loop references and random instance builders shared
//! by the integration tests.
#![allow(dead_code)]

use kslab::forward::{MulticoilKSpace, SensitivityMaps};
use kslab::sampling::{AcsRegion, MaskScheme, SamplingMask};
use kslab::{Complex64, ComplexImage2D, RealImage2D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

pub fn random_complex(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ComplexImage2D {
    ComplexImage2D::from_fn(h, w, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
}

pub fn random_real(h: usize, w: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> RealImage2D {
    RealImage2D::from_fn(h, w, |_, _| rng.gen_range(lo..hi))
}

pub fn random_mask(h: usize, w: usize, p: f64, rng: &mut ChaCha8Rng) -> SamplingMask {
    let mut bits: Vec<u8> = (0..h * w).map(|_| rng.gen_bool(p) as u8).collect();
    let k = rng.gen_range(0..h * w);
    bits[k] = 1;
    SamplingMask::from_bits(h, w, bits, MaskScheme::Custom, 1.0 / p, AcsRegion::None).unwrap()
}

pub fn random_maps(h: usize, w: usize, coils: usize, rng: &mut ChaCha8Rng) -> SensitivityMaps {
    SensitivityMaps::new((0..coils).map(|_| random_complex(h, w, rng)).collect()).unwrap()
}

pub fn random_masked_kspace(mask: &SamplingMask, coils: usize, rng: &mut ChaCha8Rng) -> MulticoilKSpace {
    let (h, w) = mask.shape();
    let full = MulticoilKSpace::new((0..coils).map(|_| random_complex(h, w, rng)).collect(), None).unwrap();
    kslab::sampling::apply_mask(mask, &full).unwrap()
}

/// Direct centered orthonormal DFT, `O(N²M²)`.
pub fn dft2c(x: &ComplexImage2D, inverse: bool) -> ComplexImage2D {
    let (h, w) = x.shape();
    let sign = if inverse { 1.0 } else { -1.0 };
    let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
    let norm = 1.0 / ((h * w) as f64).sqrt();
    ComplexImage2D::from_fn(h, w, |u, v| {
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..h {
            for j in 0..w {
                let phase = sign
                    * 2.0
                    * PI
                    * ((u as f64 - ch) * (i as f64 - ch) / h as f64 + (v as f64 - cw) * (j as f64 - cw) / w as f64);
                acc += x.get(i, j) * Complex64::from_polar(1.0, phase);
            }
        }
        acc * norm
    })
}

fn gaussian_window_2d(n: usize, sigma: f64) -> Vec<Vec<f64>> {
    let c = (n as f64 - 1.0) / 2.0;
    let mut win = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    for (a, row) in win.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let r2 = (a as f64 - c).powi(2) + (b as f64 - c).powi(2);
            *v = (-r2 / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    win.iter_mut().flatten().for_each(|v| *v /= total);
    win
}

/// Local weighted moments `(μx, μy, σx², σy², σxy)` of the window whose
/// top-left corner is `(i, j)`.
fn local_moments(x: &[f64], y: &[f64], w: usize, win: &[Vec<f64>], i: usize, j: usize) -> [f64; 5] {
    let n = win.len();
    let (mut mx, mut my) = (0.0, 0.0);
    for a in 0..n {
        for b in 0..n {
            mx += win[a][b] * x[(i + a) * w + j + b];
            my += win[a][b] * y[(i + a) * w + j + b];
        }
    }
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for a in 0..n {
        for b in 0..n {
            let dx = x[(i + a) * w + j + b] - mx;
            let dy = y[(i + a) * w + j + b] - my;
            vx += win[a][b] * dx * dx;
            vy += win[a][b] * dy * dy;
            cxy += win[a][b] * dx * dy;
        }
    }
    [mx, my, vx, vy, cxy]
}

/// Mean SSIM over valid 11×11 Gaussian (σ = 1.5) windows, range = max(target).
pub fn ssim_reference(pred: &RealImage2D, target: &RealImage2D) -> f64 {
    let (h, w) = pred.shape();
    let win = gaussian_window_2d(11, 1.5);
    let range = target.data().iter().cloned().fold(f64::MIN, f64::max);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..=h - 11 {
        for j in 0..=w - 11 {
            let [mx, my, vx, vy, cxy] = local_moments(pred.data(), target.data(), w, &win, i, j);
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

pub fn psnr_reference(pred: &RealImage2D, target: &RealImage2D) -> f64 {
    let n = pred.data().len() as f64;
    let peak = target.data().iter().cloned().fold(f64::MIN, f64::max);
    let mut mse = 0.0;
    for (a, b) in pred.data().iter().zip(target.data()) {
        mse += (a - b) * (a - b);
    }
    10.0 * (peak * peak / (mse / n)).log10()
}

fn filter_valid_2d(img: &[f64], h: usize, w: usize, win: &[Vec<f64>]) -> (Vec<f64>, usize, usize) {
    let n = win.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for a in 0..n {
                for b in 0..n {
                    acc += win[a][b] * img[(i + a) * w + j + b];
                }
            }
            out[i * ow + j] = acc;
        }
    }
    (out, oh, ow)
}

/// Four-scale pixel-domain VIF with σ_n² = 2 after scaling to a 255 peak.
pub fn vif_reference(pred: &RealImage2D, target: &RealImage2D) -> f64 {
    let peak = target.data().iter().cloned().fold(f64::MIN, f64::max);
    let mut r: Vec<f64> = target.data().iter().map(|v| v * 255.0 / peak).collect();
    let mut d: Vec<f64> = pred.data().iter().map(|v| v * 255.0 / peak).collect();
    let (mut h, mut w) = target.shape();
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=4u32 {
        let n = 2usize.pow(4 - scale + 1) + 1;
        let win = gaussian_window_2d(n, n as f64 / 5.0);
        if scale > 1 {
            let (rf, fh, fw) = filter_valid_2d(&r, h, w, &win);
            let (df, _, _) = filter_valid_2d(&d, h, w, &win);
            let keep = |v: &[f64]| -> Vec<f64> {
                let mut out = Vec::new();
                for i in (0..fh).step_by(2) {
                    for j in (0..fw).step_by(2) {
                        out.push(v[i * fw + j]);
                    }
                }
                out
            };
            r = keep(&rf);
            d = keep(&df);
            h = fh.div_ceil(2);
            w = fw.div_ceil(2);
        }
        for i in 0..=h - n {
            for j in 0..=w - n {
                let [_, _, mut s1, s2, s12] = local_moments(&r, &d, w, &win, i, j);
                let s2 = s2.max(0.0);
                s1 = s1.max(0.0);
                let mut g = s12 / (s1 + 1e-10);
                let mut sv = s2 - g * s12;
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
                sv = sv.max(1e-10);
                num += (1.0 + g * g * s1 / (sv + 2.0)).log10();
                den += (1.0 + s1 / 2.0).log10();
            }
        }
    }
    num / den
}
