//! Modified Shepp-Logan phantom and randomized variants.
//!
//! Coordinates: `x = (j − ⌊w/2⌋) / (w/2)` to the right and
//! `y = (⌊h/2⌋ − i) / (h/2)` upward, so pixel `(h/2, w/2)` is the origin.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::image::RealImage2D;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub intensity: f64,
    /// Semi-axis along x before rotation.
    pub a: f64,
    /// Semi-axis along y before rotation.
    pub b: f64,
    pub x0: f64,
    pub y0: f64,
    /// Rotation in degrees, counter-clockwise.
    pub phi_deg: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let phi = self.phi_deg.to_radians();
        let (c, s) = (phi.cos(), phi.sin());
        let (dx, dy) = (x - self.x0, y - self.y0);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Toft's modified Shepp-Logan table.
pub const MODIFIED_SHEPP_LOGAN: [Ellipse; 10] = [
    Ellipse { intensity: 1.0, a: 0.69, b: 0.92, x0: 0.0, y0: 0.0, phi_deg: 0.0 },
    Ellipse { intensity: -0.8, a: 0.6624, b: 0.8740, x0: 0.0, y0: -0.0184, phi_deg: 0.0 },
    Ellipse { intensity: -0.2, a: 0.1100, b: 0.3100, x0: 0.22, y0: 0.0, phi_deg: -18.0 },
    Ellipse { intensity: -0.2, a: 0.1600, b: 0.4100, x0: -0.22, y0: 0.0, phi_deg: 18.0 },
    Ellipse { intensity: 0.1, a: 0.2100, b: 0.2500, x0: 0.0, y0: 0.35, phi_deg: 0.0 },
    Ellipse { intensity: 0.1, a: 0.0460, b: 0.0460, x0: 0.0, y0: 0.1, phi_deg: 0.0 },
    Ellipse { intensity: 0.1, a: 0.0460, b: 0.0460, x0: 0.0, y0: -0.1, phi_deg: 0.0 },
    Ellipse { intensity: 0.1, a: 0.0460, b: 0.0230, x0: -0.08, y0: -0.605, phi_deg: 0.0 },
    Ellipse { intensity: 0.1, a: 0.0230, b: 0.0230, x0: 0.0, y0: -0.606, phi_deg: 0.0 },
    Ellipse { intensity: 0.1, a: 0.0230, b: 0.0460, x0: 0.06, y0: -0.605, phi_deg: 0.0 },
];

pub fn pixel_coordinates(height: usize, width: usize, i: usize, j: usize) -> (f64, f64) {
    let x = (j as f64 - (width / 2) as f64) / (width as f64 / 2.0);
    let y = ((height / 2) as f64 - i as f64) / (height as f64 / 2.0);
    (x, y)
}

/// Sums ellipse intensities at each pixel center and clamps to `[0, 1]`.
pub fn render(height: usize, width: usize, ellipses: &[Ellipse]) -> Result<RealImage2D> {
    if height < 16 || width < 16 {
        return invalid(format!("phantom needs at least 16x16 pixels, got {height}x{width}"));
    }
    Ok(RealImage2D::from_fn(height, width, |i, j| {
        let (x, y) = pixel_coordinates(height, width, i, j);
        let v: f64 = ellipses
            .iter()
            .filter(|e| e.contains(x, y))
            .map(|e| e.intensity)
            .sum();
        v.clamp(0.0, 1.0)
    }))
}

pub fn shepp_logan_phantom(height: usize, width: usize) -> Result<RealImage2D> {
    render(height, width, &MODIFIED_SHEPP_LOGAN)
}

/// Randomly perturbed ellipse table: centers shift by up to ±0.03, axes and
/// intensities scale by up to ±8% and ±15%, angles turn by up to ±6°. The
/// outer skull ellipse keeps its intensity.
pub fn perturbed_ellipses<R: Rng>(rng: &mut R) -> Vec<Ellipse> {
    MODIFIED_SHEPP_LOGAN
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let mut p = *e;
            p.x0 += rng.gen_range(-0.03..0.03);
            p.y0 += rng.gen_range(-0.03..0.03);
            p.a *= 1.0 + rng.gen_range(-0.08..0.08);
            p.b *= 1.0 + rng.gen_range(-0.08..0.08);
            p.phi_deg += rng.gen_range(-6.0..6.0);
            if k > 0 {
                p.intensity *= 1.0 + rng.gen_range(-0.15..0.15);
            }
            p
        })
        .collect()
}

/// Slice `index` of a volume: the ellipse table scaled in-plane by
/// `1 − 0.04·|index − center|`, mimicking the shrinking cross-section away
/// from the middle slice.
pub fn volume_slice(ellipses: &[Ellipse], index: usize, n_slices: usize) -> Vec<Ellipse> {
    let center = (n_slices as f64 - 1.0) / 2.0;
    let scale = 1.0 - 0.04 * (index as f64 - center).abs();
    ellipses
        .iter()
        .map(|e| Ellipse {
            a: e.a * scale,
            b: e.b * scale,
            x0: e.x0 * scale,
            y0: e.y0 * scale,
            ..*e
        })
        .collect()
}
