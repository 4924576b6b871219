//! Retrospective subsampling masks on the Cartesian k-space grid.
//!
//! Two generators are provided: a rectilinear scheme that samples whole
//! phase-encode columns (a fully sampled central band plus random columns),
//! and a radial scheme that rasterizes golden-angle spokes through the k-space
//! center onto the grid with a force-sampled central disk. The radial scheme
//! is a CIRCUS-style substitute, not a reimplementation of CIRCUS itself.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{invalid, LabError, Result};
use crate::forward::MulticoilKSpace;
use crate::seed;

/// Radius (grid points) of the force-sampled calibration disk of radial masks.
pub const RADIAL_ACS_RADIUS: f64 = 8.0;

/// Relative tolerance on the achieved acceleration of generated masks.
pub const ACCELERATION_TOLERANCE: f64 = 0.05;

/// 180° × (√5 − 1) / 2 ≈ 111.246°.
pub const GOLDEN_ANGLE: f64 = std::f64::consts::PI * 0.618_033_988_749_894_9;

const RADIAL_START_ATTEMPTS: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskScheme {
    Rectilinear,
    Radial,
    Full,
    /// Masks read from disk or built by hand.
    Custom,
}

impl MaskScheme {
    pub fn name(&self) -> &'static str {
        match self {
            MaskScheme::Rectilinear => "rectilinear",
            MaskScheme::Radial => "radial",
            MaskScheme::Full => "full",
            MaskScheme::Custom => "custom",
        }
    }
}

impl std::str::FromStr for MaskScheme {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rectilinear" | "rect" => Ok(MaskScheme::Rectilinear),
            "radial" => Ok(MaskScheme::Radial),
            "full" => Ok(MaskScheme::Full),
            "custom" => Ok(MaskScheme::Custom),
            other => invalid(format!("unknown mask scheme '{other}'")),
        }
    }
}

/// The autocalibration region of a mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AcsRegion {
    None,
    /// Full columns `start..end`.
    Columns { start: usize, end: usize },
    /// Disk centered at `(height / 2, width / 2)`.
    Disk { radius: f64 },
    /// The whole grid.
    Full,
}

impl AcsRegion {
    pub fn contains(&self, height: usize, width: usize, i: usize, j: usize) -> bool {
        match *self {
            AcsRegion::None => false,
            AcsRegion::Columns { start, end } => j >= start && j < end,
            AcsRegion::Disk { radius } => {
                let di = i as f64 - (height / 2) as f64;
                let dj = j as f64 - (width / 2) as f64;
                di * di + dj * dj <= radius * radius
            }
            AcsRegion::Full => true,
        }
    }
}

/// Seed holder for mask generation. Streams are `ChaCha8Rng::seed_from_u64(seed)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskRng {
    pub seed: u64,
}

impl MaskRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

/// Binary mask `U` plus its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
    scheme: MaskScheme,
    target_acceleration: f64,
    acs: AcsRegion,
}

impl SamplingMask {
    /// Validates binarity, non-emptiness and that the ACS region is sampled.
    pub fn from_bits(
        height: usize,
        width: usize,
        bits: Vec<u8>,
        scheme: MaskScheme,
        target_acceleration: f64,
        acs: AcsRegion,
    ) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return invalid(format!(
                "mask of {} bits does not fit {height}x{width}",
                bits.len()
            ));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(LabError::InvalidMask("mask entries must be 0 or 1".into()));
        }
        if !bits.contains(&1) {
            return Err(LabError::InvalidMask("mask samples no k-space point".into()));
        }
        for i in 0..height {
            for j in 0..width {
                if acs.contains(height, width, i, j) && bits[i * width + j] == 0 {
                    return Err(LabError::InvalidMask(format!(
                        "ACS point ({i}, {j}) is not sampled"
                    )));
                }
            }
        }
        Ok(Self {
            height,
            width,
            bits,
            scheme,
            target_acceleration,
            acs,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![1; height * width],
            scheme: MaskScheme::Full,
            target_acceleration: 1.0,
            acs: AcsRegion::Full,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn scheme(&self) -> MaskScheme {
        self.scheme
    }

    pub fn target_acceleration(&self) -> f64 {
        self.target_acceleration
    }

    pub fn acs_region(&self) -> AcsRegion {
        self.acs
    }

    #[inline]
    pub fn is_sampled(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.width + j] == 1
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

/// `R = N·M / Σ U`.
pub fn achieved_acceleration(mask: &SamplingMask) -> Result<f64> {
    let ones = mask.count();
    if ones == 0 {
        return Err(LabError::InvalidMask("all-zero mask".into()));
    }
    Ok((mask.height * mask.width) as f64 / ones as f64)
}

fn within_tolerance(achieved: f64, target: f64) -> bool {
    ((achieved - target) / target).abs() <= ACCELERATION_TOLERANCE
}

/// Central band fraction: 10% at R = 5, 5% at R = 10, `0.5 / R` otherwise.
pub fn rectilinear_center_fraction(target_r: f64) -> f64 {
    if (target_r - 5.0).abs() < 1e-12 {
        0.10
    } else if (target_r - 10.0).abs() < 1e-12 {
        0.05
    } else {
        0.5 / target_r
    }
}

/// Column band `[w/2 − ⌈b/2⌉, w/2 + ⌊b/2⌋)` holding the `b` central columns.
pub fn central_band(width: usize, band: usize) -> (usize, usize) {
    let c = width / 2;
    let start = c.saturating_sub(band.div_ceil(2));
    let end = (c + band / 2).min(width);
    (start, end)
}

pub fn make_rectilinear_mask(
    height: usize,
    width: usize,
    target_r: f64,
    rng: MaskRng,
) -> Result<SamplingMask> {
    if height == 0 {
        return invalid("mask height must be positive");
    }
    if width < 8 {
        return invalid(format!("rectilinear masks need width >= 8, got {width}"));
    }
    if !target_r.is_finite() || target_r < 1.0 {
        return invalid(format!("target acceleration must be >= 1, got {target_r}"));
    }

    let fraction = rectilinear_center_fraction(target_r);
    // The epsilon keeps e.g. 0.1 * 180 = 18.000000000000004 from rounding up.
    let band = ((fraction * width as f64 - 1e-9).ceil() as usize).clamp(1, width);
    let (start, end) = central_band(width, band);
    let band = end - start;

    let band_r = width as f64 / band as f64;
    if band_r < target_r * (1.0 - ACCELERATION_TOLERANCE) {
        return Err(LabError::InfeasibleAcceleration {
            target: target_r,
            nearest: band_r,
        });
    }

    let mut columns = vec![false; width];
    columns[start..end].iter_mut().for_each(|c| *c = true);
    let mut sampled = band;

    let mut rest: Vec<usize> = (0..width).filter(|&j| !columns[j]).collect();
    let mut stream = seed::rng(rng.seed);
    rest.shuffle(&mut stream);
    let mut last = None;
    for j in rest {
        if width as f64 / sampled as f64 <= target_r {
            break;
        }
        columns[j] = true;
        sampled += 1;
        last = Some(j);
    }
    // Undo the crossing draw when it overshoots the tolerance and one column
    // fewer lands inside it.
    let within = |c: usize| ((width as f64 / c as f64) - target_r).abs() / target_r <= ACCELERATION_TOLERANCE;
    if let Some(j) = last {
        if !within(sampled) && within(sampled - 1) {
            columns[j] = false;
        }
    }

    let mut bits = vec![0u8; height * width];
    for row in bits.chunks_mut(width) {
        for (b, &c) in row.iter_mut().zip(&columns) {
            *b = c as u8;
        }
    }
    SamplingMask::from_bits(
        height,
        width,
        bits,
        MaskScheme::Rectilinear,
        target_r,
        AcsRegion::Columns { start, end },
    )
}

/// Spoke through the grid center at angle `theta`, as grid points of an
/// 8-connected Bresenham chain between its two boundary intersections.
pub fn rasterize_spoke(height: usize, width: usize, theta: f64) -> Vec<(usize, usize)> {
    let ci = (height / 2) as f64;
    let cj = (width / 2) as f64;
    let (di, dj) = (theta.sin(), theta.cos());

    // Largest t with center + t·d inside [0, h−1] × [0, w−1].
    let reach = |sign: f64| -> f64 {
        let mut t = f64::INFINITY;
        let (si, sj) = (sign * di, sign * dj);
        if si > 1e-12 {
            t = t.min((height as f64 - 1.0 - ci) / si);
        } else if si < -1e-12 {
            t = t.min(-ci / si);
        }
        if sj > 1e-12 {
            t = t.min((width as f64 - 1.0 - cj) / sj);
        } else if sj < -1e-12 {
            t = t.min(-cj / sj);
        }
        t
    };
    let clamp = |v: f64, n: usize| -> i64 { (v.round() as i64).clamp(0, n as i64 - 1) };
    let tp = reach(1.0);
    let tn = reach(-1.0);
    let (i0, j0) = (clamp(ci - tn * di, height), clamp(cj - tn * dj, width));
    let (i1, j1) = (clamp(ci + tp * di, height), clamp(cj + tp * dj, width));

    let mut points = Vec::new();
    let (mut i, mut j) = (i0, j0);
    let dx = (j1 - j0).abs();
    let dy = -(i1 - i0).abs();
    let sx = if j0 < j1 { 1 } else { -1 };
    let sy = if i0 < i1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        points.push((i as usize, j as usize));
        if i == i1 && j == j1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            j += sx;
        }
        if e2 <= dx {
            err += dx;
            i += sy;
        }
    }
    points
}

fn disk_bits(height: usize, width: usize, radius: f64) -> Vec<u8> {
    let region = AcsRegion::Disk { radius };
    let mut bits = vec![0u8; height * width];
    for i in 0..height {
        for j in 0..width {
            if region.contains(height, width, i, j) {
                bits[i * width + j] = 1;
            }
        }
    }
    bits
}

struct SpokeFit {
    start: f64,
    spokes: usize,
    partial: Option<usize>,
}

/// Adds golden-angle spokes from `start` and returns the spoke count whose
/// acceleration is closest to `target`, with its relative error.
fn best_spoke_count(height: usize, width: usize, target: f64, start: f64) -> (usize, f64, usize) {
    let total = (height * width) as f64;
    let mut bits = disk_bits(height, width, RADIAL_ACS_RADIUS);
    let mut count = bits.iter().filter(|&&b| b == 1).count();
    let mut best = (0, ((total / count as f64) - target).abs() / target, count);
    let max_spokes = 4 * height.max(width);
    for n in 1..=max_spokes {
        let theta = start + (n - 1) as f64 * GOLDEN_ANGLE;
        for (i, j) in rasterize_spoke(height, width, theta) {
            let b = &mut bits[i * width + j];
            if *b == 0 {
                *b = 1;
                count += 1;
            }
        }
        let err = ((total / count as f64) - target).abs() / target;
        if err < best.1 {
            best = (n, err, count);
        }
        if (total / count as f64) < target * (1.0 - ACCELERATION_TOLERANCE) {
            break;
        }
        if count == height * width {
            break;
        }
    }
    best
}

fn render_radial(height: usize, width: usize, fit: &SpokeFit) -> Vec<u8> {
    let mut bits = disk_bits(height, width, RADIAL_ACS_RADIUS);
    for n in 0..fit.spokes {
        let theta = fit.start + n as f64 * GOLDEN_ANGLE;
        for (i, j) in rasterize_spoke(height, width, theta) {
            bits[i * width + j] = 1;
        }
    }
    if let Some(extra) = fit.partial {
        // Innermost not-yet-sampled points of the next spoke.
        let theta = fit.start + fit.spokes as f64 * GOLDEN_ANGLE;
        let (ci, cj) = ((height / 2) as f64, (width / 2) as f64);
        let mut fresh: Vec<(usize, usize)> = rasterize_spoke(height, width, theta)
            .into_iter()
            .filter(|&(i, j)| bits[i * width + j] == 0)
            .collect();
        fresh.sort_by(|a, b| {
            let da = (a.0 as f64 - ci).hypot(a.1 as f64 - cj);
            let db = (b.0 as f64 - ci).hypot(b.1 as f64 - cj);
            da.total_cmp(&db).then(a.cmp(b))
        });
        for &(i, j) in fresh.iter().take(extra) {
            bits[i * width + j] = 1;
        }
    }
    bits
}

pub fn make_radial_mask(
    height: usize,
    width: usize,
    target_r: f64,
    rng: MaskRng,
) -> Result<SamplingMask> {
    if height.min(width) < 16 {
        return invalid(format!(
            "radial masks need min(height, width) >= 16, got {height}x{width}"
        ));
    }
    if !target_r.is_finite() || target_r < 1.0 {
        return invalid(format!("target acceleration must be >= 1, got {target_r}"));
    }
    let total = (height * width) as f64;
    let disk_count = disk_bits(height, width, RADIAL_ACS_RADIUS)
        .iter()
        .filter(|&&b| b == 1)
        .count();
    let disk_r = total / disk_count as f64;
    if disk_r < target_r * (1.0 - ACCELERATION_TOLERANCE) {
        return Err(LabError::InfeasibleAcceleration {
            target: target_r,
            nearest: disk_r,
        });
    }

    let mut stream = seed::rng(rng.seed);
    let mut first: Option<(f64, usize, f64, usize)> = None;
    let mut fit = None;
    for _ in 0..RADIAL_START_ATTEMPTS {
        let start = stream.gen_range(0.0..std::f64::consts::PI);
        let (spokes, err, count) = best_spoke_count(height, width, target_r, start);
        if first.is_none() {
            first = Some((start, spokes, err, count));
        }
        if err <= ACCELERATION_TOLERANCE {
            fit = Some(SpokeFit {
                start,
                spokes,
                partial: None,
            });
            break;
        }
    }

    let fit = match fit {
        Some(f) => f,
        None => {
            // No whole-spoke count lands in the window: complete the budget
            // with the innermost points of one more spoke.
            let (start, _, _, _) = first.expect("at least one attempt");
            let target_count = (total / target_r).round() as usize;
            let mut spokes = 0;
            let mut count = disk_count;
            let max_spokes = 4 * height.max(width);
            loop {
                let trial = SpokeFit {
                    start,
                    spokes: spokes + 1,
                    partial: None,
                };
                let next = render_radial(height, width, &trial)
                    .iter()
                    .filter(|&&b| b == 1)
                    .count();
                if next >= target_count || spokes + 1 >= max_spokes || next == count {
                    break;
                }
                spokes += 1;
                count = next;
            }
            SpokeFit {
                start,
                spokes,
                partial: Some(target_count.saturating_sub(count)),
            }
        }
    };

    let bits = render_radial(height, width, &fit);
    let mask = SamplingMask::from_bits(
        height,
        width,
        bits,
        MaskScheme::Radial,
        target_r,
        AcsRegion::Disk {
            radius: RADIAL_ACS_RADIUS,
        },
    )?;
    let achieved = achieved_acceleration(&mask)?;
    if !within_tolerance(achieved, target_r) {
        return Err(LabError::InfeasibleAcceleration {
            target: target_r,
            nearest: achieved,
        });
    }
    Ok(mask)
}

/// Dispatches on `scheme`; `Full` ignores the acceleration.
pub fn make_mask(
    scheme: MaskScheme,
    height: usize,
    width: usize,
    target_r: f64,
    rng: MaskRng,
) -> Result<SamplingMask> {
    match scheme {
        MaskScheme::Rectilinear => make_rectilinear_mask(height, width, target_r, rng),
        MaskScheme::Radial => make_radial_mask(height, width, target_r, rng),
        MaskScheme::Full => Ok(SamplingMask::full(height, width)),
        MaskScheme::Custom => invalid("custom masks cannot be generated"),
    }
}

/// Same mask applied to every coil; unsampled entries become exactly zero.
pub fn apply_mask(mask: &SamplingMask, ksp: &MulticoilKSpace) -> Result<MulticoilKSpace> {
    let mut coils = Vec::with_capacity(ksp.n_coils());
    for coil in ksp.coils() {
        if coil.shape() != mask.shape() {
            return invalid(format!(
                "mask {:?} does not match k-space {:?}",
                mask.shape(),
                coil.shape()
            ));
        }
        let mut c = coil.clone();
        for (v, &b) in c.data_mut().iter_mut().zip(mask.bits()) {
            if b == 0 {
                *v = num_complex::Complex64::new(0.0, 0.0);
            }
        }
        coils.push(c);
    }
    MulticoilKSpace::new(coils, Some(mask.clone()))
}

/// Mask whose ones are exactly the ACS region of `mask`.
pub fn extract_acs(mask: &SamplingMask) -> Result<SamplingMask> {
    let (h, w) = mask.shape();
    let acs = mask.acs;
    if acs == AcsRegion::None {
        return Err(LabError::InvalidMask("mask has no ACS region".into()));
    }
    let mut bits = vec![0u8; h * w];
    for i in 0..h {
        for j in 0..w {
            if acs.contains(h, w, i, j) {
                bits[i * w + j] = 1;
            }
        }
    }
    if !bits.contains(&1) {
        return Err(LabError::InvalidMask("ACS region is empty".into()));
    }
    SamplingMask::from_bits(h, w, bits, mask.scheme, mask.target_acceleration, acs)
}
