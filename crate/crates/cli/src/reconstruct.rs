//! Reconstruction of subsampled slices and their evaluation.

use kslab::classical::{solve_map_cg, zero_filled_rss};
use kslab::metrics::{evaluate_pair, MetricsReport};
use kslab::rim::{rim_infer, RimModel};
use kslab::sampling::MaskScheme;
use kslab::{ComplexImage2D, RealImage2D};

use crate::config::{ExperimentConfig, Method};
use crate::dataset::{eval_mask, subsample, Slice};
use crate::error::{usage, CliResult};

pub struct Reconstruction {
    pub image: RealImage2D,
    /// RIM iterates `x_1 … x_T`.
    pub trajectory: Option<Vec<ComplexImage2D>>,
}

/// Reconstructs `slice` under the evaluation mask of `(mask_scheme, r)`.
pub fn reconstruct(
    cfg: &ExperimentConfig,
    method: Method,
    model: Option<&RimModel>,
    slice: &Slice,
    mask_scheme: MaskScheme,
    r: f64,
) -> CliResult<Reconstruction> {
    let shape = (slice.entry.height, slice.entry.width);
    let mask = eval_mask(cfg, mask_scheme, r, slice.entry.volume, shape)?;
    let (y, s) = subsample(cfg, slice, &mask)?;
    Ok(match method {
        Method::ZeroFilled => Reconstruction { image: zero_filled_rss(&y)?, trajectory: None },
        Method::MapCg => {
            Reconstruction { image: solve_map_cg(&y, &s, &mask, &cfg.map_objective()?)?.image.abs(), trajectory: None }
        }
        Method::Rim => {
            let Some(model) = model else {
                return usage("the rim method needs a checkpoint");
            };
            let traj = rim_infer(model, &y, &s, &mask, cfg.nll())?;
            let image = traj.last().expect("at least one time step").abs();
            Reconstruction { image, trajectory: Some(traj) }
        }
    })
}

/// Per-slice metrics of `method` on `slices`, keyed by slice id.
pub fn evaluate(
    cfg: &ExperimentConfig,
    method: Method,
    model: Option<&RimModel>,
    slices: &[Slice],
    mask_scheme: MaskScheme,
    r: f64,
    mut each: impl FnMut(&Slice, &Reconstruction) -> CliResult<()>,
) -> CliResult<MetricsReport> {
    let mut rows = Vec::with_capacity(slices.len());
    for slice in slices {
        let rec = reconstruct(cfg, method, model, slice, mask_scheme, r)?;
        rows.push(evaluate_pair(&slice.entry.id(), &rec.image, &slice.target)?);
        each(slice, &rec)?;
    }
    Ok(MetricsReport::from_rows(rows)?)
}
