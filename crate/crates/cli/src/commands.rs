//! The `mask`, `simulate`, `train`, `recon` and `compare` subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use kslab::metrics::{MetricsReport, Summary};
use kslab::rim::{Checkpoint, RimModel, Trainer};
use kslab::sampling::{achieved_acceleration, make_mask, MaskRng, MaskScheme};
use kslab::tensorfile::Tensor;
use kslab::LabError;

use crate::config::{ExperimentConfig, Method};
use crate::dataset::{self, Dataset, Split};
use crate::error::{usage, CliError, CliResult};
use crate::io::*;
use crate::reconstruct::{evaluate, Reconstruction};

#[derive(Debug, Parser)]
#[command(name = "kslab", version, about = "Rectilinear vs radial k-space subsampling experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Output root (default: $KSLAB_OUT, else ./kslab-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Configuration file overriding the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `section.key=value` override, applied after the config file.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a subsampling mask and its PNG preview.
    Mask(MaskArgs),
    /// Synthesize the phantom dataset.
    Simulate(SimulateArgs),
    /// Train one RIM per scheme.
    Train(TrainArgs),
    /// Reconstruct a split and score it against the ground truth.
    Recon(ReconArgs),
    /// Tabulate rectilinear vs radial reconstructions at every acceleration.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub scheme: MaskScheme,
    /// Grid size as HEIGHTxWIDTH.
    #[arg(long, value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long)]
    pub r: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Dataset directory (default: <out>/data).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Train only this scheme (default: every configured scheme).
    #[arg(long)]
    pub scheme: Option<MaskScheme>,
    /// Continue from `last.ckpt` up to `train.iterations`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct ReconArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub method: Method,
    #[arg(long)]
    pub scheme: MaskScheme,
    #[arg(long)]
    pub r: f64,
    /// RIM checkpoint (default: <out>/runs/<scheme>/best.ckpt).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Also write every RIM iterate.
    #[arg(long)]
    pub trajectory: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "rim")]
    pub method: Method,
    /// Radial checkpoint (default: <out>/runs/radial/best.ckpt).
    #[arg(long)]
    pub radial: Option<PathBuf>,
    /// Rectilinear checkpoint (default: <out>/runs/rectilinear/best.ckpt).
    #[arg(long)]
    pub rectilinear: Option<PathBuf>,
    /// Evaluate both rows on this scheme's masks.
    #[arg(long)]
    pub shared_masks: Option<MaskScheme>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HEIGHTxWIDTH, got '{s}'"))?;
    let p = |v: &str| v.parse::<usize>().map_err(|e| format!("bad size '{s}': {e}"));
    Ok((p(h)?, p(w)?))
}

fn fmt_r(r: f64) -> String {
    format!("{r}")
}

pub fn run(cli: Cli) -> CliResult<()> {
    let root = output_root(cli.global.out.as_deref());
    let cfg = ExperimentConfig::load(cli.global.config.as_deref(), &cli.global.overrides)?;
    let data_dir = |d: &Option<PathBuf>| d.clone().unwrap_or_else(|| root.join("data"));
    match cli.command {
        Command::Mask(a) => cmd_mask(&root, &a),
        Command::Simulate(a) => cmd_simulate(&cfg, &data_dir(&a.dataset)),
        Command::Train(a) => cmd_train(&cfg, &root, &data_dir(&a.dataset), &a),
        Command::Recon(a) => cmd_recon(&cfg, &root, &data_dir(&a.dataset), &a),
        Command::Compare(a) => cmd_compare(&cfg, &root, &data_dir(&a.dataset), &a),
    }
}

pub fn cmd_mask(root: &Path, a: &MaskArgs) -> CliResult<()> {
    if !matches!(a.scheme, MaskScheme::Rectilinear | MaskScheme::Radial) {
        return usage("mask --scheme must be rectilinear or radial");
    }
    let (h, w) = a.size;
    let mask = make_mask(a.scheme, h, w, a.r, MaskRng::new(a.seed))?;
    let dir = root.join("masks");
    ensure_dir(&dir)?;
    let stem = format!("{}_{h}x{w}_r{}_s{}", a.scheme.name(), fmt_r(a.r), a.seed);
    save_tensor(&dir.join(format!("{stem}.kslab")), &Tensor::from_mask(&mask))?;
    save_mask_png(&dir.join(format!("{stem}.png")), &mask)?;
    println!("achieved R = {:.4}", achieved_acceleration(&mask)?);
    println!("wrote {}", dir.join(format!("{stem}.kslab")).display());
    Ok(())
}

pub fn cmd_simulate(cfg: &ExperimentConfig, dir: &Path) -> CliResult<()> {
    let entries = dataset::simulate(cfg, dir)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let slices: Vec<_> = entries.iter().filter(|e| e.split == split).collect();
        let mut vols: Vec<usize> = slices.iter().map(|e| e.volume).collect();
        vols.dedup();
        println!("{split}: {} volumes, {} slices", vols.len(), slices.len());
    }
    println!("wrote {}", dir.join("manifest.txt").display());
    Ok(())
}

fn run_dir(root: &Path, scheme: MaskScheme) -> PathBuf {
    root.join("runs").join(scheme.name())
}

fn parse_curve(text: &str, path: &Path) -> CliResult<Vec<(usize, f64)>> {
    let bad = || CliError::Lab(LabError::Format(format!("malformed curve {}", path.display())));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (i, v) = l.split_once(',').ok_or_else(bad)?;
            Ok((i.parse().map_err(|_| bad())?, v.parse().map_err(|_| bad())?))
        })
        .collect()
}

fn curve_csv(header: &str, rows: &[(usize, f64)]) -> String {
    let mut out = format!("{header}\n");
    for (i, v) in rows {
        let _ = writeln!(out, "{i},{}", num(*v));
    }
    out
}

pub fn cmd_train(cfg: &ExperimentConfig, root: &Path, data: &Path, a: &TrainArgs) -> CliResult<()> {
    let ds = Dataset::open(data)?;
    let schemes = match a.scheme {
        Some(s) => vec![s],
        None => cfg.schemes()?,
    };
    let train = ds.load_split(Split::Train)?;
    let val = ds.load_split(Split::Val)?;
    if train.is_empty() || val.is_empty() {
        return usage("training needs non-empty train and val splits");
    }
    let samples = dataset::training_samples(cfg, &train);
    for scheme in schemes {
        train_scheme(cfg, root, scheme, &samples, &val, a.resume)?;
    }
    Ok(())
}

/// Mean SSIM over every validation slice and configured acceleration.
fn validate(cfg: &ExperimentConfig, model: &RimModel, val: &[dataset::Slice], scheme: MaskScheme) -> CliResult<f64> {
    let mut total = 0.0;
    for &r in &cfg.sampling.accelerations {
        total += evaluate(cfg, Method::Rim, Some(model), val, scheme, r, |_, _| Ok(()))?.ssim.mean;
    }
    Ok(total / cfg.sampling.accelerations.len() as f64)
}

fn train_scheme(
    cfg: &ExperimentConfig,
    root: &Path,
    scheme: MaskScheme,
    samples: &[kslab::rim::TrainingSample],
    val: &[dataset::Slice],
    resume: bool,
) -> CliResult<()> {
    let dir = run_dir(root, scheme);
    ensure_dir(&dir)?;
    let (last, best, loss_path, val_path) =
        (dir.join("last.ckpt"), dir.join("best.ckpt"), dir.join("loss.csv"), dir.join("validation.csv"));
    let schedule = cfg.schedule(scheme);

    let (mut trainer, mut losses, mut vals) = if resume {
        let ckpt = load_checkpoint(&last)?;
        let Some(adam) = ckpt.optimizer else {
            return Err(CliError::Missing(format!("optimizer state in {}", last.display())));
        };
        let it = ckpt.iteration;
        let losses: Vec<_> = parse_curve(&read_text(&loss_path)?, &loss_path)?.into_iter().filter(|r| r.0 < it).collect();
        let vals: Vec<_> = parse_curve(&read_text(&val_path)?, &val_path)?.into_iter().filter(|r| r.0 <= it).collect();
        (Trainer::resume(ckpt.model, adam, it, schedule)?, losses, vals)
    } else {
        let model = RimModel::new(cfg.rim_config(), cfg.rim.init_seed)?;
        let trainer = Trainer::new(model, schedule)?;
        let ssim = validate(cfg, &trainer.model, val, scheme)?;
        save_checkpoint(&best, &Checkpoint { model: trainer.model.clone(), iteration: 0, optimizer: None })?;
        (trainer, Vec::new(), vec![(0, ssim)])
    };
    let mut best_ssim = vals.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);

    let save_state = |t: &Trainer, losses: &[(usize, f64)], vals: &[(usize, f64)]| -> CliResult<()> {
        let ckpt = Checkpoint { model: t.model.clone(), iteration: t.iteration, optimizer: Some(t.adam.clone()) };
        save_checkpoint(&last, &ckpt)?;
        write_text(&loss_path, &curve_csv("iteration,loss", losses))?;
        write_text(&val_path, &curve_csv("iteration,val_ssim", vals))
    };
    save_state(&trainer, &losses, &vals)?;

    let total = cfg.train.iterations;
    while trainer.iteration < total {
        let it = trainer.iteration;
        match trainer.step(samples) {
            Ok(loss) => losses.push((it, loss)),
            Err(LabError::NumericalDivergence(detail)) => {
                write_text(&loss_path, &curve_csv("iteration,loss", &losses))?;
                let last_finite = losses.last().map_or("none".to_string(), |r| r.0.to_string());
                return Err(CliError::Divergence { iteration: it, last_finite, detail });
            }
            Err(e) => return Err(e.into()),
        }
        let done = trainer.iteration;
        if done % cfg.train.validate_every == 0 || done == total {
            let ssim = validate(cfg, &trainer.model, val, scheme)?;
            vals.push((done, ssim));
            if ssim > best_ssim {
                best_ssim = ssim;
                save_checkpoint(&best, &Checkpoint { model: trainer.model.clone(), iteration: done, optimizer: None })?;
            }
            save_state(&trainer, &losses, &vals)?;
            let recent = &losses[losses.len().saturating_sub(cfg.train.validate_every)..];
            let mean = recent.iter().map(|r| r.1).sum::<f64>() / recent.len() as f64;
            eprintln!("{} iteration {done}/{total}: loss {mean:.5}, val ssim {ssim:.5}", scheme.name());
        }
    }
    println!("{}: best val ssim {best_ssim:.5}, checkpoints in {}", scheme.name(), dir.display());
    Ok(())
}

fn load_model(path: &Path) -> CliResult<RimModel> {
    Ok(load_checkpoint(path)?.model)
}

fn write_recon(dir: &Path, slice: &dataset::Slice, rec: &Reconstruction, trajectory: bool) -> CliResult<()> {
    let id = slice.entry.id();
    save_tensor(&dir.join(format!("{id}.kslab")), &Tensor::from_real(&rec.image))?;
    save_png_minmax(&dir.join(format!("{id}.png")), &rec.image)?;
    let err = kslab::RealImage2D::new(
        rec.image.height(),
        rec.image.width(),
        rec.image.data().iter().zip(slice.target.data()).map(|(p, t)| (p - t).abs()).collect(),
    )?;
    save_png_scaled(&dir.join(format!("{id}_error.png")), &err, slice.target.max())?;
    if let (true, Some(traj)) = (trajectory, &rec.trajectory) {
        save_tensor(&dir.join(format!("{id}_trajectory.kslab")), &Tensor::from_complex_stack(traj)?)?;
        for (t, x) in traj.iter().enumerate() {
            save_png_minmax(&dir.join(format!("{id}_t{}.png", t + 1)), &x.abs())?;
        }
    }
    Ok(())
}

pub fn cmd_recon(cfg: &ExperimentConfig, root: &Path, data: &Path, a: &ReconArgs) -> CliResult<()> {
    if !matches!(a.scheme, MaskScheme::Rectilinear | MaskScheme::Radial) {
        return usage("recon --scheme must be rectilinear or radial");
    }
    let model = match a.method {
        Method::Rim => {
            let path = a.checkpoint.clone().unwrap_or_else(|| run_dir(root, a.scheme).join("best.ckpt"));
            Some(load_model(&path)?)
        }
        _ => None,
    };
    let ds = Dataset::open(data)?;
    let slices = ds.load_split(a.split)?;
    if slices.is_empty() {
        return usage(format!("split {} is empty", a.split));
    }
    let dir = root.join("recon").join(format!("{}_{}_r{}_{}", a.method.name(), a.scheme.name(), fmt_r(a.r), a.split));
    ensure_dir(&dir)?;
    let report = evaluate(cfg, a.method, model.as_ref(), &slices, a.scheme, a.r, |s, rec| write_recon(&dir, s, rec, a.trajectory))?;
    write_text(&dir.join("metrics.csv"), &report.to_csv())?;
    println!(
        "{} {} R={}: PSNR {:.3} ± {:.3}, SSIM {:.4} ± {:.4}, VIF {:.4} ± {:.4}",
        a.method.name(),
        a.scheme.name(),
        fmt_r(a.r),
        report.psnr.mean,
        report.psnr.std,
        report.ssim.mean,
        report.ssim.std,
        report.vif.mean,
        report.vif.std
    );
    println!("wrote {}", dir.display());
    Ok(())
}

/// One row of the comparison table.
pub struct Row {
    pub r: f64,
    pub scheme: MaskScheme,
    pub report: MetricsReport,
}

fn pm(s: Summary, digits: usize) -> String {
    format!("{:.*} ± {:.*}", digits, s.mean, digits, s.std)
}

pub fn table_csv(rows: &[Row]) -> String {
    let mut out = String::from("r,scheme,psnr_mean,psnr_std,ssim_mean,ssim_std,vif_mean,vif_std\n");
    for row in rows {
        let rep = &row.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            fmt_r(row.r),
            row.scheme.name(),
            num(rep.psnr.mean),
            num(rep.psnr.std),
            num(rep.ssim.mean),
            num(rep.ssim.std),
            num(rep.vif.mean),
            num(rep.vif.std)
        );
    }
    out
}

pub fn table_text(rows: &[Row]) -> String {
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                fmt_r(r.r),
                r.scheme.name().to_string(),
                pm(r.report.psnr, 2),
                pm(r.report.ssim, 4),
                pm(r.report.vif, 4),
            ]
        })
        .collect();
    let header = ["R", "Scheme", "PSNR (dB)", "SSIM", "VIF"].map(String::from);
    let mut widths = header.clone().map(|h| h.chars().count());
    for c in &cells {
        for (w, v) in widths.iter_mut().zip(c) {
            *w = (*w).max(v.chars().count());
        }
    }
    let line = |c: &[String; 5]| {
        let parts: Vec<String> = c.iter().zip(widths).map(|(v, w)| format!("{v:<w$}")).collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(&header);
    for c in &cells {
        out.push_str(&line(c));
    }
    out
}

/// `RADIAL` when radial mean SSIM strictly exceeds rectilinear at every R.
pub fn ordering(rows: &[Row]) -> &'static str {
    let mut rs: Vec<f64> = rows.iter().map(|r| r.r).collect();
    rs.dedup();
    let ssim = |r: f64, s: MaskScheme| rows.iter().find(|x| x.r == r && x.scheme == s).map(|x| x.report.ssim.mean);
    let radial = rs.iter().all(|&r| match (ssim(r, MaskScheme::Radial), ssim(r, MaskScheme::Rectilinear)) {
        (Some(a), Some(b)) => a > b,
        _ => false,
    });
    if radial {
        "RADIAL"
    } else {
        "MIXED"
    }
}

pub fn cmd_compare(cfg: &ExperimentConfig, root: &Path, data: &Path, a: &CompareArgs) -> CliResult<()> {
    let schemes = [MaskScheme::Rectilinear, MaskScheme::Radial];
    let mut models = Vec::new();
    for scheme in schemes {
        models.push(match a.method {
            Method::Rim => {
                let flag = if scheme == MaskScheme::Radial { &a.radial } else { &a.rectilinear };
                let path = flag.clone().unwrap_or_else(|| run_dir(root, scheme).join("best.ckpt"));
                Some(load_model(&path)?)
            }
            _ => None,
        });
    }
    let ds = Dataset::open(data)?;
    let test = ds.load_split(Split::Test)?;
    if test.is_empty() {
        return Err(CliError::Missing("test split".into()));
    }
    let dir = root.join("compare").join(a.method.name());
    ensure_dir(&dir)?;
    let mut rows = Vec::new();
    for &r in &cfg.sampling.accelerations {
        for (scheme, model) in schemes.iter().zip(&models) {
            let mask_scheme = a.shared_masks.unwrap_or(*scheme);
            let report = evaluate(cfg, a.method, model.as_ref(), &test, mask_scheme, r, |_, _| Ok(()))?;
            write_text(&dir.join(format!("{}_r{}.csv", scheme.name(), fmt_r(r))), &report.to_csv())?;
            rows.push(Row { r, scheme: *scheme, report });
        }
    }
    let text = table_text(&rows);
    write_text(&dir.join("table.csv"), &table_csv(&rows))?;
    write_text(&dir.join("table.txt"), &text)?;
    print!("{text}");
    println!("ORDERING={}", ordering(&rows));
    Ok(())
}
