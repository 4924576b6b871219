//! Synthetic multi-slice dataset on disk.
//!
//! ```text
//! manifest.txt                  one line per slice: path shape split
//! SHA256SUMS                    checksum of every payload file
//! volNNN/sensitivities.kslab    c128, coils × h × w
//! volNNN/sliceSS/kspace.kslab   c128, coils × h × w, fully sampled and noisy
//! volNNN/sliceSS/phantom.kslab  f64, h × w ground truth
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use kslab::forward::{
    estimate_sensitivities_from_acs, simulate_acquisition, simulate_sensitivities, AcquisitionSim, MulticoilKSpace,
    SensitivityMaps,
};
use kslab::phantom::{perturbed_ellipses, render, volume_slice};
use kslab::rim::TrainingSample;
use kslab::sampling::{apply_mask, extract_acs, make_mask, MaskRng, MaskScheme, SamplingMask};
use kslab::tensorfile::Tensor;
use kslab::{seed, RealImage2D};

use crate::config::{scheme_key, ExperimentConfig};
use crate::error::{usage, CliError, CliResult};
use crate::io::{ensure_dir, load_tensor, read_text, save_tensor, sha256_file, write_text};

const EVAL_MASK_STREAM: u64 = 0x6576_616c;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceEntry {
    /// Relative to the dataset root, e.g. `vol003/slice01`.
    pub path: String,
    pub volume: usize,
    pub height: usize,
    pub width: usize,
    pub split: Split,
}

impl SliceEntry {
    /// `vol003_slice01`, unique within a dataset.
    pub fn id(&self) -> String {
        self.path.replace('/', "_")
    }
}

/// One slice loaded from disk.
#[derive(Debug, Clone)]
pub struct Slice {
    pub entry: SliceEntry,
    pub kspace: MulticoilKSpace,
    pub target: RealImage2D,
    pub sensitivities: SensitivityMaps,
}

pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<SliceEntry>,
}

fn split_of(cfg: &ExperimentConfig, volume: usize) -> Split {
    let d = &cfg.data;
    if volume < d.train_volumes {
        Split::Train
    } else if volume < d.train_volumes + d.val_volumes {
        Split::Val
    } else {
        Split::Test
    }
}

/// Writes the dataset described by `cfg` into `root` and returns its
/// manifest entries.
pub fn simulate(cfg: &ExperimentConfig, root: &Path) -> CliResult<Vec<SliceEntry>> {
    let d = &cfg.data;
    ensure_dir(root)?;
    let sens = simulate_sensitivities(d.height, d.width, d.n_coils)?;
    let full = SamplingMask::full(d.height, d.width);
    let n_volumes = d.train_volumes + d.val_volumes + d.test_volumes;
    let mut entries = Vec::new();
    let mut payloads = Vec::new();
    for vol in 0..n_volumes {
        let vdir = format!("vol{vol:03}");
        ensure_dir(&root.join(&vdir))?;
        let spath = format!("{vdir}/sensitivities.kslab");
        save_tensor(&root.join(&spath), &Tensor::from_complex_stack(sens.maps())?)?;
        payloads.push(spath);

        let ellipses = perturbed_ellipses(&mut seed::rng(seed::derive(d.phantom_seed, &[vol as u64])));
        for s in 0..d.slices_per_volume {
            let rel = format!("{vdir}/slice{s:02}");
            let dir = root.join(&rel);
            ensure_dir(&dir)?;
            let phantom = render(d.height, d.width, &volume_slice(&ellipses, s, d.slices_per_volume))?;
            let sim = AcquisitionSim {
                phantom: phantom.clone(),
                sensitivities: sens.clone(),
                noise_std: d.noise_std,
                rng_seed: seed::derive(d.noise_seed, &[vol as u64, s as u64]),
            };
            let (y, _) = simulate_acquisition(&sim, &full)?;
            save_tensor(&dir.join("kspace.kslab"), &Tensor::from_complex_stack(y.coils())?)?;
            save_tensor(&dir.join("phantom.kslab"), &Tensor::from_real(&phantom))?;
            payloads.push(format!("{rel}/kspace.kslab"));
            payloads.push(format!("{rel}/phantom.kslab"));
            entries.push(SliceEntry { path: rel, volume: vol, height: d.height, width: d.width, split: split_of(cfg, vol) });
        }
    }

    let manifest: String =
        entries.iter().map(|e| format!("{} {}x{} {}\n", e.path, e.height, e.width, e.split)).collect();
    write_text(&root.join("manifest.txt"), &manifest)?;
    let mut sums = String::new();
    for p in &payloads {
        sums.push_str(&format!("{}  {p}\n", sha256_file(&root.join(p))?));
    }
    write_text(&root.join("SHA256SUMS"), &sums)?;
    Ok(entries)
}

fn parse_entry(line: &str) -> Option<SliceEntry> {
    let mut f = line.split_whitespace();
    let (path, shape, split) = (f.next()?, f.next()?, f.next()?);
    if f.next().is_some() {
        return None;
    }
    let (h, w) = shape.split_once('x')?;
    let volume = path.strip_prefix("vol")?.split('/').next()?.parse().ok()?;
    Some(SliceEntry {
        path: path.to_string(),
        volume,
        height: h.parse().ok()?,
        width: w.parse().ok()?,
        split: split.parse().ok()?,
    })
}

impl Dataset {
    pub fn open(root: &Path) -> CliResult<Self> {
        let text = read_text(&root.join("manifest.txt"))?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                parse_entry(l).ok_or_else(|| CliError::Lab(kslab::LabError::Format(format!("bad manifest line '{l}'"))))
            })
            .collect::<CliResult<Vec<_>>>()?;
        if entries.is_empty() {
            return usage(format!("{} lists no slices", root.join("manifest.txt").display()));
        }
        Ok(Self { root: root.to_path_buf(), entries })
    }

    pub fn split(&self, split: Split) -> Vec<&SliceEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn load(&self, entry: &SliceEntry) -> CliResult<Slice> {
        let dir = self.root.join(&entry.path);
        let vdir = self.root.join(format!("vol{:03}", entry.volume));
        let kspace = MulticoilKSpace::new(load_tensor(&dir.join("kspace.kslab"))?.to_complex_stack()?, None)?;
        let target = load_tensor(&dir.join("phantom.kslab"))?.to_real()?;
        let sensitivities = SensitivityMaps::new(load_tensor(&vdir.join("sensitivities.kslab"))?.to_complex_stack()?)?;
        let shape = (entry.height, entry.width);
        if kspace.shape() != shape || target.shape() != shape || sensitivities.shape() != shape {
            return Err(CliError::Lab(kslab::LabError::Format(format!("{} does not match its manifest shape", entry.path))));
        }
        Ok(Slice { entry: entry.clone(), kspace, target, sensitivities })
    }

    pub fn load_split(&self, split: Split) -> CliResult<Vec<Slice>> {
        self.split(split).into_iter().map(|e| self.load(e)).collect()
    }
}

/// Training samples; `None` sensitivities make the trainer estimate them
/// from each mask.
pub fn training_samples(cfg: &ExperimentConfig, slices: &[Slice]) -> Vec<TrainingSample> {
    slices
        .iter()
        .map(|s| TrainingSample {
            volume: s.entry.volume,
            kspace: s.kspace.clone(),
            target: s.target.clone(),
            sensitivities: (cfg.data.sensitivities == "simulated").then(|| s.sensitivities.clone()),
        })
        .collect()
}

/// Fixed evaluation mask of a volume; slices of one volume share it.
pub fn eval_mask(cfg: &ExperimentConfig, scheme: MaskScheme, r: f64, volume: usize, shape: (usize, usize)) -> CliResult<SamplingMask> {
    if r == 1.0 {
        return Ok(SamplingMask::full(shape.0, shape.1));
    }
    let s = seed::derive(cfg.sampling.mask_seed, &[EVAL_MASK_STREAM, scheme_key(scheme), r.to_bits(), volume as u64]);
    Ok(make_mask(scheme, shape.0, shape.1, r, MaskRng::new(s))?)
}

/// Retrospectively subsampled slice with the sensitivities the config asks for.
pub fn subsample(cfg: &ExperimentConfig, slice: &Slice, mask: &SamplingMask) -> CliResult<(MulticoilKSpace, SensitivityMaps)> {
    let y = apply_mask(mask, &slice.kspace)?;
    let s = if cfg.data.sensitivities == "simulated" {
        slice.sensitivities.clone()
    } else {
        estimate_sensitivities_from_acs(&y, &extract_acs(mask)?)?
    };
    Ok((y, s))
}
