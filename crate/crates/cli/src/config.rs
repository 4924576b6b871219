//! Experiment configuration: `[section]` headers with `key = value` lines
//! (TOML syntax), layered as defaults < file < `--set` overrides.

use std::path::Path;

use kslab::classical::MapObjective;
use kslab::forward::NllConfig;
use kslab::rim::{RimConfig, TrainSchedule};
use kslab::sampling::MaskScheme;
use serde::Deserialize;
use toml::{Table, Value};

use crate::error::{io_at, usage, CliResult};

pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.conf");

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub n_coils: usize,
    pub noise_std: f64,
    pub slices_per_volume: usize,
    pub train_volumes: usize,
    pub val_volumes: usize,
    pub test_volumes: usize,
    pub sensitivities: String,
    pub phantom_seed: u64,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub schemes: Vec<String>,
    pub accelerations: Vec<f64>,
    pub mask_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RimSection {
    pub time_steps: usize,
    pub hidden_channels: usize,
    pub kernel_sizes: Vec<usize>,
    pub standardize_inputs: bool,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_iters: usize,
    pub decay_at: Vec<usize>,
    pub decay_factor: f64,
    pub seed: u64,
    pub validate_every: usize,
    pub sigma_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconSection {
    pub methods: Vec<String>,
    pub reg_lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub sampling: SamplingConfig,
    pub rim: RimSection,
    pub train: TrainSection,
    pub recon: ReconSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ZeroFilled,
    MapCg,
    Rim,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::ZeroFilled => "zero-filled",
            Method::MapCg => "map-cg",
            Method::Rim => "rim",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "zero-filled" => Ok(Method::ZeroFilled),
            "map-cg" => Ok(Method::MapCg),
            "rim" => Ok(Method::Rim),
            _ => Err(format!("unknown method '{s}' (expected zero-filled, map-cg or rim)")),
        }
    }
}

fn parse_toml(text: &str, origin: &str) -> CliResult<Table> {
    text.parse::<Table>().map_err(|e| crate::error::CliError::Usage(format!("{origin}: {e}")))
}

/// Overlays `top` onto `base` key by key within each section.
fn merge(base: &mut Table, top: Table, origin: &str) -> CliResult<()> {
    for (section, value) in top {
        let Value::Table(entries) = value else {
            return usage(format!("{origin}: '{section}' must be a [section]"));
        };
        match base.get_mut(&section) {
            Some(Value::Table(dst)) => dst.extend(entries),
            _ => return usage(format!("{origin}: unknown section [{section}]")),
        }
    }
    Ok(())
}

/// Parses `section.key=value`; values that are not valid TOML are taken as
/// bare strings.
fn parse_override(spec: &str) -> CliResult<Table> {
    let Some((path, raw)) = spec.split_once('=') else {
        return usage(format!("--set expects section.key=value, got '{spec}'"));
    };
    let Some((section, key)) = path.trim().split_once('.') else {
        return usage(format!("--set key must be section.key, got '{path}'"));
    };
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let mut inner = Table::new();
    inner.insert(key.to_string(), value);
    let mut outer = Table::new();
    outer.insert(section.to_string(), Value::Table(inner));
    Ok(outer)
}

impl ExperimentConfig {
    pub fn load(file: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = parse_toml(DEFAULT_CONFIG, "built-in defaults")?;
        if let Some(path) = file {
            let text = io_at(path, std::fs::read_to_string(path))?;
            merge(&mut table, parse_toml(&text, &path.display().to_string())?, &path.display().to_string())?;
        }
        for spec in overrides {
            merge(&mut table, parse_override(spec)?, "--set")?;
        }
        let cfg: ExperimentConfig =
            Value::Table(table).try_into().map_err(|e| crate::error::CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let d = &self.data;
        let sizes = [
            ("data.height", d.height),
            ("data.width", d.width),
            ("data.n_coils", d.n_coils),
            ("data.slices_per_volume", d.slices_per_volume),
            ("data.train_volumes", d.train_volumes),
            ("data.val_volumes", d.val_volumes),
            ("data.test_volumes", d.test_volumes),
            ("rim.time_steps", self.rim.time_steps),
            ("rim.hidden_channels", self.rim.hidden_channels),
            ("train.batch_size", self.train.batch_size),
            ("train.validate_every", self.train.validate_every),
            ("recon.max_iters", self.recon.max_iters),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return usage(format!("{name} must be positive"));
            }
        }
        if !(d.noise_std >= 0.0 && d.noise_std.is_finite()) {
            return usage("data.noise_std must be a non-negative number");
        }
        if !matches!(d.sensitivities.as_str(), "simulated" | "estimated") {
            return usage(format!("data.sensitivities must be simulated or estimated, got '{}'", d.sensitivities));
        }
        if self.sampling.schemes.is_empty() {
            return usage("sampling.schemes must not be empty");
        }
        self.schemes()?;
        if self.sampling.accelerations.is_empty() || self.sampling.accelerations.iter().any(|&r| !(r >= 1.0)) {
            return usage("sampling.accelerations must be a non-empty list of values >= 1");
        }
        if self.rim.kernel_sizes.len() != 3 {
            return usage("rim.kernel_sizes needs three entries");
        }
        self.methods()?;
        self.rim_config().validate()?;
        self.schedule(MaskScheme::Radial).validate()?;
        self.map_objective()?.validate()?;
        Ok(())
    }

    pub fn schemes(&self) -> CliResult<Vec<MaskScheme>> {
        self.sampling
            .schemes
            .iter()
            .map(|s| match s.parse::<MaskScheme>() {
                Ok(m @ (MaskScheme::Rectilinear | MaskScheme::Radial)) => Ok(m),
                _ => usage(format!("sampling.schemes: '{s}' is not rectilinear or radial")),
            })
            .collect()
    }

    pub fn methods(&self) -> CliResult<Vec<Method>> {
        self.recon
            .methods
            .iter()
            .map(|m| m.parse().map_err(crate::error::CliError::Usage))
            .collect()
    }

    pub fn rim_config(&self) -> RimConfig {
        let k = &self.rim.kernel_sizes;
        RimConfig {
            time_steps: self.rim.time_steps,
            hidden_channels: self.rim.hidden_channels,
            kernel_sizes: (k[0], k[1], k[2]),
            standardize_inputs: self.rim.standardize_inputs,
        }
    }

    pub fn nll(&self) -> NllConfig {
        NllConfig { sigma_sq: self.train.sigma_sq }
    }

    pub fn schedule(&self, scheme: MaskScheme) -> TrainSchedule {
        let t = &self.train;
        TrainSchedule {
            iterations: t.iterations,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            warmup_iters: t.warmup_iters,
            decay_at: t.decay_at.clone(),
            decay_factor: t.decay_factor,
            accelerations: self.sampling.accelerations.clone(),
            scheme,
            seed: kslab::seed::derive(t.seed, &[scheme_key(scheme)]),
            nll: self.nll(),
            ..TrainSchedule::default()
        }
    }

    pub fn map_objective(&self) -> CliResult<MapObjective> {
        Ok(MapObjective {
            data_term: self.nll(),
            reg_lambda: self.recon.reg_lambda,
            max_iters: self.recon.max_iters,
            tol: self.recon.tol,
        })
    }
}

/// Stable per-scheme seed key.
pub fn scheme_key(scheme: MaskScheme) -> u64 {
    match scheme {
        MaskScheme::Rectilinear => 1,
        MaskScheme::Radial => 2,
        MaskScheme::Full => 3,
        MaskScheme::Custom => 4,
    }
}
