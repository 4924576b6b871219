use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kslab::forward::{adjoint, MulticoilKSpace, SensitivityMaps};
use kslab::metrics::{MetricsReport, Summary};
use kslab::rim::{Checkpoint, RimModel};
use kslab::tensorfile::Tensor;
use kslab_cli::config::ExperimentConfig;
use tempfile::TempDir;

const TINY: &str = r#"
[data]
height = 48
width = 48
slices_per_volume = 2
train_volumes = 2
val_volumes = 1
test_volumes = 1

[sampling]
schemes = ["radial"]

[rim]
time_steps = 2
hidden_channels = 4

[train]
iterations = 6
batch_size = 2
warmup_iters = 2
decay_at = []
validate_every = 3

[recon]
max_iters = 20
"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let s = Self { dir: tempfile::tempdir().unwrap() };
        std::fs::write(s.path().join("tiny.conf"), TINY).unwrap();
        s
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn out(&self) -> PathBuf {
        self.path().join("out")
    }

    fn run_in(&self, out: &Path, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_kslab"));
        cmd.arg("--out").arg(out).arg("--config").arg(self.path().join("tiny.conf")).args(args);
        cmd.output().unwrap()
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_in(&self.out(), args)
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn config(&self, overrides: &[&str]) -> ExperimentConfig {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        ExperimentConfig::load(Some(&self.path().join("tiny.conf")), &o).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// Relative path to SHA-256 of every file under `root`.
fn checksums(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, kslab_cli::io::sha256_file(&p).unwrap());
            }
        }
    }
    out
}

fn achieved(stdout: &str) -> f64 {
    stdout.lines().find_map(|l| l.strip_prefix("achieved R = ")).unwrap().trim().parse().unwrap()
}

#[test]
fn radial_mask_on_a_218x170_grid() {
    let sb = Sandbox::new();
    let r = achieved(&sb.ok(&["mask", "--scheme", "radial", "--size", "218x170", "--r", "10", "--seed", "1"]));
    assert!((9.5..=10.5).contains(&r), "{r}");
    let png = image::open(sb.out().join("masks/radial_218x170_r10_s1.png")).unwrap().into_luma16();
    assert_eq!(png.dimensions(), (170, 218));
    let t = Tensor::load(sb.out().join("masks/radial_218x170_r10_s1.kslab")).unwrap().to_mask().unwrap();
    let white = png.pixels().filter(|p| p.0[0] == 65535).count();
    assert_eq!(white, t.count());
}

#[test]
fn unit_acceleration_mask_is_all_white() {
    let sb = Sandbox::new();
    sb.ok(&["mask", "--scheme", "rectilinear", "--size", "40x36", "--r", "1"]);
    let png = image::open(sb.out().join("masks/rectilinear_40x36_r1_s0.png")).unwrap().into_luma16();
    assert!(png.pixels().all(|p| p.0[0] == 65535));
}

#[test]
fn mask_errors_map_to_exit_codes() {
    let sb = Sandbox::new();
    assert_eq!(code(&sb.run(&["mask", "--scheme", "radial", "--size", "24x24", "--r", "10"])), 2);
    assert_eq!(code(&sb.run(&["mask", "--scheme", "spiral", "--size", "24x24", "--r", "4"])), 1);
    assert_eq!(code(&sb.run(&["mask", "--scheme", "radial", "--size", "24", "--r", "4"])), 1);
}

#[test]
fn output_root_comes_from_the_environment() {
    let sb = Sandbox::new();
    let o = Command::new(env!("CARGO_BIN_EXE_kslab"))
        .env("KSLAB_OUT", sb.path().join("env-out"))
        .args(["mask", "--scheme", "radial", "--size", "64x64", "--r", "5"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(sb.path().join("env-out/masks/radial_64x64_r5_s0.kslab").exists());
}

#[test]
fn default_config_split_counts() {
    let sb = Sandbox::new();
    let o = Command::new(env!("CARGO_BIN_EXE_kslab"))
        .arg("--out")
        .arg(sb.out())
        .arg("simulate")
        .output()
        .unwrap();
    assert!(o.status.success());
    let manifest = std::fs::read_to_string(sb.out().join("data/manifest.txt")).unwrap();
    let count = |split: &str| manifest.lines().filter(|l| l.ends_with(split)).count();
    let cfg = ExperimentConfig::load(None, &[]).unwrap();
    let d = &cfg.data;
    assert_eq!(count(" train"), d.train_volumes * d.slices_per_volume);
    assert_eq!(count(" val"), d.val_volumes * d.slices_per_volume);
    assert_eq!(count(" test"), d.test_volumes * d.slices_per_volume);
    assert!(d.train_volumes > d.val_volumes && d.val_volumes >= d.test_volumes);
}

#[test]
fn noiseless_kspace_reconstructs_its_phantom() {
    let sb = Sandbox::new();
    sb.ok(&["--set", "data.noise_std=0.0", "simulate"]);
    let data = sb.out().join("data");
    let manifest = std::fs::read_to_string(data.join("manifest.txt")).unwrap();
    for line in manifest.lines() {
        let rel = line.split_whitespace().next().unwrap();
        let vol = rel.split('/').next().unwrap();
        let y = MulticoilKSpace::new(Tensor::load(data.join(rel).join("kspace.kslab")).unwrap().to_complex_stack().unwrap(), None)
            .unwrap();
        let s = SensitivityMaps::new(Tensor::load(data.join(vol).join("sensitivities.kslab")).unwrap().to_complex_stack().unwrap())
            .unwrap();
        let x = adjoint(&y, &s).unwrap();
        let phantom = Tensor::load(data.join(rel).join("phantom.kslab")).unwrap().to_real().unwrap();
        for (a, b) in x.data().iter().zip(phantom.data()) {
            assert!((a.re - b).abs() < 1e-10 && a.im.abs() < 1e-10);
        }
    }
}

#[test]
fn simulation_is_reproducible_and_checksummed() {
    let sb = Sandbox::new();
    let (a, b) = (sb.path().join("a"), sb.path().join("b"));
    assert!(sb.run_in(&a, &["simulate"]).status.success());
    assert!(sb.run_in(&b, &["simulate"]).status.success());
    let (ca, cb) = (checksums(&a), checksums(&b));
    assert_eq!(ca, cb);
    let sums = std::fs::read_to_string(a.join("data/SHA256SUMS")).unwrap();
    for line in sums.lines() {
        let (hash, rel) = line.split_once("  ").unwrap();
        assert_eq!(ca[&format!("data/{rel}")], hash);
    }
}

#[test]
fn splits_are_disjoint_and_training_never_reads_test_slices() {
    let sb = Sandbox::new();
    sb.ok(&["simulate"]);
    let data = sb.out().join("data");
    let manifest = std::fs::read_to_string(data.join("manifest.txt")).unwrap();
    let mut by_volume: BTreeMap<&str, &str> = BTreeMap::new();
    for line in manifest.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        let vol = f[0].split('/').next().unwrap();
        assert_eq!(*by_volume.entry(vol).or_insert(f[2]), f[2], "volume {vol} spans splits");
    }
    for line in manifest.lines().filter(|l| l.ends_with(" test")) {
        let rel = line.split_whitespace().next().unwrap();
        std::fs::remove_dir_all(data.join(rel)).unwrap();
    }
    sb.ok(&["--set", "train.iterations=2", "train"]);
}

#[test]
fn zero_filled_at_full_sampling_scores_perfect_ssim() {
    let sb = Sandbox::new();
    sb.ok(&["--set", "data.noise_std=0.0", "simulate"]);
    sb.ok(&["recon", "--method", "zero-filled", "--scheme", "radial", "--r", "1"]);
    let csv = std::fs::read_to_string(sb.out().join("recon/zero-filled_radial_r1_test/metrics.csv")).unwrap();
    let report = MetricsReport::from_csv(&csv).unwrap();
    assert!(!report.per_slice.is_empty());
    for row in &report.per_slice {
        assert!((row.ssim - 1.0).abs() < 1e-10, "{}", row.ssim);
    }
}

#[test]
fn map_cg_beats_zero_filled() {
    let sb = Sandbox::new();
    sb.ok(&["simulate"]);
    let mean = |method: &str| {
        sb.ok(&["recon", "--method", method, "--scheme", "rectilinear", "--r", "5"]);
        let p = sb.out().join(format!("recon/{method}_rectilinear_r5_test/metrics.csv"));
        MetricsReport::from_csv(&std::fs::read_to_string(p).unwrap()).unwrap().ssim.mean
    };
    let (zf, cg) = (mean("zero-filled"), mean("map-cg"));
    assert!(cg > zf, "map-cg {cg} vs zero-filled {zf}");
}

#[test]
fn recon_outputs_and_trajectory() {
    let sb = Sandbox::new();
    sb.ok(&["simulate"]);
    sb.ok(&["train"]);
    sb.ok(&["recon", "--method", "rim", "--scheme", "radial", "--r", "5", "--trajectory"]);
    let dir = sb.out().join("recon/rim_radial_r5_test");
    let report = MetricsReport::from_csv(&std::fs::read_to_string(dir.join("metrics.csv")).unwrap()).unwrap();
    let t = sb.config(&[]).rim.time_steps;
    for row in &report.per_slice {
        let id = &row.slice_id;
        let rec = Tensor::load(dir.join(format!("{id}.kslab"))).unwrap().to_real().unwrap();
        let traj = Tensor::load(dir.join(format!("{id}_trajectory.kslab"))).unwrap().to_complex_stack().unwrap();
        assert_eq!(traj.len(), t);
        assert_eq!(traj.last().unwrap().abs(), rec);
        for k in 1..=t {
            assert!(dir.join(format!("{id}_t{k}.png")).exists());
        }
        assert!(dir.join(format!("{id}.png")).exists());
        assert!(dir.join(format!("{id}_error.png")).exists());
    }
}

#[test]
fn missing_artifacts_exit_4() {
    let sb = Sandbox::new();
    assert_eq!(code(&sb.run(&["train"])), 4);
    sb.ok(&["simulate"]);
    assert_eq!(code(&sb.run(&["recon", "--method", "rim", "--scheme", "radial", "--r", "5"])), 4);
    assert_eq!(code(&sb.run(&["compare"])), 4);
    assert_eq!(code(&sb.run(&["train", "--resume"])), 4);
}

#[test]
fn zero_iterations_keep_the_initialization() {
    let sb = Sandbox::new();
    sb.ok(&["simulate"]);
    sb.ok(&["--set", "train.iterations=0", "train"]);
    let cfg = sb.config(&[]);
    let init = RimModel::new(cfg.rim_config(), cfg.rim.init_seed).unwrap();
    for name in ["best.ckpt", "last.ckpt"] {
        let c = Checkpoint::load(sb.out().join("runs/radial").join(name)).unwrap();
        assert_eq!(c.model, init, "{name}");
        assert_eq!(c.iteration, 0);
    }
}

#[test]
fn resumed_training_continues_the_same_curve() {
    let sb = Sandbox::new();
    sb.ok(&["simulate"]);
    let (a, b) = (sb.path().join("a"), sb.path().join("b"));
    for out in [&a, &b] {
        std::fs::create_dir_all(out).unwrap();
        std::fs::create_dir_all(out.join("data")).unwrap();
    }
    let data = sb.out().join("data");
    let data = data.to_str().unwrap();
    assert!(sb.run_in(&a, &["train", "--dataset", data]).status.success());
    assert!(sb.run_in(&b, &["--set", "train.iterations=3", "train", "--dataset", data]).status.success());
    assert!(sb.run_in(&b, &["train", "--dataset", data, "--resume"]).status.success());
    let read = |d: &Path, f: &str| std::fs::read(d.join("runs/radial").join(f)).unwrap();
    assert_eq!(read(&a, "loss.csv"), read(&b, "loss.csv"));
    assert_eq!(read(&a, "last.ckpt"), read(&b, "last.ckpt"));
    assert_eq!(read(&a, "best.ckpt"), read(&b, "best.ckpt"));
}

#[test]
fn divergence_exits_5_with_last_finite_iteration() {
    let sb = Sandbox::new();
    sb.ok(&["simulate"]);
    let o = sb.run(&["--set", "train.learning_rate=1e300", "--set", "train.warmup_iters=0", "train"]);
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("last finite iteration"));
}

#[test]
fn same_checkpoint_and_masks_tie() {
    let sb = Sandbox::new();
    sb.ok(&["simulate"]);
    sb.ok(&["train"]);
    let ckpt = sb.out().join("runs/radial/best.ckpt");
    let c = ckpt.to_str().unwrap();
    let stdout = sb.ok(&["compare", "--radial", c, "--rectilinear", c, "--shared-masks", "radial"]);
    assert!(stdout.contains("ORDERING=MIXED"), "{stdout}");
    let table = std::fs::read_to_string(sb.out().join("compare/rim/table.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    for pair in rows.chunks(2) {
        assert_eq!(pair[0][2..], pair[1][2..]);
    }
}

#[test]
fn compare_std_columns_recompute_from_per_slice_csvs() {
    let sb = Sandbox::new();
    sb.ok(&["simulate"]);
    let stdout = sb.ok(&["compare", "--method", "zero-filled"]);
    assert!(stdout.contains("ORDERING="));
    let dir = sb.out().join("compare/zero-filled");
    let table = std::fs::read_to_string(dir.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4);
    for line in table.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let text = std::fs::read_to_string(dir.join(format!("{}_r{}.csv", f[1], f[0]))).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .skip(1)
            .filter(|l| !l.starts_with("mean") && !l.starts_with("std"))
            .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
            .collect();
        for (k, col) in (0..3).enumerate() {
            let s = Summary::of(&rows.iter().map(|r| r[col]).collect::<Vec<_>>());
            let mean: f64 = f[2 + 2 * k].parse().unwrap();
            let std: f64 = f[3 + 2 * k].parse().unwrap();
            assert!((s.mean - mean).abs() <= 1e-12 * mean.abs().max(1.0));
            assert!((s.std - std).abs() <= 1e-12);
        }
    }
    let text = std::fs::read_to_string(dir.join("table.txt")).unwrap();
    assert!(text.lines().next().unwrap().starts_with("R "));
    assert!(text.contains(" ± "));
}

#[test]
fn every_command_is_byte_reproducible() {
    let sb = Sandbox::new();
    let (a, b) = (sb.path().join("a"), sb.path().join("b"));
    for out in [&a, &b] {
        let run = |args: &[&str]| assert!(sb.run_in(out, args).status.success(), "{args:?}");
        run(&["mask", "--scheme", "radial", "--size", "64x64", "--r", "5", "--seed", "4"]);
        run(&["mask", "--scheme", "rectilinear", "--size", "64x64", "--r", "5", "--seed", "4"]);
        run(&["simulate"]);
        run(&["train"]);
        run(&["recon", "--method", "rim", "--scheme", "radial", "--r", "10", "--trajectory"]);
        run(&["recon", "--method", "map-cg", "--scheme", "rectilinear", "--r", "5"]);
        run(&["compare", "--method", "zero-filled"]);
    }
    assert_eq!(checksums(&a), checksums(&b));
}
