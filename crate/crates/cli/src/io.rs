//! File plumbing: tensors, 16-bit PNGs, text artifacts and checksums.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use kslab::rim::Checkpoint;
use kslab::tensorfile::Tensor;
use kslab::RealImage2D;
use sha2::{Digest, Sha256};

use crate::error::{io_at, CliError, CliResult};

/// Output root: `--out`, else `$KSLAB_OUT`, else `./kslab-out`.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os("KSLAB_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("kslab-out")),
    }
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    io_at(dir, std::fs::create_dir_all(dir))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    io_at(path, std::fs::write(path, text))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    require(path)?;
    io_at(path, std::fs::read_to_string(path))
}

/// Fails with a missing-artifact error when `path` does not exist.
pub fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.display().to_string()))
    }
}

pub fn save_tensor(path: &Path, t: &Tensor) -> CliResult<()> {
    io_at(path, std::fs::write(path, t.to_bytes()))
}

pub fn load_tensor(path: &Path) -> CliResult<Tensor> {
    require(path)?;
    let bytes = io_at(path, std::fs::read(path))?;
    Tensor::from_bytes(&bytes).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()),
    })
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> CliResult<()> {
    io_at(path, std::fs::write(path, c.to_bytes()))
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    require(path)?;
    let bytes = io_at(path, std::fs::read(path))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

fn save_png(path: &Path, h: usize, w: usize, pixels: Vec<u16>) -> CliResult<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, pixels).expect("pixel count matches the shape");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })
}

fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Per-image min-max normalized 16-bit grayscale; constant images are black.
pub fn save_png_minmax(path: &Path, img: &RealImage2D) -> CliResult<()> {
    let (lo, hi) = (img.min(), img.max());
    let span = hi - lo;
    let px = img.data().iter().map(|&v| if span > 0.0 { quantize((v - lo) / span) } else { 0 }).collect();
    save_png(path, img.height(), img.width(), px)
}

/// `img / scale` clipped to `[0, 1]`, for maps that share a color scale.
pub fn save_png_scaled(path: &Path, img: &RealImage2D, scale: f64) -> CliResult<()> {
    let px = img.data().iter().map(|&v| if scale > 0.0 { quantize(v / scale) } else { 0 }).collect();
    save_png(path, img.height(), img.width(), px)
}

/// Sampled points white, the rest black.
pub fn save_mask_png(path: &Path, mask: &kslab::sampling::SamplingMask) -> CliResult<()> {
    let (h, w) = mask.shape();
    save_png(path, h, w, mask.bits().iter().map(|&b| b as u16 * 65535).collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&io_at(path, std::fs::read(path))?))
}

/// Shortest round-trip decimal for CSV cells.
pub fn num(v: f64) -> String {
    format!("{v}")
}
