//! Centered, orthonormal 2D DFT.
//!
//! `fft2c(x) = fftshift(FFT(ifftshift(x))) / sqrt(N*M)` with the zero frequency
//! at index `(N/2, M/2)` (floor division) for both even and odd sizes. The
//! transform is unitary, so `ifft2c` is also its adjoint.

use std::cell::RefCell;

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{invalid, Result};
use crate::image::ComplexImage2D;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub fn fft2c(img: &ComplexImage2D) -> Result<ComplexImage2D> {
    centered(img, FftDirection::Forward)
}

pub fn ifft2c(ksp: &ComplexImage2D) -> Result<ComplexImage2D> {
    centered(ksp, FftDirection::Inverse)
}

fn centered(img: &ComplexImage2D, direction: FftDirection) -> Result<ComplexImage2D> {
    let (h, w) = img.shape();
    if h == 0 || w == 0 {
        return invalid("fft2c requires non-empty dimensions");
    }
    let src = img.data();

    // ifftshift on input: buf[i][j] = src[(i + h/2) % h][(j + w/2) % w]
    let mut rows = vec![Complex64::new(0.0, 0.0); h * w];
    for i in 0..h {
        let si = (i + h / 2) % h;
        for j in 0..w {
            rows[i * w + j] = src[si * w + (j + w / 2) % w];
        }
    }

    let (row_fft, col_fft) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft(w, direction), p.plan_fft(h, direction))
    });

    row_fft.process(&mut rows);

    let mut cols = vec![Complex64::new(0.0, 0.0); h * w];
    for i in 0..h {
        for j in 0..w {
            cols[j * h + i] = rows[i * w + j];
        }
    }
    col_fft.process(&mut cols);

    // fftshift back into row-major layout, with the unitary scale.
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for j in 0..w {
        let dj = (j + w / 2) % w;
        for i in 0..h {
            out[((i + h / 2) % h) * w + dj] = cols[j * h + i] * scale;
        }
    }
    ComplexImage2D::new(h, w, out)
}
