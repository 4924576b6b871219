mod common;

use common::{random_complex, random_maps, random_mask, random_masked_kspace};
use kslab::fft::{fft2c, ifft2c};
use kslab::forward::*;
use kslab::phantom::shepp_logan_phantom;
use kslab::sampling::{apply_mask, make_radial_mask, make_rectilinear_mask, extract_acs, MaskRng, SamplingMask};
use kslab::{Complex64, ComplexImage2D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn kspace_dot(a: &MulticoilKSpace, b: &MulticoilKSpace) -> Complex64 {
    a.coils().iter().zip(b.coils()).map(|(u, v)| u.dot(v)).sum()
}

fn kspace_norm(a: &MulticoilKSpace) -> f64 {
    a.coils().iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

#[test]
fn adjoint_identity_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(2..20), rng.gen_range(2..20));
        let coils = rng.gen_range(1..5);
        let mask = random_mask(h, w, rng.gen_range(0.1..0.9), &mut rng);
        let s = random_maps(h, w, coils, &mut rng);
        let x = random_complex(h, w, &mut rng);
        let y = random_masked_kspace(&mask, coils, &mut rng);
        let lhs = kspace_dot(&forward(&x, &s, &mask).unwrap(), &y);
        let rhs = x.dot(&adjoint(&y, &s).unwrap());
        assert!((lhs - rhs).norm() / (x.norm() * kspace_norm(&y)) < 1e-10);
    }
}

#[test]
fn gradient_matches_central_differences_with_factor_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let step = 1e-5;
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(4..10), rng.gen_range(4..10));
        let coils = rng.gen_range(1..4);
        let mask = random_mask(h, w, 0.5, &mut rng);
        let s = random_maps(h, w, coils, &mut rng);
        let y = random_masked_kspace(&mask, coils, &mut rng);
        let x = random_complex(h, w, &mut rng);
        let cfg = NllConfig::new(rng.gen_range(0.5..2.0)).unwrap();
        let g = nll_gradient(&x, &y, &s, &mask, cfg).unwrap();
        let (mut diff, mut norm) = (0.0, 0.0);
        for p in 0..h * w {
            for dir in [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)] {
                let mut up = x.clone();
                up.data_mut()[p] += dir * step;
                let mut down = x.clone();
                down.data_mut()[p] -= dir * step;
                let fd = (nll(&up, &y, &s, &mask, cfg).unwrap() - nll(&down, &y, &s, &mask, cfg).unwrap()) / (2.0 * step);
                let an = 2.0 * if dir.re == 1.0 { g.data()[p].re } else { g.data()[p].im };
                diff += (fd - an).powi(2);
                norm += an * an;
            }
        }
        assert!(diff.sqrt() / norm.sqrt() < 1e-5, "{}", diff.sqrt() / norm.sqrt());
    }
}

#[test]
fn rss_is_phase_invariant_and_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let imgs: Vec<_> = (0..4).map(|_| random_complex(8, 8, &mut rng)).collect();
    let base = rss(&imgs).unwrap();
    let rotated: Vec<_> = imgs
        .iter()
        .map(|c| {
            let mut r = c.clone();
            let ph = Complex64::from_polar(1.0, rng.gen_range(0.0..6.28));
            r.data_mut().iter_mut().for_each(|v| *v *= ph);
            r
        })
        .collect();
    let rot = rss(&rotated).unwrap();
    for (a, b) in base.data().iter().zip(rot.data()) {
        assert!(*a >= 0.0);
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn single_coil_acs_estimate_is_unit_on_support() {
    let (h, w) = (64, 64);
    let phantom = shepp_logan_phantom(h, w).unwrap();
    let s = simulate_sensitivities(h, w, 1).unwrap();
    let sim = AcquisitionSim { phantom: phantom.clone(), sensitivities: s, noise_std: 0.0, rng_seed: 0 };
    let full = SamplingMask::full(h, w);
    let (y, _) = simulate_acquisition(&sim, &full).unwrap();
    let mask = make_rectilinear_mask(h, w, 5.0, MaskRng::new(1)).unwrap();
    let est = estimate_sensitivities_from_acs(&apply_mask(&mask, &y).unwrap(), &extract_acs(&mask).unwrap()).unwrap();
    let support: Vec<usize> = (0..h * w).filter(|&p| phantom.data()[p] > 0.0).collect();
    let mad = support.iter().map(|&p| (est.maps()[0].data()[p].norm() - 1.0).abs()).sum::<f64>() / support.len() as f64;
    assert!(mad < 0.05, "{mad}");
    assert!(est.power().data().iter().all(|&v| v <= 1.0 + 1e-6));
}

#[test]
fn four_coil_acs_estimate_matches_simulated_maps() {
    let (h, w) = (64, 64);
    let phantom = shepp_logan_phantom(h, w).unwrap();
    let s = simulate_sensitivities(h, w, 4).unwrap();
    let sim = AcquisitionSim { phantom: phantom.clone(), sensitivities: s.clone(), noise_std: 0.0, rng_seed: 0 };
    let full = SamplingMask::full(h, w);
    let (y, _) = simulate_acquisition(&sim, &full).unwrap();
    let acs = extract_acs(&make_radial_mask(h, w, 4.0, MaskRng::new(2)).unwrap()).unwrap();
    let est = estimate_sensitivities_from_acs(&y, &acs).unwrap();
    let support: Vec<usize> = (0..h * w).filter(|&p| phantom.data()[p] > 0.0).collect();
    for (e, t) in est.maps().iter().zip(s.maps()) {
        // Global phase alignment by the phase of ⟨e, t⟩ on the support.
        let inner: Complex64 = support.iter().map(|&p| e.data()[p].conj() * t.data()[p]).sum();
        let ph = Complex64::from_polar(1.0, inner.arg());
        for &p in &support {
            let err = (e.data()[p] * ph - t.data()[p]).norm();
            assert!(err < 0.1, "pixel {p}: {err}");
        }
    }
}

#[test]
fn zero_kspace_gives_zero_maps() {
    let y = MulticoilKSpace::new(vec![ComplexImage2D::zeros(32, 32); 3], None).unwrap();
    let acs = extract_acs(&make_radial_mask(32, 32, 3.0, MaskRng::new(0)).unwrap()).unwrap();
    let est = estimate_sensitivities_from_acs(&y, &acs).unwrap();
    assert!(est.maps().iter().all(|m| m.data().iter().all(|v| v.norm() == 0.0)));
}

#[test]
fn noise_statistics_match_configured_std() {
    let (h, w) = (64, 64);
    let phantom = shepp_logan_phantom(h, w).unwrap();
    let s = simulate_sensitivities(h, w, 4).unwrap();
    let full = SamplingMask::full(h, w);
    let clean = forward(&ComplexImage2D::from_real(&phantom), &s, &full).unwrap();
    for seed in 0..10 {
        let sim = AcquisitionSim { phantom: phantom.clone(), sensitivities: s.clone(), noise_std: 0.01, rng_seed: seed };
        let (y, _) = simulate_acquisition(&sim, &full).unwrap();
        for (a, b) in y.coils().iter().zip(clean.coils()) {
            let d = a.sub(b);
            let rms = (d.norm_sqr() / d.data().len() as f64).sqrt();
            assert!((rms - 0.01 * 2f64.sqrt()).abs() < 0.1 * 0.01 * 2f64.sqrt(), "{rms}");
        }
    }
}

#[test]
fn masked_data_stays_masked_through_the_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mask = random_mask(12, 10, 0.4, &mut rng);
    let y = random_masked_kspace(&mask, 2, &mut rng);
    assert_eq!(apply_mask(&mask, &y).unwrap(), y);
    let s = random_maps(12, 10, 2, &mut rng);
    let x = random_complex(12, 10, &mut rng);
    let fx = forward(&x, &s, &mask).unwrap();
    assert_eq!(apply_mask(&mask, &fx).unwrap(), fx);
    let _ = (fft2c(&x), ifft2c(&x));
}
