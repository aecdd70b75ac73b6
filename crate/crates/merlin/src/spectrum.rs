//! Patch spectrum preprocessing.
//!
//! A non-zero Doppler centroid or an asymmetric spectral support correlates
//! the real and imaginary parts of an SLC image and breaks the training
//! premise. This module recenters the patch spectrum by integer bins and
//! enforces an even-symmetric spectral support, plus the log-domain affine
//! normalization the network consumes and the subsample-by-2 decorrelation
//! workaround.

use rustfft::num_complex::Complex64;
use rustfft::FftDirection;
use thiserror::Error;

use crate::fft::{fft1d, fft2d, ifft2d};
use crate::raster::{ComplexImage, Grid};

#[derive(Debug, Error)]
pub enum SpectrumError {
    #[error("patch side must be even, got {side}")]
    OddSide { side: usize },
    #[error("patch must be square, got {width}x{height}")]
    NotSquare { width: usize, height: usize },
    #[error("spectral support is empty after symmetric masking")]
    EmptyMask,
    #[error("norm_hi must exceed norm_lo, got ({lo}, {hi})")]
    BadNorm { lo: f32, hi: f32 },
    #[error("dimensions {width}x{height} too small")]
    TooSmall { width: usize, height: usize },
}

type Result<T> = std::result::Result<T, SpectrumError>;

/// Inputs are clamped at this floor before taking logs.
pub const X_FLOOR: f32 = 1e-10;

/// Bandwidth detection threshold, as a fraction of the profile peak.
pub const TAU_BAND: f64 = 0.05;

/// Required relative excess of the best shifted overlap over the unshifted
/// one before a non-zero spectral offset is accepted; absorbs the sampling
/// noise of featureless full-band spectra.
pub const FLATNESS_MARGIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Azimuth,
    Range,
}

/// 1-D magnitude profile of a patch spectrum along one axis.
#[derive(Clone, Debug)]
pub struct SpectrumProfile {
    pub axis: Axis,
    pub values: Vec<f64>,
}

/// A log-domain, affinely normalized single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct LogImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub norm_lo: f32,
    pub norm_hi: f32,
}

fn require_square_even(patch: &ComplexImage) -> Result<usize> {
    if patch.width != patch.height {
        return Err(SpectrumError::NotSquare {
            width: patch.width,
            height: patch.height,
        });
    }
    if patch.width % 2 != 0 {
        return Err(SpectrumError::OddSide { side: patch.width });
    }
    Ok(patch.width)
}

fn patch_spectrum(patch: &ComplexImage) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = patch
        .re
        .iter()
        .zip(patch.im.iter())
        .map(|(&a, &b)| Complex64::new(a as f64, b as f64))
        .collect();
    fft2d(&mut data, patch.width, patch.height);
    data
}

/// Average the spectrum magnitude along range and azimuth, yielding the
/// azimuth and range profiles. Invariant to a global phase of the patch.
pub fn compute_profiles(patch: &ComplexImage) -> Result<(SpectrumProfile, SpectrumProfile)> {
    let n = require_square_even(patch)?;
    let spec = patch_spectrum(patch);
    let mut az = vec![0.0f64; n];
    let mut rg = vec![0.0f64; n];
    for ky in 0..n {
        for kx in 0..n {
            let mag = spec[ky * n + kx].norm();
            az[ky] += mag;
            rg[kx] += mag;
        }
    }
    let scale = 1.0 / n as f64;
    for v in az.iter_mut().chain(rg.iter_mut()) {
        *v *= scale;
    }
    Ok((
        SpectrumProfile {
            axis: Axis::Azimuth,
            values: az,
        },
        SpectrumProfile {
            axis: Axis::Range,
            values: rg,
        },
    ))
}

/// Estimate the integer spectral offset of a profile: the shift whose
/// removal best superimposes the profile onto its circular mirror. The
/// correlation with the mirrored profile is evaluated at even lags in the
/// Fourier domain; ties resolve to the smallest magnitude, then by energy
/// concentration around the candidate bin, then toward negative.
pub fn estimate_spectrum_shift(profile: &SpectrumProfile) -> i64 {
    let p = &profile.values;
    let n = p.len();
    debug_assert!(n >= 2);

    // c[m] = sum_u p[u] * mirror(p)[u + m], computed via FFTs.
    let mut fa: Vec<Complex64> = p.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut fb: Vec<Complex64> = (0..n)
        .map(|k| Complex64::new(p[(n - k) % n], 0.0))
        .collect();
    fft1d(&mut fa, FftDirection::Forward);
    fft1d(&mut fb, FftDirection::Forward);
    let mut prod: Vec<Complex64> = fa
        .iter()
        .zip(fb.iter())
        .map(|(a, b)| a.conj() * b)
        .collect();
    fft1d(&mut prod, FftDirection::Inverse);
    let c: Vec<f64> = prod.iter().map(|v| v.re / n as f64).collect();

    let half = (n / 2) as i64;
    let score = |d: i64| c[(-2 * d).rem_euclid(n as i64) as usize];
    let max = (-half..half).map(score).fold(f64::NEG_INFINITY, f64::max);
    // Featureless (near-flat) spectra carry no offset information: without a
    // clear peak over the zero-lag overlap, leave the patch untouched.
    if max <= score(0) * (1.0 + FLATNESS_MARGIN) {
        return 0;
    }
    let mut candidates: Vec<i64> = (-half..half).filter(|&d| score(d) == max).collect();
    let min_abs = candidates.iter().map(|d| d.abs()).min().unwrap();
    candidates.retain(|d| d.abs() == min_abs);
    if candidates.len() == 1 {
        return candidates[0];
    }
    // Mirror-aliased candidates (d and d -/+ n/2) have identical even-lag
    // correlations; keep the one the spectral mass actually sits on.
    let concentration = |d: i64| -> f64 {
        (0..n)
            .map(|k| {
                let shifted = (k as i64 + d).rem_euclid(n as i64) as usize;
                p[shifted] * (std::f64::consts::TAU * k as f64 / n as f64).cos()
            })
            .sum()
    };
    candidates.sort_unstable();
    let mut best = candidates[0];
    let mut best_c = concentration(best);
    for &d in &candidates[1..] {
        let cd = concentration(d);
        if cd > best_c {
            best = d;
            best_c = cd;
        }
    }
    best
}

/// A recentered patch along with the per-axis shifts that were removed.
#[derive(Clone, Debug)]
pub struct RecenteredPatch {
    pub image: ComplexImage,
    pub shift_az: i64,
    pub shift_rg: i64,
}

/// Remove the estimated spectral offsets by demodulation:
/// `out[y][x] = in[y][x] * exp(-j 2 pi (d_az y + d_rg x) / n)`.
pub fn recenter_patch(patch: &ComplexImage) -> Result<RecenteredPatch> {
    let n = require_square_even(patch)?;
    let (az, rg) = compute_profiles(patch)?;
    let shift_az = estimate_spectrum_shift(&az);
    let shift_rg = estimate_spectrum_shift(&rg);

    if shift_az == 0 && shift_rg == 0 {
        return Ok(RecenteredPatch {
            image: patch.clone(),
            shift_az,
            shift_rg,
        });
    }
    let mut out = ComplexImage::zeros(n, n);
    for y in 0..n {
        for x in 0..n {
            let phase = -std::f64::consts::TAU
                * (shift_az as f64 * y as f64 + shift_rg as f64 * x as f64)
                / n as f64;
            let w = Complex64::from_polar(1.0, phase);
            let idx = y * n + x;
            let v = Complex64::new(patch.re[idx] as f64, patch.im[idx] as f64) * w;
            out.re[idx] = v.re as f32;
            out.im[idx] = v.im as f32;
        }
    }
    Ok(RecenteredPatch {
        image: out,
        shift_az,
        shift_rg,
    })
}

/// A masked patch along with the per-axis keep masks and the fraction of
/// spectrum bins kept. A bin `(ky, kx)` survives iff
/// `keep_az[ky] && keep_rg[kx]`; both masks are even-symmetric.
#[derive(Clone, Debug)]
pub struct MaskedPatch {
    pub image: ComplexImage,
    pub mask_fraction: f64,
    pub keep_az: Vec<bool>,
    pub keep_rg: Vec<bool>,
}

fn symmetric_support(profile: &[f64]) -> Vec<bool> {
    let n = profile.len();
    let peak = profile.iter().cloned().fold(0.0, f64::max);
    let in_band: Vec<bool> = profile.iter().map(|&v| v > TAU_BAND * peak).collect();
    (0..n).map(|k| in_band[k] && in_band[(n - k) % n]).collect()
}

/// Cut every frequency whose mirrored counterparts fall outside the detected
/// bandwidth, so the output magnitude spectrum support is even-symmetric.
/// Expects an already recentered patch.
pub fn symmetric_mask(patch: &ComplexImage) -> Result<MaskedPatch> {
    let n = require_square_even(patch)?;
    let (az, rg) = compute_profiles(patch)?;
    let keep_az = symmetric_support(&az.values);
    let keep_rg = symmetric_support(&rg.values);
    if !keep_az.iter().any(|&k| k) || !keep_rg.iter().any(|&k| k) {
        return Err(SpectrumError::EmptyMask);
    }
    let kept = keep_az.iter().filter(|&&k| k).count() * keep_rg.iter().filter(|&&k| k).count();
    let mask_fraction = kept as f64 / (n * n) as f64;
    if kept == n * n {
        // All-pass: skip the round trip and return the input untouched.
        return Ok(MaskedPatch {
            image: patch.clone(),
            mask_fraction,
            keep_az,
            keep_rg,
        });
    }

    let mut spec = patch_spectrum(patch);
    for ky in 0..n {
        for kx in 0..n {
            if !(keep_az[ky] && keep_rg[kx]) {
                spec[ky * n + kx] = Complex64::default();
            }
        }
    }
    ifft2d(&mut spec, n, n);
    let mut image = ComplexImage::zeros(n, n);
    for (i, v) in spec.iter().enumerate() {
        image.re[i] = v.re as f32;
        image.im[i] = v.im as f32;
    }
    Ok(MaskedPatch {
        image,
        mask_fraction,
        keep_az,
        keep_rg,
    })
}

/// `(ln(max(x, X_FLOOR)) - lo) / (hi - lo)` per pixel.
pub fn log_normalize(grid: &Grid, norm_lo: f32, norm_hi: f32) -> Result<LogImage> {
    if !(norm_hi > norm_lo) {
        return Err(SpectrumError::BadNorm {
            lo: norm_lo,
            hi: norm_hi,
        });
    }
    let lo = norm_lo as f64;
    let span = (norm_hi - norm_lo) as f64;
    let values = grid
        .values
        .iter()
        .map(|&x| (((x.max(X_FLOOR) as f64).ln() - lo) / span) as f32)
        .collect();
    Ok(LogImage {
        width: grid.width,
        height: grid.height,
        values,
        norm_lo,
        norm_hi,
    })
}

/// Inverse of [`log_normalize`]: `exp(v * (hi - lo) + lo)`.
pub fn log_denormalize(img: &LogImage) -> Grid {
    let lo = img.norm_lo as f64;
    let span = (img.norm_hi - img.norm_lo) as f64;
    Grid::new(
        img.width,
        img.height,
        img.values
            .iter()
            .map(|&v| (v as f64 * span + lo).exp() as f32)
            .collect(),
    )
}

/// Keep every second pixel on each axis; dimensions halve (floor).
pub fn decimate2(img: &ComplexImage) -> Result<ComplexImage> {
    if img.width < 2 || img.height < 2 {
        return Err(SpectrumError::TooSmall {
            width: img.width,
            height: img.height,
        });
    }
    let (w, h) = (img.width / 2, img.height / 2);
    let mut out = ComplexImage::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let src = img.idx(2 * x, 2 * y);
            let dst = y * w + x;
            out.re[dst] = img.re[src];
            out.im[dst] = img.im[src];
        }
    }
    Ok(out)
}

/// Corpus log-normalization constants: the 1st and 99.9th percentiles of the
/// log of the squared parts, pooled over both parts of every image. These
/// are frozen into the checkpoint at training time.
pub fn corpus_log_norm(images: &[ComplexImage]) -> (f32, f32) {
    let mut logs: Vec<f32> = Vec::new();
    for img in images {
        for v in img.re.iter().chain(img.im.iter()) {
            logs.push((v * v).max(X_FLOOR).ln());
        }
    }
    assert!(!logs.is_empty());
    logs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = |q: f64| -> f32 {
        let i = (q * logs.len() as f64).ceil() as usize;
        logs[i.clamp(1, logs.len()) - 1]
    };
    let lo = rank(0.01);
    let hi = rank(0.999);
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}
