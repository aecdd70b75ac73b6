//! Shared 2-D FFT helpers over row-major `Complex64` buffers.
//!
//! Forward transforms are unnormalized; the inverse divides by the grid size
//! so that `ifft2d(fft2d(x)) == x` up to round-off. Frequency bins follow the
//! natural FFT layout: bin `k` holds signed frequency `k` for `k <= n/2` and
//! `k - n` otherwise.

use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

/// Signed frequency (in bins) of FFT bin `k` of an `n`-point transform.
#[inline]
pub fn signed_freq(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// FFT bin holding signed frequency `f` of an `n`-point transform.
#[inline]
pub fn freq_bin(f: i64, n: usize) -> usize {
    f.rem_euclid(n as i64) as usize
}

fn transform2d(data: &mut [Complex64], width: usize, height: usize, dir: FftDirection) {
    assert_eq!(data.len(), width * height);
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft(width, dir);
    let col_fft = planner.plan_fft(height, dir);

    for row in data.chunks_exact_mut(width) {
        row_fft.process(row);
    }

    let mut column = vec![Complex64::default(); height];
    for x in 0..width {
        for y in 0..height {
            column[y] = data[y * width + x];
        }
        col_fft.process(&mut column);
        for y in 0..height {
            data[y * width + x] = column[y];
        }
    }
}

pub fn fft2d(data: &mut [Complex64], width: usize, height: usize) {
    transform2d(data, width, height, FftDirection::Forward);
}

pub fn ifft2d(data: &mut [Complex64], width: usize, height: usize) {
    transform2d(data, width, height, FftDirection::Inverse);
    let scale = 1.0 / (width * height) as f64;
    for v in data.iter_mut() {
        *v *= scale;
    }
}

/// 1-D FFT in place.
pub fn fft1d(data: &mut [Complex64], dir: FftDirection) {
    let mut planner = FftPlanner::new();
    planner.plan_fft(data.len(), dir).process(data);
}
