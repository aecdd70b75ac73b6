//! Fully developed speckle simulation.
//!
//! A single-look complex image is modeled as `z = H (s .* sqrt(r))` where
//! `s` is a unit-power circular complex Gaussian field (real and imaginary
//! parts i.i.d. `N(0, 1/2)`), `r` the per-pixel reflectivity and `H` the
//! linear system transfer function applied in the frequency domain with
//! periodic boundary conditions.

use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fft::{fft2d, freq_bin, ifft2d, signed_freq};
use crate::raster::{ComplexImage, Grid, RasterError, ReflectivityImage, TensorContainer};
use crate::rng::RngStream;

#[derive(Debug, Error)]
pub enum SpeckleError {
    #[error("dimension mismatch: response is {expected}, image is {got}")]
    DimensionMismatch { expected: String, got: String },
    #[error("reflectivity is already system-convolved")]
    ConvolvedInput,
    #[error("negative intensity {value} at index {index}")]
    NegativeIntensity { index: usize, value: f32 },
    #[error("transfer function is not a real-valued spatial operator")]
    NotRealValued,
    #[error("{pixels} pixels exceed the {limit}-pixel limit for dense spatial parts")]
    TooManyPixels { pixels: usize, limit: usize },
    #[error("invalid transfer spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, SpeckleError>;

pub const SPATIAL_PARTS_LIMIT: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Rectangular,
    Hamming,
    Hann,
}

impl WindowKind {
    /// Window gain at normalized band position `u` in `[-1/2, 1/2]`.
    fn gain(self, u: f64) -> f64 {
        let c = (std::f64::consts::TAU * u).cos();
        match self {
            WindowKind::Rectangular => 1.0,
            WindowKind::Hamming => 0.54 + 0.46 * c,
            WindowKind::Hann => 0.5 + 0.5 * c,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    Identity,
    SeparableApodized,
    ExplicitFrequencyGrid,
}

/// An explicitly sampled frequency response, dims matching the target image.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplicitGrid {
    pub width: usize,
    pub height: usize,
    pub re: Vec<f32>,
    pub im: Vec<f32>,
}

impl ExplicitGrid {
    pub fn to_container(&self) -> TensorContainer {
        let mut tc = TensorContainer::default();
        let dims = [self.height as u32, self.width as u32];
        tc.push("h_re", &dims, self.re.clone());
        tc.push("h_im", &dims, self.im.clone());
        tc
    }

    pub fn from_container(tc: &TensorContainer) -> Result<Self> {
        let re = tc
            .get("h_re")
            .ok_or_else(|| SpeckleError::InvalidSpec("missing h_re entry".into()))?;
        let im = tc
            .get("h_im")
            .ok_or_else(|| SpeckleError::InvalidSpec("missing h_im entry".into()))?;
        if re.dims.len() != 2 || re.dims != im.dims {
            return Err(SpeckleError::InvalidSpec(
                "h_re/h_im must share 2-D dims".into(),
            ));
        }
        Ok(Self {
            width: re.dims[1] as usize,
            height: re.dims[0] as usize,
            re: re.data.clone(),
            im: im.data.clone(),
        })
    }
}

/// Parametric description of the system transfer function `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferFunctionSpec {
    pub kind: TransferKind,
    pub zero_pad_factor: f64,
    pub window_az: WindowKind,
    pub window_rg: WindowKind,
    /// Band center offset in cycles/sample (azimuth = rows, range = columns).
    pub freq_shift_az: f64,
    pub freq_shift_rg: f64,
    pub explicit: Option<ExplicitGrid>,
}

/// On-disk JSON form; `grid` points at a tensor container holding the
/// explicit frequency response.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransferSpecFile {
    kind: TransferKind,
    #[serde(default = "default_pad")]
    zero_pad_factor: f64,
    #[serde(default)]
    window: WindowPair,
    #[serde(default)]
    freq_shift: ShiftPair,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<PathBuf>,
}

fn default_pad() -> f64 {
    1.0
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WindowPair {
    azimuth: WindowKind,
    range: WindowKind,
}

impl Default for WindowPair {
    fn default() -> Self {
        Self {
            azimuth: WindowKind::Rectangular,
            range: WindowKind::Rectangular,
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShiftPair {
    #[serde(default)]
    azimuth: f64,
    #[serde(default)]
    range: f64,
}

impl TransferFunctionSpec {
    /// The ideal system: `h == 1` everywhere.
    pub fn identity() -> Self {
        Self {
            kind: TransferKind::Identity,
            zero_pad_factor: 1.0,
            window_az: WindowKind::Rectangular,
            window_rg: WindowKind::Rectangular,
            freq_shift_az: 0.0,
            freq_shift_rg: 0.0,
            explicit: None,
        }
    }

    pub fn separable(
        zero_pad_factor: f64,
        window_az: WindowKind,
        window_rg: WindowKind,
        freq_shift_az: f64,
        freq_shift_rg: f64,
    ) -> Result<Self> {
        if !(zero_pad_factor >= 1.0) {
            return Err(SpeckleError::InvalidSpec(format!(
                "zero_pad_factor must be >= 1, got {zero_pad_factor}"
            )));
        }
        Ok(Self {
            kind: TransferKind::SeparableApodized,
            zero_pad_factor,
            window_az,
            window_rg,
            freq_shift_az,
            freq_shift_rg,
            explicit: None,
        })
    }

    pub fn explicit(grid: ExplicitGrid) -> Self {
        Self {
            kind: TransferKind::ExplicitFrequencyGrid,
            zero_pad_factor: 1.0,
            window_az: WindowKind::Rectangular,
            window_rg: WindowKind::Rectangular,
            freq_shift_az: 0.0,
            freq_shift_rg: 0.0,
            explicit: Some(grid),
        }
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file: TransferSpecFile = serde_json::from_reader(std::fs::File::open(path)?)?;
        let mut spec = match file.kind {
            TransferKind::Identity => {
                if file.zero_pad_factor != 1.0
                    || file.window.azimuth != WindowKind::Rectangular
                    || file.window.range != WindowKind::Rectangular
                    || file.freq_shift.azimuth != 0.0
                    || file.freq_shift.range != 0.0
                {
                    return Err(SpeckleError::InvalidSpec(
                        "identity kind admits no padding, windows or shifts".into(),
                    ));
                }
                Self::identity()
            }
            TransferKind::SeparableApodized => Self::separable(
                file.zero_pad_factor,
                file.window.azimuth,
                file.window.range,
                file.freq_shift.azimuth,
                file.freq_shift.range,
            )?,
            TransferKind::ExplicitFrequencyGrid => {
                let rel = file.grid.ok_or_else(|| {
                    SpeckleError::InvalidSpec("explicit_frequency_grid requires a grid path".into())
                })?;
                let grid_path = match path.parent() {
                    Some(dir) if rel.is_relative() => dir.join(rel),
                    _ => rel,
                };
                Self::explicit(ExplicitGrid::from_container(&TensorContainer::load(
                    grid_path,
                )?)?)
            }
        };
        // Normalize so identity invariants always hold after a load.
        if spec.kind == TransferKind::Identity {
            spec = Self::identity();
        }
        Ok(spec)
    }

    pub fn save_json(&self, path: impl AsRef<Path>, grid_path: Option<&Path>) -> Result<()> {
        let path = path.as_ref();
        let grid = match (&self.explicit, grid_path) {
            (Some(grid), Some(gp)) => {
                grid.to_container().save(gp)?;
                Some(gp.to_path_buf())
            }
            (Some(_), None) => {
                return Err(SpeckleError::InvalidSpec(
                    "explicit grid needs a grid path to serialize".into(),
                ))
            }
            _ => None,
        };
        let file = TransferSpecFile {
            kind: self.kind,
            zero_pad_factor: self.zero_pad_factor,
            window: WindowPair {
                azimuth: self.window_az,
                range: self.window_rg,
            },
            freq_shift: ShiftPair {
                azimuth: self.freq_shift_az,
                range: self.freq_shift_rg,
            },
            grid,
        };
        serde_json::to_writer_pretty(std::fs::File::create(path)?, &file)?;
        Ok(())
    }

    fn axis_gains(&self, n: usize, window: WindowKind, shift_cycles: f64) -> Vec<f64> {
        let band = n as f64 / self.zero_pad_factor;
        let center = shift_cycles * n as f64;
        (0..n)
            .map(|k| {
                let mut d = signed_freq(k, n) as f64 - center;
                d -= n as f64 * (d / n as f64).round();
                let u = d / band;
                if u.abs() <= 0.5 {
                    window.gain(u)
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Sample the frequency response on a `width x height` grid, row-major
    /// with natural FFT bin ordering.
    pub fn materialize_response(&self, width: usize, height: usize) -> Result<Vec<Complex64>> {
        match self.kind {
            TransferKind::Identity => Ok(vec![Complex64::new(1.0, 0.0); width * height]),
            TransferKind::SeparableApodized => {
                let az = self.axis_gains(height, self.window_az, self.freq_shift_az);
                let rg = self.axis_gains(width, self.window_rg, self.freq_shift_rg);
                let mut out = Vec::with_capacity(width * height);
                for a in &az {
                    for r in &rg {
                        out.push(Complex64::new(a * r, 0.0));
                    }
                }
                Ok(out)
            }
            TransferKind::ExplicitFrequencyGrid => {
                let grid = self
                    .explicit
                    .as_ref()
                    .ok_or_else(|| SpeckleError::InvalidSpec("explicit grid missing".into()))?;
                if grid.width != width || grid.height != height {
                    return Err(SpeckleError::DimensionMismatch {
                        expected: format!("{}x{}", grid.width, grid.height),
                        got: format!("{width}x{height}"),
                    });
                }
                Ok(grid
                    .re
                    .iter()
                    .zip(grid.im.iter())
                    .map(|(&a, &b)| Complex64::new(a as f64, b as f64))
                    .collect())
            }
        }
    }

    /// Spatial impulse response (circular), i.e. the inverse DFT of the
    /// frequency response.
    pub fn spatial_kernel(&self, width: usize, height: usize) -> Result<Vec<Complex64>> {
        let mut resp = self.materialize_response(width, height)?;
        ifft2d(&mut resp, width, height);
        Ok(resp)
    }

    /// True when the sampled response has Hermitian symmetry
    /// `h(-nu) == conj(h(nu))`, i.e. the spatial operator is real-valued.
    pub fn response_is_hermitian(&self, width: usize, height: usize, tol: f64) -> Result<bool> {
        let resp = self.materialize_response(width, height)?;
        let peak = resp.iter().map(|v| v.norm()).fold(0.0, f64::max);
        if peak == 0.0 {
            return Ok(true);
        }
        for ky in 0..height {
            for kx in 0..width {
                let mirror_y = freq_bin(-signed_freq(ky, height), height);
                let mirror_x = freq_bin(-signed_freq(kx, width), width);
                let a = resp[ky * width + kx];
                let b = resp[mirror_y * width + mirror_x];
                if (a - b.conj()).norm() > tol * peak {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// Dense real/imaginary spatial operator matrices `M` and `N` with
    /// `H = M + jN`. Only materialized for tiny images.
    pub fn spatial_parts(&self, width: usize, height: usize) -> Result<(SquareMat, SquareMat)> {
        let pixels = width * height;
        if pixels > SPATIAL_PARTS_LIMIT {
            return Err(SpeckleError::TooManyPixels {
                pixels,
                limit: SPATIAL_PARTS_LIMIT,
            });
        }
        let kernel = self.spatial_kernel(width, height)?;
        let mut m = SquareMat::zeros(pixels);
        let mut n = SquareMat::zeros(pixels);
        for ky in 0..height {
            for kx in 0..width {
                let row = ky * width + kx;
                for ly in 0..height {
                    for lx in 0..width {
                        let col = ly * width + lx;
                        let dy = (ky + height - ly) % height;
                        let dx = (kx + width - lx) % width;
                        let v = kernel[dy * width + dx];
                        m.set(row, col, v.re);
                        n.set(row, col, v.im);
                    }
                }
            }
        }
        Ok((m, n))
    }
}

/// Minimal dense square matrix used by the tiny-image diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMat {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SquareMat {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }
}

/// Draw a unit-power speckle field: real and imaginary parts i.i.d.
/// `N(0, 1/2)`, so the expected intensity is exactly one.
pub fn sample_speckle_field(width: usize, height: usize, rng: &mut RngStream) -> ComplexImage {
    let mut img = ComplexImage::zeros(width, height);
    for i in 0..img.len() {
        let (a, b) = rng.normal_pair();
        img.re[i] = (a * std::f64::consts::FRAC_1_SQRT_2) as f32;
        img.im[i] = (b * std::f64::consts::FRAC_1_SQRT_2) as f32;
    }
    img
}

/// Apply the transfer function by pointwise multiplication in the frequency
/// domain. The identity spec short-circuits to a copy.
pub fn apply_transfer_function(
    z: &ComplexImage,
    spec: &TransferFunctionSpec,
) -> Result<ComplexImage> {
    if spec.kind == TransferKind::Identity {
        return Ok(z.clone());
    }
    let resp = spec.materialize_response(z.width, z.height)?;
    let mut data: Vec<Complex64> = z
        .re
        .iter()
        .zip(z.im.iter())
        .map(|(&a, &b)| Complex64::new(a as f64, b as f64))
        .collect();
    fft2d(&mut data, z.width, z.height);
    for (v, h) in data.iter_mut().zip(resp.iter()) {
        *v *= h;
    }
    ifft2d(&mut data, z.width, z.height);
    let mut out = ComplexImage::zeros(z.width, z.height);
    for (i, v) in data.iter().enumerate() {
        out.re[i] = v.re as f32;
        out.im[i] = v.im as f32;
    }
    Ok(out)
}

/// Simulate a single-look complex image: `z = H (s .* sqrt(r))`.
pub fn simulate_slc(
    r: &ReflectivityImage,
    spec: &TransferFunctionSpec,
    rng: &mut RngStream,
) -> Result<ComplexImage> {
    if r.convolved {
        return Err(SpeckleError::ConvolvedInput);
    }
    let mut z = sample_speckle_field(r.width, r.height, rng);
    for i in 0..z.len() {
        let amp = (r.values[i] as f64).sqrt() as f32;
        z.re[i] *= amp;
        z.im[i] *= amp;
    }
    apply_transfer_function(&z, spec)
}

/// Per-pixel intensity `re^2 + im^2`.
pub fn intensity_of(z: &ComplexImage) -> Grid {
    Grid::new(
        z.width,
        z.height,
        z.re
            .iter()
            .zip(z.im.iter())
            .map(|(&a, &b)| a * a + b * b)
            .collect(),
    )
}

/// Effective reflectivity seen through the system: the circular convolution
/// of `r` with the squared spatial kernel of `H`. Requires a real-valued
/// spatial operator.
pub fn effective_reflectivity(
    r: &ReflectivityImage,
    spec: &TransferFunctionSpec,
) -> Result<ReflectivityImage> {
    if spec.kind == TransferKind::Identity {
        let mut out = r.clone();
        out.convolved = true;
        return Ok(out);
    }
    if !spec.response_is_hermitian(r.width, r.height, 1e-9)? {
        return Err(SpeckleError::NotRealValued);
    }
    let kernel = spec.spatial_kernel(r.width, r.height)?;
    let mut k2: Vec<Complex64> = kernel
        .iter()
        .map(|v| Complex64::new(v.re * v.re, 0.0))
        .collect();
    let mut rf: Vec<Complex64> = r
        .values
        .iter()
        .map(|&v| Complex64::new(v as f64, 0.0))
        .collect();
    fft2d(&mut k2, r.width, r.height);
    fft2d(&mut rf, r.width, r.height);
    for (a, b) in rf.iter_mut().zip(k2.iter()) {
        *a *= b;
    }
    ifft2d(&mut rf, r.width, r.height);
    let values = rf
        .iter()
        .map(|v| (v.re as f32).max(f32::MIN_POSITIVE))
        .collect();
    Ok(ReflectivityImage {
        width: r.width,
        height: r.height,
        values,
        convolved: true,
    })
}

/// Build a pseudo-SLC image from an intensity grid by drawing uniform random
/// phases: `a = sqrt(I) cos(phi)`, `b = sqrt(I) sin(phi)`.
pub fn pseudo_slc_from_intensity(intensity: &Grid, rng: &mut RngStream) -> Result<ComplexImage> {
    for (i, &v) in intensity.values.iter().enumerate() {
        if v < 0.0 {
            return Err(SpeckleError::NegativeIntensity { index: i, value: v });
        }
    }
    let mut out = ComplexImage::zeros(intensity.width, intensity.height);
    for (i, &v) in intensity.values.iter().enumerate() {
        let phase = (rng.uniform() - 0.5) * std::f64::consts::TAU;
        let amp = (v as f64).sqrt();
        out.re[i] = (amp * phase.cos()) as f32;
        out.im[i] = (amp * phase.sin()) as f32;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr(xs: &[f32], ys: &[f32]) -> f64 {
        let n = xs.len() as f64;
        let mx = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
        let my = ys.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for (&x, &y) in xs.iter().zip(ys.iter()) {
            let dx = x as f64 - mx;
            let dy = y as f64 - my;
            sxy += dx * dy;
            sxx += dx * dx;
            syy += dy * dy;
        }
        sxy / (sxx.sqrt() * syy.sqrt())
    }

    #[test]
    fn speckle_field_moments() {
        let mut rng = RngStream::new(1234, 0);
        let s = sample_speckle_field(1000, 1000, &mut rng);
        let n = s.len() as f64;
        let mean_intensity = s
            .re
            .iter()
            .zip(s.im.iter())
            .map(|(&a, &b)| (a as f64).powi(2) + (b as f64).powi(2))
            .sum::<f64>()
            / n;
        assert!(
            (mean_intensity - 1.0).abs() < 0.005,
            "mean |s|^2 = {mean_intensity}"
        );

        let var_re = s.re.iter().map(|&a| (a as f64).powi(2)).sum::<f64>() / n;
        assert!((var_re - 0.5).abs() < 0.005, "var re = {var_re}");

        let c = corr(&s.re, &s.im);
        assert!(c.abs() < 0.005, "corr(re, im) = {c}");
    }

    #[test]
    fn identity_returns_input() {
        let mut rng = RngStream::new(5, 0);
        let z = sample_speckle_field(32, 16, &mut rng);
        let out = apply_transfer_function(&z, &TransferFunctionSpec::identity()).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn constant_gain_two_scales_exactly() {
        let mut rng = RngStream::new(6, 0);
        let z = sample_speckle_field(16, 16, &mut rng);
        let grid = ExplicitGrid {
            width: 16,
            height: 16,
            re: vec![2.0; 256],
            im: vec![0.0; 256],
        };
        let out = apply_transfer_function(&z, &TransferFunctionSpec::explicit(grid)).unwrap();
        for i in 0..z.len() {
            assert!((out.re[i] as f64 - 2.0 * z.re[i] as f64).abs() < 1e-5);
            assert!((out.im[i] as f64 - 2.0 * z.im[i] as f64).abs() < 1e-5);
        }
    }

    /// Direct inverse-DFT oracle for the impulse response of a response grid.
    fn impulse_response_oracle(resp: &[Complex64], w: usize, h: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = Complex64::default();
                for ky in 0..h {
                    for kx in 0..w {
                        let phase = std::f64::consts::TAU
                            * (ky as f64 * y as f64 / h as f64 + kx as f64 * x as f64 / w as f64);
                        acc += resp[ky * w + kx] * Complex64::from_polar(1.0, phase);
                    }
                }
                out[y * w + x] = acc / (w * h) as f64;
            }
        }
        out
    }

    #[test]
    fn hamming_impulse_matches_inverse_dft_oracle() {
        let (w, h) = (16, 16);
        let spec =
            TransferFunctionSpec::separable(1.0, WindowKind::Hamming, WindowKind::Hamming, 0.0, 0.0)
                .unwrap();
        let mut impulse = ComplexImage::zeros(w, h);
        impulse.re[0] = 1.0;
        let out = apply_transfer_function(&impulse, &spec).unwrap();

        let resp = spec.materialize_response(w, h).unwrap();
        let oracle = impulse_response_oracle(&resp, w, h);
        for i in 0..w * h {
            assert!((out.re[i] as f64 - oracle[i].re).abs() < 1e-6);
            assert!((out.im[i] as f64 - oracle[i].im).abs() < 1e-6);
        }
    }

    #[test]
    fn transfer_is_linear() {
        let spec =
            TransferFunctionSpec::separable(1.25, WindowKind::Hamming, WindowKind::Hann, 0.1, 0.0)
                .unwrap();
        let mut rng = RngStream::new(7, 0);
        let z1 = sample_speckle_field(32, 32, &mut rng);
        let z2 = sample_speckle_field(32, 32, &mut rng);
        let alpha = 2.5f32;

        let mut combo = ComplexImage::zeros(32, 32);
        for i in 0..combo.len() {
            combo.re[i] = alpha * z1.re[i] + z2.re[i];
            combo.im[i] = alpha * z1.im[i] + z2.im[i];
        }
        let lhs = apply_transfer_function(&combo, &spec).unwrap();
        let o1 = apply_transfer_function(&z1, &spec).unwrap();
        let o2 = apply_transfer_function(&z2, &spec).unwrap();

        let scale = lhs
            .re
            .iter()
            .zip(lhs.im.iter())
            .map(|(&a, &b)| (a * a + b * b) as f64)
            .sum::<f64>()
            .sqrt();
        for i in 0..lhs.len() {
            let er = lhs.re[i] as f64 - (alpha * o1.re[i] + o2.re[i]) as f64;
            let ei = lhs.im[i] as f64 - (alpha * o1.im[i] + o2.im[i]) as f64;
            assert!((er * er + ei * ei).sqrt() / scale < 1e-5);
        }
    }

    #[test]
    fn simulated_intensity_moments() {
        let r = ReflectivityImage::constant(1000, 1000, 4.0);
        let mut rng = RngStream::new(2024, 0);
        let z = simulate_slc(&r, &TransferFunctionSpec::identity(), &mut rng).unwrap();
        let i = intensity_of(&z);
        let n = i.len() as f64;

        let mean_i = i.values.iter().map(|&v| v as f64).sum::<f64>() / n;
        assert!((mean_i - 4.0).abs() < 0.02, "mean intensity {mean_i}");

        let mean_amp = i.values.iter().map(|&v| (v as f64).sqrt()).sum::<f64>() / n;
        // Monte-Carlo oracle for the Rayleigh mean, drawn independently of
        // the simulator path.
        let mut orng = RngStream::new(777, 9);
        let mc = (0..1_000_000)
            .map(|_| {
                let e = -orng.uniform_open().ln() * 4.0;
                e.sqrt()
            })
            .sum::<f64>()
            / 1e6;
        let closed_form = (std::f64::consts::PI * 4.0).sqrt() / 2.0;
        assert!((mc - closed_form).abs() < 0.01, "oracle sanity {mc}");
        assert!((mean_amp - closed_form).abs() < 0.01, "mean amp {mean_amp}");
    }

    #[test]
    fn simulated_intensity_variance_unit_r() {
        let r = ReflectivityImage::constant(1000, 1000, 1.0);
        let mut rng = RngStream::new(31, 0);
        let z = simulate_slc(&r, &TransferFunctionSpec::identity(), &mut rng).unwrap();
        let i = intensity_of(&z);
        let n = i.len() as f64;
        let mean = i.values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = i
            .values
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn simulate_rejects_convolved_reflectivity() {
        let mut r = ReflectivityImage::constant(4, 4, 1.0);
        r.convolved = true;
        let mut rng = RngStream::new(0, 0);
        assert!(matches!(
            simulate_slc(&r, &TransferFunctionSpec::identity(), &mut rng),
            Err(SpeckleError::ConvolvedInput)
        ));
    }

    #[test]
    fn intensity_examples() {
        let z = ComplexImage::from_parts(1, 1, vec![3.0], vec![4.0]).unwrap();
        assert_eq!(intensity_of(&z).values, vec![25.0]);

        let z = ComplexImage::zeros(3, 2);
        assert!(intensity_of(&z).values.iter().all(|&v| v == 0.0));

        let mut rng = RngStream::new(8, 0);
        let z = sample_speckle_field(16, 16, &mut rng);
        let i = intensity_of(&z);
        for k in 0..z.len() {
            let oracle = Complex64::new(z.re[k] as f64, z.im[k] as f64).norm_sqr();
            assert!((i.values[k] as f64 - oracle).abs() <= oracle * 1e-6 + 1e-12);
        }
    }

    #[test]
    fn effective_reflectivity_identity_is_input() {
        let r = ReflectivityImage::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let out = effective_reflectivity(&r, &TransferFunctionSpec::identity()).unwrap();
        assert_eq!(out.values, r.values);
        assert!(out.convolved);
    }

    fn explicit_from_kernel(kernel: &[(i64, i64, f64)], w: usize, h: usize) -> TransferFunctionSpec {
        // Build the frequency response of a small real spatial kernel laid
        // out circularly, via the direct DFT.
        let mut spatial = vec![0.0f64; w * h];
        for &(dy, dx, v) in kernel {
            let y = dy.rem_euclid(h as i64) as usize;
            let x = dx.rem_euclid(w as i64) as usize;
            spatial[y * w + x] = v;
        }
        let mut re = vec![0.0f32; w * h];
        let mut im = vec![0.0f32; w * h];
        for ky in 0..h {
            for kx in 0..w {
                let mut acc = Complex64::default();
                for y in 0..h {
                    for x in 0..w {
                        let phase = -std::f64::consts::TAU
                            * (ky as f64 * y as f64 / h as f64 + kx as f64 * x as f64 / w as f64);
                        acc += spatial[y * w + x] * Complex64::from_polar(1.0, phase);
                    }
                }
                re[ky * w + kx] = acc.re as f32;
                im[ky * w + kx] = acc.im as f32;
            }
        }
        TransferFunctionSpec::explicit(ExplicitGrid {
            width: w,
            height: h,
            re,
            im,
        })
    }

    fn centered_3x3(center: f64, edge: f64, corner: f64) -> Vec<(i64, i64, f64)> {
        vec![
            (0, 0, center),
            (0, 1, edge),
            (0, -1, edge),
            (1, 0, edge),
            (-1, 0, edge),
            (1, 1, corner),
            (1, -1, corner),
            (-1, 1, corner),
            (-1, -1, corner),
        ]
    }

    #[test]
    fn unit_energy_kernel_preserves_constant() {
        // Energy = center^2 + 4 edge^2 + 4 corner^2 = 1.
        let e: f64 = 0.1;
        let c: f64 = 0.05;
        let center = (1.0 - 4.0 * e * e - 4.0 * c * c).sqrt();
        let spec = explicit_from_kernel(&centered_3x3(center, e, c), 8, 8);
        let r = ReflectivityImage::constant(8, 8, 7.5);
        let out = effective_reflectivity(&r, &spec).unwrap();
        for &v in &out.values {
            assert!((v - 7.5).abs() < 1e-4, "got {v}");
        }
    }

    #[test]
    fn effective_reflectivity_matches_double_sum_oracle() {
        let (w, h) = (4, 4);
        let kernel = centered_3x3(0.4, 0.1, 0.05);
        let spec = explicit_from_kernel(&kernel, w, h);
        let r = ReflectivityImage::new(
            w,
            h,
            (1..=16).map(|v| v as f32).collect::<Vec<_>>(),
            false,
        )
        .unwrap();
        let out = effective_reflectivity(&r, &spec).unwrap();

        // Brute-force double sum over the circular kernel.
        for ky in 0..h {
            for kx in 0..w {
                let mut acc = 0.0f64;
                for ly in 0..h {
                    for lx in 0..w {
                        let mut weight = 0.0;
                        for &(dy, dx, v) in &kernel {
                            let yy = (ly as i64 + dy).rem_euclid(h as i64) as usize;
                            let xx = (lx as i64 + dx).rem_euclid(w as i64) as usize;
                            if yy == ky && xx == kx {
                                weight += v;
                            }
                        }
                        acc += weight * weight * r.values[ly * w + lx] as f64;
                    }
                }
                let got = out.values[ky * w + kx] as f64;
                assert!((got - acc).abs() < 1e-6 * acc.max(1.0), "{got} vs {acc}");
            }
        }
    }

    #[test]
    fn one_sided_band_is_rejected_as_complex() {
        let spec = TransferFunctionSpec::separable(
            2.0,
            WindowKind::Rectangular,
            WindowKind::Rectangular,
            0.25,
            0.0,
        )
        .unwrap();
        let r = ReflectivityImage::constant(16, 16, 1.0);
        assert!(matches!(
            effective_reflectivity(&r, &spec),
            Err(SpeckleError::NotRealValued)
        ));
    }

    #[test]
    fn pseudo_slc_zero_intensity() {
        let grid = Grid::new(2, 1, vec![0.0, 0.0]);
        let mut rng = RngStream::new(3, 0);
        let z = pseudo_slc_from_intensity(&grid, &mut rng).unwrap();
        assert_eq!(z.re, vec![0.0, 0.0]);
        assert_eq!(z.im, vec![0.0, 0.0]);
    }

    #[test]
    fn pseudo_slc_preserves_intensity() {
        let mut rng = RngStream::new(11, 0);
        let src = sample_speckle_field(64, 64, &mut rng);
        let i = intensity_of(&src);
        let z = pseudo_slc_from_intensity(&i, &mut rng).unwrap();
        let back = intensity_of(&z);
        for (a, b) in i.values.iter().zip(back.values.iter()) {
            assert!((a - b).abs() <= a.abs() * 1e-6 + 1e-12);
        }
    }

    #[test]
    fn pseudo_slc_rejects_negative() {
        let grid = Grid::new(1, 1, vec![-1.0]);
        let mut rng = RngStream::new(3, 0);
        assert!(matches!(
            pseudo_slc_from_intensity(&grid, &mut rng),
            Err(SpeckleError::NegativeIntensity { index: 0, .. })
        ));
    }

    #[test]
    fn pseudo_slc_parts_uncorrelated() {
        let grid = Grid::new(1000, 1000, vec![1.0; 1_000_000]);
        let mut rng = RngStream::new(88, 0);
        let z = pseudo_slc_from_intensity(&grid, &mut rng).unwrap();
        let c = corr(&z.re, &z.im);
        assert!(c.abs() < 0.005, "corr {c}");
    }

    #[test]
    fn intensity_passes_ks_against_exponential() {
        // Kolmogorov-Smirnov against Exponential(mean r) at alpha = 0.01.
        let r = 2.5f64;
        let refl = ReflectivityImage::constant(400, 250, r as f32);
        let mut rng = RngStream::new(64, 0);
        let z = simulate_slc(&refl, &TransferFunctionSpec::identity(), &mut rng).unwrap();
        let mut xs: Vec<f64> = intensity_of(&z).values.iter().map(|&v| v as f64).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let mut d = 0.0f64;
        for (k, &x) in xs.iter().enumerate() {
            let cdf = 1.0 - (-x / r).exp();
            d = d.max(((k + 1) as f64 / n - cdf).abs());
            d = d.max((cdf - k as f64 / n).abs());
        }
        let critical = 1.628 / n.sqrt();
        assert!(d < critical, "KS D = {d}, critical {critical}");
    }

    #[test]
    fn variance_of_real_part_tracks_effective_reflectivity() {
        let (w, h) = (16, 16);
        let spec =
            TransferFunctionSpec::separable(1.0, WindowKind::Hamming, WindowKind::Hamming, 0.0, 0.0)
                .unwrap();
        let values: Vec<f32> = (0..w * h).map(|i| 1.0 + (i % w) as f32 * 0.2).collect();
        let r = ReflectivityImage::new(w, h, values, false).unwrap();
        let expected = effective_reflectivity(&r, &spec).unwrap();

        let draws = 10_000;
        let mut sq = vec![0.0f64; w * h];
        for d in 0..draws {
            let mut rng = RngStream::new(5150, d as u64);
            let z = simulate_slc(&r, &spec, &mut rng).unwrap();
            for (acc, &a) in sq.iter_mut().zip(z.re.iter()) {
                *acc += (a as f64).powi(2);
            }
        }
        let mut ratio_sum = 0.0;
        for k in 0..w * h {
            let var = sq[k] / draws as f64;
            ratio_sum += var / (expected.values[k] as f64 / 2.0);
        }
        let mean_ratio = ratio_sum / (w * h) as f64;
        assert!(
            (mean_ratio - 1.0).abs() < 0.03,
            "mean var ratio {mean_ratio}"
        );
    }

    #[test]
    fn reproducible_for_identical_streams() {
        let r = ReflectivityImage::constant(32, 32, 2.0);
        let spec =
            TransferFunctionSpec::separable(1.0, WindowKind::Hann, WindowKind::Rectangular, 0.0, 0.0)
                .unwrap();
        let a = simulate_slc(&r, &spec, &mut RngStream::new(9, 4)).unwrap();
        let b = simulate_slc(&r, &spec, &mut RngStream::new(9, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spec_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.json");
        let spec =
            TransferFunctionSpec::separable(1.5, WindowKind::Hamming, WindowKind::Hann, 0.1, -0.05)
                .unwrap();
        spec.save_json(&path, None).unwrap();
        assert_eq!(TransferFunctionSpec::load_json(&path).unwrap(), spec);

        let grid = ExplicitGrid {
            width: 2,
            height: 2,
            re: vec![1.0, 2.0, 3.0, 4.0],
            im: vec![0.0, -1.0, 1.0, 0.5],
        };
        let spec = TransferFunctionSpec::explicit(grid);
        let gpath = dir.path().join("h.tns");
        let jpath = dir.path().join("he.json");
        spec.save_json(&jpath, Some(&gpath)).unwrap();
        assert_eq!(TransferFunctionSpec::load_json(&jpath).unwrap(), spec);
    }

    #[test]
    fn spec_json_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"kind": "identity", "bogus": 1}"#).unwrap();
        assert!(TransferFunctionSpec::load_json(&path).is_err());
    }

    #[test]
    fn spatial_parts_limit_enforced() {
        let spec = TransferFunctionSpec::identity();
        assert!(matches!(
            spec.spatial_parts(32, 32),
            Err(SpeckleError::TooManyPixels { .. })
        ));
        let (m, n) = spec.spatial_parts(4, 4).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((m.at(i, j) - want).abs() < 1e-9);
                assert!(n.at(i, j).abs() < 1e-9);
            }
        }
    }
}
