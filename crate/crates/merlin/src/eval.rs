//! Quantitative evaluation and theoretical diagnostics: amplitude PSNR,
//! residual ratios, ENL, analytic/empirical real-imaginary independence
//! checks for a transfer function, and the tiny-scale full-covariance
//! likelihood oracle.

use serde::Serialize;
use thiserror::Error;

use crate::despeckle::{despeckle_image, DespeckleError, FusionMode};
use crate::raster::{Grid, ReflectivityImage};
use crate::rng::RngStream;
use crate::speckle::{
    intensity_of, pseudo_slc_from_intensity, simulate_slc, SpeckleError, SquareMat,
    TransferFunctionSpec, SPATIAL_PARTS_LIMIT,
};
use crate::train::Checkpoint;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("region too small: {got} px (need >= {need})")]
    RegionTooSmall { got: usize, need: usize },
    #[error("need at least {need} draws, got {got}")]
    TooFewDraws { got: usize, need: usize },
    #[error("{pixels} pixels exceed the {limit}-pixel dense-likelihood limit")]
    TooManyPixels { pixels: usize, limit: usize },
    #[error("covariance is singular (condition estimate {condition:.3e})")]
    SingularCovariance { condition: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Speckle(#[from] SpeckleError),
    #[error(transparent)]
    Despeckle(#[from] DespeckleError),
}

type Result<T> = std::result::Result<T, EvalError>;

pub const PSNR_CAP_DB: f64 = 99.0;

fn amplitude_psnr_values(reference: &[f32], estimate: &[f32], peak: f64) -> f64 {
    let n = reference.len() as f64;
    let mse = reference
        .iter()
        .zip(estimate.iter())
        .map(|(&r, &e)| {
            let d = (r.max(0.0) as f64).sqrt() - (e.max(0.0) as f64).sqrt();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

/// PSNR between amplitude images `sqrt(r)`, capped at 99 dB.
pub fn psnr_amplitude(
    reference: &ReflectivityImage,
    estimate: &ReflectivityImage,
    peak: f64,
) -> Result<f64> {
    if reference.width != estimate.width || reference.height != estimate.height {
        return Err(EvalError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            reference.width, reference.height, estimate.width, estimate.height
        )));
    }
    if !(peak > 0.0) {
        return Err(EvalError::InvalidArgument(format!("peak {peak} must be > 0")));
    }
    Ok(amplitude_psnr_values(
        &reference.values,
        &estimate.values,
        peak,
    ))
}

/// Per-pixel ratio `noisy intensity / estimate`; structure-free ratios with
/// ENL near one indicate bias-free despeckling.
pub fn residual_ratio(noisy_intensity: &Grid, estimate: &ReflectivityImage) -> Result<Grid> {
    if noisy_intensity.width != estimate.width || noisy_intensity.height != estimate.height {
        return Err(EvalError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            noisy_intensity.width, noisy_intensity.height, estimate.width, estimate.height
        )));
    }
    Ok(Grid::new(
        noisy_intensity.width,
        noisy_intensity.height,
        noisy_intensity
            .values
            .iter()
            .zip(estimate.values.iter())
            .map(|(&i, &r)| i / r)
            .collect(),
    ))
}

pub const ENL_CAP: f64 = 1e6;

/// Equivalent number of looks over a homogeneous region: `mean^2 / var`.
pub fn enl(region: &[f32]) -> Result<f64> {
    if region.len() < 100 {
        return Err(EvalError::RegionTooSmall {
            got: region.len(),
            need: 100,
        });
    }
    let n = region.len() as f64;
    let mean = region.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = region
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    if var <= mean * mean / ENL_CAP {
        return Ok(ENL_CAP);
    }
    Ok((mean * mean / var).min(ENL_CAP))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IndependenceVerdict {
    Independent,
    Dependent,
}

#[derive(Clone, Debug, Serialize)]
pub struct TransferIndependenceReport {
    pub verdict: IndependenceVerdict,
    /// Worst `||h(nu)| - |h(-nu)||` relative to the peak gain.
    pub max_gain_asymmetry: f64,
    /// Worst circular deviation of `arg(h(nu) h(-nu))` from its mean.
    pub max_phase_spread: f64,
}

/// Analytic independence check for a shift-invariant system: the gain must
/// be even and the phase sum `arg(h(nu) h(-nu))` constant over the support
/// (a global phase shift is harmless).
pub fn check_transfer_independence(
    spec: &TransferFunctionSpec,
    width: usize,
    height: usize,
    tol: f64,
) -> Result<TransferIndependenceReport> {
    use crate::fft::{freq_bin, signed_freq};
    let resp = spec.materialize_response(width, height)?;
    let peak = resp.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(EvalError::InvalidArgument("all-zero response".into()));
    }

    let mut max_asym = 0.0f64;
    let mut phases: Vec<f64> = Vec::new();
    let support = 1e-9 * peak;
    for ky in 0..height {
        for kx in 0..width {
            let v = resp[ky * width + kx];
            let my = freq_bin(-signed_freq(ky, height), height);
            let mx = freq_bin(-signed_freq(kx, width), width);
            let m = resp[my * width + mx];
            max_asym = max_asym.max((v.norm() - m.norm()).abs() / peak);
            if v.norm() > support && m.norm() > support {
                phases.push((v * m).arg());
            }
        }
    }

    // Circular spread around the circular mean.
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for &p in &phases {
        s += p.sin();
        c += p.cos();
    }
    let mean = s.atan2(c);
    let mut max_spread = 0.0f64;
    for &p in &phases {
        let mut d = (p - mean).rem_euclid(std::f64::consts::TAU);
        if d > std::f64::consts::PI {
            d = std::f64::consts::TAU - d;
        }
        max_spread = max_spread.max(d);
    }

    let verdict = if max_asym <= tol && max_spread <= tol {
        IndependenceVerdict::Independent
    } else {
        IndependenceVerdict::Dependent
    };
    Ok(TransferIndependenceReport {
        verdict,
        max_gain_asymmetry: max_asym,
        max_phase_spread: max_spread,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SpatialConditionReport {
    pub verdict: IndependenceVerdict,
    pub max_residual: f64,
}

/// Residual of the spatial-domain independence condition
/// `M diag(r) N^T - N diag(r) M^T` for one reflectivity vector.
pub fn spatial_condition_residual(m: &SquareMat, n: &SquareMat, r: &[f64]) -> f64 {
    let k = m.n;
    let mut worst = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            let mut acc = 0.0;
            for l in 0..k {
                acc += r[l] * (m.at(i, l) * n.at(j, l) - n.at(i, l) * m.at(j, l));
            }
            worst = worst.max(acc.abs());
        }
    }
    worst
}

/// Exercise the condition on random positive reflectivities and on every
/// elementary vector `r = e_i` (whose residual reduces to the rank-one
/// antisymmetry `m_i n_i^T - n_i m_i^T`).
pub fn check_spatial_condition(
    m: &SquareMat,
    n: &SquareMat,
    trials: usize,
    rng: &mut RngStream,
) -> Result<SpatialConditionReport> {
    if m.n != n.n {
        return Err(EvalError::DimensionMismatch(format!(
            "M is {0}x{0}, N is {1}x{1}",
            m.n, n.n
        )));
    }
    if m.n > SPATIAL_PARTS_LIMIT {
        return Err(EvalError::TooManyPixels {
            pixels: m.n,
            limit: SPATIAL_PARTS_LIMIT,
        });
    }
    let k = m.n;
    let mut worst = 0.0f64;
    let mut r = vec![0.0f64; k];
    for i in 0..k {
        r.iter_mut().for_each(|v| *v = 0.0);
        r[i] = 1.0;
        worst = worst.max(spatial_condition_residual(m, n, &r));
    }
    for _ in 0..trials {
        for v in r.iter_mut() {
            *v = rng.uniform_in(0.1, 10.0);
        }
        worst = worst.max(spatial_condition_residual(m, n, &r));
    }
    let verdict = if worst < 1e-6 {
        IndependenceVerdict::Independent
    } else {
        IndependenceVerdict::Dependent
    };
    Ok(SpatialConditionReport {
        verdict,
        max_residual: worst,
    })
}

/// Monte-Carlo independence statistic: the worst same-pixel or 4-neighbor
/// correlation between the real and imaginary fields over `draws` simulated
/// unit-reflectivity speckle images.
pub fn empirical_independence(
    spec: &TransferFunctionSpec,
    width: usize,
    height: usize,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if draws < 10_000 {
        return Err(EvalError::TooFewDraws {
            got: draws,
            need: 10_000,
        });
    }
    if width < 4 || height < 4 {
        return Err(EvalError::InvalidArgument(
            "empirical check needs at least 4x4 images".into(),
        ));
    }
    let r = ReflectivityImage::constant(width, height, 1.0);

    // Anchor pixels in the center 2x2 block, paired with themselves and
    // their 4-neighbors.
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let offsets: [(isize, isize); 5] = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)];
    for ay in [height / 2 - 1, height / 2] {
        for ax in [width / 2 - 1, width / 2] {
            let p = ay * width + ax;
            for (dy, dx) in offsets {
                let qy = (ay as isize + dy) as usize;
                let qx = (ax as isize + dx) as usize;
                pairs.push((p, qy * width + qx));
            }
        }
    }

    let np = pairs.len();
    let mut sum_a = vec![0.0f64; np];
    let mut sum_b = vec![0.0f64; np];
    let mut sum_ab = vec![0.0f64; np];
    let mut sum_a2 = vec![0.0f64; np];
    let mut sum_b2 = vec![0.0f64; np];

    for d in 0..draws {
        let mut rng = RngStream::new(seed, d as u64);
        let z = simulate_slc(&r, spec, &mut rng)?;
        for (k, &(p, q)) in pairs.iter().enumerate() {
            let a = z.re[p] as f64;
            let b = z.im[q] as f64;
            sum_a[k] += a;
            sum_b[k] += b;
            sum_ab[k] += a * b;
            sum_a2[k] += a * a;
            sum_b2[k] += b * b;
        }
    }

    let n = draws as f64;
    let mut worst = 0.0f64;
    for k in 0..np {
        let cov = sum_ab[k] / n - sum_a[k] / n * (sum_b[k] / n);
        let va = sum_a2[k] / n - (sum_a[k] / n).powi(2);
        let vb = sum_b2[k] / n - (sum_b[k] / n).powi(2);
        let corr = cov / (va * vb).sqrt();
        worst = worst.max(corr.abs());
    }
    Ok(worst)
}

/// Cholesky solve of a symmetric positive-definite system; reports a
/// condition estimate on failure.
fn cholesky_solve(c: &[f64], k: usize, b: &[f64]) -> Result<Vec<f64>> {
    let mut l = vec![0.0f64; k * k];
    let max_diag = (0..k).map(|i| c[i * k + i]).fold(0.0f64, f64::max);
    let mut min_pivot2 = f64::INFINITY;
    for i in 0..k {
        for j in 0..=i {
            let mut acc = c[i * k + j];
            for t in 0..j {
                acc -= l[i * k + t] * l[j * k + t];
            }
            if i == j {
                if acc <= max_diag * 1e-14 {
                    return Err(EvalError::SingularCovariance {
                        condition: max_diag / acc.abs().max(f64::MIN_POSITIVE),
                    });
                }
                min_pivot2 = min_pivot2.min(acc);
                l[i * k + i] = acc.sqrt();
            } else {
                l[i * k + j] = acc / l[j * k + j];
            }
        }
    }
    let _ = min_pivot2;
    // Forward then backward substitution.
    let mut y = vec![0.0f64; k];
    for i in 0..k {
        let mut acc = b[i];
        for t in 0..i {
            acc -= l[i * k + t] * y[t];
        }
        y[i] = acc / l[i * k + i];
    }
    let mut x = vec![0.0f64; k];
    for i in (0..k).rev() {
        let mut acc = y[i];
        for t in i + 1..k {
            acc -= l[t * k + i] * x[t];
        }
        x[i] = acc / l[i * k + i];
    }
    Ok(x)
}

/// Full-covariance negative log-likelihood
/// `sum 0.5 log(r_k) + b^T [H diag(r) H^T]^{-1} b`, evaluated with dense
/// linear algebra; restricted to tiny images and real-valued systems.
pub fn full_likelihood(
    r: &ReflectivityImage,
    b: &Grid,
    spec: &TransferFunctionSpec,
) -> Result<f64> {
    let pixels = r.len();
    if pixels > SPATIAL_PARTS_LIMIT {
        return Err(EvalError::TooManyPixels {
            pixels,
            limit: SPATIAL_PARTS_LIMIT,
        });
    }
    if r.width != b.width || r.height != b.height {
        return Err(EvalError::DimensionMismatch(format!(
            "r {}x{}, b {}x{}",
            r.width, r.height, b.width, b.height
        )));
    }
    if !spec.response_is_hermitian(r.width, r.height, 1e-9)? {
        return Err(EvalError::InvalidArgument(
            "transfer function is not a real-valued spatial operator".into(),
        ));
    }
    let (m, _n) = spec.spatial_parts(r.width, r.height)?;
    let k = pixels;
    // C = M diag(r) M^T.
    let mut c = vec![0.0f64; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut acc = 0.0;
            for l in 0..k {
                acc += m.at(i, l) * r.values[l] as f64 * m.at(j, l);
            }
            c[i * k + j] = acc;
            c[j * k + i] = acc;
        }
    }
    let bv: Vec<f64> = b.values.iter().map(|&v| v as f64).collect();
    let x = cholesky_solve(&c, k, &bv)?;
    let quad: f64 = bv.iter().zip(x.iter()).map(|(&bi, &xi)| bi * xi).sum();
    let logdet_term: f64 = r.values.iter().map(|&v| 0.5 * (v as f64).ln()).sum();
    Ok(logdet_term + quad)
}

/// Per-scene despeckling quality over repeated noisy instances, following
/// the "20 noisy instances, mean and 1 sigma" reporting protocol (sigma is
/// the population deviation over instances).
#[derive(Clone, Debug, Serialize)]
pub struct ProtocolReport {
    pub instances: usize,
    pub psnr_mean: f64,
    pub psnr_sigma: f64,
    pub noisy_psnr_mean: f64,
    pub noisy_psnr_sigma: f64,
    pub per_instance: Vec<f64>,
}

fn mean_sigma(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Options for [`evaluate_protocol`].
#[derive(Clone, Copy, Debug)]
pub struct ProtocolOptions {
    pub instances: usize,
    pub seed: u64,
    /// Replace each instance's phase by a uniform random draw (pseudo-SLC
    /// from intensity) before despeckling.
    pub random_phase: bool,
    pub tile: usize,
    pub margin: usize,
    pub fusion: FusionMode,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 0,
            random_phase: false,
            tile: 256,
            margin: 32,
            fusion: FusionMode::Linear,
        }
    }
}

/// Stream base for per-instance speckle draws; the random-phase draw for
/// instance `k` uses the same stream, after the speckle samples.
const PROTOCOL_STREAM: u64 = 0x7000_0000;

/// Simulate fresh noisy instances of a ground-truth scene, despeckle each
/// and report amplitude PSNR statistics (peak = max ground-truth amplitude).
pub fn evaluate_protocol(
    ckpt: &Checkpoint,
    ground_truth: &ReflectivityImage,
    spec: &TransferFunctionSpec,
    opts: &ProtocolOptions,
) -> Result<ProtocolReport> {
    let peak = ground_truth
        .values
        .iter()
        .map(|&v| (v as f64).sqrt())
        .fold(0.0, f64::max);
    let mut psnrs = Vec::with_capacity(opts.instances);
    let mut noisy_psnrs = Vec::with_capacity(opts.instances);
    for k in 0..opts.instances {
        let mut rng = RngStream::new(opts.seed, PROTOCOL_STREAM + k as u64);
        let mut z = simulate_slc(ground_truth, spec, &mut rng)?;
        if opts.random_phase {
            z = pseudo_slc_from_intensity(&intensity_of(&z), &mut rng)?;
        }
        let est = despeckle_image(ckpt, &z, opts.tile, opts.margin, opts.fusion)?;
        psnrs.push(psnr_amplitude(ground_truth, &est, peak)?);
        noisy_psnrs.push(amplitude_psnr_values(
            &ground_truth.values,
            &intensity_of(&z).values,
            peak,
        ));
    }
    let (psnr_mean, psnr_sigma) = mean_sigma(&psnrs);
    let (noisy_psnr_mean, noisy_psnr_sigma) = mean_sigma(&noisy_psnrs);
    Ok(ProtocolReport {
        instances: opts.instances,
        psnr_mean,
        psnr_sigma,
        noisy_psnr_mean,
        noisy_psnr_sigma,
        per_instance: psnrs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::speckle::WindowKind;

    #[test]
    fn psnr_cap_and_formula() {
        let a = ReflectivityImage::constant(4, 4, 25.0);
        assert_eq!(psnr_amplitude(&a, &a, 5.0).unwrap(), PSNR_CAP_DB);

        // Amplitudes 100 vs 90 with peak 100: 10 log10(1e4 / 1e2) = 20 dB.
        let r = ReflectivityImage::constant(3, 3, 100.0 * 100.0);
        let e = ReflectivityImage::constant(3, 3, 90.0 * 90.0);
        let v = psnr_amplitude(&r, &e, 100.0).unwrap();
        assert!((v - 20.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn psnr_rejects_mismatch_and_bad_peak() {
        let a = ReflectivityImage::constant(2, 2, 1.0);
        let b = ReflectivityImage::constant(3, 2, 1.0);
        assert!(psnr_amplitude(&a, &b, 1.0).is_err());
        assert!(psnr_amplitude(&a, &a, 0.0).is_err());
    }

    #[test]
    fn psnr_invariant_under_joint_permutation() {
        let mut rng = RngStream::new(42, 0);
        let rv: Vec<f32> = (0..64).map(|_| rng.uniform_in(1.0, 50.0) as f32).collect();
        let ev: Vec<f32> = (0..64).map(|_| rng.uniform_in(1.0, 50.0) as f32).collect();
        let r = ReflectivityImage::new(8, 8, rv.clone(), false).unwrap();
        let e = ReflectivityImage::new(8, 8, ev.clone(), false).unwrap();
        let base = psnr_amplitude(&r, &e, 10.0).unwrap();

        let mut idx: Vec<usize> = (0..64).collect();
        rng.shuffle(&mut idx);
        let rp: Vec<f32> = idx.iter().map(|&i| rv[i]).collect();
        let ep: Vec<f32> = idx.iter().map(|&i| ev[i]).collect();
        let r2 = ReflectivityImage::new(8, 8, rp, false).unwrap();
        let e2 = ReflectivityImage::new(8, 8, ep, false).unwrap();
        let permuted = psnr_amplitude(&r2, &e2, 10.0).unwrap();
        assert!((base - permuted).abs() < 1e-9);
    }

    #[test]
    fn residual_ratio_cases() {
        let i = Grid::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let est = ReflectivityImage::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let ratio = residual_ratio(&i, &est).unwrap();
        assert!(ratio.values.iter().all(|&v| (v - 1.0).abs() < 1e-7));

        let half = ReflectivityImage::new(2, 2, vec![0.5, 1.0, 1.5, 2.0], false).unwrap();
        let ratio = residual_ratio(&i, &half).unwrap();
        assert!(ratio.values.iter().all(|&v| (v - 2.0).abs() < 1e-6));
    }

    #[test]
    fn residual_ratio_of_true_reflectivity_is_unit_enl() {
        let r = ReflectivityImage::constant(400, 250, 7.0);
        let z = simulate_slc(
            &r,
            &TransferFunctionSpec::identity(),
            &mut RngStream::new(5, 0),
        )
        .unwrap();
        let ratio = residual_ratio(&intensity_of(&z), &r).unwrap();
        let n = ratio.len() as f64;
        let mean = ratio.values.iter().map(|&v| v as f64).sum::<f64>() / n;
        assert!((mean - 1.0).abs() < 0.01, "ratio mean {mean}");
        let e = enl(&ratio.values).unwrap();
        assert!((e - 1.0).abs() < 0.05, "ratio ENL {e}");
    }

    #[test]
    fn enl_cases() {
        assert_eq!(enl(&vec![3.0; 400]).unwrap(), ENL_CAP);
        assert!(matches!(
            enl(&vec![1.0; 50]),
            Err(EvalError::RegionTooSmall { .. })
        ));

        // Single-look intensity has ENL 1; 4-look averages have ENL 4.
        let mut rng = RngStream::new(777, 3);
        let single: Vec<f32> = (0..100_000)
            .map(|_| -(rng.uniform_open().ln()) as f32)
            .collect();
        let e1 = enl(&single).unwrap();
        assert!((e1 - 1.0).abs() < 0.05, "single-look ENL {e1}");

        let four: Vec<f32> = (0..100_000)
            .map(|_| {
                (0..4)
                    .map(|_| -(rng.uniform_open().ln()) as f32)
                    .sum::<f32>()
                    / 4.0
            })
            .collect();
        let e4 = enl(&four).unwrap();
        assert!((e4 - 4.0).abs() < 0.2, "4-look ENL {e4}");
    }

    fn hamming_spec() -> TransferFunctionSpec {
        TransferFunctionSpec::separable(1.2, WindowKind::Hamming, WindowKind::Hamming, 0.0, 0.0)
            .unwrap()
    }

    fn one_sided_spec() -> TransferFunctionSpec {
        TransferFunctionSpec::separable(
            2.0,
            WindowKind::Rectangular,
            WindowKind::Rectangular,
            0.25,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn analytic_independence_matrix() {
        let identity = TransferFunctionSpec::identity();
        assert_eq!(
            check_transfer_independence(&identity, 16, 16, 1e-6)
                .unwrap()
                .verdict,
            IndependenceVerdict::Independent
        );
        assert_eq!(
            check_transfer_independence(&hamming_spec(), 16, 16, 1e-6)
                .unwrap()
                .verdict,
            IndependenceVerdict::Independent
        );
        assert_eq!(
            check_transfer_independence(&one_sided_spec(), 16, 16, 1e-6)
                .unwrap()
                .verdict,
            IndependenceVerdict::Dependent
        );
    }

    #[test]
    fn global_phase_times_real_system_stays_independent() {
        // h = exp(j phi) * hamming gain: gain even, phase sum constant.
        let base = hamming_spec();
        let resp = base.materialize_response(8, 8).unwrap();
        let phi = 0.8f64;
        let rot = num_rotate(&resp, phi);
        let spec = TransferFunctionSpec::explicit(crate::speckle::ExplicitGrid {
            width: 8,
            height: 8,
            re: rot.iter().map(|v| v.re as f32).collect(),
            im: rot.iter().map(|v| v.im as f32).collect(),
        });
        let report = check_transfer_independence(&spec, 8, 8, 1e-5).unwrap();
        assert_eq!(report.verdict, IndependenceVerdict::Independent);
    }

    fn num_rotate(
        resp: &[rustfft::num_complex::Complex64],
        phi: f64,
    ) -> Vec<rustfft::num_complex::Complex64> {
        let w = rustfft::num_complex::Complex64::from_polar(1.0, phi);
        resp.iter().map(|v| v * w).collect()
    }

    #[test]
    fn spatial_condition_zero_imaginary_is_independent() {
        let mut rng = RngStream::new(8, 0);
        let k = 16;
        let mut m = SquareMat::zeros(k);
        for i in 0..k {
            for j in 0..k {
                m.set(i, j, rng.normal());
            }
        }
        let n = SquareMat::zeros(k);
        let report = check_spatial_condition(&m, &n, 8, &mut rng).unwrap();
        assert_eq!(report.verdict, IndependenceVerdict::Independent);
        assert!(report.max_residual < 1e-12);
    }

    #[test]
    fn spatial_condition_accepts_common_factor_construction() {
        // M = Q diag(lambda), N = Q diag(tau) is exactly the independent
        // family; residuals must vanish.
        let mut rng = RngStream::new(9, 0);
        let k = 12;
        let mut q = SquareMat::zeros(k);
        for i in 0..k {
            for j in 0..k {
                q.set(i, j, rng.normal());
            }
        }
        let lambda: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let tau: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let mut m = SquareMat::zeros(k);
        let mut n = SquareMat::zeros(k);
        for i in 0..k {
            for j in 0..k {
                m.set(i, j, q.at(i, j) * lambda[j]);
                n.set(i, j, q.at(i, j) * tau[j]);
            }
        }
        let report = check_spatial_condition(&m, &n, 8, &mut rng).unwrap();
        assert_eq!(report.verdict, IndependenceVerdict::Independent);
        assert!(report.max_residual < 1e-10, "{}", report.max_residual);
    }

    #[test]
    fn spatial_condition_rejects_unrelated_matrices() {
        let mut rng = RngStream::new(10, 0);
        let k = 10;
        let mut m = SquareMat::zeros(k);
        let mut n = SquareMat::zeros(k);
        for i in 0..k {
            for j in 0..k {
                m.set(i, j, rng.normal());
                n.set(i, j, rng.normal());
            }
        }
        let report = check_spatial_condition(&m, &n, 8, &mut rng).unwrap();
        assert_eq!(report.verdict, IndependenceVerdict::Dependent);
    }

    #[test]
    fn elementary_sweep_matches_rank_one_residual() {
        // For r = e_i the residual is max |m_i n_i^T - n_i m_i^T|.
        let mut rng = RngStream::new(11, 0);
        let k = 6;
        let mut m = SquareMat::zeros(k);
        let mut n = SquareMat::zeros(k);
        for i in 0..k {
            for j in 0..k {
                m.set(i, j, rng.normal());
                n.set(i, j, rng.normal());
            }
        }
        for col in 0..k {
            let mut r = vec![0.0; k];
            r[col] = 1.0;
            let got = spatial_condition_residual(&m, &n, &r);
            let mut oracle = 0.0f64;
            for i in 0..k {
                for j in 0..k {
                    let v = m.at(i, col) * n.at(j, col) - n.at(i, col) * m.at(j, col);
                    oracle = oracle.max(v.abs());
                }
            }
            assert!((got - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn full_likelihood_identity_reduces_to_marginal_form() {
        let mut rng = RngStream::new(12, 0);
        for _ in 0..20 {
            let vals: Vec<f32> = (0..16).map(|_| rng.uniform_in(0.2, 5.0) as f32).collect();
            let r = ReflectivityImage::new(4, 4, vals, false).unwrap();
            let b: Vec<f32> = (0..16).map(|_| rng.normal() as f32).collect();
            let bg = Grid::new(4, 4, b.clone());
            let full =
                full_likelihood(&r, &bg, &TransferFunctionSpec::identity()).unwrap();
            let marginal: f64 = r
                .values
                .iter()
                .zip(b.iter())
                .map(|(&rk, &bk)| 0.5 * (rk as f64).ln() + (bk as f64).powi(2) / rk as f64)
                .sum();
            assert!(
                (full - marginal).abs() < 1e-8 * marginal.abs().max(1.0),
                "{full} vs {marginal}"
            );
        }
    }

    #[test]
    fn full_likelihood_unit_example() {
        // r = 1, H = I, b = 1 on 4 pixels: 0 + 4 = 4.
        let r = ReflectivityImage::constant(2, 2, 1.0);
        let b = Grid::new(2, 2, vec![1.0; 4]);
        let v = full_likelihood(&r, &b, &TransferFunctionSpec::identity()).unwrap();
        assert!((v - 4.0).abs() < 1e-9, "{v}");
    }

    /// Independent dense route: Gauss-Jordan inversion of the covariance.
    fn gauss_jordan_quadratic(c: &[f64], k: usize, b: &[f64]) -> f64 {
        let mut a = vec![0.0f64; k * 2 * k];
        for i in 0..k {
            for j in 0..k {
                a[i * 2 * k + j] = c[i * k + j];
            }
            a[i * 2 * k + k + i] = 1.0;
        }
        for col in 0..k {
            let mut pivot = col;
            for row in col + 1..k {
                if a[row * 2 * k + col].abs() > a[pivot * 2 * k + col].abs() {
                    pivot = row;
                }
            }
            for j in 0..2 * k {
                a.swap(col * 2 * k + j, pivot * 2 * k + j);
            }
            let d = a[col * 2 * k + col];
            for j in 0..2 * k {
                a[col * 2 * k + j] /= d;
            }
            for row in 0..k {
                if row == col {
                    continue;
                }
                let f = a[row * 2 * k + col];
                for j in 0..2 * k {
                    a[row * 2 * k + j] -= f * a[col * 2 * k + j];
                }
            }
        }
        let mut quad = 0.0;
        for i in 0..k {
            for j in 0..k {
                quad += b[i] * a[i * 2 * k + k + j] * b[j];
            }
        }
        quad
    }

    #[test]
    fn full_likelihood_matches_independent_solver() {
        // Full-band apodization: a padded band zeroes bins and makes the
        // covariance singular.
        let spec = TransferFunctionSpec::separable(
            1.0,
            WindowKind::Hamming,
            WindowKind::Hamming,
            0.0,
            0.0,
        )
        .unwrap();
        let mut rng = RngStream::new(13, 0);
        let vals: Vec<f32> = (0..64).map(|_| rng.uniform_in(0.5, 4.0) as f32).collect();
        let r = ReflectivityImage::new(8, 8, vals, false).unwrap();
        let b: Vec<f32> = (0..64).map(|_| rng.normal() as f32).collect();
        let bg = Grid::new(8, 8, b.clone());
        let got = full_likelihood(&r, &bg, &spec).unwrap();

        // Oracle path: rebuild the covariance and invert it by Gauss-Jordan.
        let (m, _) = spec.spatial_parts(8, 8).unwrap();
        let k = 64;
        let mut c = vec![0.0f64; k * k];
        for i in 0..k {
            for j in 0..k {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += m.at(i, l) * r.values[l] as f64 * m.at(j, l);
                }
                c[i * k + j] = acc;
            }
        }
        let bv: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        let quad = gauss_jordan_quadratic(&c, k, &bv);
        let logdet: f64 = r.values.iter().map(|&v| 0.5 * (v as f64).ln()).sum();
        let oracle = logdet + quad;
        assert!(
            (got - oracle).abs() < 1e-6 * oracle.abs().max(1.0),
            "{got} vs {oracle}"
        );
    }

    #[test]
    fn full_likelihood_rejects_complex_system() {
        let r = ReflectivityImage::constant(4, 4, 1.0);
        let b = Grid::new(4, 4, vec![0.0; 16]);
        assert!(matches!(
            full_likelihood(&r, &b, &one_sided_spec()),
            Err(EvalError::InvalidArgument(_))
        ));
    }

    #[test]
    fn full_likelihood_reports_singularity() {
        // A rank-deficient explicit response (zero row in the band) makes
        // the covariance singular.
        let n = 4usize;
        let mut re = vec![0.0f32; n * n];
        for kx in 0..n {
            re[kx] = 1.0; // only the DC row passes
        }
        let spec = TransferFunctionSpec::explicit(crate::speckle::ExplicitGrid {
            width: n,
            height: n,
            re,
            im: vec![0.0; n * n],
        });
        let r = ReflectivityImage::constant(n, n, 1.0);
        let b = Grid::new(n, n, vec![1.0; n * n]);
        assert!(matches!(
            full_likelihood(&r, &b, &spec),
            Err(EvalError::SingularCovariance { .. })
        ));
    }

    #[test]
    fn empirical_independence_thresholds() {
        let draws = 20_000;
        let stat_id =
            empirical_independence(&TransferFunctionSpec::identity(), 8, 8, draws, 41).unwrap();
        assert!(stat_id < 0.03, "identity stat {stat_id}");

        let stat_one = empirical_independence(&one_sided_spec(), 8, 8, draws, 41).unwrap();
        assert!(stat_one > 0.1, "one-sided stat {stat_one}");
    }

    #[test]
    fn empirical_independence_requires_draws() {
        assert!(matches!(
            empirical_independence(&TransferFunctionSpec::identity(), 8, 8, 100, 0),
            Err(EvalError::TooFewDraws { .. })
        ));
    }
}
