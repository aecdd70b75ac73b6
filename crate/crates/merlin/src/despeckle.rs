//! Tiled inference: run the trained network on the real and imaginary parts
//! separately, fuse the two reflectivity estimates, and stitch overlapping
//! tiles so arbitrarily large images process at a fixed patch size.

use thiserror::Error;

use crate::raster::{ComplexImage, Grid, ReflectivityImage};
use crate::spectrum::{LogImage, X_FLOOR};
use crate::train::{Checkpoint, TrainError};
use crate::unet::{UNet, UNetError};

#[derive(Debug, Error)]
pub enum DespeckleError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("tile {tile} must exceed twice the margin {margin}")]
    TileTooSmall { tile: usize, margin: usize },
    #[error("margin {0} below the 16-pixel minimum")]
    MarginTooSmall(usize),
    #[error("tile {tile} not divisible by 2^levels = {granularity}")]
    TileNotDivisible { tile: usize, granularity: usize },
    #[error(transparent)]
    UNet(#[from] UNetError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

type Result<T> = std::result::Result<T, DespeckleError>;

/// Domain in which the two per-part estimates are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionMode {
    /// Arithmetic mean of reflectivities; preserves per-branch unbiasedness.
    #[default]
    Linear,
    /// Mean in the log domain (geometric mean), exposed for comparison.
    Log,
}

/// A checkpointed network ready for repeated inference calls.
pub struct Despeckler {
    net: UNet,
    norm_lo: f32,
    norm_hi: f32,
}

impl Despeckler {
    pub fn new(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            net: ckpt.build_network()?,
            norm_lo: ckpt.norm_lo,
            norm_hi: ckpt.norm_hi,
        })
    }

    pub fn granularity(&self) -> usize {
        self.net.cfg.granularity()
    }

    fn estimate_from_log_input(&mut self, input: LogImage) -> Result<ReflectivityImage> {
        let out = self.net.predict(&input)?;
        let span = (self.norm_hi - self.norm_lo) as f64;
        let lo = self.norm_lo as f64;
        let values = out
            .values
            .iter()
            .map(|&v| ((v as f64 * span + lo).exp() as f32).max(f32::MIN_POSITIVE))
            .collect();
        Ok(ReflectivityImage {
            width: input.width,
            height: input.height,
            values,
            convolved: true,
        })
    }

    /// Estimate the reflectivity from one part (real or imaginary): the
    /// network sees the normalized log of the squared part.
    pub fn estimate_from_part(&mut self, part: &Grid) -> Result<ReflectivityImage> {
        let span = self.norm_hi - self.norm_lo;
        let values = part
            .values
            .iter()
            .map(|&v| ((v * v).max(X_FLOOR).ln() - self.norm_lo) / span)
            .collect();
        self.estimate_from_log_input(LogImage {
            width: part.width,
            height: part.height,
            values,
            norm_lo: self.norm_lo,
            norm_hi: self.norm_hi,
        })
    }

    /// Estimate the reflectivity from a full intensity image (the input
    /// convention of the supervised baseline).
    pub fn estimate_from_intensity(&mut self, intensity: &Grid) -> Result<ReflectivityImage> {
        let span = self.norm_hi - self.norm_lo;
        let values = intensity
            .values
            .iter()
            .map(|&v| (v.max(X_FLOOR).ln() - self.norm_lo) / span)
            .collect();
        self.estimate_from_log_input(LogImage {
            width: intensity.width,
            height: intensity.height,
            values,
            norm_lo: self.norm_lo,
            norm_hi: self.norm_hi,
        })
    }
}

/// One-shot single-part estimate; see [`Despeckler::estimate_from_part`].
pub fn despeckle_component(ckpt: &Checkpoint, part: &Grid) -> Result<ReflectivityImage> {
    Despeckler::new(ckpt)?.estimate_from_part(part)
}

fn check_same_dims(a: &ReflectivityImage, b: &ReflectivityImage) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(DespeckleError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Fuse the two per-part estimates by elementwise arithmetic mean in the
/// linear reflectivity domain.
pub fn combine_estimates(
    ra: &ReflectivityImage,
    rb: &ReflectivityImage,
) -> Result<ReflectivityImage> {
    check_same_dims(ra, rb)?;
    let values = ra
        .values
        .iter()
        .zip(rb.values.iter())
        .map(|(&a, &b)| 0.5 * (a + b))
        .collect();
    Ok(ReflectivityImage {
        width: ra.width,
        height: ra.height,
        values,
        convolved: ra.convolved || rb.convolved,
    })
}

/// Log-domain fusion (geometric mean), selectable for comparison.
pub fn combine_estimates_log(
    ra: &ReflectivityImage,
    rb: &ReflectivityImage,
) -> Result<ReflectivityImage> {
    check_same_dims(ra, rb)?;
    let values = ra
        .values
        .iter()
        .zip(rb.values.iter())
        .map(|(&a, &b)| (a as f64 * b as f64).sqrt() as f32)
        .collect();
    Ok(ReflectivityImage {
        width: ra.width,
        height: ra.height,
        values,
        convolved: ra.convolved || rb.convolved,
    })
}

fn combine(ra: &ReflectivityImage, rb: &ReflectivityImage, mode: FusionMode) -> Result<ReflectivityImage> {
    match mode {
        FusionMode::Linear => combine_estimates(ra, rb),
        FusionMode::Log => combine_estimates_log(ra, rb),
    }
}

/// Circular reflection index (period `2n - 2`) for border padding.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = (2 * n - 2) as isize;
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

struct TileCover {
    step: usize,
    padded: usize,
    tiles: usize,
}

fn cover(len: usize, tile: usize, margin: usize) -> TileCover {
    let step = tile - 2 * margin;
    let padded = (len + 2 * margin).max(tile);
    let tiles = len.div_ceil(step);
    TileCover {
        step,
        padded,
        tiles,
    }
}

/// Despeckle a whole SLC image with overlapping tiles: each tile's margin is
/// cropped away and only the center is stitched, so every output pixel is
/// produced by exactly one tile.
pub fn despeckle_image(
    ckpt: &Checkpoint,
    img: &ComplexImage,
    tile: usize,
    margin: usize,
    fusion: FusionMode,
) -> Result<ReflectivityImage> {
    let mut despeckler = Despeckler::new(ckpt)?;
    if margin < 16 {
        return Err(DespeckleError::MarginTooSmall(margin));
    }
    if tile <= 2 * margin {
        return Err(DespeckleError::TileTooSmall { tile, margin });
    }
    let granularity = despeckler.granularity();
    if tile % granularity != 0 {
        return Err(DespeckleError::TileNotDivisible { tile, granularity });
    }

    let (w, h) = (img.width, img.height);
    let cx = cover(w, tile, margin);
    let cy = cover(h, tile, margin);

    let mut out = vec![0.0f32; w * h];
    let mut tile_re = vec![0.0f32; tile * tile];
    let mut tile_im = vec![0.0f32; tile * tile];

    for ty in 0..cy.tiles {
        let oy = (ty * cy.step).min(cy.padded - tile);
        for tx in 0..cx.tiles {
            let ox = (tx * cx.step).min(cx.padded - tile);
            // Gather the tile from padded coordinates (reflection at edges).
            for y in 0..tile {
                let sy = reflect_index((oy + y) as isize - margin as isize, h);
                for x in 0..tile {
                    let sx = reflect_index((ox + x) as isize - margin as isize, w);
                    let src = img.idx(sx, sy);
                    tile_re[y * tile + x] = img.re[src];
                    tile_im[y * tile + x] = img.im[src];
                }
            }
            let ga = Grid::new(tile, tile, tile_re.clone());
            let gb = Grid::new(tile, tile, tile_im.clone());
            let ra = despeckler.estimate_from_part(&ga)?;
            let rb = despeckler.estimate_from_part(&gb)?;
            let fused = combine(&ra, &rb, fusion)?;

            // Stitch this tile's slice of the output: original pixels
            // [ty*step, (ty+1)*step) x [tx*step, ...), clamped to the image.
            let y_lo = ty * cy.step;
            let y_hi = ((ty + 1) * cy.step).min(h);
            let x_lo = tx * cx.step;
            let x_hi = ((tx + 1) * cx.step).min(w);
            for y in y_lo..y_hi {
                let tile_y = y + margin - oy;
                for x in x_lo..x_hi {
                    let tile_x = x + margin - ox;
                    out[y * w + x] = fused.values[tile_y * tile + tile_x];
                }
            }
        }
    }

    Ok(ReflectivityImage {
        width: w,
        height: h,
        values: out,
        convolved: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::TensorContainer;
    use crate::rng::RngStream;
    use crate::speckle::{intensity_of, sample_speckle_field};
    use crate::train::Provenance;
    use crate::unet::UNetConfig;

    /// Checkpoint whose residual network is the identity map.
    fn identity_checkpoint(levels: usize, norm: (f32, f32)) -> Checkpoint {
        let cfg = UNetConfig {
            levels,
            base_channels: 2,
            leaky_slope: 0.1,
            residual: true,
        };
        let mut net = UNet::build(&cfg, 0).unwrap();
        net.zero_params();
        let mut tensors = net.graph.dump_params("param.");
        for slot in net.graph.params() {
            let dims: Vec<u32> = slot.value.dims.iter().map(|&d| d as u32).collect();
            tensors.push(
                &format!("adam.m.{}", slot.name),
                &dims,
                vec![0.0; slot.value.numel()],
            );
            tensors.push(
                &format!("adam.v.{}", slot.name),
                &dims,
                vec![0.0; slot.value.numel()],
            );
        }
        Checkpoint {
            unet: cfg,
            norm_lo: norm.0,
            norm_hi: norm.1,
            adam_step: 0,
            provenance: Provenance {
                config_hash: "test".into(),
                epoch: 0,
                loss_history: vec![],
            },
            tensors,
        }
    }

    #[test]
    fn identity_checkpoint_returns_squared_part() {
        let ckpt = identity_checkpoint(2, (-4.0, 4.0));
        let mut rng = RngStream::new(3, 0);
        let z = sample_speckle_field(16, 16, &mut rng);
        let part = Grid::new(16, 16, z.re.clone());
        let est = despeckle_component(&ckpt, &part).unwrap();
        for (e, &a) in est.values.iter().zip(z.re.iter()) {
            let expected = (a * a).max(X_FLOOR) as f64;
            assert!(
                (*e as f64 - expected).abs() <= expected * 1e-5 + 1e-12,
                "{e} vs {expected}"
            );
        }
    }

    #[test]
    fn despeckle_output_is_positive_and_deterministic() {
        let ckpt = identity_checkpoint(2, (-4.0, 4.0));
        let mut rng = RngStream::new(9, 0);
        let z = sample_speckle_field(64, 48, &mut rng);
        let a = despeckle_image(&ckpt, &z, 64, 16, FusionMode::Linear).unwrap();
        let b = despeckle_image(&ckpt, &z, 64, 16, FusionMode::Linear).unwrap();
        assert!(a.values.iter().all(|&v| v > 0.0));
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn combine_examples() {
        let x = ReflectivityImage::constant(2, 2, 3.0);
        assert_eq!(combine_estimates(&x, &x).unwrap().values, x.values);

        let a = ReflectivityImage::constant(1, 1, 2.0);
        let b = ReflectivityImage::constant(1, 1, 4.0);
        assert_eq!(combine_estimates(&a, &b).unwrap().values, vec![3.0]);
        assert_eq!(
            combine_estimates(&a, &b).unwrap().values,
            combine_estimates(&b, &a).unwrap().values
        );

        let g = combine_estimates_log(&a, &b).unwrap();
        assert!((g.values[0] - 8.0f32.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn combine_rejects_mismatched_dims() {
        let a = ReflectivityImage::constant(2, 2, 1.0);
        let b = ReflectivityImage::constant(3, 2, 1.0);
        assert!(matches!(
            combine_estimates(&a, &b),
            Err(DespeckleError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn identity_checkpoint_combined_is_half_intensity() {
        let ckpt = identity_checkpoint(2, (-6.0, 4.0));
        let mut rng = RngStream::new(4, 0);
        let z = sample_speckle_field(32, 32, &mut rng);
        let est = despeckle_image(&ckpt, &z, 64, 16, FusionMode::Linear).unwrap();
        let intensity = intensity_of(&z);
        for (e, &i) in est.values.iter().zip(intensity.values.iter()) {
            let expected = (i / 2.0) as f64;
            assert!(
                (*e as f64 - expected).abs() <= expected.abs() * 1e-4 + 1e-9,
                "{e} vs {expected}"
            );
        }
    }

    #[test]
    fn tiling_matches_untiled_for_identity_checkpoint() {
        let ckpt = identity_checkpoint(2, (-4.0, 4.0));
        let mut rng = RngStream::new(5, 0);
        let z = sample_speckle_field(96, 64, &mut rng);
        // One big tile covering the image vs small tiles.
        let whole = despeckle_image(&ckpt, &z, 128, 16, FusionMode::Linear).unwrap();
        let tiled = despeckle_image(&ckpt, &z, 48, 16, FusionMode::Linear).unwrap();
        assert_eq!(whole.values, tiled.values);
    }

    #[test]
    fn image_smaller_than_tile_pads_by_reflection() {
        let ckpt = identity_checkpoint(2, (-4.0, 4.0));
        let mut rng = RngStream::new(6, 0);
        let z = sample_speckle_field(20, 12, &mut rng);
        let est = despeckle_image(&ckpt, &z, 64, 16, FusionMode::Linear).unwrap();
        assert_eq!((est.width, est.height), (20, 12));
        let intensity = intensity_of(&z);
        for (e, &i) in est.values.iter().zip(intensity.values.iter()) {
            let expected = (i / 2.0) as f64;
            assert!((*e as f64 - expected).abs() <= expected.abs() * 1e-4 + 1e-9);
        }
    }

    #[test]
    fn tile_margin_validation() {
        let ckpt = identity_checkpoint(2, (-4.0, 4.0));
        let z = ComplexImage::zeros(32, 32);
        assert!(matches!(
            despeckle_image(&ckpt, &z, 32, 8, FusionMode::Linear),
            Err(DespeckleError::MarginTooSmall(8))
        ));
        assert!(matches!(
            despeckle_image(&ckpt, &z, 32, 16, FusionMode::Linear),
            Err(DespeckleError::TileTooSmall { .. })
        ));
        assert!(matches!(
            despeckle_image(&ckpt, &z, 34, 16, FusionMode::Linear),
            Err(DespeckleError::TileNotDivisible { .. })
        ));
    }

    #[test]
    fn fusion_halves_variance_of_calibration_estimator() {
        // Per-branch calibration estimator r = 2 a^2 (or 2 b^2); fusing the
        // two branches must halve its variance on constant-r speckle.
        let mut rng = RngStream::new(2718, 0);
        let z = sample_speckle_field(400, 250, &mut rng); // 1e5 pixels, r = 1
        let n = z.len() as f64;
        let (mut sum_b, mut sq_b, mut sum_c, mut sq_c) = (0.0f64, 0.0, 0.0, 0.0);
        for i in 0..z.len() {
            let ra = 2.0 * (z.re[i] as f64).powi(2);
            let rb = 2.0 * (z.im[i] as f64).powi(2);
            let combined = 0.5 * (ra + rb);
            sum_b += rb;
            sq_b += rb * rb;
            sum_c += combined;
            sq_c += combined * combined;
        }
        let var_b = sq_b / n - (sum_b / n).powi(2);
        let var_c = sq_c / n - (sum_c / n).powi(2);
        let ratio = var_c / var_b;
        assert!((ratio - 0.5).abs() < 0.05, "variance ratio {ratio}");
    }

    #[test]
    fn reflect_index_behaves() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(0, 5), 0);
        assert_eq!(reflect_index(4, 5), 4);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(-3, 2), 1);
        assert_eq!(reflect_index(7, 1), 0);
    }

    #[test]
    fn checkpoint_survives_tensor_container_round_trip() {
        let ckpt = identity_checkpoint(1, (-2.0, 2.0));
        let mut buf = Vec::new();
        ckpt.tensors.write_to(&mut buf).unwrap();
        let back = TensorContainer::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ckpt.tensors);
    }
}
