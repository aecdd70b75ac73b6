//! Self-supervised despeckling of single-look complex (SLC) SAR images.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`speckle`]: fully developed speckle simulation with an arbitrary linear
//!   system transfer function applied in the frequency domain.
//! - [`spectrum`]: per-patch spectrum recentering, symmetric spectral masking
//!   and log-domain normalization.
//! - [`autodiff`]: a minimal reverse-mode engine over dense NCHW tensors with
//!   exactly the operators the residual U-Net and the losses need.
//! - [`unet`]: the residual U-Net used for reflectivity estimation.
//! - [`train`]: the self-supervised training loop that feeds one part
//!   (real or imaginary) to the network and scores it against the other,
//!   plus the supervised two-realization baseline.
//! - [`despeckle`]: tiled inference over both parts and fusion of the two
//!   estimates.
//! - [`eval`]: amplitude PSNR, ENL, residual ratios, real/imaginary
//!   independence diagnostics and the full-covariance likelihood oracle.
//! - [`raster`]: bit-exact file containers and PNG ingest/export.

pub mod autodiff;
pub mod despeckle;
pub mod eval;
pub(crate) mod fft;
pub mod raster;
pub mod rng;
pub mod speckle;
pub mod spectrum;
pub mod train;
pub mod unet;

pub use raster::{ComplexImage, Grid, ReflectivityImage, TensorContainer};
pub use rng::RngStream;
pub use speckle::TransferFunctionSpec;
