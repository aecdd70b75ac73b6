//! Self-supervised training from the real/imaginary split of SLC images.
//!
//! Each training patch feeds one part (real or imaginary, in normalized
//! log-squared form) to the network while the loss scores the predicted
//! log-reflectivity against the other part: the per-pixel negative Gaussian
//! log-likelihood `sum 0.5 log(r) + b^2 / r`, expressed in log scale as
//! `sum 0.5 r' + exp(2 b' - r')`. Parts are swapped at random per patch per
//! epoch. A supervised two-realization baseline (full intensity in, second
//! independent intensity as target) is provided for comparison experiments.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    adam_step, clip_global_norm, AdamHyper, AdamState, AutodiffError, Graph, Tensor,
};
use crate::raster::{ComplexImage, RasterError, TensorContainer};
use crate::rng::RngStream;
use crate::spectrum::{corpus_log_norm, LogImage, X_FLOOR};
use crate::unet::{UNet, UNetConfig, UNetError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("image {width}x{height} smaller than patch {patch}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        patch: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("corrupt checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    UNet(#[from] UNetError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, TrainError>;

fn default_schema() -> u32 {
    1
}

fn default_patch() -> usize {
    256
}

fn default_batch() -> usize {
    12
}

fn default_epochs() -> usize {
    30
}

fn default_schedule() -> Vec<(usize, f64)> {
    vec![(0, 1e-3), (6, 1e-4), (20, 1e-5)]
}

fn default_clip() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_schema")]
    pub schema: u32,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// `(start_epoch, lr)` stages; epochs strictly increasing from 0.
    #[serde(default = "default_schedule")]
    pub lr_schedule: Vec<(usize, f64)>,
    #[serde(default = "default_clip")]
    pub grad_norm_clip: f64,
    /// Patch tiling stride; 0 selects the default `patch_size / 2`.
    #[serde(default)]
    pub stride: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema: 1,
            patch_size: default_patch(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            lr_schedule: default_schedule(),
            grad_norm_clip: default_clip(),
            stride: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn stride(&self) -> usize {
        if self.stride == 0 {
            (self.patch_size / 2).max(1)
        } else {
            self.stride
        }
    }

    pub fn validate(&self, unet: &UNetConfig) -> Result<()> {
        if self.schema != 1 {
            return Err(TrainError::Config(format!(
                "unsupported schema version {}",
                self.schema
            )));
        }
        if self.patch_size % unet.granularity() != 0 {
            return Err(TrainError::Config(format!(
                "patch_size {} not divisible by 2^levels = {}",
                self.patch_size,
                unet.granularity()
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.grad_norm_clip > 0.0) {
            return Err(TrainError::Config(format!(
                "grad_norm_clip must be > 0, got {}",
                self.grad_norm_clip
            )));
        }
        if self.lr_schedule.is_empty() || self.lr_schedule[0].0 != 0 {
            return Err(TrainError::Config(
                "lr_schedule must start at epoch 0".into(),
            ));
        }
        for pair in self.lr_schedule.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(TrainError::Config(
                    "lr_schedule epochs must be strictly increasing".into(),
                ));
            }
        }
        if self.lr_schedule.iter().any(|&(_, lr)| !(lr > 0.0)) {
            return Err(TrainError::Config("learning rates must be > 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr_schedule[0].1;
        for &(start, stage_lr) in &self.lr_schedule {
            if epoch >= start {
                lr = stage_lr;
            }
        }
        lr
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }

    /// FNV-1a hash of the canonical JSON form, recorded in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Pixel-summed self-supervised loss on log-domain values:
/// `sum_k 0.5 p[k] + exp(2 t[k] - p[k])` where `p = log r` and
/// `t = log |other part|`.
pub fn merlin_loss_log(pred_log_r: &[f64], target_log_abs: &[f64]) -> f64 {
    pred_log_r
        .iter()
        .zip(target_log_abs.iter())
        .map(|(&p, &t)| 0.5 * p + (2.0 * t - p).min(crate::autodiff::EXP_CLAMP).exp())
        .sum()
}

/// Pixel-summed supervised loss on log-domain values:
/// `sum_k p[k] + exp(i[k] - p[k])` where `i = log intensity`.
pub fn supervised_loss_log(pred_log_r: &[f64], target_log_intensity: &[f64]) -> f64 {
    pred_log_r
        .iter()
        .zip(target_log_intensity.iter())
        .map(|(&p, &t)| p + (t - p).min(crate::autodiff::EXP_CLAMP).exp())
        .sum()
}

fn check_loss_images(pred: &LogImage, target: &LogImage) -> Result<()> {
    if pred.width != target.width || pred.height != target.height {
        return Err(TrainError::Shape(format!(
            "loss operands {}x{} vs {}x{}",
            pred.width, pred.height, target.width, target.height
        )));
    }
    for v in pred.values.iter().chain(target.values.iter()) {
        if !v.is_finite() {
            return Err(TrainError::Shape("non-finite loss operand".into()));
        }
    }
    Ok(())
}

/// [`merlin_loss_log`] over denormalized (log-domain) images.
pub fn merlin_loss(pred: &LogImage, target: &LogImage) -> Result<f64> {
    check_loss_images(pred, target)?;
    let p: Vec<f64> = pred.values.iter().map(|&v| v as f64).collect();
    let t: Vec<f64> = target.values.iter().map(|&v| v as f64).collect();
    Ok(merlin_loss_log(&p, &t))
}

/// [`supervised_loss_log`] over denormalized (log-domain) images.
pub fn supervised_loss(pred: &LogImage, target: &LogImage) -> Result<f64> {
    check_loss_images(pred, target)?;
    let p: Vec<f64> = pred.values.iter().map(|&v| v as f64).collect();
    let t: Vec<f64> = target.values.iter().map(|&v| v as f64).collect();
    Ok(supervised_loss_log(&p, &t))
}

/// One training pair: normalized log-squared values of the input part and
/// of the target part, each `patch_size^2` long.
#[derive(Clone, Debug)]
pub struct PatchPair {
    pub input: Vec<f32>,
    pub target: Vec<f32>,
}

#[inline]
fn normalized_log_square(v: f32, lo: f32, span: f32) -> f32 {
    ((v * v).max(X_FLOOR).ln() - lo) / span
}

#[inline]
fn normalized_log(v: f32, lo: f32, span: f32) -> f32 {
    (v.max(X_FLOOR).ln() - lo) / span
}

/// Tile an image into training pairs: patches at the configured stride, a
/// uniform random real/imaginary swap per patch, shuffled order.
pub fn sample_patches(
    img: &ComplexImage,
    cfg: &TrainConfig,
    norm: (f32, f32),
    rng: &mut RngStream,
) -> Result<Vec<PatchPair>> {
    let p = cfg.patch_size;
    if img.width < p || img.height < p {
        return Err(TrainError::ImageTooSmall {
            width: img.width,
            height: img.height,
            patch: p,
        });
    }
    let stride = cfg.stride();
    let (lo, hi) = norm;
    let span = hi - lo;
    let positions_x = (img.width - p) / stride + 1;
    let positions_y = (img.height - p) / stride + 1;

    let mut pairs = Vec::with_capacity(positions_x * positions_y);
    for iy in 0..positions_y {
        for ix in 0..positions_x {
            let (x0, y0) = (ix * stride, iy * stride);
            let mut a = Vec::with_capacity(p * p);
            let mut b = Vec::with_capacity(p * p);
            for y in y0..y0 + p {
                for x in x0..x0 + p {
                    let i = img.idx(x, y);
                    a.push(normalized_log_square(img.re[i], lo, span));
                    b.push(normalized_log_square(img.im[i], lo, span));
                }
            }
            let pair = if rng.flip() {
                PatchPair {
                    input: b,
                    target: a,
                }
            } else {
                PatchPair {
                    input: a,
                    target: b,
                }
            };
            pairs.push(pair);
        }
    }
    rng.shuffle(&mut pairs);
    Ok(pairs)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
}

/// Everything needed to reproduce inference bit-exactly: topology config,
/// normalization constants, parameters and optimizer state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub unet: UNetConfig,
    pub norm_lo: f32,
    pub norm_hi: f32,
    pub adam_step: u64,
    pub provenance: Provenance,
    pub tensors: TensorContainer,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    schema: u32,
    unet: UNetConfig,
    norm: (f32, f32),
    adam_step: u64,
    provenance: Provenance,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MRLN";

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = CheckpointHeader {
            schema: 1,
            unet: self.unet.clone(),
            norm: (self.norm_lo, self.norm_hi),
            adam_step: self.adam_step,
            provenance: self.provenance.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        self.tensors.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        std::io::Read::read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TrainError::BadCheckpoint(format!(
                "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let mut len_bytes = [0u8; 4];
        std::io::Read::read_exact(&mut r, &mut len_bytes)?;
        let mut header_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
        std::io::Read::read_exact(&mut r, &mut header_bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
        if header.schema != 1 {
            return Err(TrainError::BadCheckpoint(format!(
                "unsupported checkpoint schema {}",
                header.schema
            )));
        }
        let tensors = TensorContainer::read_from(&mut r)?;
        Ok(Self {
            unet: header.unet,
            norm_lo: header.norm.0,
            norm_hi: header.norm.1,
            adam_step: header.adam_step,
            provenance: header.provenance,
            tensors,
        })
    }

    /// Rebuild the network with the stored parameters.
    pub fn build_network(&self) -> Result<UNet> {
        let mut net = UNet::build(&self.unet, 0)?;
        net.graph.load_params(&self.tensors, "param.")?;
        Ok(net)
    }
}

/// Side channel for the trainer: optional line-delimited JSON step log and
/// an optional directory receiving per-epoch `last.mrln` / `best.mrln`.
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epoch_losses: Vec<f64>,
    pub lr_history: Vec<(usize, f64)>,
    pub steps: usize,
}

#[derive(Serialize)]
struct StepLine {
    epoch: usize,
    step: usize,
    lr: f64,
    loss: f64,
}

/// Train with the self-supervised real/imaginary objective.
pub fn train(
    images: &[ComplexImage],
    unet_cfg: &UNetConfig,
    cfg: &TrainConfig,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    if images.is_empty() {
        return Err(TrainError::Config("empty training corpus".into()));
    }
    let norm = corpus_log_norm(images);
    run_training(images, unet_cfg, cfg, norm, opts)
}

/// Train the supervised baseline on pairs of independent realizations of
/// the same scene; the network sees the full intensity of the first and the
/// loss scores it against the intensity of the second.
pub fn train_supervised_baseline(
    pairs: &[(ComplexImage, ComplexImage)],
    unet_cfg: &UNetConfig,
    cfg: &TrainConfig,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(TrainError::Config("empty training corpus".into()));
    }
    // Normalization over the log intensities of both realizations.
    let mut logs: Vec<f32> = Vec::new();
    for (a, b) in pairs {
        for img in [a, b] {
            for i in 0..img.len() {
                let intensity = img.re[i] * img.re[i] + img.im[i] * img.im[i];
                logs.push(intensity.max(X_FLOOR).ln());
            }
        }
    }
    logs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = |q: f64| logs[((q * logs.len() as f64).ceil() as usize).clamp(1, logs.len()) - 1];
    let norm = {
        let lo = rank(0.01);
        let hi = rank(0.999);
        if hi > lo {
            (lo, hi)
        } else {
            (lo, lo + 1.0)
        }
    };

    run_training_supervised(pairs, unet_cfg, cfg, norm, opts)
}

fn intensity_pair_patches(
    first: &ComplexImage,
    second: &ComplexImage,
    cfg: &TrainConfig,
    norm: (f32, f32),
    rng: &mut RngStream,
) -> Result<Vec<PatchPair>> {
    let p = cfg.patch_size;
    if first.width < p || first.height < p {
        return Err(TrainError::ImageTooSmall {
            width: first.width,
            height: first.height,
            patch: p,
        });
    }
    if first.width != second.width || first.height != second.height {
        return Err(TrainError::Shape(
            "realization pair dimensions differ".into(),
        ));
    }
    let stride = cfg.stride();
    let (lo, hi) = norm;
    let span = hi - lo;
    let positions_x = (first.width - p) / stride + 1;
    let positions_y = (first.height - p) / stride + 1;
    let mut pairs = Vec::with_capacity(positions_x * positions_y);
    for iy in 0..positions_y {
        for ix in 0..positions_x {
            let (x0, y0) = (ix * stride, iy * stride);
            let mut input = Vec::with_capacity(p * p);
            let mut target = Vec::with_capacity(p * p);
            for y in y0..y0 + p {
                for x in x0..x0 + p {
                    let i = first.idx(x, y);
                    let i1 = first.re[i] * first.re[i] + first.im[i] * first.im[i];
                    let i2 = second.re[i] * second.re[i] + second.im[i] * second.im[i];
                    input.push(normalized_log(i1, lo, span));
                    target.push(normalized_log(i2, lo, span));
                }
            }
            pairs.push(PatchPair { input, target });
        }
    }
    rng.shuffle(&mut pairs);
    Ok(pairs)
}

const STREAM_PATCHES: u64 = 0x2000_0000;
const STREAM_SHUFFLE: u64 = 0x3000_0000;

fn run_training(
    images: &[ComplexImage],
    unet_cfg: &UNetConfig,
    cfg: &TrainConfig,
    norm: (f32, f32),
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    let epoch_pairs = |epoch: usize| -> Result<Vec<PatchPair>> {
        let mut all = Vec::new();
        for (i, img) in images.iter().enumerate() {
            let mut rng = RngStream::new(
                cfg.seed,
                STREAM_PATCHES + (epoch as u64) * 4096 + i as u64,
            );
            all.extend(sample_patches(img, cfg, norm, &mut rng)?);
        }
        let mut rng = RngStream::new(cfg.seed, STREAM_SHUFFLE + epoch as u64);
        rng.shuffle(&mut all);
        Ok(all)
    };
    train_loop(unet_cfg, cfg, norm, false, epoch_pairs, opts)
}

fn run_training_supervised(
    pairs: &[(ComplexImage, ComplexImage)],
    unet_cfg: &UNetConfig,
    cfg: &TrainConfig,
    norm: (f32, f32),
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    let epoch_pairs = |epoch: usize| -> Result<Vec<PatchPair>> {
        let mut all = Vec::new();
        for (i, (first, second)) in pairs.iter().enumerate() {
            let mut rng = RngStream::new(
                cfg.seed,
                STREAM_PATCHES + (epoch as u64) * 4096 + i as u64,
            );
            all.extend(intensity_pair_patches(first, second, cfg, norm, &mut rng)?);
        }
        let mut rng = RngStream::new(cfg.seed, STREAM_SHUFFLE + epoch as u64);
        rng.shuffle(&mut all);
        Ok(all)
    };
    train_loop(unet_cfg, cfg, norm, true, epoch_pairs, opts)
}

fn train_loop(
    unet_cfg: &UNetConfig,
    cfg: &TrainConfig,
    norm: (f32, f32),
    supervised: bool,
    epoch_pairs: impl Fn(usize) -> Result<Vec<PatchPair>>,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate(unet_cfg)?;
    let (lo, hi) = norm;

    let net = UNet::build(unet_cfg, cfg.seed)?;
    let mut g = net.graph;
    let out = g.output_id().expect("network has an output");
    let target = g.input("target", 1);
    let loss_node = if supervised {
        g.supervised_loss(out, target, lo as f64, hi as f64)
    } else {
        g.merlin_loss(out, target, lo as f64, hi as f64)
    };
    g.set_loss(loss_node);

    let sizes: Vec<usize> = g.params().iter().map(|p| p.value.numel()).collect();
    let mut adam: AdamState<f32> = AdamState::zeros(&sizes);
    let hyper = AdamHyper::default();

    let p = cfg.patch_size;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut lr_history = Vec::with_capacity(cfg.epochs);
    let mut best_loss = f64::INFINITY;
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        lr_history.push((epoch, lr));
        let pairs = epoch_pairs(epoch)?;
        let mut epoch_loss_sum = 0.0f64;
        let mut epoch_steps = 0usize;

        for batch in pairs.chunks(cfg.batch_size) {
            let n = batch.len();
            let mut input = Vec::with_capacity(n * p * p);
            let mut tgt = Vec::with_capacity(n * p * p);
            for pair in batch {
                input.extend_from_slice(&pair.input);
                tgt.extend_from_slice(&pair.target);
            }
            let mut inputs = HashMap::new();
            inputs.insert("x".to_string(), Tensor::from_vec([n, 1, p, p], input));
            inputs.insert("target".to_string(), Tensor::from_vec([n, 1, p, p], tgt));

            g.zero_grads();
            let loss = g.forward(&inputs)?.data[0] as f64;
            if !loss.is_finite() {
                let x = &inputs["x"];
                let (mut min, mut max, mut sum) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64);
                for &v in &x.data {
                    min = min.min(v);
                    max = max.max(v);
                    sum += v as f64;
                }
                return Err(TrainError::Diverged {
                    epoch,
                    step: global_step,
                    detail: format!(
                        "loss {loss}; batch input min {min}, max {max}, mean {}",
                        sum / x.data.len() as f64
                    ),
                });
            }
            g.backward()?;

            {
                let mut grads: Vec<&mut [f32]> = g
                    .params_mut()
                    .iter_mut()
                    .map(|s| s.value.grad.as_mut().expect("grad allocated").as_mut_slice())
                    .collect();
                clip_global_norm(&mut grads, cfg.grad_norm_clip as f32);
            }
            {
                let mut values: Vec<&mut [f32]> = Vec::with_capacity(sizes.len());
                let mut grads: Vec<&[f32]> = Vec::with_capacity(sizes.len());
                for slot in g.params_mut() {
                    let Tensor { data, grad, .. } = &mut slot.value;
                    values.push(data.as_mut_slice());
                    grads.push(grad.as_ref().expect("grad allocated").as_slice());
                }
                adam_step(&mut values, &grads, &mut adam, lr, &hyper)?;
            }

            epoch_loss_sum += loss;
            epoch_steps += 1;
            global_step += 1;
            if let Some(log) = opts.log.as_deref_mut() {
                let line = StepLine {
                    epoch,
                    step: global_step,
                    lr,
                    loss,
                };
                serde_json::to_writer(&mut *log, &line)?;
                writeln!(log)?;
            }
        }

        let mean_loss = if epoch_steps > 0 {
            epoch_loss_sum / epoch_steps as f64
        } else {
            f64::NAN
        };
        epoch_losses.push(mean_loss);

        if let Some(dir) = opts.checkpoint_dir.clone() {
            let ckpt = assemble_checkpoint(&g, unet_cfg, cfg, norm, &adam, epoch + 1, &epoch_losses);
            ckpt.save(dir.join("last.mrln"))?;
            if mean_loss <= best_loss {
                best_loss = mean_loss;
                ckpt.save(dir.join("best.mrln"))?;
            }
        }
    }

    let checkpoint = assemble_checkpoint(&g, unet_cfg, cfg, norm, &adam, cfg.epochs, &epoch_losses);
    Ok(TrainOutcome {
        checkpoint,
        epoch_losses,
        lr_history,
        steps: global_step,
    })
}

fn assemble_checkpoint(
    g: &Graph<f32>,
    unet_cfg: &UNetConfig,
    cfg: &TrainConfig,
    norm: (f32, f32),
    adam: &AdamState<f32>,
    epoch: usize,
    loss_history: &[f64],
) -> Checkpoint {
    let mut tensors = g.dump_params("param.");
    for (i, slot) in g.params().iter().enumerate() {
        let dims: Vec<u32> = slot.value.dims.iter().map(|&d| d as u32).collect();
        tensors.push(&format!("adam.m.{}", slot.name), &dims, adam.m[i].clone());
        tensors.push(&format!("adam.v.{}", slot.name), &dims, adam.v[i].clone());
    }
    Checkpoint {
        unet: unet_cfg.clone(),
        norm_lo: norm.0,
        norm_hi: norm.1,
        adam_step: adam.step,
        provenance: Provenance {
            config_hash: cfg.hash(),
            epoch,
            loss_history: loss_history.to_vec(),
        },
        tensors,
    }
}
