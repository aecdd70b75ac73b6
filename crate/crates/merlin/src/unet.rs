//! Residual U-Net over the autodiff engine.
//!
//! Maps a normalized log-domain single-channel patch to a normalized
//! log-reflectivity patch. Per level: two 3x3 convolutions with leaky ReLU,
//! 2x2 max pooling down and nearest-neighbor upsampling with skip
//! concatenation up, a 1x1 head, and a residual output `input - trunk`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::rng::RngStream;
use crate::spectrum::LogImage;

#[derive(Debug, Error)]
pub enum UNetError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("patch side {side} not divisible by 2^levels = {granularity}")]
    SideNotDivisible { side: usize, granularity: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, UNetError>;

fn default_leaky() -> f32 {
    0.1
}

fn default_residual() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Encoder/decoder scales; the input side must divide by `2^levels`.
    pub levels: usize,
    pub base_channels: usize,
    #[serde(default = "default_leaky")]
    pub leaky_slope: f32,
    #[serde(default = "default_residual")]
    pub residual: bool,
}

impl UNetConfig {
    /// Desk-scale default; the full-scale configuration uses 5 levels and
    /// 48 base channels.
    pub fn desk() -> Self {
        Self {
            levels: 3,
            base_channels: 16,
            leaky_slope: 0.1,
            residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(UNetError::InvalidConfig("levels must be >= 1".into()));
        }
        if self.base_channels < 1 {
            return Err(UNetError::InvalidConfig(
                "base_channels must be >= 1".into(),
            ));
        }
        if !self.leaky_slope.is_finite() || self.leaky_slope < 0.0 {
            return Err(UNetError::InvalidConfig(format!(
                "bad leaky slope {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    pub fn granularity(&self) -> usize {
        1 << self.levels
    }
}

/// Stream id used for weight initialization draws.
const INIT_STREAM: u64 = 0x1217;

/// A built network: the config plus its parameterized graph.
#[derive(Clone, Debug)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub graph: Graph<f32>,
}

impl UNet {
    /// Construct the graph with variance-scaled random weights (gain matched
    /// to the leaky ReLU slope) and zero biases.
    pub fn build(cfg: &UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::new(seed, INIT_STREAM);
        let mut g: Graph<f32> = Graph::new();
        let slope = cfg.leaky_slope as f64;

        let conv_params = |g: &mut Graph<f32>,
                               rng: &mut RngStream,
                               name: &str,
                               cin: usize,
                               cout: usize,
                               k: usize|
         -> Result<(NodeId, NodeId)> {
            let fan_in = (cin * k * k) as f64;
            let std = (2.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
            let data: Vec<f32> = (0..cout * cin * k * k)
                .map(|_| (rng.normal() * std) as f32)
                .collect();
            let w = g.param(
                &format!("{name}.weight"),
                Tensor::from_vec([cout, cin, k, k], data),
            )?;
            let b = g.param(&format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]))?;
            Ok((w, b))
        };

        let x = g.input("x", 1);
        let width = |i: usize| cfg.base_channels << i;

        let mut cur = x;
        let mut cur_ch = 1;
        let mut skips: Vec<(NodeId, usize)> = Vec::with_capacity(cfg.levels);
        for level in 0..cfg.levels {
            let ch = width(level);
            for half in 1..=2 {
                let cin = if half == 1 { cur_ch } else { ch };
                let (w, b) = conv_params(&mut g, &mut rng, &format!("enc{level}.conv{half}"), cin, ch, 3)?;
                let c = g.conv2d(cur, w, b);
                cur = g.leaky_relu(c, slope);
            }
            cur_ch = ch;
            skips.push((cur, ch));
            cur = g.maxpool2(cur);
        }

        let bottleneck_ch = width(cfg.levels);
        for half in 1..=2 {
            let cin = if half == 1 { cur_ch } else { bottleneck_ch };
            let (w, b) = conv_params(&mut g, &mut rng, &format!("bottleneck.conv{half}"), cin, bottleneck_ch, 3)?;
            let c = g.conv2d(cur, w, b);
            cur = g.leaky_relu(c, slope);
        }
        cur_ch = bottleneck_ch;

        for level in (0..cfg.levels).rev() {
            let (skip, skip_ch) = skips[level];
            let ch = width(level);
            let up = g.upsample2(cur);
            cur = g.concat(up, skip);
            let mut cin = cur_ch + skip_ch;
            for half in 1..=2 {
                let (w, b) = conv_params(&mut g, &mut rng, &format!("dec{level}.conv{half}"), cin, ch, 3)?;
                let c = g.conv2d(cur, w, b);
                cur = g.leaky_relu(c, slope);
                cin = ch;
            }
            cur_ch = ch;
        }

        let (w, b) = conv_params(&mut g, &mut rng, "head", cur_ch, 1, 1)?;
        let trunk = g.conv2d(cur, w, b);
        let out = if cfg.residual { g.sub(x, trunk) } else { trunk };
        g.set_output(out);

        Ok(Self {
            cfg: cfg.clone(),
            graph: g,
        })
    }

    fn check_side(&self, side: usize) -> Result<()> {
        let granularity = self.cfg.granularity();
        if side % granularity != 0 {
            return Err(UNetError::SideNotDivisible { side, granularity });
        }
        Ok(())
    }

    /// Run the network on one normalized log patch; the normalization
    /// constants are carried through unchanged.
    pub fn predict(&mut self, patch: &LogImage) -> Result<LogImage> {
        self.check_side(patch.width)?;
        self.check_side(patch.height)?;
        let t = Tensor::from_vec([1, 1, patch.height, patch.width], patch.values.clone());
        let mut inputs = HashMap::new();
        inputs.insert("x".to_string(), t);
        let out = self.graph.forward(&inputs)?;
        Ok(LogImage {
            width: patch.width,
            height: patch.height,
            values: out.data,
            norm_lo: patch.norm_lo,
            norm_hi: patch.norm_hi,
        })
    }

    /// Zero every parameter, turning the residual network into the identity.
    pub fn zero_params(&mut self) {
        for slot in self.graph.params_mut() {
            for v in slot.value.data.iter_mut() {
                *v = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_patch(side: usize, seed: u64) -> LogImage {
        let mut rng = RngStream::new(seed, 0);
        LogImage {
            width: side,
            height: side,
            values: (0..side * side).map(|_| rng.normal() as f32).collect(),
            norm_lo: -3.0,
            norm_hi: 5.0,
        }
    }

    #[test]
    fn zero_trunk_is_identity() {
        let cfg = UNetConfig {
            levels: 2,
            base_channels: 4,
            leaky_slope: 0.1,
            residual: true,
        };
        let mut net = UNet::build(&cfg, 42).unwrap();
        net.zero_params();
        let patch = random_patch(16, 7);
        let out = net.predict(&patch).unwrap();
        assert_eq!(out.values, patch.values);
    }

    /// Hand-counted topology oracle for the parameter count.
    fn expected_param_count(levels: usize, base: usize) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let width = |i: usize| base << i;
        let mut total = 0;
        let mut cin = 1;
        for i in 0..levels {
            total += conv(cin, width(i), 3) + conv(width(i), width(i), 3);
            cin = width(i);
        }
        let bch = width(levels);
        total += conv(cin, bch, 3) + conv(bch, bch, 3);
        let mut cur = bch;
        for i in (0..levels).rev() {
            total += conv(cur + width(i), width(i), 3) + conv(width(i), width(i), 3);
            cur = width(i);
        }
        total + conv(cur, 1, 1)
    }

    #[test]
    fn tiny_config_parameter_count() {
        let cfg = UNetConfig {
            levels: 1,
            base_channels: 1,
            leaky_slope: 0.1,
            residual: true,
        };
        let net = UNet::build(&cfg, 1).unwrap();
        assert_eq!(net.graph.param_count(), 118);
        assert_eq!(net.graph.param_count(), expected_param_count(1, 1));
    }

    #[test]
    fn param_count_is_function_of_config() {
        for (levels, base) in [(1, 2), (2, 4), (3, 16)] {
            let cfg = UNetConfig {
                levels,
                base_channels: base,
                leaky_slope: 0.1,
                residual: true,
            };
            let a = UNet::build(&cfg, 5).unwrap();
            let b = UNet::build(&cfg, 99).unwrap();
            assert_eq!(a.graph.param_count(), expected_param_count(levels, base));
            assert_eq!(a.graph.param_count(), b.graph.param_count());
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let cfg = UNetConfig {
            levels: 3,
            base_channels: 2,
            leaky_slope: 0.1,
            residual: true,
        };
        let mut net = UNet::build(&cfg, 3).unwrap();
        let patch = random_patch(64, 8);
        let out = net.predict(&patch).unwrap();
        assert_eq!((out.width, out.height), (64, 64));
        assert_eq!(out.values.len(), 64 * 64);
    }

    #[test]
    fn predict_is_deterministic() {
        let cfg = UNetConfig {
            levels: 2,
            base_channels: 3,
            leaky_slope: 0.1,
            residual: true,
        };
        let mut net = UNet::build(&cfg, 11).unwrap();
        let patch = random_patch(16, 2);
        let a = net.predict(&patch).unwrap();
        let b = net.predict(&patch).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn indivisible_side_rejected() {
        let cfg = UNetConfig {
            levels: 2,
            base_channels: 2,
            leaky_slope: 0.1,
            residual: true,
        };
        let mut net = UNet::build(&cfg, 1).unwrap();
        let patch = random_patch(18, 3); // even but not divisible by 4
        assert!(matches!(
            net.predict(&patch),
            Err(UNetError::SideNotDivisible { .. })
        ));
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = UNetConfig::desk();
        let a = UNet::build(&cfg, 123).unwrap();
        let b = UNet::build(&cfg, 123).unwrap();
        for (pa, pb) in a.graph.params().iter().zip(b.graph.params().iter()) {
            assert_eq!(pa.value.data, pb.value.data);
        }
    }
}
