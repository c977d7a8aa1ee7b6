use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{Conv2d, Linear};
use crate::error::{Error, Result};

/// How the squeeze step pools each channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SqueezeMode {
    /// Half the sum of the spatial mean and spatial max.
    MeanMax,
    /// Spatial mean only (classic squeeze-and-excitation).
    Mean,
}

/// Hyperparameters that fix every tensor shape of the embedding network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub reduction_ratio: usize,
    pub squeeze: SqueezeMode,
    pub attention: bool,
    /// Output width of the per-pixel spectral projection.
    pub down_channels: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub residual: bool,
    pub embedding_dim: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 32,
            reduction_ratio: 16,
            squeeze: SqueezeMode::MeanMax,
            attention: true,
            down_channels: 3,
            stage_widths: vec![8, 16],
            blocks_per_stage: 2,
            residual: true,
            embedding_dim: 64,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::arg("in_channels must be at least 1"));
        }
        if self.reduction_ratio == 0 {
            return Err(Error::arg("reduction_ratio must be at least 1"));
        }
        if self.down_channels == 0 {
            return Err(Error::arg("down_channels must be at least 1"));
        }
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err(Error::arg("stage_widths must be nonempty and positive"));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::arg("blocks_per_stage must be at least 1"));
        }
        if self.embedding_dim < 2 {
            return Err(Error::arg("embedding_dim must be at least 2"));
        }
        Ok(())
    }

    /// Bottleneck width of the excitation MLP, never below one.
    pub fn reduced_channels(&self) -> usize {
        (self.in_channels / self.reduction_ratio).max(1)
    }

    /// Short hex digest of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let hash = Sha256::digest(&json);
        hash[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SEParams {
    pub reduce: Linear,
    pub expand: Linear,
    pub reduction_ratio: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownsampleParams {
    pub proj: Linear,
}

impl DownsampleParams {
    pub fn identity(channels: usize) -> Self {
        let mut proj = Linear::zeros(channels, channels);
        for c in 0..channels {
            proj.weight[c * channels + c] = 1.0;
        }
        Self { proj }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    /// 1×1 projection on the skip path when the shape changes.
    pub shortcut: Option<Conv2d>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    pub stem: Conv2d,
    pub blocks: Vec<ResidualBlock>,
    pub head: Linear,
    pub residual: bool,
}

/// All learnable weights of the embedding function. Also used as the
/// gradient type, since gradients share the parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingParams {
    pub config: ModelConfig,
    pub se: SEParams,
    pub down: DownsampleParams,
    pub backbone: BackboneParams,
}

const RELU_GAIN: f64 = 2.0;
const LINEAR_GAIN: f64 = 1.0;

impl EmbeddingParams {
    /// Seeded initialization: uniform weights scaled by fan-in, zero biases.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let c = config.in_channels;
        let r = config.reduced_channels();
        let se = SEParams {
            reduce: Linear::init(c, r, RELU_GAIN, &mut rng),
            expand: Linear::init(r, c, LINEAR_GAIN, &mut rng),
            reduction_ratio: config.reduction_ratio,
        };
        let down = DownsampleParams {
            proj: Linear::init(c, config.down_channels, LINEAR_GAIN, &mut rng),
        };
        let w0 = config.stage_widths[0];
        let stem = Conv2d::init(config.down_channels, w0, 3, 1, RELU_GAIN, &mut rng);
        let mut blocks = Vec::new();
        let mut width = w0;
        for (s, &out) in config.stage_widths.iter().enumerate() {
            for b in 0..config.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let conv1 = Conv2d::init(width, out, 3, stride, RELU_GAIN, &mut rng);
                let conv2 = Conv2d::init(out, out, 3, 1, RELU_GAIN, &mut rng);
                let shortcut = (config.residual && (stride != 1 || width != out))
                    .then(|| Conv2d::init(width, out, 1, stride, LINEAR_GAIN, &mut rng));
                blocks.push(ResidualBlock {
                    conv1,
                    conv2,
                    shortcut,
                });
                width = out;
            }
        }
        let head = Linear::init(width, config.embedding_dim, LINEAR_GAIN, &mut rng);
        Ok(Self {
            config: config.clone(),
            se,
            down,
            backbone: BackboneParams {
                stem,
                blocks,
                head,
                residual: config.residual,
            },
        })
    }

    /// Same shapes, every value zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    pub fn digest(&self) -> String {
        self.config.digest()
    }

    pub fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    /// Visits every tensor with a stable dotted name.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &[f64])) {
        f("se.reduce.weight", &self.se.reduce.weight);
        f("se.reduce.bias", &self.se.reduce.bias);
        f("se.expand.weight", &self.se.expand.weight);
        f("se.expand.bias", &self.se.expand.bias);
        f("down.weight", &self.down.proj.weight);
        f("down.bias", &self.down.proj.bias);
        f("backbone.stem.weight", &self.backbone.stem.weight);
        f("backbone.stem.bias", &self.backbone.stem.bias);
        for (i, b) in self.backbone.blocks.iter().enumerate() {
            f(&format!("backbone.block{i}.conv1.weight"), &b.conv1.weight);
            f(&format!("backbone.block{i}.conv1.bias"), &b.conv1.bias);
            f(&format!("backbone.block{i}.conv2.weight"), &b.conv2.weight);
            f(&format!("backbone.block{i}.conv2.bias"), &b.conv2.bias);
            if let Some(sc) = &b.shortcut {
                f(&format!("backbone.block{i}.shortcut.weight"), &sc.weight);
                f(&format!("backbone.block{i}.shortcut.bias"), &sc.bias);
            }
        }
        f("backbone.head.weight", &self.backbone.head.weight);
        f("backbone.head.bias", &self.backbone.head.bias);
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Vec<f64>)) {
        f("se.reduce.weight", &mut self.se.reduce.weight);
        f("se.reduce.bias", &mut self.se.reduce.bias);
        f("se.expand.weight", &mut self.se.expand.weight);
        f("se.expand.bias", &mut self.se.expand.bias);
        f("down.weight", &mut self.down.proj.weight);
        f("down.bias", &mut self.down.proj.bias);
        f("backbone.stem.weight", &mut self.backbone.stem.weight);
        f("backbone.stem.bias", &mut self.backbone.stem.bias);
        for (i, b) in self.backbone.blocks.iter_mut().enumerate() {
            f(
                &format!("backbone.block{i}.conv1.weight"),
                &mut b.conv1.weight,
            );
            f(&format!("backbone.block{i}.conv1.bias"), &mut b.conv1.bias);
            f(
                &format!("backbone.block{i}.conv2.weight"),
                &mut b.conv2.weight,
            );
            f(&format!("backbone.block{i}.conv2.bias"), &mut b.conv2.bias);
            if let Some(sc) = &mut b.shortcut {
                f(
                    &format!("backbone.block{i}.shortcut.weight"),
                    &mut sc.weight,
                );
                f(&format!("backbone.block{i}.shortcut.bias"), &mut sc.bias);
            }
        }
        f("backbone.head.weight", &mut self.backbone.head.weight);
        f("backbone.head.bias", &mut self.backbone.head.bias);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }

    /// Flattened copy of every parameter, in tensor visiting order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each_tensor(|_, t| out.extend_from_slice(t));
        out
    }

    pub fn get_flat(&self, index: usize) -> f64 {
        let mut remaining = index;
        let mut found = None;
        self.for_each_tensor(|_, t| {
            if found.is_none() {
                if remaining < t.len() {
                    found = Some(t[remaining]);
                } else {
                    remaining -= t.len();
                }
            }
        });
        found.expect("flat index in range")
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let mut remaining = index;
        let mut done = false;
        self.for_each_tensor_mut(|_, t| {
            if !done {
                if remaining < t.len() {
                    t[remaining] = value;
                    done = true;
                } else {
                    remaining -= t.len();
                }
            }
        });
        assert!(done, "flat index {index} out of range");
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        let src = other.to_flat();
        let mut off = 0;
        self.for_each_tensor_mut(|_, t| {
            for v in t.iter_mut() {
                *v += scale * src[off];
                off += 1;
            }
        });
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v *= factor));
    }

    pub fn squared_norm(&self) -> f64 {
        let mut s = 0.0;
        self.for_each_tensor(|_, t| s += t.iter().map(|v| v * v).sum::<f64>());
        s
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }
}
