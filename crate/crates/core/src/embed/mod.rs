//! The embedding function: squeeze-and-excitation attention on raw spectral
//! channels, a per-pixel spectral projection and a small residual CNN.

mod attention;
mod checkpoint;
mod grad;
mod layers;
mod network;
mod params;

pub use attention::{se_excite, se_recalibrate, se_squeeze, se_squeeze_avg_only};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
};
pub use grad::{
    gradient, gradient_full, loss_value, ConstantLoss, EmbeddingLoss, GradientOutput,
    LinearProbeLoss, ParamNormLoss,
};
pub use layers::{Conv2d, FeatureMap, Linear};
pub use network::{
    attention_weights, embed, embed_batch, embed_batch_sequential, spectral_downsample,
};
pub use params::{
    BackboneParams, DownsampleParams, EmbeddingParams, ModelConfig, ResidualBlock, SEParams,
    SqueezeMode,
};
