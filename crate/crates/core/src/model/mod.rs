//! Decoder-only vision-language model over a visual prefix of patch tokens.

mod config;
mod lora;
mod objective;
mod posenc;
mod sequence;
mod vlm;

pub use config::{AttentionMask, ModelConfig};
pub use lora::LoraAdapter;
pub use objective::{
    autoregressive_loss, autoregressive_loss_on, batch_loss, batch_loss_and_grads, total_loss,
    BatchLoss,
};
pub use posenc::PosEncodingGrid;
pub use sequence::{patchify, Sequence};
pub use vlm::{
    sparsify, Attention, Block, FeedForward, ForwardOutput, LayerNormParams, MoeTrace,
    VisionLanguageModel,
};
