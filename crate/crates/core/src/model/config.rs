use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention mask over the visual-prefix + text sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMask {
    /// Every position attends to itself and earlier positions.
    Causal,
    /// Visual tokens attend to each other freely; text stays causal.
    #[serde(rename = "prefix")]
    PrefixBidirectional,
}

impl AttentionMask {
    pub fn name(self) -> &'static str {
        match self {
            AttentionMask::Causal => "causal",
            AttentionMask::PrefixBidirectional => "prefix",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(AttentionMask::Causal),
            "prefix" => Ok(AttentionMask::PrefixBidirectional),
            other => Err(Error::Config(format!("unknown attention mask `{other}`"))),
        }
    }
}

/// Full hyperparameter record of the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Model width `D`.
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
    /// Expert count `E` of each routed layer (1 for a dense model).
    pub experts: usize,
    pub top_k: usize,
    /// Every `moe_period`-th layer is routed.
    pub moe_period: usize,
    pub patch_size: usize,
    pub image_size: usize,
    /// Patch-embedding width `C`.
    pub channels: usize,
    /// Feed-forward inner width.
    pub ffn_width: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    /// Auxiliary-loss coefficient.
    pub alpha: f64,
    pub max_text_len: usize,
    pub ln_eps: f64,
    pub router_init_std: f64,
    pub attention: AttentionMask,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 4,
            heads: 4,
            vocab: 209,
            experts: 4,
            top_k: 2,
            moe_period: 2,
            patch_size: 4,
            image_size: 32,
            channels: 64,
            ffn_width: 256,
            lora_rank: 8,
            lora_scale: 1.0,
            alpha: 0.01,
            max_text_len: 48,
            ln_eps: 1e-5,
            router_init_std: 0.01,
            attention: AttentionMask::Causal,
        }
    }
}

impl ModelConfig {
    /// Side of the patch grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Visual token count `P`.
    pub fn visual_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Whether layer `i` (0-based) is a routed layer under `period`.
    pub fn is_moe_layer(i: usize, period: usize) -> bool {
        period >= 1 && (i + 1) % period == 0
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.grid() < 2 {
            return fail("patch grid must be at least 2x2".into());
        }
        if self.experts == 0 || self.top_k == 0 || self.top_k > self.experts {
            return fail(format!("top_k {} with {} experts", self.top_k, self.experts));
        }
        if self.moe_period == 0 {
            return fail("moe_period must be >= 1".into());
        }
        if self.layers == 0 || self.vocab == 0 || self.channels == 0 || self.ffn_width == 0 {
            return fail("layers, vocab, channels and ffn_width must be positive".into());
        }
        if self.lora_rank >= self.hidden {
            return fail(format!("lora_rank {} must be < hidden {}", self.lora_rank, self.hidden));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn visual_token_counts() {
        let at = |image_size, patch_size| ModelConfig {
            image_size,
            patch_size,
            ..ModelConfig::default()
        };
        assert_eq!(at(336, 14).visual_tokens(), 576);
        assert_eq!(at(504, 14).visual_tokens(), 1296);
        assert_eq!(at(32, 4).visual_tokens(), 64);
        assert_eq!(ModelConfig::default().visual_tokens(), 64);
    }

    #[test]
    fn moe_layer_rule() {
        let moe: Vec<usize> = (0..4).filter(|i| ModelConfig::is_moe_layer(*i, 2)).collect();
        assert_eq!(moe, vec![1, 3]);
        assert!((0..4).all(|i| ModelConfig::is_moe_layer(i, 1)));
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            heads: 5,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            top_k: 5,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            image_size: 30,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
