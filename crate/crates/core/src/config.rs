use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the toy denoiser.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Latent channels (the encoder is the identity, so these are RGB).
    pub channels: usize,
    pub num_blocks: usize,
    pub d_model: usize,
    /// FFN hidden width, shared by every block.
    pub d_ffn: usize,
    pub heads: usize,
    pub d_text: usize,
    pub vocab: usize,
    /// Tokens per prompt; shorter prompts are padded.
    pub text_len: usize,
    /// Diffusion steps `T`.
    pub timesteps: usize,
    /// Width of the convolutional stem that feeds the patch embedding.
    pub stem_channels: usize,
    pub patch_size: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 24,
            channels: 3,
            num_blocks: 6,
            d_model: 96,
            d_ffn: 384,
            heads: 4,
            d_text: 64,
            vocab: 64,
            text_len: 8,
            timesteps: 200,
            stem_channels: 16,
            patch_size: 4,
        }
    }
}

impl DenoiserConfig {
    /// A small configuration for fast tests and gradient checks.
    pub fn tiny() -> Self {
        DenoiserConfig {
            image_size: 8,
            channels: 3,
            num_blocks: 2,
            d_model: 16,
            d_ffn: 32,
            heads: 2,
            d_text: 8,
            vocab: 64,
            text_len: 6,
            timesteps: 20,
            stem_channels: 4,
            patch_size: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.d_ffn < 1 {
            return fail("d_ffn must be at least 1".into());
        }
        if self.timesteps < 2 {
            return fail(format!("timesteps must be at least 2, got {}", self.timesteps));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.d_model.is_multiple_of(2) {
            return fail("d_model must be even for the sinusoidal timestep embedding".into());
        }
        for (name, v) in [
            ("channels", self.channels),
            ("num_blocks", self.num_blocks),
            ("d_text", self.d_text),
            ("vocab", self.vocab),
            ("text_len", self.text_len),
            ("stem_channels", self.stem_channels),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.vocab < crate::data::vocab::MIN_VOCAB {
            return fail(format!(
                "vocab {} smaller than the built-in token set ({})",
                self.vocab,
                crate::data::vocab::MIN_VOCAB
            ));
        }
        Ok(())
    }

    pub fn tokens_per_image(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.stem_channels * self.patch_size * self.patch_size
    }
}

/// Expert layout used when upcycling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoEConfig {
    /// Expert count `N`.
    pub experts: usize,
    /// Keep only the `k` largest routing weights.
    pub top_k: Option<usize>,
    pub d_task: usize,
    /// Expert width `d_ffn / N`, so total expert parameters match the dense FFN.
    /// When off, experts are `d_ffn / top_k` wide and only `top_k` are active.
    pub iso_parameter: bool,
}

impl Default for MoEConfig {
    fn default() -> Self {
        MoEConfig { experts: 4, top_k: None, d_task: 16, iso_parameter: true }
    }
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Err(Error::Config("expert count must be at least 1".into()));
        }
        if self.d_task == 0 {
            return Err(Error::Config("d_task must be positive".into()));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > self.experts {
                return Err(Error::Config(format!(
                    "top_k {k} outside [1, {}]",
                    self.experts
                )));
            }
        }
        if !self.iso_parameter && self.top_k.is_none() {
            return Err(Error::Config("non-iso-parameter layouts need top_k".into()));
        }
        Ok(())
    }

    /// Router hidden width.
    pub fn router_hidden(&self) -> usize {
        2 * self.d_task
    }

    /// Number of ways the dense FFN is split when initializing experts.
    pub fn shards(&self) -> usize {
        if self.iso_parameter {
            self.experts
        } else {
            self.top_k.unwrap_or(self.experts)
        }
    }

    /// Per-expert hidden width for a dense FFN of width `d_ffn`.
    pub fn expert_width(&self, d_ffn: usize) -> Result<usize> {
        let shards = self.shards();
        if !d_ffn.is_multiple_of(shards) {
            return Err(Error::Divisibility { what: "d_ffn", value: d_ffn, expected: shards });
        }
        Ok(d_ffn / shards)
    }

    /// `d_ffn / d_expert`.
    pub fn granularity(&self, d_ffn: usize) -> Result<usize> {
        Ok(d_ffn / self.expert_width(d_ffn)?)
    }

    /// Number of experts with nonzero weight for any task.
    pub fn active_experts(&self) -> usize {
        self.top_k.unwrap_or(self.experts).min(self.experts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        DenoiserConfig::default().validate().unwrap();
        DenoiserConfig::tiny().validate().unwrap();
        MoEConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut c = DenoiserConfig { heads: 5, ..Default::default() };
        assert!(c.validate().is_err());
        c = DenoiserConfig { timesteps: 1, ..Default::default() };
        assert!(c.validate().is_err());
        c = DenoiserConfig { patch_size: 5, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn granularity_equals_expert_count_in_iso_mode() {
        let cfg = MoEConfig { experts: 4, ..Default::default() };
        assert_eq!(cfg.expert_width(384).unwrap(), 96);
        assert_eq!(cfg.granularity(384).unwrap(), 4);
        let err = MoEConfig { experts: 5, ..Default::default() }.expert_width(384).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('5') && msg.contains("384"), "{msg}");
    }

    #[test]
    fn top_k_bounds() {
        assert!(MoEConfig { top_k: Some(5), ..Default::default() }.validate().is_err());
        assert!(MoEConfig { top_k: Some(0), ..Default::default() }.validate().is_err());
        assert!(MoEConfig { top_k: Some(4), ..Default::default() }.validate().is_ok());
    }
}
