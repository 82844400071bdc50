//! Model configuration.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Shape and behavior of the toy transformer.
///
/// `taa_layers` lists the layers whose attention is restricted by the
/// anchor mask (with per-head anchor positions when `use_mhpe` is set).
/// `laa_anchor_layer`, when present, designates the shallow layer whose KV
/// is appended inside every deeper `taa_layers` member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    pub anchor_token_id: u32,
    #[serde(default)]
    pub laa_anchor_layer: Option<usize>,
    #[serde(default)]
    pub taa_layers: BTreeSet<usize>,
    #[serde(default = "default_use_mhpe")]
    pub use_mhpe: bool,
    pub seed: u64,
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_use_mhpe() -> bool {
    true
}

impl ModelConfig {
    /// Plain causal model with no anchor machinery.
    pub fn dense(vocab_size: usize, d_model: usize, n_heads: usize, n_layers: usize, max_seq: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model,
            n_heads,
            n_layers,
            max_seq,
            rope_base: default_rope_base(),
            anchor_token_id: 0,
            laa_anchor_layer: None,
            taa_layers: BTreeSet::new(),
            use_mhpe: true,
            seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    /// Layers that consume the anchor layer's KV: members of `taa_layers`
    /// strictly deeper than `laa_anchor_layer`.
    pub fn laa_consumers(&self) -> Vec<usize> {
        match self.laa_anchor_layer {
            Some(al) => self.taa_layers.iter().copied().filter(|&l| l > al).collect(),
            None => Vec::new(),
        }
    }

    pub fn is_taa_layer(&self, layer: usize) -> bool {
        self.taa_layers.contains(&layer)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} is too small", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.max_seq == 0 {
            return fail("d_model, n_heads, n_layers and max_seq must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!(
                "head dimension {} must be even for rotary encoding",
                self.head_dim()
            ));
        }
        if !(self.rope_base > 0.0) {
            return fail(format!("rope_base {} must be positive", self.rope_base));
        }
        if self.anchor_token_id as usize >= self.vocab_size {
            return fail(format!(
                "anchor_token_id {} outside vocabulary of {}",
                self.anchor_token_id, self.vocab_size
            ));
        }
        if let Some(&worst) = self.taa_layers.iter().next_back() {
            if worst >= self.n_layers {
                return fail(format!(
                    "taa layer {worst} outside a {}-layer model",
                    self.n_layers
                ));
            }
        }
        if let Some(al) = self.laa_anchor_layer {
            if al >= self.n_layers {
                return fail(format!(
                    "laa_anchor_layer {al} outside a {}-layer model",
                    self.n_layers
                ));
            }
            if self.laa_consumers().is_empty() {
                return fail(format!(
                    "laa_anchor_layer {al} has no deeper taa layer to feed"
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<ModelConfig> {
        let cfg: ModelConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anchored_config() -> ModelConfig {
        let mut cfg = ModelConfig::dense(64, 32, 4, 4, 256, 1);
        cfg.taa_layers = [2, 3].into_iter().collect();
        cfg.laa_anchor_layer = Some(1);
        cfg
    }

    #[test]
    fn valid_configs_pass() {
        ModelConfig::dense(64, 32, 4, 2, 128, 0).validate().unwrap();
        anchored_config().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig::dense(64, 30, 4, 2, 128, 0);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_odd_head_dim() {
        let cfg = ModelConfig::dense(64, 12, 4, 2, 128, 0);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_anchor_token_outside_vocab() {
        let mut cfg = ModelConfig::dense(64, 32, 4, 2, 128, 0);
        cfg.anchor_token_id = 64;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_taa_layer_out_of_range() {
        let mut cfg = ModelConfig::dense(64, 32, 4, 2, 128, 0);
        cfg.taa_layers = [5].into_iter().collect();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_anchor_layer_without_consumers() {
        let mut cfg = ModelConfig::dense(64, 32, 4, 4, 128, 0);
        cfg.laa_anchor_layer = Some(3);
        cfg.taa_layers = [1, 2].into_iter().collect();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn consumers_are_the_deeper_taa_layers() {
        let mut cfg = ModelConfig::dense(64, 32, 4, 8, 128, 0);
        cfg.taa_layers = [1, 3, 5, 7].into_iter().collect();
        cfg.laa_anchor_layer = Some(3);
        assert_eq!(cfg.laa_consumers(), vec![5, 7]);
    }

    #[test]
    fn json_round_trip_preserves_fields() {
        let cfg = anchored_config();
        let json = cfg.to_json().unwrap();
        assert!(json.contains("\"taa_layers\""));
        assert!(json.contains("\"laa_anchor_layer\""));
        let back = ModelConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn json_rejects_invalid_shapes() {
        let mut cfg = ModelConfig::dense(64, 30, 4, 2, 128, 0);
        cfg.taa_layers = BTreeSet::new();
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(ModelConfig::from_json(&json).is_err());
    }
}
