use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruning::{stage_keep_count, ClassSlot, PredictorInput};

/// Architecture and pruning settings. JSON field names match the struct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_state: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    #[serde(default)]
    pub class_token_position: ClassSlot,
    pub prune_layers: Vec<usize>,
    pub token_ratio: f64,
    pub block_ratio: f64,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    /// Rank of the timescale projection; `⌈D/16⌉` when absent.
    #[serde(default)]
    pub dt_rank: Option<usize>,
    #[serde(default = "default_tau")]
    pub gumbel_tau: f64,
    #[serde(default = "default_threshold")]
    pub gate_threshold: f64,
    #[serde(default)]
    pub predictor_input: PredictorInput,
}

fn default_name() -> String {
    "custom".into()
}
fn default_in_channels() -> usize {
    3
}
fn default_num_classes() -> usize {
    1000
}
fn default_tau() -> f64 {
    1.0
}
fn default_threshold() -> f64 {
    0.5
}

pub const PRESETS: [&str; 4] = ["vim-t", "vim-s", "vim-b", "desk"];

impl ModelConfig {
    /// Named architecture. The ratios are the pruned operating point of each
    /// size; use [`ModelConfig::with_ratios`] to change them.
    pub fn preset(name: &str) -> Result<Self> {
        let full = |dim: usize, token_ratio: f64, block_ratio: f64| ModelConfig {
            name: name.to_string(),
            image_size: 224,
            patch_size: 16,
            embed_dim: dim,
            n_layers: 24,
            n_state: 16,
            expand: 2,
            conv_kernel: 4,
            class_token_position: ClassSlot::Middle,
            prune_layers: vec![6, 12, 18],
            token_ratio,
            block_ratio,
            in_channels: 3,
            num_classes: 1000,
            dt_rank: None,
            gumbel_tau: default_tau(),
            gate_threshold: default_threshold(),
            predictor_input: PredictorInput::Tokens,
        };
        match name {
            "vim-t" => Ok(full(192, 0.9, 0.8)),
            "vim-s" => Ok(full(384, 0.7, 0.8)),
            "vim-b" => Ok(full(768, 0.7, 0.7)),
            "desk" => Ok(ModelConfig {
                image_size: 32,
                patch_size: 4,
                embed_dim: 64,
                n_layers: 6,
                n_state: 8,
                prune_layers: vec![2, 4],
                num_classes: 10,
                ..full(64, 0.7, 0.8)
            }),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn with_ratios(mut self, token_ratio: f64, block_ratio: f64) -> Result<Self> {
        self.token_ratio = token_ratio;
        self.block_ratio = block_ratio;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        for (field, v) in [
            ("embed_dim", self.embed_dim),
            ("n_layers", self.n_layers),
            ("n_state", self.n_state),
            ("expand", self.expand),
            ("conv_kernel", self.conv_kernel),
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
            ("dt_rank", self.dt_rank()),
        ] {
            if v == 0 {
                return fail(format!("{field} must be positive"));
            }
        }
        if self.embed_dim < 2 {
            return fail("embed_dim must be at least 2".into());
        }
        if !self.prune_layers.windows(2).all(|w| w[0] < w[1]) {
            return fail("prune_layers must be strictly increasing".into());
        }
        if self.prune_layers.iter().any(|&l| l >= self.n_layers) {
            return fail("prune_layers must be below n_layers".into());
        }
        if !(self.token_ratio > 0.0 && self.token_ratio <= 1.0) {
            return fail(format!("token_ratio {} outside (0, 1]", self.token_ratio));
        }
        if !(0.0..=1.0).contains(&self.block_ratio) {
            return fail(format!("block_ratio {} outside [0, 1]", self.block_ratio));
        }
        if !(self.gumbel_tau > 0.0 && self.gumbel_tau.is_finite()) {
            return fail("gumbel_tau must be positive".into());
        }
        if !(self.gate_threshold > 0.0 && self.gate_threshold < 1.0) {
            return fail("gate_threshold outside (0, 1)".into());
        }
        if self.prunes() && stage_keep_count(self.token_ratio, self.n_stages(), self.num_patches()) == 0 {
            return fail("token_ratio schedule keeps no tokens at the last stage".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patches plus the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn inner_dim(&self) -> usize {
        self.expand * self.embed_dim
    }

    pub fn dt_rank(&self) -> usize {
        self.dt_rank.unwrap_or(self.embed_dim.div_ceil(16))
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn predictor_hidden(&self) -> usize {
        self.embed_dim / 2
    }

    pub fn predictor_input_dim(&self) -> usize {
        match self.predictor_input {
            PredictorInput::Tokens => self.embed_dim,
            PredictorInput::Delta => self.inner_dim(),
            PredictorInput::BBar | PredictorInput::C => self.n_state,
        }
    }

    /// Original index of the class token.
    pub fn class_index(&self) -> usize {
        match self.class_token_position {
            ClassSlot::Middle => self.num_patches() / 2,
            ClassSlot::Front => 0,
        }
    }

    /// Token pruning is active.
    pub fn prunes(&self) -> bool {
        self.token_ratio < 1.0 && !self.prune_layers.is_empty()
    }

    /// Block selection is active.
    pub fn gates(&self) -> bool {
        self.block_ratio < 1.0
    }

    pub fn n_stages(&self) -> usize {
        self.prune_layers.len()
    }

    /// Non-class tokens retained after each stage.
    pub fn stage_schedule(&self) -> Vec<usize> {
        (1..=self.n_stages())
            .map(|s| {
                if self.prunes() {
                    stage_keep_count(self.token_ratio, s, self.num_patches())
                } else {
                    self.num_patches()
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            let cfg = ModelConfig::preset(name).unwrap();
            cfg.validate().unwrap();
        }
        assert!(ModelConfig::preset("vim-xl").is_err());
    }

    #[test]
    fn full_size_token_counts() {
        let cfg = ModelConfig::preset("vim-s").unwrap();
        assert_eq!(cfg.num_patches(), 196);
        assert_eq!(cfg.seq_len(), 197);
        assert_eq!(cfg.class_index(), 98);
        assert_eq!(cfg.stage_schedule(), [137, 96, 67]);
        assert_eq!(cfg.dt_rank(), 24);
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let cfg = ModelConfig::preset("desk").unwrap();
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ModelConfig::from_json_str(&s).unwrap(), cfg);
        let minimal = r#"{"image_size":8,"patch_size":2,"embed_dim":8,"n_layers":2,"n_state":4,
            "expand":2,"conv_kernel":3,"prune_layers":[1],"token_ratio":0.5,"block_ratio":1.0}"#;
        let cfg = ModelConfig::from_json_str(minimal).unwrap();
        assert_eq!(cfg.class_token_position, ClassSlot::Middle);
        assert_eq!(cfg.gumbel_tau, 1.0);
    }

    #[test]
    fn rejects_invalid_configs() {
        let base = ModelConfig::preset("desk").unwrap();
        let bad = [
            ModelConfig { patch_size: 5, ..base.clone() },
            ModelConfig { prune_layers: vec![4, 2], ..base.clone() },
            ModelConfig { prune_layers: vec![6], ..base.clone() },
            ModelConfig { token_ratio: 0.0, ..base.clone() },
            ModelConfig { block_ratio: 1.5, ..base.clone() },
            ModelConfig { token_ratio: 0.01, ..base.clone() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
