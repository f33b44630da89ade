//! Flat JSON training configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ObjectiveConfig};
use crate::objective::{mining_registry, FusionWeights, LossWeights};
use crate::treeenc::cell_registry;
use crate::vocab::{CategoryDicts, WordVocab};

/// Environment variable that overrides `seed` from the config file.
pub const SEED_ENV: &str = "SMFEA_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Precision::Single),
            "double" => Ok(Precision::Double),
            other => Err(Error::Config(format!("precision must be single or double, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub beta_d: f64,
    pub beta_t: f64,
    pub beta_c: f64,
    pub cell_variant: String,
    pub negatives: String,
    pub seed: u64,
    pub precision: Precision,
    pub w_rank: f64,
    pub w_ce: f64,
    pub w_kl: f64,
    pub val_fraction: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub d_word: usize,
    pub d_v: usize,
    pub d_node: usize,
    pub temperature: f64,
    pub tied_gru: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            lr_decay: 0.1,
            decay_every: 25,
            max_epochs: 50,
            batch_size: 16,
            margin: 0.2,
            beta_d: 0.6,
            beta_t: 0.4,
            beta_c: 0.0,
            cell_variant: "paper".into(),
            negatives: "sum".into(),
            seed: 1,
            precision: Precision::Single,
            w_rank: 1.0,
            w_ce: 1.0,
            w_kl: 1.0,
            val_fraction: 0.1,
            grad_clip: None,
            d_word: 32,
            d_v: 128,
            d_node: 128,
            temperature: 1.0,
            tied_gru: false,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Apply `SMFEA_SEED` if it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                self.seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?;
                Ok(())
            }
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
        }
    }

    pub fn fusion(&self) -> FusionWeights {
        FusionWeights {
            beta_d: self.beta_d,
            beta_t: self.beta_t,
            beta_c: self.beta_c,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            rank: self.w_rank,
            ce: self.w_ce,
            kl: self.w_kl,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            margin: self.margin,
            fusion: self.fusion(),
            negatives: self.negatives.clone(),
            weights: self.loss_weights(),
        }
    }

    pub fn model_config(&self, d_region: usize, vocab: &WordVocab, dicts: &CategoryDicts) -> ModelConfig {
        ModelConfig {
            d_region,
            d_word: self.d_word,
            d_v: self.d_v,
            d_node: self.d_node,
            vocab_size: vocab.size(),
            n_fragments: dicts.n_fragments(),
            n_relations: dicts.n_relations(),
            temperature: self.temperature,
            cell_variant: self.cell_variant.clone(),
            tied_gru: self.tied_gru,
        }
    }

    /// `lr · lr_decay^⌊(epoch − 1) / decay_every⌋` for 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = (epoch.max(1) - 1) / self.decay_every;
        self.lr * self.lr_decay.powi(drops as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.decay_every == 0 {
            return bad("decay_every must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return bad(format!("margin must be nonnegative, got {}", self.margin));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        for (name, w) in [("w_rank", self.w_rank), ("w_ce", self.w_ce), ("w_kl", self.w_kl)] {
            if !(w.is_finite() && w >= 0.0) {
                return bad(format!("{name} must be nonnegative, got {w}"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        let fusion = self.fusion();
        fusion.validate()?;
        if fusion.beta_c > 0.0 {
            return bad(format!("beta_c = {} needs a concept embedding, which this model does not produce", fusion.beta_c));
        }
        for (name, v) in [("d_word", self.d_word), ("d_v", self.d_v), ("d_node", self.d_node)] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        cell_registry::<f64>().check(&self.cell_variant)?;
        mining_registry().check(&self.negatives)?;
        Ok(())
    }
}
