//! The single run configuration file. Every field has a default; sections
//! mirror the module configs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::DatasetConfig;
use crate::detect::SkinToneDetector;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::nets::NetConfig;
use crate::training::TrainConfig;

/// Environment variable that may override the output directory. It is the
/// only setting read from the environment.
pub const OUT_DIR_ENV: &str = "ANONET_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnonymizerConfig {
    /// Face-to-crop area ratio that stops re-detection.
    pub r_thr: f64,
    pub max_refine_iters: usize,
    /// Checkpoint directory; defaults to the latest one under `<out>/checkpoints`.
    pub checkpoint: Option<PathBuf>,
    pub detector: SkinToneDetector,
    /// Copy frames through unchanged instead of anonymizing.
    pub passthrough: bool,
}

impl Default for AnonymizerConfig {
    fn default() -> Self {
        Self {
            r_thr: 0.6,
            max_refine_iters: 4,
            checkpoint: None,
            detector: SkinToneDetector::default(),
            passthrough: false,
        }
    }
}

impl AnonymizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_thr > 0.0 && self.r_thr <= 1.0) {
            return Err(Error::Config(format!(
                "r_thr {} must lie in (0, 1]",
                self.r_thr
            )));
        }
        if self.max_refine_iters == 0 {
            return Err(Error::Config("max_refine_iters must be at least 1".into()));
        }
        if self.detector.grid < 2 {
            return Err(Error::Config("detector grid must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub embedding_dim: usize,
    pub contrastive_margin: f64,
    pub width: usize,
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub learning_rate: f64,
    /// Embedding checkpoint; defaults to `<out>/embedding.safetensors`.
    pub checkpoint: Option<PathBuf>,
    /// Named test sets (directories of prepared samples); defaults to the
    /// held-out split.
    pub datasets: Vec<NamedSet>,
    /// Pairs per criterion.
    pub criterion_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedSet {
    pub name: String,
    pub path: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 128,
            contrastive_margin: 2.0,
            width: 16,
            epochs: 10,
            pairs_per_epoch: 256,
            learning_rate: 1e-3,
            checkpoint: None,
            datasets: Vec::new(),
            criterion_pairs: 200,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.width == 0 {
            return Err(Error::Config(
                "embedding_dim and width must be positive".into(),
            ));
        }
        if !(self.contrastive_margin > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config(
                "contrastive_margin and learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub anonymizer: AnonymizerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            net: NetConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            anonymizer: AnonymizerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.net.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.anonymizer.validate()?;
        self.eval.validate()?;
        if !self.loss.margins.is_empty() && self.loss.margins.len() != self.net.vgg_widths.len() {
            return Err(Error::Config(format!(
                "{} margins given for {} perceptual layers",
                self.loss.margins.len(),
                self.net.vgg_widths.len()
            )));
        }
        Ok(())
    }

    /// Directory of the prepared dataset.
    pub fn prepared_dir(&self) -> PathBuf {
        self.dataset
            .prepared
            .clone()
            .unwrap_or_else(|| self.output_dir.join("prepared"))
    }

    pub fn checkpoint_root(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    /// Hash of everything that determines the trained parameters, except
    /// how far the run goes (`epochs`, `max_steps`) and checkpoint cadence.
    pub fn model_hash(&self) -> String {
        let train = TrainConfig {
            epochs: 0,
            max_steps: None,
            checkpoint_every: 0,
            ..self.train.clone()
        };
        let key = serde_json::json!({
            "seed": self.seed,
            "net": self.net,
            "loss": self.loss,
            "train": train,
        });
        hex::encode(Sha256::digest(key.to_string().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn sections_override_defaults() {
        let c = RunConfig::from_toml("seed = 7\n[train]\nepochs = 3\n[anonymizer]\nr_thr = 0.5\n")
            .unwrap();
        assert_eq!((c.seed, c.train.epochs, c.anonymizer.r_thr), (7, 3, 0.5));
        assert_eq!(c.train.batch_size, 1);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml("sed = 1").is_err());
        assert!(RunConfig::from_toml("[anonymizer]\nmax_refine_iters = 0").is_err());
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 0.0").is_err());
    }

    #[test]
    fn hash_ignores_run_length() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.epochs = 99;
        b.train.max_steps = Some(3);
        assert_eq!(a.model_hash(), b.model_hash());
        b.loss.lambda_s = 1.0;
        assert_ne!(a.model_hash(), b.model_hash());
    }
}
