//! Training configuration, read from TOML or JSON.
//!
//! Every field has a default, so a config file only needs the keys it
//! changes. Unknown keys are rejected to catch typos.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cpa::CpaConfig;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::induction::InductionConfig;
use crate::lm::LmConfig;
use crate::ops::check_rate;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    /// SGD that switches to iterate averaging once validation stalls.
    #[default]
    Asgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// Generate a toy corpus of roughly this many training tokens instead of
    /// reading files (validation and test get a tenth each).
    pub synthetic_tokens: Option<usize>,
    pub out_dir: PathBuf,
    pub seed: u64,

    pub epochs: usize,
    /// Extra epochs of averaged SGD after the main schedule.
    pub finetune_epochs: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub optimizer: Optimizer,
    pub asgd_window: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub bptt: usize,

    pub dropout_input: f64,
    pub dropout_hidden: f64,
    pub dropout_output: f64,
    pub dropout_phrase: f64,
    pub variational_dropout: bool,
    pub weight_drop: f64,

    pub gamma: f64,
    pub negatives: usize,
    pub stop_grad_negatives: bool,
    pub temperature: f64,
    pub smoothing: f64,
    pub max_phrase_len: usize,

    pub layers: usize,
    /// Context layer; defaults to `layers - 1` when absent.
    pub context_layer: Option<usize>,
    pub emb_dim: usize,
    pub hidden: usize,
    pub vocab_cap: Option<usize>,
    pub height_window: usize,
    /// Defaults to `emb_dim`.
    pub height_hidden: Option<usize>,
    pub height_depth: usize,
    pub separate_height_embedding: bool,

    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            train_path: None,
            valid_path: None,
            test_path: None,
            synthetic_tokens: None,
            out_dir: PathBuf::from("runs/default"),
            seed: 1,
            epochs: 40,
            finetune_epochs: 0,
            lr: 30.0,
            clip_norm: 0.25,
            optimizer: Optimizer::Asgd,
            asgd_window: 5,
            batch_size: 20,
            eval_batch_size: 10,
            bptt: 70,
            dropout_input: 0.4,
            dropout_hidden: 0.25,
            dropout_output: 0.4,
            dropout_phrase: 0.1,
            variational_dropout: false,
            weight_drop: 0.0,
            gamma: 0.5,
            negatives: 1,
            stop_grad_negatives: false,
            temperature: 10.0,
            smoothing: 1.0,
            max_phrase_len: 20,
            layers: 3,
            context_layer: None,
            emb_dim: 100,
            hidden: 256,
            vocab_cap: None,
            height_window: 4,
            height_hidden: None,
            height_depth: 1,
            separate_height_embedding: false,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    /// Reads a `.json` file as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn context_layer(&self) -> usize {
        self.context_layer.unwrap_or(self.layers.saturating_sub(1))
    }

    pub fn height_hidden(&self) -> usize {
        self.height_hidden.unwrap_or(self.emb_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.synthetic_tokens.is_none() && (self.train_path.is_none() || self.valid_path.is_none()) {
            return Err(Error::Config("set train_path and valid_path, or synthetic_tokens".into()));
        }
        self.validate_model()
    }

    /// Checks every setting except the corpus source.
    pub fn validate_model(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad(format!("clip_norm must be > 0, got {}", self.clip_norm));
        }
        for (name, r) in [
            ("dropout_input", self.dropout_input),
            ("dropout_hidden", self.dropout_hidden),
            ("dropout_output", self.dropout_output),
            ("dropout_phrase", self.dropout_phrase),
            ("weight_drop", self.weight_drop),
        ] {
            check_rate(r).map_err(|_| Error::Config(format!("{name} must lie in [0, 1), got {r}")))?;
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.bptt == 0 {
            return bad("batch sizes and bptt must be at least 1".into());
        }
        if self.asgd_window == 0 {
            return bad("asgd_window must be at least 1".into());
        }
        if self.height_depth == 0 || self.height_hidden() == 0 {
            return bad("height net needs depth and width of at least 1".into());
        }
        if self.vocab_cap.is_some_and(|c| c < 3) {
            return bad("vocab_cap must keep at least one word besides <unk> and <eos>".into());
        }
        self.cpa().validate()?;
        self.induction().validate()?;
        // vocabulary size is only known after reading the corpus
        LmConfig { vocab: 2, ..self.lm(2) }.validate()
    }

    pub fn lm(&self, vocab: usize) -> LmConfig {
        LmConfig {
            vocab,
            emb_dim: self.emb_dim,
            hidden: self.hidden,
            layers: self.layers,
            context_layer: self.context_layer(),
            dropout_input: self.dropout_input,
            dropout_hidden: self.dropout_hidden,
            dropout_output: self.dropout_output,
            variational: self.variational_dropout,
            weight_drop: self.weight_drop,
        }
    }

    pub fn cpa(&self) -> CpaConfig {
        CpaConfig { negatives: self.negatives, gamma: self.gamma, stop_grad_negatives: self.stop_grad_negatives }
    }

    pub fn induction(&self) -> InductionConfig {
        InductionConfig { temperature: self.temperature, smoothing: self.smoothing, max_len: self.max_phrase_len }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic() -> TrainConfig {
        TrainConfig { synthetic_tokens: Some(1000), ..Default::default() }
    }

    #[test]
    fn defaults_validate_with_a_corpus() {
        assert!(TrainConfig::default().validate().is_err());
        synthetic().validate().unwrap();
        assert_eq!(synthetic().context_layer(), 2);
        assert_eq!(synthetic().height_hidden(), 100);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for cfg in [
            TrainConfig { lr: 0.0, ..synthetic() },
            TrainConfig { clip_norm: -1.0, ..synthetic() },
            TrainConfig { dropout_hidden: 1.0, ..synthetic() },
            TrainConfig { negatives: 0, ..synthetic() },
            TrainConfig { gamma: -0.5, ..synthetic() },
            TrainConfig { temperature: 0.0, ..synthetic() },
            TrainConfig { context_layer: Some(3), ..synthetic() },
            TrainConfig { layers: 1, ..synthetic() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn toml_and_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("c.toml");
        std::fs::write(&toml_path, "synthetic_tokens = 500\nlr = 20.0\nexec = \"sequential\"\n").unwrap();
        let cfg = TrainConfig::load(&toml_path).unwrap();
        assert_eq!(cfg.lr, 20.0);
        assert_eq!(cfg.exec, Exec::Sequential);
        let json_path = dir.path().join("c.json");
        std::fs::write(&json_path, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(TrainConfig::load(&json_path).unwrap(), cfg);
        std::fs::write(&toml_path, "synthetic_tokens = 500\nlearning_rate = 1.0\n").unwrap();
        assert!(matches!(TrainConfig::load(&toml_path), Err(Error::Config(_))));
    }
}
