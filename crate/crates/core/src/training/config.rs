//! Training configuration, early stopping, and history records.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SplitConfig;
use crate::error::{Error, Result};
use crate::tensor::RmspropConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Triplet,
    Contrastive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Raw,
    #[serde(alias = "otsu")]
    OtsuBinary,
}

/// How a pair is scored: negated embedding distance, or the similarity layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    Distance,
    Similarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityFitConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Same and different pairs drawn from the training split, each.
    pub pairs_per_kind: usize,
}

impl Default for SimilarityFitConfig {
    fn default() -> Self {
        SimilarityFitConfig {
            epochs: 200,
            learning_rate: 0.05,
            pairs_per_kind: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub margin: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stopping: bool,
    pub early_stop_patience: usize,
    pub rmsprop: RmspropConfig,
    /// Added to every conv/dense layer's own coefficient.
    pub l2_coefficient: f64,
    pub seed: u64,
    pub input_mode: InputMode,
    pub preset: String,
    /// Images are resized to `image_side × image_side` before the backbone.
    pub image_side: usize,
    /// Triplets (or pairs) drawn per epoch.
    pub samples_per_epoch: usize,
    /// Fixed validation triplets (or pairs).
    pub val_samples: usize,
    /// Upper bound on pairs drawn for any single purpose.
    pub pair_cap: usize,
    pub split: SplitConfig,
    pub score_mode: ScoreMode,
    pub similarity: SimilarityFitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_kind: LossKind::Triplet,
            margin: 1.0,
            batch_size: 32,
            max_epochs: 30,
            early_stopping: true,
            early_stop_patience: 5,
            rmsprop: RmspropConfig::default(),
            l2_coefficient: 0.0,
            seed: 42,
            input_mode: InputMode::Raw,
            preset: "roadscan_head".into(),
            image_side: 32,
            samples_per_epoch: 256,
            val_samples: 256,
            pair_cap: 100_000,
            split: SplitConfig::default(),
            score_mode: ScoreMode::Distance,
            similarity: SimilarityFitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad(format!("margin {} must be positive", self.margin));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if self.early_stopping && (self.early_stop_patience == 0 || self.early_stop_patience > self.max_epochs) {
            return bad(format!(
                "early_stop_patience {} must be in 1..={}",
                self.early_stop_patience, self.max_epochs
            ));
        }
        if !(self.l2_coefficient >= 0.0 && self.l2_coefficient.is_finite()) {
            return bad(format!("l2_coefficient {} must be nonnegative", self.l2_coefficient));
        }
        if self.image_side < 8 {
            return bad(format!("image_side {} must be at least 8", self.image_side));
        }
        if self.samples_per_epoch == 0 {
            return bad("samples_per_epoch must be positive".into());
        }
        self.rmsprop
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses JSON; syntax and type errors name the line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("column {}: {e}", e.column()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter over validation loss; only strict improvements reset it.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    waited: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            waited: 0,
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best || self.best_epoch == 0 {
            self.best = loss;
            self.best_epoch = epoch;
            self.waited = 0;
            return StopDecision::Improved;
        }
        self.waited += 1;
        if self.waited >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
        for r in &self.epochs {
            writeln!(out, "{},{},{},{:.3}", r.epoch, r.train_loss, r.val_loss, r.seconds)
                .expect("string write");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_defaults_and_errors() {
        let cfg = TrainConfig::from_json("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        let cfg = TrainConfig::from_json(
            r#"{"loss_kind": "contrastive", "margin": 2, "rmsprop": {"learning_rate": 0.01}, "input_mode": "otsu_binary"}"#,
        )
        .unwrap();
        assert_eq!(cfg.loss_kind, LossKind::Contrastive);
        assert_eq!(cfg.rmsprop.rho, 0.9);
        assert_eq!(cfg.input_mode, InputMode::OtsuBinary);

        match TrainConfig::from_json("{\n  \"margin\": 1,\n  \"batch_size\": \"x\"\n}") {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(TrainConfig::from_json(r#"{"bogus": 1}"#), Err(Error::Parse { .. })));
        assert!(matches!(TrainConfig::from_json(r#"{"margin": 0}"#), Err(Error::Config(_))));
        assert!(matches!(
            TrainConfig::from_json(r#"{"max_epochs": 3, "early_stop_patience": 4}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stopping_rule() {
        let mut es = EarlyStopping::new(1);
        assert_eq!(es.observe(1, 1.0), StopDecision::Improved);
        assert_eq!(es.observe(2, 2.0), StopDecision::Stop);
        assert_eq!(es.best_epoch(), 1);

        let mut es = EarlyStopping::new(2);
        es.observe(1, 1.0);
        assert_eq!(es.observe(2, 1.0), StopDecision::Continue);
        assert_eq!(es.observe(3, 0.5), StopDecision::Improved);
        assert_eq!(es.observe(4, 0.6), StopDecision::Continue);
        assert_eq!(es.observe(5, 0.7), StopDecision::Stop);
        assert_eq!((es.best_epoch(), es.best()), (3, 0.5));
    }

    #[test]
    fn history_csv() {
        let h = TrainHistory {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                seconds: 1.23456,
            }],
            stopped_epoch: 1,
            best_epoch: 1,
        };
        assert_eq!(h.to_csv(), "epoch,train_loss,val_loss,seconds\n1,0.5,0.25,1.235\n");
    }
}
