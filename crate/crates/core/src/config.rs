//! Experiment configuration: one JSON document with `model`, `task`, `train`, `budgets`
//! and `noise` sections. Unknown keys are rejected and errors name the offending field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::budget::BudgetSpec;
use crate::data::{TaskKind, TaskSpec};
use crate::error::{CctError, Result};
use crate::gate::NoiseSchedule;
use crate::model::{ModelConfig, ModelKind};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
    /// Defaults to the 36-entry cross product for seq2seq models and six scalar budgets
    /// for encoder-only ones.
    pub budgets: Option<BudgetSpec>,
    pub noise: NoiseSchedule,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." || path.is_empty() { "<root>".to_string() } else { path };
            CctError::config(field, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CctError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn budgets(&self) -> BudgetSpec {
        match (&self.budgets, self.model.kind) {
            (Some(b), _) => b.clone(),
            (None, ModelKind::Seq2seq) => BudgetSpec::translation_default(),
            (None, ModelKind::Mlm) => BudgetSpec::mlm_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        self.noise.validate()?;
        let budgets = self.budgets();
        budgets.validate()?;
        let components = match self.model.kind {
            ModelKind::Seq2seq => 2,
            ModelKind::Mlm => 1,
        };
        if budgets.arity() != components {
            return Err(CctError::config(
                "budgets",
                format!("entries need {components} fractions for a {:?} model", self.model.kind),
            ));
        }
        if (self.task.kind == TaskKind::Mlm) != (self.model.kind == ModelKind::Mlm) {
            return Err(CctError::config("task.kind", "does not match model.kind"));
        }
        if self.task.vocab > self.model.vocab {
            return Err(CctError::config("task.vocab", "exceeds model.vocab"));
        }
        if self.task.max_seq_len() > self.model.max_len {
            return Err(CctError::config("task.max_len", "sequences would exceed model.max_len"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(text: &str) -> String {
        match ExperimentConfig::from_json(text) {
            Err(CctError::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_document_takes_defaults() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg.budgets().len(), 36);
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of(r#"{"model": {"dd": 3}}"#), "model.dd");
        assert_eq!(field_of(r#"{"model": {"d": "x"}}"#), "model.d");
        assert_eq!(field_of(r#"{"model": {"d": 10, "heads": 4}}"#), "model.heads");
        assert_eq!(field_of(r#"{"train": {"warmup_steps": 0}}"#), "train.warmup_steps");
        assert_eq!(field_of(r#"{"budgets": [[1.0]]}"#), "budgets");
    }
}
