//! TOML experiment configuration.
//!
//! ```toml
//! [data]        # SynthSpec fields
//! train_speakers = 50
//!
//! [model]
//! hidden = 64
//! dim = 64
//! input_norm = "none"      # or "mvn"
//!
//! [objective]
//! name = "am_softmax"
//! margin = 0.2
//! scale = 30.0
//!
//! [train]
//! epochs = 20
//! repeats = 3
//!
//! [eval]
//! crop_len = 20
//!
//! [[sweep.grid]]
//! objective = "am_softmax"
//! margins = [0.1, 0.2]
//! scales = [15.0, 30.0]
//! ```
//!
//! Every section is optional and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::objective::{ObjectiveConfig, Registry};
use crate::synth::SynthSpec;
use crate::trainer::{ModelConfig, SweepCell, TrainRunConfig, TrainSettings};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: SynthSpec,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainSettings,
    pub eval: EvalConfig,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub grid: Vec<GridEntry>,
}

/// Cartesian product over the listed values; an empty list keeps the default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridEntry {
    pub objective: String,
    pub margins: Vec<f64>,
    pub scales: Vec<f64>,
    pub utterances: Vec<usize>,
    pub speakers_per_batch: Vec<usize>,
    pub curriculum: Vec<bool>,
}

fn or_default<T: Clone>(values: &[T]) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().cloned().map(Some).collect()
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.model.hidden == 0 || self.model.dim == 0 {
            return Err(Error::Config("model.hidden and model.dim must be >= 1".into()));
        }
        let registry = Registry::builtin();
        registry.build(&self.objective)?;
        for cell in self.sweep_cells()? {
            registry.build(&cell.config.objective)?;
            cell.config.train.validate()?;
        }
        Ok(())
    }

    /// The single run described by `[objective]`, `[model]` and `[train]`.
    pub fn run_config(&self) -> TrainRunConfig {
        TrainRunConfig {
            objective: self.objective.clone(),
            model: self.model,
            train: self.train,
        }
    }

    /// Expands `[[sweep.grid]]`; without a grid, the single `[objective]` run.
    pub fn sweep_cells(&self) -> Result<Vec<SweepCell>> {
        let registry = Registry::builtin();
        if self.sweep.grid.is_empty() {
            let cfg = self.run_config();
            let hyperparameters = registry.build(&cfg.objective)?.describe();
            return Ok(vec![SweepCell {
                config: cfg,
                hyperparameters,
            }]);
        }
        let mut cells = Vec::new();
        for entry in &self.sweep.grid {
            if !registry.contains(&entry.objective) {
                return Err(Error::Config(format!("unknown objective `{}` in sweep grid", entry.objective)));
            }
            for &margin in &or_default(&entry.margins) {
                for &scale in &or_default(&entry.scales) {
                    for &utterances in &or_default(&entry.utterances) {
                        for &curriculum in &or_default(&entry.curriculum) {
                            for &n in &or_default(&entry.speakers_per_batch) {
                                let objective = ObjectiveConfig {
                                    name: entry.objective.clone(),
                                    margin,
                                    scale,
                                    utterances,
                                    curriculum: curriculum.unwrap_or(false),
                                    ..self.objective.clone()
                                };
                                let mut train = self.train;
                                if let Some(n) = n {
                                    train.speakers_per_batch = n;
                                }
                                let mut hyperparameters = registry.build(&objective)?.describe();
                                if n.is_some() {
                                    hyperparameters.push_str(&format!(" N={}", train.speakers_per_batch));
                                }
                                cells.push(SweepCell {
                                    config: TrainRunConfig {
                                        objective,
                                        model: self.model,
                                        train,
                                    },
                                    hyperparameters,
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(cells)
    }

    /// Keeps only sweep cells (or the single run) for `objective`.
    pub fn filter_objective(cells: Vec<SweepCell>, objective: Option<&str>) -> Vec<SweepCell> {
        match objective {
            None => cells,
            Some(name) => cells.into_iter().filter(|c| c.config.objective.name == name).collect(),
        }
    }
}
