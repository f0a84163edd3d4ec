use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::session::StageRecord;
use super::Stage;
use crate::error::Result;
use crate::io;

/// Condensed view of one completed stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub adapter_mode: Option<String>,
    pub experts: Option<usize>,
    pub final_loss: Option<f64>,
    pub data_digest: String,
    pub frozen_groups_unchanged: bool,
}

impl From<&StageRecord> for StageSummary {
    fn from(r: &StageRecord) -> Self {
        let plan = r.config.adapter.as_ref();
        Self {
            stage: r.stage,
            epochs: r.config.epochs,
            batch_size: r.config.batch_size,
            learning_rate: r.config.optimizer.learning_rate,
            seed: r.config.seed,
            adapter_mode: plan.map(|p| p.mode.to_string()),
            experts: plan
                .filter(|p| p.mode == crate::adapters::AdapterMode::Mole)
                .map(|p| p.experts),
            final_loss: r.final_loss(),
            data_digest: r.data_digest.clone(),
            frozen_groups_unchanged: r.freeze_violations().is_empty(),
        }
    }
}

/// Reproducibility record written next to every run's outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    /// The fully resolved configuration of the run.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub dataset_digests: BTreeMap<String, String>,
    pub stages: Vec<StageSummary>,
    pub metrics: BTreeMap<String, f64>,
    pub checkpoint_digest: Option<String>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: serde_json::Value) -> Self {
        Self {
            tool: format!("uvlm {}", env!("CARGO_PKG_VERSION")),
            command: command.into(),
            config,
            ..Self::default()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }
}
