//! The three-stage tuning procedure.
//!
//! 1. **Align** ([`Session::stage1_align`]): only the projector trains. The
//!    LLM sees `H_I` followed by an empty prompt and learns, through the
//!    projector alone, to read out the profile description.
//! 2. **Instruct** ([`Session::stage2_instruct`]): projector and base LLM are
//!    frozen; LoRA or MoLE adapters learn `(i, q, a)` triples with the loss on
//!    answer tokens only. Regularizer batches are mixed in.
//! 3. **DPO** ([`Session::stage3_dpo`]): the adapters continue under the
//!    preference loss against a frozen snapshot of the stage-2 policy.
//!
//! A real backbone arrives pretrained on text. The toy LLM gets the same
//! head start from [`pretrain_llm`], a text-only language-model pass over
//! the corpus that runs once, before stage 1, and leaves the LLM frozen.
//!
//! After every stage the digests of frozen groups are compared with their
//! values before the stage; any difference is an error.

mod checkpoint;
mod dpo;
mod manifest;
mod optimizer;
mod pretrain;
mod session;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use dpo::{
    dpo_loss, dpo_loss_with_reference, dpo_pair, dpo_pair_loss, log_prob, reference_log_probs,
    sequence_log_prob, DpoLoss, DpoTerm,
};
pub use manifest::{RunManifest, StageSummary};
pub use optimizer::{Optimizer, OptimizerConfig, OptimizerKind};
pub use pretrain::{pretrain_llm, pretraining_text, text_ce, PretrainConfig, TextPair};
pub use session::{
    answer_ce, frozen_groups, group_digests, per_token_ce, preference_accuracy, EpochSummary,
    GroupDigests, Outcome, Progress, ReferenceState, RunOptions, Session, StageRecord,
};

use crate::adapters::AdapterPlan;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Align,
    Instruct,
    Dpo,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Align, Stage::Instruct, Stage::Dpo];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Align => "align",
            Stage::Instruct => "instruct",
            Stage::Dpo => "dpo",
        }
    }

    pub fn previous(self) -> Option<Stage> {
        match self {
            Stage::Align => None,
            Stage::Instruct => Some(Stage::Align),
            Stage::Dpo => Some(Stage::Instruct),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Adapters to attach when the model has none yet (stages 2 and 3).
    pub adapter: Option<AdapterPlan>,
    pub dpo_beta: f64,
    /// Probability that a batch comes from the regularizer stream.
    pub mix_ratio: f64,
    /// Stage 3 only: replace the stage-2 adapters with fresh ones.
    pub reset_adapters: bool,
    pub seed: u64,
}

impl StageConfig {
    /// Epoch counts and batch sizes used for the full-size models.
    pub fn paper(stage: Stage) -> Self {
        let (epochs, batch_size) = match stage {
            Stage::Align => (1, 128),
            Stage::Instruct => (3, 64),
            Stage::Dpo => (1, 32),
        };
        Self {
            epochs,
            batch_size,
            ..Self::toy(stage)
        }
    }

    /// Desk-scale defaults, sized so the toy corpus can be memorized.
    pub fn toy(stage: Stage) -> Self {
        let (epochs, batch_size, lr) = match stage {
            Stage::Align => (4, 8, 3e-3),
            Stage::Instruct => (40, 8, 3e-3),
            Stage::Dpo => (6, 8, 1e-3),
        };
        Self {
            stage,
            epochs,
            batch_size,
            optimizer: OptimizerConfig::adamw(lr),
            adapter: None,
            dpo_beta: 0.1,
            mix_ratio: if stage == Stage::Instruct { 0.1 } else { 0.0 },
            reset_adapters: false,
            seed: 0,
        }
    }

    pub fn with_adapter(mut self, plan: AdapterPlan) -> Self {
        self.adapter = Some(plan);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub(crate) fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Config(format!(
                "config is for stage {} but stage {stage} was run",
                self.stage
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.mix_ratio) {
            return Err(Error::Config(format!(
                "mix_ratio {} is outside [0, 1)",
                self.mix_ratio
            )));
        }
        if !(self.dpo_beta > 0.0) {
            return Err(Error::Config(format!(
                "dpo_beta {} must be positive",
                self.dpo_beta
            )));
        }
        if let Some(plan) = &self.adapter {
            plan.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests;
