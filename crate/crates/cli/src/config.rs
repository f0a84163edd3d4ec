//! The run configuration file.
//!
//! Every key is optional and unknown keys are rejected. A complete file:
//!
//! ```toml
//! output_root = "runs"
//! paper_faithful = false
//!
//! [data]
//! seed = 0
//! noise = 0.1
//! paper_proportions = false
//! [data.sizes]
//! pt = 512
//! instruct = 512
//! dpo = 128
//! regularizer = 128
//!
//! [model]        # d_z, d_h, n_layers, n_heads, ffn_mult, max_seq, seed
//! [pretrain]     # epochs, batch_size, learning_rate, seed
//! [align]        # epochs, batch_size, learning_rate, seed
//! [instruct]     # ... plus mix_ratio
//! [dpo]          # ... plus beta, reset_adapters
//! [adapter]      # rank, alpha, experts
//! [eval]         # metrics, bias_threshold, require_dominance, max_new_tokens
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uvlm::adapters::{AdapterMode, AdapterPlan};
use uvlm::data::CorpusConfig;
use uvlm::eval::BiasRule;
use uvlm::model::ModelConfig;
use uvlm::pipeline::{PretrainConfig, Stage, StageConfig};

use crate::Usage;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_root: Option<PathBuf>,
    /// Published epoch counts, batch sizes and adapter rank.
    pub paper_faithful: bool,
    pub data: DataSection,
    pub model: ModelSection,
    pub pretrain: TrainSection,
    pub align: TrainSection,
    pub instruct: TrainSection,
    pub dpo: TrainSection,
    pub adapter: AdapterSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub seed: Option<u64>,
    pub noise: Option<f64>,
    pub paper_proportions: Option<bool>,
    pub sizes: SizesSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SizesSection {
    pub pt: Option<usize>,
    pub instruct: Option<usize>,
    pub dpo: Option<usize>,
    pub regularizer: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_z: Option<usize>,
    pub d_h: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub ffn_mult: Option<usize>,
    pub max_seq: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
    pub mix_ratio: Option<f64>,
    pub beta: Option<f64>,
    pub reset_adapters: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub rank: Option<usize>,
    pub alpha: Option<f64>,
    pub experts: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub metrics: Option<Vec<String>>,
    pub bias_threshold: Option<f64>,
    pub require_dominance: Option<bool>,
    pub max_new_tokens: Option<usize>,
}

fn set<T: Copy>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
        Ok(toml::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?)
    }

    pub fn corpus(&self) -> CorpusConfig {
        let mut c = CorpusConfig::default();
        let d = &self.data;
        set(&mut c.seed, d.seed);
        set(&mut c.noise, d.noise);
        set(&mut c.paper_proportions, d.paper_proportions);
        set(&mut c.sizes.pt, d.sizes.pt);
        set(&mut c.sizes.instruct, d.sizes.instruct);
        set(&mut c.sizes.dpo, d.sizes.dpo);
        set(&mut c.sizes.regularizer, d.sizes.regularizer);
        c
    }

    pub fn model(&self, vocab_size: usize) -> ModelConfig {
        let mut c = ModelConfig::toy(vocab_size);
        let m = &self.model;
        set(&mut c.d_z, m.d_z);
        set(&mut c.d_h, m.d_h);
        set(&mut c.n_layers, m.n_layers);
        set(&mut c.n_heads, m.n_heads);
        set(&mut c.ffn_mult, m.ffn_mult);
        set(&mut c.max_seq, m.max_seq);
        set(&mut c.seed, m.seed);
        c
    }

    pub fn pretrain(&self) -> PretrainConfig {
        let mut c = PretrainConfig::default();
        let p = &self.pretrain;
        set(&mut c.epochs, p.epochs);
        set(&mut c.batch_size, p.batch_size);
        set(&mut c.optimizer.learning_rate, p.learning_rate);
        set(&mut c.seed, p.seed);
        c
    }

    pub fn adapter(&self, mode: AdapterMode, n_layers: usize) -> AdapterPlan {
        let mut plan = AdapterPlan::for_mode(mode, n_layers);
        if self.paper_faithful {
            plan = plan.paper_faithful();
        }
        let a = &self.adapter;
        set(&mut plan.rank, a.rank);
        set(&mut plan.alpha, a.alpha);
        if mode == AdapterMode::Mole {
            set(&mut plan.experts, a.experts);
        }
        plan
    }

    pub fn stage(&self, stage: Stage, adapter: Option<AdapterPlan>) -> StageConfig {
        let mut c = if self.paper_faithful {
            StageConfig::paper(stage)
        } else {
            StageConfig::toy(stage)
        };
        c.adapter = adapter;
        let s = match stage {
            Stage::Align => &self.align,
            Stage::Instruct => &self.instruct,
            Stage::Dpo => &self.dpo,
        };
        set(&mut c.epochs, s.epochs);
        set(&mut c.batch_size, s.batch_size);
        set(&mut c.optimizer.learning_rate, s.learning_rate);
        set(&mut c.seed, s.seed);
        set(&mut c.mix_ratio, s.mix_ratio);
        set(&mut c.dpo_beta, s.beta);
        set(&mut c.reset_adapters, s.reset_adapters);
        c
    }

    pub fn bias_rule(&self) -> BiasRule {
        let mut r = BiasRule::default();
        set(&mut r.threshold, self.eval.bias_threshold);
        set(&mut r.require_dominance, self.eval.require_dominance);
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_toy_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c.corpus(), CorpusConfig::default());
        assert_eq!(
            c.stage(Stage::Instruct, None),
            StageConfig::toy(Stage::Instruct)
        );
        assert_eq!(c.adapter(AdapterMode::SingleLora, 2).rank, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("colour = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[align]\nepoch = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[data.sizes]\nimages = 3").is_err());
    }

    #[test]
    fn overrides_and_paper_preset() {
        let c: RunConfig = toml::from_str(
            "paper_faithful = true\n[instruct]\nlearning_rate = 0.01\n[adapter]\nexperts = 5\n[data.sizes]\npt = 8",
        )
        .unwrap();
        let s = c.stage(Stage::Instruct, None);
        assert_eq!(
            (s.epochs, s.batch_size, s.optimizer.learning_rate),
            (3, 64, 0.01)
        );
        let p = c.adapter(AdapterMode::Mole, 2);
        assert_eq!((p.rank, p.alpha, p.experts), (32, 32.0, 5));
        assert_eq!(c.corpus().sizes.pt, 8);
        assert_eq!(c.corpus().sizes.instruct, 512);
    }
}
