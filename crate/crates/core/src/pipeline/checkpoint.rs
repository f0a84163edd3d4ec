use std::path::Path;

use serde::{Deserialize, Serialize};

use super::session::{Progress, Session, StageRecord};
use crate::adapters::checkpoint::AdapterCheckpoint;
use crate::adapters::AdapterPlan;
use crate::error::{Error, Result};
use crate::io;
use crate::model::{ModelConfig, Param, ParamGroup, ParamStore, Tokenizer, ToyVlm};

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "uvlm-checkpoint";

/// Everything needed to rebuild a [`Session`]: weights, tokenizer, adapter
/// plan, completed-stage provenance and, mid-stage, the optimizer and
/// generator state to continue exactly where training stopped.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub adapter_plan: Option<AdapterPlan>,
    pub params: Vec<Param>,
    pub provenance: Vec<StageRecord>,
    pub progress: Option<Progress>,
}

fn is_adapter(p: &Param) -> bool {
    matches!(p.group, ParamGroup::Adapter | ParamGroup::Router)
}

impl Checkpoint {
    pub fn capture(session: &Session) -> Self {
        let m = &session.model;
        Self {
            format: FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: m.config().clone(),
            tokenizer: m.tokenizer().clone(),
            adapter_plan: m.adapter_plan().cloned(),
            params: m.params().params().to_vec(),
            provenance: session.provenance.clone(),
            progress: session.progress.clone(),
        }
    }

    pub fn into_session(self) -> Result<Session> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unknown checkpoint format `{}`",
                self.format
            )));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let (adapters, base): (Vec<Param>, Vec<Param>) =
            self.params.into_iter().partition(is_adapter);
        let mut model = ToyVlm::from_parts(
            self.config.clone(),
            self.tokenizer,
            ParamStore::from_params(base),
        )?;
        match self.adapter_plan {
            Some(plan) => AdapterCheckpoint {
                format: "uvlm-adapters".into(),
                version: 1,
                plan,
                d_h: self.config.d_h,
                d_ffn: self.config.d_ffn(),
                n_layers: self.config.n_layers,
                params: adapters,
            }
            .apply(&mut model)
            .map_err(|e| Error::Checkpoint(e.to_string()))?,
            None if !adapters.is_empty() => {
                return Err(Error::Checkpoint(
                    "adapter tensors without an adapter plan".into(),
                ));
            }
            None => {}
        }
        Ok(Session {
            model,
            provenance: self.provenance,
            progress: self.progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    /// Loads a checkpoint and rejects it unless its model configuration is
    /// exactly `expected`.
    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.config != *expected {
            return Err(Error::Checkpoint(format!(
                "{} was saved for {:?}, not {:?}",
                path.display(),
                ck.config,
                expected
            )));
        }
        Ok(ck)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(hex::encode(Sha256::digest(bytes)))
    }
}
