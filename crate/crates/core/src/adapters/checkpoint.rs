//! Adapter-only checkpoints: the plan plus every adapter and router tensor,
//! without the frozen base model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{attach, detach, AdapterPlan};
use crate::error::{Error, Result};
use crate::io;
use crate::model::{Param, ParamGroup, ToyVlm};

const FORMAT: &str = "uvlm-adapters";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdapterCheckpoint {
    pub format: String,
    pub version: u32,
    pub plan: AdapterPlan,
    pub d_h: usize,
    pub d_ffn: usize,
    pub n_layers: usize,
    pub params: Vec<Param>,
}

impl AdapterCheckpoint {
    pub fn capture(model: &ToyVlm) -> Result<Self> {
        let plan = model
            .adapter_plan()
            .ok_or_else(|| Error::Config("no adapters attached".into()))?
            .clone();
        let c = model.config();
        Ok(Self {
            format: FORMAT.into(),
            version: VERSION,
            plan,
            d_h: c.d_h,
            d_ffn: c.d_ffn(),
            n_layers: c.n_layers,
            params: model
                .params()
                .params()
                .iter()
                .filter(|p| matches!(p.group, ParamGroup::Adapter | ParamGroup::Router))
                .cloned()
                .collect(),
        })
    }

    /// Attaches the stored adapters to `model`, replacing any already there.
    /// Fails with [`Error::Config`] if the model's dimensions differ.
    pub fn apply(&self, model: &mut ToyVlm) -> Result<()> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "not an adapter checkpoint (format `{}` v{})",
                self.format, self.version
            )));
        }
        let c = model.config();
        if (c.d_h, c.d_ffn(), c.n_layers) != (self.d_h, self.d_ffn, self.n_layers) {
            return Err(Error::Config(format!(
                "adapters were trained for d_h={} d_ffn={} layers={}, model has d_h={} d_ffn={} layers={}",
                self.d_h,
                self.d_ffn,
                self.n_layers,
                c.d_h,
                c.d_ffn(),
                c.n_layers
            )));
        }
        let previous = model
            .adapter_plan()
            .is_some()
            .then(|| Self::capture(model))
            .transpose()?;
        if previous.is_some() {
            detach(model)?;
        }
        let result = self.overwrite(model);
        if result.is_err() {
            if model.adapter_plan().is_some() {
                detach(model)?;
            }
            if let Some(prev) = previous {
                prev.overwrite(model)?;
            }
        }
        result
    }

    fn overwrite(&self, model: &mut ToyVlm) -> Result<()> {
        attach(model, &self.plan, 0)?;
        let expected = model.params().len() - model.adapters.as_ref().map_or(0, |a| a.base_len);
        if self.params.len() != expected {
            return Err(Error::Config(format!(
                "checkpoint holds {} adapter tensors, plan needs {expected}",
                self.params.len()
            )));
        }
        for p in &self.params {
            let id = model
                .params()
                .id(&p.name)
                .ok_or_else(|| Error::Config(format!("unexpected adapter tensor `{}`", p.name)))?;
            let slot = model.params_mut().tensor_mut(id);
            if slot.shape() != p.tensor.shape() {
                return Err(Error::Config(format!(
                    "adapter tensor `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    p.tensor.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(p.tensor.data());
        }
        Ok(())
    }
}

pub fn save_adapters(model: &ToyVlm, path: &Path) -> Result<()> {
    io::write_json(path, &AdapterCheckpoint::capture(model)?)
}

pub fn load_adapters(model: &mut ToyVlm, path: &Path) -> Result<()> {
    let ck: AdapterCheckpoint = io::read_json(path)?;
    ck.apply(model)
}
