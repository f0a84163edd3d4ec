use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    Encoder,
    Projector,
    Llm,
    Adapter,
    Router,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        tensor: Tensor,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            group,
            tensor,
        });
        ParamId(id)
    }

    /// Drops every parameter with index `>= len`.
    pub(crate) fn truncate(&mut self, len: usize) {
        for p in self.params.drain(len..) {
            self.by_name.remove(&p.name);
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn count_in(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.tensor.requires_grad())
            .map(|(id, _)| id)
            .collect()
    }

    /// Binds a parameter onto `tape`; repeated binds return the same `Var`.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(id.0, &self.params[id.0].tensor)
    }

    /// Adds every keyed gradient in `grads` to the matching parameter.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (key, g) in grads.keyed() {
            let t = &mut self.params[key].tensor;
            if t.requires_grad() {
                t.add_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn set_all_frozen(&mut self) {
        for p in &mut self.params {
            p.tensor.set_requires_grad(false);
        }
    }

    /// SHA-256 over names, shapes and value bit patterns of the selected
    /// parameters.
    pub fn digest_where(&self, keep: impl Fn(&Param) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| keep(p)) {
            h.update(p.name.as_bytes());
            h.update([0]);
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for b in p.tensor.bits() {
                h.update(b.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn digest_group(&self, group: ParamGroup) -> String {
        self.digest_where(|p| p.group == group)
    }

    pub fn digest(&self) -> String {
        self.digest_where(|_| true)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn from_params(params: Vec<Param>) -> Self {
        let by_name = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Self { params, by_name }
    }
}

/// Declares which parameter groups train in a stage. The vision encoder is
/// frozen under every mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeMask {
    ProjectorOnly,
    LlmAdaptersOnly,
    LlmOnly,
}

impl FreezeMask {
    pub fn trains(self, group: ParamGroup) -> bool {
        matches!(
            (self, group),
            (FreezeMask::ProjectorOnly, ParamGroup::Projector)
                | (FreezeMask::LlmAdaptersOnly, ParamGroup::Adapter)
                | (FreezeMask::LlmAdaptersOnly, ParamGroup::Router)
                | (FreezeMask::LlmOnly, ParamGroup::Llm)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FreezeMask::ProjectorOnly => "projector-only",
            FreezeMask::LlmAdaptersOnly => "llm-adapters-only",
            FreezeMask::LlmOnly => "llm-only",
        }
    }
}

impl fmt::Display for FreezeMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FreezeMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projector-only" => Ok(FreezeMask::ProjectorOnly),
            "llm-adapters-only" => Ok(FreezeMask::LlmAdaptersOnly),
            "llm-only" => Ok(FreezeMask::LlmOnly),
            other => Err(Error::Config(format!("unknown freeze mask `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_names_round_trip() {
        for m in [
            FreezeMask::ProjectorOnly,
            FreezeMask::LlmAdaptersOnly,
            FreezeMask::LlmOnly,
        ] {
            assert_eq!(m.as_str().parse::<FreezeMask>().unwrap(), m);
        }
        assert!(matches!(
            "everything".parse::<FreezeMask>(),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn no_mask_trains_the_encoder() {
        for m in [
            FreezeMask::ProjectorOnly,
            FreezeMask::LlmAdaptersOnly,
            FreezeMask::LlmOnly,
        ] {
            assert!(!m.trains(ParamGroup::Encoder));
        }
    }

    #[test]
    fn digest_changes_with_values() {
        let mut s = ParamStore::new();
        let id = s.insert("w", ParamGroup::Llm, Tensor::zeros(&[2]));
        let a = s.digest();
        s.tensor_mut(id).data_mut()[1] = -0.0;
        assert_ne!(a, s.digest());
    }
}
