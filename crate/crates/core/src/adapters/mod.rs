//! Parameter-efficient adaptation of the decoder.
//!
//! Two modes share one [`AdapterPlan`]:
//!
//! * **single LoRA**: a [`LoraModule`] on each targeted linear layer, adding
//!   `(alpha/r) · B · A · h` to its output;
//! * **MoLE**: LoRA on the attention projections plus, on each targeted FFN,
//!   a bank of `K` LoRA experts and a linear router. Every token goes to
//!   exactly one expert, `k* = argmax_k router(h)_k`, and the FFN output
//!   becomes `ffn(h) + E_{k*}(h)`.
//!
//! Hard argmax has no useful derivative, so the router is trained with a
//! straight-through estimate: the forward pass multiplies the chosen
//! expert's output by `p_{k*} / stopgrad(p_{k*})` (exactly one), which sends
//! `⟨g, E_{k*}(h)⟩ (δ_{jk*} − p_j)` back to router logit `j`. The router
//! reads a detached copy of `h`, so this surrogate updates only the router
//! weights; every other parameter receives the exact gradient of the loss
//! for the routing that was chosen. There is no auxiliary load-balancing
//! loss.
//!
//! Adapters are appended to the model's parameter store under the
//! [`ParamGroup::Adapter`] and [`ParamGroup::Router`] groups. `B` starts at
//! zero, so attaching never changes the model's output until training moves
//! it, and [`detach`] restores the original store exactly.

pub mod checkpoint;
mod lora;
mod mole;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use lora::{lora_delta, LoraModule};
pub use mole::{mole_route, route_logits, MoleFfn};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{ParamGroup, ParamId, ToyVlm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterMode {
    SingleLora,
    Mole,
}

impl AdapterMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterMode::SingleLora => "lora",
            AdapterMode::Mole => "mole",
        }
    }
}

impl fmt::Display for AdapterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" | "single-lora" => Ok(AdapterMode::SingleLora),
            "mole" => Ok(AdapterMode::Mole),
            other => Err(Error::Config(format!("unknown adapter mode `{other}`"))),
        }
    }
}

/// What to attach and where.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterPlan {
    pub mode: AdapterMode,
    /// Linear layers that get a LoRA module, e.g. `layers.0.attn.q`.
    pub lora_targets: Vec<String>,
    /// FFNs that get an expert bank, e.g. `layers.1.ffn`. MoLE only.
    pub mole_targets: Vec<String>,
    pub rank: usize,
    pub alpha: f64,
    /// Experts per FFN (`K`). Ignored in single-LoRA mode.
    pub experts: usize,
}

fn attention_targets(n_layers: usize) -> Vec<String> {
    (0..n_layers)
        .flat_map(|l| ["q", "k", "v", "o"].map(|p| format!("layers.{l}.attn.{p}")))
        .collect()
}

impl AdapterPlan {
    /// LoRA on every attention projection, toy rank 4 / alpha 4.
    pub fn single_lora(n_layers: usize) -> Self {
        Self {
            mode: AdapterMode::SingleLora,
            lora_targets: attention_targets(n_layers),
            mole_targets: Vec::new(),
            rank: 4,
            alpha: 4.0,
            experts: 0,
        }
    }

    /// LoRA on attention plus three experts on every FFN.
    pub fn mole(n_layers: usize) -> Self {
        Self {
            mode: AdapterMode::Mole,
            mole_targets: (0..n_layers).map(|l| format!("layers.{l}.ffn")).collect(),
            experts: 3,
            ..Self::single_lora(n_layers)
        }
    }

    pub fn for_mode(mode: AdapterMode, n_layers: usize) -> Self {
        match mode {
            AdapterMode::SingleLora => Self::single_lora(n_layers),
            AdapterMode::Mole => Self::mole(n_layers),
        }
    }

    pub fn with_rank(mut self, rank: usize, alpha: f64) -> Self {
        self.rank = rank;
        self.alpha = alpha;
        self
    }

    /// Rank and alpha of 32.
    pub fn paper_faithful(self) -> Self {
        self.with_rank(32, 32.0)
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || !(self.alpha > 0.0) {
            return Err(Error::Config(
                "adapter rank and alpha must be positive".into(),
            ));
        }
        match self.mode {
            AdapterMode::SingleLora => {
                if !self.mole_targets.is_empty() {
                    return Err(Error::Config("single-LoRA plan lists MoLE targets".into()));
                }
                if self.lora_targets.is_empty() {
                    return Err(Error::Config("single-LoRA plan has no targets".into()));
                }
            }
            AdapterMode::Mole => {
                if self.experts == 0 {
                    return Err(Error::Config("MoLE needs at least one expert".into()));
                }
                if self.mole_targets.is_empty() {
                    return Err(Error::Config("MoLE plan has no FFN targets".into()));
                }
                if !self.lora_targets.iter().any(|t| t.contains(".attn.")) {
                    return Err(Error::Config(
                        "MoLE plan must also put LoRA on self-attention".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LoraIds {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

impl LoraIds {
    fn delta(&self, model: &ToyVlm, tape: &mut Tape, x: Var) -> Result<Var> {
        let a = model.bind(tape, self.a);
        let b = model.bind(tape, self.b);
        lora_delta(tape, x, a, b, self.scale)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct MoleIds {
    pub router: ParamId,
    pub experts: Vec<LoraIds>,
}

/// Adapter bookkeeping stored inside an adapted [`ToyVlm`].
#[derive(Clone, Debug)]
pub(crate) struct AttachedAdapters {
    pub plan: AdapterPlan,
    /// Store length before attaching; adapters occupy everything after it.
    pub base_len: usize,
    pub lora: BTreeMap<String, LoraIds>,
    pub mole: BTreeMap<usize, MoleIds>,
}

fn parse_ffn_target(target: &str, n_layers: usize) -> Result<usize> {
    target
        .strip_prefix("layers.")
        .and_then(|s| s.strip_suffix(".ffn"))
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&l| l < n_layers)
        .ok_or_else(|| Error::Config(format!("unknown MoLE target `{target}`")))
}

fn adapter_name(target: &str, part: &str) -> String {
    format!("adapter.{target}.{part}")
}

/// Wraps the plan's targets with freshly initialized adapters.
pub fn attach(model: &mut ToyVlm, plan: &AdapterPlan, seed: u64) -> Result<()> {
    plan.validate()?;
    if model.adapters.is_some() {
        return Err(Error::Config("model already has adapters attached".into()));
    }
    let mut dims = Vec::new();
    for t in &plan.lora_targets {
        let lin = model
            .linear(t)
            .ok_or_else(|| Error::Config(format!("unknown LoRA target `{t}`")))?;
        let w = model.params.tensor(lin.weight).shape();
        dims.push((t.clone(), w[1], w[0]));
    }
    let mut layers = Vec::new();
    if plan.mode == AdapterMode::Mole {
        for t in &plan.mole_targets {
            layers.push(parse_ffn_target(t, model.config.n_layers)?);
        }
    }
    let mut sorted = layers.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != layers.len() {
        return Err(Error::Config("duplicate MoLE target".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_len = model.params.len();
    let mut lora = BTreeMap::new();
    for (t, d_in, d_out) in dims {
        if lora.contains_key(&t) {
            return Err(Error::Config(format!("duplicate LoRA target `{t}`")));
        }
        let m = LoraModule::new(&t, d_in, d_out, plan.rank, plan.alpha, &mut rng)?;
        let ids = insert_lora(model, &t, m, ParamGroup::Adapter);
        lora.insert(t, ids);
    }
    let d_h = model.config.d_h;
    let mut mole = BTreeMap::new();
    for l in layers {
        let target = format!("layers.{l}.ffn");
        let mut experts = Vec::new();
        for k in 0..plan.experts {
            let m = LoraModule::new(
                format!("{target}.expert{k}"),
                d_h,
                d_h,
                plan.rank,
                plan.alpha,
                &mut rng,
            )?;
            experts.push(insert_lora(
                model,
                &format!("{target}.expert{k}"),
                m,
                ParamGroup::Adapter,
            ));
        }
        let dist = Normal::new(0.0, 1.0 / (d_h as f64).sqrt()).expect("finite std");
        let router = Tensor::from_fn(&[plan.experts, d_h], |_| dist.sample(&mut rng));
        let router =
            model
                .params
                .insert(adapter_name(&target, "router"), ParamGroup::Router, router);
        mole.insert(l, MoleIds { router, experts });
    }
    model.adapters = Some(AttachedAdapters {
        plan: plan.clone(),
        base_len,
        lora,
        mole,
    });
    Ok(())
}

fn insert_lora(model: &mut ToyVlm, target: &str, m: LoraModule, group: ParamGroup) -> LoraIds {
    let scale = m.scale();
    let a = model
        .params
        .insert(adapter_name(target, "lora_a"), group, m.a);
    let b = model
        .params
        .insert(adapter_name(target, "lora_b"), group, m.b);
    LoraIds { a, b, scale }
}

/// Removes every adapter, returning the plan that was attached.
pub fn detach(model: &mut ToyVlm) -> Result<AdapterPlan> {
    let att = model
        .adapters
        .take()
        .ok_or_else(|| Error::Config("no adapters attached".into()))?;
    model.params.truncate(att.base_len);
    Ok(att.plan)
}

impl ToyVlm {
    pub fn adapter_plan(&self) -> Option<&AdapterPlan> {
        self.adapters.as_ref().map(|a| &a.plan)
    }

    /// Snapshot of the LoRA module on `target`, if any.
    pub fn lora_module(&self, target: &str) -> Option<LoraModule> {
        let att = self.adapters.as_ref()?;
        let ids = att.lora.get(target)?;
        Some(self.snapshot_lora(target, ids, &att.plan))
    }

    /// Snapshot of the expert bank on FFN `layer`, if any.
    pub fn mole_ffn(&self, layer: usize) -> Option<MoleFfn> {
        let att = self.adapters.as_ref()?;
        let m = att.mole.get(&layer)?;
        Some(MoleFfn {
            experts: m
                .experts
                .iter()
                .enumerate()
                .map(|(k, ids)| {
                    self.snapshot_lora(&format!("layers.{layer}.ffn.expert{k}"), ids, &att.plan)
                })
                .collect(),
            router: self.params.tensor(m.router).clone(),
        })
    }

    fn snapshot_lora(&self, target: &str, ids: &LoraIds, plan: &AdapterPlan) -> LoraModule {
        LoraModule {
            target: target.to_string(),
            rank: plan.rank,
            alpha: plan.alpha,
            a: self.params.tensor(ids.a).clone().with_requires_grad(false),
            b: self.params.tensor(ids.b).clone().with_requires_grad(false),
        }
    }

    /// Total adapter + router parameter count.
    pub fn adapter_param_count(&self) -> usize {
        self.params.count_in(ParamGroup::Adapter) + self.params.count_in(ParamGroup::Router)
    }
}

pub(crate) fn lora_hook(
    model: &ToyVlm,
    tape: &mut Tape,
    x: Var,
    target: &str,
) -> Result<Option<Var>> {
    let Some(att) = &model.adapters else {
        return Ok(None);
    };
    match att.lora.get(target) {
        Some(ids) => ids.delta(model, tape, x).map(Some),
        None => Ok(None),
    }
}

/// Routed expert delta for FFN `layer` and the expert chosen for each row.
pub(crate) fn mole_hook(
    model: &ToyVlm,
    tape: &mut Tape,
    h: Var,
    layer: usize,
) -> Result<Option<(Var, Vec<usize>)>> {
    let Some(att) = &model.adapters else {
        return Ok(None);
    };
    let Some(m) = att.mole.get(&layer) else {
        return Ok(None);
    };
    let router = model.bind(tape, m.router);
    let h_in = tape.detach(h);
    let logits = tape.matmul_t(h_in, router)?;
    let mut deltas = Vec::with_capacity(m.experts.len());
    for e in &m.experts {
        deltas.push(e.delta(model, tape, h)?);
    }
    let routed = tape.top1_route(logits, &deltas)?;
    let choices = tape.route_choices(routed).unwrap_or_default().to_vec();
    Ok(Some((routed, choices)))
}

/// Fills every attached `B` with seeded Gaussian noise, giving adapters a
/// visible effect without training.
pub fn randomize_adapters(model: &mut ToyVlm, std: f64, seed: u64) {
    let Some(att) = model.adapters.as_ref() else {
        return;
    };
    let ids: Vec<ParamId> = att
        .lora
        .values()
        .chain(att.mole.values().flat_map(|m| m.experts.iter()))
        .map(|l| l.b)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("finite std");
    for id in ids {
        let t = model.params.tensor_mut(id);
        t.data_mut()
            .iter_mut()
            .for_each(|x| *x = dist.sample(&mut rng));
    }
}

#[cfg(test)]
mod tests;
