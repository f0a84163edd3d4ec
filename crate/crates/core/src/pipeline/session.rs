use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::dpo::{dpo_loss_with_reference, log_prob, reference_log_probs};
use super::optimizer::Optimizer;
use super::{Stage, StageConfig};
use crate::adapters::{attach, detach};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{mix_streams, DpoExample, InstructExample, Mixed, PtExample};
use crate::error::{Error, Result};
use crate::model::{answer_targets, FreezeMask, Param, ParamGroup, ParamId, ToyVlm};

/// SHA-256 digest of each parameter group.
pub type GroupDigests = BTreeMap<ParamGroup, String>;

pub fn group_digests(model: &ToyVlm) -> GroupDigests {
    [
        ParamGroup::Encoder,
        ParamGroup::Projector,
        ParamGroup::Llm,
        ParamGroup::Adapter,
        ParamGroup::Router,
    ]
    .into_iter()
    .map(|g| (g, model.params().digest_group(g)))
    .collect()
}

/// Which groups must come out of `stage` bit-for-bit unchanged.
pub fn frozen_groups(stage: Stage) -> &'static [ParamGroup] {
    match stage {
        Stage::Align => &[ParamGroup::Encoder, ParamGroup::Llm],
        Stage::Instruct | Stage::Dpo => {
            &[ParamGroup::Encoder, ParamGroup::Projector, ParamGroup::Llm]
        }
    }
}

/// What a completed stage leaves behind in the provenance chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub config: StageConfig,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub batches: u64,
    pub digests_before: GroupDigests,
    pub digests_after: GroupDigests,
    /// Digest of the frozen reference policy at the start and end of a
    /// preference stage.
    pub reference_digests: Option<(String, String)>,
    pub data_digest: String,
}

impl StageRecord {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }

    /// Groups whose digest changed although the stage freezes them.
    pub fn freeze_violations(&self) -> Vec<ParamGroup> {
        frozen_groups(self.stage)
            .iter()
            .copied()
            .filter(|g| self.digests_before.get(g) != self.digests_after.get(g))
            .collect()
    }
}

/// Mid-stage state needed to continue an interrupted stage exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Progress {
    pub stage: Stage,
    pub config: StageConfig,
    pub epoch: usize,
    /// Index of the next batch within `epoch`.
    pub batch: usize,
    pub batches_done: u64,
    /// Generator state at the start of `epoch`; the epoch's batch order is
    /// drawn from it.
    pub epoch_rng: ChaCha8Rng,
    pub optimizer: Optimizer,
    pub epoch_losses: Vec<f64>,
    /// Sum and count of batch losses so far in `epoch`.
    pub running: (f64, usize),
    pub digests_before: GroupDigests,
    pub reference: Option<ReferenceState>,
    pub data_digest: String,
}

/// The frozen reference policy of a preference stage: its digest, its
/// adapter tensors (the base model is frozen, so these pin it down) and its
/// precomputed log-probabilities for every pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReferenceState {
    pub digest: String,
    pub adapters: Vec<Param>,
    pub log_probs: Vec<(f64, f64)>,
}

impl ReferenceState {
    fn capture(model: &ToyVlm, data: &[DpoExample]) -> Result<Self> {
        Ok(Self {
            digest: model.params().digest(),
            adapters: adapter_params(model),
            log_probs: data
                .iter()
                .map(|ex| reference_log_probs(model, ex))
                .collect::<Result<_>>()?,
        })
    }

    /// Rebuilds the reference from the current (frozen) base of `model`.
    pub fn rebuild(&self, model: &ToyVlm) -> Result<ToyVlm> {
        let mut r = model.clone();
        for p in &self.adapters {
            let id = r.params().id(&p.name).ok_or_else(|| {
                Error::Checkpoint(format!("reference adapter `{}` is missing", p.name))
            })?;
            let t = r.params_mut().tensor_mut(id);
            if t.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "reference adapter `{}` changed shape",
                    p.name
                )));
            }
            t.data_mut().copy_from_slice(p.tensor.data());
        }
        Ok(r)
    }
}

fn adapter_params(model: &ToyVlm) -> Vec<Param> {
    model
        .params()
        .params()
        .iter()
        .filter(|p| matches!(p.group, ParamGroup::Adapter | ParamGroup::Router))
        .cloned()
        .collect()
}

/// Per-epoch notification passed to [`RunOptions::on_epoch`].
#[derive(Clone, Debug)]
pub struct EpochSummary {
    pub stage: Stage,
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Controls for a stage run that do not affect its numbers.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Stop after this many batches in this call, keeping progress for a
    /// later resume.
    pub max_batches: Option<u64>,
    /// Write a resumable checkpoint to this path every `n` batches.
    pub checkpoint_every: Option<(u64, PathBuf)>,
    /// Run a stage even though the previous stage has not completed.
    pub allow_skip: bool,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochSummary)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Completed(StageRecord),
    Interrupted { stage: Stage, batches_done: u64 },
}

impl Outcome {
    pub fn completed(self) -> Result<StageRecord> {
        match self {
            Outcome::Completed(r) => Ok(r),
            Outcome::Interrupted { stage, .. } => {
                Err(Error::Contract(format!("stage {stage} was interrupted")))
            }
        }
    }
}

/// A model moving through the three training stages.
#[derive(Clone, Debug)]
pub struct Session {
    pub model: ToyVlm,
    pub provenance: Vec<StageRecord>,
    pub progress: Option<Progress>,
}

enum Item<'d> {
    Pt(&'d PtExample),
    Instruct(&'d InstructExample),
    Dpo(&'d DpoExample, (f64, f64)),
}

impl Session {
    pub fn new(model: ToyVlm) -> Self {
        Self {
            model,
            provenance: Vec::new(),
            progress: None,
        }
    }

    pub fn completed(&self, stage: Stage) -> bool {
        self.provenance.iter().any(|r| r.stage == stage)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }

    fn check_order(&self, stage: Stage, allow_skip: bool) -> Result<()> {
        if let Some(p) = &self.progress {
            if p.stage != stage {
                return Err(Error::PipelineOrder(format!(
                    "stage {} is in progress; finish it before starting {stage}",
                    p.stage
                )));
            }
            return Ok(());
        }
        if let Some(prev) = stage.previous() {
            if !self.completed(prev) && !allow_skip {
                return Err(Error::PipelineOrder(format!(
                    "stage {stage} needs a completed {prev} stage"
                )));
            }
        }
        Ok(())
    }

    /// Vision alignment: trains the projector so that, with an empty text
    /// prompt, the frozen LLM reads the profile description off `H_I`.
    pub fn stage1_align(
        &mut self,
        data: &[PtExample],
        cfg: &StageConfig,
        opts: RunOptions,
    ) -> Result<Outcome> {
        cfg.expect_stage(Stage::Align)?;
        self.check_order(Stage::Align, opts.allow_skip)?;
        if let Some(ex) = data.iter().find(|e| !e.question.is_empty()) {
            return Err(Error::Contract(format!(
                "alignment example `{}` has a non-empty question; the text input must stay empty",
                ex.id
            )));
        }
        let items: Vec<Item> = data.iter().map(Item::Pt).collect();
        let digest = data_digest(
            data.iter()
                .map(|e| (&e.id, &e.image, [e.profile_text.as_str()])),
        );
        self.run(cfg, &items, 0, digest, None, opts)
    }

    /// Instruction tuning through the adapters, with the regularizer stream
    /// mixed in at `cfg.mix_ratio`. Attaches `cfg.adapter` unless adapters
    /// are already present.
    pub fn stage2_instruct(
        &mut self,
        data: &[InstructExample],
        regularizer: &[InstructExample],
        cfg: &StageConfig,
        opts: RunOptions,
    ) -> Result<Outcome> {
        cfg.expect_stage(Stage::Instruct)?;
        self.check_order(Stage::Instruct, opts.allow_skip)?;
        for ex in data.iter().chain(regularizer) {
            ex.validate()?;
        }
        if self.progress.is_none() && self.model.adapter_plan().is_none() {
            let plan = cfg
                .adapter
                .as_ref()
                .ok_or_else(|| Error::Config("instruction tuning needs an adapter plan".into()))?;
            attach(&mut self.model, plan, cfg.seed)?;
        }
        let items: Vec<Item> = data.iter().chain(regularizer).map(Item::Instruct).collect();
        let digest = data_digest(
            data.iter()
                .chain(regularizer)
                .map(|e| (&e.id, &e.image, [e.question.as_str(), e.answer.as_str()])),
        );
        self.run(cfg, &items, regularizer.len(), digest, None, opts)
    }

    /// Preference optimization against a frozen snapshot of the policy
    /// taken at the start of the stage.
    pub fn stage3_dpo(
        &mut self,
        data: &[DpoExample],
        cfg: &StageConfig,
        opts: RunOptions,
    ) -> Result<Outcome> {
        cfg.expect_stage(Stage::Dpo)?;
        self.check_order(Stage::Dpo, opts.allow_skip)?;
        if data.is_empty() {
            return Err(Error::Data("no preference examples".into()));
        }
        let reference = match &self.progress {
            Some(p) => p.reference.clone().ok_or_else(|| {
                Error::Checkpoint("preference progress lacks its reference".into())
            })?,
            None => {
                if cfg.reset_adapters && self.model.adapter_plan().is_some() {
                    detach(&mut self.model)?;
                }
                if self.model.adapter_plan().is_none() {
                    let plan = cfg.adapter.as_ref().ok_or_else(|| {
                        Error::Config("preference tuning needs an adapter plan".into())
                    })?;
                    attach(&mut self.model, plan, cfg.seed)?;
                }
                ReferenceState::capture(&self.model, data)?
            }
        };
        let items: Vec<Item> = data
            .iter()
            .zip(&reference.log_probs)
            .map(|(ex, &r)| Item::Dpo(ex, r))
            .collect();
        let digest = data_digest(data.iter().map(|e| {
            (
                &e.id,
                &e.image,
                [e.question.as_str(), e.chosen.as_str(), e.rejected.as_str()],
            )
        }));
        self.run(cfg, &items, 0, digest, Some(reference), opts)
    }

    fn trainable(&mut self, stage: Stage) -> Vec<ParamId> {
        let mask = match stage {
            Stage::Align => FreezeMask::ProjectorOnly,
            Stage::Instruct | Stage::Dpo => FreezeMask::LlmAdaptersOnly,
        };
        self.model.trainable_parameters(mask)
    }

    /// The shared training loop. `items` ends with `n_regularizer` items
    /// that only enter through stream mixing.
    fn run(
        &mut self,
        cfg: &StageConfig,
        items: &[Item],
        n_regularizer: usize,
        data_digest: String,
        reference: Option<ReferenceState>,
        mut opts: RunOptions,
    ) -> Result<Outcome> {
        cfg.validate()?;
        let n_task = items.len() - n_regularizer;
        if n_task == 0 {
            return Err(Error::Data(format!(
                "no training examples for stage {}",
                cfg.stage
            )));
        }
        let ids = self.trainable(cfg.stage);
        if ids.is_empty() {
            return Err(Error::Config(format!(
                "stage {} has nothing to train",
                cfg.stage
            )));
        }
        let mut p = match self.progress.take() {
            Some(p) => {
                if p.config != *cfg || p.data_digest != data_digest {
                    let msg = "resumed stage has a different config or dataset".to_string();
                    self.progress = Some(p);
                    return Err(Error::Checkpoint(msg));
                }
                p
            }
            None => Progress {
                stage: cfg.stage,
                config: cfg.clone(),
                epoch: 0,
                batch: 0,
                batches_done: 0,
                epoch_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
                optimizer: Optimizer::new(cfg.optimizer.clone())?,
                epoch_losses: Vec::new(),
                running: (0.0, 0),
                digests_before: group_digests(&self.model),
                reference,
                data_digest,
            },
        };
        let mut done_this_call = 0u64;
        while p.epoch < cfg.epochs {
            let mut rng = p.epoch_rng.clone();
            let plan = epoch_plan(&mut rng, n_task, n_regularizer, cfg)?;
            while p.batch < plan.len() {
                if opts.max_batches.is_some_and(|m| done_this_call >= m) {
                    let (stage, batches_done) = (p.stage, p.batches_done);
                    self.progress = Some(p);
                    return Ok(Outcome::Interrupted {
                        stage,
                        batches_done,
                    });
                }
                let loss = self.train_batch(&plan[p.batch], items, cfg, &ids, &mut p.optimizer)?;
                p.running.0 += loss;
                p.running.1 += 1;
                p.batch += 1;
                p.batches_done += 1;
                done_this_call += 1;
                if let Some((every, path)) = &opts.checkpoint_every {
                    if p.batches_done % every == 0 {
                        self.progress = Some(p.clone());
                        let saved = self.checkpoint().save(path);
                        self.progress = None;
                        saved?;
                    }
                }
            }
            let mean = p.running.0 / p.running.1.max(1) as f64;
            p.epoch_losses.push(mean);
            if let Some(cb) = opts.on_epoch.as_deref_mut() {
                cb(&EpochSummary {
                    stage: cfg.stage,
                    epoch: p.epoch,
                    mean_loss: mean,
                });
            }
            p.epoch += 1;
            p.batch = 0;
            p.running = (0.0, 0);
            p.epoch_rng = rng;
        }
        self.model.params_mut().set_all_frozen();
        let after = group_digests(&self.model);
        let reference_digests = match &p.reference {
            Some(r) => Some((r.digest.clone(), r.rebuild(&self.model)?.params().digest())),
            None => None,
        };
        let record = StageRecord {
            stage: cfg.stage,
            config: cfg.clone(),
            epoch_losses: p.epoch_losses,
            batches: p.batches_done,
            digests_before: p.digests_before,
            digests_after: after,
            reference_digests,
            data_digest: p.data_digest,
        };
        if let Some((a, b)) = &record.reference_digests {
            if a != b {
                return Err(Error::Contract(
                    "the reference policy changed during the stage".into(),
                ));
            }
        }
        let broken = record.freeze_violations();
        if !broken.is_empty() {
            return Err(Error::Contract(format!(
                "stage {} changed frozen groups {broken:?}",
                cfg.stage
            )));
        }
        self.provenance.push(record.clone());
        Ok(Outcome::Completed(record))
    }

    fn train_batch(
        &mut self,
        batch: &[usize],
        items: &[Item],
        cfg: &StageConfig,
        ids: &[ParamId],
        opt: &mut Optimizer,
    ) -> Result<f64> {
        let w = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for &i in batch {
            let mut tape = Tape::new();
            let loss = example_loss(&self.model, &mut tape, &items[i], cfg.dpo_beta)?;
            let value = tape.item(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    param: format!("loss of stage {}", cfg.stage),
                    count: 1,
                });
            }
            total += value * w;
            let scaled = tape.scale(loss, w);
            let grads = tape.backward(scaled)?;
            self.model.params_mut().accumulate(&grads);
        }
        opt.step(self.model.params_mut(), ids)?;
        Ok(total)
    }
}

fn example_loss(model: &ToyVlm, tape: &mut Tape, item: &Item, beta: f64) -> Result<Var> {
    match item {
        Item::Pt(ex) => answer_ce(model, tape, &ex.image, "", &ex.profile_text),
        Item::Instruct(ex) => answer_ce(model, tape, &ex.image, &ex.question, &ex.answer),
        Item::Dpo(ex, r) => {
            Ok(dpo_loss_with_reference(model, tape, std::slice::from_ref(*ex), &[*r], beta)?.loss)
        }
    }
}

/// Mean cross-entropy of the answer tokens (closing `EOS` included) given
/// the image and question. Image and question positions carry no loss.
pub fn answer_ce(
    model: &ToyVlm,
    tape: &mut Tape,
    image: &Tensor,
    question: &str,
    answer: &str,
) -> Result<Var> {
    let tok = model.tokenizer();
    let q = tok.prompt_ids(question);
    let a = tok.answer_ids(answer);
    let h = model.image_prefix(tape, image)?;
    let logits = model.forward_logits(tape, h, &q, &a)?;
    tape.cross_entropy_masked(
        logits,
        &answer_targets(model.config().num_patches(), q.len(), &a),
    )
}

/// Batches of one epoch: shuffled task batches, with regularizer batches
/// interleaved by [`mix_streams`].
fn epoch_plan(
    rng: &mut ChaCha8Rng,
    n_task: usize,
    n_reg: usize,
    cfg: &StageConfig,
) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..n_task).collect();
    order.shuffle(rng);
    let task: Vec<Vec<usize>> = order
        .chunks(cfg.batch_size)
        .map(<[usize]>::to_vec)
        .collect();
    if n_reg == 0 || cfg.mix_ratio == 0.0 {
        return Ok(task);
    }
    let mut reg_order: Vec<usize> = (n_task..n_task + n_reg).collect();
    reg_order.shuffle(rng);
    let reg: Vec<Vec<usize>> = reg_order
        .chunks(cfg.batch_size)
        .map(<[usize]>::to_vec)
        .collect();
    let mix_seed = rand::Rng::random::<u64>(rng);
    Ok(mix_streams(task, reg, cfg.mix_ratio, mix_seed)?
        .into_iter()
        .map(Mixed::into_inner)
        .collect())
}

fn data_digest<'a, const N: usize>(
    records: impl Iterator<Item = (&'a String, &'a Tensor, [&'a str; N])>,
) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (id, img, texts) in records {
        h.update(id.as_bytes());
        h.update([0]);
        for b in img.bits() {
            h.update(b.to_le_bytes());
        }
        for t in texts {
            h.update(t.as_bytes());
            h.update([0]);
        }
    }
    hex::encode(h.finalize())
}

/// Per-token cross-entropy over a whole instruction set: total answer NLL
/// divided by the total number of answer tokens.
pub fn per_token_ce(model: &ToyVlm, data: &[InstructExample]) -> Result<f64> {
    let (mut nll, mut tokens) = (0.0, 0usize);
    for ex in data {
        let n = model.tokenizer().answer_ids(&ex.answer).len();
        let mut tape = Tape::new();
        let l = answer_ce(model, &mut tape, &ex.image, &ex.question, &ex.answer)?;
        nll += tape.item(l) * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Data("no answer tokens".into()));
    }
    Ok(nll / tokens as f64)
}

/// Fraction of preference pairs where the policy assigns the chosen answer
/// a higher log-probability than the rejected one.
pub fn preference_accuracy(model: &ToyVlm, data: &[DpoExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("no preference examples".into()));
    }
    let mut wins = 0;
    for ex in data {
        let c = log_prob(model, &ex.image, &ex.question, &ex.chosen)?;
        let r = log_prob(model, &ex.image, &ex.question, &ex.rejected)?;
        if c > r {
            wins += 1;
        }
    }
    Ok(wins as f64 / data.len() as f64)
}
