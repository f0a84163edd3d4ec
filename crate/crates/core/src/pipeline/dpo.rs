use crate::autodiff::{eager, Tape, Tensor, Var};
use crate::data::DpoExample;
use crate::error::{Error, Result};
use crate::model::{answer_targets, ToyVlm};

/// `log π(a | i, q)`: the summed log-probability of the answer tokens,
/// including the closing `EOS`.
pub fn sequence_log_prob(
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
    let targets = answer_targets(model.config().num_patches(), q.len(), &a);
    tape.target_log_prob(logits, &targets)
}

/// Eager [`sequence_log_prob`].
pub fn log_prob(model: &ToyVlm, image: &Tensor, question: &str, answer: &str) -> Result<f64> {
    let mut tape = Tape::new();
    let v = sequence_log_prob(model, &mut tape, image, question, answer)?;
    Ok(tape.item(v))
}

/// Reference log-probabilities `(log π_ref(a⁺), log π_ref(a⁻))` for a pair.
pub fn reference_log_probs(reference: &ToyVlm, ex: &DpoExample) -> Result<(f64, f64)> {
    Ok((
        log_prob(reference, &ex.image, &ex.question, &ex.chosen)?,
        log_prob(reference, &ex.image, &ex.question, &ex.rejected)?,
    ))
}

/// `−log σ(margin)`, the per-pair preference loss as a function of the
/// implicit-reward margin.
pub fn dpo_pair_loss(margin: f64) -> f64 {
    -eager::log_sigmoid(margin)
}

/// Per-pair loss on a tape plus bookkeeping.
#[derive(Clone, Copy, Debug)]
pub struct DpoTerm {
    pub loss: Var,
    /// `β · [(log π_θ − log π_ref)(a⁺) − (log π_θ − log π_ref)(a⁻)]`.
    pub margin: f64,
    pub policy_chosen: f64,
    pub policy_rejected: f64,
}

/// `−log σ(β [(log π_θ(a⁺) − ref⁺) − (log π_θ(a⁻) − ref⁻)])` for one pair,
/// with the reference terms supplied as constants.
pub fn dpo_pair(
    policy: &ToyVlm,
    tape: &mut Tape,
    ex: &DpoExample,
    reference: (f64, f64),
    beta: f64,
) -> Result<DpoTerm> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!(
            "DPO beta must be positive, got {beta}"
        )));
    }
    let chosen = sequence_log_prob(policy, tape, &ex.image, &ex.question, &ex.chosen)?;
    let rejected = sequence_log_prob(policy, tape, &ex.image, &ex.question, &ex.rejected)?;
    let (pc, pr) = (tape.item(chosen), tape.item(rejected));
    let diff = tape.sub(chosen, rejected)?;
    let shift = tape.constant(Tensor::scalar(reference.0 - reference.1));
    let diff = tape.sub(diff, shift)?;
    let scaled = tape.scale(diff, beta);
    let margin = tape.item(scaled);
    let ls = tape.log_sigmoid(scaled);
    let loss = tape.scale(ls, -1.0);
    Ok(DpoTerm {
        loss,
        margin,
        policy_chosen: pc,
        policy_rejected: pr,
    })
}

/// Batch DPO loss and the number of degenerate pairs (`a⁺ == a⁻`) in it.
/// Degenerate pairs have zero margin at every `θ` and contribute `ln 2`.
pub struct DpoLoss {
    pub loss: Var,
    pub margins: Vec<f64>,
    pub degenerate: usize,
}

/// Mean DPO loss over `batch`, differentiable with respect to `policy`
/// only; `reference` is evaluated eagerly.
pub fn dpo_loss(
    policy: &ToyVlm,
    reference: &ToyVlm,
    tape: &mut Tape,
    batch: &[DpoExample],
    beta: f64,
) -> Result<DpoLoss> {
    let refs = batch
        .iter()
        .map(|ex| reference_log_probs(reference, ex))
        .collect::<Result<Vec<_>>>()?;
    dpo_loss_with_reference(policy, tape, batch, &refs, beta)
}

/// As [`dpo_loss`] with precomputed reference log-probabilities.
pub fn dpo_loss_with_reference(
    policy: &ToyVlm,
    tape: &mut Tape,
    batch: &[DpoExample],
    refs: &[(f64, f64)],
    beta: f64,
) -> Result<DpoLoss> {
    if batch.is_empty() {
        return Err(Error::Data("empty DPO batch".into()));
    }
    if refs.len() != batch.len() {
        return Err(Error::Contract(
            "one reference pair per example required".into(),
        ));
    }
    let mut terms = Vec::with_capacity(batch.len());
    let mut margins = Vec::with_capacity(batch.len());
    let mut degenerate = 0;
    for (ex, &r) in batch.iter().zip(refs) {
        if ex.chosen == ex.rejected {
            degenerate += 1;
        }
        let t = dpo_pair(policy, tape, ex, r, beta)?;
        terms.push(t.loss);
        margins.push(t.margin);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let loss = tape.scale(total, 1.0 / terms.len() as f64);
    Ok(DpoLoss {
        loss,
        margins,
        degenerate,
    })
}
