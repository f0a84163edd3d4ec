use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optimizer::{Optimizer, OptimizerConfig};
use crate::autodiff::{Tape, Tensor};
use crate::data::{Corpus, ProfileSpec, Split};
use crate::error::{Error, Result};
use crate::model::{answer_targets, FreezeMask, ToyVlm};

/// Settings of the text-only language-model pretraining of the base LLM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            optimizer: OptimizerConfig::adamw(3e-3),
            seed: 0,
        }
    }
}

/// A prompt and the continuation the language model should learn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub prompt: String,
    pub continuation: String,
}

/// Cross-entropy of `continuation` after `[BOS] prompt [SEP]`, with the
/// image rows held at zero so the base model learns from text alone.
pub fn text_ce(model: &ToyVlm, tape: &mut Tape, pair: &TextPair) -> Result<crate::autodiff::Var> {
    let tok = model.tokenizer();
    let q = tok.prompt_ids(&pair.prompt);
    let a = tok.answer_ids(&pair.continuation);
    let m = model.config().num_patches();
    let h = tape.constant(Tensor::zeros(&[m, model.config().d_h]));
    let logits = model.forward_logits(tape, h, &q, &a)?;
    tape.cross_entropy_masked(logits, &answer_targets(m, q.len(), &a))
}

/// Trains the base LLM (embeddings, positions, blocks, final norm) as a
/// conditional language model on `pairs`. Stands in for the web-scale
/// pretraining a real backbone arrives with; must run before adapters are
/// attached. Returns the mean loss of each epoch.
pub fn pretrain_llm(
    model: &mut ToyVlm,
    pairs: &[TextPair],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    cfg.optimizer.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config(
            "pretraining needs positive epochs and batch size".into(),
        ));
    }
    if pairs.is_empty() {
        return Err(Error::Data("no pretraining text".into()));
    }
    if model.adapter_plan().is_some() {
        return Err(Error::PipelineOrder(
            "pretrain the base LLM before attaching adapters".into(),
        ));
    }
    let ids = model.trainable_parameters(FreezeMask::LlmOnly);
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut tape = Tape::new();
                let loss = text_ce(model, &mut tape, &pairs[i])?;
                sum += tape.item(loss) * w;
                let scaled = tape.scale(loss, w);
                let grads = tape.backward(scaled)?;
                model.params_mut().accumulate(&grads);
            }
            opt.step(model.params_mut(), &ids)?;
        }
        losses.push(sum / order.chunks(cfg.batch_size).len() as f64);
    }
    model.params_mut().set_all_frozen();
    Ok(losses)
}

/// Every text of a corpus split as prompt/continuation pairs. Profile
/// sentences appear twice: once unprompted and once after the plain-words
/// description of the same profile. Answers (instruction, regularizer and
/// both sides of each preference pair) follow a prompt that spells out the
/// user's profile before the question, so the model learns to answer from
/// context the way it later must answer from the image.
pub fn pretraining_text(corpus: &Corpus, split: Option<Split>) -> Vec<TextPair> {
    let keep = |s: Split| split.is_none_or(|x| x == s);
    let pair = |p: String, c: &str| TextPair {
        prompt: p,
        continuation: c.to_string(),
    };
    let ctx = |p: &ProfileSpec, q: &str| format!("{} {q}", p.description());
    let pt = || corpus.pt.iter().filter(|r| keep(r.split));
    let mut out: Vec<TextPair> = pt().map(|r| pair(String::new(), &r.profile_text)).collect();
    out.extend(pt().map(|r| pair(r.profile.description(), &r.profile_text)));
    out.extend(
        corpus
            .instruct
            .iter()
            .chain(&corpus.regularizer)
            .filter(|r| keep(r.split))
            .map(|r| pair(ctx(&r.profile, &r.question), &r.answer)),
    );
    for r in corpus.dpo.iter().filter(|r| keep(r.split)) {
        out.push(pair(ctx(&r.profile, &r.question), &r.chosen));
        out.push(pair(ctx(&r.profile, &r.question), &r.rejected));
    }
    out
}
