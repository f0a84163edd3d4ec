//! Runs base pretraining and the three stages on the toy corpus, then reports
//! how well the model memorized it.
//! `cargo run --release -p uvlm --example overfit`

use std::time::Instant;

use uvlm::adapters::AdapterPlan;
use uvlm::data::{Corpus, CorpusConfig, Split};
use uvlm::model::{GenerationConfig, ModelConfig, ToyVlm};
use uvlm::pipeline::{
    per_token_ce, preference_accuracy, pretrain_llm, pretraining_text, EpochSummary,
    PretrainConfig, RunOptions, Session, Stage, StageConfig,
};

fn main() -> uvlm::Result<()> {
    let start = Instant::now();
    let corpus = Corpus::generate(&CorpusConfig::default())?;
    let tokenizer = corpus.tokenizer();
    let mut model = ToyVlm::new(ModelConfig::toy(tokenizer.vocab_size()), tokenizer)?;
    println!("vocab {}", model.tokenizer().vocab_size());

    let pairs = pretraining_text(&corpus, Some(Split::Train));
    let losses = pretrain_llm(&mut model, &pairs, &PretrainConfig::default())?;
    println!(
        "{:>8.1}s pretraining final loss {:.4}",
        start.elapsed().as_secs_f64(),
        losses[losses.len() - 1]
    );
    let mut session = Session::new(model);

    let mut report = |s: &EpochSummary| {
        println!(
            "{:>8.1}s {} epoch {} loss {:.4}",
            start.elapsed().as_secs_f64(),
            s.stage,
            s.epoch,
            s.mean_loss
        )
    };

    let pt = corpus.pt_examples(Some(Split::Train));
    let cfg = StageConfig::toy(Stage::Align);
    session
        .stage1_align(
            &pt,
            &cfg,
            RunOptions {
                on_epoch: Some(&mut report),
                ..Default::default()
            },
        )?
        .completed()?;

    let instruct = corpus.instruct_examples(Some(Split::Train));
    let reg = corpus.regularizer_examples(Some(Split::Train));
    let plan = AdapterPlan::single_lora(session.model.config().n_layers).with_rank(32, 32.0);
    let cfg = StageConfig::toy(Stage::Instruct).with_adapter(plan);
    session
        .stage2_instruct(
            &instruct,
            &reg,
            &cfg,
            RunOptions {
                on_epoch: Some(&mut report),
                ..Default::default()
            },
        )?
        .completed()?;
    println!(
        "stage-2 per-token CE {:.4}",
        per_token_ce(&session.model, &instruct)?
    );
    let exact = instruct
        .iter()
        .filter(|e| {
            session
                .model
                .generate_greedy(&e.image, &e.question, GenerationConfig::default())
                .map(|g| g.text == e.answer)
                .unwrap_or(false)
        })
        .count();
    println!("exact answers {exact}/{}", instruct.len());

    let dpo = corpus.dpo_examples(Some(Split::Train));
    println!(
        "preference accuracy before {:.3}",
        preference_accuracy(&session.model, &dpo)?
    );
    let cfg = StageConfig::toy(Stage::Dpo);
    session
        .stage3_dpo(
            &dpo,
            &cfg,
            RunOptions {
                on_epoch: Some(&mut report),
                ..Default::default()
            },
        )?
        .completed()?;
    println!(
        "preference accuracy after {:.3}",
        preference_accuracy(&session.model, &dpo)?
    );
    println!("checkpoint {}", session.checkpoint().digest()?);
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
