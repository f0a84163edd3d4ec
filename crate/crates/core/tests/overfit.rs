//! Small memorization runs for each training stage.

use uvlm::adapters::AdapterPlan;
use uvlm::data::{Corpus, CorpusConfig, CorpusSizes};
use uvlm::model::{GenerationConfig, ModelConfig, ToyVlm};
use uvlm::pipeline::{
    per_token_ce, pretrain_llm, pretraining_text, PretrainConfig, RunOptions, Session, Stage,
    StageConfig,
};

fn corpus(pt: usize, instruct: usize) -> Corpus {
    Corpus::generate(&CorpusConfig {
        sizes: CorpusSizes {
            pt,
            instruct,
            dpo: 8,
            regularizer: 8,
        },
        seed: 21,
        ..CorpusConfig::default()
    })
    .unwrap()
}

fn model(c: &Corpus) -> ToyVlm {
    let tok = c.tokenizer();
    ToyVlm::new(ModelConfig::toy(tok.vocab_size()), tok).unwrap()
}

/// The corpora here are tiny, so the base model gets more passes over them.
fn pretrain(m: &mut ToyVlm, c: &Corpus) {
    let cfg = PretrainConfig {
        epochs: 60,
        ..PretrainConfig::default()
    };
    pretrain_llm(m, &pretraining_text(c, None), &cfg).unwrap();
}

/// Epoch means may rise by at most 5% over the previous epoch.
fn mostly_decreasing(losses: &[f64]) -> bool {
    losses.windows(2).all(|w| w[1] <= w[0] * 1.05)
}

#[test]
fn alignment_memorizes_eight_profiles() {
    let c = corpus(8, 8);
    let mut m = model(&c);
    pretrain(&mut m, &c);
    let mut s = Session::new(m);
    let mut cfg = StageConfig::toy(Stage::Align);
    cfg.epochs = 300;
    cfg.batch_size = 8;
    cfg.optimizer.learning_rate = 1e-2;
    let rec = s
        .stage1_align(&c.pt_examples(None), &cfg, RunOptions::default())
        .unwrap()
        .completed()
        .unwrap();
    let last = *rec.epoch_losses.last().unwrap();
    assert!(last < 0.1, "final L_p {last}");
    assert!(
        mostly_decreasing(&rec.epoch_losses),
        "{:?}",
        rec.epoch_losses
    );
}

#[test]
fn instruction_tuning_memorizes_thirty_two_answers() {
    let c = corpus(8, 32);
    let mut m = model(&c);
    pretrain(&mut m, &c);
    let mut s = Session::new(m);
    let data = c.instruct_examples(None);
    let mut cfg = StageConfig::toy(Stage::Instruct).with_adapter(AdapterPlan::single_lora(2));
    cfg.mix_ratio = 0.0;
    cfg.epochs = 100;
    cfg.optimizer.learning_rate = 1e-2;
    let opts = RunOptions {
        allow_skip: true,
        ..Default::default()
    };
    s.stage2_instruct(&data, &[], &cfg, opts)
        .unwrap()
        .completed()
        .unwrap();
    let ce = per_token_ce(&s.model, &data).unwrap();
    let exact = data
        .iter()
        .filter(|e| {
            s.model
                .generate_greedy(&e.image, &e.question, GenerationConfig::default())
                .unwrap()
                .text
                == e.answer
        })
        .count();
    assert!(ce < 0.1, "per-token CE {ce}");
    assert!(exact >= 30, "{exact}/32 exact");
}
