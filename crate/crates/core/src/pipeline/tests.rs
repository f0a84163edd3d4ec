use super::*;
use crate::adapters::{randomize_adapters, AdapterMode, AdapterPlan};
use crate::autodiff::{Tape, Tensor};
use crate::data::{Corpus, CorpusConfig, CorpusSizes, DpoExample, Split};
use crate::model::{answer_targets, ModelConfig, ParamGroup, ToyVlm};

pub(crate) fn small_corpus() -> Corpus {
    Corpus::generate(&CorpusConfig {
        sizes: CorpusSizes {
            pt: 12,
            instruct: 16,
            dpo: 6,
            regularizer: 6,
        },
        seed: 11,
        ..CorpusConfig::default()
    })
    .unwrap()
}

pub(crate) fn small_model(corpus: &Corpus, seed: u64) -> ToyVlm {
    let tok = corpus.tokenizer();
    let mut c = ModelConfig::toy(tok.vocab_size());
    c.d_z = 16;
    c.d_h = 32;
    c.n_heads = 2;
    c.seed = seed;
    ToyVlm::new(c, tok).unwrap()
}

fn quick(stage: Stage) -> StageConfig {
    let mut c = StageConfig::toy(stage);
    c.epochs = 2;
    c.batch_size = 4;
    if stage != Stage::Align {
        c.adapter = Some(AdapterPlan::single_lora(2));
    }
    c
}

fn run_all(corpus: &Corpus, seed: u64, plan: AdapterPlan) -> Session {
    let mut s = Session::new(small_model(corpus, seed));
    s.stage1_align(
        &corpus.pt_examples(None),
        &quick(Stage::Align),
        RunOptions::default(),
    )
    .unwrap()
    .completed()
    .unwrap();
    let instruct = quick(Stage::Instruct).with_adapter(plan.clone());
    s.stage2_instruct(
        &corpus.instruct_examples(None),
        &corpus.regularizer_examples(None),
        &instruct,
        RunOptions::default(),
    )
    .unwrap()
    .completed()
    .unwrap();
    s.stage3_dpo(
        &corpus.dpo_examples(None),
        &quick(Stage::Dpo).with_adapter(plan),
        RunOptions::default(),
    )
    .unwrap()
    .completed()
    .unwrap();
    s
}

#[test]
fn freeze_ledger_holds_for_every_stage() {
    let corpus = small_corpus();
    let s = run_all(&corpus, 1, AdapterPlan::single_lora(2));
    let [align, instruct, dpo] = [&s.provenance[0], &s.provenance[1], &s.provenance[2]];
    assert_eq!(
        align.digests_before[&ParamGroup::Llm],
        align.digests_after[&ParamGroup::Llm]
    );
    assert_eq!(
        align.digests_before[&ParamGroup::Encoder],
        align.digests_after[&ParamGroup::Encoder]
    );
    assert_ne!(
        align.digests_before[&ParamGroup::Projector],
        align.digests_after[&ParamGroup::Projector]
    );
    for r in [instruct, dpo] {
        for g in [ParamGroup::Encoder, ParamGroup::Projector, ParamGroup::Llm] {
            assert_eq!(
                r.digests_before[&g], r.digests_after[&g],
                "{:?} in {}",
                g, r.stage
            );
        }
        assert!(r.freeze_violations().is_empty());
    }
    let (before, after) = dpo.reference_digests.clone().unwrap();
    assert_eq!(before, after);
}

#[test]
fn same_seed_runs_give_identical_checkpoints() {
    let corpus = small_corpus();
    let a = run_all(&corpus, 2, AdapterPlan::single_lora(2))
        .checkpoint()
        .digest()
        .unwrap();
    let b = run_all(&corpus, 2, AdapterPlan::single_lora(2))
        .checkpoint()
        .digest()
        .unwrap();
    assert_eq!(a, b);
    let c = run_all(&corpus, 3, AdapterPlan::single_lora(2))
        .checkpoint()
        .digest()
        .unwrap();
    assert_ne!(a, c);
}

#[test]
fn out_of_order_stages_are_refused() {
    let corpus = small_corpus();
    let mut s = Session::new(small_model(&corpus, 0));
    let err = s
        .stage3_dpo(
            &corpus.dpo_examples(None),
            &quick(Stage::Dpo),
            RunOptions::default(),
        )
        .unwrap_err();
    assert!(matches!(err, crate::Error::PipelineOrder(_)), "{err}");
    let err = s
        .stage2_instruct(
            &corpus.instruct_examples(None),
            &[],
            &quick(Stage::Instruct),
            RunOptions::default(),
        )
        .unwrap_err();
    assert!(matches!(err, crate::Error::PipelineOrder(_)), "{err}");
    let skip = RunOptions {
        allow_skip: true,
        ..Default::default()
    };
    s.stage3_dpo(&corpus.dpo_examples(None), &quick(Stage::Dpo), skip)
        .unwrap()
        .completed()
        .unwrap();
}

#[test]
fn wrong_stage_config_is_rejected() {
    let corpus = small_corpus();
    let mut s = Session::new(small_model(&corpus, 0));
    let err = s
        .stage1_align(
            &corpus.pt_examples(None),
            &quick(Stage::Instruct),
            RunOptions::default(),
        )
        .unwrap_err();
    assert!(matches!(err, crate::Error::Config(_)));
}

#[test]
fn alignment_refuses_a_question() {
    let corpus = small_corpus();
    let mut s = Session::new(small_model(&corpus, 0));
    let mut data = corpus.pt_examples(None);
    data[3].question = "what is this?".into();
    let err = s
        .stage1_align(&data, &quick(Stage::Align), RunOptions::default())
        .unwrap_err();
    assert!(
        matches!(err, crate::Error::Contract(ref m) if m.contains(&data[3].id)),
        "{err}"
    );
}

#[test]
fn instruction_tuning_needs_an_adapter_plan() {
    let corpus = small_corpus();
    let mut s = Session::new(small_model(&corpus, 0));
    let mut cfg = quick(Stage::Instruct);
    cfg.adapter = None;
    let skip = RunOptions {
        allow_skip: true,
        ..Default::default()
    };
    let err = s
        .stage2_instruct(&corpus.instruct_examples(None), &[], &cfg, skip)
        .unwrap_err();
    assert!(matches!(err, crate::Error::Config(_)));
}

#[test]
fn mole_stage_records_three_experts() {
    let corpus = small_corpus();
    let s = run_all(&corpus, 4, AdapterPlan::mole(2));
    let summary = StageSummary::from(&s.provenance[1]);
    assert_eq!(summary.adapter_mode.as_deref(), Some("mole"));
    assert_eq!(summary.experts, Some(3));
    assert_eq!(s.model.adapter_plan().unwrap().mode, AdapterMode::Mole);
}

#[test]
fn answer_loss_ignores_image_and_question_rows() {
    let corpus = small_corpus();
    let m = small_model(&corpus, 5);
    let ex = &corpus.instruct_examples(None)[0];
    let mut tape = Tape::new();
    let loss = answer_ce(&m, &mut tape, &ex.image, &ex.question, &ex.answer).unwrap();
    let got = tape.item(loss);

    // Oracle: mean of −log softmax over the answer rows only, computed from
    // the raw logits.
    let tok = m.tokenizer();
    let (q, a) = (tok.prompt_ids(&ex.question), tok.answer_ids(&ex.answer));
    let mut t2 = Tape::new();
    let h = m.image_prefix(&mut t2, &ex.image).unwrap();
    let logits = m.forward_logits(&mut t2, h, &q, &a).unwrap();
    let l = t2.tensor(logits);
    let start = m.config().num_patches() + q.len() - 1;
    let mut want = 0.0;
    for (j, &target) in a.iter().enumerate() {
        let row = l.row(start + j);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        want += lse - row[target];
    }
    want /= a.len() as f64;
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");

    let targets = answer_targets(m.config().num_patches(), q.len(), &a);
    assert!(targets[..start].iter().all(Option::is_none));
    assert_eq!(targets.iter().flatten().count(), a.len());
}

fn dpo_fixture() -> (ToyVlm, Vec<DpoExample>) {
    let corpus = small_corpus();
    let mut m = small_model(&corpus, 6);
    crate::adapters::attach(&mut m, &AdapterPlan::single_lora(2), 0).unwrap();
    randomize_adapters(&mut m, 0.1, 1);
    (m, corpus.dpo_examples(None))
}

#[test]
fn dpo_loss_is_ln2_at_the_reference() {
    let (m, data) = dpo_fixture();
    let mut tape = Tape::new();
    let out = dpo_loss(&m, &m.clone(), &mut tape, &data, 0.1).unwrap();
    assert!((tape.item(out.loss) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(out.margins.iter().all(|&x| x == 0.0));
    assert_eq!(out.degenerate, 0);
}

#[test]
fn dpo_loss_decreases_with_margin() {
    let sweep: Vec<f64> = (0..=2000).map(|i| -10.0 + i as f64 * 0.01).collect();
    for w in sweep.windows(2) {
        assert!(dpo_pair_loss(w[1]) < dpo_pair_loss(w[0]), "{w:?}");
    }
    assert!(dpo_pair_loss(40.0) < 1e-15);
    assert!((dpo_pair_loss(-40.0) - 40.0).abs() < 1e-12);
}

#[test]
fn degenerate_pairs_are_counted() {
    let (m, mut data) = dpo_fixture();
    data[0].rejected = data[0].chosen.clone();
    let mut tape = Tape::new();
    let refs: Vec<(f64, f64)> = data
        .iter()
        .map(|e| reference_log_probs(&m, e).unwrap())
        .collect();
    let mut perturbed = m.clone();
    randomize_adapters(&mut perturbed, 0.1, 9);
    let out = dpo_loss_with_reference(&perturbed, &mut tape, &data, &refs, 0.1).unwrap();
    assert_eq!(out.degenerate, 1);
    assert_eq!(out.margins[0], 0.0);
}

#[test]
fn one_step_raises_the_margin() {
    let (mut m, data) = dpo_fixture();
    let ex = &data[0];
    let refs = reference_log_probs(&m, ex).unwrap();
    let margin = |m: &ToyVlm| {
        let (c, r) = reference_log_probs(m, ex).unwrap();
        0.1 * ((c - refs.0) - (r - refs.1))
    };
    let before = margin(&m);
    let ids = m.trainable_parameters(crate::model::FreezeMask::LlmAdaptersOnly);
    let mut tape = Tape::new();
    let term = dpo_pair(&m, &mut tape, ex, refs, 0.1).unwrap();
    let grads = tape.backward(term.loss).unwrap();
    m.params_mut().accumulate(&grads);
    let mut opt = Optimizer::new(OptimizerConfig::sgd(1e-3)).unwrap();
    opt.step(m.params_mut(), &ids).unwrap();
    let after = margin(&m);
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn resume_matches_the_uninterrupted_run() {
    let corpus = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.json");
    let cfg = quick(Stage::Instruct);
    let data = corpus.instruct_examples(None);
    let reg = corpus.regularizer_examples(None);
    let skip = || RunOptions {
        allow_skip: true,
        ..Default::default()
    };

    let mut full = Session::new(small_model(&corpus, 7));
    full.stage2_instruct(&data, &reg, &cfg, skip())
        .unwrap()
        .completed()
        .unwrap();

    let mut part = Session::new(small_model(&corpus, 7));
    let out = part
        .stage2_instruct(
            &data,
            &reg,
            &cfg,
            RunOptions {
                max_batches: Some(5),
                ..skip()
            },
        )
        .unwrap();
    assert!(matches!(
        out,
        Outcome::Interrupted {
            batches_done: 5,
            ..
        }
    ));
    part.checkpoint().save(&path).unwrap();
    let mut resumed = Checkpoint::load(&path).unwrap().into_session().unwrap();
    resumed
        .stage2_instruct(&data, &reg, &cfg, skip())
        .unwrap()
        .completed()
        .unwrap();

    assert_eq!(
        full.checkpoint().digest().unwrap(),
        resumed.checkpoint().digest().unwrap()
    );
}

#[test]
fn resume_with_other_data_is_refused() {
    let corpus = small_corpus();
    let cfg = quick(Stage::Instruct);
    let data = corpus.instruct_examples(None);
    let mut s = Session::new(small_model(&corpus, 7));
    let opts = RunOptions {
        allow_skip: true,
        max_batches: Some(1),
        ..Default::default()
    };
    s.stage2_instruct(&data, &[], &cfg, opts).unwrap();
    let err = s
        .stage2_instruct(
            &data[1..],
            &[],
            &cfg,
            RunOptions {
                allow_skip: true,
                ..Default::default()
            },
        )
        .unwrap_err();
    assert!(matches!(err, crate::Error::Checkpoint(_)));
    let err = s
        .stage1_align(
            &corpus.pt_examples(None),
            &quick(Stage::Align),
            RunOptions::default(),
        )
        .unwrap_err();
    assert!(matches!(err, crate::Error::PipelineOrder(_)));
}

#[test]
fn periodic_checkpoints_are_written() {
    let corpus = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("auto.json");
    let mut s = Session::new(small_model(&corpus, 8));
    let opts = RunOptions {
        checkpoint_every: Some((2, path.clone())),
        ..Default::default()
    };
    s.stage1_align(&corpus.pt_examples(None), &quick(Stage::Align), opts)
        .unwrap()
        .completed()
        .unwrap();
    let saved = Checkpoint::load(&path).unwrap();
    assert!(saved.progress.is_some());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let corpus = small_corpus();
    let s = run_all(&corpus, 9, AdapterPlan::mole(2));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    s.checkpoint().save(&path).unwrap();
    let back = Checkpoint::load_for(&path, s.model.config())
        .unwrap()
        .into_session()
        .unwrap();
    let ex = &corpus.instruct_examples(Some(Split::Train))[0];
    let logits = |m: &ToyVlm| -> Tensor {
        let mut tape = Tape::new();
        let tok = m.tokenizer();
        let h = m.image_prefix(&mut tape, &ex.image).unwrap();
        let l = m
            .forward_logits(
                &mut tape,
                h,
                &tok.prompt_ids(&ex.question),
                &tok.answer_ids(&ex.answer),
            )
            .unwrap();
        tape.tensor(l)
    };
    let (a, b) = (logits(&s.model), logits(&back.model));
    assert!(a.bits().eq(b.bits()));
    assert_eq!(back.provenance.len(), 3);
    assert_eq!(
        s.checkpoint().digest().unwrap(),
        back.checkpoint().digest().unwrap()
    );

    let mut other = s.model.config().clone();
    other.d_h = 16;
    assert!(matches!(
        Checkpoint::load_for(&path, &other),
        Err(crate::Error::Checkpoint(_))
    ));
}

#[test]
fn reset_adapters_starts_fresh() {
    let corpus = small_corpus();
    let mut s = run_all(&corpus, 10, AdapterPlan::single_lora(2));
    let before = s.model.params().digest_group(ParamGroup::Adapter);
    s.provenance.pop();
    let mut cfg = quick(Stage::Dpo).with_adapter(AdapterPlan::single_lora(2));
    cfg.reset_adapters = true;
    cfg.epochs = 1;
    let rec = s
        .stage3_dpo(&corpus.dpo_examples(None), &cfg, RunOptions::default())
        .unwrap()
        .completed()
        .unwrap();
    // A fresh zero-B attachment is the base model: every margin starts at 0.
    assert_ne!(s.model.params().digest_group(ParamGroup::Adapter), before);
    assert!(rec.epoch_losses[0] < std::f64::consts::LN_2 + 1e-9);
}

#[test]
fn pretraining_trains_only_the_llm() {
    let corpus = small_corpus();
    let mut m = small_model(&corpus, 12);
    let before = crate::pipeline::group_digests(&m);
    let text = pretraining_text(&corpus, Some(Split::Train));
    assert_eq!(text.len(), 2 * 10 + 12 + 4 + 2 * 4);
    let cfg = PretrainConfig {
        epochs: 3,
        batch_size: 8,
        ..PretrainConfig::default()
    };
    let losses = pretrain_llm(&mut m, &text, &cfg).unwrap();
    assert!(losses[2] < losses[0]);
    let after = crate::pipeline::group_digests(&m);
    assert_ne!(before[&ParamGroup::Llm], after[&ParamGroup::Llm]);
    assert_eq!(
        before[&ParamGroup::Projector],
        after[&ParamGroup::Projector]
    );
    assert_eq!(before[&ParamGroup::Encoder], after[&ParamGroup::Encoder]);

    crate::adapters::attach(&mut m, &AdapterPlan::single_lora(2), 0).unwrap();
    assert!(matches!(
        pretrain_llm(&mut m, &text, &cfg),
        Err(crate::Error::PipelineOrder(_))
    ));
}
