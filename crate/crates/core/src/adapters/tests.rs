use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_adapters, save_adapters};
use super::*;
use crate::autodiff::GradCheck;
use crate::model::tests::{random_image, tiny_model};
use crate::model::{answer_targets, check_param_grads, FreezeMask, ModelConfig, Tokenizer};

fn logits(model: &ToyVlm, img: &Tensor) -> Tensor {
    let q = model.tokenizer().prompt_ids("what is shown here?");
    let a = model.tokenizer().answer_ids("the person looks happy.");
    let mut tape = Tape::new();
    let h = model.image_prefix(&mut tape, img).unwrap();
    let l = model.forward_logits(&mut tape, h, &q, &a).unwrap();
    tape.tensor(l)
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.bits().collect()
}

#[test]
fn fresh_adapters_are_transparent() {
    for plan in [AdapterPlan::single_lora(2), AdapterPlan::mole(2)] {
        let mut m = tiny_model(1);
        let img = random_image(&m, 2);
        let before = logits(&m, &img);
        attach(&mut m, &plan, 3).unwrap();
        assert_eq!(bits(&before), bits(&logits(&m, &img)));
    }
}

#[test]
fn detach_restores_the_base_model() {
    let mut m = tiny_model(1);
    let img = random_image(&m, 2);
    let digest = m.params().digest();
    let before = logits(&m, &img);
    attach(&mut m, &AdapterPlan::mole(2), 3).unwrap();
    randomize_adapters(&mut m, 0.5, 4);
    assert_ne!(bits(&before), bits(&logits(&m, &img)));
    let plan = detach(&mut m).unwrap();
    assert_eq!(plan, AdapterPlan::mole(2));
    assert_eq!(m.params().digest(), digest);
    assert_eq!(bits(&before), bits(&logits(&m, &img)));
    assert!(detach(&mut m).is_err());
}

#[test]
fn parameter_count_matches_the_formula() {
    let mut m = tiny_model(0);
    let c = m.config().clone();
    let plan = AdapterPlan::mole(c.n_layers);
    attach(&mut m, &plan, 0).unwrap();
    let r = plan.rank;
    let lora = plan.lora_targets.len() * r * (c.d_h + c.d_h);
    let experts = c.n_layers * plan.experts * r * (c.d_h + c.d_h);
    let routers = c.n_layers * plan.experts * c.d_h;
    assert_eq!(m.adapter_param_count(), lora + experts + routers);
    assert_eq!(m.params().count_in(ParamGroup::Router), routers);
}

#[test]
fn merged_weight_matches_adapted_layer() {
    let mut m = tiny_model(5);
    attach(&mut m, &AdapterPlan::single_lora(2), 6).unwrap();
    randomize_adapters(&mut m, 0.3, 7);
    let target = "layers.1.attn.v";
    let lora = m.lora_module(target).unwrap();
    let lin = m.linear(target).unwrap().clone();
    let w = m.params().tensor(lin.weight).clone();
    let b = m.params().tensor(lin.bias).clone();
    let merged = lora.merge(&w).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = m.config().d_h;
    let h = Tensor::from_fn(&[100, d], |_| rng.random_range(-2.0..2.0));
    let adapted = lora.forward(&w, Some(&b), &h).unwrap();
    let plain = LoraModule {
        b: Tensor::zeros(lora.b.shape()),
        ..lora.clone()
    }
    .forward(&merged, Some(&b), &h)
    .unwrap();
    assert!(adapted.max_abs_diff(&plain) < 1e-9);

    let mut tape = Tape::new();
    let x = tape.constant(h.clone());
    let y = m.apply_linear(&mut tape, x, &lin).unwrap();
    assert!(tape.tensor(y).max_abs_diff(&adapted) < 1e-12);
}

fn rank_of(t: &Tensor) -> usize {
    let (rows, cols) = (t.rows(), t.cols());
    let mut a = t.data().to_vec();
    let mut rank = 0;
    for c in 0..cols {
        let Some(p) =
            (rank..rows).max_by(|&i, &j| a[i * cols + c].abs().total_cmp(&a[j * cols + c].abs()))
        else {
            break;
        };
        if a[p * cols + c].abs() < 1e-9 {
            continue;
        }
        for k in 0..cols {
            a.swap(rank * cols + k, p * cols + k);
        }
        for i in 0..rows {
            if i != rank {
                let f = a[i * cols + c] / a[rank * cols + c];
                for k in 0..cols {
                    a[i * cols + k] -= f * a[rank * cols + k];
                }
            }
        }
        rank += 1;
    }
    rank
}

#[test]
fn update_rank_is_bounded() {
    let mut m = tiny_model(5);
    attach(&mut m, &AdapterPlan::single_lora(2).with_rank(3, 6.0), 6).unwrap();
    randomize_adapters(&mut m, 1.0, 7);
    let lora = m.lora_module("layers.0.attn.q").unwrap();
    let w = Tensor::zeros(&[m.config().d_h, m.config().d_h]);
    let delta = lora.merge(&w).unwrap();
    assert_eq!(rank_of(&delta), 3);
}

#[test]
fn every_token_routes_to_exactly_one_expert() {
    let mut m = tiny_model(9);
    attach(&mut m, &AdapterPlan::mole(2), 10).unwrap();
    randomize_adapters(&mut m, 0.5, 11);
    let img = random_image(&m, 12);
    let q = m.tokenizer().prompt_ids("what is shown here?");
    let mut tape = Tape::new();
    let h = m.image_prefix(&mut tape, &img).unwrap();
    let (_, trace) = m.forward_logits_traced(&mut tape, h, &q, &[]).unwrap();
    assert_eq!(trace.layers.len(), 2);
    for (_, choices) in &trace.layers {
        assert_eq!(choices.len(), m.config().num_patches() + q.len());
        assert!(choices.iter().all(|&k| k < 3));
    }
    let bank = m.mole_ffn(1).unwrap();
    assert_eq!(bank.num_experts(), 3);
}

#[test]
fn routing_ignores_a_shared_logit_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let c = rng.random_range(-10.0..10.0);
        let shifted: Vec<f64> = logits.iter().map(|x| x + c).collect();
        assert_eq!(route_logits(&logits), route_logits(&shifted));
    }
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let mut m = tiny_model(14);
    attach(&mut m, &AdapterPlan::mole(2), 15).unwrap();
    randomize_adapters(&mut m, 0.2, 16);
    m.trainable_parameters(FreezeMask::LlmAdaptersOnly);
    let img = random_image(&m, 17);
    // Router gradients are a straight-through surrogate, not the derivative
    // of the loss, so only the LoRA factors are compared here.
    let mut ids = m.params().ids_in(ParamGroup::Adapter);
    ids.extend(
        m.params()
            .ids_in(ParamGroup::Llm)
            .into_iter()
            .filter(|&id| m.params().get(id).name.ends_with("gamma")),
    );
    m.params_mut().set_all_frozen();
    for &id in &ids {
        m.params_mut().tensor_mut(id).set_requires_grad(true);
    }
    let cfg = GradCheck {
        samples: 8,
        ..GradCheck::default()
    };
    let err = check_param_grads(
        &mut m,
        &ids,
        |m, tape| {
            let q = m.tokenizer().prompt_ids("what is shown here?");
            let a = m.tokenizer().answer_ids("the person looks happy.");
            let h = m.image_prefix(tape, &img)?;
            let l = m.forward_logits(tape, h, &q, &a)?;
            tape.cross_entropy_masked(l, &answer_targets(m.config().num_patches(), q.len(), &a))
        },
        cfg,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn plans_are_validated() {
    let mut m = tiny_model(0);
    let mut bad = AdapterPlan::single_lora(2);
    bad.lora_targets.push("layers.9.attn.q".into());
    assert!(matches!(attach(&mut m, &bad, 0), Err(Error::Config(_))));
    let mut bad = AdapterPlan::mole(2);
    bad.lora_targets.clear();
    assert!(matches!(attach(&mut m, &bad, 0), Err(Error::Config(_))));
    assert!(attach(&mut m, &AdapterPlan::single_lora(2).with_rank(0, 1.0), 0).is_err());
    attach(&mut m, &AdapterPlan::single_lora(2), 0).unwrap();
    assert!(attach(&mut m, &AdapterPlan::single_lora(2), 0).is_err());
    assert_eq!("mole".parse::<AdapterMode>().unwrap(), AdapterMode::Mole);
    assert!("moe".parse::<AdapterMode>().is_err());
}

#[test]
fn adapter_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adapters.json");
    let mut m = tiny_model(20);
    attach(&mut m, &AdapterPlan::mole(2), 21).unwrap();
    randomize_adapters(&mut m, 0.4, 22);
    let img = random_image(&m, 23);
    let want = logits(&m, &img);
    save_adapters(&m, &path).unwrap();

    let mut fresh = tiny_model(20);
    load_adapters(&mut fresh, &path).unwrap();
    assert_eq!(bits(&want), bits(&logits(&fresh, &img)));
    // Loading over existing adapters replaces them.
    load_adapters(&mut fresh, &path).unwrap();
    assert_eq!(bits(&want), bits(&logits(&fresh, &img)));
}

#[test]
fn adapter_checkpoint_refuses_other_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adapters.json");
    let mut m = tiny_model(20);
    attach(&mut m, &AdapterPlan::single_lora(2), 21).unwrap();
    save_adapters(&m, &path).unwrap();

    let tok = Tokenizer::from_corpus(["the person looks happy today.", "what is shown here?"]);
    let other = ToyVlm::new(ModelConfig::toy(tok.vocab_size()), tok).unwrap();
    let mut other = other;
    assert!(matches!(
        load_adapters(&mut other, &path),
        Err(Error::Config(_))
    ));
    assert!(other.adapter_plan().is_none());
}
