use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{GradCheck, Tape, Tensor};
use crate::error::Error;

pub(crate) fn tiny_model(seed: u64) -> ToyVlm {
    let tok = Tokenizer::from_corpus(["the person looks happy today.", "what is shown here?"]);
    let mut c = ModelConfig::toy(tok.vocab_size());
    c.d_z = 8;
    c.d_h = 16;
    c.n_heads = 2;
    c.image_side = 8;
    c.max_seq = 32;
    c.seed = seed;
    ToyVlm::new(c, tok).unwrap()
}

pub(crate) fn random_image(model: &ToyVlm, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&model.config().image_shape(), |_| {
        rng.random_range(-1.0..1.0)
    })
}

fn logits(model: &ToyVlm, img: &Tensor, q: &[usize], a: &[usize]) -> Tensor {
    let mut tape = Tape::new();
    let h = model.image_prefix(&mut tape, img).unwrap();
    let l = model.forward_logits(&mut tape, h, q, a).unwrap();
    tape.tensor(l)
}

#[test]
fn logits_have_one_row_per_position() {
    let m = tiny_model(0);
    let img = random_image(&m, 1);
    let q = m.tokenizer().prompt_ids("what is shown here?");
    let a = m.tokenizer().answer_ids("the person looks happy.");
    let l = logits(&m, &img, &q, &a);
    assert_eq!(
        l.shape(),
        [
            m.config().num_patches() + q.len() + a.len(),
            m.config().vocab_size
        ]
    );
}

#[test]
fn appending_tokens_never_changes_earlier_rows() {
    let m = tiny_model(0);
    let img = random_image(&m, 2);
    let q = m.tokenizer().prompt_ids("what is shown here?");
    let a = m.tokenizer().answer_ids("the person looks happy today.");
    let full = logits(&m, &img, &q, &a);
    let v = m.config().vocab_size;
    for cut in 0..a.len() {
        let part = logits(&m, &img, &q, &a[..cut]);
        let n = part.numel();
        assert_eq!(
            part.bits().collect::<Vec<_>>(),
            full.data()[..n]
                .iter()
                .map(|x| x.to_bits())
                .collect::<Vec<_>>()
        );
        assert_eq!(part.rows() * v, n);
    }
}

#[test]
fn zero_projector_output_layer_gives_zero_prefix() {
    let mut m = tiny_model(3);
    let (w, b) = (m.projector().fc2.weight, m.projector().fc2.bias);
    m.params_mut().tensor_mut(w).data_mut().fill(0.0);
    m.params_mut().tensor_mut(b).data_mut().fill(0.0);
    let mut tape = Tape::new();
    let h = m.image_prefix(&mut tape, &random_image(&m, 4)).unwrap();
    assert!(tape.value(h).iter().all(|&x| x == 0.0));
}

#[test]
fn blank_image_gives_identical_prefix_rows() {
    let m = tiny_model(5);
    let img = Tensor::zeros(&m.config().image_shape());
    let mut tape = Tape::new();
    let h = m.image_prefix(&mut tape, &img).unwrap();
    let t = tape.tensor(h);
    for r in 1..t.rows() {
        assert_eq!(t.row(r), t.row(0));
    }
}

#[test]
fn same_seed_same_weights() {
    assert_eq!(
        tiny_model(7).params().digest(),
        tiny_model(7).params().digest()
    );
    assert_ne!(
        tiny_model(7).params().digest(),
        tiny_model(8).params().digest()
    );
}

#[test]
fn freeze_masks_select_groups() {
    let mut m = tiny_model(0);
    let proj = m.trainable_parameters(FreezeMask::ProjectorOnly);
    assert_eq!(proj.len(), 4);
    assert!(proj
        .iter()
        .all(|&id| m.params().get(id).group == ParamGroup::Projector));
    let c = m.config().clone();
    let want = c.d_h * c.d_z + c.d_h + c.d_h * c.d_h + c.d_h;
    assert_eq!(m.params().count_in(ParamGroup::Projector), want);
    assert!(m
        .trainable_parameters(FreezeMask::LlmAdaptersOnly)
        .is_empty());
    let llm = m.trainable_parameters(FreezeMask::LlmOnly);
    assert!(llm
        .iter()
        .all(|&id| m.params().get(id).group == ParamGroup::Llm));
    assert!(!m.params().tensor(proj[0]).requires_grad());
}

#[test]
fn encoder_never_receives_gradient() {
    let mut m = tiny_model(0);
    m.trainable_parameters(FreezeMask::ProjectorOnly);
    let img = random_image(&m, 9);
    let q = m.tokenizer().prompt_ids("");
    let a = m.tokenizer().answer_ids("the person looks happy.");
    let mut tape = Tape::new();
    let h = m.image_prefix(&mut tape, &img).unwrap();
    let l = m.forward_logits(&mut tape, h, &q, &a).unwrap();
    let t = answer_targets(m.config().num_patches(), q.len(), &a);
    let loss = tape.cross_entropy_masked(l, &t).unwrap();
    let g = tape.backward(loss).unwrap();
    m.params_mut().accumulate(&g);
    let enc = m.encoder().weight;
    assert!(m.params().tensor(enc).grad().is_none());
    assert!(m.params().tensor(m.projector().fc1.weight).grad().is_some());
}

fn ce_loss(m: &ToyVlm, tape: &mut Tape, img: &Tensor) -> crate::Result<crate::autodiff::Var> {
    let q = m.tokenizer().prompt_ids("what is shown here?");
    let a = m.tokenizer().answer_ids("the person looks happy.");
    let h = m.image_prefix(tape, img)?;
    let l = m.forward_logits(tape, h, &q, &a)?;
    let t = answer_targets(m.config().num_patches(), q.len(), &a);
    tape.cross_entropy_masked(l, &t)
}

#[test]
fn projector_gradients_match_finite_differences() {
    let mut m = tiny_model(11);
    let ids = m.trainable_parameters(FreezeMask::ProjectorOnly);
    let img = random_image(&m, 12);
    let cfg = GradCheck {
        samples: 16,
        ..GradCheck::default()
    };
    let err = check_param_grads(&mut m, &ids, |m, t| ce_loss(m, t, &img), cfg).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn llm_gradients_match_finite_differences() {
    let mut m = tiny_model(13);
    let ids = m.trainable_parameters(FreezeMask::LlmOnly);
    let img = random_image(&m, 14);
    // Softmax ignores a per-row constant, so a key bias gets exactly zero
    // gradient and its relative error would only measure rounding noise.
    let (key_bias, rest): (Vec<_>, Vec<_>) = ids
        .into_iter()
        .partition(|&id| m.params().get(id).name.ends_with("attn.k.bias"));
    let cfg = GradCheck {
        samples: 6,
        ..GradCheck::default()
    };
    let err = check_param_grads(&mut m, &rest, |m, t| ce_loss(m, t, &img), cfg).unwrap();
    assert!(err < 1e-4, "{err}");

    let mut tape = Tape::new();
    let loss = ce_loss(&m, &mut tape, &img).unwrap();
    let g = tape.backward(loss).unwrap();
    for id in key_bias {
        let v = m.params().bind(&mut tape, id);
        assert!(g.get(v).unwrap().iter().all(|x| x.abs() < 1e-12));
    }
}

#[test]
fn single_layer_model_runs() {
    let tok = Tokenizer::from_corpus(["a b c."]);
    let mut c = ModelConfig::toy(tok.vocab_size());
    c.n_layers = 1;
    let m = ToyVlm::new(c, tok).unwrap();
    let img = random_image(&m, 0);
    let g = m
        .generate_greedy(&img, "a", GenerationConfig { max_new_tokens: 3 })
        .unwrap();
    assert!(!g.ids.is_empty() && g.ids.len() <= 3);
}

#[test]
fn overlong_sequences_are_capacity_errors() {
    let m = tiny_model(0);
    let img = random_image(&m, 0);
    let long = vec![5; m.config().max_seq];
    let mut tape = Tape::new();
    let h = m.image_prefix(&mut tape, &img).unwrap();
    assert!(matches!(
        m.forward_logits(&mut tape, h, &long, &[]),
        Err(Error::Capacity { .. })
    ));
}

#[test]
fn wrong_image_shape_is_rejected() {
    let m = tiny_model(0);
    assert!(matches!(
        m.encode_image(&Tensor::zeros(&[3, 4, 4])),
        Err(Error::Dimension { .. })
    ));
    assert!(matches!(
        m.generate_greedy(
            &random_image(&m, 0),
            "",
            GenerationConfig { max_new_tokens: 0 }
        ),
        Err(Error::Config(_))
    ));
}

#[test]
fn answer_targets_align_with_rows() {
    let t = answer_targets(2, 3, &[7, 8]);
    assert_eq!(t, vec![None, None, None, None, Some(7), Some(8), None]);
}

#[test]
fn mismatched_tokenizer_is_a_config_error() {
    let tok = Tokenizer::from_corpus(["a b"]);
    let c = ModelConfig::toy(tok.vocab_size() + 1);
    assert!(matches!(ToyVlm::new(c, tok), Err(Error::Config(_))));
}
