use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{FreezeMask, ParamGroup, ParamId, ParamStore};
use super::tokenizer::{self, Tokenizer};
use super::ModelConfig;
use crate::adapters::AttachedAdapters;
use crate::autodiff::{eager, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A linear layer `y = x · Wᵀ + b` with `W: d_out × d_in`.
#[derive(Clone, Debug)]
pub struct Linear {
    /// Name adapters use to target this layer, e.g. `layers.0.attn.q`.
    pub target: String,
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Frozen patch embedder standing in for a pretrained image encoder.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Two-layer MLP mapping vision features (`d_z`) into the word-embedding
/// space (`d_h`).
#[derive(Clone, Debug)]
pub struct Projector {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: Norm,
    pub up: Linear,
    pub down: Linear,
}

/// Decoder-only transformer with a tied output head.
#[derive(Clone, Debug)]
pub struct DecoderLlm {
    pub embed: ParamId,
    /// Learned positions for text rows. Image rows get no positional term.
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub final_ln: Norm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { max_new_tokens: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Emitted ids, including a terminating `EOS` if one was produced.
    pub ids: Vec<usize>,
    pub text: String,
}

/// Expert choices made by each routed FFN during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct RouteTrace {
    pub layers: Vec<(usize, Vec<usize>)>,
}

/// Vision encoder + projector + decoder LLM + tokenizer.
#[derive(Clone, Debug)]
pub struct ToyVlm {
    pub(crate) config: ModelConfig,
    pub(crate) tokenizer: Tokenizer,
    pub(crate) params: ParamStore,
    pub(crate) encoder: VisionEncoder,
    pub(crate) projector: Projector,
    pub(crate) llm: DecoderLlm,
    pub(crate) adapters: Option<AttachedAdapters>,
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn normal(&mut self, name: &str, group: ParamGroup, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.store.insert(name, group, t)
    }

    fn constant(&mut self, name: &str, group: ParamGroup, shape: &[usize], v: f64) -> ParamId {
        self.store.insert(name, group, Tensor::full(shape, v))
    }

    fn linear(
        &mut self,
        prefix: &str,
        target: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
    ) -> Linear {
        let std = 1.0 / (d_in as f64).sqrt();
        Linear {
            target: target.to_string(),
            weight: self.normal(&format!("{prefix}.weight"), group, &[d_out, d_in], std),
            bias: self.constant(&format!("{prefix}.bias"), group, &[d_out], 0.0),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gamma: self.constant(&format!("{prefix}.gamma"), ParamGroup::Llm, &[d], 1.0),
            beta: self.constant(&format!("{prefix}.beta"), ParamGroup::Llm, &[d], 0.0),
        }
    }
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
}

fn lookup_linear(store: &ParamStore, prefix: &str, target: &str) -> Result<Linear> {
    Ok(Linear {
        target: target.to_string(),
        weight: lookup(store, &format!("{prefix}.weight"))?,
        bias: lookup(store, &format!("{prefix}.bias"))?,
    })
}

fn lookup_norm(store: &ParamStore, prefix: &str) -> Result<Norm> {
    Ok(Norm {
        gamma: lookup(store, &format!("{prefix}.gamma"))?,
        beta: lookup(store, &format!("{prefix}.beta"))?,
    })
}

pub(crate) fn block_linear_names(layer: usize) -> [(&'static str, String); 6] {
    ["q", "k", "v", "o", "up", "down"].map(|n| {
        let part = if matches!(n, "up" | "down") {
            "ffn"
        } else {
            "attn"
        };
        (n, format!("layers.{layer}.{part}.{n}"))
    })
}

impl ToyVlm {
    /// Deterministically initializes every weight from `config.seed`.
    pub fn new(config: ModelConfig, tokenizer: Tokenizer) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer has {} entries but config says vocab_size = {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let c = &config;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(c.seed),
            store: ParamStore::new(),
        };
        let pd = c.patch_dim();
        let enc_std = 1.0 / (pd as f64).sqrt();
        init.normal(
            "encoder.patch.weight",
            ParamGroup::Encoder,
            &[c.d_z, pd],
            enc_std,
        );
        init.normal("encoder.patch.bias", ParamGroup::Encoder, &[c.d_z], 0.1);
        init.linear(
            "projector.fc1",
            "projector.fc1",
            ParamGroup::Projector,
            c.d_z,
            c.d_h,
        );
        init.linear(
            "projector.fc2",
            "projector.fc2",
            ParamGroup::Projector,
            c.d_h,
            c.d_h,
        );
        init.normal(
            "llm.embed",
            ParamGroup::Llm,
            &[c.vocab_size, c.d_h],
            1.0 / (c.d_h as f64).sqrt(),
        );
        init.normal("llm.pos", ParamGroup::Llm, &[c.max_seq, c.d_h], 0.1);
        for l in 0..c.n_layers {
            let p = format!("llm.layers.{l}");
            init.norm(&format!("{p}.ln1"), c.d_h);
            for (n, target) in block_linear_names(l) {
                let (d_in, d_out) = match n {
                    "up" => (c.d_h, c.d_ffn()),
                    "down" => (c.d_ffn(), c.d_h),
                    _ => (c.d_h, c.d_h),
                };
                let part = if matches!(n, "up" | "down") {
                    "ffn"
                } else {
                    "attn"
                };
                init.linear(
                    &format!("{p}.{part}.{n}"),
                    &target,
                    ParamGroup::Llm,
                    d_in,
                    d_out,
                );
                if n == "o" {
                    init.norm(&format!("{p}.ln2"), c.d_h);
                }
            }
        }
        init.norm("llm.final_ln", c.d_h);
        Self::from_parts(config, tokenizer, init.store)
    }

    /// Reassembles a model from a parameter store, e.g. after loading a
    /// checkpoint. Every base parameter must be present with the right shape.
    pub(crate) fn from_parts(
        config: ModelConfig,
        tokenizer: Tokenizer,
        mut params: ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        let encoder = VisionEncoder {
            weight: lookup(&params, "encoder.patch.weight")?,
            bias: lookup(&params, "encoder.patch.bias")?,
        };
        let projector = Projector {
            fc1: lookup_linear(&params, "projector.fc1", "projector.fc1")?,
            fc2: lookup_linear(&params, "projector.fc2", "projector.fc2")?,
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("llm.layers.{l}");
            let lin = |n: &str, part: &str| {
                lookup_linear(
                    &params,
                    &format!("{p}.{part}.{n}"),
                    &format!("layers.{l}.{part}.{n}"),
                )
            };
            blocks.push(Block {
                ln1: lookup_norm(&params, &format!("{p}.ln1"))?,
                q: lin("q", "attn")?,
                k: lin("k", "attn")?,
                v: lin("v", "attn")?,
                o: lin("o", "attn")?,
                ln2: lookup_norm(&params, &format!("{p}.ln2"))?,
                up: lin("up", "ffn")?,
                down: lin("down", "ffn")?,
            });
        }
        let llm = DecoderLlm {
            embed: lookup(&params, "llm.embed")?,
            pos: lookup(&params, "llm.pos")?,
            blocks,
            final_ln: lookup_norm(&params, "llm.final_ln")?,
        };
        params.set_all_frozen();
        let model = Self {
            config,
            tokenizer,
            params,
            encoder,
            projector,
            llm,
            adapters: None,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let expect = |id: ParamId, shape: &[usize]| -> Result<()> {
            let p = self.params.get(id);
            if p.tensor.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, config expects {:?}",
                    p.name,
                    p.tensor.shape(),
                    shape
                )));
            }
            Ok(())
        };
        expect(self.encoder.weight, &[c.d_z, c.patch_dim()])?;
        expect(self.projector.fc1.weight, &[c.d_h, c.d_z])?;
        expect(self.projector.fc2.weight, &[c.d_h, c.d_h])?;
        expect(self.llm.embed, &[c.vocab_size, c.d_h])?;
        expect(self.llm.pos, &[c.max_seq, c.d_h])?;
        for b in &self.llm.blocks {
            expect(b.q.weight, &[c.d_h, c.d_h])?;
            expect(b.up.weight, &[c.d_ffn(), c.d_h])?;
            expect(b.down.weight, &[c.d_h, c.d_ffn()])?;
        }
        if self.tokenizer.vocab_size() != c.vocab_size {
            return Err(Error::Checkpoint(
                "tokenizer does not match vocab_size".into(),
            ));
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> &VisionEncoder {
        &self.encoder
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    pub fn llm(&self) -> &DecoderLlm {
        &self.llm
    }

    /// Every linear layer adapters may target, in layer order.
    pub fn linear_targets(&self) -> Vec<&Linear> {
        self.llm
            .blocks
            .iter()
            .flat_map(|b| [&b.q, &b.k, &b.v, &b.o, &b.up, &b.down])
            .collect()
    }

    pub fn linear(&self, target: &str) -> Option<&Linear> {
        self.linear_targets()
            .into_iter()
            .find(|l| l.target == target)
    }

    /// Unfreezes exactly the parameters `mask` selects and returns them.
    pub fn trainable_parameters(&mut self, mask: FreezeMask) -> Vec<ParamId> {
        let ids: Vec<(ParamId, bool)> = self
            .params
            .iter()
            .map(|(id, p)| (id, mask.trains(p.group)))
            .collect();
        let mut out = Vec::new();
        for (id, on) in ids {
            self.params.tensor_mut(id).set_requires_grad(on);
            if on {
                out.push(id);
            }
        }
        out
    }

    /// Vision features `M × d_z` for one image. No gradient ever reaches the
    /// encoder.
    pub fn encode_image(&self, img: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let want = c.image_shape();
        if img.shape() != want {
            return Err(Error::dim("encode_image", img.shape(), &want));
        }
        let (side, p, ch) = (c.image_side, c.patch, c.image_channels);
        let per_side = side / p;
        let pd = c.patch_dim();
        let mut patches = vec![0.0; c.num_patches() * pd];
        let px = img.data();
        for pr in 0..per_side {
            for pc in 0..per_side {
                let dst = &mut patches[(pr * per_side + pc) * pd..][..pd];
                let mut i = 0;
                for chan in 0..ch {
                    for y in 0..p {
                        for x in 0..p {
                            dst[i] = px[chan * side * side + (pr * p + y) * side + pc * p + x];
                            i += 1;
                        }
                    }
                }
            }
        }
        let w = self.params.tensor(self.encoder.weight);
        let b = self.params.tensor(self.encoder.bias);
        let mut feats = eager::matmul_t(&patches, w.data(), c.num_patches(), pd, c.d_z);
        for row in feats.chunks_mut(c.d_z) {
            row.iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
        Tensor::new(vec![c.num_patches(), c.d_z], feats)
    }

    pub(crate) fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        self.params.bind(tape, id)
    }

    pub(crate) fn apply_linear(&self, tape: &mut Tape, x: Var, lin: &Linear) -> Result<Var> {
        let w = self.bind(tape, lin.weight);
        let b = self.bind(tape, lin.bias);
        let y = tape.matmul_t(x, w)?;
        let mut y = tape.add_row(y, b)?;
        if let Some(delta) = crate::adapters::lora_hook(self, tape, x, &lin.target)? {
            y = tape.add(y, delta)?;
        }
        Ok(y)
    }

    /// `H_I` (`M × d_h`) from vision features.
    pub fn project(&self, tape: &mut Tape, feats: Var) -> Result<Var> {
        let (_, w) = tape.rows_cols(feats);
        if w != self.config.d_z || tape.shape(feats).len() != 2 {
            return Err(Error::dim(
                "project",
                tape.shape(feats),
                &[self.config.num_patches(), self.config.d_z],
            ));
        }
        let h = self.apply_linear(tape, feats, &self.projector.fc1)?;
        let h = tape.gelu(h);
        self.apply_linear(tape, h, &self.projector.fc2)
    }

    /// Encodes and projects an image onto `tape`.
    pub fn image_prefix(&self, tape: &mut Tape, img: &Tensor) -> Result<Var> {
        let feats = tape.constant(self.encode_image(img)?);
        self.project(tape, feats)
    }

    /// Logits (`T × V`) for the sequence `H_I ⊕ embed(q) ⊕ embed(a)` with
    /// `T = M + |q| + |a|`. Row `t` depends only on rows `0..=t`.
    pub fn forward_logits(
        &self,
        tape: &mut Tape,
        h_i: Var,
        q_ids: &[usize],
        a_ids: &[usize],
    ) -> Result<Var> {
        self.forward_traced(tape, h_i, q_ids, a_ids, None)
    }

    /// As [`ToyVlm::forward_logits`], also recording MoLE expert choices.
    pub fn forward_logits_traced(
        &self,
        tape: &mut Tape,
        h_i: Var,
        q_ids: &[usize],
        a_ids: &[usize],
    ) -> Result<(Var, RouteTrace)> {
        let mut trace = RouteTrace::default();
        let v = self.forward_traced(tape, h_i, q_ids, a_ids, Some(&mut trace))?;
        Ok((v, trace))
    }

    fn forward_traced(
        &self,
        tape: &mut Tape,
        h_i: Var,
        q_ids: &[usize],
        a_ids: &[usize],
        mut trace: Option<&mut RouteTrace>,
    ) -> Result<Var> {
        let c = &self.config;
        let (m, w) = tape.rows_cols(h_i);
        if w != c.d_h {
            return Err(Error::dim("forward_logits", tape.shape(h_i), &[m, c.d_h]));
        }
        let text: Vec<usize> = q_ids.iter().chain(a_ids).copied().collect();
        let total = m + text.len();
        if total > c.max_seq {
            return Err(Error::Capacity {
                len: total,
                max: c.max_seq,
            });
        }
        let mut x = h_i;
        if !text.is_empty() {
            let embed = self.bind(tape, self.llm.embed);
            let pos = self.bind(tape, self.llm.pos);
            let e = tape.embedding(embed, &text)?;
            let positions: Vec<usize> = (0..text.len()).collect();
            let p = tape.embedding(pos, &positions)?;
            let t = tape.add(e, p)?;
            x = tape.concat_rows(&[h_i, t])?;
        }
        for (l, block) in self.llm.blocks.iter().enumerate() {
            let h = self.norm(tape, x, &block.ln1)?;
            let q = self.apply_linear(tape, h, &block.q)?;
            let k = self.apply_linear(tape, h, &block.k)?;
            let v = self.apply_linear(tape, h, &block.v)?;
            let a = tape.causal_attention(q, k, v, c.n_heads)?;
            let o = self.apply_linear(tape, a, &block.o)?;
            x = tape.add(x, o)?;

            let h = self.norm(tape, x, &block.ln2)?;
            let up = self.apply_linear(tape, h, &block.up)?;
            let up = tape.gelu(up);
            let mut f = self.apply_linear(tape, up, &block.down)?;
            if let Some((delta, choices)) = crate::adapters::mole_hook(self, tape, h, l)? {
                f = tape.add(f, delta)?;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.layers.push((l, choices));
                }
            }
            x = tape.add(x, f)?;
        }
        let x = self.norm(tape, x, &self.llm.final_ln)?;
        let embed = self.bind(tape, self.llm.embed);
        tape.matmul_t(x, embed)
    }

    fn norm(&self, tape: &mut Tape, x: Var, n: &Norm) -> Result<Var> {
        let g = self.bind(tape, n.gamma);
        let b = self.bind(tape, n.beta);
        tape.layer_norm(x, g, b)
    }

    /// Greedy decoding: argmax at each step until `EOS` or
    /// `cfg.max_new_tokens` tokens. An empty question reads out the profile.
    pub fn generate_greedy(
        &self,
        img: &Tensor,
        question: &str,
        cfg: GenerationConfig,
    ) -> Result<Generation> {
        if cfg.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        let feats = self.encode_image(img)?;
        let prompt = self.tokenizer.prompt_ids(question);
        let mut out = Vec::new();
        for _ in 0..cfg.max_new_tokens {
            if self.config.num_patches() + prompt.len() + out.len() >= self.config.max_seq {
                break;
            }
            let mut tape = Tape::new();
            let f = tape.constant(feats.clone());
            let h = self.project(&mut tape, f)?;
            let logits = self.forward_logits(&mut tape, h, &prompt, &out)?;
            let (rows, v) = tape.rows_cols(logits);
            let last = &tape.value(logits)[(rows - 1) * v..];
            let next = eager::argmax(last);
            out.push(next);
            if next == tokenizer::EOS {
                break;
            }
        }
        let text = self.tokenizer.decode(&out);
        Ok(Generation { ids: out, text })
    }
}

/// Label vector aligning `a_ids` with the logits of
/// `forward_logits(h_i, q_ids, a_ids)`: row `m + |q| − 1 + j` predicts
/// `a_ids[j]`, every other row is masked.
pub fn answer_targets(m: usize, q_len: usize, a_ids: &[usize]) -> Vec<Option<usize>> {
    let total = m + q_len + a_ids.len();
    let mut t = vec![None; total];
    for (j, &id) in a_ids.iter().enumerate() {
        t[m + q_len - 1 + j] = Some(id);
    }
    t
}
