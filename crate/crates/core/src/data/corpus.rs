use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::assign::{assign_by_similarity, BagOfWords};
use super::image::{synth_image, CARD_NOISE};
use super::profile::{render_profile, Age, Emotion, Gender, ProfileSpec, Race};
use super::records::{DpoExample, InstructExample, PtExample, SourceTag};
use super::store::{encode_tensor, parse_jsonl, read_tensor, to_jsonl};
use super::templates::{answer, questions, BIAS_QUESTIONS};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic, write_json};

pub const CORPUS_FORMAT: &str = "uvlm-corpus";
pub const CORPUS_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Profiles picked per bias question.
pub const PROFILES_PER_QUESTION: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSizes {
    pub pt: usize,
    pub instruct: usize,
    pub dpo: usize,
    pub regularizer: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        Self {
            pt: 512,
            instruct: 512,
            dpo: 128,
            regularizer: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub sizes: CorpusSizes,
    pub seed: u64,
    /// Standard deviation of the image noise.
    pub noise: f64,
    /// Record the published split counts next to the ratios.
    #[serde(default)]
    pub paper_proportions: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            sizes: CorpusSizes::default(),
            seed: 0,
            noise: CARD_NOISE,
            paper_proportions: false,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.sizes;
        if s.pt == 0 || s.instruct == 0 || s.dpo == 0 || s.regularizer == 0 {
            return Err(Error::Config(format!(
                "corpus sizes must be positive, got {s:?}"
            )));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::Config(format!(
                "image noise {} must be finite and non-negative",
                self.noise
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// 80/10/10: validation and test each get `round(n / 10)`, training the rest.
pub fn split_counts(n: usize) -> SplitCounts {
    let tenth = (n + 5) / 10;
    SplitCounts {
        train: n - 2 * tenth,
        val: tenth,
        test: tenth,
    }
}

fn split_of(i: usize, c: SplitCounts) -> Split {
    if i < c.train {
        Split::Train
    } else if i < c.train + c.val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Published split of the instruction data: 8K train, 1K validation, 1K test.
pub const PUBLISHED_SPLIT: SplitCounts = SplitCounts {
    train: 8000,
    val: 1000,
    test: 1000,
};

/// A line of `pt.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PtRecord {
    pub id: String,
    pub split: Split,
    /// Path of the image file, relative to the corpus directory.
    pub image: String,
    pub profile: ProfileSpec,
    /// Always empty: alignment conditions on the image only.
    pub question: String,
    pub profile_text: String,
}

/// A line of `instruct.jsonl` or `regularizer.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructRecord {
    pub id: String,
    pub split: Split,
    pub image: String,
    pub profile: ProfileSpec,
    pub question: String,
    pub answer: String,
    pub source_tag: SourceTag,
}

/// A line of `dpo.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoRecord {
    pub id: String,
    pub split: Split,
    pub image: String,
    pub profile: ProfileSpec,
    pub question: String,
    pub chosen: String,
    pub rejected: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format: String,
    pub version: u32,
    pub config: CorpusConfig,
    pub counts: BTreeMap<String, SplitCounts>,
    /// Train, validation and test fractions.
    pub split_ratios: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paper_split_counts: Option<SplitCounts>,
    /// SHA-256 of every file, keyed by relative path.
    pub files: BTreeMap<String, String>,
}

impl CorpusManifest {
    /// One digest over all file digests.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, d) in &self.files {
            h.update(name.as_bytes());
            h.update([0]);
            h.update(d.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// An in-memory corpus: records plus the images they reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub pt: Vec<PtRecord>,
    pub instruct: Vec<InstructRecord>,
    pub dpo: Vec<DpoRecord>,
    pub regularizer: Vec<InstructRecord>,
    pub images: BTreeMap<String, Tensor>,
}

fn derive_seed(seed: u64, label: &str) -> u64 {
    let h = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(label.as_bytes())
        .finalize();
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// `n` profiles whose age, gender, race and emotion marginals are each
/// uniform within one example, with the attributes shuffled independently.
fn balanced_profiles(n: usize, rng: &mut ChaCha8Rng) -> Vec<ProfileSpec> {
    fn column<T: Copy>(all: &[T], n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
        let mut v: Vec<T> = (0..n).map(|i| all[i % all.len()]).collect();
        v.shuffle(rng);
        v
    }
    let ages = column(Age::ALL, n, rng);
    let genders = column(Gender::ALL, n, rng);
    let races = column(Race::ALL, n, rng);
    let emotions = column(Emotion::ALL, n, rng);
    (0..n)
        .map(|i| ProfileSpec::new(ages[i], genders[i], races[i], emotions[i]))
        .collect()
}

fn image_path(id: &str) -> String {
    format!("images/{id}.bin")
}

impl Corpus {
    /// Generates every record and image; a pure function of `config`.
    pub fn generate(config: &CorpusConfig) -> Result<Corpus> {
        config.validate()?;
        let sizes = config.sizes;
        let mut images = BTreeMap::new();
        let mut card = |id: &str, p: &ProfileSpec| {
            let path = image_path(id);
            images.insert(
                path.clone(),
                synth_image(p, derive_seed(config.seed, id), config.noise),
            );
            path
        };

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "pt"));
        let counts = split_counts(sizes.pt);
        let pt = balanced_profiles(sizes.pt, &mut rng)
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let id = format!("pt-{i:05}");
                PtRecord {
                    split: split_of(i, counts),
                    image: card(&id, &p),
                    question: String::new(),
                    profile_text: render_profile(&p),
                    profile: p,
                    id,
                }
            })
            .collect();

        let mut instructions = |name: &str, n: usize, tags: &[SourceTag]| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, name));
            let profiles = balanced_profiles(n, &mut rng);
            let mut tag_order: Vec<SourceTag> = (0..n).map(|i| tags[i % tags.len()]).collect();
            tag_order.shuffle(&mut rng);
            let counts = split_counts(n);
            profiles
                .into_iter()
                .zip(tag_order)
                .enumerate()
                .map(|(i, (p, tag))| {
                    let pool = questions(tag);
                    let q = rng.random_range(0..pool.len());
                    let id = format!("{name}-{i:05}");
                    InstructRecord {
                        split: split_of(i, counts),
                        image: card(&id, &p),
                        question: pool[q].to_string(),
                        answer: answer(tag, q, &p),
                        source_tag: tag,
                        profile: p,
                        id,
                    }
                })
                .collect::<Vec<_>>()
        };
        let instruct = instructions(
            "instruct",
            sizes.instruct,
            &[
                SourceTag::FaceTask,
                SourceTag::Alpagasus,
                SourceTag::Alexa,
                SourceTag::Nle,
            ],
        );
        let regularizer = instructions("regularizer", sizes.regularizer, &[SourceTag::Docci]);

        let pool = ProfileSpec::enumerate();
        let qs: Vec<String> = BIAS_QUESTIONS
            .iter()
            .map(|(q, _, _)| q.to_string())
            .collect();
        let k = PROFILES_PER_QUESTION.max(sizes.dpo.div_ceil(qs.len()));
        let pairings = assign_by_similarity(&qs, &pool, k, &BagOfWords)?;
        let mut pairs: Vec<(usize, usize)> = pairings
            .iter()
            .enumerate()
            .flat_map(|(qi, pr)| pr.profiles.iter().map(move |&pi| (qi, pi)))
            .take(sizes.dpo)
            .collect();
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            "dpo",
        )));
        let counts = split_counts(sizes.dpo);
        let dpo = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (qi, pi))| {
                let (q, good, bad) = BIAS_QUESTIONS[qi];
                let id = format!("dpo-{i:05}");
                DpoRecord {
                    split: split_of(i, counts),
                    image: card(&id, &pool[pi]),
                    profile: pool[pi].clone(),
                    question: q.to_string(),
                    chosen: good.to_string(),
                    rejected: bad.to_string(),
                    id,
                }
            })
            .collect();

        let corpus = Corpus {
            config: config.clone(),
            pt,
            instruct,
            dpo,
            regularizer,
            images,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    /// Checks record invariants: unique ids, non-empty text, distinct
    /// preference answers, profile text matching the template, and images
    /// present for every record.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut check = |id: &str, image: &str| -> Result<()> {
            if !ids.insert(id.to_string()) {
                return Err(Error::Validation(format!("duplicate example id `{id}`")));
            }
            if !self.images.contains_key(image) {
                return Err(Error::Data(format!(
                    "example `{id}` references missing image `{image}`"
                )));
            }
            Ok(())
        };
        for r in &self.pt {
            check(&r.id, &r.image)?;
            if !r.question.is_empty() {
                return Err(Error::Validation(format!(
                    "alignment example `{}` has a question",
                    r.id
                )));
            }
            if r.profile_text != render_profile(&r.profile) {
                return Err(Error::Validation(format!(
                    "profile text of `{}` does not match its profile",
                    r.id
                )));
            }
        }
        for r in self.instruct.iter().chain(&self.regularizer) {
            check(&r.id, &r.image)?;
            if r.question.trim().is_empty() || r.answer.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "example `{}` needs a question and an answer",
                    r.id
                )));
            }
        }
        for r in &self.dpo {
            check(&r.id, &r.image)?;
            if r.chosen == r.rejected {
                return Err(Error::Validation(format!(
                    "preference example `{}` has identical answers",
                    r.id
                )));
            }
        }
        Ok(())
    }

    fn files(&self) -> Vec<(String, Vec<u8>)> {
        let mut files = vec![
            ("pt.jsonl".to_string(), to_jsonl(&self.pt)),
            ("instruct.jsonl".to_string(), to_jsonl(&self.instruct)),
            ("dpo.jsonl".to_string(), to_jsonl(&self.dpo)),
            ("regularizer.jsonl".to_string(), to_jsonl(&self.regularizer)),
        ];
        files.extend(
            self.images
                .iter()
                .map(|(p, t)| (p.clone(), encode_tensor(t))),
        );
        files
    }

    pub fn manifest(&self) -> CorpusManifest {
        let mut counts = BTreeMap::new();
        counts.insert("pt".into(), split_counts(self.pt.len()));
        counts.insert("instruct".into(), split_counts(self.instruct.len()));
        counts.insert("dpo".into(), split_counts(self.dpo.len()));
        counts.insert("regularizer".into(), split_counts(self.regularizer.len()));
        CorpusManifest {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            config: self.config.clone(),
            counts,
            split_ratios: [0.8, 0.1, 0.1],
            paper_split_counts: self.config.paper_proportions.then_some(PUBLISHED_SPLIT),
            files: self
                .files()
                .into_iter()
                .map(|(name, bytes)| (name, hex::encode(Sha256::digest(&bytes))))
                .collect(),
        }
    }

    /// Writes the JSONL files, images and `manifest.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<CorpusManifest> {
        for (name, bytes) in self.files() {
            write_atomic(&dir.join(name), &bytes)?;
        }
        let manifest = self.manifest();
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }

    /// Reads a corpus written by [`Corpus::write`], checking every file
    /// against the manifest digests.
    pub fn load(dir: &Path) -> Result<Corpus> {
        let manifest: CorpusManifest = read_json(&dir.join(MANIFEST_FILE))?;
        if manifest.format != CORPUS_FORMAT || manifest.version != CORPUS_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported corpus format {} v{}",
                dir.display(),
                manifest.format,
                manifest.version
            )));
        }
        let mut texts = BTreeMap::new();
        let mut images = BTreeMap::new();
        for (name, digest) in &manifest.files {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if &hex::encode(Sha256::digest(&bytes)) != digest {
                return Err(Error::Data(format!(
                    "{}: digest does not match the manifest",
                    path.display()
                )));
            }
            if name.ends_with(".jsonl") {
                let text = String::from_utf8(bytes)
                    .map_err(|_| Error::Data(format!("{}: not UTF-8", path.display())))?;
                texts.insert(name.clone(), text);
            } else {
                images.insert(name.clone(), super::store::decode_tensor(&bytes, &path)?);
            }
        }
        let parse = |name: &str| -> Result<&str> {
            texts
                .get(name)
                .map(String::as_str)
                .ok_or_else(|| Error::Data(format!("{}: manifest lists no {name}", dir.display())))
        };
        let corpus = Corpus {
            config: manifest.config.clone(),
            pt: parse_jsonl(parse("pt.jsonl")?, &dir.join("pt.jsonl"))?,
            instruct: parse_jsonl(parse("instruct.jsonl")?, &dir.join("instruct.jsonl"))?,
            dpo: parse_jsonl(parse("dpo.jsonl")?, &dir.join("dpo.jsonl"))?,
            regularizer: parse_jsonl(parse("regularizer.jsonl")?, &dir.join("regularizer.jsonl"))?,
            images,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    /// Every text the model will see, for building a tokenizer: profile
    /// sentences and descriptions, questions and answers.
    pub fn texts(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.pt {
            out.push(r.profile_text.clone());
            out.push(r.profile.description());
        }
        for r in self.instruct.iter().chain(&self.regularizer) {
            out.extend([
                r.question.clone(),
                r.answer.clone(),
                r.profile.description(),
            ]);
        }
        for r in &self.dpo {
            out.extend([
                r.question.clone(),
                r.chosen.clone(),
                r.rejected.clone(),
                r.profile.description(),
            ]);
        }
        out
    }

    /// A tokenizer covering [`Corpus::texts`].
    pub fn tokenizer(&self) -> crate::model::Tokenizer {
        let texts = self.texts();
        crate::model::Tokenizer::from_corpus(texts.iter().map(String::as_str))
    }

    fn image(&self, path: &str) -> Tensor {
        self.images[path].clone()
    }

    /// Alignment examples, optionally restricted to one split.
    pub fn pt_examples(&self, split: Option<Split>) -> Vec<PtExample> {
        self.pt
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .map(|r| PtExample {
                id: r.id.clone(),
                image: self.image(&r.image),
                question: r.question.clone(),
                profile_text: r.profile_text.clone(),
            })
            .collect()
    }

    fn to_instruct(
        &self,
        records: &[InstructRecord],
        split: Option<Split>,
    ) -> Vec<InstructExample> {
        records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .map(|r| InstructExample {
                id: r.id.clone(),
                image: self.image(&r.image),
                question: r.question.clone(),
                answer: r.answer.clone(),
                source_tag: r.source_tag,
            })
            .collect()
    }

    pub fn instruct_examples(&self, split: Option<Split>) -> Vec<InstructExample> {
        self.to_instruct(&self.instruct, split)
    }

    pub fn regularizer_examples(&self, split: Option<Split>) -> Vec<InstructExample> {
        self.to_instruct(&self.regularizer, split)
    }

    pub fn dpo_examples(&self, split: Option<Split>) -> Vec<DpoExample> {
        self.dpo
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .map(|r| DpoExample {
                id: r.id.clone(),
                image: self.image(&r.image),
                question: r.question.clone(),
                chosen: r.chosen.clone(),
                rejected: r.rejected.clone(),
            })
            .collect()
    }
}

/// Generates a corpus and writes it to `dir`.
pub fn build_corpus(dir: &Path, config: &CorpusConfig) -> Result<CorpusManifest> {
    Corpus::generate(config)?.write(dir)
}

/// Reads a single image file of a corpus.
pub fn load_image(dir: &Path, relative: &str) -> Result<Tensor> {
    read_tensor(&dir.join(relative))
}
