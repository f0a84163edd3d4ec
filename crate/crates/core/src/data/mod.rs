//! Datasets for the three training stages and a synthetic corpus.
//!
//! Every example carries a "face card": a small image whose pixels encode
//! a user profile (age bin, gender, race, emotion). The generator writes
//! four JSONL files and one binary file per image:
//!
//! | file | record | fields |
//! |---|---|---|
//! | `pt.jsonl` | [`PtRecord`] | `id`, `split`, `image`, `profile`, `question` (empty), `profile_text` |
//! | `instruct.jsonl` | [`InstructRecord`] | `id`, `split`, `image`, `profile`, `question`, `answer`, `source_tag` |
//! | `dpo.jsonl` | [`DpoRecord`] | `id`, `split`, `image`, `profile`, `question`, `chosen`, `rejected` |
//! | `regularizer.jsonl` | [`InstructRecord`] | as above, `source_tag` is `docci` |
//!
//! `image` is a path relative to the corpus directory; the tensor format is
//! described at [`encode_tensor`]. `profile` holds the classes as their
//! labels (`"20-29"`, `"female"`, `"east asian"`, `"happy"`) plus
//! `extra_attributes`. `split` is `train`, `val` or `test`. `manifest.json`
//! records the config, split counts and a SHA-256 digest per file.

mod assign;
mod corpus;
mod image;
mod mix;
mod profile;
mod records;
mod scoring;
mod store;
pub mod templates;

pub use assign::{
    assign_by_similarity, bag_of_words_cosine, words, BagOfWords, Pairing, Similarity,
};
pub use corpus::{
    build_corpus, load_image, split_counts, Corpus, CorpusConfig, CorpusManifest, CorpusSizes,
    DpoRecord, InstructRecord, PtRecord, Split, SplitCounts, CORPUS_FORMAT, CORPUS_VERSION,
    MANIFEST_FILE, PROFILES_PER_QUESTION, PUBLISHED_SPLIT,
};
pub use image::{synth_image, CARD_CHANNELS, CARD_NOISE, CARD_SEPARATION, CARD_SIDE, CARD_TILE};
pub use mix::{mix_streams, Mixed};
pub use profile::{
    parse_profile, render_personalization_prompt, render_profile, Age, Demographics, Emotion,
    Gender, ProfileSpec, Race,
};
pub use records::{DpoExample, InstructExample, PtExample, SourceTag};
pub use scoring::{score_categories, topic_of, CategorySchema, CategoryScore, ScoreSheet, Topic};
pub use store::{decode_tensor, encode_tensor, parse_jsonl, read_tensor, to_jsonl};
