use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;
const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

/// Characters that always form their own token and attach to the previous
/// word when decoding.
const PUNCT: &[char] = &['.', ',', '?', '!', ';', ':'];

/// Word-level tokenizer: words split on whitespace, with the characters in
/// `.,?!;:` split off as separate tokens.
///
/// Decoding inserts a space between words and none before punctuation, so
/// `decode(encode(s)) == s` holds for text written in that normal form
/// (single spaces, punctuation glued to the preceding word), which is how
/// the corpus generator writes everything.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Tokenizer {
    fn from(vocab: Vec<String>) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { vocab, index }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.vocab
    }
}

pub fn pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut start = 0;
        for (i, c) in word.char_indices() {
            if PUNCT.contains(&c) {
                if start < i {
                    out.push(&word[start..i]);
                }
                out.push(&word[i..i + c.len_utf8()]);
                start = i + c.len_utf8();
            }
        }
        if start < word.len() {
            out.push(&word[start..]);
        }
    }
    out
}

fn is_punct(piece: &str) -> bool {
    let mut chars = piece.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if PUNCT.contains(&c))
}

impl Tokenizer {
    /// Builds a vocabulary from every piece in `texts`, sorted so the result
    /// does not depend on text order.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<&str> = texts.into_iter().flat_map(pieces).collect();
        let vocab: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(
                words
                    .into_iter()
                    .filter(|w| !RESERVED.contains(w))
                    .map(String::from),
            )
            .collect();
        vocab.into()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Never yields a reserved id other than `UNK`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        pieces(text)
            .into_iter()
            .map(|p| match self.index.get(p) {
                Some(&id) if id >= RESERVED.len() => id,
                _ => UNK,
            })
            .collect()
    }

    /// Skips `PAD`, `BOS`, `EOS` and `SEP`.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS | SEP) {
                continue;
            }
            let piece = self.vocab.get(id).map_or("<unk>", String::as_str);
            if !out.is_empty() && !is_punct(piece) {
                out.push(' ');
            }
            out.push_str(piece);
        }
        out
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    /// `[BOS] question [SEP]`; an empty question gives `[BOS, SEP]`.
    pub fn prompt_ids(&self, question: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(question));
        ids.push(SEP);
        ids
    }

    /// `answer [EOS]`.
    pub fn answer_ids(&self, answer: &str) -> Vec<usize> {
        let mut ids = self.encode(answer);
        ids.push(EOS);
        ids
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn splits_punctuation() {
        assert_eq!(
            pieces("The person appears to be east asian female, approximately 20-29 years old."),
            vec![
                "The",
                "person",
                "appears",
                "to",
                "be",
                "east",
                "asian",
                "female",
                ",",
                "approximately",
                "20-29",
                "years",
                "old",
                "."
            ]
        );
    }

    #[test]
    fn reserved_ids_never_come_from_text() {
        let t = Tokenizer::from_corpus(["hello <eos> world"]);
        let ids = t.encode("<eos> <bos> hello");
        assert_eq!(ids[0], UNK);
        assert_eq!(ids[1], UNK);
        assert!(ids[2] > UNK);
    }

    #[test]
    fn prompt_and_answer_framing() {
        let t = Tokenizer::from_corpus(["how old am i?"]);
        assert_eq!(t.prompt_ids(""), vec![BOS, SEP]);
        let a = t.answer_ids("old");
        assert_eq!(a.last(), Some(&EOS));
        assert_eq!(t.decode(&t.prompt_ids("how old am i?")), "how old am i?");
    }

    fn normal_text() -> impl Strategy<Value = String> {
        let word = prop::sample::select(vec![
            "the", "person", "appears", "20-29", "east", "asian", "years", "old", "you", "don't",
        ]);
        let punct = prop::sample::select(vec!["", "", "", ".", ",", "?", "!"]);
        prop::collection::vec((word, punct), 1..20).prop_map(|parts| {
            parts
                .into_iter()
                .map(|(w, p)| format!("{w}{p}"))
                .collect::<Vec<_>>()
                .join(" ")
        })
    }

    proptest! {
        #[test]
        fn decode_encode_round_trips(s in normal_text()) {
            let t = Tokenizer::from_corpus([s.as_str()]);
            prop_assert_eq!(t.decode(&t.encode(&s)), s);
        }
    }
}
