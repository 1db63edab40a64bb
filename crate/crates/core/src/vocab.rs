use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenes::Caption;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Caption as vocabulary indices.
///
/// Starts with BOS; PAD appears only as a suffix. `truncated` marks greedy
/// outputs that hit the length budget before EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    #[serde(default)]
    pub truncated: bool,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self {
            ids,
            truncated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// True for real tokens, false for PAD.
    pub fn mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t != PAD).collect()
    }

    /// Ids with sentinels and padding removed.
    pub fn content(&self) -> Vec<usize> {
        self.ids
            .iter()
            .copied()
            .filter(|&t| t != PAD && t != BOS && t != EOS)
            .collect()
    }

    pub fn padded(&self, len: usize) -> Self {
        let mut ids = self.ids.clone();
        ids.resize(len.max(ids.len()), PAD);
        Self {
            ids,
            truncated: self.truncated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Reserved indices followed by the sorted distinct caption words.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a Caption>) -> Result<Self> {
        let mut words = BTreeSet::new();
        let mut any = false;
        for c in captions {
            any = true;
            words.extend(c.words().iter().cloned());
        }
        if !any {
            return Err(Error::Contract(
                "cannot build a vocabulary from zero captions".into(),
            ));
        }
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(
                words
                    .into_iter()
                    .filter(|w| !RESERVED.contains(&w.as_str())),
            )
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    /// `BOS words... EOS`.
    pub fn encode(&self, caption: &Caption) -> TokenSequence {
        let mut ids = vec![BOS];
        ids.extend(caption.words().iter().map(|w| self.id(w)));
        ids.push(EOS);
        TokenSequence::new(ids)
    }

    pub fn decode(&self, seq: &TokenSequence) -> Caption {
        Caption(
            seq.content()
                .into_iter()
                .map(|t| self.word(t).to_owned())
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::template_corpus;

    #[test]
    fn template_vocab_size() {
        // Content words of the grammar, counted independently of `Vocab`:
        // the was added disappeared moved changed to no change made (10),
        // sizes (2), colors (6), shapes (3).
        let vocab = Vocab::build(&template_corpus()).unwrap();
        assert_eq!(vocab.len(), 4 + 10 + 2 + 6 + 3);
    }

    #[test]
    fn reserved_indices() {
        let vocab = Vocab::build(&template_corpus()).unwrap();
        assert_eq!(vocab.word(PAD), "<pad>");
        assert_eq!(vocab.word(BOS), "<bos>");
        assert_eq!(vocab.word(EOS), "<eos>");
        assert_eq!(vocab.word(UNK), "<unk>");
        assert_eq!(vocab.id("zebra"), UNK);
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(Vocab::build(&[]).is_err());
    }

    #[test]
    fn grammar_encodes_without_unk() {
        let corpus = template_corpus();
        let vocab = Vocab::build(&corpus).unwrap();
        for c in &corpus {
            let seq = vocab.encode(c);
            assert!(!seq.ids.contains(&UNK), "{c}");
            assert_eq!(vocab.decode(&seq), *c);
        }
    }

    #[test]
    fn deterministic_indices() {
        let mut corpus = template_corpus();
        let a = Vocab::build(&corpus).unwrap();
        corpus.reverse();
        let b = Vocab::build(&corpus).unwrap();
        assert_eq!(a.tokens(), b.tokens());
    }
}
