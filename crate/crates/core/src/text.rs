//! Tokenization, vocabulary construction, and sequence encoding.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, canonical_json_pretty, read_json};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercase, split on whitespace, and break trailing periods off into "." tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let lower = word.to_lowercase();
        let stem = lower.trim_end_matches('.');
        let periods = lower.len() - stem.len();
        if stem.is_empty() {
            out.extend(std::iter::repeat_n(".".to_string(), periods));
            continue;
        }
        out.push(stem.to_string());
        out.extend(std::iter::repeat_n(".".to_string(), periods));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    min_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    min_freq: usize,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Keep tokens seen at least `min_freq` times; ids by descending count, ties lexicographic.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_freq: usize) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::contract("min_freq must be at least 1"));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for doc in corpus {
            for t in doc {
                let t = t.as_ref();
                if !SPECIALS.contains(&t) {
                    *counts.entry(t).or_default() += 1;
                }
            }
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()).collect(), min_freq)
    }

    /// Rebuild from ordered non-special tokens.
    pub fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Result<Self> {
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token,
            min_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Non-special tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token[SPECIALS.len()..]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = VocabFile {
            min_freq: self.min_freq,
            tokens: self.tokens().to_vec(),
        };
        atomic_write(path, canonical_json_pretty(&f)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: VocabFile = read_json(path)?;
        Self::from_tokens(f.tokens, f.min_freq).map_err(|e| e.annotate(path.display().to_string()))
    }
}

/// Fixed-width id sequence: BOS, tokens, EOS, then PAD up to `max_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSeq {
    pub ids: Vec<usize>,
    /// Real tokens including BOS and EOS.
    pub length: usize,
    pub max_len: usize,
}

impl EncodedSeq {
    /// Wrap an id list that starts with BOS. Ids after the first EOS are dropped.
    pub fn from_generated(ids: &[usize], max_len: usize) -> Self {
        let end = ids.iter().position(|&t| t == EOS).map_or(ids.len(), |p| p + 1);
        let length = end.min(max_len);
        let mut out = ids[..length].to_vec();
        out.resize(max_len, PAD);
        Self {
            ids: out,
            length,
            max_len,
        }
    }

    pub fn real(&self) -> &[usize] {
        &self.ids[..self.length]
    }

    /// Tokens between BOS and EOS.
    pub fn content(&self) -> &[usize] {
        let r = self.real();
        let start = usize::from(r.first() == Some(&BOS));
        let end = if r.last() == Some(&EOS) && r.len() > start { r.len() - 1 } else { r.len() };
        &r[start..end]
    }
}

pub fn encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_len: usize) -> Result<EncodedSeq> {
    if max_len < 3 {
        return Err(Error::contract(format!("max_len must be at least 3, got {max_len}")));
    }
    let keep = tokens.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(tokens[..keep].iter().map(|t| vocab.id(t.as_ref()).unwrap_or(UNK)));
    ids.push(EOS);
    let length = ids.len();
    ids.resize(max_len, PAD);
    Ok(EncodedSeq { ids, length, max_len })
}

/// Space-joined tokens, stopping at the first EOS. PAD and BOS are dropped; UNK renders as `<unk>`.
pub fn decode_ids(ids: &[usize], vocab: &Vocabulary) -> Result<String> {
    let mut words = Vec::new();
    for &id in ids {
        match id {
            EOS => break,
            PAD | BOS => {}
            _ => words.push(
                vocab
                    .token(id)
                    .ok_or_else(|| Error::contract(format!("token id {id} out of range for vocabulary of {}", vocab.len())))?,
            ),
        }
    }
    Ok(words.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("No pleural effusion."), toks("no pleural effusion ."));
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("the  lungs are clear ."), toks("the lungs are clear ."));
        assert_eq!(tokenize("a. b"), toks("a . b"));
    }

    #[test]
    fn build_vocab_cutoff_and_ties() {
        let corpus = vec![toks("lungs lungs rare"), toks("lungs rare")];
        let v = Vocabulary::build(&corpus, 3).unwrap();
        assert!(v.id("lungs").is_some());
        assert!(v.id("rare").is_none());

        let v = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(v.tokens(), &["lungs".to_string(), "rare".to_string()]);

        let corpus = vec![toks("b a b a b a b a b a")];
        let v = Vocabulary::build(&corpus, 1).unwrap();
        assert!(v.id("a").unwrap() < v.id("b").unwrap());

        let empty: Vec<Vec<String>> = vec![];
        assert_eq!(Vocabulary::build(&empty, 3).unwrap().len(), 4);
        assert!(Vocabulary::build(&empty, 0).is_err());
    }

    #[test]
    fn specials_are_reserved() {
        let v = Vocabulary::build(&[toks("<unk> <pad> x")], 1).unwrap();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.tokens(), &["x".to_string()]);
    }

    #[test]
    fn encode_examples() {
        let v = Vocabulary::build(&[toks("no effusion")], 1).unwrap();
        let e = encode(&toks("no effusion"), &v, 8).unwrap();
        let (no, eff) = (v.id("no").unwrap(), v.id("effusion").unwrap());
        assert_eq!(e.ids, vec![BOS, no, eff, EOS, PAD, PAD, PAD, PAD]);
        assert_eq!(e.length, 4);

        let e = encode(&toks("no pneumothorax"), &v, 8).unwrap();
        assert_eq!(e.ids[2], UNK);

        let ten: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        let e = encode(&ten, &v, 5).unwrap();
        assert_eq!(e.length, 5);
        assert_eq!(e.ids[4], EOS);
        assert_eq!(e.content().len(), 3);

        assert!(encode(&ten, &v, 2).is_err());
    }

    #[test]
    fn decode_examples() {
        let v = Vocabulary::build(&[toks("no effusion .")], 1).unwrap();
        let e = encode(&tokenize("no effusion ."), &v, 10).unwrap();
        assert_eq!(decode_ids(&e.ids, &v).unwrap(), "no effusion .");
        assert_eq!(decode_ids(&[PAD, PAD, PAD], &v).unwrap(), "");
        assert_eq!(decode_ids(&[BOS, UNK, EOS], &v).unwrap(), "<unk>");
        assert!(decode_ids(&[BOS, 99], &v).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::build(&[toks("c b b a a a")], 1).unwrap();
        let p = dir.path().join("vocab.json");
        v.save(&p).unwrap();
        let back = Vocabulary::load(&p).unwrap();
        assert_eq!(back, v);
        let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(raw["tokens"], serde_json::json!(["a", "b", "c"]));
    }

    proptest! {
        #[test]
        fn encode_decode_inverse(
            corpus in prop::collection::vec(prop::collection::vec("[a-e]{1,3}", 0..8), 1..6),
            pick in 0usize..6,
        ) {
            let v = Vocabulary::build(&corpus, 1).unwrap();
            let v2 = Vocabulary::build(&corpus, 1).unwrap();
            prop_assert_eq!(&v, &v2);
            let doc = &corpus[pick % corpus.len()];
            let max_len = (doc.len() + 2).max(3);
            let e = encode(doc, &v, max_len).unwrap();
            prop_assert!(e.real()[e.length - 1] == EOS);
            prop_assert!(e.ids[e.length..].iter().all(|&t| t == PAD));
            let text = decode_ids(&e.ids, &v).unwrap();
            prop_assert_eq!(&text, &doc.join(" "));
            let again = encode(&tokenize(&text), &v, max_len).unwrap();
            prop_assert_eq!(again, e);
        }
    }
}
