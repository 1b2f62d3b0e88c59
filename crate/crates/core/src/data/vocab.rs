use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::tokenize::tokenize;
use super::{DatasetManifest, END, NUM_SPECIAL, START, UNK};
use crate::error::{Error, Result};

const SPECIALS: [&str; NUM_SPECIAL] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Token/id mapping. Ids 0..4 are the special tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    min_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    min_freq: usize,
    tokens: Vec<String>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = String;

    fn try_from(f: VocabFile) -> std::result::Result<Self, String> {
        if f.tokens.len() < NUM_SPECIAL || f.tokens[..NUM_SPECIAL] != SPECIALS {
            return Err("vocabulary must start with the four special tokens".into());
        }
        let v = Vocabulary::from_tokens(f.tokens[NUM_SPECIAL..].to_vec(), f.min_freq);
        if v.tokens.len() != f.tokens.len() {
            return Err("vocabulary contains duplicate tokens".into());
        }
        Ok(v)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            min_freq: v.min_freq,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    fn from_tokens(kept: Vec<String>, min_freq: usize) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut ids: HashMap<String, usize> = tokens.iter().cloned().zip(0..).collect();
        for t in kept {
            if !ids.contains_key(&t) {
                ids.insert(t.clone(), tokens.len());
                tokens.push(t);
            }
        }
        Self { tokens, ids, min_freq }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    /// Unknown tokens, and the special token strings themselves, map to UNK.
    pub fn id(&self, token: &str) -> usize {
        match self.ids.get(token) {
            Some(&id) if id >= NUM_SPECIAL => id,
            _ => UNK,
        }
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[START] + ids + [END]`.
    pub fn encode(&self, caption: &str) -> Vec<usize> {
        let mut out = vec![START];
        out.extend(tokenize(caption).iter().map(|t| self.id(t)));
        out.push(END);
        out
    }

    /// Token strings for `ids`, skipping special tokens other than UNK.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id == UNK || id >= NUM_SPECIAL)
            .map(|&id| self.token(id).unwrap_or(SPECIALS[UNK]).to_string())
            .collect()
    }
}

/// Frequency-ordered vocabulary over tokenized captions. Ties break by code point.
pub fn build_vocabulary_from_captions<'a, I>(captions: I, min_freq: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    let mut any = false;
    for caption in captions {
        any = true;
        for tok in tokenize(caption) {
            *freq.entry(tok).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::Data(
            "cannot build a vocabulary from an empty caption corpus".into(),
        ));
    }
    let mut entries: Vec<(String, usize)> = freq.into_iter().filter(|(_, n)| *n >= min_freq.max(1)).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Vocabulary::from_tokens(
        entries.into_iter().map(|(t, _)| t).collect(),
        min_freq,
    ))
}

pub fn build_vocabulary(manifest: &DatasetManifest, min_freq: usize) -> Result<Vocabulary> {
    build_vocabulary_from_captions(
        manifest
            .samples
            .iter()
            .flat_map(|s| s.captions.iter().map(String::as_str)),
        min_freq,
    )
}

/// Encodes a caption; identical to [`Vocabulary::encode`].
pub fn encode_caption(vocab: &Vocabulary, caption: &str) -> Vec<usize> {
    vocab.encode(caption)
}
