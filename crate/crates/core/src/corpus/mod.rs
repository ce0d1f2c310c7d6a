//! Sentences, provenance labels, corpora, subword segmentation and mixing.

mod bpe;
mod io;
mod mix;
mod vocab;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bpe::{desegment, detokenize, pretokenize, SubwordModel, END_OF_WORD};
pub use io::{read_corpus, read_lines, read_parallel, write_corpus, write_lines, write_parallel};
pub use mix::mix;
pub use vocab::{Vocabulary, BOS, BOS_ID, EOS, EOS_ID, FILLER, FILLER_ID, PAD, PAD_ID, SPECIALS, TAG, TAG_ID, UNK, UNK_ID};

/// An ordered list of tokens. Tokens never contain whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sentence {
    pub tokens: Vec<String>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>) -> Self {
        Self { tokens }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Splits a line on whitespace.
    pub fn from_line(line: &str) -> Self {
        Self {
            tokens: line.split_whitespace().map(str::to_owned).collect(),
        }
    }

    pub fn to_line(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}

impl From<&str> for Sentence {
    fn from(line: &str) -> Self {
        Sentence::from_line(line)
    }
}

/// Where a side of the data came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Provenance {
    Nature,
    Ht,
    Mt,
    Tst,
    Noised(Box<Provenance>),
    Tagged(Box<Provenance>),
}

impl Provenance {
    /// Wraps `inner` as noised. Noising already-noised text is rejected.
    pub fn noised(inner: Provenance) -> Result<Self> {
        if inner.contains_noised() {
            return Err(Error::Provenance(format!("cannot noise {inner} again")));
        }
        Ok(Provenance::Noised(Box::new(inner)))
    }

    /// Wraps `inner` as tagged. Tagging already-tagged text is rejected.
    pub fn tagged(inner: Provenance) -> Result<Self> {
        if inner.contains_tagged() {
            return Err(Error::Provenance(format!("cannot tag {inner} again")));
        }
        Ok(Provenance::Tagged(Box::new(inner)))
    }

    /// The innermost label.
    pub fn base(&self) -> &Provenance {
        match self {
            Provenance::Noised(p) | Provenance::Tagged(p) => p.base(),
            p => p,
        }
    }

    pub fn contains_tagged(&self) -> bool {
        match self {
            Provenance::Tagged(_) => true,
            Provenance::Noised(p) => p.contains_tagged(),
            _ => false,
        }
    }

    pub fn contains_noised(&self) -> bool {
        match self {
            Provenance::Noised(_) => true,
            Provenance::Tagged(p) => p.contains_noised(),
            _ => false,
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Nature => f.write_str("Nature"),
            Provenance::Ht => f.write_str("HT"),
            Provenance::Mt => f.write_str("MT"),
            Provenance::Tst => f.write_str("TST"),
            Provenance::Noised(p) => write!(f, "Noised({p})"),
            Provenance::Tagged(p) => write!(f, "Tagged({p})"),
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let wrapped = |prefix: &str| {
            s.strip_prefix(prefix)
                .and_then(|rest| rest.strip_prefix('('))
                .and_then(|rest| rest.strip_suffix(')'))
        };
        if let Some(inner) = wrapped("Noised") {
            return Provenance::noised(inner.parse()?);
        }
        if let Some(inner) = wrapped("Tagged") {
            return Provenance::tagged(inner.parse()?);
        }
        match s {
            "Nature" => Ok(Provenance::Nature),
            "HT" => Ok(Provenance::Ht),
            "MT" => Ok(Provenance::Mt),
            "TST" => Ok(Provenance::Tst),
            other => Err(Error::Provenance(format!("unknown provenance {other:?}"))),
        }
    }
}

impl Serialize for Provenance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Monolingual corpus with a single language and provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonoCorpus {
    pub sentences: Vec<Sentence>,
    pub language: String,
    pub provenance: Provenance,
}

impl MonoCorpus {
    pub fn new(sentences: Vec<Sentence>, language: impl Into<String>, provenance: Provenance) -> Self {
        Self {
            sentences,
            language: language.into(),
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Sentence,
    pub target: Sentence,
    pub source_provenance: Provenance,
    pub target_provenance: Provenance,
}

/// Aligned sentence pairs. Provenance is tracked per pair because mixed
/// corpora combine bitext and several kinds of synthetic data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub source_language: String,
    pub target_language: String,
}

impl ParallelCorpus {
    pub fn empty(source_language: impl Into<String>, target_language: impl Into<String>) -> Self {
        Self {
            pairs: Vec::new(),
            source_language: source_language.into(),
            target_language: target_language.into(),
        }
    }

    /// Builds a corpus with uniform provenance. Pairs with both sides empty are rejected.
    pub fn from_pairs(
        pairs: Vec<(Sentence, Sentence)>,
        source_language: impl Into<String>,
        target_language: impl Into<String>,
        source_provenance: Provenance,
        target_provenance: Provenance,
    ) -> Result<Self> {
        let mut corpus = Self::empty(source_language, target_language);
        for (source, target) in pairs {
            corpus.push(SentencePair {
                source,
                target,
                source_provenance: source_provenance.clone(),
                target_provenance: target_provenance.clone(),
            })?;
        }
        Ok(corpus)
    }

    pub fn push(&mut self, pair: SentencePair) -> Result<()> {
        if pair.source.is_empty() && pair.target.is_empty() {
            return Err(Error::Data(format!(
                "pair {} has both sides empty",
                self.pairs.len()
            )));
        }
        self.pairs.push(pair);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|p| &p.source)
    }

    pub fn targets(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|p| &p.target)
    }

    /// The shared source provenance, if every pair agrees.
    pub fn source_provenance(&self) -> Option<&Provenance> {
        uniform(self.pairs.iter().map(|p| &p.source_provenance))
    }

    pub fn target_provenance(&self) -> Option<&Provenance> {
        uniform(self.pairs.iter().map(|p| &p.target_provenance))
    }

    /// Source side as a monolingual corpus (provenance of the first pair).
    pub fn source_side(&self) -> MonoCorpus {
        MonoCorpus::new(
            self.sources().cloned().collect(),
            self.source_language.clone(),
            self.pairs
                .first()
                .map(|p| p.source_provenance.clone())
                .unwrap_or(Provenance::Nature),
        )
    }

    pub fn target_side(&self) -> MonoCorpus {
        MonoCorpus::new(
            self.targets().cloned().collect(),
            self.target_language.clone(),
            self.pairs
                .first()
                .map(|p| p.target_provenance.clone())
                .unwrap_or(Provenance::Nature),
        )
    }

    /// Concatenates two corpora over the same language pair.
    pub fn concat(&self, other: &ParallelCorpus) -> Result<ParallelCorpus> {
        check_same_languages(self, other)?;
        let mut out = self.clone();
        out.pairs.extend(other.pairs.iter().cloned());
        Ok(out)
    }

    /// Swaps source and target sides.
    pub fn reversed(&self) -> ParallelCorpus {
        ParallelCorpus {
            pairs: self
                .pairs
                .iter()
                .map(|p| SentencePair {
                    source: p.target.clone(),
                    target: p.source.clone(),
                    source_provenance: p.target_provenance.clone(),
                    target_provenance: p.source_provenance.clone(),
                })
                .collect(),
            source_language: self.target_language.clone(),
            target_language: self.source_language.clone(),
        }
    }

    /// Counts of (source provenance, target provenance) combinations, sorted.
    pub fn provenance_census(&self) -> Vec<((String, String), usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for p in &self.pairs {
            *counts
                .entry((p.source_provenance.to_string(), p.target_provenance.to_string()))
                .or_insert(0usize) += 1;
        }
        counts.into_iter().collect()
    }
}

pub(crate) fn check_same_languages(a: &ParallelCorpus, b: &ParallelCorpus) -> Result<()> {
    if a.source_language != b.source_language || a.target_language != b.target_language {
        return Err(Error::Data(format!(
            "language pair mismatch: {}-{} vs {}-{}",
            a.source_language, a.target_language, b.source_language, b.target_language
        )));
    }
    Ok(())
}

fn uniform<'a>(mut it: impl Iterator<Item = &'a Provenance>) -> Option<&'a Provenance> {
    let first = it.next()?;
    it.all(|p| p == first).then_some(first)
}
