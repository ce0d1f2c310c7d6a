//! Byte-pair-encoding style subword model over whitespace-pretokenized text.
//!
//! Words are split into characters, the last one carrying [`END_OF_WORD`].
//! Training greedily merges the most frequent adjacent symbol pair; ties go to
//! the lexicographically smallest pair so the merge list is deterministic.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

use super::vocab::{Vocabulary, SPECIALS, UNK};
use super::{MonoCorpus, Sentence};

pub const END_OF_WORD: &str = "</w>";
const HEADER: &str = "#tstbt-bpe v1";

#[derive(Debug, Clone)]
pub struct SubwordModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    alphabet: BTreeSet<String>,
    vocab: Vocabulary,
}

impl PartialEq for SubwordModel {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges && self.vocab == other.vocab
    }
}

fn is_special(token: &str) -> bool {
    SPECIALS.contains(&token)
}

fn split_word(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

impl SubwordModel {
    /// Learns up to `merge_count` merges from the joint word counts of `corpora`.
    pub fn train(corpora: &[&MonoCorpus], merge_count: usize) -> Result<Self> {
        let mut word_counts: BTreeMap<&str, u64> = BTreeMap::new();
        for corpus in corpora {
            for sentence in &corpus.sentences {
                for tok in sentence.iter() {
                    if !is_special(tok) {
                        *word_counts.entry(tok).or_insert(0) += 1;
                    }
                }
            }
        }
        if word_counts.is_empty() {
            return Err(Error::Data("cannot train a subword model on an empty corpus".into()));
        }

        let mut words: Vec<(Vec<String>, u64)> =
            word_counts.iter().map(|(w, &c)| (split_word(w), c)).collect();
        let alphabet: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();

        let mut merges = Vec::with_capacity(merge_count);
        for _ in 0..merge_count {
            let mut pair_counts: HashMap<(&str, &str), u64> = HashMap::new();
            for (symbols, count) in &words {
                for w in symbols.windows(2) {
                    *pair_counts.entry((&w[0], &w[1])).or_insert(0) += count;
                }
            }
            let best = pair_counts
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
            let Some(((a, b), _)) = best else { break };
            let pair = (a.to_owned(), b.to_owned());
            for (symbols, _) in &mut words {
                merge_in_place(symbols, &pair.0, &pair.1);
            }
            merges.push(pair);
        }
        Ok(Self::assemble(merges, alphabet))
    }

    fn assemble(merges: Vec<(String, String)>, alphabet: BTreeSet<String>) -> Self {
        let merged = merges.iter().map(|(a, b)| format!("{a}{b}"));
        let vocab = Vocabulary::new(alphabet.iter().cloned().chain(merged));
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        SubwordModel {
            merges,
            ranks,
            alphabet,
            vocab,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Segments one word into subword units.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        if is_special(word) {
            return vec![word.to_owned()];
        }
        let mut symbols = split_word(word);
        if symbols.iter().any(|s| !self.alphabet.contains(s)) {
            return vec![UNK.to_owned()];
        }
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (a, b) = &self.merges[rank];
            merge_in_place(&mut symbols, a, b);
        }
        symbols
    }

    /// Segments a sentence of words into a sentence of subword units.
    pub fn apply(&self, sentence: &Sentence) -> Sentence {
        Sentence::new(sentence.iter().flat_map(|w| self.segment_word(w)).collect())
    }

    /// Segments and maps to ids in one go.
    pub fn encode(&self, sentence: &Sentence) -> Vec<u32> {
        self.vocab.encode(&self.apply(sentence))
    }

    /// Maps ids back to words.
    pub fn decode(&self, ids: &[u32]) -> Sentence {
        desegment(&self.vocab.decode(ids))
    }

    /// Writes the versioned merge list and the vocabulary next to each other.
    pub fn save(&self, merges_path: &Path, vocab_path: &Path) -> Result<()> {
        let mut text = format!("{HEADER}\n");
        for (a, b) in &self.merges {
            text.push_str(a);
            text.push(' ');
            text.push_str(b);
            text.push('\n');
        }
        std::fs::write(merges_path, text).map_err(|e| Error::io(merges_path, e))?;
        self.vocab.save(vocab_path)
    }

    pub fn load(merges_path: &Path, vocab_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::Format(format!("{}: missing {HEADER:?} header", merges_path.display())));
        }
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_owned(), b.to_owned()))
                }
                _ => {
                    return Err(Error::Format(format!(
                        "{}:{}: malformed merge line",
                        merges_path.display(),
                        i + 2
                    )))
                }
            }
        }
        let vocab = Vocabulary::load(vocab_path)?;
        let merged: BTreeSet<String> = merges.iter().map(|(a, b)| format!("{a}{b}")).collect();
        let alphabet = vocab.tokens()[SPECIALS.len()..]
            .iter()
            .filter(|t| !merged.contains(*t))
            .cloned()
            .collect();
        let model = Self::assemble(merges, alphabet);
        if model.vocab != vocab {
            return Err(Error::Format("vocabulary file does not match merge list".into()));
        }
        Ok(model)
    }
}

fn merge_in_place(symbols: &mut Vec<String>, a: &str, b: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == a && symbols[i + 1] == b {
            let right = symbols.remove(i + 1);
            symbols[i].push_str(&right);
        }
        i += 1;
    }
}

/// Joins subword units back into words.
pub fn desegment(units: &Sentence) -> Sentence {
    let mut words = Vec::new();
    let mut current = String::new();
    for unit in units.iter() {
        if is_special(unit) {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(unit.to_owned());
        } else if let Some(stem) = unit.strip_suffix(END_OF_WORD) {
            current.push_str(stem);
            words.push(std::mem::take(&mut current));
        } else {
            current.push_str(unit);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    Sentence::new(words)
}

/// Whitespace split with punctuation detached into separate tokens.
/// Case is preserved; reserved special tokens are kept whole.
pub fn pretokenize(text: &str) -> Sentence {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        if is_special(chunk) {
            tokens.push(chunk.to_owned());
            continue;
        }
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && c != '_') {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            } else {
                word.push(c);
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    Sentence::new(tokens)
}

/// Display form of a token sequence: punctuation re-attached to the preceding
/// token and the filler shown as `___`.
pub fn detokenize(sentence: &Sentence) -> String {
    let mut out = String::new();
    for tok in sentence.iter() {
        let shown = if tok == super::FILLER { "___" } else { tok };
        let attach = tok.chars().count() == 1 && tok.chars().all(|c| c.is_ascii_punctuation());
        if !out.is_empty() && !attach {
            out.push(' ');
        }
        out.push_str(shown);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Provenance;
    use proptest::prelude::*;

    fn mono(lines: &[&str]) -> MonoCorpus {
        MonoCorpus::new(lines.iter().map(|l| Sentence::from_line(l)).collect(), "x", Provenance::Nature)
    }

    /// Counts adjacent pairs by brute force over the raw token stream.
    fn brute_force_first_merge(lines: &[&str]) -> (String, String) {
        let mut counts: Vec<((String, String), u64)> = Vec::new();
        for line in lines {
            for w in line.split_whitespace() {
                let s = split_word(w);
                for i in 0..s.len().saturating_sub(1) {
                    let key = (s[i].clone(), s[i + 1].clone());
                    match counts.iter_mut().find(|(k, _)| *k == key) {
                        Some((_, c)) => *c += 1,
                        None => counts.push((key, 1)),
                    }
                }
            }
        }
        let max = counts.iter().map(|(_, c)| *c).max().unwrap();
        let mut best: Vec<_> = counts.into_iter().filter(|(_, c)| *c == max).map(|(k, _)| k).collect();
        best.sort();
        best.remove(0)
    }

    #[test]
    fn zero_merges_gives_character_vocabulary() {
        let m = SubwordModel::train(&[&mono(&["low low lower"])], 0).unwrap();
        assert!(m.merges().is_empty());
        // specials + {l, o, w</w>, w, e, r</w>}
        assert_eq!(m.vocab().len(), SPECIALS.len() + 6);
    }

    #[test]
    fn first_merge_matches_brute_force_count() {
        let lines = ["low low lower"];
        let m = SubwordModel::train(&[&mono(&lines)], 1).unwrap();
        // "l o" and "o w" tie at 3 occurrences; "l" < "o" lexicographically
        assert_eq!(m.merges()[0], brute_force_first_merge(&lines));
        assert_eq!(m.merges()[0], ("l".to_owned(), "o".to_owned()));
    }

    #[test]
    fn training_is_deterministic() {
        let c = mono(&["the cat sat on the mat", "the dog sat on the log", "a cat and a dog"]);
        let a = SubwordModel::train(&[&c], 20).unwrap();
        let b = SubwordModel::train(&[&c], 20).unwrap();
        assert_eq!(a.merges(), b.merges());
        assert!(a.vocab().len() <= 20 + a.alphabet.len() + SPECIALS.len());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(SubwordModel::train(&[&mono(&[])], 5).is_err());
        assert!(SubwordModel::train(&[], 5).is_err());
    }

    #[test]
    fn unseen_character_maps_to_unknown() {
        let m = SubwordModel::train(&[&mono(&["abc abd"])], 3).unwrap();
        let out = m.apply(&Sentence::from_line("abz ab"));
        assert!(out.iter().any(|u| u == UNK));
        assert_eq!(m.apply(&Sentence::empty()), Sentence::empty());
    }

    #[test]
    fn specials_are_never_split_or_merged() {
        let c = mono(&["<T> aa aa <blank> aa"]);
        let m = SubwordModel::train(&[&c], 10).unwrap();
        assert!(m
            .merges()
            .iter()
            .all(|(a, b)| SPECIALS.iter().all(|s| !a.contains(s) && !b.contains(s))));
        let units = m.apply(&Sentence::from_line("<T> aa <blank>"));
        assert_eq!(units.tokens[0], "<T>");
        assert_eq!(units.tokens.last().unwrap(), "<blank>");
        assert_eq!(desegment(&units).to_line(), "<T> aa <blank>");
    }

    #[test]
    fn save_load_round_trip() {
        let c = mono(&["hello world", "hello there world"]);
        let m = SubwordModel::train(&[&c], 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (mp, vp) = (dir.path().join("merges.txt"), dir.path().join("vocab.txt"));
        m.save(&mp, &vp).unwrap();
        assert_eq!(SubwordModel::load(&mp, &vp).unwrap(), m);
    }

    #[test]
    fn pretokenize_detaches_punctuation() {
        assert_eq!(
            pretokenize("Raise the child, love the child.").to_line(),
            "Raise the child , love the child ."
        );
        assert_eq!(pretokenize("<T> Hi!").to_line(), "<T> Hi !");
    }

    proptest! {
        #[test]
        fn segmentation_inverts_on_training_text(
            lines in prop::collection::vec(prop::collection::vec("[a-e]{1,6}", 1..6), 1..8),
            merges in 0usize..40,
        ) {
            let lines: Vec<String> = lines.into_iter().map(|l| l.join(" ")).collect();
            let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
            let corpus = mono(&refs);
            let m = SubwordModel::train(&[&corpus], merges).unwrap();
            for s in &corpus.sentences {
                let units = m.apply(s);
                prop_assert!(units.iter().all(|u| m.vocab().get(u).is_some()));
                prop_assert_eq!(&desegment(&units), s);
                prop_assert_eq!(&m.decode(&m.encode(s)), s);
            }
        }
    }
}
