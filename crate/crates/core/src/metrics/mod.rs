//! Corpus BLEU and ChrF, and the All/Original/Reverse evaluation report.
//!
//! Scoring works on the surface tokens of [`Sentence`]s, which are already
//! whitespace tokenized; no further tokenization or case folding is applied.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{MonoCorpus, ParallelCorpus, Sentence};
use crate::decode::{translate_corpus, DecodeConfig, Translator};
use crate::error::{Error, Result};
use crate::util::Hasher;

pub const BLEU_ORDER: usize = 4;
pub const CHRF_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: [f64; BLEU_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChrfScore {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
    pub max_order: usize,
    pub beta: f64,
}

fn check_lengths(h: usize, r: usize) -> Result<()> {
    if h != r {
        return Err(Error::Data(format!("{h} hypotheses but {r} references")));
    }
    if h == 0 {
        return Err(Error::Data("cannot score an empty corpus".into()));
    }
    Ok(())
}

fn ngram_counts<T: std::hash::Hash + Eq + Clone>(items: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if items.len() >= n {
        for w in items.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// (clipped matches, hypothesis n-grams, reference n-grams) for one order.
fn clipped<T: std::hash::Hash + Eq + Clone>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h.iter().map(|(g, c)| (*c).min(*r.get(g).unwrap_or(&0))).sum();
    (matches, hyp.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

/// Corpus BLEU-4 with a single reference and no smoothing.
pub fn bleu(hypotheses: &[Sentence], references: &[Sentence]) -> Result<BleuScore> {
    check_lengths(hypotheses.len(), references.len())?;
    let mut matches = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let mut ref_totals = [0usize; BLEU_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=BLEU_ORDER {
            let (m, t, rt) = clipped(&h.tokens, &r.tokens, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
            ref_totals[n - 1] += rt;
        }
    }
    // orders absent from both sides (very short corpora) are left out of the mean
    let mut precisions = [0.0; BLEU_ORDER];
    let mut used = Vec::with_capacity(BLEU_ORDER);
    for n in 0..BLEU_ORDER {
        precisions[n] = if totals[n] == 0 { 0.0 } else { matches[n] as f64 / totals[n] as f64 };
        if totals[n] > 0 || ref_totals[n] > 0 {
            used.push(precisions[n]);
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if used.is_empty() || used.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let mean_log = used.iter().map(|p| p.ln()).sum::<f64>() / used.len() as f64;
        100.0 * brevity_penalty * mean_log.exp()
    };
    Ok(BleuScore { score, precisions, brevity_penalty, hyp_len, ref_len })
}

fn chars(s: &Sentence) -> Vec<char> {
    s.iter().flat_map(str::chars).filter(|c| !c.is_whitespace()).collect()
}

/// Corpus ChrF (character orders 1..=6, β = 2, no word n-grams).
///
/// Counts are pooled over the corpus per order; precision and recall are
/// averaged over the orders for which either side has any n-gram, then
/// combined into F-β.
pub fn chrf(hypotheses: &[Sentence], references: &[Sentence]) -> Result<ChrfScore> {
    check_lengths(hypotheses.len(), references.len())?;
    let mut stats = [(0usize, 0usize, 0usize); CHRF_ORDER];
    for (h, r) in hypotheses.iter().zip(references) {
        let (hc, rc) = (chars(h), chars(r));
        for n in 1..=CHRF_ORDER {
            let (m, th, tr) = clipped(&hc, &rc, n);
            let s = &mut stats[n - 1];
            s.0 += m;
            s.1 += th;
            s.2 += tr;
        }
    }
    let (mut p_sum, mut r_sum, mut orders) = (0.0, 0.0, 0usize);
    for &(m, th, tr) in &stats {
        if th == 0 && tr == 0 {
            continue;
        }
        orders += 1;
        p_sum += if th == 0 { 0.0 } else { m as f64 / th as f64 };
        r_sum += if tr == 0 { 0.0 } else { m as f64 / tr as f64 };
    }
    let (precision, recall) = if orders == 0 { (1.0, 1.0) } else { (p_sum / orders as f64, r_sum / orders as f64) };
    let b2 = CHRF_BETA * CHRF_BETA;
    let denom = b2 * precision + recall;
    let f = if denom == 0.0 { 0.0 } else { (1.0 + b2) * precision * recall / denom };
    Ok(ChrfScore { score: 100.0 * f, precision, recall, max_order: CHRF_ORDER, beta: CHRF_BETA })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub bleu: f64,
    pub chrf: f64,
    pub sentences: usize,
}

impl SplitScores {
    pub fn score(hyps: &[Sentence], refs: &[Sentence]) -> Result<SplitScores> {
        Ok(SplitScores { bleu: bleu(hyps, refs)?.score, chrf: chrf(hyps, refs)?.score, sentences: hyps.len() })
    }
}

/// Scores of one system on the All, Original and Reverse splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub testset: String,
    pub all: SplitScores,
    pub original: SplitScores,
    pub reverse: Option<SplitScores>,
    /// Hash of the decode configuration and model identity.
    pub config_hash: String,
}

/// Original (Nature source) and reverse (Nature target) test sets.
#[derive(Debug, Clone)]
pub struct TestSets {
    pub id: String,
    pub original: ParallelCorpus,
    pub reverse: ParallelCorpus,
}

impl TestSets {
    /// Identifier derived from the contents, so reports can be compared safely.
    pub fn content_id(original: &ParallelCorpus, reverse: &ParallelCorpus) -> String {
        let mut h = Hasher::new();
        for c in [original, reverse] {
            for p in &c.pairs {
                h.part(p.source.to_line().as_bytes()).part(p.target.to_line().as_bytes());
            }
            h.part(b"|");
        }
        h.finish()[..16].to_string()
    }

    pub fn new(original: ParallelCorpus, reverse: ParallelCorpus) -> TestSets {
        TestSets { id: Self::content_id(&original, &reverse), original, reverse }
    }
}

/// Fails with the offending lines if any test source or target line occurs in
/// the training lines.
pub fn audit_overlap<'a, I>(training: I, tests: &TestSets) -> Result<()>
where
    I: IntoIterator<Item = &'a Sentence>,
{
    let train: HashSet<&Sentence> = training.into_iter().collect();
    let mut bad = Vec::new();
    for p in tests.original.pairs.iter().chain(&tests.reverse.pairs) {
        for s in [&p.source, &p.target] {
            if !s.is_empty() && train.contains(s) {
                bad.push(s.to_line());
            }
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Overlap(bad))
    }
}

/// Scores hypotheses for both splits. An empty reverse split yields an
/// original-only report whose All equals Original.
pub fn score_splits(
    system: &str,
    tests: &TestSets,
    original_hyps: &[Sentence],
    reverse_hyps: &[Sentence],
    config_hash: String,
) -> Result<EvalReport> {
    let o_refs: Vec<Sentence> = tests.original.targets().cloned().collect();
    let r_refs: Vec<Sentence> = tests.reverse.targets().cloned().collect();
    let original = SplitScores::score(original_hyps, &o_refs)?;
    let reverse = if r_refs.is_empty() && reverse_hyps.is_empty() {
        None
    } else {
        Some(SplitScores::score(reverse_hyps, &r_refs)?)
    };
    let all = match reverse {
        None => original,
        Some(_) => {
            let hyps: Vec<Sentence> = original_hyps.iter().chain(reverse_hyps).cloned().collect();
            let refs: Vec<Sentence> = o_refs.into_iter().chain(r_refs).collect();
            SplitScores::score(&hyps, &refs)?
        }
    };
    Ok(EvalReport { system: system.to_owned(), testset: tests.id.clone(), all, original, reverse, config_hash })
}

/// Decodes both test splits with `model` and scores them.
pub fn evaluate<T: Translator + ?Sized>(
    system: &str,
    model: &T,
    tests: &TestSets,
    cfg: &DecodeConfig,
    model_hash: &str,
) -> Result<EvalReport> {
    let hyps = |c: &ParallelCorpus| -> Result<Vec<Sentence>> {
        if c.is_empty() {
            return Ok(Vec::new());
        }
        let src = MonoCorpus::new(c.sources().cloned().collect(), c.source_language.clone(), c.pairs[0].source_provenance.clone());
        Ok(translate_corpus(model, &src, cfg)?.corpus.targets().cloned().collect())
    };
    let o = hyps(&tests.original)?;
    let r = hyps(&tests.reverse)?;
    let mut h = Hasher::new();
    h.part(model_hash.as_bytes()).part(serde_json::to_string(cfg)?.as_bytes());
    score_splits(system, tests, &o, &r, h.finish())
}

fn fmt1(x: f64) -> String {
    format!("{x:.1}")
}

/// Comparison table with systems as rows and BLEU/ChrF × All/O/R columns.
/// With a baseline, each score is followed by its difference to that row.
#[derive(Debug, Clone)]
pub struct ComparisonTable {
    pub rows: Vec<EvalReport>,
    pub baseline: Option<usize>,
}

impl ComparisonTable {
    pub fn new(rows: Vec<EvalReport>, baseline: Option<usize>) -> Result<ComparisonTable> {
        if rows.is_empty() {
            return Err(Error::Data("a report needs at least one system".into()));
        }
        if rows.iter().any(|r| r.testset != rows[0].testset) {
            return Err(Error::Data("reports were computed on different test sets".into()));
        }
        if baseline.is_some_and(|b| b >= rows.len()) {
            return Err(Error::Config("baseline row out of range".into()));
        }
        Ok(ComparisonTable { rows, baseline })
    }

    fn cells(r: &EvalReport) -> [Option<f64>; 6] {
        let rev = r.reverse;
        [
            Some(r.all.bleu),
            Some(r.original.bleu),
            rev.map(|s| s.bleu),
            Some(r.all.chrf),
            Some(r.original.chrf),
            rev.map(|s| s.chrf),
        ]
    }

    const HEADERS: [&'static str; 6] = ["BLEU All", "BLEU O", "BLEU R", "ChrF All", "ChrF O", "ChrF R"];

    pub fn to_markdown(&self) -> String {
        let base = self.baseline.map(|b| Self::cells(&self.rows[b]));
        let mut out = String::from("| System |");
        for h in Self::HEADERS {
            let _ = write!(out, " {h} |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(6));
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(out, "| {} |", r.system);
            for (k, c) in Self::cells(r).iter().enumerate() {
                let cell = match (c, base.and_then(|b| b[k])) {
                    (None, _) => "-".to_string(),
                    (Some(v), Some(b)) if Some(i) != self.baseline => format!("{} ({:+.1})", fmt1(*v), v - b),
                    (Some(v), _) => fmt1(*v),
                };
                let _ = write!(out, " {cell} |");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let base = self.baseline.map(|b| Self::cells(&self.rows[b]));
        let mut out = String::from("system,testset");
        for h in Self::HEADERS {
            let key = h.to_lowercase().replace(' ', "_");
            let _ = write!(out, ",{key}");
            if base.is_some() {
                let _ = write!(out, ",{key}_delta");
            }
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.system, r.testset);
            for (k, c) in Self::cells(r).iter().enumerate() {
                let _ = write!(out, ",{}", c.map(fmt1).unwrap_or_default());
                if let Some(b) = base {
                    let d = c.zip(b[k]).map(|(v, b)| format!("{:.1}", v - b)).unwrap_or_default();
                    let _ = write!(out, ",{d}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, markdown: &Path, csv: &Path) -> Result<()> {
        std::fs::write(markdown, self.to_markdown()).map_err(|e| Error::io(markdown, e))?;
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: &str) -> Sentence {
        Sentence::from_line(x)
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(bleu(&[s("a")], &[]).is_err());
        assert!(chrf(&[], &[]).is_err());
    }

    #[test]
    fn bleu_components_are_self_consistent() {
        let b = bleu(&[s("the cat sat on the mat today")], &[s("the cat sat on a mat")]).unwrap();
        let mean = b.precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        assert!((b.score - 100.0 * b.brevity_penalty * mean.exp()).abs() < 1e-9);
    }

    fn report(name: &str, o: f64, r: f64, set: &str) -> EvalReport {
        let sc = |x| SplitScores { bleu: x, chrf: x + 10.0, sentences: 1 };
        EvalReport {
            system: name.into(),
            testset: set.into(),
            all: sc((o + r) / 2.0),
            original: sc(o),
            reverse: Some(sc(r)),
            config_hash: String::new(),
        }
    }

    #[test]
    fn table_rows_and_deltas() {
        let t = ComparisonTable::new(vec![report("base", 30.0, 20.0, "x"), report("bt", 29.0, 25.0, "x")], Some(0)).unwrap();
        let md = t.to_markdown();
        assert_eq!(md.lines().count(), 4);
        assert!(md.contains("| bt | 27.0 (+2.0) | 29.0 (-1.0) | 25.0 (+5.0) |"));
        let csv = t.to_csv();
        assert!(csv.lines().nth(2).unwrap().starts_with("bt,x,27.0,2.0,29.0,-1.0,25.0,5.0"));
        let single = ComparisonTable::new(vec![report("base", 1.0, 2.0, "x")], None).unwrap();
        assert_eq!(single.to_markdown().lines().count(), 3);
    }

    #[test]
    fn mixed_test_sets_are_rejected() {
        assert!(ComparisonTable::new(vec![report("a", 1.0, 1.0, "x"), report("b", 1.0, 1.0, "y")], None).is_err());
        assert!(ComparisonTable::new(vec![], None).is_err());
    }
}
