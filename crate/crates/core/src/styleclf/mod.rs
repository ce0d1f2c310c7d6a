//! Nature-vs-MT text classifier and the measurements built on it.
//!
//! The classifier is logistic regression over hashed character 1-4-grams
//! and word 1-2-grams (sentence edges marked), token-frequency buckets and
//! sentence-length buckets.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{MonoCorpus, ParallelCorpus, Provenance, Sentence};
use crate::decode::{translate_corpus, DecodeConfig, Translator};
use crate::error::{Error, Result};
use crate::metrics::chrf;
use crate::util::{fnv1a, rng_for};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub char_ngram_min: usize,
    pub char_ngram_max: usize,
    /// Word n-grams of length 1 up to this; 0 disables them.
    pub word_ngram_max: usize,
    pub hash_bits: u32,
    /// Tokens are bucketed by floor(log2(training count)), capped here.
    pub frequency_buckets: usize,
    pub length_buckets: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec { char_ngram_min: 1, char_ngram_max: 4, word_ngram_max: 2, hash_bits: 15, frequency_buckets: 12, length_buckets: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub features: FeatureSpec,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub heldout_fraction: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            features: FeatureSpec::default(),
            epochs: 20,
            learning_rate: 0.2,
            l2: 1e-5,
            heldout_fraction: 0.1,
            threshold: 0.5,
            seed: 1,
        }
    }
}

/// Trained classifier; `predict` gives the probability that a sentence is Nature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleClassifier {
    pub version: u32,
    pub language: String,
    pub features: FeatureSpec,
    /// Frequency bucket of every token seen in training.
    pub frequency: BTreeMap<String, u8>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
    pub heldout_accuracy: f64,
}

type Sparse = Vec<(usize, f64)>;

fn extract(spec: &FeatureSpec, frequency: &BTreeMap<String, u8>, s: &Sentence) -> Sparse {
    let hashed = 1usize << spec.hash_bits;
    let mut counts: HashMap<usize, f64> = HashMap::new();
    let text: Vec<char> = format!("^ {} $", s.to_line()).chars().collect();
    let mut grams = 0usize;
    for n in spec.char_ngram_min..=spec.char_ngram_max {
        for w in text.windows(n) {
            let g: String = w.iter().collect();
            let idx = (fnv1a(&g) ^ n as u64) as usize & (hashed - 1);
            *counts.entry(idx).or_insert(0.0) += 1.0;
            grams += 1;
        }
    }
    let words: Vec<&str> = std::iter::once("^").chain(s.iter()).chain(std::iter::once("$")).collect();
    for n in 1..=spec.word_ngram_max {
        for w in words.windows(n) {
            let idx = (fnv1a(&w.join(" ")) ^ (0x3d00 + n as u64)) as usize & (hashed - 1);
            *counts.entry(idx).or_insert(0.0) += 1.0;
            grams += 1;
        }
    }
    let norm = 1.0 / (grams.max(1) as f64).sqrt();
    let mut out: Sparse = counts.into_iter().map(|(i, c)| (i, c * norm)).collect();

    let base = hashed;
    if !s.is_empty() {
        let share = 1.0 / s.len() as f64;
        let mut buckets = vec![0.0; spec.frequency_buckets + 1];
        for t in s.iter() {
            let b = frequency.get(t).map(|&b| b as usize + 1).unwrap_or(0).min(spec.frequency_buckets);
            buckets[b] += share;
        }
        out.extend(buckets.into_iter().enumerate().filter(|(_, v)| *v > 0.0).map(|(i, v)| (base + i, v)));
    }
    let lb = (s.len() / 4).min(spec.length_buckets - 1);
    out.push((base + spec.frequency_buckets + 1 + lb, 1.0));
    out.sort_unstable_by_key(|x| x.0);
    out
}

fn dims(spec: &FeatureSpec) -> usize {
    (1usize << spec.hash_bits) + spec.frequency_buckets + 1 + spec.length_buckets
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl StyleClassifier {
    fn score(&self, x: &Sparse) -> f64 {
        sigmoid(self.bias + x.iter().map(|&(i, v)| self.weights[i] * v).sum::<f64>())
    }

    /// Probability that `s` is Nature text.
    pub fn predict(&self, s: &Sentence) -> f64 {
        self.score(&extract(&self.features, &self.frequency, s))
    }

    pub fn is_nature(&self, s: &Sentence) -> bool {
        self.predict(s) >= self.threshold
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<StyleClassifier> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let c: StyleClassifier = serde_json::from_slice(&bytes)?;
        if c.version != FORMAT_VERSION {
            return Err(Error::Format(format!("classifier format version {} is not supported", c.version)));
        }
        if c.weights.len() != dims(&c.features) || c.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Format("classifier weights do not match the feature spec".into()));
        }
        Ok(c)
    }
}

/// Fits the classifier by shuffled stochastic gradient descent. The same
/// fraction of each class is held out; with equal class sizes both classes
/// hold out the same indices.
pub fn train_classifier(nature: &MonoCorpus, mt: &MonoCorpus, cfg: &ClassifierConfig) -> Result<StyleClassifier> {
    if nature.is_empty() || mt.is_empty() {
        return Err(Error::Data("both classes need at least one sentence".into()));
    }
    if nature.language != mt.language {
        return Err(Error::Data("classes are in different languages".into()));
    }
    if nature.provenance.base() != &Provenance::Nature || mt.provenance.base() != &Provenance::Mt {
        return Err(Error::Provenance("classifier classes must be Nature and MT text".into()));
    }
    if !(0.0..1.0).contains(&cfg.heldout_fraction) || cfg.features.length_buckets == 0 {
        return Err(Error::Config("invalid classifier configuration".into()));
    }
    let (a, b) = (nature.len().max(mt.len()), nature.len().min(mt.len()));
    if a > 10 * b {
        log::warn!("class imbalance {a}:{b} exceeds 10:1");
    }

    let split = |n: usize| -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_for(cfg.seed, 0x5b17));
        let h = (n as f64 * cfg.heldout_fraction).round() as usize;
        let held = idx[..h].to_vec();
        (idx[h..].to_vec(), held)
    };
    let (n_train, n_held) = split(nature.len());
    let (m_train, m_held) = split(mt.len());

    let mut counts: HashMap<&str, usize> = HashMap::new();
    for &i in &n_train {
        nature.sentences[i].iter().for_each(|t| *counts.entry(t).or_insert(0) += 1);
    }
    for &i in &m_train {
        mt.sentences[i].iter().for_each(|t| *counts.entry(t).or_insert(0) += 1);
    }
    let frequency: BTreeMap<String, u8> =
        counts.into_iter().map(|(t, c)| (t.to_owned(), (c as f64).log2().floor() as u8)).collect();

    let spec = cfg.features.clone();
    let featurize = |c: &MonoCorpus, idx: &[usize], label: f64| -> Vec<(Sparse, f64)> {
        crate::par::map(idx, |&i| (extract(&spec, &frequency, &c.sentences[i]), label))
    };
    let mut train: Vec<(Sparse, f64)> = featurize(nature, &n_train, 1.0);
    train.extend(featurize(mt, &m_train, 0.0));
    let mut held = featurize(nature, &n_held, 1.0);
    held.extend(featurize(mt, &m_held, 0.0));

    let mut clf = StyleClassifier {
        version: FORMAT_VERSION,
        language: nature.language.clone(),
        features: spec.clone(),
        frequency: frequency.clone(),
        weights: vec![0.0; dims(&spec)],
        bias: 0.0,
        threshold: cfg.threshold,
        heldout_accuracy: f64::NAN,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut r = rng_for(cfg.seed, 0x5b18);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let lr = cfg.learning_rate / (1.0 + epoch as f64 * 0.1);
        for &k in &order {
            let (x, y) = &train[k];
            let g = clf.score(x) - y;
            for &(i, v) in x {
                let w = &mut clf.weights[i];
                *w -= lr * (g * v + cfg.l2 * *w);
            }
            clf.bias -= lr * g;
        }
    }
    if clf.weights.iter().any(|w| !w.is_finite()) || !clf.bias.is_finite() {
        return Err(Error::Numeric("classifier weights diverged".into()));
    }
    let data = if held.is_empty() { &train } else { &held };
    let correct = data.iter().filter(|(x, y)| (clf.score(x) >= clf.threshold) == (*y == 1.0)).count();
    clf.heldout_accuracy = correct as f64 / data.len() as f64;
    log::info!("style classifier ({}) held-out accuracy {:.3}", clf.language, clf.heldout_accuracy);
    Ok(clf)
}

/// Fraction of sentences classified as Nature.
pub fn nature_ratio(clf: &StyleClassifier, corpus: &MonoCorpus) -> Result<f64> {
    nature_ratio_of(clf, &corpus.sentences)
}

pub fn nature_ratio_of(clf: &StyleClassifier, sentences: &[Sentence]) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::Data("nature ratio of an empty corpus".into()));
    }
    let flags = crate::par::map(sentences, |s| clf.is_nature(s));
    Ok(flags.iter().filter(|&&f| f).count() as f64 / sentences.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TideRecord {
    pub round: usize,
    /// Language of the text measured in this round.
    pub direction: String,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TideTrace {
    pub records: Vec<TideRecord>,
}

impl TideTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,direction,ratio\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{:.4}", r.round, r.direction, r.ratio);
        }
        out
    }

    /// True when every translated (odd) round is below both neighbouring even rounds.
    pub fn alternates(&self) -> bool {
        let r: Vec<f64> = self.records.iter().map(|x| x.ratio).collect();
        (1..r.len()).step_by(2).all(|i| r[i] < r[i - 1] && (i + 1 >= r.len() || r[i] < r[i + 1]))
    }
}

/// Translates `start` back and forth `rounds` times, measuring the Nature
/// ratio with the classifier of the current language after every round.
pub fn style_tide(
    s2t: &dyn Translator,
    t2s: &dyn Translator,
    start: &MonoCorpus,
    rounds: usize,
    clf_source: &StyleClassifier,
    clf_target: &StyleClassifier,
    cfg: &DecodeConfig,
) -> Result<TideTrace> {
    if start.language != s2t.source_language() || s2t.target_language() != t2s.source_language() {
        return Err(Error::Config("tide models do not chain from the start language".into()));
    }
    let mut records = vec![TideRecord { round: 0, direction: start.language.clone(), ratio: nature_ratio(clf_source, start)? }];
    let mut current = start.clone();
    for round in 1..=rounds {
        let (model, clf) = if round % 2 == 1 { (s2t, clf_target) } else { (t2s, clf_source) };
        let out = translate_corpus(model, &current, cfg)?;
        current = MonoCorpus::new(out.corpus.targets().cloned().collect(), model.target_language(), Provenance::Mt);
        records.push(TideRecord { round, direction: current.language.clone(), ratio: nature_ratio(clf, &current)? });
    }
    Ok(TideTrace { records })
}

/// Style strength and content preservation of back-translated text before
/// and after style transfer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccSeman {
    pub acc_mt: f64,
    pub seman_mt: f64,
    pub acc_tst: f64,
    pub seman_tst: f64,
}

/// Back-translates the Nature targets of a reverse test set, transfers the
/// result, and reports Nature ratio (ACC) and ChrF against the HT sources
/// (Seman) for both versions.
pub fn measure_acc_seman<A, B>(
    t2s: &A,
    tst: &B,
    reverse: &ParallelCorpus,
    clf: &StyleClassifier,
    bt_cfg: &DecodeConfig,
    tst_cfg: &DecodeConfig,
) -> Result<AccSeman>
where
    A: Translator + ?Sized,
    B: Translator + ?Sized,
{
    if reverse.is_empty() {
        return Err(Error::Data("reverse test set is empty".into()));
    }
    let targets = MonoCorpus::new(reverse.targets().cloned().collect(), reverse.target_language.clone(), Provenance::Nature);
    let mt = translate_corpus(t2s, &targets, bt_cfg)?.corpus.target_side();
    let moved = translate_corpus(tst, &mt, tst_cfg)?.corpus.target_side();
    let refs: Vec<Sentence> = reverse.sources().cloned().collect();
    Ok(AccSeman {
        acc_mt: nature_ratio(clf, &mt)?,
        seman_mt: chrf(&mt.sentences, &refs)?.score,
        acc_tst: nature_ratio(clf, &moved)?,
        seman_tst: chrf(&moved.sentences, &refs)?.score,
    })
}
