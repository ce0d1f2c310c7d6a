//! Synthetic parallel data: beam, sampling, noised and tagged back-translation,
//! plus forward translation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    write_parallel, MonoCorpus, ParallelCorpus, Provenance, Sentence, SentencePair, FILLER, TAG,
};
use crate::decode::{translate_corpus, DecodeConfig, DecodeMode, Translator};
use crate::error::{Error, Result};
use crate::util::{derive_seed, rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub p_delete: f64,
    pub p_filler: f64,
    /// Maximum displacement of any token by the local shuffle.
    pub swap_window: usize,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { p_delete: 0.1, p_filler: 0.1, swap_window: 3, seed: 0 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_delete) || !(0.0..=1.0).contains(&self.p_filler) {
            return Err(Error::Config("noise probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Deletes tokens, replaces tokens with the filler, then shuffles locally:
/// token `i` gets key `i + u`, `u ~ U[0, swap_window + 1)`, and tokens are
/// sorted by key, so nothing moves more than `swap_window` places.
pub fn add_noise(s: &Sentence, cfg: &NoiseConfig) -> Sentence {
    let mut r = rng(cfg.seed);
    let kept: Vec<&str> = s.iter().filter(|_| !r.gen_bool(cfg.p_delete)).collect();
    let replaced: Vec<&str> = kept.into_iter().map(|t| if r.gen_bool(cfg.p_filler) { FILLER } else { t }).collect();
    let mut keyed: Vec<(f64, &str)> = replaced
        .into_iter()
        .enumerate()
        .map(|(i, t)| (i as f64 + r.gen::<f64>() * (cfg.swap_window + 1) as f64, t))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    Sentence::new(keyed.into_iter().map(|(_, t)| t.to_owned()).collect())
}

/// Noises the source side of every pair; sentence `i` uses a seed derived from
/// `cfg.seed` and `i`.
pub fn noise_corpus(corpus: &ParallelCorpus, cfg: &NoiseConfig) -> Result<ParallelCorpus> {
    cfg.validate()?;
    let mut out = ParallelCorpus::empty(corpus.source_language.clone(), corpus.target_language.clone());
    for (i, p) in corpus.pairs.iter().enumerate() {
        let local = NoiseConfig { seed: derive_seed(cfg.seed, i as u64), ..*cfg };
        out.pairs.push(SentencePair {
            source: add_noise(&p.source, &local),
            target: p.target.clone(),
            source_provenance: Provenance::noised(p.source_provenance.clone())?,
            target_provenance: p.target_provenance.clone(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagConfig {
    pub token: String,
}

impl Default for TagConfig {
    fn default() -> Self {
        TagConfig { token: TAG.to_owned() }
    }
}

/// Prepends the tag token.
pub fn add_tag(s: &Sentence, cfg: &TagConfig) -> Sentence {
    let mut tokens = Vec::with_capacity(s.len() + 1);
    tokens.push(cfg.token.clone());
    tokens.extend(s.tokens.iter().cloned());
    Sentence::new(tokens)
}

/// Tags the source side of every pair. Already tagged pairs are an error.
pub fn tag_corpus(corpus: &ParallelCorpus, cfg: &TagConfig) -> Result<ParallelCorpus> {
    if !crate::corpus::SPECIALS.contains(&cfg.token.as_str()) {
        return Err(Error::Config(format!("tag {:?} is not a reserved token", cfg.token)));
    }
    let mut out = ParallelCorpus::empty(corpus.source_language.clone(), corpus.target_language.clone());
    for p in &corpus.pairs {
        out.pairs.push(SentencePair {
            source: add_tag(&p.source, cfg),
            target: p.target.clone(),
            source_provenance: Provenance::tagged(p.source_provenance.clone())?,
            target_provenance: p.target_provenance.clone(),
        });
    }
    Ok(out)
}

/// Description of how a synthetic corpus was made, stored next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentMeta {
    pub variant: String,
    pub seeds: BTreeMap<String, u64>,
    /// Content hashes of the models involved, by role.
    pub checkpoints: BTreeMap<String, String>,
    pub decode: Option<DecodeConfig>,
    pub input_sentences: usize,
    /// Input indices dropped because decoding failed.
    pub failed: Vec<usize>,
    /// Input indices whose hypothesis hit the length cap.
    pub forced: Vec<usize>,
}

impl AugmentMeta {
    pub fn new(variant: &str) -> AugmentMeta {
        AugmentMeta {
            variant: variant.to_owned(),
            seeds: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            decode: None,
            input_sentences: 0,
            failed: Vec::new(),
            forced: Vec::new(),
        }
    }

    fn with_decode(mut self, cfg: &DecodeConfig) -> AugmentMeta {
        if let DecodeMode::Sampling { seed, .. } = cfg.mode {
            self.seeds.insert("sampling".into(), seed);
        }
        self.decode = Some(cfg.clone());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Augmented {
    pub corpus: ParallelCorpus,
    pub meta: AugmentMeta,
}

impl Augmented {
    /// Writes the corpus files under `stem` plus `<stem>.meta.json`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        write_parallel(&self.corpus, stem)?;
        let path = meta_path(stem);
        std::fs::write(&path, serde_json::to_string_pretty(&self.meta)?).map_err(|e| Error::io(path, e))
    }
}

pub fn meta_path(stem: &Path) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn check_mono(corpus: &MonoCorpus, language: &str, what: &str) -> Result<()> {
    if corpus.provenance != Provenance::Nature {
        return Err(Error::Provenance(format!("{what} expects Nature text, got {}", corpus.provenance)));
    }
    if corpus.language != language {
        return Err(Error::Data(format!(
            "{what}: corpus language {:?} differs from model input language {language:?}",
            corpus.language
        )));
    }
    Ok(())
}

/// Translates `mono`, dropping pairs whose decode failed.
fn translate_kept<T: Translator + ?Sized>(
    model: &T,
    mono: &MonoCorpus,
    cfg: &DecodeConfig,
    meta: &mut AugmentMeta,
) -> Result<ParallelCorpus> {
    let t = translate_corpus(model, mono, cfg)?;
    if !t.failed.is_empty() {
        log::warn!("{}: {} of {} sentences failed to decode", meta.variant, t.failed.len(), mono.len());
    }
    meta.input_sentences = mono.len();
    meta.failed = t.failed.iter().map(|(i, _)| *i).collect();
    meta.forced = t.forced;
    let mut out = ParallelCorpus::empty(t.corpus.source_language.clone(), t.corpus.target_language.clone());
    let mut failed = meta.failed.iter().peekable();
    for (i, p) in t.corpus.pairs.into_iter().enumerate() {
        if failed.peek() == Some(&&i) {
            failed.next();
            continue;
        }
        out.pairs.push(p);
    }
    Ok(out)
}

fn back_translate<T: Translator + ?Sized>(
    t2s: &T,
    target_mono: &MonoCorpus,
    cfg: &DecodeConfig,
    variant: &str,
) -> Result<Augmented> {
    check_mono(target_mono, t2s.source_language(), variant)?;
    let mut meta = AugmentMeta::new(variant).with_decode(cfg);
    let forward = translate_kept(t2s, target_mono, cfg, &mut meta)?;
    Ok(Augmented { corpus: forward.reversed(), meta })
}

/// (MT source, Nature target) pairs from beam search over target-side text.
pub fn beam_bt<T: Translator + ?Sized>(t2s: &T, target_mono: &MonoCorpus, cfg: &DecodeConfig) -> Result<Augmented> {
    if !matches!(cfg.mode, DecodeMode::Beam { .. }) {
        return Err(Error::Config("beam_bt needs a beam decode configuration".into()));
    }
    back_translate(t2s, target_mono, cfg, "beam")
}

/// As [`beam_bt`] but with sampled translations.
pub fn sampling_bt<T: Translator + ?Sized>(
    t2s: &T,
    target_mono: &MonoCorpus,
    cfg: &DecodeConfig,
) -> Result<Augmented> {
    if !matches!(cfg.mode, DecodeMode::Sampling { .. }) {
        return Err(Error::Config("sampling_bt needs a sampling decode configuration".into()));
    }
    back_translate(t2s, target_mono, cfg, "sampling")
}

/// Noises the source side of existing back-translation output.
pub fn noised_bt(bt: &Augmented, cfg: &NoiseConfig) -> Result<Augmented> {
    let mut meta = bt.meta.clone();
    meta.variant = format!("{}+noised", meta.variant);
    meta.seeds.insert("noise".into(), cfg.seed);
    Ok(Augmented { corpus: noise_corpus(&bt.corpus, cfg)?, meta })
}

/// Tags the source side of existing back-translation output.
pub fn tagged_bt(bt: &Augmented, cfg: &TagConfig) -> Result<Augmented> {
    let mut meta = bt.meta.clone();
    meta.variant = format!("{}+tagged", meta.variant);
    Ok(Augmented { corpus: tag_corpus(&bt.corpus, cfg)?, meta })
}

/// (Nature source, MT target) pairs.
pub fn forward_translate<T: Translator + ?Sized>(
    s2t: &T,
    source_mono: &MonoCorpus,
    cfg: &DecodeConfig,
) -> Result<Augmented> {
    check_mono(source_mono, s2t.source_language(), "forward translation")?;
    let mut meta = AugmentMeta::new("forward").with_decode(cfg);
    let corpus = translate_kept(s2t, source_mono, cfg, &mut meta)?;
    Ok(Augmented { corpus, meta })
}
