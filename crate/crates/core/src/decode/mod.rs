//! Beam search and ancestral sampling over any [`StepModel`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{MonoCorpus, ParallelCorpus, Provenance, Sentence, SentencePair, SubwordModel};
use crate::error::{Error, Result};
use crate::par;
use crate::util::rng_for;

/// An autoregressive model that can be advanced one token at a time.
pub trait StepModel: Sync {
    /// Per-sentence context computed once (e.g. encoder output).
    type Source: Send + Sync;
    /// Per-hypothesis decoder state.
    type State: Clone + Send;

    fn vocab_size(&self) -> usize;
    /// Hard limit on the number of decoder steps.
    fn max_steps(&self) -> usize;
    fn bos(&self) -> u32;
    fn eos(&self) -> u32;
    /// Tokens the decoder may emit (padding and BOS are excluded).
    fn is_emittable(&self, token: u32) -> bool;
    fn prepare(&self, source: &[u32]) -> Result<Self::Source>;
    fn initial_state(&self, source: &Self::Source) -> Self::State;
    /// Feeds `tokens[i]` to `states[i]`; returns one log-probability row each.
    fn step(&self, source: &Self::Source, states: &mut [Self::State], tokens: &[u32]) -> Vec<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeMode {
    Beam { width: usize, length_penalty: f64 },
    Sampling { temperature: f64, seed: u64 },
}

fn default_min_len() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    #[serde(flatten)]
    pub mode: DecodeMode,
    /// Maximum hypothesis length in tokens, end-of-sequence included.
    pub max_len: usize,
    /// Minimum number of tokens before end-of-sequence may be emitted.
    #[serde(default = "default_min_len")]
    pub min_len: usize,
}

impl DecodeConfig {
    pub fn beam(width: usize, max_len: usize) -> DecodeConfig {
        DecodeConfig { mode: DecodeMode::Beam { width, length_penalty: 1.0 }, max_len, min_len: 1 }
    }

    pub fn sampling(temperature: f64, seed: u64, max_len: usize) -> DecodeConfig {
        DecodeConfig { mode: DecodeMode::Sampling { temperature, seed }, max_len, min_len: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("decode config: {m}")));
        match self.mode {
            DecodeMode::Beam { width, length_penalty } => {
                if width == 0 {
                    return bad("beam width must be at least 1");
                }
                if !(length_penalty >= 0.0) {
                    return bad("length penalty must be non-negative");
                }
            }
            DecodeMode::Sampling { temperature, .. } => {
                if !(temperature >= 0.0 && temperature.is_finite()) {
                    return bad("temperature must be non-negative");
                }
            }
        }
        if self.max_len == 0 || self.max_len < self.min_len {
            return bad("need max_len >= min_len and max_len >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Emitted ids; ends with end-of-sequence unless `forced`.
    pub tokens: Vec<u32>,
    pub score: f64,
    pub normalized_score: f64,
    /// True when the length cap was hit before end-of-sequence.
    pub forced: bool,
}

impl Hypothesis {
    fn new(tokens: Vec<u32>, score: f64, alpha: f64, forced: bool) -> Hypothesis {
        let len = tokens.len().max(1) as f64;
        Hypothesis { normalized_score: score / len.powf(alpha), tokens, score, forced }
    }

    /// Tokens with a trailing end-of-sequence removed.
    pub fn content(&self, eos: u32) -> &[u32] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == eos && !self.forced => rest,
            _ => &self.tokens,
        }
    }
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.normalized_score
        .total_cmp(&a.normalized_score)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn step_limit<M: StepModel>(model: &M, cfg: &DecodeConfig) -> usize {
    cfg.max_len.min(model.max_steps())
}

/// Whether `token` may be emitted as the `(len+1)`-th token.
fn allowed<M: StepModel>(model: &M, cfg: &DecodeConfig, token: u32, len: usize) -> bool {
    model.is_emittable(token) && (token != model.eos() || len + 1 >= cfg.min_len.min(step_limit(model, cfg)))
}

struct Beam<S> {
    tokens: Vec<u32>,
    score: f64,
    state: S,
}

/// Beam search.
///
/// At each step all extensions of the live beams are ranked by total score
/// (ties: beam index, then token id) and the best `width` are kept. Those
/// ending in end-of-sequence move to the finished set; the rest stay live.
/// The search stops once `width` hypotheses have finished or the length cap
/// is reached, in which case the live beams are returned as forced.
pub fn beam_decode<M: StepModel>(model: &M, source: &[u32], cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let DecodeMode::Beam { width, length_penalty: alpha } = cfg.mode else {
        return Err(Error::Config("beam_decode needs a beam configuration".into()));
    };
    let ctx = model.prepare(source)?;
    let limit = step_limit(model, cfg);
    let eos = model.eos();
    let mut live = vec![Beam { tokens: Vec::new(), score: 0.0, state: model.initial_state(&ctx) }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for t in 0..limit {
        let mut states: Vec<M::State> = live.iter().map(|b| b.state.clone()).collect();
        let last: Vec<u32> = live.iter().map(|b| *b.tokens.last().unwrap_or(&model.bos())).collect();
        let rows = model.step(&ctx, &mut states, &last);
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            for (v, &lp) in row.iter().enumerate() {
                let v = v as u32;
                if allowed(model, cfg, v, t) && lp > f64::NEG_INFINITY {
                    cands.push((live[i].score + lp, i, v));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(width);
        let mut next = Vec::with_capacity(width);
        for (score, i, v) in cands {
            let mut tokens = live[i].tokens.clone();
            tokens.push(v);
            if v == eos {
                finished.push(Hypothesis::new(tokens, score, alpha, false));
            } else {
                next.push(Beam { tokens, score, state: states[i].clone() });
            }
        }
        live = next;
        if finished.len() >= width || live.is_empty() {
            break;
        }
    }
    if finished.is_empty() {
        finished = live.into_iter().map(|b| Hypothesis::new(b.tokens, b.score, alpha, true)).collect();
    }
    finished.sort_by(rank);
    finished.truncate(width);
    Ok(finished)
}

/// Ancestral sampling from the temperature-scaled distribution. Temperature
/// 0 is greedy decoding.
pub fn sample_decode<M: StepModel, R: Rng>(
    model: &M,
    source: &[u32],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Hypothesis> {
    cfg.validate()?;
    let DecodeMode::Sampling { temperature, .. } = cfg.mode else {
        return Err(Error::Config("sample_decode needs a sampling configuration".into()));
    };
    if temperature == 0.0 {
        let greedy = DecodeConfig { mode: DecodeMode::Beam { width: 1, length_penalty: 0.0 }, ..*cfg };
        let mut h = beam_decode(model, source, &greedy)?.remove(0);
        h.normalized_score = h.score;
        return Ok(h);
    }
    let ctx = model.prepare(source)?;
    let limit = step_limit(model, cfg);
    let eos = model.eos();
    let mut state = vec![model.initial_state(&ctx)];
    let mut tokens = Vec::new();
    let mut score = 0.0;
    let mut last = model.bos();
    for t in 0..limit {
        let row = model.step(&ctx, &mut state, &[last]).remove(0);
        let ids: Vec<u32> = (0..row.len() as u32).filter(|&v| allowed(model, cfg, v, t)).collect();
        let max = ids.iter().map(|&v| row[v as usize]).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = ids.iter().map(|&v| ((row[v as usize] - max) / temperature).exp()).collect();
        let total: f64 = weights.iter().sum();
        let u = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = *ids.last().ok_or_else(|| Error::Numeric("no emittable token".into()))?;
        for (&v, w) in ids.iter().zip(&weights) {
            acc += w;
            if u < acc {
                pick = v;
                break;
            }
        }
        score += row[pick as usize];
        tokens.push(pick);
        last = pick;
        if pick == eos {
            return Ok(Hypothesis::new(tokens, score, 0.0, false));
        }
    }
    Ok(Hypothesis::new(tokens, score, 0.0, true))
}

/// One-best decode of `source`; sampling draws from stream `index` of the seed.
pub fn decode_one<M: StepModel>(model: &M, source: &[u32], cfg: &DecodeConfig, index: u64) -> Result<Hypothesis> {
    match cfg.mode {
        DecodeMode::Beam { .. } => Ok(beam_decode(model, source, cfg)?.remove(0)),
        DecodeMode::Sampling { seed, .. } => sample_decode(model, source, cfg, &mut rng_for(seed, index)),
    }
}

/// Anything that maps sentences of one language to sentences of another.
pub trait Translator: Sync {
    fn source_language(&self) -> &str;
    fn target_language(&self) -> &str;
    /// Translates one sentence; `index` selects the sampling stream.
    fn translate(&self, sentence: &Sentence, cfg: &DecodeConfig, index: u64) -> Result<(Sentence, bool)>;
}

/// A trained model plus its subword model.
#[derive(Debug, Clone)]
pub struct NmtSystem {
    pub model: crate::nnet::Seq2SeqModel,
    pub subword: SubwordModel,
}

impl NmtSystem {
    pub fn new(model: crate::nnet::Seq2SeqModel, subword: SubwordModel) -> Result<NmtSystem> {
        if model.config.vocab_size != subword.vocab().len() {
            return Err(Error::VocabMismatch(format!(
                "model expects {} tokens, subword vocabulary has {}",
                model.config.vocab_size,
                subword.vocab().len()
            )));
        }
        Ok(NmtSystem { model, subword })
    }
}

impl Translator for NmtSystem {
    fn source_language(&self) -> &str {
        &self.model.config.source_language
    }

    fn target_language(&self) -> &str {
        &self.model.config.target_language
    }

    fn translate(&self, sentence: &Sentence, cfg: &DecodeConfig, index: u64) -> Result<(Sentence, bool)> {
        let ids = self.subword.encode(sentence);
        let h = decode_one(&self.model, &ids, cfg, index)?;
        Ok((self.subword.decode(h.content(crate::corpus::EOS_ID)), h.forced))
    }
}

/// Output of corpus translation with per-sentence diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Translated {
    pub corpus: ParallelCorpus,
    /// Indices whose hypothesis hit the length cap.
    pub forced: Vec<usize>,
    /// Indices whose decode failed; their output is empty.
    pub failed: Vec<(usize, String)>,
}

/// Translates every sentence in order. Pairs are (input, output) with the
/// output side labelled MT; failures are recorded instead of aborting.
pub fn translate_corpus<T: Translator + ?Sized>(
    translator: &T,
    corpus: &MonoCorpus,
    cfg: &DecodeConfig,
) -> Result<Translated> {
    cfg.validate()?;
    if corpus.language != translator.source_language() {
        return Err(Error::Data(format!(
            "corpus language {:?} does not match translator source {:?}",
            corpus.language,
            translator.source_language()
        )));
    }
    let outputs = par::map_indexed(&corpus.sentences, |i, s| translator.translate(s, cfg, i as u64));
    let mut out = ParallelCorpus::empty(corpus.language.clone(), translator.target_language());
    let (mut forced, mut failed) = (Vec::new(), Vec::new());
    for (i, (src, res)) in corpus.sentences.iter().zip(outputs).enumerate() {
        let target = match res {
            Ok((t, f)) => {
                if f {
                    forced.push(i);
                }
                t
            }
            Err(e) => {
                failed.push((i, e.to_string()));
                Sentence::empty()
            }
        };
        out.pairs.push(SentencePair {
            source: src.clone(),
            target,
            source_provenance: corpus.provenance.clone(),
            target_provenance: Provenance::Mt,
        });
    }
    Ok(Translated { corpus: out, forced, failed })
}
