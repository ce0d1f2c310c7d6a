//! Style transfer of back-translated source text.
//!
//! Cascaded: a monolingual model learns to map round-trip translations back
//! to the natural sentences they came from, and is then applied to the source
//! side of back-translation data. Direct (CTST): a translation model is first
//! trained on forward-translated data and then on back-translated data with
//! its encoder frozen.

use crate::corpus::{MonoCorpus, ParallelCorpus, Provenance, SentencePair, SubwordModel};
use crate::decode::{translate_corpus, DecodeConfig, Translator};
use crate::error::{Error, Result};
use crate::nnet::{encode_pairs, train, ModelConfig, Seq2SeqModel, TrainConfig, TrainOutcome};

/// Round-trip pairs: source is `T2S(S2T(x))` (MT), target is `x` (Nature).
pub fn rtt_generate<A, B>(s2t: &A, t2s: &B, source_mono: &MonoCorpus, cfg: &DecodeConfig) -> Result<ParallelCorpus>
where
    A: Translator + ?Sized,
    B: Translator + ?Sized,
{
    if source_mono.provenance != Provenance::Nature {
        return Err(Error::Provenance("round-trip input must be Nature text".into()));
    }
    if s2t.target_language() != t2s.source_language() || t2s.target_language() != source_mono.language {
        return Err(Error::Config("translation directions do not compose into a round trip".into()));
    }
    let there = translate_corpus(s2t, source_mono, cfg)?;
    let mid = MonoCorpus::new(there.corpus.targets().cloned().collect(), s2t.target_language(), Provenance::Mt);
    let back = translate_corpus(t2s, &mid, cfg)?;
    let mut dropped = there.failed.iter().map(|f| f.0).collect::<Vec<_>>();
    dropped.extend(back.failed.iter().map(|f| f.0));
    dropped.sort_unstable();
    dropped.dedup();
    if !dropped.is_empty() {
        log::warn!("round trip: dropped {} of {} sentences after decode failures", dropped.len(), source_mono.len());
    }
    let lang = source_mono.language.clone();
    let mut out = ParallelCorpus::empty(lang.clone(), lang);
    for (i, (x, p)) in source_mono.sentences.iter().zip(back.corpus.pairs).enumerate() {
        if dropped.binary_search(&i).is_ok() || p.target.is_empty() {
            continue;
        }
        out.pairs.push(SentencePair {
            source: p.target,
            target: x.clone(),
            source_provenance: Provenance::Mt,
            target_provenance: Provenance::Nature,
        });
    }
    Ok(out)
}

fn check_tst_data(data: &ParallelCorpus) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("style transfer training set is empty".into()));
    }
    if data.source_language != data.target_language {
        return Err(Error::Data("style transfer data must be monolingual".into()));
    }
    Ok(())
}

/// Trains a monolingual style transfer model on round-trip pairs.
pub fn train_tst(
    data: &ParallelCorpus,
    dev: &ParallelCorpus,
    subword: &SubwordModel,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_tst_data(data)?;
    if model_cfg.source_language != data.source_language || model_cfg.target_language != data.source_language {
        return Err(Error::Config("style transfer model must read and write the data language".into()));
    }
    let model = Seq2SeqModel::new(model_cfg.clone())?;
    train(model, &encode_pairs(data, subword), &encode_pairs(dev, subword), train_cfg)
}

/// Replaces the source side of back-translation data with its style-transferred
/// version. Pairs whose transfer fails keep their original source.
pub fn apply_tst<T: Translator + ?Sized>(tst: &T, bt: &ParallelCorpus, cfg: &DecodeConfig) -> Result<ParallelCorpus> {
    if tst.source_language() != bt.source_language || tst.target_language() != bt.source_language {
        return Err(Error::Config("style transfer model language does not match the data source side".into()));
    }
    for p in &bt.pairs {
        if !matches!(p.source_provenance, Provenance::Mt) {
            return Err(Error::Provenance(format!(
                "style transfer applies to plain MT sources, got {}",
                p.source_provenance
            )));
        }
    }
    let src = MonoCorpus::new(bt.sources().cloned().collect(), bt.source_language.clone(), Provenance::Mt);
    let moved = translate_corpus(tst, &src, cfg)?;
    if !moved.failed.is_empty() {
        log::warn!("style transfer failed on {} of {} sentences; kept their MT source", moved.failed.len(), bt.len());
    }
    let mut out = ParallelCorpus::empty(bt.source_language.clone(), bt.target_language.clone());
    let mut failed = moved.failed.iter().map(|f| f.0).peekable();
    for (i, (orig, t)) in bt.pairs.iter().zip(moved.corpus.pairs).enumerate() {
        let keep = failed.peek() == Some(&i) || t.target.is_empty();
        if failed.peek() == Some(&i) {
            failed.next();
        }
        out.pairs.push(SentencePair {
            source: if keep { orig.source.clone() } else { t.target },
            target: orig.target.clone(),
            source_provenance: if keep { Provenance::Mt } else { Provenance::Tst },
            target_provenance: orig.target_provenance.clone(),
        });
    }
    Ok(out)
}

/// Parameter-name patterns covering every encoder tensor.
pub fn encoder_freeze_set() -> Vec<String> {
    vec!["encoder.*".to_string()]
}

/// Two training stages; the second freezes the encoder and starts from the first.
#[derive(Debug, Clone, PartialEq)]
pub struct CtstSchedule {
    /// Typically (Nature source, MT target) forward-translated data.
    pub stage1: (TrainConfig, ParallelCorpus),
    /// Typically (MT source, Nature target) back-translated data.
    pub stage2: (TrainConfig, ParallelCorpus),
}

impl CtstSchedule {
    /// Sets the stage-two freeze list to the encoder and checks the stages.
    pub fn new(stage1: (TrainConfig, ParallelCorpus), mut stage2: (TrainConfig, ParallelCorpus)) -> Result<CtstSchedule> {
        if !stage1.0.freeze.is_empty() {
            return Err(Error::Config("stage one of CTST trains every parameter".into()));
        }
        stage2.0.freeze = encoder_freeze_set();
        for (name, c) in [("one", &stage1.1), ("two", &stage2.1)] {
            if c.is_empty() {
                return Err(Error::Data(format!("CTST stage {name} has no data")));
            }
        }
        if (&stage1.1.source_language, &stage1.1.target_language)
            != (&stage2.1.source_language, &stage2.1.target_language)
        {
            return Err(Error::Data("CTST stages translate different language pairs".into()));
        }
        Ok(CtstSchedule { stage1, stage2 })
    }
}

pub struct CtstOutcome {
    pub stage1: TrainOutcome,
    pub stage2: TrainOutcome,
}

/// Runs both stages from `model`. The returned stage-two model translates
/// source to target directly.
pub fn train_ctst(
    model: Seq2SeqModel,
    subword: &SubwordModel,
    schedule: &CtstSchedule,
    dev: &ParallelCorpus,
) -> Result<CtstOutcome> {
    if model.config.vocab_size != subword.vocab().len()
        || (!model.config.vocab_fingerprint.is_empty() && model.config.vocab_fingerprint != subword.vocab().fingerprint())
    {
        return Err(Error::VocabMismatch("CTST model and subword vocabulary differ".into()));
    }
    let dev_ids = encode_pairs(dev, subword);
    let (c1, d1) = &schedule.stage1;
    let stage1 = train(model, &encode_pairs(d1, subword), &dev_ids, c1)?;
    let (c2, d2) = &schedule.stage2;
    let stage2 = train(stage1.model.clone(), &encode_pairs(d2, subword), &dev_ids, c2)?;
    Ok(CtstOutcome { stage1, stage2 })
}

#[cfg(test)]
mod tests;
