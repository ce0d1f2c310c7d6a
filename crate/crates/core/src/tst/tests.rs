use super::*;
use crate::corpus::Sentence;
use crate::decode::DecodeMode;
use crate::util::derive_seed;

/// Reverses token order and, when sampling, appends a token from the stream
/// index. Sentences containing "bad" fail.
struct Mirror {
    from: &'static str,
    to: &'static str,
}

impl Translator for Mirror {
    fn source_language(&self) -> &str {
        self.from
    }

    fn target_language(&self) -> &str {
        self.to
    }

    fn translate(&self, s: &Sentence, cfg: &DecodeConfig, index: u64) -> Result<(Sentence, bool)> {
        if s.iter().any(|t| t == "bad") {
            return Err(Error::Data("cannot translate".into()));
        }
        let mut tokens: Vec<String> = s.tokens.iter().rev().cloned().collect();
        if let DecodeMode::Sampling { seed, .. } = cfg.mode {
            tokens.push(format!("s{}", derive_seed(seed, index) % 7));
        }
        Ok((Sentence::new(tokens), false))
    }
}

/// Appends a marker token; used as a stand-in style transfer model.
struct Mark(&'static str);

impl Translator for Mark {
    fn source_language(&self) -> &str {
        self.0
    }

    fn target_language(&self) -> &str {
        self.0
    }

    fn translate(&self, s: &Sentence, _: &DecodeConfig, _: u64) -> Result<(Sentence, bool)> {
        if s.iter().any(|t| t == "bad") {
            return Err(Error::Data("cannot transfer".into()));
        }
        let mut tokens = s.tokens.clone();
        tokens.push("!".into());
        Ok((Sentence::new(tokens), false))
    }
}

fn mono(lines: &[&str], lang: &str, provenance: Provenance) -> MonoCorpus {
    MonoCorpus::new(lines.iter().map(|l| Sentence::from_line(l)).collect(), lang, provenance)
}

fn beam() -> DecodeConfig {
    DecodeConfig::beam(2, 20)
}

#[test]
fn round_trip_pairs_mt_with_nature() {
    let s2t = Mirror { from: "s", to: "t" };
    let t2s = Mirror { from: "t", to: "s" };
    let x = mono(&["a b c", "bad one", "d e"], "s", Provenance::Nature);
    let rtt = rtt_generate(&s2t, &t2s, &x, &beam()).unwrap();
    assert_eq!(rtt.len(), 2);
    for (p, want) in rtt.pairs.iter().zip(["a b c", "d e"]) {
        assert_eq!(p.source.to_line(), want);
        assert_eq!(p.target.to_line(), want);
        assert_eq!(p.source_provenance, Provenance::Mt);
        assert_eq!(p.target_provenance, Provenance::Nature);
    }
    assert_eq!((rtt.source_language.as_str(), rtt.target_language.as_str()), ("s", "s"));
}

#[test]
fn round_trip_input_checks() {
    let s2t = Mirror { from: "s", to: "t" };
    let t2s = Mirror { from: "t", to: "s" };
    let mt = mono(&["a"], "s", Provenance::Mt);
    assert!(matches!(rtt_generate(&s2t, &t2s, &mt, &beam()), Err(Error::Provenance(_))));
    let wrong = mono(&["a"], "t", Provenance::Nature);
    assert!(matches!(rtt_generate(&s2t, &t2s, &wrong, &beam()), Err(Error::Config(_))));
    let other = Mirror { from: "u", to: "s" };
    let x = mono(&["a"], "s", Provenance::Nature);
    assert!(matches!(rtt_generate(&s2t, &other, &x, &beam()), Err(Error::Config(_))));
}

fn bt_corpus(sources: &[&str], targets: &[&str]) -> ParallelCorpus {
    let mut c = ParallelCorpus::empty("s", "t");
    for (s, t) in sources.iter().zip(targets) {
        c.pairs.push(SentencePair {
            source: Sentence::from_line(s),
            target: Sentence::from_line(t),
            source_provenance: Provenance::Mt,
            target_provenance: Provenance::Nature,
        });
    }
    c
}

#[test]
fn transfer_rewrites_sources_only() {
    let bt = bt_corpus(&["a b", "bad x", "c"], &["B A", "X", "C"]);
    let out = apply_tst(&Mark("s"), &bt, &beam()).unwrap();
    assert_eq!(out.len(), 3);
    let sources: Vec<String> = out.sources().map(Sentence::to_line).collect();
    assert_eq!(sources, ["a b !", "bad x", "c !"]);
    for (o, i) in out.pairs.iter().zip(&bt.pairs) {
        assert_eq!(o.target, i.target);
        assert_eq!(o.target_provenance, i.target_provenance);
    }
    let prov: Vec<_> = out.pairs.iter().map(|p| p.source_provenance.clone()).collect();
    assert_eq!(prov, [Provenance::Tst, Provenance::Mt, Provenance::Tst]);
}

#[test]
fn transfer_input_checks() {
    let bt = bt_corpus(&["a"], &["A"]);
    assert!(matches!(apply_tst(&Mark("t"), &bt, &beam()), Err(Error::Config(_))));
    let mut nat = bt.clone();
    nat.pairs[0].source_provenance = Provenance::Ht;
    assert!(matches!(apply_tst(&Mark("s"), &nat, &beam()), Err(Error::Provenance(_))));
}

#[test]
fn cascade_composes_back_translation_and_transfer() {
    let t2s = Mirror { from: "t", to: "s" };
    let y = mono(&["p q r", "s t"], "t", Provenance::Nature);
    let bt = crate::augment::beam_bt(&t2s, &y, &beam()).unwrap().corpus;
    let out = apply_tst(&Mark("s"), &bt, &beam()).unwrap();
    for (p, orig) in out.pairs.iter().zip(&y.sentences) {
        let (mid, _) = t2s.translate(orig, &beam(), 0).unwrap();
        let (want, _) = Mark("s").translate(&mid, &beam(), 0).unwrap();
        assert_eq!(p.source, want);
        assert_eq!(&p.target, orig);
    }
}

fn tiny_setup() -> (SubwordModel, ParallelCorpus, ModelConfig) {
    let mut c = ParallelCorpus::empty("s", "t");
    for (s, t) in [("a b", "x y"), ("b c", "y z"), ("c a", "z x"), ("a a b", "x x y")] {
        c.pairs.push(SentencePair {
            source: Sentence::from_line(s),
            target: Sentence::from_line(t),
            source_provenance: Provenance::Nature,
            target_provenance: Provenance::Ht,
        });
    }
    let sw = SubwordModel::train(&[&c.source_side(), &c.target_side()], 0).unwrap();
    let mut cfg = ModelConfig::small(sw.vocab().len());
    cfg.model_dim = 8;
    cfg.ffn_dim = 16;
    cfg.encoder_layers = 1;
    cfg.decoder_layers = 1;
    cfg.dropout = 0.0;
    cfg.source_language = "s".into();
    cfg.target_language = "t".into();
    cfg.vocab_fingerprint = sw.vocab().fingerprint();
    (sw, c, cfg)
}

fn quick() -> TrainConfig {
    TrainConfig { base_lr: 1e-2, warmup_steps: 1, batch_tokens: 64, max_steps: 6, eval_interval: 2, ..TrainConfig::default() }
}

#[test]
fn schedule_freezes_the_encoder() {
    let (_, c, _) = tiny_setup();
    let s = CtstSchedule::new((quick(), c.clone()), (quick(), c.clone())).unwrap();
    assert_eq!(s.stage2.0.freeze, encoder_freeze_set());
    assert!(s.stage1.0.freeze.is_empty());

    let frozen = TrainConfig { freeze: vec!["decoder.*".into()], ..quick() };
    assert!(matches!(CtstSchedule::new((frozen, c.clone()), (quick(), c.clone())), Err(Error::Config(_))));
    let empty = ParallelCorpus::empty("s", "t");
    assert!(matches!(CtstSchedule::new((quick(), c.clone()), (quick(), empty)), Err(Error::Data(_))));
    let flipped = c.reversed();
    assert!(matches!(CtstSchedule::new((quick(), c), (quick(), flipped)), Err(Error::Data(_))));
}

#[test]
fn second_stage_leaves_encoder_bits_untouched() {
    let (sw, c, cfg) = tiny_setup();
    let model = Seq2SeqModel::new(cfg).unwrap();
    let sched = CtstSchedule::new((quick(), c.clone()), (quick(), c.clone())).unwrap();
    let out = train_ctst(model, &sw, &sched, &c).unwrap();
    let (a, b) = (&out.stage1.model, &out.stage2.model);
    let mut encoder_tensors = 0;
    let mut moved = false;
    for spec in &a.layout().specs {
        let same = a.params[spec.range()].iter().zip(&b.params[spec.range()]).all(|(x, y)| x.to_bits() == y.to_bits());
        if spec.name.starts_with("encoder.") {
            encoder_tensors += 1;
            assert!(same, "{} changed", spec.name);
        } else {
            moved |= !same;
        }
    }
    assert!(encoder_tensors > 0);
    assert!(moved, "stage two trained nothing");
}

#[test]
fn zero_step_second_stage_returns_first_stage_model() {
    let (sw, c, cfg) = tiny_setup();
    let model = Seq2SeqModel::new(cfg).unwrap();
    let none = TrainConfig { max_steps: 0, ..quick() };
    let sched = CtstSchedule::new((quick(), c.clone()), (none, c.clone())).unwrap();
    let out = train_ctst(model, &sw, &sched, &c).unwrap();
    assert_eq!(out.stage1.model.params, out.stage2.model.params);
}

#[test]
fn ctst_rejects_foreign_vocabulary() {
    let (sw, c, mut cfg) = tiny_setup();
    cfg.vocab_size += 1;
    let model = Seq2SeqModel::new(cfg).unwrap();
    let sched = CtstSchedule::new((quick(), c.clone()), (quick(), c.clone())).unwrap();
    assert!(matches!(train_ctst(model, &sw, &sched, &c), Err(Error::VocabMismatch(_))));
}

#[test]
fn tst_training_input_checks() {
    let (sw, c, mut cfg) = tiny_setup();
    assert!(matches!(train_tst(&c, &c, &sw, &cfg, &quick()), Err(Error::Data(_))));
    let mono_pairs = ParallelCorpus { target_language: "s".into(), ..c.clone() };
    let empty = ParallelCorpus::empty("s", "s");
    assert!(matches!(train_tst(&empty, &mono_pairs, &sw, &cfg, &quick()), Err(Error::Data(_))));
    assert!(matches!(train_tst(&mono_pairs, &mono_pairs, &sw, &cfg, &quick()), Err(Error::Config(_))));
    cfg.target_language = "s".into();
    let out = train_tst(&mono_pairs, &mono_pairs, &sw, &cfg, &quick()).unwrap();
    assert_eq!(out.model.config.target_language, "s");
}
