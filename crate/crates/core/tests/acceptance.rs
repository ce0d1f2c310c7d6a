//! Acceptance checks, one line per criterion.
//!
//! Runs as a plain binary so the report always prints in order. Exits with
//! status 1 when any criterion fails. Pass `quick` after `--` to run only the
//! criteria that need no trained systems.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tstbt::corpus::{ParallelCorpus, Provenance, Sentence, SentencePair, SubwordModel, BOS_ID, EOS_ID};
use tstbt::decode::{beam_decode, decode_one, DecodeConfig, DecodeMode, StepModel};
use tstbt::metrics::{bleu, chrf, EvalReport};
use tstbt::nnet::{kernels, pattern_matches, Adam, AdamConfig, ModelConfig, Seq2SeqModel, TrainConfig};
use tstbt::pipeline::{ExperimentConfig, RunManifest, Runner, Stop, Variant};
use tstbt::tst::{encoder_freeze_set, train_ctst, CtstSchedule};

const GRAD_REL_TOL: f64 = 1e-3;
/// Denominator floor for coordinates whose gradient is essentially zero.
const GRAD_FLOOR: f64 = 1e-6;
const GRAD_SAMPLES: usize = 20;
const SOFTMAX_TOL: f64 = 1e-5;
const ADAM_TOL: f64 = 1e-12;
const METRIC_TOL: f64 = 0.01;
const SAMPLING_SIGMAS: f64 = 3.0;
/// Allowed Original-test BLEU gain of beam BT over the baseline.
const BT_ORIGINAL_TOL: f64 = 0.5;
/// Allowed Reverse-test BLEU loss of cascaded TST BT against beam BT.
const TST_REVERSE_TOL: f64 = 2.0;
/// Required nature-ratio gain of transferred over raw BT sources.
const NATURE_MARGIN: f64 = 0.1;
const CLASSIFIER_MIN: f64 = 0.9;
const CONTROL_TOL: f64 = 0.05;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn tiny_model(vocab: usize, seed: u64, max_positions: usize) -> Seq2SeqModel {
    let cfg = ModelConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        model_dim: 8,
        ffn_dim: 12,
        heads: 2,
        dropout: 0.0,
        max_positions,
        init_seed: seed,
        ..ModelConfig::small(vocab)
    };
    let mut m = Seq2SeqModel::new(cfg).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xa11);
    for p in m.params.iter_mut() {
        *p += r.gen_range(-0.5..0.5);
    }
    m
}

fn numerics() -> Outcome {
    let mut cfg = tiny_model(14, 1, 16).config.clone();
    cfg.encoder_layers = 2;
    cfg.decoder_layers = 2;
    let mut m = Seq2SeqModel::new(cfg).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    for p in m.params.iter_mut() {
        *p += r.gen_range(-0.2..0.2);
    }
    let data: Vec<(Vec<u32>, Vec<u32>)> =
        vec![(vec![6, 7, 8, 13], vec![9, 10]), (vec![10], vec![6, 7, 8, 9]), (vec![11, 12], vec![12, 11, 6])];
    let pairs: Vec<(&[u32], &[u32])> = data.iter().map(|(a, b)| (&a[..], &b[..])).collect();
    let (_, grad) = m.loss_and_gradients(&pairs, 0.1).unwrap();
    let h = 1e-5;
    let (mut worst, mut checked, mut families) = (0.0f64, 0, 0);
    for spec in m.layout().specs.clone() {
        families += 1;
        for _ in 0..GRAD_SAMPLES {
            let i = spec.offset + r.gen_range(0..spec.numel());
            let mut p = m.clone();
            p.params[i] += h;
            let lp = p.loss_and_gradients(&pairs, 0.1).unwrap().0;
            p.params[i] -= 2.0 * h;
            let lm = p.loss_and_gradients(&pairs, 0.1).unwrap().0;
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
    }

    let mut softmax_err = 0.0f64;
    for row in m.forward(&[6, 7, 8], &[9, 10, 11]).unwrap() {
        softmax_err = softmax_err.max((row.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs());
    }
    for scale in [1.0, 50.0, 700.0] {
        let mut row: Vec<f64> = (0..40).map(|_| r.gen_range(-scale..scale)).collect();
        kernels::softmax_in_place(&mut row);
        softmax_err = softmax_err.max((row.iter().sum::<f64>() - 1.0).abs());
    }

    let cfg = AdamConfig { beta1: 0.9, beta2: 0.98, epsilon: 1e-8 };
    let mut adam = Adam::new(cfg, 3);
    let mut params = vec![0.5, -1.0, 2.0];
    let (mut m1, mut v1, mut x) = ([0.0; 3], [0.0; 3], params.clone());
    let mut adam_err = 0.0f64;
    for t in 1..=50 {
        let grads: Vec<f64> = params.iter().map(|p| 2.0 * p - 0.3).collect();
        adam.update(&mut params, &grads, 0.01, None);
        for j in 0..3 {
            let g = 2.0 * x[j] - 0.3;
            m1[j] = 0.9 * m1[j] + 0.1 * g;
            v1[j] = 0.98 * v1[j] + 0.02 * g * g;
            let mh = m1[j] / (1.0 - 0.9f64.powi(t));
            let vh = v1[j] / (1.0 - 0.98f64.powi(t));
            x[j] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            adam_err = adam_err.max((x[j] - params[j]).abs());
        }
    }
    outcome(
        worst < GRAD_REL_TOL && softmax_err < SOFTMAX_TOL && adam_err < ADAM_TOL,
        format!(
            "{checked} coordinates over {families} tensors, worst relative gradient error {worst:.2e}; softmax {softmax_err:.1e}; adam {adam_err:.1e}"
        ),
    )
}

fn greedy(m: &Seq2SeqModel, src: &[u32], max_len: usize) -> Vec<u32> {
    let ctx = m.prepare(src).unwrap();
    let mut state = vec![m.initial_state(&ctx)];
    let (mut out, mut last) = (Vec::new(), BOS_ID);
    while out.len() < max_len {
        let row = m.step(&ctx, &mut state, &[last]).remove(0);
        let mut best = EOS_ID;
        for v in EOS_ID..row.len() as u32 {
            if row[v as usize] > row[best as usize] {
                best = v;
            }
        }
        out.push(best);
        last = best;
        if best == EOS_ID {
            break;
        }
    }
    out
}

/// Log-probability of every continuation of `prefix`, by explicit replay.
fn row_after(m: &Seq2SeqModel, src: &[u32], prefix: &[u32]) -> Vec<f64> {
    let ctx = m.prepare(src).unwrap();
    let mut state = vec![m.initial_state(&ctx)];
    let mut row = m.step(&ctx, &mut state, &[BOS_ID]).remove(0);
    for &t in prefix {
        row = m.step(&ctx, &mut state, &[t]).remove(0);
    }
    row
}

/// Every EOS-terminated sequence of at most `max_len` tokens with its log-probability.
fn enumerate(m: &Seq2SeqModel, src: &[u32], max_len: usize) -> Vec<(Vec<u32>, f64)> {
    let v = m.config.vocab_size as u32;
    let mut done = Vec::new();
    let mut frontier = vec![(Vec::<u32>::new(), 0.0)];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for (p, s) in frontier {
            let row = row_after(m, src, &p);
            for t in EOS_ID..v {
                let mut q = p.clone();
                q.push(t);
                if t == EOS_ID {
                    done.push((q, s + row[t as usize]));
                } else {
                    next.push((q, s + row[t as usize]));
                }
            }
        }
        frontier = next;
    }
    done
}

fn decoder_oracles() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut greedy_ok = 0;
    for seed in 0..100 {
        let m = tiny_model(12, seed, 16);
        let src: Vec<u32> = (0..r.gen_range(1..5)).map(|_| r.gen_range(6..12)).collect();
        let h = beam_decode(&m, &src, &DecodeConfig::beam(1, 8)).unwrap().remove(0);
        greedy_ok += (h.tokens == greedy(&m, &src, 8)) as usize;
    }

    let mut exhaustive_ok = 0;
    let instances = 20;
    for seed in 0..instances {
        let m = tiny_model(7, 100 + seed, 8);
        let src = [6, 6];
        let all = enumerate(&m, &src, 4);
        let alpha = if seed % 2 == 0 { 0.0 } else { 1.0 };
        let cfg = DecodeConfig { mode: DecodeMode::Beam { width: 512, length_penalty: alpha }, max_len: 4, min_len: 1 };
        let h = beam_decode(&m, &src, &cfg).unwrap().remove(0);
        let norm = |t: &[u32], s: f64| s / (t.len() as f64).powf(alpha);
        let best = all.iter().map(|(t, s)| norm(t, *s)).fold(f64::NEG_INFINITY, f64::max);
        exhaustive_ok += ((h.normalized_score - best).abs() < 1e-9 && all.iter().any(|(t, _)| *t == h.tokens)) as usize;
    }

    let m = tiny_model(7, 7, 8);
    let src = [6];
    let cfg = DecodeConfig::sampling(1.0, 2024, 2);
    let n = 10_000;
    let mut counts = std::collections::BTreeMap::<Vec<u32>, usize>::new();
    for i in 0..n {
        *counts.entry(decode_one(&m, &src, &cfg, i).unwrap().tokens).or_default() += 1;
    }
    let emittable = |row: Vec<f64>| -> Vec<f64> {
        let z: f64 = row[EOS_ID as usize..].iter().map(|x| x.exp()).sum();
        row.iter().map(|x| x.exp() / z).collect()
    };
    let first = emittable(row_after(&m, &src, &[]));
    let mut expected = vec![(vec![EOS_ID], first[EOS_ID as usize])];
    for a in EOS_ID + 1..7 {
        let second = emittable(row_after(&m, &src, &[a]));
        for b in EOS_ID..7 {
            expected.push((vec![a, b], first[a as usize] * second[b as usize]));
        }
    }
    let mut worst_sigma = 0.0f64;
    for (seq, p) in &expected {
        let f = *counts.get(seq).unwrap_or(&0) as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        worst_sigma = worst_sigma.max((f - p).abs() / se);
    }
    outcome(
        greedy_ok == 100 && exhaustive_ok == instances as usize && worst_sigma <= SAMPLING_SIGMAS,
        format!(
            "beam-1 = greedy on {greedy_ok}/100 models; exhaustive beam = brute force on {exhaustive_ok}/{instances}; sampling worst deviation {worst_sigma:.2} standard errors"
        ),
    )
}

fn metric_fixtures() -> Outcome {
    use common::{corpus, oracle, toks, FIXTURES};
    let mut worst = 0.0f64;
    for (h, r, b, c) in FIXTURES {
        let (h, r) = (corpus(h), corpus(r));
        let gb = bleu(&h, &r).unwrap().score;
        let gc = chrf(&h, &r).unwrap().score;
        worst = worst.max((gb - oracle::bleu(&toks(&h), &toks(&r))).abs());
        worst = worst.max((gc - oracle::chrf(&toks(&h), &toks(&r))).abs());
        if let Some(b) = b {
            worst = worst.max((gb - b).abs());
        }
        if let Some(c) = c {
            worst = worst.max((gc - c).abs());
        }
    }
    let example = bleu(&corpus(&["a b c d"]), &corpus(&["a b c d e"])).unwrap().score;
    outcome(
        FIXTURES.len() >= 10 && worst < METRIC_TOL && (example - 77.88).abs() < METRIC_TOL,
        format!("{} fixtures, worst deviation {worst:.4}; worked example {example:.2}", FIXTURES.len()),
    )
}

fn scores(r: &EvalReport) -> String {
    let rev = r.reverse.as_ref().expect("reverse test evaluated");
    format!("O {:.1}/{:.1} R {:.1}/{:.1}", r.original.bleu, r.original.chrf, rev.bleu, rev.chrf)
}

struct Experiment {
    baseline: EvalReport,
    beam: EvalReport,
    cascade: RunManifest,
    direct: EvalReport,
    to_beam: Duration,
    total: Duration,
}

fn experiment() -> Experiment {
    let cfg = ExperimentConfig::default();
    let mut runner = Runner::new(None);
    let t0 = Instant::now();
    let mut run = |v: &str| {
        let c = ExperimentConfig { variant: v.parse::<Variant>().unwrap(), ..cfg.clone() };
        let (m, _) = runner.execute(&c, Stop::Evaluate).unwrap_or_else(|e| panic!("{v}: {e}"));
        eprintln!("  {v}: {} after {:.0}s", scores(m.system().unwrap()), t0.elapsed().as_secs_f64());
        m
    };
    let baseline = run("bitext").reports.remove(0);
    let beam = run("beam").reports.remove(1);
    let to_beam = t0.elapsed();
    let cascade = run("beam+cascade");
    let direct = run("beam+direct").reports.remove(1);
    Experiment { baseline, beam, cascade, direct, to_beam, total: t0.elapsed() }
}

fn bt_signature(e: &Experiment) -> Outcome {
    let (b, t) = (&e.baseline, &e.beam);
    let raises_r = t.reverse.as_ref().unwrap().bleu > b.reverse.as_ref().unwrap().bleu;
    let keeps_o = t.original.bleu <= b.original.bleu + BT_ORIGINAL_TOL;
    outcome(
        raises_r && keeps_o && e.to_beam <= Duration::from_secs(15 * 60),
        format!("bitext {} -> beam BT {} in {:.0}s", scores(b), scores(t), e.to_beam.as_secs_f64()),
    )
}

fn transfer_signature(e: &Experiment) -> Outcome {
    let (bt, tst, ctst) = (&e.beam, e.cascade.system().unwrap(), &e.direct);
    let o_up = tst.original.bleu > bt.original.bleu && tst.original.chrf > bt.original.chrf;
    let r_kept = tst.reverse.as_ref().unwrap().bleu >= bt.reverse.as_ref().unwrap().bleu - TST_REVERSE_TOL;
    let ctst_up = ctst.original.bleu > bt.original.bleu;
    outcome(
        o_up && r_kept && ctst_up && e.total <= Duration::from_secs(30 * 60),
        format!(
            "beam BT {} | cascade {} | direct {} | {:.0}s",
            scores(bt),
            scores(tst),
            scores(ctst),
            e.total.as_secs_f64()
        ),
    )
}

fn nature_ratio(e: &Experiment) -> Outcome {
    let a = e.cascade.analysis.as_ref().unwrap();
    outcome(
        a.nature_ratio_tst > a.nature_ratio_bt + NATURE_MARGIN,
        format!("raw BT {:.3} -> transferred {:.3}", a.nature_ratio_bt, a.nature_ratio_tst),
    )
}

fn tide(e: &Experiment) -> Outcome {
    let t = &e.cascade.analysis.as_ref().unwrap().tide;
    let ratios: Vec<String> = t.records.iter().map(|r| format!("{:.3}", r.ratio)).collect();
    outcome(t.records.len() == 5 && t.alternates(), format!("ratios {}", ratios.join(" ")))
}

fn freeze_contract() -> Outcome {
    let mut c = ParallelCorpus::empty("s", "t");
    for (s, t) in [("a b", "x y"), ("b c", "y z"), ("c a", "z x"), ("a a b", "x x y"), ("c b a", "z y x")] {
        c.push(SentencePair {
            source: Sentence::from_line(s),
            target: Sentence::from_line(t),
            source_provenance: Provenance::Nature,
            target_provenance: Provenance::Ht,
        })
        .unwrap();
    }
    let sw = SubwordModel::train(&[&c.source_side(), &c.target_side()], 0).unwrap();
    let mut cfg = tiny_model(sw.vocab().len(), 5, 16).config.clone();
    cfg.source_language = "s".into();
    cfg.target_language = "t".into();
    cfg.vocab_fingerprint = sw.vocab().fingerprint();
    let tc = TrainConfig { base_lr: 1e-2, warmup_steps: 1, batch_tokens: 64, max_steps: 10, eval_interval: 5, ..TrainConfig::default() };
    let sched = CtstSchedule::new((tc.clone(), c.clone()), (tc, c.clone())).unwrap();
    let out = train_ctst(Seq2SeqModel::new(cfg).unwrap(), &sw, &sched, &c).unwrap();
    let (a, b) = (&out.stage1.model, &out.stage2.model);
    let frozen = encoder_freeze_set();
    let is_encoder = |name: &str| frozen.iter().any(|p| pattern_matches(p, name));
    let encoder_bytes = |m: &Seq2SeqModel| -> Vec<u8> {
        let mut bytes = Vec::new();
        for spec in m.layout().specs.iter().filter(|s| is_encoder(&s.name)) {
            for p in &m.params[spec.range()] {
                bytes.extend_from_slice(&p.to_le_bytes());
            }
        }
        bytes
    };
    let (ea, eb) = (encoder_bytes(a), encoder_bytes(b));
    let decoder_moved = a.params != b.params;
    let mut probe = b.clone();
    let spec = probe.layout().specs.iter().find(|s| is_encoder(&s.name)).unwrap().clone();
    let i = spec.offset;
    probe.params[i] = f64::from_bits(probe.params[i].to_bits() ^ 1);
    let detects = encoder_bytes(&probe) != ea;
    outcome(
        !ea.is_empty() && ea == eb && decoder_moved && detects,
        format!("{} encoder bytes identical across stage two; one-bit change detected: {detects}", ea.len()),
    )
}

fn reproducibility() -> Outcome {
    let dir = std::env::temp_dir().join(format!("tstbt-acceptance-{}", std::process::id()));
    let variants: Vec<Variant> = ["bitext", "beam", "sampling", "noised", "tagged", "beam+ft", "beam+cascade", "noised+cascade", "beam+direct"]
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    let run = |name: &str| {
        let cfg = ExperimentConfig::smoke(dir.join(name));
        tstbt::pipeline::run_all(&cfg, &variants, &mut Runner::new(Some(dir.join(name).join("cache")))).unwrap()
    };
    let (a, b) = (run("first"), run("second"));
    let same = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.same_artifacts(y));
    let stages: usize = a.iter().map(|m| m.stages.len()).sum();
    let _ = std::fs::remove_dir_all(&dir);
    outcome(same, format!("{} variants, {stages} stage records, separate caches", a.len()))
}

fn classifier(e: &Experiment) -> Outcome {
    let a = e.cascade.analysis.as_ref().unwrap();
    outcome(
        a.accuracy_source >= CLASSIFIER_MIN && a.accuracy_target >= CLASSIFIER_MIN && (a.accuracy_control - 0.5).abs() <= CONTROL_TOL,
        format!(
            "held-out accuracy {:.3} (source) {:.3} (target); identical-corpora control {:.3}",
            a.accuracy_source, a.accuracy_target, a.accuracy_control
        ),
    )
}

fn report(n: usize, name: &str, started: Instant, o: Outcome, failures: &mut usize) {
    if !o.pass {
        *failures += 1;
    }
    println!(
        "criterion {n:>2} {:<4} {name}: {} [{:.0}s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        started.elapsed().as_secs_f64()
    );
}

fn main() {
    let mut failures = 0;
    let t = Instant::now();
    report(1, "numerics", t, numerics(), &mut failures);
    let t = Instant::now();
    report(2, "decoder oracles", t, decoder_oracles(), &mut failures);
    let t = Instant::now();
    report(3, "metric fixtures", t, metric_fixtures(), &mut failures);
    let quick = std::env::args().any(|a| a == "quick");
    if quick {
        let t = Instant::now();
        report(8, "encoder freeze", t, freeze_contract(), &mut failures);
        let t = Instant::now();
        report(9, "reproducibility", t, reproducibility(), &mut failures);
    } else {
        full(&mut failures);
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        if std::env::args().any(|a| a == "strict") {
            std::process::exit(1);
        }
        return;
    }
    println!("all criteria passed");
}

fn full(failures: &mut usize) {
    let t = Instant::now();
    let e = experiment();
    report(4, "beam BT signature", t, bt_signature(&e), failures);
    report(5, "style transfer signature", t, transfer_signature(&e), failures);
    report(6, "nature ratio", t, nature_ratio(&e), failures);
    report(7, "style tide", t, tide(&e), failures);
    let t = Instant::now();
    report(8, "encoder freeze", t, freeze_contract(), failures);
    let t = Instant::now();
    report(9, "reproducibility", t, reproducibility(), failures);
    report(10, "classifier premise", t, classifier(&e), failures);
}
