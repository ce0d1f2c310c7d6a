//! Sequential versus rayon execution of the data-parallel hot paths.
//!
//! With one hardware thread the two modes should be close; the gap grows
//! with the core count.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tstbt::corpus::{MonoCorpus, SubwordModel};
use tstbt::decode::{translate_corpus, DecodeConfig, NmtSystem};
use tstbt::nnet::{batch_gradient, encode_pairs, ModelConfig, Seq2SeqModel};
use tstbt::par::{self, Mode};
use tstbt::styleclf::{nature_ratio_of, train_classifier, ClassifierConfig};
use tstbt::synthworld::{generate_world, WorldData, WorldSizes, WorldSpec};

const MODES: [Mode; 2] = [Mode::Sequential, Mode::Parallel];

fn setup() -> (WorldData, SubwordModel, Seq2SeqModel) {
    let sizes = WorldSizes { bitext: 400, mono_source: 400, mono_target: 400, test: 40, dev: 40 };
    let data = generate_world(&WorldSpec::default(), &sizes).unwrap();
    let sw = SubwordModel::train(&[&data.bitext.source_side(), &data.bitext.target_side()], 200).unwrap();
    let cfg = ModelConfig {
        vocab_size: sw.vocab().len(),
        vocab_fingerprint: sw.vocab().fingerprint(),
        source_language: data.bitext.source_language.clone(),
        target_language: data.bitext.target_language.clone(),
        ..ModelConfig::small(0)
    };
    (data, sw, Seq2SeqModel::new(cfg).unwrap())
}

fn bench(c: &mut Criterion) {
    let (data, sw, model) = setup();
    let ids = encode_pairs(&data.bitext, &sw);
    let batch: Vec<usize> = (0..128).collect();

    let mut g = c.benchmark_group("batch_gradient");
    g.sample_size(10);
    for mode in MODES {
        par::set_mode(mode);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, _| {
            b.iter(|| batch_gradient(&model, &ids, &batch, 0.1, 16, Some(1)).unwrap())
        });
    }
    g.finish();

    let system = NmtSystem::new(model.clone(), sw.clone()).unwrap();
    let inputs = MonoCorpus { sentences: data.source_mono.sentences[..32].to_vec(), ..data.source_mono.clone() };
    let beam = DecodeConfig::beam(4, 20);
    let mut g = c.benchmark_group("beam_translate");
    g.sample_size(10);
    for mode in MODES {
        par::set_mode(mode);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, _| {
            b.iter(|| translate_corpus(&system, &inputs, &beam).unwrap())
        });
    }
    g.finish();

    let mut mt = data.bitext.source_side();
    mt.provenance = tstbt::corpus::Provenance::Mt;
    let mut g = c.benchmark_group("classifier");
    g.sample_size(10);
    for mode in MODES {
        par::set_mode(mode);
        g.bench_with_input(BenchmarkId::new("train", format!("{mode:?}")), &mode, |b, _| {
            b.iter(|| train_classifier(&data.source_mono, &mt, &ClassifierConfig::default()).unwrap())
        });
        let clf = train_classifier(&data.source_mono, &mt, &ClassifierConfig::default()).unwrap();
        g.bench_with_input(BenchmarkId::new("score", format!("{mode:?}")), &mode, |b, _| {
            b.iter(|| nature_ratio_of(&clf, &data.source_mono.sentences).unwrap())
        });
    }
    g.finish();
    par::set_mode(Mode::Parallel);
}

criterion_group!(benches, bench);
criterion_main!(benches);
