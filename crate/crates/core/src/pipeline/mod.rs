//! Experiment orchestration.
//!
//! A run is a fixed sequence of named stages. The cache key of a stage hashes
//! its configuration together with the digests of its inputs, so an artifact
//! is reused only when everything it depends on is unchanged. Every stage
//! appends one record to the run manifest.

use std::any::Any;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::augment::{
    beam_bt, forward_translate, noise_corpus, sampling_bt, tag_corpus, AugmentMeta, Augmented, NoiseConfig,
    TagConfig,
};
use crate::corpus::{
    mix, read_corpus, read_parallel, write_corpus, write_parallel, MonoCorpus, ParallelCorpus, Provenance,
    SubwordModel,
};
use crate::decode::{DecodeConfig, NmtSystem};
use crate::error::{Error, Result};
use crate::metrics::{audit_overlap, evaluate, ComparisonTable, EvalReport, TestSets};
use crate::nnet::{encode_pairs, train, Checkpoint, ModelConfig, Seq2SeqModel, TrainConfig};
use crate::styleclf::{nature_ratio_of, style_tide, train_classifier, ClassifierConfig, TideTrace};
use crate::synthworld::{generate_world, WorldData, WorldSizes, WorldSpec};
use crate::tst::{apply_tst, rtt_generate, train_ctst, train_tst, CtstSchedule};
use crate::util::{derive_seed, sha256_hex, Hasher};

/// Environment variable naming the artifact cache directory.
pub const CACHE_ENV: &str = "TSTBT_CACHE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BtKind {
    Beam,
    Sampling,
    Noised,
    Tagged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TstKind {
    #[default]
    Plain,
    Cascade,
    Direct,
}

/// Which synthetic data the final system is trained with. `bt: None` is the
/// bitext-only baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub bt: Option<BtKind>,
    #[serde(default)]
    pub tst: TstKind,
    /// Add forward-translated (Nature source, MT target) pairs.
    #[serde(default)]
    pub forward: bool,
}

impl Variant {
    pub fn bitext() -> Variant {
        Variant { bt: None, tst: TstKind::Plain, forward: false }
    }

    pub fn new(bt: BtKind, tst: TstKind, forward: bool) -> Variant {
        Variant { bt: Some(bt), tst, forward }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bt.is_none() && (self.tst != TstKind::Plain || self.forward) {
            return Err(Error::Config("style transfer and forward translation need a back-translation variant".into()));
        }
        if self.tst == TstKind::Direct && self.forward {
            return Err(Error::Config("direct CTST already trains on forward translation; drop +ft".into()));
        }
        Ok(())
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bt = match self.bt {
            None => return f.write_str("bitext"),
            Some(BtKind::Beam) => "beam",
            Some(BtKind::Sampling) => "sampling",
            Some(BtKind::Noised) => "noised",
            Some(BtKind::Tagged) => "tagged",
        };
        f.write_str(bt)?;
        match self.tst {
            TstKind::Plain => {}
            TstKind::Cascade => f.write_str("+cascade")?,
            TstKind::Direct => f.write_str("+direct")?,
        }
        if self.forward {
            f.write_str("+ft")?;
        }
        Ok(())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Parses names such as `bitext`, `beam`, `noised+cascade`, `beam+direct`, `tagged+ft`.
    fn from_str(s: &str) -> Result<Variant> {
        let mut parts = s.split('+');
        let bad = || Error::Config(format!("unknown variant {s:?}"));
        let bt = match parts.next().ok_or_else(bad)? {
            "bitext" => None,
            "beam" => Some(BtKind::Beam),
            "sampling" => Some(BtKind::Sampling),
            "noised" => Some(BtKind::Noised),
            "tagged" => Some(BtKind::Tagged),
            _ => return Err(bad()),
        };
        let mut v = Variant { bt, tst: TstKind::Plain, forward: false };
        for p in parts {
            match p {
                "cascade" if v.tst == TstKind::Plain => v.tst = TstKind::Cascade,
                "direct" if v.tst == TstKind::Plain => v.tst = TstKind::Direct,
                "ft" if !v.forward => v.forward = true,
                _ => return Err(bad()),
            }
        }
        v.validate()?;
        Ok(v)
    }
}

/// Where the corpora come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    World { spec: WorldSpec, sizes: WorldSizes },
    /// A directory in the layout written by [`export_data`].
    Files { dir: PathBuf, source_language: String, target_language: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSource,
    /// Replaces the monolingual corpora and test sets, e.g. with in-domain data.
    #[serde(default)]
    pub in_domain: Option<DataSource>,
    pub subword_merges: usize,
    /// Template for translation models; languages, vocabulary and seed are filled in.
    pub model: ModelConfig,
    pub tst_model: ModelConfig,
    pub train: TrainConfig,
    /// Training on bitext mixed with synthetic data.
    pub retrain: TrainConfig,
    pub tst_train: TrainConfig,
    pub ctst_stage1: TrainConfig,
    pub ctst_stage2: TrainConfig,
    /// Evaluation, forward translation, round trips and beam BT.
    pub decode: DecodeConfig,
    /// Sampling BT.
    pub sampling: DecodeConfig,
    /// Applying the style transfer model.
    pub tst_decode: DecodeConfig,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub tag: TagConfig,
    /// Synthetic pairs per bitext pair.
    pub mix_ratio: f64,
    /// Mix the bitext into both CTST stages.
    pub ctst_with_bitext: bool,
    /// Round-trip pairs held out as style transfer dev data.
    pub tst_dev_size: usize,
    pub variant: Variant,
    /// Use this style transfer checkpoint instead of training one.
    #[serde(default)]
    pub tst_checkpoint: Option<PathBuf>,
    pub classifier: ClassifierConfig,
    pub tide_rounds: usize,
    /// Run the classifier analysis for cascaded variants.
    pub analysis: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig {
            base_lr: 4e-3,
            warmup_steps: 100,
            batch_tokens: 1500,
            max_steps: 800,
            eval_interval: 100,
            ..TrainConfig::default()
        };
        let model = ModelConfig::small(0);
        ExperimentConfig {
            seed: 1,
            data: DataSource::World {
                spec: WorldSpec::default(),
                sizes: WorldSizes { bitext: 2000, mono_source: 6000, mono_target: 6000, test: 200, dev: 200 },
            },
            in_domain: None,
            subword_merges: 800,
            tst_model: model.clone(),
            model,
            tst_train: TrainConfig { max_steps: 1600, ..train.clone() },
            ctst_stage1: train.clone(),
            ctst_stage2: train.clone(),
            retrain: TrainConfig { max_steps: 1600, ..train.clone() },
            train,
            decode: DecodeConfig::beam(4, 40),
            sampling: DecodeConfig::sampling(1.0, 7, 40),
            tst_decode: DecodeConfig::sampling(0.5, 3, 40),
            noise: NoiseConfig::default(),
            tag: TagConfig::default(),
            mix_ratio: 2.0,
            ctst_with_bitext: true,
            tst_dev_size: 200,
            variant: Variant::new(BtKind::Beam, TstKind::Cascade, false),
            tst_checkpoint: None,
            classifier: ClassifierConfig::default(),
            tide_rounds: 4,
            analysis: true,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    /// A tiny configuration that runs every stage in seconds. Its numbers
    /// mean nothing; it exercises the plumbing.
    pub fn smoke(output_dir: impl Into<PathBuf>) -> ExperimentConfig {
        let model = ModelConfig { model_dim: 8, ffn_dim: 16, encoder_layers: 1, decoder_layers: 1, heads: 2, ..ModelConfig::small(0) };
        let train = TrainConfig { base_lr: 1e-2, warmup_steps: 2, batch_tokens: 200, max_steps: 6, eval_interval: 3, ..TrainConfig::default() };
        ExperimentConfig {
            data: DataSource::World {
                spec: WorldSpec::default(),
                sizes: WorldSizes { bitext: 120, mono_source: 40, mono_target: 40, test: 12, dev: 10 },
            },
            subword_merges: 40,
            tst_model: ModelConfig { dropout: 0.3, ..model.clone() },
            model,
            tst_train: train.clone(),
            ctst_stage1: train.clone(),
            ctst_stage2: train.clone(),
            retrain: train.clone(),
            train,
            decode: DecodeConfig::beam(2, 16),
            sampling: DecodeConfig::sampling(1.0, 7, 16),
            tst_decode: DecodeConfig::sampling(0.5, 3, 16),
            tst_dev_size: 5,
            tide_rounds: 2,
            output_dir: output_dir.into(),
            ..ExperimentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        for d in [&self.decode, &self.sampling, &self.tst_decode] {
            d.validate()?;
        }
        for t in [&self.train, &self.retrain, &self.tst_train, &self.ctst_stage1, &self.ctst_stage2] {
            t.validate()?;
        }
        if !self.ctst_stage1.freeze.is_empty() {
            return Err(Error::Config("CTST stage one trains every parameter".into()));
        }
        self.noise.validate()?;
        if !(self.mix_ratio >= 0.0 && self.mix_ratio.is_finite()) {
            return Err(Error::Config("mix_ratio must be non-negative".into()));
        }
        if let DataSource::World { spec, .. } = &self.data {
            spec.validate()?;
        }
        if let Some(p) = &self.tst_checkpoint {
            if !p.exists() {
                return Err(Error::Config(format!("style transfer checkpoint {} does not exist", p.display())));
            }
        }
        for src in std::iter::once(&self.data).chain(&self.in_domain) {
            if let DataSource::Files { dir, .. } = src {
                if !dir.is_dir() {
                    return Err(Error::Config(format!("data directory {} does not exist", dir.display())));
                }
            }
        }
        Ok(())
    }

    /// Digest of the canonical JSON form (object keys sorted). The output
    /// directory does not take part: moving a run does not change it.
    pub fn hash(&self) -> Result<String> {
        let cfg = ExperimentConfig { output_dir: PathBuf::new(), ..self.clone() };
        Ok(sha256_hex(canonical_json(&cfg)?.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_value(value)?.to_string())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Something a stage produces: storable in the cache and content-hashed.
trait Artifact: Clone + Send + 'static {
    fn save(&self, dir: &Path) -> Result<()>;
    fn load(dir: &Path) -> Result<Self>;
    fn digest(&self) -> String;
}

macro_rules! json_artifact {
    ($($t:ty),*) => {$(
        impl Artifact for $t {
            fn save(&self, dir: &Path) -> Result<()> {
                write_file(&dir.join("artifact.json"), &serde_json::to_vec(self)?)
            }
            fn load(dir: &Path) -> Result<Self> {
                read_json(&dir.join("artifact.json"))
            }
            fn digest(&self) -> String {
                sha256_hex(canonical_json(self).expect("artifact serializes").as_bytes())
            }
        }
    )*};
}

json_artifact!(ParallelCorpus, EvalReport, StyleAnalysis, Augmented);

impl Artifact for WorldData {
    fn save(&self, dir: &Path) -> Result<()> {
        export_data(self, dir)
    }

    fn load(dir: &Path) -> Result<Self> {
        let meta: (String, String) = read_json(&dir.join("languages.json"))?;
        import_data(dir, &meta.0, &meta.1)
    }

    fn digest(&self) -> String {
        let mut h = Hasher::new();
        for c in [&self.bitext, &self.test_original, &self.test_reverse, &self.dev] {
            h.part(digest(&c).as_bytes());
        }
        for m in [&self.source_mono, &self.target_mono] {
            h.part(mono_digest(m).as_bytes());
        }
        h.finish()
    }
}

impl Artifact for SubwordModel {
    fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        SubwordModel::save(self, &dir.join("merges.txt"), &dir.join("vocab.txt"))
    }

    fn load(dir: &Path) -> Result<Self> {
        SubwordModel::load(&dir.join("merges.txt"), &dir.join("vocab.txt"))
    }

    fn digest(&self) -> String {
        let mut h = Hasher::new();
        for (a, b) in self.merges() {
            h.part(a.as_bytes()).part(b.as_bytes());
        }
        h.part(self.vocab().fingerprint().as_bytes());
        h.finish()
    }
}

impl Artifact for Seq2SeqModel {
    fn save(&self, dir: &Path) -> Result<()> {
        Checkpoint { model: self.clone(), vocab: None, optimizer: None, step: 0, dev_perplexity: 0.0 }
            .save(&dir.join("model.ckpt"))
    }

    fn load(dir: &Path) -> Result<Self> {
        Ok(Checkpoint::load(&dir.join("model.ckpt"))?.model)
    }

    fn digest(&self) -> String {
        model_digest(self)
    }
}

fn digest(c: &ParallelCorpus) -> String {
    Artifact::digest(c)
}

fn mono_digest(m: &MonoCorpus) -> String {
    sha256_hex(canonical_json(m).expect("corpus serializes").as_bytes())
}

/// Digest of a model's configuration and every parameter bit.
pub fn model_digest(m: &Seq2SeqModel) -> String {
    let mut h = Hasher::new();
    h.part(canonical_json(&m.config).expect("config serializes").as_bytes());
    let mut bytes = Vec::with_capacity(m.params.len() * 8);
    for p in &m.params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    h.part(&bytes);
    h.finish()
}

/// Writes every corpus of `data` under `dir`.
pub fn export_data(data: &WorldData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let langs = (data.bitext.source_language.clone(), data.bitext.target_language.clone());
    write_file(&dir.join("languages.json"), &serde_json::to_vec(&langs)?)?;
    for (name, c) in [
        ("bitext", &data.bitext),
        ("test_original", &data.test_original),
        ("test_reverse", &data.test_reverse),
        ("dev", &data.dev),
    ] {
        write_parallel(c, &dir.join(name))?;
    }
    write_corpus(&data.source_mono, &dir.join("source_mono.txt"))?;
    write_corpus(&data.target_mono, &dir.join("target_mono.txt"))
}

/// Reads the layout written by [`export_data`]; monolingual text is Nature.
pub fn import_data(dir: &Path, source_language: &str, target_language: &str) -> Result<WorldData> {
    let par = |name: &str| read_parallel(&dir.join(name), source_language, target_language, None);
    Ok(WorldData {
        bitext: par("bitext")?,
        test_original: par("test_original")?,
        test_reverse: par("test_reverse")?,
        dev: par("dev")?,
        source_mono: read_corpus(&dir.join("source_mono.txt"), source_language, Provenance::Nature)?,
        target_mono: read_corpus(&dir.join("target_mono.txt"), target_language, Provenance::Nature)?,
    })
}

fn load_source(src: &DataSource) -> Result<WorldData> {
    match src {
        DataSource::World { spec, sizes } => generate_world(spec, sizes),
        DataSource::Files { dir, source_language, target_language } => {
            import_data(dir, source_language, target_language)
        }
    }
}

/// One executed (or cache-loaded) stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    pub inputs: BTreeMap<String, String>,
    pub output: String,
    pub seeds: BTreeMap<String, u64>,
    pub seconds: f64,
    pub cached: bool,
}

/// Classifier-based style measurements of a cascaded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleAnalysis {
    pub accuracy_source: f64,
    pub accuracy_target: f64,
    /// Held-out accuracy when both classes hold the same sentences.
    pub accuracy_control: f64,
    /// Nature ratio of held-out back-translated sources before and after transfer.
    pub nature_ratio_bt: f64,
    pub nature_ratio_tst: f64,
    pub tide: TideTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub variant: String,
    pub stages: Vec<StageRecord>,
    /// Baseline first, then the variant's system (when it is not the baseline).
    pub reports: Vec<EvalReport>,
    /// Provenance label pairs of the final training corpus with counts.
    pub final_provenance: Vec<(String, String, usize)>,
    pub analysis: Option<StyleAnalysis>,
}

impl RunManifest {
    fn new(config_hash: String, variant: String) -> RunManifest {
        RunManifest { config_hash, variant, stages: Vec::new(), reports: Vec::new(), final_provenance: Vec::new(), analysis: None }
    }

    /// Stage names with their keys and output digests; wall times excluded.
    pub fn artifact_hashes(&self) -> Vec<(String, String, String)> {
        self.stages.iter().map(|s| (s.stage.clone(), s.key.clone(), s.output.clone())).collect()
    }

    /// True when both manifests record the same artifacts and results.
    pub fn same_artifacts(&self, other: &RunManifest) -> bool {
        self.config_hash == other.config_hash
            && self.artifact_hashes() == other.artifact_hashes()
            && self.reports == other.reports
            && self.final_provenance == other.final_provenance
            && self.analysis == other.analysis
    }

    /// The variant's final report.
    pub fn system(&self) -> Option<&EvalReport> {
        self.reports.last()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        read_json(path)
    }
}

/// Last stage to run; later stages are skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stop {
    Generate,
    Train,
    Augment,
    Tst,
    Mix,
    Evaluate,
}

/// Artifacts produced by a run, for export.
#[derive(Default)]
pub struct RunArtifacts {
    pub data: Option<WorldData>,
    pub subword: Option<SubwordModel>,
    pub s2t: Option<Seq2SeqModel>,
    pub t2s: Option<Seq2SeqModel>,
    pub synthetic: Option<ParallelCorpus>,
    pub tst: Option<Seq2SeqModel>,
    pub training_corpus: Option<ParallelCorpus>,
    pub system: Option<Seq2SeqModel>,
}

/// Executes stages with caching. One runner can serve several runs, sharing
/// artifacts between them.
pub struct Runner {
    cache_dir: Option<PathBuf>,
    memo: HashMap<String, Box<dyn Any + Send>>,
    previous: Vec<StageRecord>,
    manifest: RunManifest,
    manifest_path: Option<PathBuf>,
}

impl Runner {
    /// `cache_dir: None` keeps artifacts in memory only.
    pub fn new(cache_dir: Option<PathBuf>) -> Runner {
        Runner {
            cache_dir,
            memo: HashMap::new(),
            previous: Vec::new(),
            manifest: RunManifest::new(String::new(), String::new()),
            manifest_path: None,
        }
    }

    /// Cache directory from the environment, else `<output_dir>/cache`.
    pub fn from_env(cfg: &ExperimentConfig) -> Runner {
        let dir = std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| cfg.output_dir.join("cache"));
        Runner::new(Some(dir))
    }

    /// Compares every stage of the next run against `previous`: a stage with
    /// the same key but a different output fails the run.
    pub fn check_against(&mut self, previous: &RunManifest) {
        self.previous = previous.stages.clone();
    }

    /// Appends stage records to `path` as they complete.
    pub fn write_manifest_to(&mut self, path: Option<PathBuf>) {
        self.manifest_path = path;
    }

    fn stage<T: Artifact>(
        &mut self,
        name: &str,
        inputs: &[(&str, String)],
        config: &impl Serialize,
        seeds: &[(&str, u64)],
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        let wrap = |e: Error| Error::Stage { stage: name.to_owned(), source: Box::new(e) };
        let mut h = Hasher::new();
        h.part(name.as_bytes());
        for (k, v) in inputs {
            h.part(k.as_bytes()).part(v.as_bytes());
        }
        h.part(canonical_json(config).map_err(wrap)?.as_bytes());
        for (k, v) in seeds {
            h.part(k.as_bytes()).part(&v.to_le_bytes());
        }
        let key = h.finish();
        let t0 = Instant::now();
        let mut cached = true;
        let value: T = if let Some(v) = self.memo.get(&key).and_then(|b| b.downcast_ref::<T>()) {
            v.clone()
        } else {
            let dir = self.cache_dir.as_ref().map(|d| d.join(format!("{name}-{}", &key[..16])));
            let value = match &dir {
                Some(d) if d.join("complete").exists() => T::load(d).map_err(wrap)?,
                _ => {
                    cached = false;
                    log::info!("stage {name}: running");
                    let v = compute().map_err(wrap)?;
                    if let Some(d) = &dir {
                        let tmp = d.with_extension("partial");
                        let _ = std::fs::remove_dir_all(&tmp);
                        v.save(&tmp).map_err(wrap)?;
                        write_file(&tmp.join("complete"), b"").map_err(wrap)?;
                        let _ = std::fs::remove_dir_all(d);
                        std::fs::rename(&tmp, d).map_err(|e| wrap(Error::io(d, e)))?;
                    }
                    v
                }
            };
            self.memo.insert(key.clone(), Box::new(value.clone()));
            value
        };
        let output = value.digest();
        if let Some(prev) = self.previous.iter().find(|r| r.stage == name && r.key == key) {
            if prev.output != output {
                return Err(wrap(Error::Reproducibility(format!(
                    "output digest {} differs from the recorded {}",
                    &output[..16],
                    &prev.output[..16.min(prev.output.len())]
                ))));
            }
        }
        self.manifest.stages.push(StageRecord {
            stage: name.to_owned(),
            key,
            inputs: inputs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            output,
            seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            seconds: t0.elapsed().as_secs_f64(),
            cached,
        });
        self.flush()?;
        Ok(value)
    }

    fn flush(&self) -> Result<()> {
        match &self.manifest_path {
            Some(p) => self.manifest.save(p),
            None => Ok(()),
        }
    }

    /// Runs `cfg` up to and including `stop`.
    pub fn execute(&mut self, cfg: &ExperimentConfig, stop: Stop) -> Result<(RunManifest, RunArtifacts)> {
        cfg.validate()?;
        self.manifest = RunManifest::new(cfg.hash()?, cfg.variant.to_string());
        let mut art = RunArtifacts::default();
        let seed = |k: u64| derive_seed(cfg.seed, k);

        let mut data = self.stage("generate", &[], &cfg.data, &[], || load_source(&cfg.data))?;
        if let Some(dom) = &cfg.in_domain {
            let d = self.stage("generate-in-domain", &[], dom, &[], || load_source(dom))?;
            if (&d.bitext.source_language, &d.bitext.target_language)
                != (&data.bitext.source_language, &data.bitext.target_language)
            {
                return Err(Error::Config("in-domain data uses different language names".into()));
            }
            data = WorldData {
                source_mono: d.source_mono,
                target_mono: d.target_mono,
                test_original: d.test_original,
                test_reverse: d.test_reverse,
                ..data
            };
        }
        let tests = TestSets::new(data.test_original.clone(), data.test_reverse.clone());
        let training_lines = data
            .bitext
            .sources()
            .chain(data.bitext.targets())
            .chain(&data.source_mono.sentences)
            .chain(&data.target_mono.sentences);
        audit_overlap(training_lines, &tests).map_err(|e| Error::Stage { stage: "audit".into(), source: Box::new(e) })?;
        let data_digest = Artifact::digest(&data);
        art.data = Some(data.clone());
        if stop == Stop::Generate {
            return Ok(self.finish(art));
        }

        let sw = self.stage("subword", &[("data", data_digest.clone())], &cfg.subword_merges, &[], || {
            let corpora = [data.bitext.source_side(), data.bitext.target_side(), data.source_mono.clone(), data.target_mono.clone()];
            SubwordModel::train(&corpora.iter().collect::<Vec<_>>(), cfg.subword_merges)
        })?;
        let sw_digest = Artifact::digest(&sw);
        art.subword = Some(sw.clone());
        let (src, tgt) = (data.bitext.source_language.clone(), data.bitext.target_language.clone());
        let model_cfg = |template: &ModelConfig, from: &str, to: &str, init: u64| ModelConfig {
            vocab_size: sw.vocab().len(),
            vocab_fingerprint: sw.vocab().fingerprint(),
            source_language: from.to_owned(),
            target_language: to.to_owned(),
            init_seed: init,
            ..template.clone()
        };
        let seeded = |t: &TrainConfig, k: u64| TrainConfig { seed: seed(k), ..t.clone() };
        let system = |m: &Seq2SeqModel| NmtSystem::new(m.clone(), sw.clone());

        let s2t_cfg = (model_cfg(&cfg.model, &src, &tgt, seed(10)), seeded(&cfg.train, 11));
        let bitext_digest = digest(&data.bitext);
        let dev_digest = digest(&data.dev);
        let fit = |c: &(ModelConfig, TrainConfig), train_data: &ParallelCorpus, dev: &ParallelCorpus| -> Result<Seq2SeqModel> {
            let m = Seq2SeqModel::new(c.0.clone())?;
            Ok(train(m, &encode_pairs(train_data, &sw), &encode_pairs(dev, &sw), &c.1)?.model)
        };
        let s2t = self.stage(
            "train-s2t",
            &[("bitext", bitext_digest.clone()), ("dev", dev_digest.clone()), ("subword", sw_digest.clone())],
            &s2t_cfg,
            &[("init", s2t_cfg.0.init_seed), ("train", s2t_cfg.1.seed)],
            || fit(&s2t_cfg, &data.bitext, &data.dev),
        )?;
        let t2s_cfg = (model_cfg(&cfg.model, &tgt, &src, seed(12)), seeded(&cfg.train, 13));
        let (bitext_rev, dev_rev) = (data.bitext.reversed(), data.dev.reversed());
        let t2s = self.stage(
            "train-t2s",
            &[("bitext", bitext_digest.clone()), ("dev", dev_digest.clone()), ("subword", sw_digest.clone())],
            &t2s_cfg,
            &[("init", t2s_cfg.0.init_seed), ("train", t2s_cfg.1.seed)],
            || fit(&t2s_cfg, &bitext_rev, &dev_rev),
        )?;
        let (s2t_digest, t2s_digest) = (model_digest(&s2t), model_digest(&t2s));
        art.s2t = Some(s2t.clone());
        art.t2s = Some(t2s.clone());
        let (s2t_sys, t2s_sys) = (system(&s2t)?, system(&t2s)?);
        if stop == Stop::Train {
            return Ok(self.finish(art));
        }

        let tests_id = tests.id.clone();
        let baseline = if stop >= Stop::Evaluate {
            Some(self.stage("evaluate-baseline", &[("model", s2t_digest.clone()), ("tests", tests_id.clone())], &cfg.decode, &[], || {
                evaluate("bitext", &s2t_sys, &tests, &cfg.decode, &s2t_digest)
            })?)
        } else {
            None
        };

        let variant = cfg.variant;
        let Some(bt_kind) = variant.bt else {
            let report = baseline.expect("evaluation ran");
            self.manifest.final_provenance = census(&data.bitext);
            self.manifest.reports = vec![report];
            art.training_corpus = Some(data.bitext.clone());
            art.system = Some(s2t);
            return Ok(self.finish(art));
        };

        let target_digest = mono_digest(&data.target_mono);
        let source_digest = mono_digest(&data.source_mono);
        let raw = match bt_kind {
            BtKind::Sampling => self.stage(
                "augment-sampling",
                &[("model", t2s_digest.clone()), ("mono", target_digest.clone())],
                &cfg.sampling,
                &[],
                || sampling_bt(&t2s_sys, &data.target_mono, &cfg.sampling),
            )?,
            _ => self.stage(
                "augment-beam",
                &[("model", t2s_digest.clone()), ("mono", target_digest.clone())],
                &cfg.decode,
                &[],
                || beam_bt(&t2s_sys, &data.target_mono, &cfg.decode),
            )?,
        };
        let needs_forward = variant.forward || variant.tst == TstKind::Direct || (variant.tst == TstKind::Cascade && cfg.analysis);
        let forward = if needs_forward {
            Some(self.stage(
                "forward",
                &[("model", s2t_digest.clone()), ("mono", source_digest.clone())],
                &cfg.decode,
                &[],
                || forward_translate(&s2t_sys, &data.source_mono, &cfg.decode),
            )?)
        } else {
            None
        };

        let mut synthetic = raw.corpus.clone();
        if variant.tst == TstKind::Cascade {
            if stop < Stop::Tst {
                art.synthetic = Some(synthetic);
                return Ok(self.finish(art));
            }
            let tst = match &cfg.tst_checkpoint {
                Some(path) => {
                    let m = Checkpoint::load(path)?.model;
                    if m.config.vocab_size != sw.vocab().len()
                        || (!m.config.vocab_fingerprint.is_empty() && m.config.vocab_fingerprint != sw.vocab().fingerprint())
                    {
                        return Err(Error::Stage {
                            stage: "tst-load".into(),
                            source: Box::new(Error::VocabMismatch(format!("{} was trained with another vocabulary", path.display()))),
                        });
                    }
                    if m.config.source_language != src || m.config.target_language != src {
                        return Err(Error::Stage {
                            stage: "tst-load".into(),
                            source: Box::new(Error::Config("foreign style transfer model works on another language".into())),
                        });
                    }
                    m
                }
                None => {
                    let rtt = self.stage(
                        "tst-datagen",
                        &[("s2t", s2t_digest.clone()), ("t2s", t2s_digest.clone()), ("mono", source_digest.clone())],
                        &cfg.decode,
                        &[],
                        || rtt_generate(&s2t_sys, &t2s_sys, &data.source_mono, &cfg.decode),
                    )?;
                    let tst_cfg = (model_cfg(&cfg.tst_model, &src, &src, seed(20)), seeded(&cfg.tst_train, 21), cfg.tst_dev_size);
                    self.stage(
                        "tst-train",
                        &[("rtt", digest(&rtt)), ("subword", sw_digest.clone())],
                        &tst_cfg,
                        &[("init", tst_cfg.0.init_seed), ("train", tst_cfg.1.seed)],
                        || {
                            let n = rtt.len();
                            let held = cfg.tst_dev_size.min(n / 10).max(1);
                            if n <= held {
                                return Err(Error::Data("too few round-trip pairs to hold out dev data".into()));
                            }
                            let dev = ParallelCorpus { pairs: rtt.pairs[n - held..].to_vec(), ..rtt.clone() };
                            let tr = ParallelCorpus { pairs: rtt.pairs[..n - held].to_vec(), ..rtt.clone() };
                            Ok(train_tst(&tr, &dev, &sw, &tst_cfg.0, &tst_cfg.1)?.model)
                        },
                    )?
                }
            };
            let tst_digest = model_digest(&tst);
            let tst_sys = system(&tst)?;
            synthetic = self.stage(
                "tst-apply",
                &[("model", tst_digest), ("bt", digest(&synthetic))],
                &cfg.tst_decode,
                &[],
                || apply_tst(&tst_sys, &raw.corpus, &cfg.tst_decode),
            )?;
            if cfg.analysis {
                let ft = forward.as_ref().expect("forward translation ran for the analysis");
                let tests_src = data.test_original.source_side();
                let moved = synthetic.clone();
                let analysis = self.stage(
                    "style-analysis",
                    &[
                        ("bt", digest(&raw.corpus)),
                        ("tst", digest(&moved)),
                        ("forward", digest(&ft.corpus)),
                        ("s2t", s2t_digest.clone()),
                        ("t2s", t2s_digest.clone()),
                    ],
                    &(&cfg.classifier, cfg.tide_rounds, &cfg.decode),
                    &[("classifier", cfg.classifier.seed)],
                    || style_analysis(&data, &raw.corpus, &moved, &ft.corpus, &tests_src, (&s2t_sys, &t2s_sys), cfg),
                )?;
                self.manifest.analysis = Some(analysis);
            }
            art.tst = Some(tst);
        }
        match bt_kind {
            BtKind::Noised => {
                let noise = NoiseConfig { seed: seed(30), ..cfg.noise };
                synthetic = self.stage("noise", &[("bt", digest(&synthetic))], &noise, &[("noise", noise.seed)], || {
                    noise_corpus(&synthetic, &noise)
                })?;
            }
            BtKind::Tagged => {
                synthetic = self.stage("tag", &[("bt", digest(&synthetic))], &cfg.tag, &[], || tag_corpus(&synthetic, &cfg.tag))?;
            }
            _ => {}
        }
        if variant.forward {
            let ft = forward.as_ref().expect("forward translation ran");
            synthetic = synthetic.concat(&ft.corpus)?;
        }
        art.synthetic = Some(synthetic.clone());
        if stop < Stop::Mix {
            return Ok(self.finish(art));
        }

        let name = variant.to_string();
        let (model, training) = if variant.tst == TstKind::Direct {
            let ft = &forward.as_ref().expect("forward translation ran").corpus;
            let stage_data = |syn: &ParallelCorpus, k: u64| -> Result<ParallelCorpus> {
                if cfg.ctst_with_bitext {
                    mix(&data.bitext, syn, cfg.mix_ratio, seed(k))
                } else {
                    Ok(syn.clone())
                }
            };
            let d1 = stage_data(ft, 40)?;
            let d2 = stage_data(&synthetic, 41)?;
            let ctst_cfg = (model_cfg(&cfg.model, &src, &tgt, seed(10)), seeded(&cfg.ctst_stage1, 42), seeded(&cfg.ctst_stage2, 43));
            let m = self.stage(
                "ctst-train",
                &[("stage1", digest(&d1)), ("stage2", digest(&d2)), ("dev", dev_digest.clone()), ("subword", sw_digest.clone())],
                &ctst_cfg,
                &[("init", ctst_cfg.0.init_seed), ("stage1", ctst_cfg.1.seed), ("stage2", ctst_cfg.2.seed)],
                || {
                    let sched = CtstSchedule::new((ctst_cfg.1.clone(), d1.clone()), (ctst_cfg.2.clone(), d2.clone()))?;
                    Ok(train_ctst(Seq2SeqModel::new(ctst_cfg.0.clone())?, &sw, &sched, &data.dev)?.stage2.model)
                },
            )?;
            (m, d2)
        } else {
            let mix_seed = seed(50);
            let mixed = self.stage(
                "mix",
                &[("bitext", bitext_digest.clone()), ("synthetic", digest(&synthetic))],
                &cfg.mix_ratio,
                &[("mix", mix_seed)],
                || mix(&data.bitext, &synthetic, cfg.mix_ratio, mix_seed),
            )?;
            let re_cfg = (s2t_cfg.0.clone(), seeded(&cfg.retrain, 51));
            let m = self.stage(
                "retrain",
                &[("corpus", digest(&mixed)), ("dev", dev_digest.clone()), ("subword", sw_digest.clone())],
                &re_cfg,
                &[("init", re_cfg.0.init_seed), ("train", re_cfg.1.seed)],
                || fit(&re_cfg, &mixed, &data.dev),
            )?;
            (m, mixed)
        };
        self.manifest.final_provenance = census(&training);
        art.training_corpus = Some(training);
        if stop < Stop::Evaluate {
            art.system = Some(model);
            return Ok(self.finish(art));
        }
        let model_hash = model_digest(&model);
        let sys = system(&model)?;
        let report = self.stage("evaluate", &[("model", model_hash.clone()), ("tests", tests_id)], &cfg.decode, &[], || {
            evaluate(&name, &sys, &tests, &cfg.decode, &model_hash)
        })?;
        self.manifest.reports = vec![baseline.expect("evaluation ran"), report];
        art.system = Some(model);
        Ok(self.finish(art))
    }

    fn finish(&mut self, art: RunArtifacts) -> (RunManifest, RunArtifacts) {
        let _ = self.flush();
        (self.manifest.clone(), art)
    }
}

fn census(c: &ParallelCorpus) -> Vec<(String, String, usize)> {
    c.provenance_census().into_iter().map(|((a, b), n)| (a, b, n)).collect()
}

fn style_analysis(
    data: &WorldData,
    bt: &ParallelCorpus,
    moved: &ParallelCorpus,
    ft: &ParallelCorpus,
    tide_start: &MonoCorpus,
    models: (&NmtSystem, &NmtSystem),
    cfg: &ExperimentConfig,
) -> Result<StyleAnalysis> {
    let half = |sents: Vec<crate::corpus::Sentence>, lang: &str, p: Provenance| {
        let n = sents.len() / 2;
        (MonoCorpus::new(sents[..n].to_vec(), lang, p), sents[n..].to_vec())
    };
    let (src, tgt) = (&data.bitext.source_language, &data.bitext.target_language);
    let (nat_s, _) = half(data.source_mono.sentences.clone(), src, Provenance::Nature);
    let (mt_s, bt_rest) = half(bt.sources().cloned().collect(), src, Provenance::Mt);
    let (_, tst_rest) = half(moved.sources().cloned().collect(), src, Provenance::Mt);
    let (nat_t, _) = half(data.target_mono.sentences.clone(), tgt, Provenance::Nature);
    let (mt_t, _) = half(ft.targets().cloned().collect(), tgt, Provenance::Mt);
    let clf_s = train_classifier(&nat_s, &mt_s, &cfg.classifier)?;
    let clf_t = train_classifier(&nat_t, &mt_t, &cfg.classifier)?;
    let control = train_classifier(&nat_s, &MonoCorpus { provenance: Provenance::Mt, ..nat_s.clone() }, &cfg.classifier)?;
    let tide = style_tide(models.0, models.1, tide_start, cfg.tide_rounds, &clf_s, &clf_t, &cfg.decode)?;
    Ok(StyleAnalysis {
        accuracy_source: clf_s.heldout_accuracy,
        accuracy_target: clf_t.heldout_accuracy,
        accuracy_control: control.heldout_accuracy,
        nature_ratio_bt: nature_ratio_of(&clf_s, &bt_rest)?,
        nature_ratio_tst: nature_ratio_of(&clf_s, &tst_rest)?,
        tide,
    })
}

/// Runs one configuration end to end and writes its manifest and report
/// under `cfg.output_dir`.
pub fn run(cfg: &ExperimentConfig, runner: &mut Runner) -> Result<RunManifest> {
    let path = cfg.output_dir.join("manifest.json");
    if path.exists() {
        let previous = RunManifest::load(&path)?;
        if previous.config_hash == cfg.hash()? {
            runner.check_against(&previous);
        }
    }
    runner.write_manifest_to(Some(path));
    let (manifest, _) = runner.execute(cfg, Stop::Evaluate)?;
    runner.previous.clear();
    report(std::slice::from_ref(&manifest), &cfg.output_dir)?;
    Ok(manifest)
}

/// Runs every variant with shared artifacts; each variant writes to its own
/// subdirectory and a combined report goes to `cfg.output_dir`.
pub fn run_all(cfg: &ExperimentConfig, variants: &[Variant], runner: &mut Runner) -> Result<Vec<RunManifest>> {
    if variants.is_empty() {
        return Err(Error::Config("run-all needs at least one variant".into()));
    }
    let mut out = Vec::new();
    for v in variants {
        let c = ExperimentConfig { variant: *v, output_dir: cfg.output_dir.join(v.to_string()), ..cfg.clone() };
        out.push(run(&c, runner)?);
    }
    report(&out, &cfg.output_dir)?;
    Ok(out)
}

/// Comparison table over manifests: the first manifest's baseline row, then
/// each manifest's system, with deltas against the baseline.
pub fn comparison(manifests: &[RunManifest]) -> Result<ComparisonTable> {
    let first = manifests.first().ok_or_else(|| Error::Data("report needs at least one manifest".into()))?;
    let mut rows = vec![first.reports.first().ok_or_else(|| Error::Data("manifest has no evaluation".into()))?.clone()];
    for m in manifests {
        if let Some(r) = m.system() {
            if !rows.iter().any(|x| x.system == r.system) {
                rows.push(r.clone());
            }
        }
    }
    ComparisonTable::new(rows, Some(0))
}

/// Writes `report.md` and `report.csv` under `dir`.
pub fn report(manifests: &[RunManifest], dir: &Path) -> Result<ComparisonTable> {
    let table = comparison(manifests)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    table.write(&dir.join("report.md"), &dir.join("report.csv"))?;
    Ok(table)
}

/// Writes a model checkpoint with its vocabulary.
pub fn export_model(model: &Seq2SeqModel, sw: &SubwordModel, path: &Path) -> Result<()> {
    Checkpoint { model: model.clone(), vocab: Some(sw.vocab().clone()), optimizer: None, step: 0, dev_perplexity: 0.0 }
        .save(path)
}

/// Writes a synthetic corpus with a minimal metadata file.
pub fn export_corpus(corpus: &ParallelCorpus, stem: &Path, variant: &str) -> Result<()> {
    if let Some(dir) = stem.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Augmented { corpus: corpus.clone(), meta: AugmentMeta::new(variant) }.write(stem)
}
