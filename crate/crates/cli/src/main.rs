use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use tstbt::error::{Error, ErrorClass, Result};
use tstbt::pipeline::{
    export_corpus, export_data, export_model, report, run, run_all, ExperimentConfig, RunArtifacts, RunManifest,
    Runner, Stop, TstKind, Variant, BtKind, CACHE_ENV,
};

#[derive(Parser)]
#[command(name = "tstbt", version, about = "Back-translation and style transfer experiments on a synthetic language pair")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration as JSON.
    Config {
        /// Print the tiny smoke-test configuration instead.
        #[arg(long)]
        smoke: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Generate (or import) the corpora and write them to `<output-dir>/data`.
    Generate(Common),
    /// Train both translation directions.
    Train(Common),
    /// Back-translate the target monolingual corpus.
    Augment(Common),
    /// Train the style transfer model and rewrite the back-translated sources.
    Tst(Common),
    /// Train the two-stage conservative model.
    Ctst(Common),
    /// Build the final training corpus.
    Mix(Common),
    /// Train the final system and evaluate it against the bitext baseline.
    Evaluate(Common),
    /// Combine run manifests into one comparison table.
    Report {
        /// Manifests to compare; the first one supplies the baseline row.
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
    },
    /// Run several variants with shared artifacts and write a combined report.
    RunAll {
        /// Comma-separated variants, e.g. `bitext,beam,beam+cascade`.
        #[arg(long, value_delimiter = ',', default_value = "bitext,beam,noised,tagged,beam+cascade,beam+direct")]
        variants: Vec<Variant>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// JSON configuration file; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Variant such as `beam`, `noised+cascade` or `beam+direct`.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override a configuration field, e.g. `--set train.max_steps=200`.
    #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
    overrides: Vec<String>,
    /// Artifact cache directory; defaults to `<output-dir>/cache`.
    #[arg(long, env = CACHE_ENV)]
    cache: Option<PathBuf>,
}

impl Common {
    fn config(&self, base: ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text)?
            }
            None => base,
        };
        if !self.overrides.is_empty() {
            let mut value = serde_json::to_value(&cfg)?;
            for o in &self.overrides {
                apply_override(&mut value, o)?;
            }
            cfg = serde_json::from_value(value)?;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn runner(&self, cfg: &ExperimentConfig) -> Runner {
        Runner::new(Some(self.cache.clone().unwrap_or_else(|| cfg.output_dir.join("cache"))))
    }
}

fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| Error::Config(format!("override {spec:?} lacks '='")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| Error::Config(format!("override {path:?}: {key:?} is not inside an object")))?;
        if !obj.contains_key(*key) && i + 1 < keys.len() {
            return Err(Error::Config(format!("override {path:?}: unknown key {key:?}")));
        }
        if i + 1 == keys.len() {
            obj.insert((*key).to_owned(), value);
            return Ok(());
        }
        node = obj.get_mut(*key).expect("checked above");
    }
    Err(Error::Config("empty override path".into()))
}

fn with_tst(cfg: &mut ExperimentConfig, tst: TstKind) {
    cfg.variant = Variant { bt: Some(cfg.variant.bt.unwrap_or(BtKind::Beam)), tst, forward: false };
}

fn staged(common: &Common, stop: Stop, adjust: impl FnOnce(&mut ExperimentConfig)) -> Result<(ExperimentConfig, RunManifest, RunArtifacts)> {
    let mut cfg = common.config(ExperimentConfig::default())?;
    adjust(&mut cfg);
    cfg.validate()?;
    let mut runner = common.runner(&cfg);
    runner.write_manifest_to(Some(cfg.output_dir.join("manifest.json")));
    let (m, art) = runner.execute(&cfg, stop)?;
    Ok((cfg, m, art))
}

fn export_models(art: &RunArtifacts, dir: &Path) -> Result<()> {
    let sw = art.subword.as_ref().expect("subword model trained");
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    sw.save(&dir.join("merges.txt"), &dir.join("vocab.txt"))?;
    for (name, m) in [("s2t", &art.s2t), ("t2s", &art.t2s), ("tst", &art.tst), ("system", &art.system)] {
        if let Some(m) = m {
            export_model(m, sw, &dir.join(format!("{name}.ckpt")))?;
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { smoke, common } => {
            let base = if smoke { ExperimentConfig::smoke("runs/smoke") } else { ExperimentConfig::default() };
            println!("{}", serde_json::to_string_pretty(&common.config(base)?)?);
        }
        Command::Generate(c) => {
            let (cfg, _, art) = staged(&c, Stop::Generate, |_| {})?;
            let dir = cfg.output_dir.join("data");
            export_data(art.data.as_ref().expect("data generated"), &dir)?;
            println!("wrote {}", dir.display());
        }
        Command::Train(c) => {
            let (cfg, _, art) = staged(&c, Stop::Train, |_| {})?;
            export_models(&art, &cfg.output_dir.join("models"))?;
            println!("wrote {}", cfg.output_dir.join("models").display());
        }
        Command::Augment(c) => {
            let (cfg, _, art) = staged(&c, Stop::Augment, |cfg| {
                if cfg.variant.bt.is_none() {
                    cfg.variant.bt = Some(BtKind::Beam);
                }
            })?;
            let stem = cfg.output_dir.join("synthetic").join(cfg.variant.to_string());
            export_corpus(art.synthetic.as_ref().expect("synthetic data built"), &stem, &cfg.variant.to_string())?;
            println!("wrote {}", stem.display());
        }
        Command::Tst(c) => {
            let (cfg, _, art) = staged(&c, Stop::Tst, |cfg| with_tst(cfg, TstKind::Cascade))?;
            export_models(&art, &cfg.output_dir.join("models"))?;
            let stem = cfg.output_dir.join("synthetic").join(cfg.variant.to_string());
            export_corpus(art.synthetic.as_ref().expect("synthetic data built"), &stem, &cfg.variant.to_string())?;
            println!("wrote {}", stem.display());
        }
        Command::Ctst(c) => {
            let (cfg, _, art) = staged(&c, Stop::Mix, |cfg| with_tst(cfg, TstKind::Direct))?;
            export_models(&art, &cfg.output_dir.join("models"))?;
            println!("wrote {}", cfg.output_dir.join("models/system.ckpt").display());
        }
        Command::Mix(c) => {
            let (cfg, _, art) = staged(&c, Stop::Mix, |_| {})?;
            let stem = cfg.output_dir.join("train");
            export_corpus(art.training_corpus.as_ref().expect("training corpus built"), &stem, &cfg.variant.to_string())?;
            println!("wrote {}", stem.display());
        }
        Command::Evaluate(c) => {
            let cfg = c.config(ExperimentConfig::default())?;
            let m = run(&cfg, &mut c.runner(&cfg))?;
            print!("{}", tstbt::pipeline::comparison(&[m])?.to_markdown());
        }
        Command::Report { manifests, output_dir } => {
            let loaded = manifests.iter().map(|p| RunManifest::load(p)).collect::<Result<Vec<_>>>()?;
            print!("{}", report(&loaded, &output_dir)?.to_markdown());
        }
        Command::RunAll { variants, common } => {
            let cfg = common.config(ExperimentConfig::default())?;
            let ms = run_all(&cfg, &variants, &mut common.runner(&cfg))?;
            print!("{}", tstbt::pipeline::comparison(&ms)?.to_markdown());
            for m in &ms {
                if let Some(a) = &m.analysis {
                    println!(
                        "{}: classifier accuracy {:.3}/{:.3} (control {:.3}), nature ratio {:.3} -> {:.3}",
                        m.variant, a.accuracy_source, a.accuracy_target, a.accuracy_control, a.nature_ratio_bt, a.nature_ratio_tst
                    );
                    print!("{}", a.tide.to_csv());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}
