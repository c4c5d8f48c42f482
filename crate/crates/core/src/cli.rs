//! Command-line front end. Settings resolve as built-in defaults, then the
//! JSON file given by `--config`, then individual flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{format_annotations, format_events, format_poi, synth_generate, SplitMode, SynthConfig};
use crate::model::{FusionMode, Misapp, ModelConfig};
use crate::pipeline::{
    evaluate_all, explain, gradcheck, load_split, preprocess, split_dir, stage_seed, write_prepared, ExplainConfig,
    PreprocessConfig, Stage,
};
use crate::train_eval::{fit, MrrMode, TrainConfig};

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stage derives its own seed from it.
    pub seed: u64,
    pub events: Option<PathBuf>,
    pub poi: Option<PathBuf>,
    pub out: PathBuf,
    /// Defaults to `<out>/<split>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub split: SplitMode,
    pub mrr_mode: MrrMode,
    /// Instance set scored by `eval`.
    pub eval_on: String,
    pub synth: Option<SynthConfig>,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub explain: ExplainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            events: None,
            poi: None,
            out: PathBuf::from("out"),
            checkpoint: None,
            split: SplitMode::Standard,
            mrr_mode: MrrMode::Truncated,
            eval_on: "test".into(),
            synth: None,
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, source: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config {
            field: source.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| split_dir(&self.out, self.split).join("model.ckpt"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "misapp", version, about = "Next-app prediction with multi-hop session graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic event log, annotations and POI table.
    Synth(Common),
    /// Clean, sessionize and split an event log.
    Preprocess(Common),
    /// Train on a prepared split and write the best checkpoint.
    Train(Common),
    /// Score a checkpoint and the frequency/recency baselines.
    Eval(Common),
    /// Hop-weight alignment and perturbation analysis.
    Explain(Common),
    /// Finite-difference check of every parameter group.
    Gradcheck(Common),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split: Option<SplitMode>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    fusion: Option<FusionMode>,
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long)]
    poi: Option<PathBuf>,
    #[arg(long)]
    mrr_mode: Option<MrrMode>,
    #[arg(long)]
    no_multihop: bool,
    #[arg(long)]
    no_temporal: bool,
    #[arg(long)]
    no_spatial: bool,
    #[arg(long)]
    no_decoder: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_json(&read(path, "config")?, path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(s) = self.split {
            c.split = s;
        }
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        if let Some(p) = &self.checkpoint {
            c.checkpoint = Some(p.clone());
        }
        if let Some(f) = self.fusion {
            c.model.fusion = f;
        }
        if let Some(p) = &self.events {
            c.events = Some(p.clone());
        }
        if let Some(p) = &self.poi {
            c.poi = Some(p.clone());
        }
        if let Some(m) = self.mrr_mode {
            c.mrr_mode = m;
        }
        c.model.use_multihop &= !self.no_multihop;
        c.model.use_temporal &= !self.no_temporal;
        c.model.use_spatial &= !self.no_spatial;
        c.model.use_decoder &= !self.no_decoder;
        Ok(c)
    }
}

fn read(path: &Path, field: &str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::config(field, format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn run_synth(c: &RunConfig) -> Result<()> {
    let gen = c.synth.as_ref().ok_or_else(|| Error::config("synth", "generator settings are required"))?;
    let out = synth_generate(gen, stage_seed(c.seed, Stage::Synth))?;
    fs::create_dir_all(&c.out)?;
    write(&c.out.join("events.csv"), &format_events(&out.events))?;
    write(&c.out.join("annotations.csv"), &format_annotations(&out.annotations))?;
    if !out.poi.is_empty() {
        write(&c.out.join("poi.csv"), &format_poi(&out.poi))?;
    }
    println!("wrote {} events to {}", out.events.len(), c.out.display());
    Ok(())
}

fn run_preprocess(c: &RunConfig) -> Result<()> {
    let events_path = c.events.as_ref().ok_or_else(|| Error::config("events", "path is required"))?;
    let events = read(events_path, "events")?;
    let poi = c.poi.as_ref().map(|p| read(p, "poi")).transpose()?;
    let prepared = preprocess(&events, poi.as_deref(), &c.preprocess, stage_seed(c.seed, Stage::Split))?;
    write_prepared(&prepared, &c.out)?;
    for s in &prepared.report.splits {
        println!(
            "{}: {} apps, train {} / val {} / test {}",
            s.mode, s.apps, s.train, s.val, s.test
        );
    }
    Ok(())
}

fn run_train(c: &RunConfig) -> Result<()> {
    let data = load_split(&c.out, c.split)?;
    let model_config = data.model_config(&c.model);
    model_config.validate()?;
    let path = c.checkpoint_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let train = TrainConfig {
        seed: stage_seed(c.seed, Stage::Train),
        checkpoint: Some(path.clone()),
        ..c.train.clone()
    };
    let started = Instant::now();
    let result = fit(&data.split.train, &data.split.val, &model_config, &train)?;
    let history = serde_json::to_string_pretty(&result.history)? + "\n";
    write(&split_dir(&c.out, c.split).join("history.json"), &history)?;
    println!(
        "best epoch {} of {} in {:.1}s, checkpoint {}",
        result.best_epoch,
        result.history.len(),
        started.elapsed().as_secs_f64(),
        path.display()
    );
    Ok(())
}

fn load_model(c: &RunConfig) -> Result<Misapp> {
    let path = c.checkpoint_path();
    if !path.is_file() {
        return Err(Error::config("checkpoint", format!("{} does not exist", path.display())));
    }
    Misapp::load(&path)
}

fn run_eval(c: &RunConfig) -> Result<()> {
    let data = load_split(&c.out, c.split)?;
    let model = load_model(c)?;
    let report = evaluate_all(&model, &data, &c.eval_on, c.mrr_mode)?;
    write(&split_dir(&c.out, c.split).join("metrics.json"), &report.to_json()?)?;
    print!("{}", report.to_table());
    Ok(())
}

fn run_explain(c: &RunConfig) -> Result<()> {
    let data = load_split(&c.out, c.split)?;
    let full = load_model(c)?;
    let one_hop_config = ModelConfig {
        use_multihop: false,
        ..full.config.clone()
    };
    let train = TrainConfig {
        seed: stage_seed(c.seed, Stage::Explain),
        checkpoint: None,
        ..c.train.clone()
    };
    info!("training the single-hop comparison model");
    let one_hop = fit(&data.split.train, &data.split.val, &one_hop_config, &train)?.model;
    let report = explain(&full, &one_hop, &data, &c.explain)?;
    let dir = split_dir(&c.out, c.split);
    write(&dir.join("explain.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write(&dir.join("alignment.csv"), &report.table)?;
    println!(
        "{} samples: mean tau {:.4}, top-1 consistency {:.4}, mean delta {}",
        report.samples.len(),
        report.mean_tau,
        report.consistency_rate,
        report.mean_delta.map_or("-".into(), |d| format!("{d:.4}"))
    );
    Ok(())
}

fn run_gradcheck(c: &RunConfig) -> Result<bool> {
    let config = ModelConfig {
        num_apps: c.model.num_apps.max(2),
        ..c.model.clone()
    };
    config.validate()?;
    let started = Instant::now();
    let errors = gradcheck(&config, c.seed, GRADCHECK_STEP)?;
    let mut ok = true;
    for (name, e) in &errors {
        let pass = *e < GRADCHECK_TOLERANCE;
        ok &= pass;
        println!("{:<32} {e:.3e} {}", name, if pass { "ok" } else { "FAIL" });
    }
    println!("{} groups in {:.1}s", errors.len(), started.elapsed().as_secs_f64());
    Ok(ok)
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Synth(a) => run_synth(&a.resolve()?).map(|_| true),
        Command::Preprocess(a) => run_preprocess(&a.resolve()?).map(|_| true),
        Command::Train(a) => run_train(&a.resolve()?).map(|_| true),
        Command::Eval(a) => run_eval(&a.resolve()?).map(|_| true),
        Command::Explain(a) => run_explain(&a.resolve()?).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(&a.resolve()?),
    }
}

/// Runs one invocation and returns the process exit status: 0 on success,
/// 1 on a configuration or runtime failure, 2 on a usage error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
