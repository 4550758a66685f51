//! Command-line front end.
//!
//! Settings resolve as built-in defaults, then the `--config` JSON file, then
//! `--set key=value` overrides, then the named flags. Every command that
//! writes output echoes the resolved settings to `<out>/config.json`.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{
    load_manifest_as, make_synthetic_pair, write_manifest, write_manifest_with, Axis, CorpusDataset, EmotionMap, Manifest, Role,
    ShiftSpec, Utterance,
};
use crate::dsp::{compute_mfcc, read_wav, MfccConfig};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, export_features, run_sweep, scenario_name, worker_threads, write_sweep_csv, Scenario, Selection,
};
use crate::trainer::{fit_from, load_checkpoint, save_checkpoint, Ablation, FitHooks, TrainConfig, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioPaths {
    pub source: PathBuf,
    pub target: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub variants: Vec<Ablation>,
    pub seeds: Vec<u64>,
    pub scenarios: Vec<ScenarioPaths>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self { variants: Ablation::ALL.to_vec(), seeds: vec![0], scenarios: Vec::new() }
    }
}

impl Default for ScenarioPaths {
    fn default() -> Self {
        Self { source: PathBuf::new(), target: PathBuf::new() }
    }
}

/// Everything a command can be configured with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub train: TrainConfig,
    pub synthetic: ShiftSpec,
    pub mfcc: MfccConfig,
    /// Emotion axis labels are mapped onto; `None` keeps each manifest's own.
    pub axis: Option<Axis>,
    pub selection: Selection,
    pub sweep: SweepSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            synthetic: ShiftSpec::default(),
            mfcc: MfccConfig::default(),
            axis: None,
            selection: Selection::Final,
            sweep: SweepSettings::default(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "crosscorpus", version, about = "Cross-corpus speech emotion recognition with decoupled emotion and corpus features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// arousal or valence.
    #[arg(long)]
    axis: Option<Axis>,
    /// full or V1..V5.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Source manifest.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Target manifest.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// EMA momentum of the pseudo-label threshold.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau_p: Option<f64>,
    #[arg(long)]
    tau_s: Option<f64>,
    #[arg(long)]
    alpha1: Option<f64>,
    /// Dotted-path override such as `train.loss.alpha_1=0.2` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute MFCC feature files from audio manifests given as --source/--target.
    Extract {
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic source/target corpus pair.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train on --source with the unlabeled view of --target.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a labeled --target manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run every scenario x variant x seed and write a CSV table.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Dump emotion and corpus features of --source and/or --target.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Runs the program on `argv` (including the program name) and returns the
/// exit code: 0 on success, 1 on usage errors, 2 on runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> CliResult<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| Failure::Usage(format!("`{key}` does not name a setting")))?;
        if !obj.contains_key(*part) {
            return Err(Failure::Usage(format!("unknown setting `{key}`")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).unwrap();
    }
    Ok(())
}

fn resolve(common: &Common) -> CliResult<Settings> {
    let mut settings = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<Settings>(&text).map_err(|e| Error::json(path, e))?
        }
        None => Settings::default(),
    };
    if !common.overrides.is_empty() {
        let mut v = serde_json::to_value(&settings).expect("settings serialize");
        for kv in &common.overrides {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("override `{kv}` is not of the form key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, key.trim(), value)?;
        }
        settings = serde_json::from_value(v).map_err(|e| Failure::Usage(format!("override rejected: {e}")))?;
    }
    let t = &mut settings.train;
    if let Some(v) = common.seed {
        t.seed = v;
    }
    if let Some(v) = common.ablation {
        t.ablation = v;
    }
    if let Some(v) = common.max_epochs {
        t.max_epochs = v;
    }
    if let Some(v) = common.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = common.lr {
        t.learning_rate = v;
    }
    if let Some(v) = common.lambda {
        t.lambda = v;
    }
    if let Some(v) = common.tau_p {
        t.loss.tau_p = v;
    }
    if let Some(v) = common.tau_s {
        t.loss.tau_s = v;
    }
    if let Some(v) = common.alpha1 {
        t.loss.alpha_1 = v;
    }
    if common.axis.is_some() {
        settings.axis = common.axis;
    }
    settings.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(settings)
}

fn out_dir(common: &Common, settings: &Settings) -> CliResult<PathBuf> {
    let dir = common.out.clone().ok_or_else(|| Failure::Usage("--out <DIR> is required".into()))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("config.json");
    let text = serde_json::to_string_pretty(settings).expect("settings serialize");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Failure::Usage(format!("{flag} <MANIFEST> is required")))
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Extract { common } => cmd_extract(&common),
        Command::Synth { common } => cmd_synth(&common),
        Command::Train { common, resume } => cmd_train(&common, resume.as_deref()),
        Command::Eval { common, checkpoint } => cmd_eval(&common, &checkpoint),
        Command::Sweep { common } => cmd_sweep(&common),
        Command::Export { common, checkpoint } => cmd_export(&common, &checkpoint),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AudioItem {
    id: String,
    /// WAV path relative to the manifest.
    audio: String,
    label: Option<String>,
}

/// Manifest of a corpus given as audio files.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct AudioManifest {
    name: String,
    role: Role,
    axis: Axis,
    items: Vec<AudioItem>,
    #[serde(default)]
    aliases: std::collections::BTreeMap<String, String>,
}

fn extract_one(path: &Path, out: &Path, settings: &Settings) -> Result<PathBuf> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: AudioManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let axis = settings.axis.unwrap_or(manifest.axis);
    let mut map = EmotionMap::new(axis);
    for (alias, canonical) in &manifest.aliases {
        map.register_alias(alias, canonical)?;
    }
    let mut utterances = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        let signal = read_wav(&base.join(&item.audio))?;
        let mfcc = compute_mfcc(&signal, &settings.mfcc)?;
        let class = match &item.label {
            Some(l) => Some(map.class_of(l)?),
            None if manifest.role == Role::Source => return Err(Error::MissingLabel(item.id.clone())),
            None => None,
        };
        utterances.push(Utterance {
            sample_id: item.id.clone(),
            corpus_id: manifest.name.clone(),
            features: mfcc.mapv(|v| v as f32),
            label: item.label.clone(),
            class,
        });
    }
    let ds = CorpusDataset::new(manifest.name.clone(), manifest.role, axis, utterances)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus");
    write_manifest_with(out, stem, &ds, true, &manifest.aliases)
}

fn cmd_extract(common: &Common) -> CliResult<()> {
    let settings = resolve(common)?;
    if common.source.is_none() && common.target.is_none() {
        return Err(Failure::Usage("extract needs --source and/or --target audio manifests".into()));
    }
    let out = out_dir(common, &settings)?;
    for p in [&common.source, &common.target].into_iter().flatten() {
        let written = extract_one(p, &out, &settings)?;
        println!("{}", written.display());
    }
    Ok(())
}

fn cmd_synth(common: &Common) -> CliResult<()> {
    let settings = resolve(common)?;
    if settings.axis.is_some_and(|a| a != Axis::Arousal) {
        return Err(Failure::Usage("synthetic corpora are labeled on the arousal axis only".into()));
    }
    let out = out_dir(common, &settings)?;
    let (src, tgt) = make_synthetic_pair(settings.train.seed, &settings.synthetic)?;
    let a = write_manifest(&out, "src", &src, true)?;
    let b = write_manifest(&out, "tgt", &tgt, true)?;
    println!("{}\n{}", a.display(), b.display());
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn cmd_train(common: &Common, resume: Option<&Path>) -> CliResult<()> {
    let settings = resolve(common)?;
    let src_path = need(&common.source, "--source")?;
    let tgt_path = need(&common.target, "--target")?;
    let out = out_dir(common, &settings)?;
    let cfg = &settings.train;
    let source = load_manifest_as(src_path, settings.axis)?;
    let target = load_manifest_as(tgt_path, settings.axis)?.unlabeled();
    let state = match resume {
        Some(p) => {
            let (state, saved) = load_checkpoint(p)?;
            if saved.model != cfg.model {
                return Err(Failure::Usage(format!("{}: model configuration differs from the current settings", p.display())));
            }
            state
        }
        None => TrainState::new(cfg)?,
    };
    let log_path = out.join("train.jsonl");
    let timing_path = out.join("timings.jsonl");
    let mut log = create(&log_path)?;
    let mut timings = create(&timing_path)?;
    let hooks = FitHooks {
        log: Some(&mut log),
        timings: Some(&mut timings),
        checkpoint_dir: Some(out.join("checkpoints")),
        on_epoch_end: None,
    };
    let (state, records) = fit_from(state, &source, &target, cfg, hooks)?;
    drop(log);
    drop(timings);
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&state, cfg, &ckpt)?;
    println!("{} steps, {} epochs; wrote {} and {}", records.len(), state.epoch, log_path.display(), ckpt.display());
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Path) -> CliResult<()> {
    let settings = resolve(common)?;
    let tgt_path = need(&common.target, "--target")?;
    let (state, cfg) = load_checkpoint(checkpoint)?;
    let target = load_manifest_as(tgt_path, settings.axis)?;
    let source_name = match &common.source {
        Some(p) => Manifest::read(p)?.name,
        None => checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string(),
    };
    let report = evaluate(&state.model, &target, scenario_name(&source_name, &target.name), cfg.batch_size.max(64))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    if common.out.is_some() {
        let out = out_dir(common, &settings)?;
        let path = out.join("metrics.json");
        fs::write(&path, &json).map_err(|e| Error::io(&path, e))?;
    }
    println!("{json}");
    Ok(())
}

fn cmd_sweep(common: &Common) -> CliResult<()> {
    let settings = resolve(common)?;
    let mut paths = settings.sweep.scenarios.clone();
    if let (Some(s), Some(t)) = (&common.source, &common.target) {
        paths = vec![ScenarioPaths { source: s.clone(), target: t.clone() }];
    }
    if paths.is_empty() {
        return Err(Failure::Usage("sweep needs --source/--target or sweep.scenarios in the config".into()));
    }
    let out = out_dir(common, &settings)?;
    let scenarios = paths
        .iter()
        .map(|p| {
            Ok(Scenario {
                source: load_manifest_as(&p.source, settings.axis)?,
                target: load_manifest_as(&p.target, settings.axis)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let variants = match common.ablation {
        Some(a) => vec![a],
        None => settings.sweep.variants.clone(),
    };
    let seeds = match common.seed {
        Some(s) => vec![s],
        None => settings.sweep.seeds.clone(),
    };
    let rows = run_sweep(&scenarios, &variants, &seeds, &settings.train, settings.selection, worker_threads())?;
    let path = out.join("sweep.csv");
    write_sweep_csv(&rows, &path)?;
    println!("{} runs; wrote {}", rows.len(), path.display());
    Ok(())
}

fn cmd_export(common: &Common, checkpoint: &Path) -> CliResult<()> {
    let settings = resolve(common)?;
    if common.source.is_none() && common.target.is_none() {
        return Err(Failure::Usage("export needs --source and/or --target".into()));
    }
    let (state, _) = load_checkpoint(checkpoint)?;
    let out = out_dir(common, &settings)?;
    for p in [&common.source, &common.target].into_iter().flatten() {
        let data = load_manifest_as(p, settings.axis)?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("features");
        let path = out.join(format!("{stem}.emox"));
        export_features(&state, &data, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}
