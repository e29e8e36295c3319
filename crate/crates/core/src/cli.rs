//! Batch entry points. Every command resolves a [`RunConfig`] (defaults, then
//! the `--config` file, then `--set` overrides, then `--seed`), validates it,
//! snapshots it to `<run-dir>/config.json` and writes its artifacts below the
//! run directory:
//!
//! ```text
//! <run-dir>/config.json      resolved config; feeding it back reproduces the run
//! <run-dir>/checkpoints/     model checkpoints
//! <run-dir>/metrics.jsonl    per-epoch metrics (deterministic)
//! <run-dir>/timings.jsonl    per-epoch wall-clock
//! <run-dir>/reports/         JSON reports
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::audit::{analyze_spec, check_constraints, Budget, DEFAULT_DTYPE_WIDTH};
use crate::augment::{load_ir_dir, synthetic_ir_bank, AugmentConfig, AugmentError, DeviceImpulseResponse};
use crate::distill::{DistillConfig, DistillError};
use crate::frontend::{log_mel, Preset};
use crate::models::{Checkpoint, Network, NetworkSpec, TeacherPreset, DEFAULT_STUDENT_WIDTH};
use crate::nn::AdamW;
use crate::train::{
    distill_student, evaluate, evaluate_ensemble, model_soup, pick_feature_teacher, read_wav_mono, run_experiment,
    student_init_seed, synth_dataset, train_teacher, ClipSource, Dataset, DatasetIndex, ExperimentConfig, MetricsLog,
    Split, TrainConfig, TrainContext, CLIP_SAMPLES, DESK_LR,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendSection {
    /// Preset used by `featurize`.
    pub preset: Preset,
}

impl Default for FrontendSection {
    fn default() -> Self {
        Self { preset: Preset::Cpmobile }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Teacher built by `train-teacher`.
    pub teacher: TeacherPreset,
    pub student_width: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            teacher: TeacherPreset::Cpresnet1,
            student_width: DEFAULT_STUDENT_WIDTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub batch_size: usize,
    pub keep_top_k: usize,
    pub optimizer: AdamW,
    /// Clips per class when no dataset path is given and for `synth`.
    pub n_per_class: usize,
    /// Teacher list for `experiment`.
    pub teachers: Vec<TeacherPreset>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            teacher_epochs: e.teacher_epochs,
            student_epochs: e.student_epochs,
            batch_size: e.batch_size,
            keep_top_k: e.keep_top_k,
            optimizer: AdamW {
                lr: DESK_LR,
                ..AdamW::default()
            },
            n_per_class: e.n_per_class,
            teachers: e.teachers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditSection {
    pub budget: Budget,
    pub dtype_width: u64,
    pub clip_samples: usize,
    /// Audit this teacher instead of the student.
    pub teacher: Option<TeacherPreset>,
}

impl Default for AuditSection {
    fn default() -> Self {
        Self {
            budget: Budget::default(),
            dtype_width: DEFAULT_DTYPE_WIDTH,
            clip_samples: CLIP_SAMPLES,
            teacher: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Directory holding `index.json` (a dataset index) and its audio. When
    /// unset, a synthetic dataset is generated in memory.
    pub dataset: Option<PathBuf>,
    /// Directory of impulse-response WAVs; the built-in bank when unset.
    pub ir_dir: Option<PathBuf>,
    /// Waveform for `featurize`.
    pub input: Option<PathBuf>,
    /// Checkpoints for `soup` and `evaluate`.
    pub checkpoints: Vec<PathBuf>,
    /// Teacher checkpoints for `distill`.
    pub teachers: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub frontend: FrontendSection,
    /// Replaces every model's preset augmentation when set.
    pub augment: Option<AugmentConfig>,
    pub model: ModelSection,
    pub distill: DistillConfig,
    pub train: TrainSection,
    pub audit: AuditSection,
    pub paths: PathsSection,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config at `{path}`: {reason}")]
    Config { path: String, reason: String },
    #[error("{0}")]
    Run(String),
    #[error("budget check failed")]
    Budget,
}

impl CliError {
    fn config(path: &str, reason: impl ToString) -> Self {
        CliError::Config {
            path: path.to_string(),
            reason: reason.to_string(),
        }
    }
}

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.distill.validate().map_err(|e| match e {
            DistillError::Config { field, reason } => CliError::config(&format!("distill.{field}"), reason),
            e => CliError::config("distill", e),
        })?;
        if let Some(a) = &self.augment {
            a.validate().map_err(|e| match e {
                AugmentError::Config { field, reason } => CliError::config(&format!("augment.{field}"), reason),
                e => CliError::config("augment", e),
            })?;
        }
        let t = &self.train;
        for (field, v) in [
            ("train.teacher_epochs", t.teacher_epochs),
            ("train.student_epochs", t.student_epochs),
            ("train.batch_size", t.batch_size),
            ("train.keep_top_k", t.keep_top_k),
            ("train.n_per_class", t.n_per_class),
        ] {
            if v == 0 {
                return Err(CliError::config(field, "must be >= 1"));
            }
        }
        if t.teachers.is_empty() {
            return Err(CliError::config("train.teachers", "needs at least one teacher"));
        }
        let probe = self.train_config(t.teacher_epochs, t.keep_top_k);
        probe
            .validate(Preset::Cpmobile)
            .map_err(|e| CliError::config("train", e))?;
        NetworkSpec::student_micro(self.model.student_width).map_err(|e| CliError::config("model.student_width", e))?;
        if self.audit.dtype_width == 0 {
            return Err(CliError::config("audit.dtype_width", "must be >= 1"));
        }
        if self.audit.clip_samples == 0 {
            return Err(CliError::config("audit.clip_samples", "must be >= 1"));
        }
        Ok(())
    }

    fn train_config(&self, epochs: usize, keep_top_k: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
            optimizer: self.train.optimizer.clone(),
            keep_top_k,
            augment: self.augment,
        }
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            n_per_class: self.train.n_per_class,
            teacher_epochs: self.train.teacher_epochs,
            student_epochs: self.train.student_epochs,
            batch_size: self.train.batch_size,
            keep_top_k: self.train.keep_top_k,
            optimizer: self.train.optimizer.clone(),
            student_width: self.model.student_width,
            teachers: self.train.teachers.clone(),
            distill: self.distill.clone(),
        }
    }
}

/// Recursively overlays `top` onto `base`; objects merge, anything else replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `key.path=value` override. The value is read as JSON when it
/// parses, otherwise as a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::config(key, "empty key segment"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    for seg in key.split('.') {
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        cur = cur
            .as_object_mut()
            .expect("object")
            .entry(seg.to_string())
            .or_insert(Value::Null);
    }
    *cur = value;
    Ok(())
}

/// Defaults, then the file, then overrides, then the seed flag; validated.
pub fn resolve_config(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut v = serde_json::to_value(RunConfig::default()).map_err(run_err)?;
    if let Some(p) = file {
        let text = fs::read_to_string(p).map_err(|e| CliError::config("--config", format!("{}: {e}", p.display())))?;
        let file_v: Value =
            serde_json::from_str(&text).map_err(|e| CliError::config("--config", format!("{}: {e}", p.display())))?;
        if !file_v.is_object() {
            return Err(CliError::config("--config", "top level must be a JSON object"));
        }
        merge(&mut v, file_v);
    }
    for o in overrides {
        apply_override(&mut v, o)?;
    }
    if let Some(s) = seed {
        v["seed"] = Value::from(s);
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(v).map_err(|e| CliError::Config {
        path: e.path().to_string(),
        reason: e.inner().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Parser)]
#[command(name = "dualkd", version, about = "Dual-level knowledge distillation for acoustic scene classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set distill.T=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory (default `runs/<command>`).
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Log-Mel features of `paths.input`.
    Featurize,
    /// Write a synthetic dataset (WAVs plus index.json).
    Synth,
    /// Train `model.teacher` and soup its best checkpoints.
    TrainTeacher,
    /// Average `paths.checkpoints`.
    Soup,
    /// Distil a student from `paths.teachers`.
    Distill,
    /// Score `paths.checkpoints` (and their ensemble) on the test split.
    Evaluate,
    /// Parameter memory and MACs against the budgets.
    Audit,
    /// Full teacher, soup, distillation and baseline pipeline.
    Experiment,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Featurize => "featurize",
            Command::Synth => "synth",
            Command::TrainTeacher => "train-teacher",
            Command::Soup => "soup",
            Command::Distill => "distill",
            Command::Evaluate => "evaluate",
            Command::Audit => "audit",
            Command::Experiment => "experiment",
        }
    }
}

struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn create(root: PathBuf, cfg: &RunConfig) -> Result<Self, CliError> {
        for d in [root.clone(), root.join("checkpoints"), root.join("reports")] {
            fs::create_dir_all(&d).map_err(|e| run_err(format!("{}: {e}", d.display())))?;
        }
        let dir = Self { root };
        dir.write("config.json", &serde_json::to_string_pretty(cfg).map_err(run_err)?)?;
        Ok(dir)
    }

    fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    fn write(&self, rel: &str, text: &str) -> Result<PathBuf, CliError> {
        let p = self.root.join(rel);
        fs::write(&p, text).map_err(|e| run_err(format!("{}: {e}", p.display())))?;
        Ok(p)
    }

    fn report<T: Serialize>(&self, name: &str, v: &T) -> Result<PathBuf, CliError> {
        self.write(&format!("reports/{name}.json"), &serde_json::to_string_pretty(v).map_err(run_err)?)
    }

    fn log(&self) -> Result<MetricsLog, CliError> {
        MetricsLog::to_files(&self.root.join("metrics.jsonl"), &self.root.join("timings.jsonl")).map_err(run_err)
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match &cfg.paths.dataset {
        Some(dir) => {
            let p = dir.join("index.json");
            let text = fs::read_to_string(&p).map_err(|e| run_err(format!("{}: {e}", p.display())))?;
            let index: DatasetIndex = serde_path_to_error::deserialize(&mut serde_json::Deserializer::from_str(&text))
                .map_err(|e| run_err(format!("{}: at `{}`: {}", p.display(), e.path(), e.inner())))?;
            Dataset::load(index, dir).map_err(run_err)
        }
        None => synth_dataset(cfg.train.n_per_class, cfg.seed).map_err(run_err),
    }
}

fn load_irs(cfg: &RunConfig) -> Result<Vec<DeviceImpulseResponse>, CliError> {
    match &cfg.paths.ir_dir {
        Some(d) => load_ir_dir(d).map_err(run_err),
        None => Ok(synthetic_ir_bank()),
    }
}

fn load_checkpoints(paths: &[PathBuf], field: &str) -> Result<Vec<Checkpoint>, CliError> {
    if paths.is_empty() {
        return Err(CliError::config(field, "no checkpoints given"));
    }
    paths
        .iter()
        .map(|p| Checkpoint::load(p).map_err(|e| run_err(format!("{}: {e}", p.display()))))
        .collect()
}

fn write_wav(path: &Path, samples: &[f32]) -> Result<(), CliError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: crate::frontend::SAMPLE_RATE_HZ,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(run_err)?;
    for &s in samples {
        w.write_sample(s).map_err(run_err)?;
    }
    w.finalize().map_err(run_err)
}

#[derive(Serialize)]
struct AuditOutput<'a> {
    report: &'a crate::audit::ComplexityReport,
    budget: Budget,
    check: crate::audit::BudgetCheck,
}

/// Executes one command; messages for the user go to stdout.
pub fn execute(cmd: Command, cfg: &RunConfig, run_dir: &Path) -> Result<(), CliError> {
    let dir = RunDir::create(run_dir.to_path_buf(), cfg)?;
    match cmd {
        Command::Featurize => {
            let input = cfg
                .paths
                .input
                .as_ref()
                .ok_or_else(|| CliError::config("paths.input", "featurize needs a waveform"))?;
            let wave = read_wav_mono(input).map_err(run_err)?;
            let spec = log_mel(&wave, &cfg.frontend.preset.config()).map_err(run_err)?;
            let p = dir.report("features", &spec)?;
            println!("{} mels x {} frames -> {}", spec.n_mels, spec.n_frames, p.display());
        }
        Command::Synth => {
            let data = synth_dataset(cfg.train.n_per_class, cfg.seed).map_err(run_err)?;
            let audio = dir.root.join("data");
            fs::create_dir_all(audio.join("audio")).map_err(run_err)?;
            let mut index = data.index.clone();
            for (it, wave) in index.items.iter_mut().zip(&data.waves) {
                let ClipSource::Synthetic { class, index, .. } = it.source else {
                    continue;
                };
                let rel = PathBuf::from(format!("audio/c{class}_{index:03}_{}.wav", it.device));
                write_wav(&audio.join(&rel), wave)?;
                it.source = ClipSource::File { path: rel };
            }
            let text = serde_json::to_string_pretty(&index).map_err(run_err)?;
            fs::write(audio.join("index.json"), text).map_err(run_err)?;
            println!("{} clips -> {}", index.len(), audio.display());
        }
        Command::TrainTeacher => {
            let data = load_dataset(cfg)?;
            let irs = load_irs(cfg)?;
            let mut log = dir.log()?;
            let preset = cfg.model.teacher;
            let ckpts = dir.checkpoints();
            let mut ctx = TrainContext {
                irs: &irs,
                log: &mut log,
                checkpoint_dir: Some(&ckpts),
                run: format!("teacher_{preset}"),
            };
            let tc = cfg.train_config(cfg.train.teacher_epochs, cfg.train.keep_top_k);
            let run = train_teacher(NetworkSpec::teacher_micro(preset), &data, &tc, &mut ctx).map_err(run_err)?;
            let soup = model_soup(&run.top).map_err(run_err)?;
            let soup_path = ckpts.join(format!("teacher_{preset}_soup.ckpt"));
            soup.save(&soup_path).map_err(run_err)?;
            let net = Network::from_checkpoint(&soup).map_err(run_err)?;
            let test = evaluate(&net, &data, Split::Test).map_err(run_err)?;
            dir.report("train_teacher", &serde_json::json!({ "teacher": preset, "soup": soup_path, "test": test }))?;
            println!("teacher {preset}: soup test accuracy {:.4} -> {}", test.accuracy, soup_path.display());
        }
        Command::Soup => {
            let cks = load_checkpoints(&cfg.paths.checkpoints, "paths.checkpoints")?;
            let soup = model_soup(&cks).map_err(run_err)?;
            let p = dir.checkpoints().join("soup.ckpt");
            soup.save(&p).map_err(run_err)?;
            dir.report("soup", &soup.meta)?;
            println!("soup of {} -> {}", cks.len(), p.display());
        }
        Command::Distill => {
            let data = load_dataset(cfg)?;
            let irs = load_irs(cfg)?;
            let cks = load_checkpoints(&cfg.paths.teachers, "paths.teachers")?;
            let teachers: Vec<Network> = cks
                .iter()
                .map(Network::from_checkpoint)
                .collect::<Result<_, _>>()
                .map_err(run_err)?;
            let mut cands = Vec::new();
            for t in &teachers {
                let preset = match t.spec().arch {
                    crate::models::Arch::Teacher { preset } => preset,
                    _ => return Err(CliError::config("paths.teachers", format!("`{}` is not a teacher", t.spec().name))),
                };
                let acc = evaluate(t, &data, Split::Valid).map_err(run_err)?.accuracy;
                cands.push((preset, acc));
            }
            let feature = pick_feature_teacher(cands);
            let student = Network::student_micro(cfg.model.student_width, student_init_seed(cfg.seed)).map_err(run_err)?;
            let mut log = dir.log()?;
            let mut ctx = TrainContext {
                irs: &irs,
                log: &mut log,
                checkpoint_dir: None,
                run: "student_kd".into(),
            };
            let sc = cfg.train_config(cfg.train.student_epochs, 1);
            let run = distill_student(student, &teachers, feature, &data, &sc, &cfg.distill, &mut ctx).map_err(run_err)?;
            let valid = evaluate(&run.net, &data, Split::Valid).map_or(0.0, |r| r.accuracy);
            let p = dir.checkpoints().join("student.ckpt");
            run.net
                .to_checkpoint(run.net.checkpoint_meta(cfg.train.student_epochs, valid, cfg.seed))
                .save(&p)
                .map_err(run_err)?;
            let test = evaluate(&run.net, &data, Split::Test).map_err(run_err)?;
            dir.report(
                "distill",
                &serde_json::json!({ "feature_teacher": feature.map(|i| &cfg.paths.teachers[i]), "test": test }),
            )?;
            println!("student test accuracy {:.4} -> {}", test.accuracy, p.display());
        }
        Command::Evaluate => {
            let data = load_dataset(cfg)?;
            let cks = load_checkpoints(&cfg.paths.checkpoints, "paths.checkpoints")?;
            let nets: Vec<Network> = cks
                .iter()
                .map(Network::from_checkpoint)
                .collect::<Result<_, _>>()
                .map_err(run_err)?;
            let mut models = Vec::new();
            for (p, n) in cfg.paths.checkpoints.iter().zip(&nets) {
                let r = evaluate(n, &data, Split::Test).map_err(run_err)?;
                println!("{}: {:.4}", p.display(), r.accuracy);
                models.push(serde_json::json!({ "checkpoint": p, "test": r }));
            }
            let ensemble = if nets.len() > 1 {
                let r = evaluate_ensemble(&nets, &data, Split::Test).map_err(run_err)?;
                println!("ensemble: {:.4}", r.accuracy);
                Some(r)
            } else {
                None
            };
            dir.report("evaluate", &serde_json::json!({ "models": models, "ensemble": ensemble }))?;
        }
        Command::Audit => {
            let spec = match cfg.audit.teacher {
                Some(p) => NetworkSpec::teacher_micro(p),
                None => NetworkSpec::student_micro(cfg.model.student_width).map_err(run_err)?,
            };
            let report = analyze_spec(&spec, &spec.input_shape(cfg.audit.clip_samples), cfg.audit.dtype_width)
                .map_err(run_err)?;
            let check = check_constraints(&report, cfg.audit.budget, cfg.audit.dtype_width);
            let out = AuditOutput {
                report: &report,
                budget: cfg.audit.budget,
                check,
            };
            let json = serde_json::to_string_pretty(&out).map_err(run_err)?;
            dir.write("reports/audit.json", &json)?;
            dir.write("reports/audit.txt", &report.to_string())?;
            print!("{report}");
            println!(
                "memory {} / {} bytes (margin {}, {:.1}%), MACs {} / {} (margin {}, {:.1}%): {}",
                check.param_memory_bytes,
                cfg.audit.budget.memory_bytes,
                check.memory_margin_bytes,
                100.0 * check.memory_margin_frac,
                check.macs,
                cfg.audit.budget.macs,
                check.macs_margin,
                100.0 * check.macs_margin_frac,
                if check.pass { "PASS" } else { "FAIL" }
            );
            if !check.pass {
                return Err(CliError::Budget);
            }
        }
        Command::Experiment => {
            let irs = load_irs(cfg)?;
            let mut log = dir.log()?;
            let r = run_experiment(&cfg.experiment_config(), cfg.seed, &irs, Some(&dir.root), &mut log).map_err(run_err)?;
            dir.report("experiment", &r)?;
            println!(
                "ensemble {:.4}, best teacher {:.4}, distilled {:.4}, baseline {:.4}",
                r.ensemble_test.accuracy,
                r.best_teacher_accuracy(),
                r.distilled_test.accuracy,
                r.baseline_test.accuracy
            );
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs. Exit codes: 0 success,
/// 1 runtime failure, 2 usage or config error, 3 budget failure.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = resolve_config(cli.config.as_deref(), &cli.overrides, cli.seed).and_then(|cfg| {
        let dir = cli
            .run_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
        execute(cli.command, &cfg, &dir)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Config { .. } => 2,
                CliError::Run(_) => 1,
                CliError::Budget => 3,
            })
        }
    }
}
