//! Command-line front end: `run`, `schedule`, `ablate`, and `eval`.
//!
//! A run directory holds `config.norm.json`, `metrics.jsonl`, `schedule.csv`,
//! `eval_final.json`, `checkpoints/`, and the `test_set/` it was scored on.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{load_checkpoint, save_checkpoint, Detector};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::schedule::{trace, write_trace_csv, LambdaSchedule};
use crate::synthgen::{
    dump_dataset, generate_dataset, generate_split, load_dataset, Domain, DomainGapConfig, SceneGeometry,
    SceneSample, UnlabeledScene,
};
use crate::trainer::{EvalRow, MetricRow, Regime, RunOutcome, Trainer, TrainerConfig, TrainingData, ZigzagParams};

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub trainer: TrainerConfig,
    pub gap: DomainGapConfig,
    pub geometry: SceneGeometry,
    pub n_source: usize,
    pub n_target: usize,
    /// Held-out labeled target scenes used only for evaluation.
    pub n_test: usize,
    /// Default output directory when `--out` is not given.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            trainer: TrainerConfig::default(),
            gap: DomainGapConfig::default(),
            geometry: SceneGeometry::default(),
            n_source: 600,
            n_target: 600,
            n_test: 200,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Pretty JSON with every default spelled out.
    pub fn to_normalized_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_source == 0 || self.n_target == 0 || self.n_test == 0 {
            return Err(Error::config("n_source, n_target and n_test must be >= 1"));
        }
        if (self.geometry.height, self.geometry.width, 1)
            != (
                self.trainer.arch.in_height,
                self.trainer.arch.in_width,
                self.trainer.arch.in_channels,
            )
        {
            return Err(Error::config("scene geometry does not match the detector input size"));
        }
        self.gap.validate()?;
        self.geometry.validate()?;
        self.trainer.validate()
    }
}

/// The data a run trains and evaluates on, all derived from the seed.
pub struct ExperimentData {
    pub source: Vec<SceneSample>,
    pub target: Vec<UnlabeledScene>,
    pub test: Vec<SceneSample>,
}

pub fn build_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let seed = cfg.trainer.seed;
    let (source, target) = generate_dataset(seed, cfg.n_source, cfg.n_target, &cfg.gap, &cfg.geometry)?;
    let first_test = (cfg.n_source + cfg.n_target) as u64;
    let test = generate_split(seed, Domain::Target, first_test, cfg.n_test, &cfg.gap, &cfg.geometry)?;
    Ok(ExperimentData {
        source,
        target: target.iter().map(SceneSample::strip_labels).collect(),
        test,
    })
}

pub struct Experiment {
    pub trainer: Trainer,
    pub data: ExperimentData,
    pub outcome: RunOutcome,
}

impl Experiment {
    pub fn final_report(&self) -> Result<&EvalReport> {
        self.outcome
            .final_report
            .as_ref()
            .ok_or_else(|| Error::contract("run finished without an evaluation"))
    }
}

/// Generates data and trains; no file output.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let trainer = Trainer::new(cfg.trainer.clone())?;
    let data = build_data(cfg)?;
    let training = TrainingData {
        source: &data.source,
        target: &data.target,
    };
    let outcome = trainer.run(&training, Some(&data.test))?;
    Ok(Experiment { trainer, data, outcome })
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine<'a> {
    Train(&'a MetricRow),
    Eval(&'a EvalRow),
}

/// JSON lines: one `train` row per iteration, with each `eval` row placed
/// right after the iteration that completed it.
pub fn metrics_jsonl(train: &[MetricRow], evals: &[EvalRow]) -> Result<String> {
    let mut out = String::new();
    let mut pending = evals.iter().peekable();
    for row in train {
        out.push_str(&serde_json::to_string(&LogLine::Train(row))?);
        out.push('\n');
        while let Some(e) = pending.next_if(|e| e.iter <= row.iter + 1) {
            out.push_str(&serde_json::to_string(&LogLine::Eval(e))?);
            out.push('\n');
        }
    }
    for e in pending {
        out.push_str(&serde_json::to_string(&LogLine::Eval(e))?);
        out.push('\n');
    }
    Ok(out)
}

fn schedule_csv(cfg: &TrainerConfig) -> Result<Vec<u8>> {
    let rows = if cfg.effective_regime() == Regime::D3t {
        trace(&cfg.zigzag_config(), &cfg.lambda)?
    } else {
        Vec::new()
    };
    let mut buf = Vec::new();
    write_trace_csv(&rows, &mut buf)?;
    Ok(buf)
}

pub fn write_run(dir: &Path, cfg: &ExperimentConfig, exp: &Experiment) -> Result<()> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::write(dir.join("config.norm.json"), cfg.to_normalized_json()?)?;
    let state = &exp.outcome.state;
    fs::write(dir.join("metrics.jsonl"), metrics_jsonl(&state.metric_log, &state.eval_log)?)?;
    fs::write(dir.join("schedule.csv"), schedule_csv(&cfg.trainer)?)?;
    fs::write(dir.join("eval_final.json"), exp.final_report()?.to_json()? + "\n")?;
    let arch = exp.trainer.detector().arch();
    for (name, params) in exp.trainer.models(state) {
        save_checkpoint(&dir.join("checkpoints").join(format!("{name}.ckpt")), arch, params)?;
    }
    dump_dataset(&dir.join("test_set"), &exp.data.test)
}

/// An ablation variant applied on top of a base configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    Regime(Regime),
    /// Equal alternation of `k` thermal and `k` RGB iterations.
    Fixed(u64),
    FixedLambda(f64),
    DynamicLambda,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("unknown variant '{s}'"));
        Ok(match s {
            "d3t" => Variant::Regime(Regime::D3t),
            "mt_baseline" => Variant::Regime(Regime::MtBaseline),
            "source_only" => Variant::Regime(Regime::SourceOnly),
            "lambda:dynamic" => Variant::DynamicLambda,
            _ => match s.split_once(':') {
                Some(("fixed", k)) => Variant::Fixed(k.parse().map_err(|_| bad())?),
                Some(("lambda", v)) => Variant::FixedLambda(v.parse().map_err(|_| bad())?),
                _ => return Err(bad()),
            },
        })
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        let t = &mut cfg.trainer;
        match *self {
            Variant::Regime(r) => t.regime = r,
            Variant::Fixed(k) => {
                t.regime = Regime::D3t;
                t.zigzag = ZigzagParams {
                    z0_thr: k,
                    z0_rgb: k,
                    beta: 0,
                    step_length: 2 * k,
                };
            }
            Variant::FixedLambda(value) => {
                t.regime = Regime::D3t;
                t.lambda = LambdaSchedule::Fixed { value };
            }
            Variant::DynamicLambda => {
                t.regime = Regime::D3t;
                if matches!(t.lambda, LambdaSchedule::Fixed { .. }) {
                    t.lambda = TrainerConfig::default().lambda;
                }
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub maps: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Runs every variant on seeds `base.seed .. base.seed + n_seeds`, in parallel.
pub fn run_ablation(base: &ExperimentConfig, variants: &[String], n_seeds: u64) -> Result<Vec<AblationRow>> {
    if variants.is_empty() || n_seeds == 0 {
        return Err(Error::config("ablation needs at least one variant and one seed"));
    }
    let parsed = variants.iter().map(|v| Variant::parse(v)).collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, ExperimentConfig)> = parsed
        .iter()
        .enumerate()
        .flat_map(|(vi, v)| {
            (0..n_seeds).map(move |s| {
                let mut cfg = v.apply(base);
                cfg.trainer.seed = base.trainer.seed + s;
                (vi, cfg)
            })
        })
        .collect();
    let maps = jobs
        .par_iter()
        .map(|(_, cfg)| Ok(run_experiment(cfg)?.final_report()?.map))
        .collect::<Result<Vec<f64>>>()?;
    Ok(variants
        .iter()
        .enumerate()
        .map(|(vi, name)| {
            let maps: Vec<f64> = jobs
                .iter()
                .zip(&maps)
                .filter(|((j, _), _)| *j == vi)
                .map(|(_, &m)| m)
                .collect();
            let (mean, sd) = mean_sd(&maps);
            AblationRow {
                variant: name.clone(),
                maps,
                mean,
                sd,
            }
        })
        .collect())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,n_seeds,mean_map,sd_map,maps\n");
    for r in rows {
        let maps: Vec<String> = r.maps.iter().map(|m| m.to_string()).collect();
        let _ = writeln!(out, "{},{},{},{},{}", r.variant, r.maps.len(), r.mean, r.sd, maps.join(";"));
    }
    out
}

/// Human-readable table, mAP in points.
pub fn ablation_text(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max("variant".len());
    let mut out = format!("{:<width$}  {:>15}  {:>5}\n", "variant", "mAP (mean±sd)", "seeds");
    for r in rows {
        let cell = format!("{:.2}±{:.2}", 100.0 * r.mean, 100.0 * r.sd);
        let _ = writeln!(out, "{:<width$}  {:>15}  {:>5}", r.variant, cell, r.maps.len());
    }
    out
}

#[derive(Debug, Parser)]
#[command(name = "d3t", version, about = "Dual-teacher zigzag domain adaptation on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate data, train, evaluate, and write a run directory.
    Run(RunArgs),
    /// Write the zigzag schedule trace as CSV without training.
    Schedule(ScheduleArgs),
    /// Run several variants over several seeds and tabulate target mAP.
    Ablate(AblateArgs),
    /// Evaluate a checkpoint on a dumped dataset and print the report JSON.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (JSON); defaults to the desk profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated: d3t, mt_baseline, source_only, fixed:K,
    /// lambda:VALUE, lambda:dynamic.
    #[arg(long, value_delimiter = ',', default_value = "d3t,mt_baseline,source_only")]
    pub variants: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// First seed; overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory; supplies defaults for the other flags.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Defaults to the run's deployed model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory written by a run's `test_set/`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Supplies decode settings; defaults to the run's `config.norm.json`.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

pub fn cmd_run(args: &RunArgs) -> Result<PathBuf> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.trainer.seed = seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::config("no output directory: pass --out or set output_dir"))?;
    let exp = run_experiment(&cfg)?;
    write_run(&out, &cfg, &exp)?;
    if !args.quiet {
        let (name, _) = exp.trainer.deployed(&exp.outcome.state);
        eprintln!(
            "{} seed {}: {} mAP {:.4} -> {}",
            cfg.trainer.effective_regime().as_str(),
            cfg.trainer.seed,
            name,
            exp.final_report()?.map,
            out.display()
        );
    }
    Ok(out)
}

pub fn cmd_schedule(args: &ScheduleArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let csv = schedule_csv(&cfg.trainer)?;
    match &args.out {
        Some(path) => fs::write(path, csv)?,
        None => std::io::stdout().lock().write_all(&csv)?,
    }
    Ok(())
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<Vec<AblationRow>> {
    let mut base = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        base.trainer.seed = seed;
    }
    let rows = run_ablation(&base, &args.variants, args.seeds)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("config.norm.json"), base.to_normalized_json()?)?;
    fs::write(args.out.join("ablation.csv"), ablation_csv(&rows))?;
    let text = ablation_text(&rows);
    fs::write(args.out.join("ablation.txt"), &text)?;
    if !args.quiet {
        eprint!("{text}");
    }
    Ok(rows)
}

/// Evaluates and returns the report JSON (one line, newline-terminated).
pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let run = args.run.as_deref();
    let cfg = match (&args.config, run) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(r)) => ExperimentConfig::load(&r.join("config.norm.json"))?,
        (None, None) => ExperimentConfig::default(),
    };
    let checkpoint = match (&args.checkpoint, run) {
        (Some(p), _) => p.clone(),
        (None, Some(r)) => ["teacher_thr", "teacher", "student"]
            .iter()
            .map(|n| r.join("checkpoints").join(format!("{n}.ckpt")))
            .find(|p| p.exists())
            .ok_or_else(|| Error::config("run directory has no checkpoints"))?,
        (None, None) => return Err(Error::config("pass --checkpoint or --run")),
    };
    let dataset = match (&args.dataset, run) {
        (Some(p), _) => p.clone(),
        (None, Some(r)) => r.join("test_set"),
        (None, None) => return Err(Error::config("pass --dataset or --run")),
    };
    let (arch, params) = load_checkpoint(&checkpoint)?;
    let detector = Detector::new(arch)?;
    let test = load_dataset(&dataset)?;
    let t = &cfg.trainer;
    let report = evaluate(&detector, &params, &test, &t.eval_decode, t.iou_threshold)?;
    Ok(report.to_json()? + "\n")
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run(a) => cmd_run(a).map(|_| ()),
        Command::Schedule(a) => cmd_schedule(a),
        Command::Ablate(a) => cmd_ablate(a).map(|_| ()),
        Command::Eval(a) => {
            let json = cmd_eval(a)?;
            std::io::stdout().lock().write_all(json.as_bytes())?;
            Ok(())
        }
    }
}
