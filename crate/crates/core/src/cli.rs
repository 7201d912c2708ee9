//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for usage, configuration and input validation
//! problems, 1 for failures while running.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::blackbox::{train_source, BlackBoxPredictor, SourceConfig};
use crate::data::{load_features, make_shifted_pair, write_features, LabeledSet, ShiftSpec};
use crate::error::{Error, Result};
use crate::trainer::{clean_precision, run_with, Ablation, AdaptConfig, MetricsRecord, RunSummary, Session};

pub const SOURCE_FILE: &str = "source.txt";
pub const TARGET_FILE: &str = "target.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const AGGREGATE_FILE: &str = "aggregate.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub predictor: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            predictor: "data/predictor.ckpt".into(),
            out_dir: "runs".into(),
        }
    }
}

/// Everything a run needs, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub seeds: Vec<u64>,
    pub paths: Paths,
    pub shift: ShiftSpec,
    pub source: SourceConfig,
    pub adapt: AdaptConfig,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            paths: Paths::default(),
            shift: ShiftSpec::default(),
            source: SourceConfig::default(),
            adapt: AdaptConfig::default(),
        }
    }
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Validation("seed list is empty".into()));
        }
        self.shift.validate()?;
        self.source.validate()?;
        self.adapt.validate()
    }

    /// TOML text with every field written out; unset step counts appear as comments.
    pub fn to_toml(&self) -> String {
        let mut text = toml::to_string(self).expect("config is always representable as TOML");
        let mut notes = String::new();
        if self.adapt.iter_distill.is_none() {
            notes.push_str("# iter_distill = <unset: ten passes over the target set>\n");
        }
        if self.adapt.iter_adapt.is_none() {
            notes.push_str("# iter_adapt = <unset: one pass over the target set>\n");
        }
        if !notes.is_empty() {
            text = text.replacen("[adapt]\n", &format!("[adapt]\n{notes}"), 1);
        }
        text
    }
}

#[derive(Debug, Parser)]
#[command(name = "cabb", version, about = "Black-box domain adaptation on synthetic shifted data")]
pub struct Cli {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Print the effective configuration with all defaults and exit.
    #[arg(long)]
    pub print_config: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate source and target feature files.
    GenData(GenDataArgs),
    /// Train the source model and write a sealed predictor checkpoint.
    TrainSource(TrainSourceArgs),
    /// Run adaptation for each seed and write metrics and summaries.
    Adapt(AdaptArgs),
    /// Distil, then dump the clean/noisy split that would train one branch.
    InspectSplit(InspectArgs),
    /// Turn a run's metrics into CSV tables.
    ///
    /// epochs.csv columns: epoch, branch, split_from_branch, target_accuracy,
    /// clean_set_size, clean_set_precision, gamma, loss_tc, loss_tn, loss_ent,
    /// loss_eqdiv, loss_tot, store_accuracy.
    ///
    /// gamma.csv columns: epoch, branch, step, gamma.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Existing output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainSourceArgs {
    /// Directory containing source.txt.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint path to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    /// Directory containing target.txt.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    /// Run directory; each seed writes to `seed-<n>/`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the seed list; repeatable.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    /// One of no-curriculum, no-noisy-loss, no-entropy; repeatable.
    #[arg(long = "ablate")]
    pub ablate: Vec<String>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Branch whose training split is shown (1 or 2).
    #[arg(long, default_value_t = 1)]
    pub branch: usize,
    /// CSV path for the per-sample dump.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory containing metrics.jsonl.
    #[arg(long)]
    pub run: PathBuf,
    /// Directory for the CSV files; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_) | Error::Config(_) | Error::Parse { .. } => 2,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfigFile> {
    match &cli.config {
        Some(p) => RunConfigFile::load(p),
        None => Ok(RunConfigFile::default()),
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    match &cli.command {
        None => Err(Error::Validation("no subcommand given (see --help)".into())),
        Some(Command::GenData(a)) => gen_data(&cfg, a),
        Some(Command::TrainSource(a)) => cmd_train_source(&cfg, a),
        Some(Command::Adapt(a)) => adapt(&cfg, a),
        Some(Command::InspectSplit(a)) => inspect_split(&cfg, a),
        Some(Command::Report(a)) => report(a),
    }
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Validation(format!("directory {} does not exist", path.display())))
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Validation(format!("file {} does not exist", path.display())))
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn first_seed(cfg: &RunConfigFile, arg: Option<u64>) -> u64 {
    arg.unwrap_or(cfg.seeds[0])
}

fn gen_data(cfg: &RunConfigFile, a: &GenDataArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
    require_dir(&out)?;
    let (s, t) = make_shifted_pair(&cfg.shift, first_seed(cfg, a.seed))?;
    write_features(&s, out.join(SOURCE_FILE))?;
    write_features(&t, out.join(TARGET_FILE))
}

fn load_set(dir: &Path, name: &str) -> Result<LabeledSet> {
    let path = dir.join(name);
    require_file(&path)?;
    load_features(&path)
}

fn cmd_train_source(cfg: &RunConfigFile, a: &TrainSourceArgs) -> Result<()> {
    let data = a.data.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.predictor.clone());
    let source = load_set(&data, SOURCE_FILE)?;
    let bb = train_source(&source, &cfg.source, first_seed(cfg, a.seed))?;
    bb.save(&out)?;
    println!("{}", serde_json::to_string(&bb.report()).expect("report serialises"));
    Ok(())
}

fn load_predictor(cfg: &RunConfigFile, arg: &Option<PathBuf>) -> Result<BlackBoxPredictor> {
    let path = arg.clone().unwrap_or_else(|| cfg.paths.predictor.clone());
    require_file(&path)?;
    BlackBoxPredictor::load(&path)
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds: Vec<u64>,
    pub source_only_acc: Stat,
    pub branch1_acc: Stat,
    pub branch2_acc: Stat,
    pub mean_acc: Stat,
}

impl Aggregate {
    pub fn from_summaries(s: &[RunSummary]) -> Self {
        let col = |f: fn(&RunSummary) -> f64| Stat::of(&s.iter().map(f).collect::<Vec<_>>());
        Self {
            seeds: s.iter().map(|r| r.seed).collect(),
            source_only_acc: col(|r| r.source_only_acc),
            branch1_acc: col(|r| r.branch1_acc),
            branch2_acc: col(|r| r.branch2_acc),
            mean_acc: col(|r| r.mean_acc),
        }
    }
}

fn adapt(cfg: &RunConfigFile, a: &AdaptArgs) -> Result<()> {
    let mut config = cfg.adapt.clone();
    for name in &a.ablate {
        let ab = Ablation::from_name(name).ok_or_else(|| {
            Error::Validation(format!(
                "unknown ablation `{name}` (expected no-curriculum, no-noisy-loss or no-entropy)"
            ))
        })?;
        config.apply(ab);
    }
    let data = a.data.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
    let target = load_set(&data, TARGET_FILE)?;
    let bb = load_predictor(cfg, &a.predictor)?;
    let seeds = if a.seeds.is_empty() { cfg.seeds.clone() } else { a.seeds.clone() };
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let mut summaries = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let dir = out.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let metrics_path = dir.join(METRICS_FILE);
        let file = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let mut write_err = None;
        let result = run_with(&config, &bb, &target, seed, |r| {
            let line = serde_json::to_string(r).expect("record serialises");
            if let Err(e) = writeln!(w, "{line}") {
                write_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = write_err {
            return Err(Error::io(&metrics_path, e));
        }
        w.flush().map_err(|e| Error::io(&metrics_path, e))?;
        let summary = serde_json::to_string_pretty(&result.summary).expect("summary serialises");
        write_file(&dir.join(SUMMARY_FILE), &(summary + "\n"))?;
        eprintln!(
            "seed {seed}: source-only {:.4}, adapted {:.4} / {:.4}",
            result.summary.source_only_acc, result.summary.branch1_acc, result.summary.branch2_acc
        );
        summaries.push(result.summary);
    }
    if summaries.len() > 1 {
        let agg = serde_json::to_string_pretty(&Aggregate::from_summaries(&summaries))
            .expect("aggregate serialises");
        write_file(&out.join(AGGREGATE_FILE), &(agg + "\n"))?;
    }
    Ok(())
}

fn inspect_split(cfg: &RunConfigFile, a: &InspectArgs) -> Result<()> {
    if !(a.branch == 1 || a.branch == 2) {
        return Err(Error::Validation(format!("branch must be 1 or 2, got {}", a.branch)));
    }
    let data = a.data.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
    let target = load_set(&data, TARGET_FILE)?;
    let bb = load_predictor(cfg, &a.predictor)?;
    let mut session = Session::new(cfg.adapt.clone(), &bb, &target, first_seed(cfg, a.seed))?;
    session.warm_up()?;
    let (scores, fit, split) = session.split_for(a.branch)?;
    let hard = session.store().hard_labels();
    let mask = split.clean_mask();
    let mut csv = String::from("index,label,pseudolabel,jsd,posterior_clean,clean\n");
    for i in 0..target.len() {
        let _ = writeln!(
            csv,
            "{i},{},{},{},{},{}",
            target.labels[i], hard[i], scores[i], split.confidence[i], mask[i] as u8
        );
    }
    write_file(&a.out, &csv)?;
    let info = serde_json::json!({
        "branch": a.branch,
        "split_from_branch": 3 - a.branch,
        "clean_set_size": split.clean_idx.len(),
        "clean_set_precision": clean_precision(session.store(), &target, &split.clean_idx),
        "fallback": split.fallback,
        "gmm": fit,
    });
    println!("{info}");
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    require_file(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn report(a: &ReportArgs) -> Result<()> {
    let records = read_metrics(&a.run.join(METRICS_FILE))?;
    if records.is_empty() {
        return Err(Error::Validation(format!("{} holds no records", a.run.display())));
    }
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    require_dir(&out)?;
    let mut epochs = String::from(
        "epoch,branch,split_from_branch,target_accuracy,clean_set_size,clean_set_precision,gamma,\
         loss_tc,loss_tn,loss_ent,loss_eqdiv,loss_tot,store_accuracy\n",
    );
    let mut gamma = String::from("epoch,branch,step,gamma\n");
    for r in &records {
        let l = &r.losses;
        let _ = writeln!(
            epochs,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.branch,
            r.split_from_branch,
            r.target_accuracy,
            r.clean_set_size,
            r.clean_set_precision,
            r.gamma,
            l.tc,
            l.tn,
            l.ent,
            l.eqdiv,
            l.tot,
            r.store_accuracy
        );
        for (step, g) in r.gamma_trace.iter().enumerate() {
            let _ = writeln!(gamma, "{},{},{step},{g}", r.epoch, r.branch);
        }
    }
    write_file(&out.join("epochs.csv"), &epochs)?;
    write_file(&out.join("gamma.csv"), &gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn printed_config_reparses() {
        let cfg = RunConfigFile::default();
        assert_eq!(RunConfigFile::parse(&cfg.to_toml()).unwrap(), cfg);
        let custom = RunConfigFile {
            seeds: vec![1, 2, 3],
            adapt: AdaptConfig {
                iter_distill: Some(7),
                use_curriculum: false,
                ..AdaptConfig::default()
            },
            ..RunConfigFile::default()
        };
        assert_eq!(RunConfigFile::parse(&custom.to_toml()).unwrap(), custom);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfigFile::parse("[adapt]\nepochz = 3\n").unwrap_err();
        assert!(err.to_string().contains("epochz"));
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfigFile::parse("seeds = [4]\n[adapt]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.adapt.epochs, 3);
        assert_eq!(cfg.adapt.batch_size, 64);
        assert_eq!(cfg.seeds, vec![4]);
    }

    #[test]
    fn stat_by_hand() {
        let s = Stat::of(&[0.5, 0.7, 0.9]);
        assert!((s.mean - 0.7).abs() < 1e-15);
        assert!((s.std - 0.2).abs() < 1e-15);
        assert_eq!(Stat::of(&[0.3]).std, 0.0);
    }
}
