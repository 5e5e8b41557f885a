//! The `mal` command line: generate, train, eval, ablate, plot.
//!
//! Every command that produces artifacts also writes a `manifest.toml` into
//! its output directory. `generate`, `train` and `eval` accept that manifest
//! back through `--manifest` and reproduce the run from it alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{evaluate, parse_report, EvalReport, InferenceConfig};
use crate::mal::{DepressionVariant, IterationMetrics, Method, SelectionStrategy, TrainConfig, Trainer};
use crate::model::Checkpoint;
use crate::scenes::{generate_dataset, load_dataset, save_dataset, Dataset, DatasetConfig, Split};

pub const DATASET_FILE: &str = "dataset.txt";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.log";
pub const REPORT_FILE: &str = "report.txt";
pub const REPORT_TSV_FILE: &str = "report.tsv";

#[derive(Debug, Parser)]
#[command(name = "mal", version, about = "Multiple anchor learning on synthetic detection scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Generate(GenerateArgs),
    /// Train a scorer with MAL or the fixed-assignment baseline.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run a grid of MAL variants and tabulate their metrics.
    Ablate(AblateArgs),
    /// Turn metrics logs and reports into column tables.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Dataset config (TOML, DatasetConfig keys).
    #[arg(long, conflicts_with = "manifest")]
    pub config: Option<PathBuf>,
    /// Re-run from a manifest written by an earlier generate.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Bag size k.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// all | all-top1
    #[arg(long)]
    pub selection: Option<SelectionStrategy>,
    /// none | constant | step | symmetric_step
    #[arg(long)]
    pub depression: Option<DepressionVariant>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.warmup {
            cfg.warmup = Some(v);
        }
        if let Some(v) = self.k {
            cfg.bag_size = v;
        }
        if let Some(v) = self.beta {
            cfg.loss.beta = v;
        }
        if let Some(v) = self.selection {
            cfg.selection = v;
        }
        if let Some(v) = self.depression {
            cfg.depression.variant = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (containing dataset.txt) or dataset file.
    #[arg(long, required_unless_present = "manifest")]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "mal")]
    pub method: Method,
    /// Training config (TOML, TrainConfig keys); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Re-run from a manifest written by an earlier train.
    #[arg(long, conflicts_with_all = ["dataset", "config"])]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "manifest")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    pub split: Split,
    #[arg(long, default_value_t = 0.5)]
    pub nms: f64,
    #[arg(long, default_value_t = 0.05)]
    pub score: f64,
    #[arg(long, default_value_t = 100)]
    pub max_detections: usize,
    #[arg(long, conflicts_with_all = ["checkpoint", "dataset"])]
    pub manifest: Option<PathBuf>,
    /// Output directory; without it the report goes to stdout only.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Grid config (TOML, AblationGrid keys).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Metrics log as NAME=PATH; repeatable.
    #[arg(long = "log")]
    pub logs: Vec<String>,
    /// Eval report as NAME=PATH; repeatable.
    #[arg(long = "report")]
    pub reports: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Strict TOML parse: unknown keys are errors that name the key.
pub fn parse_toml<T: DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(format!("{what}: {}", e.to_string().trim_end())))
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(format!("serialize: {e}")))
}

fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_toml(&read_text(path)?, &path.display().to_string())
}

/// Hash of the canonical re-serialization, so formatting and defaulted keys do not matter.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(to_toml(value)?.as_bytes()))
}

/// A dataset directory holding `dataset.txt`, or the file itself.
pub fn dataset_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(DATASET_FILE)
    } else {
        path.to_path_buf()
    }
}

fn load_dataset_with_hash(path: &Path) -> Result<(Dataset, String)> {
    let file = dataset_file(path);
    let text = read_text(&file)?;
    let d = crate::scenes::parse_dataset(&text)?;
    Ok((d, sha256_hex(text.as_bytes())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateManifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub dataset_sha256: String,
    pub config: DatasetConfig,
}

pub fn cmd_generate(cfg: &DatasetConfig, out: &Path) -> Result<GenerateManifest> {
    let dataset = generate_dataset(cfg)?;
    ensure_dir(out)?;
    let file = out.join(DATASET_FILE);
    save_dataset(&dataset, &file)?;
    let text = read_text(&file)?;
    let manifest = GenerateManifest {
        command: "generate".into(),
        config_sha256: config_hash(cfg)?,
        seed: cfg.seed,
        dataset_sha256: sha256_hex(text.as_bytes()),
        config: cfg.clone(),
    };
    write_text(&out.join(MANIFEST_FILE), &to_toml(&manifest)?)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainManifest {
    pub command: String,
    pub method: Method,
    pub dataset: PathBuf,
    pub dataset_sha256: String,
    pub config_sha256: String,
    pub seed: u64,
    pub config: TrainConfig,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<IterationMetrics>,
    pub manifest: TrainManifest,
}

/// Trains on the train split and writes checkpoint, metrics log and manifest.
pub fn cmd_train(dataset_path: &Path, method: Method, cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    let (dataset, dataset_sha256) = load_dataset_with_hash(dataset_path)?;
    let manifest = TrainManifest {
        command: "train".into(),
        method,
        dataset: dataset_path.to_path_buf(),
        dataset_sha256,
        config_sha256: config_hash(cfg)?,
        seed: cfg.seed,
        config: cfg.clone(),
    };
    let mut trainer = Trainer::new(&dataset, dataset.split(Split::Train), method, cfg.clone())?;
    ensure_dir(out)?;
    let log_path = out.join(METRICS_FILE);
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let metrics = trainer.run(&mut log)?;
    std::io::Write::flush(&mut log).map_err(|e| Error::io(&log_path, e))?;
    let checkpoint = trainer.checkpoint();
    checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    write_text(&out.join(MANIFEST_FILE), &to_toml(&manifest)?)?;
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        manifest,
    })
}

pub fn cmd_train_manifest(manifest_path: &Path, out: &Path) -> Result<TrainOutcome> {
    let m: TrainManifest = load_toml(manifest_path)?;
    if m.command != "train" {
        return Err(Error::Config(format!("manifest is for '{}', not train", m.command)));
    }
    let (_, sha) = load_dataset_with_hash(&m.dataset)?;
    if sha != m.dataset_sha256 {
        return Err(Error::Config(format!(
            "dataset {} no longer matches the manifest hash",
            m.dataset.display()
        )));
    }
    cmd_train(&m.dataset, m.method, &m.config, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalManifest {
    pub command: String,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub dataset: PathBuf,
    pub dataset_sha256: String,
    pub split: Split,
    pub nms_threshold: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
}

pub fn cmd_eval(
    checkpoint_path: &Path,
    dataset_path: &Path,
    split: Split,
    infer: &InferenceConfig,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let bytes = fs::read(checkpoint_path).map_err(|e| Error::io(checkpoint_path, e))?;
    let checkpoint = Checkpoint::from_bytes(&bytes)?;
    let (dataset, dataset_sha256) = load_dataset_with_hash(dataset_path)?;
    let report = evaluate(&checkpoint, &dataset, split, infer)?;
    if let Some(out) = out {
        ensure_dir(out)?;
        write_text(&out.join(REPORT_FILE), &report.to_text())?;
        write_text(&out.join(REPORT_TSV_FILE), &report.to_tsv())?;
        let manifest = EvalManifest {
            command: "eval".into(),
            checkpoint: checkpoint_path.to_path_buf(),
            checkpoint_sha256: sha256_hex(&bytes),
            dataset: dataset_path.to_path_buf(),
            dataset_sha256,
            split,
            nms_threshold: infer.nms_threshold,
            score_threshold: infer.score_threshold,
            max_detections: infer.max_detections,
        };
        write_text(&out.join(MANIFEST_FILE), &to_toml(&manifest)?)?;
    }
    Ok(report)
}

/// Cross-product of MAL variants, optionally with baseline rows, on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    pub dataset: PathBuf,
    pub split: Split,
    pub k: Vec<usize>,
    pub selection: Vec<SelectionStrategy>,
    pub depression: Vec<DepressionVariant>,
    pub seeds: Vec<u64>,
    pub baseline: bool,
    pub train: TrainConfig,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            dataset: PathBuf::from("."),
            split: Split::Val,
            k: vec![40, 50, 60],
            selection: vec![SelectionStrategy::All, SelectionStrategy::AllToTop1],
            depression: vec![
                DepressionVariant::None,
                DepressionVariant::Constant,
                DepressionVariant::Step,
                DepressionVariant::SymmetricStep,
            ],
            seeds: vec![0],
            baseline: false,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRun {
    pub method: Method,
    pub k: usize,
    pub selection: SelectionStrategy,
    pub depression: DepressionVariant,
    pub seed: u64,
}

impl AblationRun {
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.bag_size = self.k;
        c.selection = self.selection;
        c.depression.variant = self.depression;
        c.seed = self.seed;
        c
    }
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.k.is_empty() || self.selection.is_empty() || self.depression.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("every ablation axis needs at least one value".into()));
        }
        self.train.validate()
    }

    /// Runs in table order: baseline rows first (one per seed), then k, selection, depression, seed.
    pub fn runs(&self) -> Vec<AblationRun> {
        let mut runs = Vec::new();
        if self.baseline {
            for &seed in &self.seeds {
                runs.push(AblationRun {
                    method: Method::Baseline,
                    k: self.train.bag_size,
                    selection: self.train.selection,
                    depression: DepressionVariant::None,
                    seed,
                });
            }
        }
        for &k in &self.k {
            for &selection in &self.selection {
                for &depression in &self.depression {
                    for &seed in &self.seeds {
                        runs.push(AblationRun {
                            method: Method::Mal,
                            k,
                            selection,
                            depression,
                            seed,
                        });
                    }
                }
            }
        }
        runs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub run: AblationRun,
    pub report: EvalReport,
}

pub fn train_and_evaluate(
    dataset: &Dataset,
    method: Method,
    cfg: &TrainConfig,
    split: Split,
    infer: &InferenceConfig,
) -> Result<(Checkpoint, Vec<IterationMetrics>, EvalReport)> {
    let mut trainer = Trainer::new(dataset, dataset.split(Split::Train), method, cfg.clone())?;
    let metrics = trainer.run(&mut std::io::sink())?;
    let checkpoint = trainer.checkpoint();
    let report = evaluate(&checkpoint, dataset, split, infer)?;
    Ok((checkpoint, metrics, report))
}

pub fn run_ablation(grid: &AblationGrid, dataset: &Dataset) -> Result<Vec<AblationRow>> {
    grid.validate()?;
    let infer = InferenceConfig::default();
    grid.runs()
        .into_iter()
        .map(|run| {
            let cfg = run.config(&grid.train);
            log::info!(
                "ablation: {} k={} {} {} seed={}",
                run.method.name(),
                run.k,
                run.selection.name(),
                run.depression.name(),
                run.seed
            );
            let (_, _, report) = train_and_evaluate(dataset, run.method, &cfg, grid.split, &infer)?;
            Ok(AblationRow { run, report })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |v| format!("{v:.6}"))
}

pub const ABLATION_COLUMNS: [&str; 13] = [
    "method",
    "k",
    "selection",
    "depression",
    "seed",
    "ap",
    "ap50",
    "ap75",
    "ap_small",
    "ap_medium",
    "ap_large",
    "score_iou_correlation",
    "loc_error_share",
];

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = ABLATION_COLUMNS.join("\t");
    s.push('\n');
    for r in rows {
        let (run, rep) = (&r.run, &r.report);
        let is_base = run.method == Method::Baseline;
        let cells = [
            run.method.name().to_string(),
            if is_base { "-".into() } else { run.k.to_string() },
            if is_base { "-".into() } else { run.selection.name().to_string() },
            if is_base { "-".into() } else { run.depression.name().to_string() },
            run.seed.to_string(),
            fmt_opt(rep.sweep.ap),
            fmt_opt(rep.sweep.ap50),
            fmt_opt(rep.sweep.ap75),
            fmt_opt(rep.ap_small),
            fmt_opt(rep.ap_medium),
            fmt_opt(rep.ap_large),
            fmt_opt(rep.correlation),
            format!("{:.6}", rep.localization.share),
        ];
        s.push_str(&cells.join("\t"));
        s.push('\n');
    }
    s
}

/// Seed-averaged AP and correlation per configuration, in first-appearance order.
pub fn ablation_summary(rows: &[AblationRow]) -> String {
    let mut keys: Vec<(Method, usize, SelectionStrategy, DepressionVariant)> = Vec::new();
    for r in rows {
        let key = (r.run.method, r.run.k, r.run.selection, r.run.depression);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut s = String::from("method\tk\tselection\tdepression\tseeds\tmean_ap\tmean_ap50\tmean_score_iou_correlation\n");
    for key in keys {
        let group: Vec<&AblationRow> = rows
            .iter()
            .filter(|r| (r.run.method, r.run.k, r.run.selection, r.run.depression) == key)
            .collect();
        let mean = |f: &dyn Fn(&EvalReport) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = group.iter().map(|r| f(&r.report)).collect();
            v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        let is_base = key.0 == Method::Baseline;
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            key.0.name(),
            if is_base { "-".into() } else { key.1.to_string() },
            if is_base { "-" } else { key.2.name() },
            if is_base { "-" } else { key.3.name() },
            group.len(),
            fmt_opt(mean(&|r| r.sweep.ap)),
            fmt_opt(mean(&|r| r.sweep.ap50)),
            fmt_opt(mean(&|r| r.correlation)),
        );
    }
    s
}

pub fn cmd_ablate(grid: &AblationGrid, out: &Path) -> Result<Vec<AblationRow>> {
    let dataset = load_dataset(&dataset_file(&grid.dataset))?;
    let rows = run_ablation(grid, &dataset)?;
    ensure_dir(out)?;
    write_text(&out.join("ablation.tsv"), &ablation_table(&rows))?;
    write_text(&out.join("summary.tsv"), &ablation_summary(&rows))?;
    write_text(&out.join(MANIFEST_FILE), &to_toml(grid)?)?;
    Ok(rows)
}

fn named_path(spec: &str) -> Result<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
        _ => Err(Error::InvalidArgument(format!("expected NAME=PATH, got '{spec}'"))),
    }
}

pub fn read_metrics_log(path: &Path) -> Result<Vec<IterationMetrics>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            IterationMetrics::parse(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

/// Loss-vs-iteration columns for several logs, aligned by row; empty input gives an empty string.
pub fn loss_series(logs: &[(String, Vec<IterationMetrics>)]) -> String {
    let rows = logs.iter().map(|(_, m)| m.len()).max().unwrap_or(0);
    if rows == 0 {
        return String::new();
    }
    let mut s = String::from("iteration");
    for (name, _) in logs {
        let _ = write!(s, "\t{name}");
    }
    s.push('\n');
    for i in 0..rows {
        let iteration = logs.iter().find_map(|(_, m)| m.get(i)).map_or(i, |m| m.iteration);
        let _ = write!(s, "{iteration}");
        for (_, m) in logs {
            match m.get(i) {
                Some(r) => {
                    let _ = write!(s, "\t{:.9}", r.loss);
                }
                None => s.push('\t'),
            }
        }
        s.push('\n');
    }
    s
}

fn report_value<'a>(rows: &'a [(String, String)], key: &str) -> &'a str {
    rows.iter().find(|(k, _)| k == key).map_or("none", |(_, v)| v.as_str())
}

pub fn ap_bars(reports: &[(String, Vec<(String, String)>)]) -> String {
    let keys = ["ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large", "score_iou_correlation"];
    let mut s = format!("method\t{}\n", keys.join("\t"));
    for (name, rows) in reports {
        let vals: Vec<&str> = keys.iter().map(|k| report_value(rows, k)).collect();
        let _ = writeln!(s, "{name}\t{}", vals.join("\t"));
    }
    s
}

pub fn error_share_series(reports: &[(String, Vec<(String, String)>)]) -> String {
    let mut s = String::from("bucket");
    for (name, _) in reports {
        let _ = write!(s, "\t{name}");
    }
    s.push('\n');
    let buckets = std::iter::once(("all".to_string(), "loc_error_share".to_string())).chain(
        crate::eval::ELONGATION_BUCKETS
            .iter()
            .map(|(_, _, l)| (l.to_string(), format!("loc_error_share_{l}"))),
    );
    for (label, key) in buckets {
        let _ = write!(s, "{label}");
        for (_, rows) in reports {
            let _ = write!(s, "\t{}", report_value(rows, &key));
        }
        s.push('\n');
    }
    s
}

pub fn cmd_plot(logs: &[String], reports: &[String], out: &Path) -> Result<Vec<PathBuf>> {
    if logs.is_empty() && reports.is_empty() {
        return Err(Error::InvalidArgument("plot needs at least one --log or --report".into()));
    }
    ensure_dir(out)?;
    let mut written = Vec::new();
    if !logs.is_empty() {
        let series = logs
            .iter()
            .map(|spec| {
                let (name, path) = named_path(spec)?;
                Ok((name, read_metrics_log(&path)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let path = out.join("loss.tsv");
        write_text(&path, &loss_series(&series))?;
        written.push(path);
    }
    if !reports.is_empty() {
        let parsed = reports
            .iter()
            .map(|spec| {
                let (name, path) = named_path(spec)?;
                let file = if path.is_dir() { path.join(REPORT_FILE) } else { path };
                Ok((name, parse_report(&read_text(&file)?)?))
            })
            .collect::<Result<Vec<_>>>()?;
        for (file, text) in [("ap.tsv", ap_bars(&parsed)), ("error_share.tsv", error_share_series(&parsed))] {
            let path = out.join(file);
            write_text(&path, &text)?;
            written.push(path);
        }
    }
    Ok(written)
}

fn train_config_from(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => load_toml(p)?,
        None => TrainConfig::default(),
    };
    args.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Executes a parsed command line, returning what it printed on stdout.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Generate(a) => {
            let cfg: DatasetConfig = match (&a.config, &a.manifest) {
                (Some(p), _) => load_toml(p)?,
                (None, Some(m)) => {
                    let m: GenerateManifest = load_toml(m)?;
                    if m.command != "generate" {
                        return Err(Error::Config(format!("manifest is for '{}', not generate", m.command)));
                    }
                    m.config
                }
                (None, None) => DatasetConfig::default(),
            };
            let m = cmd_generate(&cfg, &a.out)?;
            Ok(format!(
                "wrote {} scenes to {} (config {})\n",
                cfg.scene_count,
                a.out.join(DATASET_FILE).display(),
                m.config_sha256
            ))
        }
        Command::Train(a) => {
            let outcome = match &a.manifest {
                Some(m) => cmd_train_manifest(m, &a.out)?,
                None => {
                    let cfg = train_config_from(&a)?;
                    let dataset = a
                        .dataset
                        .as_deref()
                        .ok_or_else(|| Error::InvalidArgument("--dataset is required".into()))?;
                    cmd_train(dataset, a.method, &cfg, &a.out)?
                }
            };
            let last = outcome.metrics.last();
            Ok(format!(
                "trained {} for {} iterations; final loss {}; wrote {}\n",
                outcome.manifest.method.name(),
                outcome.metrics.len(),
                last.map_or("none".into(), |m| format!("{:.6}", m.loss)),
                a.out.display()
            ))
        }
        Command::Eval(a) => {
            let (ck, ds, split, infer) = match &a.manifest {
                Some(m) => {
                    let m: EvalManifest = load_toml(m)?;
                    let infer = InferenceConfig {
                        score_threshold: m.score_threshold,
                        nms_threshold: m.nms_threshold,
                        max_detections: m.max_detections,
                        ..Default::default()
                    };
                    (m.checkpoint, m.dataset, m.split, infer)
                }
                None => {
                    let infer = InferenceConfig {
                        score_threshold: a.score,
                        nms_threshold: a.nms,
                        max_detections: a.max_detections,
                        ..Default::default()
                    };
                    let missing = || Error::InvalidArgument("--checkpoint and --dataset are required".into());
                    (a.checkpoint.clone().ok_or_else(missing)?, a.dataset.clone().ok_or_else(missing)?, a.split, infer)
                }
            };
            let report = cmd_eval(&ck, &ds, split, &infer, a.out.as_deref())?;
            Ok(report.to_text())
        }
        Command::Ablate(a) => {
            let grid: AblationGrid = load_toml(&a.config)?;
            let rows = cmd_ablate(&grid, &a.out)?;
            Ok(ablation_summary(&rows))
        }
        Command::Plot(a) => {
            let written = cmd_plot(&a.logs, &a.reports, &a.out)?;
            let mut s = String::new();
            for p in written {
                let _ = writeln!(s, "wrote {}", p.display());
            }
            Ok(s)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_config_names_the_key() {
        let err = parse_toml::<DatasetConfig>("scene_count = 3\nbogus_key = 1\n", "cfg").unwrap_err();
        assert_eq!(err.category(), "config");
        assert!(err.to_string().contains("bogus_key"), "{err}");
        let err = parse_toml::<TrainConfig>("[depression]\nvariant = \"constant\"\nwat = 2\n", "cfg").unwrap_err();
        assert!(err.to_string().contains("wat"));
    }

    #[test]
    fn train_config_round_trips_through_toml() {
        let cfg = TrainConfig::default();
        let text = to_toml(&cfg).unwrap();
        let back: TrainConfig = parse_toml(&text, "cfg").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(config_hash(&back).unwrap(), config_hash(&cfg).unwrap());
        let partial: TrainConfig = parse_toml("iterations = 5\nselection = \"all\"\n", "cfg").unwrap();
        assert_eq!(partial.iterations, 5);
        assert_eq!(partial.selection, SelectionStrategy::All);
    }

    #[test]
    fn grid_shape() {
        let g = AblationGrid::default();
        assert_eq!(g.runs().len(), 3 * 2 * 4);
        let one = AblationGrid {
            k: vec![50],
            selection: vec![SelectionStrategy::AllToTop1],
            depression: vec![DepressionVariant::SymmetricStep],
            ..Default::default()
        };
        assert_eq!(one.runs().len(), 1);
        let with_base = AblationGrid { seeds: vec![1, 2], baseline: true, ..one };
        assert_eq!(with_base.runs().len(), 4);
        assert_eq!(with_base.runs()[0].method, Method::Baseline);
    }

    #[test]
    fn loss_series_alignment() {
        assert_eq!(loss_series(&[("a".into(), vec![])]), "");
        let m = |i: usize, loss: f64| IterationMetrics {
            iteration: i,
            lambda: 0.0,
            depression: 0.0,
            learning_rate: 0.0,
            mean_selected: 0.0,
            mean_selected_f: 0.0,
            loss,
            cls: 0.0,
            reg: 0.0,
            positives: 0,
        };
        let s = loss_series(&[("a".into(), vec![m(0, 1.0), m(1, 0.5)]), ("b".into(), vec![m(0, 2.0)])]);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "iteration\ta\tb");
        assert_eq!(lines[2], "1\t0.500000000\t");
    }

    #[test]
    fn sha_is_hex() {
        let h = sha256_hex(b"abc");
        assert_eq!(h, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
