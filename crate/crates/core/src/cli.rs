//! Command-line front end. Every subcommand is a pure function of its flags
//! and input files and can emit a JSON [`RunReport`].

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::ensembler::{self, EnsembleSpec, Method, MethodKind};
use crate::error::{Error, Result};
use crate::landscape;
use crate::metrics::{Dataset, EvalReport};
use crate::nn::{self, Activation, ModelSpec, TrainConfig};
use crate::storage;

#[derive(Debug, Parser)]
#[command(
    name = "lpe",
    version,
    about = "Training-free low-precision ensembles from one checkpoint"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an MLP checkpoint with plain SGD.
    Train(TrainArgs),
    /// Derive ensemble members from a checkpoint and write them to a directory.
    Ensemble(EnsembleArgs),
    /// Evaluate a checkpoint or an ensemble.
    Eval(EvalArgs),
    /// Loss and disagreement surfaces on the plane through three models.
    Landscape(LandscapeArgs),
}

/// Synthetic blobs, written `K=3,d=2,n=200[,spread=1.0][,seed=0][,split=0]`
/// with `n` points per class. Splits share centers and differ in the points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub spread: f64,
    pub seed: u64,
    pub split: u32,
}

impl FromStr for BlobSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (mut classes, mut dim, mut n) = (None, None, None);
        let mut spread = 1.0;
        let mut seed = 0;
        let mut split = 0;
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got {part:?}"))?;
            let value = value.trim();
            let bad = |_| format!("invalid value {value:?} for {key}");
            match key.trim() {
                "K" | "k" => classes = Some(value.parse().map_err(bad)?),
                "d" => dim = Some(value.parse().map_err(bad)?),
                "n" => n = Some(value.parse().map_err(bad)?),
                "spread" => {
                    spread = value
                        .parse()
                        .map_err(|_| format!("invalid spread {value:?}"))?
                }
                "seed" => seed = value.parse().map_err(bad)?,
                "split" => {
                    split = value
                        .parse()
                        .map_err(|_| format!("invalid split {value:?}"))?
                }
                other => return Err(format!("unknown blob key {other:?}")),
            }
        }
        Ok(Self {
            classes: classes.ok_or("blob spec needs K")?,
            dim: dim.ok_or("blob spec needs d")?,
            n_per_class: n.ok_or("blob spec needs n")?,
            spread,
            seed,
            split,
        })
    }
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(group(ArgGroup::new("source").required(true).args(["data", "blobs"])))]
pub struct DataArgs {
    /// CSV dataset with header f0..f{d-1},label.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Synthetic dataset, e.g. K=3,d=2,n=200,spread=1.0,seed=0,split=1.
    #[arg(long)]
    pub blobs: Option<BlobSpec>,
}

impl DataArgs {
    pub fn load(&self) -> Result<Dataset> {
        match (&self.data, &self.blobs) {
            (Some(path), _) => storage::load_dataset_csv(path),
            (None, Some(b)) => storage::make_blobs_split(
                b.classes,
                b.dim,
                b.n_per_class,
                b.spread,
                b.seed,
                b.split,
            ),
            (None, None) => Err(Error::Config("either --data or --blobs is required".into())),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: DataArgs,
    /// Layer widths from input to classes, e.g. 2,16,3.
    #[arg(long, value_delimiter = ',', required = true)]
    pub layers: Vec<usize>,
    #[arg(long, default_value = "relu", value_parser = parse_activation)]
    pub activation: Activation,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f32,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Write the JSON run report here ("-" for stdout).
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn parse_activation(s: &str) -> std::result::Result<Activation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> std::result::Result<MethodKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EnsembleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// One of bsr, rtn, gaussian, mcd.
    #[arg(long, value_parser = parse_method)]
    pub method: MethodKind,
    /// Bit width for bsr / rtn.
    #[arg(long)]
    pub bits: Option<u8>,
    #[arg(long, default_value_t = 1)]
    pub size: usize,
    /// Noise variance for gaussian.
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Drop probability for mcd.
    #[arg(long)]
    pub drop_p: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(group(ArgGroup::new("model").required(true).args(["members", "ckpt"])))]
pub struct EvalArgs {
    /// Ensemble manifest written by `ensemble`.
    #[arg(long)]
    pub members: Option<PathBuf>,
    /// Single checkpoint (or member file).
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[command(flatten)]
    pub source: DataArgs,
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Sweep: build an ensemble from --ckpt at each bit width and evaluate it.
    #[arg(
        long,
        value_delimiter = ',',
        requires = "ckpt",
        conflicts_with = "members"
    )]
    pub bits_list: Option<Vec<u8>>,
    /// Method for --bits-list sweeps (bsr or rtn).
    #[arg(long, value_parser = parse_method, default_value = "bsr", requires = "bits_list")]
    pub method: MethodKind,
    #[arg(long, default_value_t = 10, requires = "bits_list")]
    pub size: usize,
    #[arg(long, default_value_t = 0, requires = "bits_list")]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LandscapeArgs {
    /// Anchor w0 (checkpoint or member file).
    #[arg(long)]
    pub a: PathBuf,
    /// Anchor w1.
    #[arg(long)]
    pub b: PathBuf,
    /// Anchor w2.
    #[arg(long)]
    pub c: PathBuf,
    #[command(flatten)]
    pub source: DataArgs,
    #[arg(long, default_value_t = landscape::DEFAULT_RESOLUTION)]
    pub grid: usize,
    /// Padding around the anchors, as a fraction of their bounding-box diagonal.
    #[arg(long, default_value_t = landscape::DEFAULT_MARGIN)]
    pub margin: f64,
    /// Grid CSV; anchors go to `<stem>.anchors.csv` beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// NLL / ERR / ECE and the ambiguity decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub nll: f64,
    pub err: f64,
    pub ece: f64,
    pub avg_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ambiguity: Option<f64>,
    pub ensemble_loss: f64,
}

impl From<&EvalReport> for MetricSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            nll: r.nll,
            err: r.err,
            ece: r.ece,
            avg_loss: r.avg_loss,
            ambiguity: r.ambiguity,
            ensemble_loss: r.ensemble_loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricSummary>,
    pub per_member_nll: Vec<f64>,
    pub memory_bits: Option<u64>,
    pub wall_time_ms: u64,
    pub artifact_paths: Vec<String>,
    /// Subcommand-specific details (anchor metrics for `landscape`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

impl RunReport {
    fn new(command: &str, config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            metrics: None,
            per_member_nll: Vec::new(),
            memory_bits: None,
            wall_time_ms: 0,
            artifact_paths: Vec::new(),
            details: None,
        })
    }

    fn with_eval(mut self, r: &EvalReport) -> Self {
        self.metrics = Some(r.into());
        self.per_member_nll = r.per_member_nll.clone();
        self.memory_bits = Some(r.memory_bits);
        self
    }
}

/// Output of one CLI invocation: a single report, or one per sweep setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Output {
    Single(Box<RunReport>),
    Sweep(Vec<RunReport>),
}

fn summary_line(label: &str, r: &EvalReport) -> String {
    let amb = r.ambiguity.map_or("-".to_string(), |a| format!("{a:.6}"));
    format!(
        "{label:<12} nll {:.6}  err {:.4}  ece {:.4}  (a) {:.6}  (b) {amb}  (c) {:.6}  bits {}",
        r.nll, r.err, r.ece, r.avg_loss, r.ensemble_loss, r.memory_bits
    )
}

fn emit(json: Option<&Path>, output: &Output, human: &[String]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(output)?;
    text.push('\n');
    match json {
        Some(p) if p == Path::new("-") => print!("{text}"),
        Some(p) => {
            storage::write_atomic(p, text.as_bytes())?;
            human.iter().for_each(|l| println!("{l}"));
        }
        None => human.iter().for_each(|l| println!("{l}")),
    }
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

pub fn run(cli: Cli) -> Result<Output> {
    match cli.command {
        Command::Train(a) => train(&a),
        Command::Ensemble(a) => ensemble(&a),
        Command::Eval(a) => eval(&a),
        Command::Landscape(a) => landscape_cmd(&a),
    }
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

fn train(a: &TrainArgs) -> Result<Output> {
    let start = Instant::now();
    let data = a.source.load()?;
    let spec = ModelSpec::new(a.layers.clone(), a.activation)?;
    let cfg = TrainConfig {
        lr: a.lr,
        epochs: a.epochs,
        batch: a.batch,
        seed: a.seed,
    };
    let ckpt = nn::train_sgd(&data, &spec, &cfg)?;
    storage::save_checkpoint(&a.out, &ckpt)?;
    let eval = ensembler::evaluate_checkpoint(&ckpt, &data)?;

    let mut report = RunReport::new("train", a, Some(a.seed))?.with_eval(&eval);
    report.artifact_paths = vec![display(&a.out)];
    report.wall_time_ms = elapsed_ms(start);
    let human = vec![
        format!(
            "wrote {} ({} parameters)",
            a.out.display(),
            ckpt.param_count()
        ),
        format!("train err {:.4}  train nll {:.6}", eval.err, eval.nll),
    ];
    let out = Output::Single(Box::new(report));
    emit(a.json.as_deref(), &out, &human)?;
    Ok(out)
}

fn ensemble(a: &EnsembleArgs) -> Result<Output> {
    let start = Instant::now();
    let method = Method::from_parts(a.method, a.bits, a.sigma2, a.drop_p)?;
    let spec = EnsembleSpec::new(method, a.size, a.seed)?;
    let ckpt = storage::load_checkpoint(&a.ckpt)?;
    let ms = ensembler::generate_members(&ckpt, &spec)?;
    let written = storage::save_member_set(&a.out_dir, &ms)?;

    let mut report = RunReport::new("ensemble", a, Some(a.seed))?;
    report.memory_bits = Some(ensembler::memory_budget(&ms));
    report.artifact_paths = written.iter().map(|p| display(p)).collect();
    report.details = Some(serde_json::json!({
        "member_seeds": ms.members().iter().map(|m| m.seed).collect::<Vec<_>>(),
    }));
    report.wall_time_ms = elapsed_ms(start);
    let human = vec![format!(
        "wrote {} {} member(s) to {} ({} bits)",
        ms.len(),
        a.method,
        a.out_dir.display(),
        ensembler::memory_budget(&ms)
    )];
    let out = Output::Single(Box::new(report));
    emit(a.json.as_deref(), &out, &human)?;
    Ok(out)
}

fn eval(a: &EvalArgs) -> Result<Output> {
    let start = Instant::now();
    let data = a.source.load()?;

    if let Some(bits_list) = &a.bits_list {
        let path = a
            .ckpt
            .as_ref()
            .expect("clap requires --ckpt with --bits-list");
        let ckpt = storage::load_model(path)?;
        let mut reports = Vec::with_capacity(bits_list.len());
        let mut human = Vec::new();
        for &bits in bits_list {
            let t = Instant::now();
            let method = Method::from_parts(a.method, Some(bits), None, None)?;
            let size = if a.method == MethodKind::Rtn {
                1
            } else {
                a.size
            };
            let spec = EnsembleSpec::new(method, size, a.seed)?;
            let ms = ensembler::generate_members(&ckpt, &spec)?;
            let r = ensembler::evaluate(&ms, &data)?;
            human.push(summary_line(&format!("{} INT-{bits}", a.method), &r));
            let mut report = RunReport::new("eval", a, Some(a.seed))?.with_eval(&r);
            report.details = Some(serde_json::to_value(spec)?);
            report.wall_time_ms = elapsed_ms(t);
            reports.push(report);
        }
        let out = Output::Sweep(reports);
        emit(a.json.as_deref(), &out, &human)?;
        return Ok(out);
    }

    let (r, seed, label) = match (&a.members, &a.ckpt) {
        (Some(manifest), _) => {
            let ms = storage::load_member_set(manifest)?;
            let label = format!("{} S={}", ms.spec().method.kind(), ms.len());
            (
                ensembler::evaluate(&ms, &data)?,
                Some(ms.spec().base_seed),
                label,
            )
        }
        (None, Some(path)) => {
            let ckpt = storage::load_model(path)?;
            (
                ensembler::evaluate_checkpoint(&ckpt, &data)?,
                None,
                "single".to_string(),
            )
        }
        (None, None) => {
            return Err(Error::Config(
                "either --members or --ckpt is required".into(),
            ))
        }
    };
    let mut report = RunReport::new("eval", a, seed)?.with_eval(&r);
    report.wall_time_ms = elapsed_ms(start);
    let out = Output::Single(Box::new(report));
    emit(a.json.as_deref(), &out, &[summary_line(&label, &r)])?;
    Ok(out)
}

/// `<dir>/<stem>.anchors.csv` next to the grid CSV.
pub fn anchors_path(grid_csv: &Path) -> PathBuf {
    let stem = grid_csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "landscape".into());
    grid_csv.with_file_name(format!("{stem}.anchors.csv"))
}

fn landscape_cmd(a: &LandscapeArgs) -> Result<Output> {
    let start = Instant::now();
    let data = a.source.load()?;
    let w0 = storage::load_model(&a.a)?;
    let w1 = storage::load_model(&a.b)?;
    let w2 = storage::load_model(&a.c)?;
    let basis = landscape::plane_basis(&w0, &w1, &w2)?;
    let grid = landscape::eval_grid(&basis, &data, a.grid, a.margin)?;
    let sidecar = anchors_path(&a.out);
    landscape::write_csvs(&grid, &a.out, &sidecar, ["a", "b", "c"])?;

    let anchors: Vec<serde_json::Value> = ["a", "b", "c"]
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let (alpha, beta) = grid.anchors[k];
            let m = grid.anchor_metrics(k);
            serde_json::json!({
                "name": name, "alpha": alpha, "beta": beta,
                "nll": m.nll, "disagree_1": m.disagree_1, "disagree_2": m.disagree_2,
            })
        })
        .collect();
    let mut report = RunReport::new("landscape", a, None)?;
    report.artifact_paths = vec![display(&a.out), display(&sidecar)];
    report.details = Some(serde_json::json!({ "anchors": anchors }));
    report.wall_time_ms = elapsed_ms(start);
    let human = (0..3)
        .map(|k| {
            let m = grid.anchor_metrics(k);
            format!(
                "anchor {}  nll {:.6}  disagree_1 {:.4}  disagree_2 {:.4}",
                ["a", "b", "c"][k],
                m.nll,
                m.disagree_1,
                m.disagree_2
            )
        })
        .collect::<Vec<_>>();
    let out = Output::Single(Box::new(report));
    emit(a.json.as_deref(), &out, &human)?;
    Ok(out)
}
