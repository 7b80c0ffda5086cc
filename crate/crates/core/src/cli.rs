//! The `qlwa` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::analysis::{self, FpReference, SensitivityReport, SweepOptions};
use crate::data::{self, Arch, Dataset, Labels, Metric};
use crate::graph::{fold_batch_norms, load_model, save_model, NetworkGraph};
use crate::quant::{calibrate, check_bits, Granularity, WeightClip};
use crate::write_atomic;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_INTERNAL: u8 = 3;

#[derive(Error, Debug)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] crate::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "qlwa", version, about = "Layer-wise post-training quantization analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic model and a self-labeled dataset.
    GenFixture(GenFixtureArgs),
    /// Per-layer sensitivity sweep: report.json and heatmap.csv.
    Analyze(AnalyzeArgs),
    /// Expected versus measured mixed-precision degradation: additivity.json and scatter.csv.
    Additivity(AdditivityArgs),
    /// Naive, global and local clipping on one target layer: fix.json.
    Fix(FixArgs),
    /// Weight histogram and outlier summary of one layer: histogram.csv and outliers.json.
    Diagnose(DiagnoseArgs),
}

#[derive(Args, Debug)]
pub struct GenFixtureArgs {
    #[arg(long)]
    pub arch: Arch,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Dataset size.
    #[arg(long, default_value_t = 512)]
    pub samples: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// `model.json` or the directory holding it.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, conflicts_with = "gen_samples")]
    pub dataset: Option<PathBuf>,
    /// Generate a self-labeled dataset of this size instead of loading one.
    #[arg(long)]
    pub gen_samples: Option<usize>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub calib_samples: usize,
    #[arg(long, default_value_t = 8)]
    pub act_bits: u32,
    /// `top1` or `neg-l2`; defaults to the one matching the dataset labels.
    #[arg(long)]
    pub metric: Option<MetricArg>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub force: bool,
    /// Keep batch norm unfolded (debugging only).
    #[arg(long)]
    pub no_fold: bool,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma list (`4,6,8`) or inclusive range (`2..8`).
    #[arg(long, default_value = "2..8")]
    pub weight_bits: BitList,
    #[arg(long, default_value = "minmax")]
    pub clip: WeightClip,
    #[arg(long, default_value = "per-tensor")]
    pub granularity: Granularity,
}

#[derive(Args, Debug)]
pub struct AdditivityArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Reuse an existing `report.json` instead of sweeping inline.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 4)]
    pub low_bits: u32,
    #[arg(long, default_value_t = 8)]
    pub high_bits: u32,
}

#[derive(Args, Debug)]
pub struct FixArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub target: String,
    #[arg(long, default_value = "mse-grid")]
    pub method: WeightClip,
    /// A single bit-width.
    #[arg(long, default_value = "8")]
    pub weight_bits: BitList,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub layer: String,
    #[arg(long, default_value_t = 3.0)]
    pub k_sigma: f64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub no_fold: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricArg(pub Metric);

impl std::str::FromStr for MetricArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "top1" | "top1_accuracy" => Ok(MetricArg(Metric::Top1Accuracy)),
            "neg_l2" => Ok(MetricArg(Metric::NegL2)),
            _ => Err(format!("unknown metric `{s}` (expected top1 or neg-l2)")),
        }
    }
}

/// Weight bit-widths from `4,6,8` or `2..8`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitList(pub Vec<u32>);

impl std::str::FromStr for BitList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let num = |t: &str| t.trim().parse::<u32>().map_err(|_| format!("bad bit-width `{t}`"));
        let bits: Vec<u32> = if let Some((lo, hi)) = s.split_once("..") {
            let (lo, hi) = (num(lo)?, num(hi)?);
            if lo > hi {
                return Err(format!("empty range `{s}`"));
            }
            (lo..=hi).collect()
        } else {
            s.split(',').map(num).collect::<Result<_, _>>()?
        };
        for (i, b) in bits.iter().enumerate() {
            if !(2..=16).contains(b) {
                return Err(format!("bit-width {b} outside [2, 16]"));
            }
            if bits[..i].contains(b) {
                return Err(format!("bit-width {b} listed twice"));
            }
        }
        Ok(BitList(bits))
    }
}

/// Where the evaluation samples come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    Load(PathBuf),
    Generate { n: usize, seed: u64 },
}

/// Everything an analysis command needs, validated.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: PathBuf,
    pub data: DataSource,
    pub calib_samples: usize,
    pub weight_bits: Vec<u32>,
    pub act_bits: u32,
    pub clip: WeightClip,
    pub granularity: Granularity,
    pub metric: Option<Metric>,
    pub target: Option<String>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub force: bool,
    pub fold: bool,
}

impl RunConfig {
    fn from_common(c: &CommonArgs) -> CliResult<Self> {
        let data = match (&c.dataset, c.gen_samples) {
            (Some(p), None) => DataSource::Load(p.clone()),
            (None, Some(0)) => return Err(CliError::Usage("--gen-samples must be at least 1".into())),
            (None, Some(n)) => DataSource::Generate { n, seed: c.seed },
            (None, None) => return Err(CliError::Usage("one of --dataset or --gen-samples is required".into())),
            (Some(_), Some(_)) => {
                return Err(CliError::Usage("--dataset and --gen-samples are mutually exclusive".into()))
            }
        };
        if c.calib_samples == 0 {
            return Err(CliError::Usage("--calib-samples must be at least 1".into()));
        }
        check_bits(c.act_bits).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(RunConfig {
            model: c.model.clone(),
            data,
            calib_samples: c.calib_samples,
            weight_bits: vec![8],
            act_bits: c.act_bits,
            clip: WeightClip::Minmax,
            granularity: Granularity::PerTensor,
            metric: c.metric.map(|m| m.0),
            target: None,
            out_dir: c.out_dir.clone(),
            seed: c.seed,
            force: c.force,
            fold: !c.no_fold,
        })
    }

    fn sweep_options(&self) -> SweepOptions {
        SweepOptions { act_bits: self.act_bits, weight_clip: self.clip, granularity: self.granularity, allow_unfolded: !self.fold }
    }
}

/// Parses `args` (program name first), runs the command and maps the outcome
/// to an exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code());
    }
    match execute(&cli.command) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("QLWA_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| CliError::Usage(format!("QLWA_THREADS must be an integer, got `{v}`")))?;
    if n == 0 {
        return Ok(());
    }
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs one command; returns the lines to print on success.
pub fn execute(command: &Command) -> CliResult<Vec<String>> {
    match command {
        Command::GenFixture(a) => cmd_gen_fixture(a),
        Command::Analyze(a) => {
            let mut cfg = RunConfig::from_common(&a.common)?;
            cfg.weight_bits = a.weight_bits.0.clone();
            cfg.clip = a.clip;
            cfg.granularity = a.granularity;
            cmd_analyze(&cfg)
        }
        Command::Additivity(a) => cmd_additivity(a),
        Command::Fix(a) => {
            let mut cfg = RunConfig::from_common(&a.common)?;
            let [bits] = a.weight_bits.0[..] else {
                return Err(CliError::Usage("fix takes a single --weight-bits value".into()));
            };
            cfg.weight_bits = vec![bits];
            cfg.clip = a.method;
            cfg.target = Some(a.target.clone());
            cmd_fix(&cfg)
        }
        Command::Diagnose(a) => cmd_diagnose(a),
    }
}

fn cmd_gen_fixture(a: &GenFixtureArgs) -> CliResult<Vec<String>> {
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    if !a.force && dir_has_entries(&a.out_dir)? {
        return Err(CliError::Usage(format!("{} exists and is not empty (use --force)", a.out_dir.display())));
    }
    let graph = data::gen_fixture(a.arch, a.seed)?;
    let folded = fold_batch_norms(&graph)?;
    let dataset = data::gen_dataset(&folded, a.samples, a.seed)?;
    let dataset_dir = a.out_dir.join("dataset");
    if a.force && dataset_dir.exists() {
        fs::remove_dir_all(&dataset_dir).map_err(|e| crate::Error::Io { path: dataset_dir.clone(), source: e })?;
    }
    save_model(&graph, &a.out_dir)?;
    data::save_dataset(&dataset, &dataset_dir)?;
    Ok(vec![format!("model {}", graph.fingerprint()), format!("dataset {}", dataset.id())])
}

fn dir_has_entries(dir: &Path) -> CliResult<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(crate::Error::Io { path: dir.to_path_buf(), source: e }.into()),
    }
}

fn load_graph(model: &Path, fold: bool) -> CliResult<NetworkGraph> {
    let graph = load_model(model)?;
    if fold {
        Ok(fold_batch_norms(&graph)?)
    } else {
        eprintln!("warning: --no-fold: batch norm stays in the graph; results do not describe the deployed network");
        Ok(graph)
    }
}

fn load_data(cfg: &RunConfig, graph: &NetworkGraph) -> CliResult<Dataset> {
    Ok(match &cfg.data {
        DataSource::Load(dir) => data::load_dataset(dir)?,
        DataSource::Generate { n, seed } => data::gen_dataset(graph, *n, *seed)?,
    })
}

fn metric_for(cfg: &RunConfig, dataset: &Dataset) -> Metric {
    cfg.metric.unwrap_or(match dataset.labels() {
        Labels::Classes(_) => Metric::Top1Accuracy,
        Labels::Targets(_) => Metric::NegL2,
    })
}

/// Refuses to clobber existing outputs unless forced; creates the directory.
fn prepare_outputs(out_dir: &Path, names: &[&str], force: bool) -> CliResult<Vec<PathBuf>> {
    let paths: Vec<PathBuf> = names.iter().map(|n| out_dir.join(n)).collect();
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(CliError::Usage(format!("{} already exists (use --force)", p.display())));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| crate::Error::Io { path: out_dir.to_path_buf(), source: e })?;
    Ok(paths)
}

fn write_outputs(outputs: &[(PathBuf, String)]) -> CliResult<Vec<String>> {
    for (path, text) in outputs {
        write_atomic(path, text.as_bytes())?;
    }
    Ok(outputs.iter().map(|(p, _)| format!("wrote {}", p.display())).collect())
}

struct Prepared {
    graph: NetworkGraph,
    dataset: Dataset,
    metric: Metric,
}

fn prepare(cfg: &RunConfig) -> CliResult<Prepared> {
    let graph = load_graph(&cfg.model, cfg.fold)?;
    let dataset = load_data(cfg, &graph)?;
    let metric = metric_for(cfg, &dataset);
    Ok(Prepared { graph, dataset, metric })
}

pub fn cmd_analyze(cfg: &RunConfig) -> CliResult<Vec<String>> {
    let paths = prepare_outputs(&cfg.out_dir, &["report.json", "heatmap.csv"], cfg.force)?;
    let p = prepare(cfg)?;
    let calib = calibrate(&p.graph, &p.dataset, cfg.calib_samples)?;
    let report = analysis::sweep(&p.graph, &cfg.weight_bits, &calib, &p.dataset, p.metric, cfg.sweep_options())?;
    let heatmap = analysis::heatmap_csv(&report)?;
    write_outputs(&[(paths[0].clone(), report.to_json()), (paths[1].clone(), heatmap)])
}

fn cmd_additivity(a: &AdditivityArgs) -> CliResult<Vec<String>> {
    let mut cfg = RunConfig::from_common(&a.common)?;
    for b in [a.low_bits, a.high_bits] {
        check_bits(b).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    cfg.weight_bits = if a.low_bits == a.high_bits { vec![a.low_bits] } else { vec![a.low_bits, a.high_bits] };
    let paths = prepare_outputs(&cfg.out_dir, &["additivity.json", "scatter.csv"], cfg.force)?;
    let p = prepare(&cfg)?;
    let calib = calibrate(&p.graph, &p.dataset, cfg.calib_samples)?;
    let opts = cfg.sweep_options();
    if !opts.allow_unfolded && p.graph.has_batch_norm() {
        return Err(crate::Error::InvalidGraph("graph still has batch norm; fold it first".into()).into());
    }
    let fp = FpReference::new(&p.graph, &p.dataset, p.metric)?;
    let report = match &a.report {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| crate::Error::Io { path: path.clone(), source: e })?;
            let report = SensitivityReport::from_json(&text)?;
            if report.network != p.graph.fingerprint() || report.dataset != p.dataset.id() {
                return Err(crate::Error::Report(format!(
                    "{} was produced for a different model or dataset",
                    path.display()
                ))
                .into());
            }
            report
        }
        None => analysis::sweep_with(&fp, &cfg.weight_bits, &calib, opts)?,
    };
    let result = analysis::check_additivity_with(&fp, &report, a.trials, cfg.seed, a.low_bits, a.high_bits, &calib)?;
    let scatter = analysis::scatter_csv(&result)?;
    write_outputs(&[(paths[0].clone(), result.to_json()), (paths[1].clone(), scatter)])
}

pub fn cmd_fix(cfg: &RunConfig) -> CliResult<Vec<String>> {
    let target = cfg.target.as_deref().ok_or_else(|| CliError::Usage("--target is required".into()))?;
    let paths = prepare_outputs(&cfg.out_dir, &["fix.json"], cfg.force)?;
    let p = prepare(cfg)?;
    let calib = calibrate(&p.graph, &p.dataset, cfg.calib_samples)?;
    let report = analysis::compare_fixes(
        &p.graph,
        target,
        &calib,
        &p.dataset,
        p.metric,
        cfg.weight_bits[0],
        cfg.act_bits,
        cfg.clip,
    )?;
    write_outputs(&[(paths[0].clone(), report.to_json())])
}

fn cmd_diagnose(a: &DiagnoseArgs) -> CliResult<Vec<String>> {
    let paths = prepare_outputs(&a.out_dir, &["histogram.csv", "outliers.json"], a.force)?;
    let graph = load_graph(&a.model, !a.no_fold)?;
    let summary = analysis::diagnose_outliers(&graph, &a.layer, a.k_sigma)?;
    let histogram = analysis::histogram_csv(&summary.histogram)?;
    let mut json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Internal(e.to_string()))?;
    json.push('\n');
    write_outputs(&[(paths[0].clone(), histogram), (paths[1].clone(), json)])
}
