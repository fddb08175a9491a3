//! The `drocost` command line.
//!
//! Every subcommand resolves its settings from an optional `key=value` file
//! (`--config`) overlaid by explicit flags, prints the SHA-256 digest of the
//! resolved settings to stderr and then runs. Exit codes: 0 on success, 1 on
//! usage errors, 2 on runtime errors (with a JSON error object on stdout).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::closed_form::{
    accuracy, mean_logistic_loss, rmse, solve_adaptive_logistic, solve_adaptive_sqrt_ls, solve_baseline_logistic,
    AdaptiveLoss, AdaptiveRegProblem, BaselinePenalty, EstimateRecord,
};
use crate::data::{Dataset, Point, Task};
use crate::harness::{self, render_report, ExperimentConfig, ReportFormat};
use crate::linalg::{PsdMatrix, SymMatrix};
use crate::loss::Loss;
use crate::metric::{build_pair_sets, learn_mahalanobis, pd_floor, FeatureMap, FeatureMapKind, MetricLearnConfig};
use crate::smoothed::{DualObjective, SamplerCenter, SgdConfig, SmoothingConfig};
use crate::transport::{ot_discrepancy, CostFunction, DiscreteDistribution, Feasibility};

/// Environment variable holding the default seed.
pub const SEED_ENV: &str = "DOCUMENTED_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{message}")]
    Runtime { kind: &'static str, message: String },
}

impl CliError {
    fn runtime(kind: &'static str, e: impl std::fmt::Display) -> Self {
        CliError::Runtime { kind, message: e.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime { .. } => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty => $kind:literal),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::runtime($kind, e)
            }
        })*
    };
}

runtime_from! {
    std::io::Error => "io",
    csv::Error => "csv",
    serde_json::Error => "json",
    harness::HarnessError => "harness",
    crate::closed_form::SolveError => "solver",
    crate::smoothed::SmoothError => "smoothed",
    crate::metric::MetricError => "metric",
    crate::transport::TransportError => "transport",
    crate::linalg::LinalgError => "linalg",
    crate::data::DataError => "data",
}

#[derive(Debug, Parser)]
#[command(name = "drocost", version, about = "Distributionally robust estimation with learned transport costs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Master seed (default: $DOCUMENTED_SEED, else 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Flat key=value settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file (stdout when absent; a directory for `benchmark`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// CSV with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    label_column: Option<String>,
    /// Label value mapped to +1; omit for regression.
    #[arg(long)]
    positive_label: Option<String>,
}

#[derive(Debug, Args)]
struct MetricArgs {
    #[arg(long)]
    metric_k: Option<usize>,
    #[arg(long)]
    metric_lambda_bar: Option<f64>,
    #[arg(long)]
    metric_step_size: Option<f64>,
    #[arg(long)]
    metric_max_iters: Option<usize>,
    #[arg(long)]
    metric_pd_floor_gamma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Lr,
    Lrl1,
    DroL,
    DroNl,
    DroSgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MapArg {
    Identity,
    LinearQuadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CostArg {
    SqEuclidean,
    Mahalanobis,
    MahalanobisNorm,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn a Mahalanobis cost matrix from k-NN side information; writes it as CSV.
    MetricLearn {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        feature_map: Option<MapArg>,
        #[command(flatten)]
        metric: MetricArgs,
    },
    /// Fit a model; writes the estimate as JSON.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        #[arg(long)]
        delta: Option<f64>,
        /// Cost matrix CSV; learned from the data when absent.
        #[arg(long)]
        lambda_file: Option<PathBuf>,
        #[arg(long, value_enum)]
        feature_map: Option<MapArg>,
        #[command(flatten)]
        metric: MetricArgs,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        sampler_sigma: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        step: Option<f64>,
        #[arg(long)]
        warmup: Option<usize>,
        /// Per-iteration trace (JSON lines) for the stochastic solver.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score a saved estimate on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        estimate: Option<PathBuf>,
    },
    /// Optimal-transport discrepancy between two labeled atom files.
    Ot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        p: Option<PathBuf>,
        #[arg(long)]
        q: Option<PathBuf>,
        #[arg(long, value_enum)]
        cost: Option<CostArg>,
        #[arg(long)]
        lambda_file: Option<PathBuf>,
        #[arg(long)]
        label_column: Option<String>,
        /// Column of atom weights; uniform when absent.
        #[arg(long)]
        weight_column: Option<String>,
    },
    /// Repeated-split benchmark; writes report.json, report.md and records.jsonl.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated subset of lr,lrl1,dro-l,dro-nl.
        #[arg(long)]
        models: Option<String>,
        /// Comma-separated values or `default`.
        #[arg(long)]
        delta_grid: Option<String>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        train_size: Option<usize>,
        #[arg(long)]
        test_cap: Option<usize>,
        #[command(flatten)]
        metric: MetricArgs,
    },
    /// Synthetic data with one informative coordinate; writes CSV.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        /// Logit coefficient on the first coordinate.
        #[arg(long)]
        coef: Option<f64>,
    },
}

/// Resolved settings: file values overlaid by flags.
#[derive(Debug, Clone, Default)]
struct Settings(BTreeMap<String, String>);

impl Settings {
    fn resolve(
        file: Option<&Path>,
        allowed: &[&str],
        flags: Vec<(&str, Option<String>)>,
        seed: Option<u64>,
    ) -> Result<Self, CliError> {
        let mut map = match file {
            Some(path) => read_kv_file(path)?,
            None => BTreeMap::new(),
        };
        if let Some(k) = map.keys().find(|k| k.as_str() != "seed" && !allowed.contains(&k.as_str())) {
            return Err(CliError::Usage(format!("unknown config key {k:?}")));
        }
        for (k, v) in flags {
            if let Some(v) = v {
                map.insert(k.to_string(), v);
            }
        }
        let seed = match seed {
            Some(s) => s.to_string(),
            None => match map.get("seed") {
                Some(s) => s.clone(),
                None => match std::env::var(SEED_ENV) {
                    Ok(s) if !s.trim().is_empty() => s.trim().to_string(),
                    _ => "0".into(),
                },
            },
        };
        seed.parse::<u64>().map_err(|_| CliError::Usage(format!("seed must be a nonnegative integer, got {seed:?}")))?;
        map.insert("seed".into(), seed);
        Ok(Settings(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.0
            .get(key)
            .map(|v| v.parse::<T>().map_err(|_| CliError::Usage(format!("{key}: cannot parse {v:?}"))))
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn require<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        self.get(key)?.ok_or_else(|| CliError::Usage(format!("missing required setting {key} (flag --{})", key.replace('_', "-"))))
    }

    fn choice<T: ValueEnum>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.0
            .get(key)
            .map(|v| T::from_str(v, true).map_err(|_| CliError::Usage(format!("{key}: unknown value {v:?}"))))
            .transpose()
    }

    fn seed(&self) -> u64 {
        self.0["seed"].parse().unwrap_or(0)
    }

    fn digest(&self, command: &str) -> String {
        let mut canon = format!("command={command}\n");
        for (k, v) in &self.0 {
            canon.push_str(&format!("{k}={v}\n"));
        }
        hex(&Sha256::digest(canon.as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected key=value", no + 1))?;
        let k = k.trim().replace('-', "_");
        if k.is_empty() {
            return Err(format!("line {}: empty key", no + 1));
        }
        map.insert(k, v.trim().to_string());
    }
    Ok(map)
}

fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_kv(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(|v| v.to_string())
}

fn p(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|v| v.display().to_string())
}

fn enum_name<T: ValueEnum>(v: &Option<T>) -> Option<String> {
    v.as_ref().and_then(|v| v.to_possible_value()).map(|pv| pv.get_name().to_string())
}

const DATA_KEYS: &[&str] = &["data", "label_column", "positive_label"];
const METRIC_KEYS: &[&str] = &["metric_k", "metric_lambda_bar", "metric_step_size", "metric_max_iters", "metric_pd_floor_gamma"];

fn data_flags(d: &DataArgs) -> Vec<(&'static str, Option<String>)> {
    vec![("data", p(&d.data)), ("label_column", s(&d.label_column)), ("positive_label", s(&d.positive_label))]
}

fn metric_flags(m: &MetricArgs) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("metric_k", s(&m.metric_k)),
        ("metric_lambda_bar", s(&m.metric_lambda_bar)),
        ("metric_step_size", s(&m.metric_step_size)),
        ("metric_max_iters", s(&m.metric_max_iters)),
        ("metric_pd_floor_gamma", s(&m.metric_pd_floor_gamma)),
    ]
}

fn keys(groups: &[&[&'static str]]) -> Vec<&'static str> {
    groups.iter().flat_map(|g| g.iter().copied()).chain(["out"]).collect()
}

fn metric_config(st: &Settings) -> Result<MetricLearnConfig, CliError> {
    let d = MetricLearnConfig::default();
    Ok(MetricLearnConfig {
        k: st.or("metric_k", d.k)?,
        lambda_bar: st.or("metric_lambda_bar", d.lambda_bar)?,
        step_size: st.or("metric_step_size", d.step_size)?,
        max_iters: st.or("metric_max_iters", d.max_iters)?,
        pd_floor_gamma: st.or("metric_pd_floor_gamma", d.pd_floor_gamma)?,
        seed: st.seed(),
    })
}

fn load_data(st: &Settings) -> Result<Dataset, CliError> {
    let path: PathBuf = st.require("data")?;
    let label: String = st.or("label_column", "label".to_string())?;
    let positive: Option<String> = st.get("positive_label")?;
    Ok(harness::load_csv(&path, &label, positive.as_deref())?.dataset)
}

fn feature_map(kind: Option<MapArg>, d: usize) -> FeatureMap {
    match kind {
        Some(MapArg::LinearQuadratic) => FeatureMap::linear_quadratic(d),
        _ => FeatureMap::identity(d),
    }
}

/// Reads a square matrix from a header-less CSV.
pub fn read_matrix_csv(path: &Path) -> Result<PsdMatrix, CliError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| CliError::runtime("lambda_file", format!("{}: non-numeric cell {c:?}", path.display()))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    Ok(PsdMatrix::new(SymMatrix::from_rows(&refs)?)?)
}

pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, out: W) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

fn write_output(out: Option<&Path>, stdout: &mut dyn Write, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, bytes)?,
        None => stdout.write_all(bytes)?,
    }
    Ok(())
}

/// A saved estimate: coefficients plus what is needed to score new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model: String,
    pub task: Task,
    pub feature_map: FeatureMap,
    pub estimate: EstimateRecord,
    /// Dual multiplier of the stochastic solver.
    pub dual_lambda: Option<f64>,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub rows: usize,
    pub log_loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub rmse: Option<f64>,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtReport {
    /// `null` when no coupling respects the labels.
    pub value: Option<f64>,
    pub feasible: bool,
    pub plan: Vec<Vec<f64>>,
    pub config_digest: String,
}

fn learn_lambda(data: &Dataset, map: &FeatureMap, cfg: &MetricLearnConfig) -> Result<PsdMatrix, CliError> {
    let pairs = build_pair_sets(data, cfg.k)?;
    let learned = learn_mahalanobis(data, &pairs, map, cfg)?;
    Ok(pd_floor(&learned.lambda, cfg.pd_floor_gamma)?)
}

fn cmd_metric_learn(st: &Settings, map: Option<MapArg>, stdout: &mut dyn Write) -> Result<(), CliError> {
    let data = load_data(st)?;
    let cfg = metric_config(st)?;
    let map = feature_map(map, data.dim());
    let pairs = build_pair_sets(&data, cfg.k)?;
    let learned = learn_mahalanobis(&data, &pairs, &map, &cfg)?;
    let mut buf = Vec::new();
    write_matrix_csv(learned.lambda.matrix(), &mut buf)?;
    write_output(st.get::<PathBuf>("out")?.as_deref(), stdout, &buf)
}

fn cmd_train(st: &Settings, digest: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    let data = load_data(st)?;
    let model = st.choice::<ModelArg>("model")?.unwrap_or(ModelArg::Lr);
    let delta: f64 = st.or("delta", 0.0)?;
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(CliError::Usage(format!("delta must be finite and nonnegative, got {delta}")));
    }
    let default_map = if model == ModelArg::DroNl { Some(MapArg::LinearQuadratic) } else { None };
    let map_kind = st.choice::<MapArg>("feature_map")?.or(default_map);
    if model == ModelArg::DroNl && map_kind == Some(MapArg::Identity) {
        return Err(CliError::Usage("dro-nl uses the linear-quadratic feature map".into()));
    }
    let map = feature_map(map_kind, data.dim());
    if matches!(model, ModelArg::Lr | ModelArg::Lrl1) && map.kind != FeatureMapKind::Identity {
        return Err(CliError::Usage("lr and lrl1 work on the raw features".into()));
    }
    let lambda = || -> Result<(PsdMatrix, &'static str), CliError> {
        match st.get::<PathBuf>("lambda_file")? {
            Some(path) => Ok((read_matrix_csv(&path)?, "file")),
            None => Ok((learn_lambda(&data, &map, &metric_config(st)?)?, "learned")),
        }
    };
    let name = model.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
    let mapped = data.with_features(map.apply_rows(&data.features)?);
    let (record, dual_lambda) = match model {
        ModelArg::Lr => (solve_baseline_logistic(&data, BaselinePenalty::None)?.to_record(0.0, "logistic", "none"), None),
        ModelArg::Lrl1 => (solve_baseline_logistic(&data, BaselinePenalty::L1(delta))?.to_record(delta, "logistic", "none"), None),
        ModelArg::DroL | ModelArg::DroNl => {
            let (lam, source) = lambda()?;
            if data.task == Task::Classification {
                let problem = AdaptiveRegProblem::new(AdaptiveLoss::Logistic, lam, delta)?;
                (solve_adaptive_logistic(&problem, &mapped)?.to_record(delta, "logistic", source), None)
            } else {
                let problem = AdaptiveRegProblem::new(AdaptiveLoss::SqrtLeastSquares, lam, delta)?;
                (solve_adaptive_sqrt_ls(&problem, &mapped)?.to_record(delta, "sqrt-least-squares", source), None)
            }
        }
        ModelArg::DroSgd => {
            let (lam, source) = lambda()?;
            let loss = if data.task == Task::Classification { Loss::Logistic } else { Loss::Squared };
            let objective = DualObjective::new(CostFunction::Mahalanobis { lambda: lam }, loss, delta)?;
            let sd = SmoothingConfig::default();
            let s_cfg = SmoothingConfig {
                epsilon: st.or("epsilon", sd.epsilon)?,
                sampler_sigma: st.or("sampler_sigma", sd.sampler_sigma)?,
                sampler_center: SamplerCenter::DataPoint,
                samples_l: st.or("samples", sd.samples_l)?,
            };
            let gd = SgdConfig::default();
            let step = st.or("step", gd.step_beta)?;
            let g_cfg = SgdConfig {
                batch_size: st.or("batch_size", gd.batch_size.min(data.len()))?,
                step_beta: step,
                step_lambda: step,
                max_iters: st.or("max_iters", gd.max_iters)?,
                warmup: st.or("warmup", gd.warmup)?,
                seed: st.seed(),
                ..gd
            };
            let out = match st.get::<PathBuf>("trace")? {
                Some(path) => {
                    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
                    let out = objective.sgd_solve(&mapped, &s_cfg, &g_cfg, Some(&mut f))?;
                    f.flush()?;
                    out
                }
                None => objective.sgd_solve(&mapped, &s_cfg, &g_cfg, None)?,
            };
            let loss_name = if loss == Loss::Logistic { "logistic" } else { "squared" };
            (out.estimate.to_record(delta, loss_name, source), Some(out.lambda))
        }
    };
    let trained = TrainedModel {
        model: name,
        task: data.task,
        feature_map: map,
        estimate: record,
        dual_lambda,
        config_digest: digest.to_string(),
    };
    let text = serde_json::to_string_pretty(&trained)? + "\n";
    write_output(st.get::<PathBuf>("out")?.as_deref(), stdout, text.as_bytes())
}

fn cmd_eval(st: &Settings, digest: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    let path: PathBuf = st.require("estimate")?;
    let text = std::fs::read_to_string(&path)?;
    let trained: TrainedModel = serde_json::from_str(&text)?;
    let data = load_data(st)?;
    if data.dim() != trained.feature_map.input_dim {
        return Err(CliError::runtime(
            "dimension",
            format!("estimate expects {} features, data has {}", trained.feature_map.input_dim, data.dim()),
        ));
    }
    let x = trained.feature_map.apply_rows(&data.features)?;
    let beta = DVector::from_vec(trained.estimate.beta.clone());
    if beta.len() != x.ncols() {
        return Err(CliError::runtime("dimension", format!("estimate has {} coefficients, features have {}", beta.len(), x.ncols())));
    }
    let report = match data.task {
        Task::Classification => EvalReport {
            model: trained.model,
            rows: data.len(),
            log_loss: Some(mean_logistic_loss(&x, &data.labels, &beta)),
            accuracy: Some(accuracy(&x, &data.labels, &beta)),
            rmse: None,
            config_digest: digest.to_string(),
        },
        Task::Regression => EvalReport {
            model: trained.model,
            rows: data.len(),
            log_loss: None,
            accuracy: None,
            rmse: Some(rmse(&x, &data.labels, &beta)),
            config_digest: digest.to_string(),
        },
    };
    let text = serde_json::to_string_pretty(&report)? + "\n";
    write_output(st.get::<PathBuf>("out")?.as_deref(), stdout, text.as_bytes())
}

/// Reads labeled atoms: every column except the label and weight columns is a
/// coordinate.
pub fn read_atoms(path: &Path, label_column: &str, weight_column: Option<&str>) -> Result<DiscreteDistribution, CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header = rdr.headers()?.clone();
    let find = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| CliError::runtime("atoms", format!("{}: no column {name:?}", path.display())))
    };
    let li = find(label_column)?;
    let wi = weight_column.map(find).transpose()?;
    let mut atoms = Vec::new();
    let mut weights = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let mut x = Vec::new();
        let mut y = 0.0;
        let mut w = 1.0;
        for (i, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| CliError::runtime("atoms", format!("{}: non-numeric cell {cell:?}", path.display())))?;
            if i == li {
                y = v;
            } else if Some(i) == wi {
                w = v;
            } else {
                x.push(v);
            }
        }
        atoms.push(Point::new(x, y));
        weights.push(w);
    }
    Ok(DiscreteDistribution::normalized(atoms, weights)?)
}

fn cmd_ot(st: &Settings, digest: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    let label: String = st.or("label_column", "label".to_string())?;
    let weight: Option<String> = st.get("weight_column")?;
    let pd = read_atoms(&st.require::<PathBuf>("p")?, &label, weight.as_deref())?;
    let qd = read_atoms(&st.require::<PathBuf>("q")?, &label, weight.as_deref())?;
    let cost = match st.choice::<CostArg>("cost")?.unwrap_or(CostArg::SqEuclidean) {
        CostArg::SqEuclidean => CostFunction::squared_euclidean(),
        CostArg::Mahalanobis => CostFunction::Mahalanobis { lambda: read_matrix_csv(&st.require::<PathBuf>("lambda_file")?)? },
        CostArg::MahalanobisNorm => {
            CostFunction::MahalanobisNorm { lambda: read_matrix_csv(&st.require::<PathBuf>("lambda_file")?)? }
        }
    };
    let plan = ot_discrepancy(&cost, &pd, &qd)?;
    let feasible = plan.feasibility == Feasibility::Finite;
    let report = OtReport {
        value: if feasible { Some(plan.value) } else { None },
        feasible,
        plan: plan.plan,
        config_digest: digest.to_string(),
    };
    let text = serde_json::to_string_pretty(&report)? + "\n";
    write_output(st.get::<PathBuf>("out")?.as_deref(), stdout, text.as_bytes())
}

fn cmd_benchmark(st: &Settings, stderr: &mut dyn Write) -> Result<(), CliError> {
    let mut kv = st.0.clone();
    let out_dir: PathBuf = kv.remove("out").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    let cfg = ExperimentConfig::from_kv(&kv).map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let outcome = harness::run_benchmark(&cfg)?;
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("report.json"), render_report(&outcome.report, ReportFormat::Json)?)?;
    std::fs::write(out_dir.join("report.md"), render_report(&outcome.report, ReportFormat::Markdown)?)?;
    let mut records = String::new();
    for r in &outcome.records {
        records.push_str(&serde_json::to_string(r)?);
        records.push('\n');
    }
    std::fs::write(out_dir.join("records.jsonl"), records)?;
    writeln!(stderr, "wrote {}", out_dir.display())?;
    Ok(())
}

fn cmd_synth(st: &Settings, stdout: &mut dyn Write) -> Result<(), CliError> {
    let data = harness::synth_figure1b(st.require("n")?, st.or("d", 2)?, st.or("coef", 10.0)?, st.seed())?;
    let mut named = data.clone();
    named.feature_names = (1..=data.dim()).map(|j| format!("x{j}")).collect();
    let mut buf = Vec::new();
    harness::write_csv(&named, "label", &mut buf)?;
    write_output(st.get::<PathBuf>("out")?.as_deref(), stdout, &buf)
}

fn dispatch(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::MetricLearn { common, data, feature_map, metric } => {
            let mut flags = data_flags(&data);
            flags.extend(metric_flags(&metric));
            flags.push(("feature_map", enum_name(&feature_map)));
            flags.push(("out", p(&common.out)));
            let allowed = keys(&[DATA_KEYS, METRIC_KEYS, &["feature_map"]]);
            let st = Settings::resolve(common.config.as_deref(), &allowed, flags, common.seed)?;
            writeln!(stderr, "config digest: {}", st.digest("metric-learn"))?;
            let map = st.choice::<MapArg>("feature_map")?;
            cmd_metric_learn(&st, map, stdout)
        }
        Command::Train {
            common,
            data,
            model,
            delta,
            lambda_file,
            feature_map,
            metric,
            epsilon,
            samples,
            sampler_sigma,
            batch_size,
            max_iters,
            step,
            warmup,
            trace,
        } => {
            let mut flags = data_flags(&data);
            flags.extend(metric_flags(&metric));
            flags.extend([
                ("model", enum_name(&model)),
                ("delta", s(&delta)),
                ("lambda_file", p(&lambda_file)),
                ("feature_map", enum_name(&feature_map)),
                ("epsilon", s(&epsilon)),
                ("samples", s(&samples)),
                ("sampler_sigma", s(&sampler_sigma)),
                ("batch_size", s(&batch_size)),
                ("max_iters", s(&max_iters)),
                ("step", s(&step)),
                ("warmup", s(&warmup)),
                ("trace", p(&trace)),
                ("out", p(&common.out)),
            ]);
            let train_keys: &[&str] = &[
                "model", "delta", "lambda_file", "feature_map", "epsilon", "samples", "sampler_sigma", "batch_size", "max_iters",
                "step", "warmup", "trace",
            ];
            let allowed = keys(&[DATA_KEYS, METRIC_KEYS, train_keys]);
            let st = Settings::resolve(common.config.as_deref(), &allowed, flags, common.seed)?;
            let digest = st.digest("train");
            writeln!(stderr, "config digest: {digest}")?;
            cmd_train(&st, &digest, stdout)
        }
        Command::Eval { common, data, estimate } => {
            let mut flags = data_flags(&data);
            flags.extend([("estimate", p(&estimate)), ("out", p(&common.out))]);
            let allowed = keys(&[DATA_KEYS, &["estimate"]]);
            let st = Settings::resolve(common.config.as_deref(), &allowed, flags, common.seed)?;
            let digest = st.digest("eval");
            writeln!(stderr, "config digest: {digest}")?;
            cmd_eval(&st, &digest, stdout)
        }
        Command::Ot { common, p: pp, q, cost, lambda_file, label_column, weight_column } => {
            let flags = vec![
                ("p", p(&pp)),
                ("q", p(&q)),
                ("cost", enum_name(&cost)),
                ("lambda_file", p(&lambda_file)),
                ("label_column", s(&label_column)),
                ("weight_column", s(&weight_column)),
                ("out", p(&common.out)),
            ];
            let allowed = keys(&[&["p", "q", "cost", "lambda_file", "label_column", "weight_column"]]);
            let st = Settings::resolve(common.config.as_deref(), &allowed, flags, common.seed)?;
            let digest = st.digest("ot");
            writeln!(stderr, "config digest: {digest}")?;
            cmd_ot(&st, &digest, stdout)
        }
        Command::Benchmark { common, data, models, delta_grid, folds, repeats, train_size, test_cap, metric } => {
            let mut flags = data_flags(&data);
            flags.extend(metric_flags(&metric));
            flags.extend([
                ("models", s(&models)),
                ("delta_grid", s(&delta_grid)),
                ("folds", s(&folds)),
                ("repeats", s(&repeats)),
                ("train_size", s(&train_size)),
                ("test_cap", s(&test_cap)),
                ("out", p(&common.out)),
            ]);
            let bench_keys: &[&str] = &[
                "models", "delta_grid", "folds", "repeats", "train_size", "test_cap", "synthetic_n", "synthetic_d", "synthetic_coef",
                "synthetic_seed",
            ];
            let allowed = keys(&[DATA_KEYS, METRIC_KEYS, bench_keys]);
            let st = Settings::resolve(common.config.as_deref(), &allowed, flags, common.seed)?;
            let mut kv = st.0.clone();
            kv.remove("out");
            let cfg = ExperimentConfig::from_kv(&kv).map_err(|e| CliError::Usage(e.to_string()))?;
            writeln!(stderr, "config digest: {}", cfg.digest())?;
            cmd_benchmark(&st, stderr)
        }
        Command::Synth { common, n, d, coef } => {
            let flags = vec![("n", s(&n)), ("d", s(&d)), ("coef", s(&coef)), ("out", p(&common.out))];
            let allowed = keys(&[&["n", "d", "coef"]]);
            let st = Settings::resolve(common.config.as_deref(), &allowed, flags, common.seed)?;
            writeln!(stderr, "config digest: {}", st.digest("synth"))?;
            cmd_synth(&st, stdout)
        }
    }
}

/// Machine-readable runtime error written to stdout.
#[derive(Debug, Serialize)]
struct ErrorJson<'a> {
    error: &'a str,
    kind: &'a str,
    exit_code: i32,
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let shown = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = if shown { write!(stdout, "{}", e.render()) } else { write!(stderr, "{}", e.render()) };
            return if shown { 0 } else { 1 };
        }
    };
    match dispatch(cli, stdout, stderr) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}\n\nRun with --help for usage.");
            1
        }
        Err(e @ CliError::Runtime { .. }) => {
            let CliError::Runtime { kind, message } = &e else { unreachable!() };
            let body = ErrorJson { error: message, kind, exit_code: 2 };
            let _ = writeln!(stdout, "{}", serde_json::to_string(&body).unwrap_or_default());
            2
        }
    }
}
