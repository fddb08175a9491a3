//! Data ingestion, splits, cross-validation over `δ` and repeated-split
//! benchmarks of LR, LRL1, DRO-L and DRO-NL.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::closed_form::{
    accuracy, mean_logistic_loss, solve_adaptive_logistic, solve_baseline_logistic, AdaptiveLoss, AdaptiveRegProblem,
    BaselinePenalty, SolveError,
};
use crate::data::{DataError, Dataset, Standardization, Task};
use crate::linalg::PsdMatrix;
use crate::loss::sigmoid;
use crate::metric::{build_pair_sets, learn_mahalanobis, pd_floor, FeatureMap, MetricError, MetricLearnConfig};
use crate::smoothed::substream_seed;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("label column {0:?} not found in header")]
    MissingLabelColumn(String),
    #[error("label {value:?} at row {row} cannot be mapped to -1/+1 (positive label {positive:?}, negative already {negative:?})")]
    UnmappableLabel { row: usize, value: String, positive: String, negative: String },
    #[error("no rows left after dropping {dropped} rows with missing values")]
    EmptyAfterCleaning { dropped: usize },
    #[error("every feature is constant on the training set")]
    AllConstant,
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("every delta in the grid failed during cross-validation")]
    AllDeltasInvalid,
    #[error("{model}: {failed} of {total} repeats failed (limit 10%); first error: {first}")]
    TooManyFailures { model: String, failed: usize, total: usize, first: String },
    #[error("leakage: {0} is derived from test rows")]
    Leakage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// A parsed CSV together with the number of rows dropped for missing values.
#[derive(Debug, Clone)]
pub struct LoadedCsv {
    pub dataset: Dataset,
    pub dropped_rows: usize,
}

/// Reads a CSV with a header row. With `positive_label` the label column is
/// mapped to `+1` for that value and `-1` for the single other value present;
/// without it labels are parsed as reals (regression). Rows with an empty or
/// non-numeric feature cell are dropped and counted.
pub fn load_csv(path: &Path, label_column: &str, positive_label: Option<&str>) -> Result<LoadedCsv, HarnessError> {
    let file = std::fs::File::open(path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
    parse_csv(file, label_column, positive_label)
}

pub fn parse_csv<R: Read>(reader: R, label_column: &str, positive_label: Option<&str>) -> Result<LoadedCsv, HarnessError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| HarnessError::MissingLabelColumn(label_column.to_string()))?;
    let names: Vec<String> = header.iter().enumerate().filter(|(i, _)| *i != label_idx).map(|(_, h)| h.to_string()).collect();
    let d = names.len();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    let mut dropped = 0;
    let mut negative: Option<String> = None;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut feats = Vec::with_capacity(d);
        let mut missing = false;
        for (i, cell) in rec.iter().enumerate() {
            if i == label_idx {
                continue;
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => feats.push(v),
                _ => missing = true,
            }
        }
        let raw = rec.get(label_idx).unwrap_or("");
        if missing || feats.len() != d || raw.is_empty() {
            dropped += 1;
            continue;
        }
        let y = match positive_label {
            Some(pos) if raw == pos => 1.0,
            Some(pos) => match &negative {
                None => {
                    negative = Some(raw.to_string());
                    -1.0
                }
                Some(neg) if neg == raw => -1.0,
                Some(neg) => {
                    return Err(HarnessError::UnmappableLabel {
                        row,
                        value: raw.to_string(),
                        positive: pos.to_string(),
                        negative: neg.clone(),
                    })
                }
            },
            None => match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => v,
                _ => {
                    dropped += 1;
                    continue;
                }
            },
        };
        values.extend(feats);
        labels.push(y);
        rows.push(row);
    }
    if labels.is_empty() {
        return Err(HarnessError::EmptyAfterCleaning { dropped });
    }
    let n = labels.len();
    let task = if positive_label.is_some() { Task::Classification } else { Task::Regression };
    let mut dataset = Dataset::new(DMatrix::from_row_slice(n, d, &values), DVector::from_vec(labels), task)?;
    dataset.rows = rows;
    dataset.feature_names = names;
    Ok(LoadedCsv { dataset, dropped_rows: dropped })
}

/// Writes features and label as CSV with a header.
pub fn write_csv<W: std::io::Write>(data: &Dataset, label_column: &str, out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = data.feature_names.clone();
    header.push(label_column.to_string());
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(format!("{}", data.labels[i]));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| HarnessError::Csv(e.into()))?;
    Ok(())
}

/// Training set and other sets standardized with the training statistics.
#[derive(Debug, Clone)]
pub struct Standardized {
    pub train: Dataset,
    pub others: Vec<Dataset>,
    /// Original column indices dropped for zero variance.
    pub dropped_columns: Vec<usize>,
}

/// Centers and scales every column by the training mean and (population)
/// standard deviation. Zero-variance columns are dropped from all sets.
pub fn standardize(train: &Dataset, others: &[&Dataset]) -> Result<Standardized, HarnessError> {
    let n = train.len();
    if n == 0 {
        return Err(DataError::Empty.into());
    }
    let d = train.dim();
    for o in others {
        if o.dim() != d {
            return Err(HarnessError::Config(format!("feature count {} differs from training {}", o.dim(), d)));
        }
    }
    let mut kept = Vec::new();
    let mut mean = Vec::new();
    let mut scale = Vec::new();
    let mut dropped_columns = Vec::new();
    for j in 0..d {
        let col = train.features.column(j);
        let m = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd <= 1e-12 * (1.0 + m.abs()) {
            dropped_columns.push(j);
        } else {
            kept.push(j);
            mean.push(m);
            scale.push(sd);
        }
    }
    if kept.is_empty() {
        return Err(HarnessError::AllConstant);
    }
    let stats = Standardization { kept: kept.clone(), mean, scale, source_rows: train.rows.clone() };
    let apply = |ds: &Dataset| -> Dataset {
        let f = DMatrix::from_fn(ds.len(), kept.len(), |i, k| (ds.features[(i, kept[k])] - stats.mean[k]) / stats.scale[k]);
        let mut out = ds.with_features(f);
        out.feature_names = kept.iter().map(|&j| ds.feature_names[j].clone()).collect();
        out.standardization = Some(stats.clone());
        out
    };
    Ok(Standardized { train: apply(train), others: others.iter().map(|o| apply(o)).collect(), dropped_columns })
}

/// The default `δ` grid: 0 and 12 log-spaced points from `1e-4` to `1e1`.
pub fn default_delta_grid() -> Vec<f64> {
    let mut g = vec![0.0];
    g.extend((0..12).map(|k| 10f64.powf(-4.0 + 5.0 * k as f64 / 11.0)));
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "LRL1")]
    Lrl1,
    #[serde(rename = "DRO-L")]
    DroL,
    #[serde(rename = "DRO-NL")]
    DroNl,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Lr => "LR",
            ModelKind::Lrl1 => "LRL1",
            ModelKind::DroL => "DRO-L",
            ModelKind::DroNl => "DRO-NL",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lr" => Some(ModelKind::Lr),
            "lrl1" => Some(ModelKind::Lrl1),
            "dro-l" => Some(ModelKind::DroL),
            "dro-nl" => Some(ModelKind::DroNl),
            _ => None,
        }
    }

    pub fn uses_delta(&self) -> bool {
        !matches!(self, ModelKind::Lr)
    }

    pub fn learns_metric(&self) -> bool {
        matches!(self, ModelKind::DroL | ModelKind::DroNl)
    }

    pub fn feature_map(&self, d: usize) -> FeatureMap {
        match self {
            ModelKind::DroNl => FeatureMap::linear_quadratic(d),
            _ => FeatureMap::identity(d),
        }
    }
}

/// A learned cost matrix (after the positive-definite floor) and the rows it
/// was learned from.
#[derive(Debug, Clone)]
pub struct CostModel {
    pub lambda: PsdMatrix,
    pub map: FeatureMap,
    pub source_rows: Vec<usize>,
}

/// Builds k-NN pair sets on `train`, learns `Λ` in the model's feature space
/// and applies the positive-definite floor.
pub fn learn_cost(model: ModelKind, train: &Dataset, cfg: &MetricLearnConfig) -> Result<CostModel, HarnessError> {
    let map = model.feature_map(train.dim());
    let pairs = build_pair_sets(train, cfg.k)?;
    let learned = learn_mahalanobis(train, &pairs, &map, cfg)?;
    let lambda = pd_floor(&learned.lambda, cfg.pd_floor_gamma)?;
    Ok(CostModel { lambda, map, source_rows: learned.source_rows })
}

/// A fitted linear classifier on (possibly mapped) features.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub model: ModelKind,
    pub delta: f64,
    pub beta: DVector<f64>,
    pub map: FeatureMap,
    pub converged: bool,
    pub cost_rows: Vec<usize>,
}

impl FittedModel {
    pub fn features(&self, data: &Dataset) -> Result<DMatrix<f64>, HarnessError> {
        Ok(self.map.apply_rows(&data.features)?)
    }

    pub fn log_loss(&self, data: &Dataset) -> Result<f64, HarnessError> {
        Ok(mean_logistic_loss(&self.features(data)?, &data.labels, &self.beta))
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64, HarnessError> {
        Ok(accuracy(&self.features(data)?, &data.labels, &self.beta))
    }
}

/// Fits `model` at a given `δ`. DRO models need the cost learned on the same
/// training rows.
pub fn fit_model(model: ModelKind, train: &Dataset, delta: f64, cost: Option<&CostModel>) -> Result<FittedModel, HarnessError> {
    let d = train.dim();
    let (beta, converged, map, cost_rows) = match model {
        ModelKind::Lr => {
            let e = solve_baseline_logistic(train, BaselinePenalty::None)?;
            (e.beta, e.converged, FeatureMap::identity(d), Vec::new())
        }
        ModelKind::Lrl1 => {
            let e = solve_baseline_logistic(train, BaselinePenalty::L1(delta))?;
            (e.beta, e.converged, FeatureMap::identity(d), Vec::new())
        }
        ModelKind::DroL | ModelKind::DroNl => {
            let cost = cost.ok_or_else(|| HarnessError::Config(format!("{} needs a learned cost", model.name())))?;
            let mapped = train.with_features(cost.map.apply_rows(&train.features)?);
            let problem = AdaptiveRegProblem::new(AdaptiveLoss::Logistic, cost.lambda.clone(), delta)?;
            let e = solve_adaptive_logistic(&problem, &mapped)?;
            (e.beta, e.converged, cost.map, cost.source_rows.clone())
        }
    };
    Ok(FittedModel { model, delta, beta, map, converged, cost_rows })
}

/// Outcome of cross-validation: the chosen `δ` and the mean validation loss
/// of every grid point (`None` when some fold failed).
#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub chosen_delta: f64,
    pub mean_losses: Vec<Option<f64>>,
}

/// Picks `δ` by mean validation log-loss over the folds of `fold_of`
/// (`fold_of[i]` is the fold of training row `i`). Ties go to the smaller `δ`.
/// DRO models learn `Λ` on each fold's training part only.
pub fn cross_validate_delta(
    train: &Dataset,
    model: ModelKind,
    delta_grid: &[f64],
    fold_of: &[usize],
    metric_cfg: &MetricLearnConfig,
) -> Result<CvResult, HarnessError> {
    if delta_grid.is_empty() {
        return Err(HarnessError::Config("delta grid is empty".into()));
    }
    if fold_of.len() != train.len() {
        return Err(HarnessError::Config("fold assignment does not cover the training set".into()));
    }
    let folds = fold_of.iter().copied().max().map_or(0, |m| m + 1);
    if folds < 2 {
        return Err(HarnessError::Config("need at least 2 folds".into()));
    }
    let mut sums: Vec<Option<f64>> = vec![Some(0.0); delta_grid.len()];
    for f in 0..folds {
        let fit_idx: Vec<usize> = (0..train.len()).filter(|&i| fold_of[i] != f).collect();
        let val_idx: Vec<usize> = (0..train.len()).filter(|&i| fold_of[i] == f).collect();
        let fit = train.subset(&fit_idx)?;
        let val = train.subset(&val_idx)?;
        let cost = if model.learns_metric() { learn_cost(model, &fit, metric_cfg).ok() } else { None };
        for (k, &delta) in delta_grid.iter().enumerate() {
            let Some(acc) = sums[k] else { continue };
            let loss = if model.learns_metric() && cost.is_none() {
                None
            } else {
                fit_model(model, &fit, delta, cost.as_ref()).ok().and_then(|m| m.log_loss(&val).ok()).filter(|l| l.is_finite())
            };
            sums[k] = loss.map(|l| acc + l);
        }
    }
    let mean_losses: Vec<Option<f64>> = sums.iter().map(|s| s.map(|v| v / folds as f64)).collect();
    let mut best: Option<(f64, f64)> = None;
    for (k, m) in mean_losses.iter().enumerate() {
        if let Some(loss) = *m {
            let delta = delta_grid[k];
            best = match best {
                None => Some((loss, delta)),
                Some((bl, bd)) if loss < bl || (loss == bl && delta < bd) => Some((loss, delta)),
                keep => keep,
            };
        }
    }
    let (_, chosen_delta) = best.ok_or(HarnessError::AllDeltasInvalid)?;
    Ok(CvResult { chosen_delta, mean_losses })
}

/// Train/test indices and fold labels for one repeat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Fold of each training position.
    pub fold_of: Vec<usize>,
}

/// Uniform splits without replacement, fully determined by the seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub splits: Vec<Split>,
}

impl SplitPlan {
    pub fn new(n: usize, train_size: usize, test_cap: Option<usize>, repeats: usize, folds: usize, seed: u64) -> Result<Self, HarnessError> {
        if train_size == 0 || train_size >= n {
            return Err(HarnessError::Config(format!("train size {train_size} must be in 1..{n}")));
        }
        if folds < 2 || folds > train_size {
            return Err(HarnessError::Config(format!("folds {folds} must be in 2..={train_size}")));
        }
        let splits = (0..repeats)
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, r as u64, 0));
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng);
                let train = idx[..train_size].to_vec();
                let rest = &idx[train_size..];
                let test = rest[..test_cap.unwrap_or(rest.len()).min(rest.len())].to_vec();
                let mut order: Vec<usize> = (0..train_size).collect();
                order.shuffle(&mut rng);
                let mut fold_of = vec![0; train_size];
                for (k, &pos) in order.iter().enumerate() {
                    fold_of[pos] = k % folds;
                }
                Split { train, test, fold_of }
            })
            .collect();
        Ok(Self { splits })
    }
}

/// Where the data for a benchmark comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DatasetSpec {
    Csv { path: PathBuf, label_column: String, positive_label: String },
    Synthetic { n: usize, d: usize, informative_coef: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub models: Vec<ModelKind>,
    pub delta_grid: Vec<f64>,
    pub folds: usize,
    pub repeats: usize,
    pub train_size: usize,
    /// Largest test set per repeat; the rest of the data when `None`.
    pub test_cap: Option<usize>,
    pub seed: u64,
    pub metric_learn: MetricLearnConfig,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSpec, train_size: usize) -> Self {
        Self {
            dataset,
            models: vec![ModelKind::Lr, ModelKind::Lrl1, ModelKind::DroL, ModelKind::DroNl],
            delta_grid: default_delta_grid(),
            folds: 5,
            repeats: 200,
            train_size,
            test_cap: None,
            seed: 0,
            metric_learn: MetricLearnConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.folds < 2 {
            return Err(HarnessError::Config("folds must be at least 2".into()));
        }
        if self.repeats == 0 {
            return Err(HarnessError::Config("repeats must be positive".into()));
        }
        if self.models.iter().any(|m| m.uses_delta()) && self.delta_grid.is_empty() {
            return Err(HarnessError::Config("penalized models need a nonempty delta grid".into()));
        }
        if self.delta_grid.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(HarnessError::Config("delta grid values must be finite and nonnegative".into()));
        }
        self.metric_learn.validate()?;
        Ok(())
    }

    /// Flat `key=value` lines in a fixed key order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        match &self.dataset {
            DatasetSpec::Csv { path, label_column, positive_label } => {
                let _ = writeln!(s, "data={}", path.display());
                let _ = writeln!(s, "label_column={label_column}");
                let _ = writeln!(s, "positive_label={positive_label}");
            }
            DatasetSpec::Synthetic { n, d, informative_coef, seed } => {
                let _ = writeln!(s, "synthetic_n={n}");
                let _ = writeln!(s, "synthetic_d={d}");
                let _ = writeln!(s, "synthetic_coef={informative_coef:?}");
                let _ = writeln!(s, "synthetic_seed={seed}");
            }
        }
        let models: Vec<&str> = self.models.iter().map(|m| m.name()).collect();
        let grid: Vec<String> = self.delta_grid.iter().map(|d| format!("{d:?}")).collect();
        let _ = writeln!(s, "models={}", models.join(","));
        let _ = writeln!(s, "delta_grid={}", grid.join(","));
        let _ = writeln!(s, "folds={}", self.folds);
        let _ = writeln!(s, "repeats={}", self.repeats);
        let _ = writeln!(s, "train_size={}", self.train_size);
        if let Some(cap) = self.test_cap {
            let _ = writeln!(s, "test_cap={cap}");
        }
        let _ = writeln!(s, "seed={}", self.seed);
        let m = &self.metric_learn;
        let _ = writeln!(s, "metric_k={}", m.k);
        let _ = writeln!(s, "metric_lambda_bar={:?}", m.lambda_bar);
        let _ = writeln!(s, "metric_step_size={:?}", m.step_size);
        let _ = writeln!(s, "metric_max_iters={}", m.max_iters);
        let _ = writeln!(s, "metric_pd_floor_gamma={:?}", m.pd_floor_gamma);
        s
    }

    /// Reads the keys written by [`to_kv`](Self::to_kv). Unknown keys are an
    /// error; missing keys keep their defaults.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self, HarnessError> {
        fn num<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, HarnessError> {
            kv.get(key)
                .map(|v| v.parse::<T>().map_err(|_| HarnessError::Config(format!("{key}: cannot parse {v:?}"))))
                .transpose()
        }
        const KNOWN: &[&str] = &[
            "data", "label_column", "positive_label", "synthetic_n", "synthetic_d", "synthetic_coef", "synthetic_seed",
            "models", "delta_grid", "folds", "repeats", "train_size", "test_cap", "seed", "metric_k", "metric_lambda_bar",
            "metric_step_size", "metric_max_iters", "metric_pd_floor_gamma",
        ];
        if let Some(k) = kv.keys().find(|k| !KNOWN.contains(&k.as_str())) {
            return Err(HarnessError::Config(format!("unknown key {k:?}")));
        }
        let dataset = if let Some(path) = kv.get("data") {
            DatasetSpec::Csv {
                path: PathBuf::from(path),
                label_column: kv.get("label_column").cloned().unwrap_or_else(|| "label".into()),
                positive_label: kv.get("positive_label").cloned().unwrap_or_else(|| "1".into()),
            }
        } else if let Some(n) = num::<usize>(kv, "synthetic_n")? {
            DatasetSpec::Synthetic {
                n,
                d: num(kv, "synthetic_d")?.unwrap_or(2),
                informative_coef: num(kv, "synthetic_coef")?.unwrap_or(10.0),
                seed: num(kv, "synthetic_seed")?.unwrap_or(0),
            }
        } else {
            return Err(HarnessError::Config("need either data=<path> or synthetic_n=<n>".into()));
        };
        let train_size = num(kv, "train_size")?.ok_or_else(|| HarnessError::Config("train_size is required".into()))?;
        let mut cfg = Self::new(dataset, train_size);
        if let Some(models) = kv.get("models") {
            cfg.models = models
                .split(',')
                .map(|m| ModelKind::parse(m.trim()).ok_or_else(|| HarnessError::Config(format!("unknown model {m:?}"))))
                .collect::<Result<_, _>>()?;
        }
        if let Some(grid) = kv.get("delta_grid") {
            if grid.trim() != "default" {
                cfg.delta_grid = grid
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| HarnessError::Config(format!("delta_grid: cannot parse {v:?}"))))
                    .collect::<Result<_, _>>()?;
            }
        }
        cfg.folds = num(kv, "folds")?.unwrap_or(cfg.folds);
        cfg.repeats = num(kv, "repeats")?.unwrap_or(cfg.repeats);
        cfg.test_cap = num(kv, "test_cap")?;
        cfg.seed = num(kv, "seed")?.unwrap_or(cfg.seed);
        let m = &mut cfg.metric_learn;
        m.k = num(kv, "metric_k")?.unwrap_or(m.k);
        m.lambda_bar = num(kv, "metric_lambda_bar")?.unwrap_or(m.lambda_bar);
        m.step_size = num(kv, "metric_step_size")?.unwrap_or(m.step_size);
        m.max_iters = num(kv, "metric_max_iters")?.unwrap_or(m.max_iters);
        m.pd_floor_gamma = num(kv, "metric_pd_floor_gamma")?.unwrap_or(m.pd_floor_gamma);
        m.seed = cfg.seed;
        Ok(cfg)
    }

    /// SHA-256 of the canonical `key=value` rendering.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_kv().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load_dataset(&self) -> Result<Dataset, HarnessError> {
        match &self.dataset {
            DatasetSpec::Csv { path, label_column, positive_label } => {
                Ok(load_csv(path, label_column, Some(positive_label))?.dataset)
            }
            DatasetSpec::Synthetic { n, d, informative_coef, seed } => synth_figure1b(*n, *d, *informative_coef, *seed),
        }
    }
}

/// `X ∼ 𝒩(0, I_d)` and `P(Y = 1 | x) = 1 / (1 + exp(−b x₁))`: only the first
/// coordinate carries signal.
pub fn synth_figure1b(n: usize, d: usize, informative_coef: f64, seed: u64) -> Result<Dataset, HarnessError> {
    if d < 2 {
        return Err(HarnessError::Config(format!("need d >= 2, got {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let p = sigmoid(informative_coef * row[0]);
        labels.push(if rng.gen::<f64>() < p { 1.0 } else { -1.0 });
        values.extend(row);
    }
    Ok(Dataset::classification(DMatrix::from_row_slice(n, d, &values), DVector::from_vec(labels))?)
}

/// Rows each derived quantity of a repeat was computed from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub standardization_rows: Vec<usize>,
    pub cost_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

impl Provenance {
    pub fn check(&self) -> Result<(), HarnessError> {
        let test: std::collections::BTreeSet<usize> = self.test_rows.iter().copied().collect();
        if self.standardization_rows.iter().any(|r| test.contains(r)) {
            return Err(HarnessError::Leakage("standardization".into()));
        }
        if self.cost_rows.iter().any(|r| test.contains(r)) {
            return Err(HarnessError::Leakage("learned cost".into()));
        }
        Ok(())
    }
}

/// One model on one repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatRecord {
    pub repeat: usize,
    pub model: ModelKind,
    pub outcome: Result<RepeatMetrics, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatMetrics {
    pub delta: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub accuracy: f64,
    pub converged: bool,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample mean and (n − 1) standard deviation; the deviation is 0 for a
    /// single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub train_loss: MeanStd,
    pub test_loss: MeanStd,
    pub accuracy: MeanStd,
    pub completed_repeats: usize,
    pub failed_repeats: usize,
    /// How often each `δ` was chosen, in increasing `δ` order.
    pub chosen_delta: Vec<(f64, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub dataset: String,
    pub num_predictors: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub test_cap: Option<usize>,
    pub repeats: usize,
    pub folds: usize,
    pub sampling: String,
    pub seed: u64,
}

/// Versioned benchmark report: `{version, config_digest, models, metadata}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub config_digest: String,
    pub models: Vec<ModelSummary>,
    pub metadata: ReportMetadata,
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub report: MetricsReport,
    pub records: Vec<RepeatRecord>,
}

fn dataset_label(spec: &DatasetSpec) -> String {
    match spec {
        DatasetSpec::Csv { path, .. } => path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        DatasetSpec::Synthetic { n, d, informative_coef, seed } => format!("synthetic(n={n},d={d},b={informative_coef:?},seed={seed})"),
    }
}

fn run_repeat(cfg: &ExperimentConfig, data: &Dataset, repeat: usize, split: &Split) -> Vec<RepeatRecord> {
    let prepared = data
        .subset(&split.train)
        .and_then(|tr| data.subset(&split.test).map(|te| (tr, te)))
        .map_err(HarnessError::from)
        .and_then(|(tr, te)| standardize(&tr, &[&te]));
    let prepared = match prepared {
        Ok(p) => p,
        Err(e) => {
            let msg = e.to_string();
            return cfg.models.iter().map(|&model| RepeatRecord { repeat, model, outcome: Err(msg.clone()) }).collect();
        }
    };
    let train = &prepared.train;
    let test = &prepared.others[0];
    cfg.models
        .iter()
        .map(|&model| {
            let outcome = (|| -> Result<RepeatMetrics, HarnessError> {
                let delta = if model.uses_delta() {
                    cross_validate_delta(train, model, &cfg.delta_grid, &split.fold_of, &cfg.metric_learn)?.chosen_delta
                } else {
                    0.0
                };
                let cost = if model.learns_metric() { Some(learn_cost(model, train, &cfg.metric_learn)?) } else { None };
                let fitted = fit_model(model, train, delta, cost.as_ref())?;
                let provenance = Provenance {
                    standardization_rows: train.standardization.as_ref().map(|s| s.source_rows.clone()).unwrap_or_default(),
                    cost_rows: fitted.cost_rows.clone(),
                    test_rows: test.rows.clone(),
                };
                provenance.check()?;
                Ok(RepeatMetrics {
                    delta,
                    train_loss: fitted.log_loss(train)?,
                    test_loss: fitted.log_loss(test)?,
                    accuracy: fitted.accuracy(test)?,
                    converged: fitted.converged,
                    provenance,
                })
            })();
            RepeatRecord { repeat, model, outcome: outcome.map_err(|e| e.to_string()) }
        })
        .collect()
}

/// Aggregates per-repeat records into per-model summaries in `models` order.
pub fn summarize(models: &[ModelKind], records: &[RepeatRecord], repeats: usize) -> Result<Vec<ModelSummary>, HarnessError> {
    models
        .iter()
        .map(|&model| {
            let mine: Vec<&RepeatRecord> = records.iter().filter(|r| r.model == model).collect();
            let ok: Vec<&RepeatMetrics> = mine.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
            let failed = mine.len() - ok.len();
            if failed * 10 > repeats {
                let first = mine.iter().find_map(|r| r.outcome.as_ref().err()).cloned().unwrap_or_default();
                return Err(HarnessError::TooManyFailures { model: model.name().into(), failed, total: repeats, first });
            }
            let mut counts: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
            for m in &ok {
                counts.entry(m.delta.to_bits()).or_insert((m.delta, 0)).1 += 1;
            }
            let mut chosen_delta: Vec<(f64, usize)> = counts.into_values().collect();
            chosen_delta.sort_by(|a, b| a.0.total_cmp(&b.0));
            let col = |f: fn(&RepeatMetrics) -> f64| MeanStd::of(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
            Ok(ModelSummary {
                name: model.name().into(),
                train_loss: col(|m| m.train_loss),
                test_loss: col(|m| m.test_loss),
                accuracy: col(|m| m.accuracy),
                completed_repeats: ok.len(),
                failed_repeats: failed,
                chosen_delta,
            })
        })
        .collect()
}

/// Repeated random splits: standardize on the training part, learn `Λ` (DRO
/// models), choose `δ` by cross-validation, refit and score. Repeats run in
/// parallel and are collected in repeat order.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<BenchmarkOutcome, HarnessError> {
    let data = cfg.load_dataset()?;
    run_benchmark_on(cfg, &data)
}

pub fn run_benchmark_on(cfg: &ExperimentConfig, data: &Dataset) -> Result<BenchmarkOutcome, HarnessError> {
    cfg.validate()?;
    if data.task != Task::Classification {
        return Err(HarnessError::Config("benchmarks need classification labels".into()));
    }
    let plan = SplitPlan::new(data.len(), cfg.train_size, cfg.test_cap, cfg.repeats, cfg.folds, cfg.seed)?;
    let records: Vec<RepeatRecord> = plan
        .splits
        .par_iter()
        .enumerate()
        .map(|(r, split)| run_repeat(cfg, data, r, split))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let models = summarize(&cfg.models, &records, cfg.repeats)?;
    let test_size = plan.splits.first().map_or(0, |s| s.test.len());
    let report = MetricsReport {
        version: REPORT_VERSION,
        config_digest: cfg.digest(),
        models,
        metadata: ReportMetadata {
            dataset: dataset_label(&cfg.dataset),
            num_predictors: data.dim(),
            train_size: cfg.train_size,
            test_size,
            test_cap: cfg.test_cap,
            repeats: cfg.repeats,
            folds: cfg.folds,
            sampling: "uniform without replacement".into(),
            seed: cfg.seed,
        },
    };
    Ok(BenchmarkOutcome { report, records })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Json,
    Markdown,
}

fn fmt_stat(v: MeanStd) -> String {
    fn short(x: f64) -> String {
        if x == 0.0 {
            "0".into()
        } else if x.abs() < 1.0 {
            format!("{x:.3}").replacen("0.", ".", 1)
        } else {
            format!("{x:.2}")
        }
    }
    format!("{} ± {}", short(v.mean), short(v.std))
}

/// Renders the report. JSON is pretty-printed with a trailing newline; the
/// markdown table has Train/Test/Accur rows per model followed by the
/// metadata rows.
pub fn render_report(report: &MetricsReport, format: ReportFormat) -> Result<String, HarnessError> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
        ReportFormat::Markdown => {
            let m = &report.metadata;
            let mut s = String::new();
            let _ = writeln!(s, "| Model | Metric | {} |", m.dataset);
            let _ = writeln!(s, "|---|---|---|");
            for model in &report.models {
                let _ = writeln!(s, "| {} | Train | {} |", model.name, fmt_stat(model.train_loss));
                let _ = writeln!(s, "| | Test | {} |", fmt_stat(model.test_loss));
                let _ = writeln!(s, "| | Accur | {} |", fmt_stat(model.accuracy));
            }
            let _ = writeln!(s, "| Num Predictors | | {} |", m.num_predictors);
            let _ = writeln!(s, "| Train Size | | {} |", m.train_size);
            let _ = writeln!(s, "| Test Size | | {} |", m.test_size);
            Ok(s)
        }
    }
}

pub fn emit_report(report: &MetricsReport, format: ReportFormat, path: &Path) -> Result<(), HarnessError> {
    let text = render_report(report, format)?;
    std::fs::write(path, text).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn csv_label_mapping_and_missing_rows() {
        let text = "f1,f2,label\n1,2,a\n3,4,b\n5,6,a\n";
        let loaded = parse_csv(text.as_bytes(), "label", Some("a")).unwrap();
        assert_eq!(loaded.dataset.labels.as_slice(), &[1.0, -1.0, 1.0]);
        assert_eq!(loaded.dropped_rows, 0);
        let text = "f1,f2,label\n1,,a\n3,4,b\n5,6,a\n";
        let loaded = parse_csv(text.as_bytes(), "label", Some("a")).unwrap();
        assert_eq!(loaded.dataset.len(), 2);
        assert_eq!(loaded.dropped_rows, 1);
        assert_eq!(loaded.dataset.rows, vec![1, 2]);
        let bad = "f1,label\n1,a\n2,b\n3,c\n";
        assert!(matches!(parse_csv(bad.as_bytes(), "label", Some("a")), Err(HarnessError::UnmappableLabel { .. })));
        let empty = "f1,label\n,a\n";
        assert!(matches!(parse_csv(empty.as_bytes(), "label", Some("a")), Err(HarnessError::EmptyAfterCleaning { dropped: 1 })));
    }

    #[test]
    fn standardize_examples() {
        let train = Dataset::from_rows(&[&[0.0], &[2.0]], &[1.0, -1.0], Task::Classification).unwrap();
        let test = Dataset::from_rows(&[&[1.0]], &[1.0], Task::Classification).unwrap();
        let s = standardize(&train, &[&test]).unwrap();
        assert_eq!(s.train.features.as_slice(), &[-1.0, 1.0]);
        assert_eq!(s.others[0].features[(0, 0)], 0.0);
        let again = standardize(&s.train, &[]).unwrap();
        assert!((again.train.features.clone() - s.train.features.clone()).amax() < 1e-8);
    }

    #[test]
    fn standardize_drops_constant_columns() {
        let train = Dataset::from_rows(&[&[0.0, 5.0], &[2.0, 5.0]], &[1.0, -1.0], Task::Classification).unwrap();
        let s = standardize(&train, &[]).unwrap();
        assert_eq!(s.dropped_columns, vec![1]);
        assert_eq!(s.train.dim(), 1);
        let constant = Dataset::from_rows(&[&[5.0], &[5.0]], &[1.0, -1.0], Task::Classification).unwrap();
        assert!(matches!(standardize(&constant, &[]), Err(HarnessError::AllConstant)));
    }

    #[test]
    fn split_plan_is_disjoint_and_seeded() {
        let plan = SplitPlan::new(50, 20, Some(15), 3, 5, 9).unwrap();
        for s in &plan.splits {
            assert_eq!(s.train.len(), 20);
            assert_eq!(s.test.len(), 15);
            assert!(s.train.iter().all(|i| !s.test.contains(i)));
            for f in 0..5 {
                assert_eq!(s.fold_of.iter().filter(|&&k| k == f).count(), 4);
            }
        }
        assert_eq!(plan, SplitPlan::new(50, 20, Some(15), 3, 5, 9).unwrap());
        assert_ne!(plan, SplitPlan::new(50, 20, Some(15), 3, 5, 10).unwrap());
    }

    #[test]
    fn delta_grid_shape() {
        let g = default_delta_grid();
        assert_eq!(g.len(), 13);
        assert_eq!(g[0], 0.0);
        assert_abs_diff_eq!(g[1], 1e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(g[12], 10.0, epsilon = 1e-12);
    }

    #[test]
    fn cv_singletons_and_ties() {
        let data = synth_figure1b(40, 2, 3.0, 1).unwrap();
        let folds: Vec<usize> = (0..40).map(|i| i % 5).collect();
        let cfg = MetricLearnConfig::default();
        assert_eq!(cross_validate_delta(&data, ModelKind::DroL, &[0.0], &folds, &cfg).unwrap().chosen_delta, 0.0);
        assert_eq!(cross_validate_delta(&data, ModelKind::Lrl1, &[0.1, 0.1], &folds, &cfg).unwrap().chosen_delta, 0.1);
    }

    #[test]
    fn cv_rejects_huge_delta_on_informative_data() {
        let data = synth_figure1b(200, 2, 2.0, 3).unwrap();
        let folds: Vec<usize> = (0..200).map(|i| i % 5).collect();
        let r = cross_validate_delta(&data, ModelKind::DroL, &[0.0, 1e3], &folds, &MetricLearnConfig::default()).unwrap();
        assert_eq!(r.chosen_delta, 0.0);
    }

    #[test]
    fn synthetic_signal_and_determinism() {
        let a = synth_figure1b(20000, 2, 10.0, 5).unwrap();
        let hits = (0..a.len()).filter(|&i| (a.features[(i, 0)] >= 0.0) == (a.labels[i] > 0.0)).count();
        assert!(hits as f64 / a.len() as f64 >= 0.9);
        assert_eq!(a, synth_figure1b(20000, 2, 10.0, 5).unwrap());
        let noise = synth_figure1b(20000, 2, 0.0, 5).unwrap();
        let pos = noise.labels.iter().filter(|&&y| y > 0.0).count() as f64 / 20000.0;
        assert!((pos - 0.5).abs() < 0.02);
    }

    #[test]
    fn config_kv_round_trip() {
        let mut cfg = ExperimentConfig::new(DatasetSpec::Synthetic { n: 100, d: 3, informative_coef: 4.0, seed: 2 }, 30);
        cfg.test_cap = Some(50);
        cfg.models = vec![ModelKind::Lr, ModelKind::DroL];
        let kv: BTreeMap<String, String> = cfg
            .to_kv()
            .lines()
            .map(|l| {
                let (k, v) = l.split_once('=').unwrap();
                (k.to_string(), v.to_string())
            })
            .collect();
        let back = ExperimentConfig::from_kv(&kv).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn report_markdown_and_json() {
        let report = MetricsReport {
            version: REPORT_VERSION,
            config_digest: "abc".into(),
            models: vec![],
            metadata: ReportMetadata {
                dataset: "wdbc".into(),
                num_predictors: 30,
                train_size: 40,
                test_size: 329,
                test_cap: Some(329),
                repeats: 1,
                folds: 5,
                sampling: "uniform without replacement".into(),
                seed: 0,
            },
        };
        let md = render_report(&report, ReportFormat::Markdown).unwrap();
        assert!(!md.contains("Train |"));
        assert!(md.contains("| Num Predictors | | 30 |") && md.contains("| Train Size | | 40 |") && md.contains("| Test Size | | 329 |"));
        let json = render_report(&report, ReportFormat::Json).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn lr_on_separable_data_drives_train_loss_to_zero() {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let t = i as f64 / 10.0 - 2.0;
            rows.push(vec![t + if t >= 0.0 { 0.5 } else { -0.5 }, (i % 7) as f64]);
            y.push(if t >= 0.0 { 1.0 } else { -1.0 });
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let data = Dataset::from_rows(&refs, &y, Task::Classification).unwrap();
        let fitted = fit_model(ModelKind::Lr, &data, 0.0, None).unwrap();
        assert!(fitted.log_loss(&data).unwrap() < 1e-3);
    }
}
