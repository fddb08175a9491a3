//! Learning a Mahalanobis ground cost from labeled data.
//!
//! Must-link and cannot-link pairs come from k nearest neighbours: a neighbour
//! with the same label is a must-link pair, otherwise cannot-link. The metric
//! then solves
//!
//! ```text
//! minimize    Σ_{(i,j) ∈ M} d²_Λ(Φ(x_i), Φ(x_j))
//! subject to  Σ_{(i,j) ∈ N} d²_Λ(Φ(x_i), Φ(x_j)) ≥ λ̄,   Λ ⪰ 0
//! ```
//!
//! by projected subgradient descent. Both sides are linear in `Λ`, so with
//! `A_M = Σ_M ΔΔᵀ` and `A_N = Σ_N ΔΔᵀ` the problem is `min tr(A_M Λ)` subject
//! to `tr(A_N Λ) ≥ λ̄`.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Task};
use crate::linalg::{self, LinalgError, PsdMatrix, SymMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("k = {k} needs at least k + 1 points, got {n}")]
    TooFewPoints { k: usize, n: usize },
    #[error("pair sets require classification labels")]
    NotClassification,
    #[error("cannot-link set is empty or carries no spread; the separation constraint is infeasible")]
    Infeasible,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("feature map expects dimension {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Must-link (`M`) and cannot-link (`N`) index pairs, each stored with `i < j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSets {
    pub must_link: Vec<(usize, usize)>,
    pub cannot_link: Vec<(usize, usize)>,
    /// Row ids of the dataset the pairs index into.
    pub source_rows: Vec<usize>,
}

impl PairSets {
    pub fn new(must_link: Vec<(usize, usize)>, cannot_link: Vec<(usize, usize)>) -> Self {
        let norm = |v: Vec<(usize, usize)>| -> Vec<(usize, usize)> {
            v.into_iter()
                .filter(|(i, j)| i != j)
                .map(|(i, j)| (i.min(j), i.max(j)))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        };
        Self { must_link: norm(must_link), cannot_link: norm(cannot_link), source_rows: Vec::new() }
    }

    /// Checks the set invariants against a dataset of `n` points.
    pub fn validate(&self, n: usize) -> bool {
        let m: BTreeSet<_> = self.must_link.iter().collect();
        let disjoint = self.cannot_link.iter().all(|p| !m.contains(p));
        let in_range = self.must_link.iter().chain(&self.cannot_link).all(|&(i, j)| i < j && j < n);
        disjoint && in_range
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricLearnConfig {
    pub k: usize,
    pub lambda_bar: f64,
    /// Relative step: each subgradient step moves `Λ` by
    /// `step_size / √(t+1) · ‖Λ‖_F` along `-A_M / ‖A_M‖_F`.
    pub step_size: f64,
    pub max_iters: usize,
    pub pd_floor_gamma: f64,
    /// Kept for reproducible configs; the solver itself is deterministic.
    pub seed: u64,
}

impl Default for MetricLearnConfig {
    fn default() -> Self {
        Self { k: 5, lambda_bar: 1.0, step_size: 0.1, max_iters: 500, pd_floor_gamma: 0.1, seed: 0 }
    }
}

impl MetricLearnConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        if !(self.lambda_bar > 0.0) {
            return Err(MetricError::Config(format!("lambda_bar must be positive, got {}", self.lambda_bar)));
        }
        if !(self.pd_floor_gamma > 0.0 && self.pd_floor_gamma < 1.0) {
            return Err(MetricError::Config(format!("pd_floor_gamma must lie in (0,1), got {}", self.pd_floor_gamma)));
        }
        if !(self.step_size > 0.0) || self.max_iters == 0 || self.k == 0 {
            return Err(MetricError::Config("step_size, max_iters and k must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMapKind {
    Identity,
    /// `x` followed by every product `x_i x_j`, `i ≤ j`, in lexicographic order.
    LinearQuadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub kind: FeatureMapKind,
    pub input_dim: usize,
}

impl FeatureMap {
    pub fn identity(input_dim: usize) -> Self {
        Self { kind: FeatureMapKind::Identity, input_dim }
    }

    pub fn linear_quadratic(input_dim: usize) -> Self {
        Self { kind: FeatureMapKind::LinearQuadratic, input_dim }
    }

    pub fn output_dim(&self) -> usize {
        let d = self.input_dim;
        match self.kind {
            FeatureMapKind::Identity => d,
            FeatureMapKind::LinearQuadratic => d + d * (d + 1) / 2,
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>, MetricError> {
        if x.len() != self.input_dim {
            return Err(MetricError::DimensionMismatch { expected: self.input_dim, found: x.len() });
        }
        Ok(match self.kind {
            FeatureMapKind::Identity => x.clone(),
            FeatureMapKind::LinearQuadratic => {
                let d = self.input_dim;
                let mut out = Vec::with_capacity(self.output_dim());
                out.extend(x.iter());
                for i in 0..d {
                    for j in i..d {
                        out.push(x[i] * x[j]);
                    }
                }
                DVector::from_vec(out)
            }
        })
    }

    /// Maps every row of `x`.
    pub fn apply_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricError> {
        if x.ncols() != self.input_dim {
            return Err(MetricError::DimensionMismatch { expected: self.input_dim, found: x.ncols() });
        }
        let l = self.output_dim();
        let mut out = DMatrix::zeros(x.nrows(), l);
        for i in 0..x.nrows() {
            let row = self.apply(&x.row(i).transpose())?;
            out.row_mut(i).copy_from(&row.transpose());
        }
        Ok(out)
    }
}

/// See [`FeatureMap::apply`].
pub fn apply_feature_map(map: &FeatureMap, x: &DVector<f64>) -> Result<DVector<f64>, MetricError> {
    map.apply(x)
}

/// k-NN pair generation on z-scored features. Ties in distance go to the
/// lower index.
pub fn build_pair_sets(data: &Dataset, k: usize) -> Result<PairSets, MetricError> {
    let n = data.len();
    if data.task != Task::Classification {
        return Err(MetricError::NotClassification);
    }
    if k == 0 || k >= n {
        return Err(MetricError::TooFewPoints { k, n });
    }
    let z = zscore(&data.features);
    let mut must = BTreeSet::new();
    let mut cannot = BTreeSet::new();
    for i in 0..n {
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| ((z.row(i) - z.row(j)).norm_squared(), j))
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in dists.iter().take(k) {
            let pair = (i.min(j), i.max(j));
            if data.labels[i] == data.labels[j] {
                must.insert(pair);
            } else {
                cannot.insert(pair);
            }
        }
    }
    Ok(PairSets {
        must_link: must.into_iter().collect(),
        cannot_link: cannot.into_iter().collect(),
        source_rows: data.rows.clone(),
    })
}

fn zscore(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut z = x.clone();
    for j in 0..x.ncols() {
        let col = x.column(j);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..x.nrows() {
            z[(i, j)] = (x[(i, j)] - mean) / sd;
        }
    }
    z
}

/// Output of [`learn_mahalanobis`].
#[derive(Debug, Clone)]
pub struct LearnedMetric {
    /// The best feasible iterate (PSD, possibly singular).
    pub lambda: PsdMatrix,
    pub map: FeatureMap,
    /// `Σ_M d²_Λ` at `lambda`.
    pub objective: f64,
    /// `Σ_N d²_Λ` at `lambda`; at least `λ̄` up to rounding.
    pub separation: f64,
    /// Objective at the feasible starting point.
    pub initial_objective: f64,
    /// Best feasible objective after each iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub source_rows: Vec<usize>,
}

fn scatter(points: &DMatrix<f64>, pairs: &[(usize, usize)]) -> DMatrix<f64> {
    let l = points.ncols();
    let mut a = DMatrix::zeros(l, l);
    for &(i, j) in pairs {
        let diff = (points.row(i) - points.row(j)).transpose();
        a.ger(1.0, &diff, &diff, 1.0);
    }
    a
}

fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// Projected subgradient solve of the pair-constrained metric problem.
///
/// Starts from `I` scaled onto the constraint boundary. Each iteration takes a
/// relative step against `A_M`, projects onto the PSD cone and rescales by
/// `max(1, λ̄ / tr(A_N Λ))`. The step is proportional to `‖Λ‖_F`, so scaling
/// `λ̄` scales the whole trajectory.
pub fn learn_mahalanobis(
    data: &Dataset,
    pairs: &PairSets,
    map: &FeatureMap,
    cfg: &MetricLearnConfig,
) -> Result<LearnedMetric, MetricError> {
    cfg.validate()?;
    if pairs.cannot_link.is_empty() {
        return Err(MetricError::Infeasible);
    }
    let phi = map.apply_rows(&data.features)?;
    let a_m = scatter(&phi, &pairs.must_link);
    let a_n = scatter(&phi, &pairs.cannot_link);
    let l = phi.ncols();

    let tr_n = a_n.trace();
    if !(tr_n > 0.0) {
        return Err(MetricError::Infeasible);
    }
    let mut current = DMatrix::<f64>::identity(l, l) * (cfg.lambda_bar / tr_n);
    let initial_objective = trace_product(&a_m, &current);
    let mut best = current.clone();
    let mut best_obj = initial_objective;
    let mut trace = Vec::with_capacity(cfg.max_iters);
    let am_norm = a_m.norm();
    let mut converged = false;
    let mut iterations = 0;
    let mut step_scale = 1.0;

    if am_norm == 0.0 {
        // Zero objective everywhere: the start is optimal.
        converged = true;
    }

    while !converged && iterations < cfg.max_iters {
        iterations += 1;
        let eta = step_scale * cfg.step_size / (iterations as f64).sqrt() * current.norm() / am_norm;
        let stepped = SymMatrix::symmetrize(&current - &a_m * eta);
        let projected = linalg::psd_project(&stepped)?.sym().matrix().clone();
        let sep = trace_product(&a_n, &projected);
        if !(sep > 1e-12 * cfg.lambda_bar) {
            // The step annihilated every separating direction; retry smaller.
            step_scale *= 0.5;
            trace.push(best_obj);
            continue;
        }
        current = projected * (cfg.lambda_bar / sep).max(1.0);
        let obj = trace_product(&a_m, &current);
        if obj < best_obj {
            best_obj = obj;
            best = current.clone();
        }
        trace.push(best_obj);
        if trace.len() > 20 {
            let old = trace[trace.len() - 21];
            let rel = (old - best_obj).abs() / old.abs().max(1e-300);
            if rel < 1e-6 {
                converged = true;
            }
        }
    }

    let sym = SymMatrix::symmetrize(best);
    let separation = trace_product(&a_n, sym.matrix());
    let lambda = PsdMatrix::new(sym)?;
    Ok(LearnedMetric {
        lambda,
        map: *map,
        objective: best_obj,
        separation,
        initial_objective,
        objective_trace: trace,
        iterations,
        converged,
        source_rows: data.rows.clone(),
    })
}

/// `(1 − γ) · A · d / tr(A) + γ I`: trace-normalized and bounded below by `γ`.
pub fn pd_floor(a: &PsdMatrix, gamma: f64) -> Result<PsdMatrix, MetricError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(MetricError::Config(format!("gamma must lie in (0,1), got {gamma}")));
    }
    let tr = a.trace();
    if !(tr > 0.0) {
        return Err(MetricError::Linalg(LinalgError::ZeroMatrix));
    }
    let d = a.dim();
    let m = a.matrix() * ((1.0 - gamma) * d as f64 / tr) + DMatrix::identity(d, d) * gamma;
    Ok(PsdMatrix::with_bound(SymMatrix::symmetrize(m), gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cls(rows: &[&[f64]], labels: &[f64]) -> Dataset {
        Dataset::from_rows(rows, labels, Task::Classification).unwrap()
    }

    #[test]
    fn pairs_two_points() {
        let same = build_pair_sets(&cls(&[&[0.0], &[1.0]], &[1.0, 1.0]), 1).unwrap();
        assert_eq!(same.must_link, vec![(0, 1)]);
        assert!(same.cannot_link.is_empty());
        let diff = build_pair_sets(&cls(&[&[0.0], &[1.0]], &[1.0, -1.0]), 1).unwrap();
        assert_eq!(diff.cannot_link, vec![(0, 1)]);
        assert!(diff.must_link.is_empty());
    }

    #[test]
    fn pairs_collinear_clusters() {
        let ds = cls(&[&[0.0], &[1.0], &[10.0], &[11.0]], &[1.0, 1.0, -1.0, -1.0]);
        let p = build_pair_sets(&ds, 1).unwrap();
        assert_eq!(p.must_link, vec![(0, 1), (2, 3)]);
        assert!(p.cannot_link.is_empty());
        assert!(p.validate(4));
    }

    #[test]
    fn pairs_reject_large_k() {
        let ds = cls(&[&[0.0], &[1.0]], &[1.0, 1.0]);
        assert_eq!(build_pair_sets(&ds, 2), Err(MetricError::TooFewPoints { k: 2, n: 2 }));
    }

    #[test]
    fn feature_map_examples() {
        let x = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(FeatureMap::identity(2).apply(&x).unwrap(), x);
        let lq = FeatureMap::linear_quadratic(2);
        assert_eq!(lq.apply(&x).unwrap().as_slice(), &[1.0, 2.0, 1.0, 2.0, 4.0]);
        let z = lq.apply(&DVector::zeros(2)).unwrap();
        assert_eq!(z.len(), 5);
        assert!(z.iter().all(|v| *v == 0.0));
        assert!(lq.apply(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn pd_floor_examples() {
        let id = pd_floor(&PsdMatrix::identity(3), 0.3).unwrap();
        assert!((id.matrix() - DMatrix::<f64>::identity(3, 3)).amax() < 1e-15);
        let a = PsdMatrix::from_diagonal(&[2.0, 0.0]).unwrap();
        let f = pd_floor(&a, 0.1).unwrap();
        assert_abs_diff_eq!(f.matrix()[(0, 0)], 1.9, epsilon = 1e-15);
        assert_abs_diff_eq!(f.matrix()[(1, 1)], 0.1, epsilon = 1e-15);
        assert!(f.min_eigenvalue_bound() >= 0.1);
        let near_one = pd_floor(&a, 1.0 - 1e-12).unwrap();
        assert!((near_one.matrix() - DMatrix::<f64>::identity(2, 2)).amax() < 1e-11);
        assert!(pd_floor(&PsdMatrix::from_diagonal(&[0.0, 0.0]).unwrap(), 0.1).is_err());
    }

    fn orthogonal_pairs() -> (Dataset, PairSets) {
        // Point 0 -> 1 moves along e2 (must-link), 0 -> 2 along e1 (cannot-link).
        let ds = cls(&[&[0.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]], &[1.0, 1.0, -1.0]);
        let pairs = PairSets::new(vec![(0, 1)], vec![(0, 2)]);
        (ds, pairs)
    }

    #[test]
    fn single_pair_concentrates_on_separating_axis() {
        let (ds, pairs) = orthogonal_pairs();
        let m = learn_mahalanobis(&ds, &pairs, &FeatureMap::identity(2), &MetricLearnConfig::default()).unwrap();
        let lam = m.lambda.matrix();
        assert!(lam[(1, 1)] <= 1e-3 * lam[(0, 0)], "{lam}");
        assert!(m.separation >= 1.0 - 1e-8);
        assert!(m.objective <= m.initial_objective);
    }

    #[test]
    fn lambda_bar_homogeneity() {
        let (ds, pairs) = orthogonal_pairs();
        let cfg = MetricLearnConfig::default();
        let a = learn_mahalanobis(&ds, &pairs, &FeatureMap::identity(2), &cfg).unwrap();
        let cfg2 = MetricLearnConfig { lambda_bar: 2.0, ..cfg };
        let b = learn_mahalanobis(&ds, &pairs, &FeatureMap::identity(2), &cfg2).unwrap();
        let rel = (b.lambda.matrix() - a.lambda.matrix() * 2.0).norm() / (a.lambda.matrix() * 2.0).norm();
        assert!(rel < 1e-6, "relative error {rel}");
    }

    #[test]
    fn empty_cannot_link_is_infeasible() {
        let (ds, _) = orthogonal_pairs();
        let pairs = PairSets::new(vec![(0, 1)], vec![]);
        assert!(matches!(
            learn_mahalanobis(&ds, &pairs, &FeatureMap::identity(2), &MetricLearnConfig::default()),
            Err(MetricError::Infeasible)
        ));
    }
}
