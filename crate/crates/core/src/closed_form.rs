//! Estimators whose worst-case risk has a closed form.
//!
//! With a positive definite cost matrix `Λ` the worst case over the transport
//! ball collapses to an empirical loss plus a dual-norm penalty:
//!
//! ```text
//! square-root least squares:  RMSE(β) + √δ ‖β‖_{Λ⁻¹}
//! logistic regression:        mean log(1 + e^{−y xᵀβ}) + δ ‖β‖_{Λ⁻¹}
//! ```
//!
//! Both are solved in whitened coordinates `θ = L⁻¹β` (`Λ = L Lᵀ`), where the
//! penalty becomes a plain Euclidean norm.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Task};
use crate::linalg::{CholeskyFactor, LinalgError, PsdMatrix};
use crate::loss::{sigmoid, softplus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("expected {expected:?} labels")]
    WrongTask { expected: Task },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptiveLoss {
    SqrtLeastSquares,
    Logistic,
}

/// A dual-norm regularized estimation problem.
#[derive(Debug, Clone)]
pub struct AdaptiveRegProblem {
    pub loss: AdaptiveLoss,
    pub lambda: PsdMatrix,
    pub delta: f64,
}

impl AdaptiveRegProblem {
    pub fn new(loss: AdaptiveLoss, lambda: PsdMatrix, delta: f64) -> Result<Self, SolveError> {
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(SolveError::InvalidProblem(format!("delta must be a finite nonnegative number, got {delta}")));
        }
        if !lambda.is_positive_definite() {
            return Err(SolveError::InvalidProblem("cost matrix must be positive definite".into()));
        }
        Ok(Self { loss, lambda, delta })
    }
}

/// A fitted coefficient vector with solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub beta: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub duality_gap_bound: Option<f64>,
}

/// JSON form of an estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub beta: Vec<f64>,
    pub objective: f64,
    pub delta: f64,
    pub loss: String,
    pub lambda_source: String,
    pub converged: bool,
    pub iterations: usize,
}

impl Estimate {
    pub fn to_record(&self, delta: f64, loss: &str, lambda_source: &str) -> EstimateRecord {
        EstimateRecord {
            beta: self.beta.iter().copied().collect(),
            objective: self.objective,
            delta,
            loss: loss.to_string(),
            lambda_source: lambda_source.to_string(),
            converged: self.converged,
            iterations: self.iterations,
        }
    }
}

/// Whitened design `X̃ = X L` together with the factor for mapping back.
#[derive(Debug, Clone)]
pub struct Whitening {
    pub factor: CholeskyFactor,
    pub x_tilde: DMatrix<f64>,
}

impl Whitening {
    /// `β = L θ`.
    pub fn back_map(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.factor.lower() * theta
    }

    /// `θ = L⁻¹ β`.
    pub fn forward_map(&self, beta: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
        self.factor.solve_lower(beta)
    }
}

/// Rows become `Lᵀ x_i`, so `x̃_iᵀθ = x_iᵀ(Lθ)` and `‖Lθ‖_{Λ⁻¹} = ‖θ‖₂`.
pub fn whiten(lambda: &PsdMatrix, x: &DMatrix<f64>) -> Result<Whitening, SolveError> {
    if x.ncols() != lambda.dim() {
        return Err(SolveError::DimensionMismatch { expected: lambda.dim(), found: x.ncols() });
    }
    let factor = lambda.cholesky()?;
    let x_tilde = x * factor.lower();
    Ok(Whitening { factor, x_tilde })
}

/// Empirical logistic loss `mean log(1 + exp(−y xᵀβ))`.
pub fn mean_logistic_loss(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let scores = x * beta;
    scores.iter().zip(y.iter()).map(|(s, yi)| softplus(-yi * s)).sum::<f64>() / y.len() as f64
}

/// `√(mean (y − xᵀβ)²)`.
pub fn rmse(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    ((y - x * beta).norm_squared() / y.len() as f64).sqrt()
}

/// Fraction of rows where `sign(xᵀβ)` matches the label (score 0 counts as +1).
pub fn accuracy(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let scores = x * beta;
    let hits = scores
        .iter()
        .zip(y.iter())
        .filter(|(s, yi)| (if **s >= 0.0 { 1.0 } else { -1.0 }) == **yi)
        .count();
    hits as f64 / y.len() as f64
}

fn logistic_value_grad(x: &DMatrix<f64>, y: &DVector<f64>, theta: &DVector<f64>) -> (f64, DVector<f64>) {
    let n = y.len() as f64;
    let scores = x * theta;
    let mut value = 0.0;
    let mut w = DVector::zeros(y.len());
    for i in 0..y.len() {
        let m = y[i] * scores[i];
        value += softplus(-m);
        w[i] = -y[i] * sigmoid(-m);
    }
    (value / n, x.transpose() * w / n)
}

/// Stopping rule and iteration budget shared by the first-order solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tolerance: 1e-7, max_iters: 50_000 }
    }
}

pub(crate) struct ProxOutcome {
    pub theta: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Accelerated proximal gradient with backtracking (initial step 1, factor
/// 0.5) and function-value restarts. Stops when the gradient mapping
/// `‖(θ − prox(θ − s∇f(θ)))/s‖` drops below the tolerance.
pub(crate) fn proximal_gradient<F, P, G>(
    smooth: F,
    prox: P,
    penalty: G,
    start: DVector<f64>,
    opts: SolverOptions,
) -> ProxOutcome
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
    P: Fn(&DVector<f64>, f64) -> DVector<f64>,
    G: Fn(&DVector<f64>) -> f64,
{
    let mut step = 1.0;
    let mut x = start.clone();
    let mut y = start;
    let mut t = 1.0f64;
    let mut prev_obj = f64::INFINITY;
    for iter in 1..=opts.max_iters {
        let (fy, gy) = smooth(&y);
        let mut x_next;
        loop {
            x_next = prox(&(&y - &gy * step), step);
            let d = &x_next - &y;
            let (fx, _) = smooth(&x_next);
            if fx <= fy + gy.dot(&d) + d.norm_squared() / (2.0 * step) + 1e-15 * fy.abs() || step < 1e-12 {
                break;
            }
            step *= 0.5;
        }
        let mapping = (&x_next - &y).norm() / step;
        let obj = smooth(&x_next).0 + penalty(&x_next);
        if mapping <= opts.tolerance {
            // Certify at the iterate itself, not the extrapolated point.
            let (_, gx) = smooth(&x_next);
            let again = prox(&(&x_next - &gx * step), step);
            if (&again - &x_next).norm() / step <= opts.tolerance {
                return ProxOutcome { theta: x_next, iterations: iter, converged: true };
            }
        }
        if obj > prev_obj {
            // Restart momentum.
            t = 1.0;
            y = x.clone();
            prev_obj = f64::INFINITY;
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        y = &x_next + (&x_next - &x) * ((t - 1.0) / t_next);
        x = x_next;
        t = t_next;
        prev_obj = obj;
    }
    ProxOutcome { theta: x, iterations: opts.max_iters, converged: false }
}

/// Proximal map of `s·δ‖·‖₂`: block soft-thresholding.
pub fn block_soft_threshold(v: &DVector<f64>, threshold: f64) -> DVector<f64> {
    let norm = v.norm();
    if norm <= threshold {
        DVector::zeros(v.len())
    } else {
        v * (1.0 - threshold / norm)
    }
}

/// Proximal map of `s·δ‖·‖₁`: coordinatewise soft-thresholding.
pub fn soft_threshold(v: &DVector<f64>, threshold: f64) -> DVector<f64> {
    v.map(|a| a.signum() * (a.abs() - threshold).max(0.0))
}

fn check_problem(problem: &AdaptiveRegProblem, data: &Dataset, loss: AdaptiveLoss) -> Result<(), SolveError> {
    if problem.loss != loss {
        return Err(SolveError::InvalidProblem(format!("expected a {loss:?} problem, got {:?}", problem.loss)));
    }
    if data.dim() != problem.lambda.dim() {
        return Err(SolveError::DimensionMismatch { expected: problem.lambda.dim(), found: data.dim() });
    }
    Ok(())
}

/// `mean log(1 + e^{−y xᵀβ}) + δ‖β‖_{Λ⁻¹}` by proximal gradient on the
/// whitened problem.
pub fn solve_adaptive_logistic(problem: &AdaptiveRegProblem, data: &Dataset) -> Result<Estimate, SolveError> {
    solve_adaptive_logistic_with(problem, data, SolverOptions::default())
}

pub fn solve_adaptive_logistic_with(
    problem: &AdaptiveRegProblem,
    data: &Dataset,
    opts: SolverOptions,
) -> Result<Estimate, SolveError> {
    check_problem(problem, data, AdaptiveLoss::Logistic)?;
    if data.task != Task::Classification {
        return Err(SolveError::WrongTask { expected: Task::Classification });
    }
    let w = whiten(&problem.lambda, &data.features)?;
    let delta = problem.delta;
    let y = &data.labels;
    let out = proximal_gradient(
        |th| logistic_value_grad(&w.x_tilde, y, th),
        |v, s| block_soft_threshold(v, s * delta),
        |th| delta * th.norm(),
        DVector::zeros(data.dim()),
        opts,
    );
    let beta = w.back_map(&out.theta);
    let objective = worst_case_loss(&beta, problem, data)?;
    Ok(Estimate { beta, objective, iterations: out.iterations, converged: out.converged, duality_gap_bound: None })
}

/// `RMSE(β) + √δ‖β‖_{Λ⁻¹}`.
///
/// The minimizer lies on the ridge path `θ(μ) = (G + μI)⁻¹ b` with
/// `G = X̃ᵀX̃/n`, `b = X̃ᵀy/n`: for `θ ≠ 0` and a nonzero residual the
/// first-order condition is exactly `(G + μI)θ = b` with
/// `μ = √δ·RMSE/‖θ‖`. We search that one-parameter family (plus `θ = 0`)
/// and then refine the fixed point `μ = √δ·RMSE(θ(μ))/‖θ(μ)‖`.
pub fn solve_adaptive_sqrt_ls(problem: &AdaptiveRegProblem, data: &Dataset) -> Result<Estimate, SolveError> {
    check_problem(problem, data, AdaptiveLoss::SqrtLeastSquares)?;
    if data.task != Task::Regression {
        return Err(SolveError::WrongTask { expected: Task::Regression });
    }
    let w = whiten(&problem.lambda, &data.features)?;
    let x = &w.x_tilde;
    let y = &data.labels;
    let n = y.len() as f64;
    let d = data.dim();
    let root_delta = problem.delta.sqrt();
    let gram = x.transpose() * x / n;
    let rhs = x.transpose() * y / n;
    let objective = |th: &DVector<f64>| rmse(x, y, th) + root_delta * th.norm();

    let ridge = |mu: f64| -> Option<DVector<f64>> {
        let m = &gram + DMatrix::<f64>::identity(d, d) * mu;
        m.clone().cholesky().map(|c| c.solve(&rhs)).or_else(|| m.lu().solve(&rhs))
    };

    let zero = DVector::zeros(d);
    let mut best = (objective(&zero), zero.clone(), f64::INFINITY);
    let mut evals = 1usize;
    let scale = gram.trace().max(1e-300) / d as f64;
    // Minimum-norm least squares covers μ → 0 even when G is singular.
    let svd = x.clone().svd(true, true);
    if let Ok(ls) = svd.solve(y, 1e-12) {
        let v = objective(&ls);
        evals += 1;
        if v < best.0 {
            best = (v, ls, 0.0);
        }
    }
    let grid: Vec<f64> = (0..=240).map(|k| scale * 10f64.powf(-12.0 + k as f64 * 0.1)).collect();
    let mut values = Vec::with_capacity(grid.len());
    for &mu in &grid {
        let v = ridge(mu).map(|th| objective(&th)).unwrap_or(f64::INFINITY);
        evals += 1;
        values.push(v);
        if v < best.0 {
            best = (v, ridge(mu).expect("just solved"), mu);
        }
    }

    // Golden-section refinement in log μ around the best grid point.
    if best.2.is_finite() && best.2 > 0.0 {
        let k = grid.iter().position(|&g| g == best.2).unwrap_or(0);
        let lo = grid[k.saturating_sub(1)].ln();
        let hi = grid[(k + 1).min(grid.len() - 1)].ln();
        let f = |lm: f64| ridge(lm.exp()).map(|th| objective(&th)).unwrap_or(f64::INFINITY);
        let (mut a, mut b) = (lo, hi);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - g * (b - a);
        let mut e = a + g * (b - a);
        let (mut fc, mut fe) = (f(c), f(e));
        for _ in 0..200 {
            if (b - a).abs() < 1e-14 {
                break;
            }
            if fc < fe {
                b = e;
                e = c;
                fe = fc;
                c = b - g * (b - a);
                fc = f(c);
            } else {
                a = c;
                c = e;
                fc = fe;
                e = a + g * (b - a);
                fe = f(e);
            }
            evals += 1;
        }
        let mu = ((a + b) / 2.0).exp();
        if let Some(th) = ridge(mu) {
            let v = objective(&th);
            if v < best.0 {
                best = (v, th, mu);
            }
        }
    }

    let theta = best.1;
    let beta = w.back_map(&theta);
    let objective = rmse(&data.features, y, &beta) + root_delta * w.factor.dual_norm(&beta)?;
    // A certificate: the subgradient condition at the solution.
    let resid = y - x * &theta;
    let r = (resid.norm_squared() / n).sqrt();
    let grad_fit = if r > 0.0 { -(x.transpose() * &resid) / (n * r) } else { DVector::zeros(d) };
    let gap = if theta.norm() > 0.0 {
        (&grad_fit + &theta * (root_delta / theta.norm())).norm()
    } else {
        (grad_fit.norm() - root_delta).max(0.0)
    };
    Ok(Estimate { beta, objective, iterations: evals, converged: gap < 1e-4, duality_gap_bound: Some(gap) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "delta")]
pub enum BaselinePenalty {
    None,
    L1(f64),
}

/// Plain (accelerated) gradient descent for `None`; proximal gradient with
/// coordinatewise soft-thresholding for `L1`. Separable data never converges
/// without a penalty and comes back with `converged = false`.
pub fn solve_baseline_logistic(data: &Dataset, penalty: BaselinePenalty) -> Result<Estimate, SolveError> {
    solve_baseline_logistic_with(data, penalty, SolverOptions::default())
}

pub fn solve_baseline_logistic_with(
    data: &Dataset,
    penalty: BaselinePenalty,
    opts: SolverOptions,
) -> Result<Estimate, SolveError> {
    if data.task != Task::Classification {
        return Err(SolveError::WrongTask { expected: Task::Classification });
    }
    let x = &data.features;
    let y = &data.labels;
    let delta = match penalty {
        BaselinePenalty::None => 0.0,
        BaselinePenalty::L1(d) if d >= 0.0 => d,
        BaselinePenalty::L1(d) => return Err(SolveError::InvalidProblem(format!("negative l1 weight {d}"))),
    };
    let out = proximal_gradient(
        |b| logistic_value_grad(x, y, b),
        |v, s| if delta > 0.0 { soft_threshold(v, s * delta) } else { v.clone() },
        |b| delta * b.abs().sum(),
        DVector::zeros(data.dim()),
        opts,
    );
    let objective = mean_logistic_loss(x, y, &out.theta) + delta * out.theta.abs().sum();
    Ok(Estimate { beta: out.theta, objective, iterations: out.iterations, converged: out.converged, duality_gap_bound: None })
}

/// Closed-form worst-case risk at a fixed `β`:
/// `(RMSE + √δ‖β‖_{Λ⁻¹})²` for squared loss and
/// `mean log-loss + δ‖β‖_{Λ⁻¹}` for logistic loss.
///
/// For the square-root problem this is the worst-case *mean squared* error,
/// i.e. the square of that solver's objective.
pub fn worst_case_loss(beta: &DVector<f64>, problem: &AdaptiveRegProblem, data: &Dataset) -> Result<f64, SolveError> {
    if beta.len() != problem.lambda.dim() || data.dim() != beta.len() {
        return Err(SolveError::DimensionMismatch { expected: problem.lambda.dim(), found: beta.len() });
    }
    let penalty = problem.lambda.cholesky()?.dual_norm(beta)?;
    Ok(match problem.loss {
        AdaptiveLoss::SqrtLeastSquares => {
            let v = rmse(&data.features, &data.labels, beta) + problem.delta.sqrt() * penalty;
            v * v
        }
        AdaptiveLoss::Logistic => mean_logistic_loss(&data.features, &data.labels, beta) + problem.delta * penalty,
    })
}
