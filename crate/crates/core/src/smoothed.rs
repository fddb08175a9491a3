//! Worst-case risk through its dual, for losses and costs without a closed form.
//!
//! For a ball of radius `δ` around the empirical measure,
//!
//! ```text
//! sup_{P: D_c(P, P_n) ≤ δ} E_P[l(X, Y; β)] = min_{λ ≥ 0} (1/n) Σ_i φ(X_i, Y_i, β, λ)
//! φ(x, y, β, λ) = max_u ψ(u) = max_u l(u, y; β) − λ (c(u, x) − δ)
//! ```
//!
//! The inner maximum is replaced by the soft maximum
//! `φ_{ε,f} = ε log E_{U∼f}[exp(ψ(U)/ε)]`, estimated by Monte Carlo and
//! minimized jointly over `(β, λ)` by projected stochastic gradient descent.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closed_form::{solve_baseline_logistic, BaselinePenalty, Estimate, SolveError};
use crate::data::{Dataset, Task};
use crate::linalg::{sym_eigen, LinalgError, PsdMatrix};
use crate::loss::Loss;
use crate::transport::{CostFunction, FastCost, TransportError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmoothError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dual multiplier must be nonnegative, got {0}")]
    NegativeLambda(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(
        "inner maximum is unbounded at lambda = {lambda}: the loss outgrows lambda times the cost \
         (growth condition l <= Gamma (1 + c) fails for this multiplier)"
    )]
    Unbounded { lambda: f64 },
    #[error("search oracle not certified: coarse lattice gives {coarse}, refined lattice gives {refined}")]
    NotCertified { coarse: f64, refined: f64 },
    #[error("all smoothing weights are degenerate; increase the sampler scale or epsilon")]
    DegenerateWeights,
    #[error("growth condition fails at the initial coefficients (probe ratio grows to {ratio})")]
    GrowthViolation { ratio: f64 },
    #[error("diverged at iteration {iter}: objective {objective} vs {previous} 200 iterations earlier")]
    Diverged { iter: usize, objective: f64, previous: f64 },
    #[error("trace output failed: {0}")]
    Trace(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// `(β, λ)` with `λ ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPoint {
    pub beta: DVector<f64>,
    lambda: f64,
}

impl DualPoint {
    pub fn new(beta: DVector<f64>, lambda: f64) -> Result<Self, SmoothError> {
        if !(lambda >= 0.0) {
            return Err(SmoothError::NegativeLambda(lambda));
        }
        Ok(Self { beta, lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Sets `λ ← max(0, value)`.
    pub fn set_lambda_projected(&mut self, value: f64) {
        self.lambda = value.max(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerCenter {
    Origin,
    DataPoint,
}

/// The sampling density `f = 𝒩(center, σ²I)` and the soft-max temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub epsilon: f64,
    pub sampler_sigma: f64,
    pub sampler_center: SamplerCenter,
    pub samples_l: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { epsilon: 0.5, sampler_sigma: 1.0, sampler_center: SamplerCenter::DataPoint, samples_l: 1000 }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<(), SmoothError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(SmoothError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.sampler_sigma > 0.0 && self.sampler_sigma.is_finite()) {
            return Err(SmoothError::Config(format!("sampler sigma must be positive, got {}", self.sampler_sigma)));
        }
        if self.samples_l < 2 {
            return Err(SmoothError::Config(format!("need at least 2 samples, got {}", self.samples_l)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub batch_size: usize,
    pub step_beta: f64,
    pub step_lambda: f64,
    pub stop_tol: f64,
    pub averaging_window: usize,
    pub max_iters: usize,
    /// Steps are constant for this many iterations, then decay like `1/√t`.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            step_beta: 0.01,
            step_lambda: 0.01,
            stop_tol: 1e-3,
            averaging_window: 50,
            max_iters: 5000,
            warmup: 500,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self, n: usize) -> Result<(), SmoothError> {
        if self.batch_size == 0 || self.batch_size > n {
            return Err(SmoothError::Config(format!("batch size {} must be in 1..={n}", self.batch_size)));
        }
        if !(self.step_beta > 0.0 && self.step_lambda > 0.0) {
            return Err(SmoothError::Config("step sizes must be positive".into()));
        }
        if !(self.stop_tol > 0.0) {
            return Err(SmoothError::Config("stop tolerance must be positive".into()));
        }
        if self.averaging_window == 0 || self.max_iters == 0 {
            return Err(SmoothError::Config("averaging window and iteration cap must be positive".into()));
        }
        Ok(())
    }

    fn step_scale(&self, t: usize) -> f64 {
        if t <= self.warmup.max(1) {
            1.0
        } else {
            (self.warmup.max(1) as f64 / t as f64).sqrt()
        }
    }
}

/// Settings for the low-dimensional exact maximizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    /// Lattice radius is `5σ` around the data point.
    pub sigma: f64,
    pub max_ascent_iters: usize,
    pub agreement_tol: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { sigma: 1.0, max_ascent_iters: 5000, agreement_tol: 1e-4 }
    }
}

/// Probe settings for the growth check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub sigma: f64,
    pub directions: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { sigma: 1.0, directions: 16, seed: 0 }
    }
}

/// `l(u, y; β) ≤ Γ (1 + c(u, x))` on the probes, when `holds`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthCertificate {
    pub gamma: f64,
    pub holds: bool,
}

/// Monte Carlo value and gradient of `φ_{ε,f}` at one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedEval {
    pub value: f64,
    pub grad_beta: DVector<f64>,
    pub grad_lambda: f64,
    /// Effective sample size `(Σw)² / Σw²` of the self-normalized weights.
    pub ess: f64,
}

/// Result of the exact inner maximization.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerMax {
    pub value: f64,
    pub argmax: DVector<f64>,
}

/// One line of the optional solver trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub objective_estimate: f64,
    pub lambda: f64,
    pub tracking_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdOutcome {
    pub estimate: Estimate,
    pub lambda: f64,
    /// The coefficients the iteration started from.
    pub initial_beta: DVector<f64>,
    pub tracking_error: f64,
}

/// Derives an independent RNG seed for `(iteration, element)` under a master
/// seed, so parallel draws do not depend on scheduling.
pub fn substream_seed(master: u64, iteration: u64, element: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(master ^ mix(iteration ^ mix(element)))
}

/// `L × d` standard normal draws for a seed.
pub fn standard_normal_draws(seed: u64, l: usize, d: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(l, d, |_, _| rng.sample(StandardNormal))
}

/// Ground cost, loss and radius: everything `ψ` needs besides the data.
#[derive(Debug, Clone)]
pub struct DualObjective {
    cost: CostFunction,
    fast: FastCost,
    pub loss: Loss,
    pub delta: f64,
}

impl DualObjective {
    pub fn new(cost: CostFunction, loss: Loss, delta: f64) -> Result<Self, SmoothError> {
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(SmoothError::Config(format!("delta must be finite and nonnegative, got {delta}")));
        }
        let fast = FastCost::new(&cost);
        Ok(Self { cost, fast, loss, delta })
    }

    pub fn cost(&self) -> &CostFunction {
        &self.cost
    }

    fn check_dims(&self, x: &DVector<f64>, point: &DualPoint) -> Result<(), SmoothError> {
        if x.len() != point.beta.len() {
            return Err(SmoothError::DimensionMismatch { expected: point.beta.len(), found: x.len() });
        }
        if let Some(d) = self.cost.input_dim() {
            if d != x.len() {
                return Err(SmoothError::DimensionMismatch { expected: d, found: x.len() });
            }
        }
        Ok(())
    }

    /// `ψ(u) = l(u, y; β) − λ (c(u, x) − δ)`. Labels never move, so only the
    /// finite branch of the cost is used.
    pub fn psi(&self, u: &DVector<f64>, x: &DVector<f64>, y: f64, point: &DualPoint) -> f64 {
        let diff = u - x;
        let c = self.fast.of_diff(&diff, u, x);
        self.loss.value(u, y, &point.beta) - point.lambda * (c - self.delta)
    }

    fn psi_grad(&self, u: &DVector<f64>, x: &DVector<f64>, y: f64, point: &DualPoint) -> DVector<f64> {
        let diff = u - x;
        let dl = &point.beta * self.loss.dscore(u.dot(&point.beta), y);
        match self.fast.grad_u(&diff) {
            Some(gc) => dl - gc * point.lambda,
            None => {
                let mut g = dl;
                for k in 0..u.len() {
                    let h = 1e-6 * (1.0 + u[k].abs());
                    let mut up = u.clone();
                    up[k] += h;
                    let mut um = u.clone();
                    um[k] -= h;
                    let cp = self.fast.of_diff(&(&up - x), &up, x);
                    let cm = self.fast.of_diff(&(&um - x), &um, x);
                    g[k] -= point.lambda * (cp - cm) / (2.0 * h);
                }
                g
            }
        }
    }

    /// Probe directions for unboundedness: coordinate axes, `β`, and for
    /// Mahalanobis costs the steepest direction `Λ⁻¹β`.
    fn probe_directions(&self, beta: &DVector<f64>) -> Vec<DVector<f64>> {
        let d = beta.len();
        let mut dirs: Vec<DVector<f64>> = (0..d)
            .map(|k| {
                let mut e = DVector::zeros(d);
                e[k] = 1.0;
                e
            })
            .collect();
        if beta.norm() > 0.0 {
            dirs.push(beta.normalize());
            let lam = match &self.cost {
                CostFunction::Mahalanobis { lambda } | CostFunction::MahalanobisNorm { lambda } => Some(lambda),
                _ => None,
            };
            if let Some(v) = lam.and_then(|l| l.cholesky().ok()).and_then(|f| f.solve(beta).ok()) {
                if v.norm() > 0.0 {
                    dirs.push(v.normalize());
                }
            }
        }
        dirs.iter().flat_map(|v| [v.clone(), -v]).collect()
    }

    fn ray_unbounded(&self, x: &DVector<f64>, y: f64, point: &DualPoint, scale: f64) -> bool {
        let base = self.psi(x, x, y, point);
        self.probe_directions(&point.beta).iter().any(|v| {
            let vals: Vec<f64> = (0..=40).map(|k| self.psi(&(x + v * (scale * 2f64.powi(k))), x, y, point)).collect();
            let m = vals.len();
            vals[m - 1] > vals[m - 2] && vals[m - 2] > vals[m - 3] && vals[m - 1] - base > 1e3 * (1.0 + base.abs())
        })
    }

    fn ascend(&self, start: DVector<f64>, x: &DVector<f64>, y: f64, point: &DualPoint, max_iters: usize) -> (f64, DVector<f64>) {
        let mut u = start;
        let mut val = self.psi(&u, x, y, point);
        let mut step = 1.0;
        for _ in 0..max_iters {
            let g = self.psi_grad(&u, x, y, point);
            let gn2 = g.norm_squared();
            if gn2 == 0.0 {
                break;
            }
            let mut accepted = false;
            while step * gn2.sqrt() > 1e-13 * (1.0 + u.norm()) {
                let cand = &u + &g * step;
                let cv = self.psi(&cand, x, y, point);
                if cv >= val + 1e-4 * step * gn2 {
                    u = cand;
                    val = cv;
                    accepted = true;
                    step *= 2.0;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        (val, u)
    }

    fn lattice_best(&self, x: &DVector<f64>, y: f64, point: &DualPoint, radius: f64, per_axis: usize, cfg: &SearchConfig) -> InnerMax {
        let d = x.len();
        let mut best = {
            let (v, u) = self.ascend(x.clone(), x, y, point, cfg.max_ascent_iters);
            InnerMax { value: v, argmax: u }
        };
        let pitch = 2.0 * radius / (per_axis - 1) as f64;
        let total = per_axis.pow(d as u32);
        for idx in 0..total {
            let mut start = x.clone();
            let mut r = idx;
            for k in 0..d {
                start[k] += -radius + pitch * (r % per_axis) as f64;
                r /= per_axis;
            }
            let (v, u) = self.ascend(start, x, y, point, cfg.max_ascent_iters);
            if v > best.value {
                best = InnerMax { value: v, argmax: u };
            }
        }
        best
    }

    /// `φ(x, y, β, λ) = max_u ψ(u)` by multi-start ascent: from `x` and a
    /// `5^d` lattice of radius `5σ`, certified against a lattice of half the
    /// pitch. Only meant for `d ≤ 3`.
    pub fn phi_exact(&self, x: &DVector<f64>, y: f64, point: &DualPoint, cfg: &SearchConfig) -> Result<InnerMax, SmoothError> {
        self.check_dims(x, point)?;
        if x.len() > 3 {
            return Err(SmoothError::Config(format!("exact search supports d <= 3, got {}", x.len())));
        }
        if self.ray_unbounded(x, y, point, cfg.sigma) {
            return Err(SmoothError::Unbounded { lambda: point.lambda });
        }
        let radius = 5.0 * cfg.sigma;
        let coarse = self.lattice_best(x, y, point, radius, 5, cfg);
        let refined = self.lattice_best(x, y, point, radius, 9, cfg);
        let far = 1e8 * (1.0 + radius + x.norm());
        if (coarse.argmax.clone() - x).norm() > far || (refined.argmax.clone() - x).norm() > far {
            return Err(SmoothError::Unbounded { lambda: point.lambda });
        }
        let scale = 1.0f64.max(refined.value.abs());
        if (coarse.value - refined.value).abs() > cfg.agreement_tol * scale {
            return Err(SmoothError::NotCertified { coarse: coarse.value, refined: refined.value });
        }
        Ok(if refined.value >= coarse.value { refined } else { coarse })
    }

    /// Monte Carlo `φ_{ε,f}` and its gradient from `L` draws of
    /// `u_k = center + σ z_k`, with self-normalized weights
    /// `w_k ∝ exp(ψ(u_k)/ε)`.
    pub fn eval_smoothed(
        &self,
        x: &DVector<f64>,
        y: f64,
        point: &DualPoint,
        cfg: &SmoothingConfig,
        seed: u64,
    ) -> Result<SmoothedEval, SmoothError> {
        cfg.validate()?;
        self.check_dims(x, point)?;
        let d = x.len();
        let z = standard_normal_draws(seed, cfg.samples_l, d);
        self.eval_on_draws(x, y, point, cfg, &z)
    }

    fn eval_on_draws(
        &self,
        x: &DVector<f64>,
        y: f64,
        point: &DualPoint,
        cfg: &SmoothingConfig,
        z: &DMatrix<f64>,
    ) -> Result<SmoothedEval, SmoothError> {
        let l = z.nrows();
        let d = x.len();
        let sigma = cfg.sampler_sigma;
        let center = match cfg.sampler_center {
            SamplerCenter::DataPoint => x.clone(),
            SamplerCenter::Origin => DVector::zeros(d),
        };
        // u_k = center + σ z_k, so scores and Mahalanobis residuals are affine in z.
        let base_score = center.dot(&point.beta);
        let z_score = z * &point.beta;
        let offset = &center - x;
        let cost: Vec<f64> = match &self.fast {
            FastCost::Mahalanobis { factor_t, squared } => {
                let r0 = factor_t * &offset;
                let zr = z * factor_t.transpose();
                (0..l)
                    .map(|k| {
                        let mut q = 0.0;
                        for j in 0..d {
                            let v = r0[j] + sigma * zr[(k, j)];
                            q += v * v;
                        }
                        if *squared {
                            q
                        } else {
                            q.sqrt()
                        }
                    })
                    .collect()
            }
            FastCost::Generic(_) => (0..l)
                .map(|k| {
                    let u = &center + z.row(k).transpose() * sigma;
                    self.fast.of_diff(&(&u - x), &u, x)
                })
                .collect(),
        };
        let mut psi = Vec::with_capacity(l);
        let mut dscore = Vec::with_capacity(l);
        for k in 0..l {
            let s = base_score + sigma * z_score[k];
            psi.push(self.loss.value_at_score(s, y) - point.lambda * (cost[k] - self.delta));
            dscore.push(self.loss.dscore(s, y));
        }
        let m = psi.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(SmoothError::DegenerateWeights);
        }
        let eps = cfg.epsilon;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut wd_sum = 0.0;
        let mut wdz = DVector::zeros(l);
        let mut grad_lambda = 0.0;
        for k in 0..l {
            let w = if psi[k].is_finite() { ((psi[k] - m) / eps).exp() } else { 0.0 };
            sum += w;
            sum_sq += w * w;
            wd_sum += w * dscore[k];
            wdz[k] = w * dscore[k];
            grad_lambda += w * (self.delta - cost[k]);
        }
        // Σ w_k l'(s_k) u_k = center Σ w_k l'(s_k) + σ Zᵀ (w ∘ l').
        let grad_beta = (&center * wd_sum + z.transpose() * wdz * sigma) / sum;
        Ok(SmoothedEval {
            value: m + eps * (sum.ln() - (l as f64).ln()),
            grad_beta,
            grad_lambda: grad_lambda / sum,
            ess: sum * sum / sum_sq,
        })
    }

    pub fn phi_smoothed(&self, x: &DVector<f64>, y: f64, point: &DualPoint, cfg: &SmoothingConfig, seed: u64) -> Result<f64, SmoothError> {
        Ok(self.eval_smoothed(x, y, point, cfg, seed)?.value)
    }

    pub fn grad_smoothed(
        &self,
        x: &DVector<f64>,
        y: f64,
        point: &DualPoint,
        cfg: &SmoothingConfig,
        seed: u64,
    ) -> Result<(DVector<f64>, f64), SmoothError> {
        let e = self.eval_smoothed(x, y, point, cfg, seed)?;
        Ok((e.grad_beta, e.grad_lambda))
    }

    /// `(1/n) Σ_i φ_{ε,f}(X_i, Y_i, β, λ)` with per-observation substreams of
    /// `seed`.
    pub fn dual_objective(&self, data: &Dataset, point: &DualPoint, cfg: &SmoothingConfig, seed: u64) -> Result<f64, SmoothError> {
        let vals: Result<Vec<f64>, SmoothError> = (0..data.len())
            .into_par_iter()
            .map(|i| self.phi_smoothed(&data.x(i), data.y(i), point, cfg, substream_seed(seed, 0, i as u64)))
            .collect();
        Ok(vals?.iter().sum::<f64>() / data.len() as f64)
    }

    /// Probes `u` on shells of radius `σ, 2σ, …` up to `100σ` around every
    /// data point and reports `Γ = 2 · max l / (1 + c)`. The check fails when
    /// the ratio is still growing at the outermost shells.
    pub fn check_growth(&self, beta: &DVector<f64>, data: &Dataset, probe: &ProbeConfig) -> GrowthCertificate {
        let d = data.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
        let mut dirs = self.probe_directions(beta);
        for _ in 0..probe.directions {
            let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            if v.norm() > 0.0 {
                dirs.push(v.normalize());
            }
        }
        let radii: Vec<f64> = (0..8).map(|k| probe.sigma * 100f64.powf(k as f64 / 7.0)).collect();
        let mut shell_max = vec![0.0f64; radii.len()];
        let mut overall = 0.0f64;
        for i in 0..data.len() {
            let x = data.x(i);
            let y = data.y(i);
            overall = overall.max(self.loss.value(&x, y, beta));
            for (s, &r) in radii.iter().enumerate() {
                for v in &dirs {
                    let u = &x + v * r;
                    let c = self.fast.of_diff(&(&u - &x), &u, &x);
                    let ratio = self.loss.value(&u, y, beta) / (1.0 + c);
                    shell_max[s] = shell_max[s].max(ratio);
                }
            }
        }
        let last = shell_max[radii.len() - 1];
        let earlier = shell_max[radii.len() - 3];
        let holds = last.is_finite() && !(last > 2.0 * earlier && last > 1e-12);
        let gamma = 2.0 * shell_max.iter().copied().fold(overall, f64::max);
        GrowthCertificate { gamma, holds }
    }

    /// Empirical risk minimizer used as the starting point.
    pub fn erm(&self, data: &Dataset) -> Result<DVector<f64>, SmoothError> {
        match self.loss {
            Loss::Logistic => {
                if data.task != Task::Classification {
                    return Err(SolveError::WrongTask { expected: Task::Classification }.into());
                }
                Ok(solve_baseline_logistic(data, BaselinePenalty::None)?.beta)
            }
            Loss::Squared => {
                let svd = data.features.clone().svd(true, true);
                svd.solve(&data.labels, 1e-12).map_err(|e| SmoothError::Config(e.to_string()))
            }
        }
    }

    /// Projected stochastic gradient descent on `(β, λ)` starting from
    /// `λ = 0` and the empirical risk minimizer. Returns the trailing average
    /// of the last `averaging_window` iterates and the smoothed dual
    /// objective there.
    ///
    /// With `δ = 0` the ball is the empirical measure itself and the empirical
    /// risk minimizer is returned directly.
    pub fn sgd_solve(
        &self,
        data: &Dataset,
        s_cfg: &SmoothingConfig,
        g_cfg: &SgdConfig,
        mut trace: Option<&mut dyn Write>,
    ) -> Result<SgdOutcome, SmoothError> {
        s_cfg.validate()?;
        g_cfg.validate(data.len())?;
        if let Some(d) = self.cost.input_dim() {
            if d != data.dim() {
                return Err(SmoothError::DimensionMismatch { expected: d, found: data.dim() });
            }
        }
        let n = data.len();
        let d = data.dim();
        let beta0 = self.erm(data)?;
        if self.delta == 0.0 {
            let objective = data
                .features
                .row_iter()
                .zip(data.labels.iter())
                .map(|(r, &y)| self.loss.value(&r.transpose(), y, &beta0))
                .sum::<f64>()
                / n as f64;
            let estimate = Estimate { beta: beta0.clone(), objective, iterations: 0, converged: true, duality_gap_bound: None };
            return Ok(SgdOutcome { estimate, lambda: 0.0, initial_beta: beta0, tracking_error: 0.0 });
        }
        let cert = self.check_growth(&beta0, data, &ProbeConfig { sigma: s_cfg.sampler_sigma, ..ProbeConfig::default() });
        if !cert.holds {
            return Err(SmoothError::GrowthViolation { ratio: cert.gamma });
        }

        let mut point = DualPoint::new(beta0.clone(), 0.0)?;
        let mut batch_rng = ChaCha8Rng::seed_from_u64(substream_seed(g_cfg.seed, u64::MAX, 0));
        let mut window: VecDeque<DVector<f64>> = VecDeque::with_capacity(g_cfg.averaging_window);
        let mut objectives: Vec<f64> = Vec::with_capacity(g_cfg.max_iters);
        let mut tracking_error = f64::INFINITY;
        // Largest |objective| seen at least 200 iterations ago.
        let mut peak = 1e-8f64;
        let mut converged = false;
        let mut iterations = 0;
        let stack = |p: &DualPoint| {
            let mut v = DVector::zeros(d + 1);
            v.rows_mut(0, d).copy_from(&p.beta);
            v[d] = p.lambda;
            v
        };

        for t in 1..=g_cfg.max_iters {
            iterations = t;
            let batch = sample(&mut batch_rng, n, g_cfg.batch_size).into_vec();
            let evals: Result<Vec<SmoothedEval>, SmoothError> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| self.eval_smoothed(&data.x(i), data.y(i), &point, s_cfg, substream_seed(g_cfg.seed, t as u64, j as u64)))
                .collect();
            let evals = evals?;
            let m = evals.len() as f64;
            let mut g_beta = DVector::zeros(d);
            let mut g_lambda = 0.0;
            let mut obj = 0.0;
            for e in &evals {
                g_beta += &e.grad_beta;
                g_lambda += e.grad_lambda;
                obj += e.value;
            }
            g_beta /= m;
            g_lambda /= m;
            obj /= m;
            objectives.push(obj);
            if t > 200 {
                let prev = objectives[t - 201];
                peak = peak.max(prev.abs());
                let scale = peak;
                if obj - prev > 9.0 * scale {
                    return Err(SmoothError::Diverged { iter: t, objective: obj, previous: prev });
                }
            }
            if !obj.is_finite() || g_beta.iter().any(|v| !v.is_finite()) || !g_lambda.is_finite() {
                let prev = if t > 1 { objectives[t - 2] } else { f64::NAN };
                return Err(SmoothError::Diverged { iter: t, objective: obj, previous: prev });
            }

            let scale = g_cfg.step_scale(t);
            point.beta -= g_beta * (g_cfg.step_beta * scale);
            let next_lambda = point.lambda - g_cfg.step_lambda * scale * g_lambda;
            point.set_lambda_projected(next_lambda);

            let current = stack(&point);
            if window.len() == g_cfg.averaging_window {
                window.pop_front();
            }
            window.push_back(current.clone());
            let avg = window.iter().fold(DVector::zeros(d + 1), |acc, v| acc + v) / window.len() as f64;
            tracking_error = (&current - &avg).norm();
            if let Some(w) = trace.as_deref_mut() {
                let rec = TraceRecord { iter: t, objective_estimate: obj, lambda: point.lambda, tracking_error };
                let line = serde_json::to_string(&rec).map_err(|e| SmoothError::Trace(e.to_string()))?;
                writeln!(w, "{line}").map_err(|e| SmoothError::Trace(e.to_string()))?;
            }
            if window.len() == g_cfg.averaging_window && tracking_error < g_cfg.stop_tol {
                converged = true;
                break;
            }
        }

        let avg = window.iter().fold(DVector::zeros(d + 1), |acc, v| acc + v) / window.len().max(1) as f64;
        let final_point = DualPoint::new(avg.rows(0, d).into_owned(), avg[d].max(0.0))?;
        let objective = self.dual_objective(data, &final_point, s_cfg, g_cfg.seed)?;
        let lambda = final_point.lambda;
        let estimate = Estimate { beta: final_point.beta, objective, iterations, converged, duality_gap_bound: None };
        Ok(SgdOutcome { estimate, lambda, initial_beta: beta0, tracking_error })
    }
}

/// Exact `φ_{ε,f}` for `ψ(u) = a − ½ (u − m)ᵀ Q (u − m)` and
/// `f = 𝒩(center, σ²I)`, where `φ = a`.
pub fn smoothed_quadratic_closed_form(
    a: f64,
    m: &DVector<f64>,
    q: &PsdMatrix,
    center: &DVector<f64>,
    sigma: f64,
    epsilon: f64,
) -> Result<f64, SmoothError> {
    if m.len() != q.dim() || center.len() != q.dim() {
        return Err(SmoothError::DimensionMismatch { expected: q.dim(), found: m.len() });
    }
    let eig = sym_eigen(q.sym())?;
    let shift = eig.vectors.transpose() * (m - center);
    let s2 = sigma * sigma;
    let mut log_integral = 0.0;
    for (k, &qk) in eig.values.iter().enumerate() {
        let qk = qk.max(0.0);
        log_integral += -0.5 * (1.0 + s2 * qk / epsilon).ln() - qk * shift[k] * shift[k] / (2.0 * (s2 * qk + epsilon));
    }
    Ok(a + epsilon * log_integral)
}

/// The smoothing slack `d ε log(1/ε)`.
pub fn smoothing_slack(d: usize, epsilon: f64) -> f64 {
    d as f64 * epsilon * (1.0 / epsilon).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_vec(xs.to_vec())
    }

    fn norm_cost(d: usize) -> CostFunction {
        CostFunction::MahalanobisNorm { lambda: PsdMatrix::identity(d) }
    }

    #[test]
    fn dual_point_rejects_negative_lambda() {
        assert!(DualPoint::new(v(&[1.0]), -0.1).is_err());
        let mut p = DualPoint::new(v(&[1.0]), 0.5).unwrap();
        p.set_lambda_projected(-3.0);
        assert_eq!(p.lambda(), 0.0);
    }

    #[test]
    fn psi_examples() {
        let obj = DualObjective::new(CostFunction::squared_euclidean(), Loss::Logistic, 0.3).unwrap();
        let x = v(&[0.5, -1.0]);
        let p = DualPoint::new(v(&[0.7, 0.2]), 2.0).unwrap();
        assert_abs_diff_eq!(obj.psi(&x, &x, 1.0, &p), Loss::Logistic.value(&x, 1.0, &p.beta) + 0.6, epsilon = 1e-15);
        let u = v(&[1.0, 1.0]);
        let p0 = DualPoint::new(v(&[0.7, 0.2]), 0.0).unwrap();
        assert_eq!(obj.psi(&u, &x, 1.0, &p0), Loss::Logistic.value(&u, 1.0, &p0.beta));
        let pz = DualPoint::new(v(&[0.0, 0.0]), 2.0).unwrap();
        let c = (&u - &x).norm_squared();
        assert_abs_diff_eq!(obj.psi(&u, &x, -1.0, &pz), 2f64.ln() - 2.0 * (c - 0.3), epsilon = 1e-14);
    }

    #[test]
    fn exact_pins_adversary_for_large_lambda() {
        let obj = DualObjective::new(norm_cost(2), Loss::Logistic, 0.1).unwrap();
        let x = v(&[0.3, -0.4]);
        let beta = v(&[1.0, 2.0]);
        for lam in [10.0, 20.0] {
            let p = DualPoint::new(beta.clone(), lam).unwrap();
            let r = obj.phi_exact(&x, 1.0, &p, &SearchConfig::default()).unwrap();
            assert_abs_diff_eq!(r.value, Loss::Logistic.value(&x, 1.0, &beta) + lam * 0.1, epsilon = 1e-5);
        }
    }

    #[test]
    fn exact_quadratic_matches_closed_form_and_detects_unbounded() {
        let lam_m = PsdMatrix::from_diagonal(&[2.0, 0.5]).unwrap();
        let obj = DualObjective::new(CostFunction::Mahalanobis { lambda: lam_m.clone() }, Loss::Squared, 0.2).unwrap();
        let x = v(&[0.4, -0.3]);
        let beta = v(&[0.6, 0.3]);
        let y = 1.1;
        let nb2 = beta[0] * beta[0] / 2.0 + beta[1] * beta[1] / 0.5;
        let e = y - x.dot(&beta);
        let gamma = 2.0 * nb2;
        let p = DualPoint::new(beta.clone(), gamma).unwrap();
        let r = obj.phi_exact(&x, y, &p, &SearchConfig::default()).unwrap();
        assert_abs_diff_eq!(r.value, e * e * gamma / (gamma - nb2) + gamma * 0.2, epsilon = 1e-6);
        for lam in [0.5 * nb2, nb2] {
            let p = DualPoint::new(beta.clone(), lam).unwrap();
            assert!(matches!(obj.phi_exact(&x, y, &p, &SearchConfig::default()), Err(SmoothError::Unbounded { .. })));
        }
    }

    #[test]
    fn smoothed_constant_psi_is_exact() {
        // β = 0 and λ = 0: ψ ≡ log 2.
        let obj = DualObjective::new(norm_cost(2), Loss::Logistic, 0.1).unwrap();
        let p = DualPoint::new(v(&[0.0, 0.0]), 0.0).unwrap();
        let cfg = SmoothingConfig { epsilon: 0.01, ..SmoothingConfig::default() };
        let val = obj.phi_smoothed(&v(&[1.0, 2.0]), 1.0, &p, &cfg, 7).unwrap();
        assert_abs_diff_eq!(val, 2f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn smoothed_large_epsilon_is_the_mean() {
        let obj = DualObjective::new(CostFunction::squared_euclidean(), Loss::Logistic, 0.1).unwrap();
        let x = v(&[0.2, 0.1]);
        let p = DualPoint::new(v(&[0.5, -1.0]), 0.3).unwrap();
        let cfg = SmoothingConfig { epsilon: 1e6, samples_l: 500, ..SmoothingConfig::default() };
        let z = standard_normal_draws(3, 500, 2);
        let mean = (0..500).map(|k| obj.psi(&(&x + z.row(k).transpose()), &x, 1.0, &p)).sum::<f64>() / 500.0;
        assert!((obj.phi_smoothed(&x, 1.0, &p, &cfg, 3).unwrap() - mean).abs() < 1e-3);
    }

    #[test]
    fn gradient_matches_common_random_number_differences() {
        let obj = DualObjective::new(CostFunction::squared_euclidean(), Loss::Logistic, 0.2).unwrap();
        let x = v(&[0.2, 0.1]);
        let p = DualPoint::new(v(&[0.5, -1.0]), 0.8).unwrap();
        let cfg = SmoothingConfig { epsilon: 0.3, samples_l: 2000, ..SmoothingConfig::default() };
        let (gb, gl) = obj.grad_smoothed(&x, -1.0, &p, &cfg, 11).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            let mut bp = p.clone();
            bp.beta[k] += h;
            let mut bm = p.clone();
            bm.beta[k] -= h;
            let fd = (obj.phi_smoothed(&x, -1.0, &bp, &cfg, 11).unwrap() - obj.phi_smoothed(&x, -1.0, &bm, &cfg, 11).unwrap()) / (2.0 * h);
            assert!((fd - gb[k]).abs() <= 1e-6 * (1.0 + gb[k].abs()));
        }
        let lp = DualPoint::new(p.beta.clone(), 0.8 + h).unwrap();
        let lm = DualPoint::new(p.beta.clone(), 0.8 - h).unwrap();
        let fd = (obj.phi_smoothed(&x, -1.0, &lp, &cfg, 11).unwrap() - obj.phi_smoothed(&x, -1.0, &lm, &cfg, 11).unwrap()) / (2.0 * h);
        assert!((fd - gl).abs() <= 1e-6 * (1.0 + gl.abs()));
    }

    #[test]
    fn closed_form_quadratic_sandwich() {
        let q = PsdMatrix::from_diagonal(&[1.0, 3.0]).unwrap();
        let m = v(&[0.1, -0.2]);
        for eps in [0.1, 0.01] {
            let val = smoothed_quadratic_closed_form(1.5, &m, &q, &DVector::zeros(2), 1.0, eps).unwrap();
            assert!(val <= 1.5);
            assert!(val >= 1.5 - smoothing_slack(2, eps));
        }
    }

    #[test]
    fn growth_examples() {
        let data = Dataset::from_rows(&[&[0.5, 1.0], &[-1.0, 0.2]], &[1.0, -1.0], Task::Classification).unwrap();
        let lg = DualObjective::new(CostFunction::Mahalanobis { lambda: PsdMatrix::identity(2) }, Loss::Logistic, 0.1).unwrap();
        let cert = lg.check_growth(&v(&[3.0, -2.0]), &data, &ProbeConfig::default());
        assert!(cert.holds && cert.gamma.is_finite());
        let reg = Dataset::from_rows(&[&[0.5, 1.0], &[-1.0, 0.2]], &[1.0, -1.0], Task::Regression).unwrap();
        let ql = DualObjective::new(norm_cost(2), Loss::Squared, 0.1).unwrap();
        assert!(!ql.check_growth(&v(&[3.0, -2.0]), &reg, &ProbeConfig::default()).holds);
        let qq = DualObjective::new(CostFunction::squared_euclidean(), Loss::Squared, 0.1).unwrap();
        assert!(qq.check_growth(&v(&[3.0, -2.0]), &reg, &ProbeConfig::default()).holds);
    }

    #[test]
    fn substreams_differ() {
        assert_ne!(substream_seed(1, 2, 3), substream_seed(1, 3, 2));
        assert_eq!(substream_seed(5, 6, 7), substream_seed(5, 6, 7));
    }
}
