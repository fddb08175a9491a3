//! Ground costs and the discrete Kantorovich problem.
//!
//! Every cost here charges `+∞` for moving mass between points with different
//! labels: the adversary may move features but never flip a response. The
//! transportation simplex keeps these infinities exact by running on
//! lexicographic costs `(infinite mass, finite cost)`, so a plan only reports a
//! finite value when it puts no mass on a label-changing cell.

use std::collections::VecDeque;

use nalgebra::DVector;
use thiserror::Error;

use crate::data::Point;
use crate::linalg::{CholeskyFactor, LinalgError, PsdMatrix};
use crate::metric::{FeatureMap, MetricError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("support too large for brute force ({rows}x{cols}, limit 5x5)")]
    SupportTooLarge { rows: usize, cols: usize },
    #[error("transportation simplex hit the pivot cap of {0}")]
    PivotCap(usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// A ground cost `c((x, y), (x', y'))` that is `+∞` whenever `y ≠ y'`.
#[derive(Debug, Clone)]
pub enum CostFunction {
    /// `‖x − x'‖_q²`.
    LqSquared { q: f64 },
    /// `d²_Λ(x, x') = (x − x')ᵀ Λ (x − x')`.
    Mahalanobis { lambda: PsdMatrix },
    /// `d_Λ(x, x')`, the unsquared norm. Under this cost the worst-case
    /// logistic loss has the exact dual-norm penalty form.
    MahalanobisNorm { lambda: PsdMatrix },
    /// `d²_Λ(Φ(x), Φ(x'))` with `Λ` acting on feature space.
    MahalanobisFeature { lambda: PsdMatrix, map: FeatureMap },
}

impl CostFunction {
    pub fn squared_euclidean() -> Self {
        CostFunction::LqSquared { q: 2.0 }
    }

    /// Input dimension of `x`, when the cost fixes one.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            CostFunction::LqSquared { .. } => None,
            CostFunction::Mahalanobis { lambda } | CostFunction::MahalanobisNorm { lambda } => Some(lambda.dim()),
            CostFunction::MahalanobisFeature { map, .. } => Some(map.input_dim),
        }
    }

    /// The finite branch `c(x, x')` for equal labels.
    pub fn feature_cost(&self, x: &DVector<f64>, x_prime: &DVector<f64>) -> Result<f64, TransportError> {
        if x.len() != x_prime.len() {
            return Err(TransportError::DimensionMismatch { expected: x.len(), found: x_prime.len() });
        }
        if let Some(d) = self.input_dim() {
            if d != x.len() {
                return Err(TransportError::DimensionMismatch { expected: d, found: x.len() });
            }
        }
        Ok(match self {
            CostFunction::LqSquared { q } => {
                let diff = x - x_prime;
                let norm = if q.is_infinite() {
                    diff.amax()
                } else {
                    diff.iter().map(|v| v.abs().powf(*q)).sum::<f64>().powf(1.0 / q)
                };
                norm * norm
            }
            CostFunction::Mahalanobis { lambda } => lambda.sym().quad_form(&(x - x_prime))?.max(0.0),
            CostFunction::MahalanobisNorm { lambda } => lambda.sym().quad_form(&(x - x_prime))?.max(0.0).sqrt(),
            CostFunction::MahalanobisFeature { lambda, map } => {
                let diff = map.apply(x)? - map.apply(x_prime)?;
                lambda.sym().quad_form(&diff)?.max(0.0)
            }
        })
    }

    pub fn is_symmetric(&self) -> bool {
        true
    }
}

/// Precomputed form of a cost for hot loops: finite branch only.
#[derive(Debug, Clone)]
pub(crate) enum FastCost {
    Generic(CostFunction),
    Mahalanobis { factor_t: nalgebra::DMatrix<f64>, squared: bool },
}

impl FastCost {
    pub(crate) fn new(c: &CostFunction) -> Self {
        match c {
            CostFunction::Mahalanobis { lambda } | CostFunction::MahalanobisNorm { lambda } => {
                // Λ = R Rᵀ with R from an eigen square root so PSD but singular Λ also works.
                let eig = crate::linalg::sym_eigen(lambda.sym()).expect("certified PSD matrix decomposes");
                let root = eig.reconstruct_with(|w| w.max(0.0).sqrt());
                FastCost::Mahalanobis {
                    factor_t: root,
                    squared: matches!(c, CostFunction::Mahalanobis { .. }),
                }
            }
            other => FastCost::Generic(other.clone()),
        }
    }

    /// `c(u, x)` for `u − x = diff`.
    pub(crate) fn of_diff(&self, diff: &DVector<f64>, u: &DVector<f64>, x: &DVector<f64>) -> f64 {
        match self {
            FastCost::Mahalanobis { factor_t, squared } => {
                let q = (factor_t * diff).norm_squared();
                if *squared {
                    q
                } else {
                    q.sqrt()
                }
            }
            FastCost::Generic(c) => c.feature_cost(u, x).unwrap_or(f64::INFINITY),
        }
    }

    /// `∇_u c(u, x)` where available in closed form. The norm cost uses the
    /// zero subgradient at `u = x`.
    pub(crate) fn grad_u(&self, diff: &DVector<f64>) -> Option<DVector<f64>> {
        match self {
            FastCost::Mahalanobis { factor_t, squared } => {
                let r = factor_t * diff;
                let g = factor_t * &r;
                if *squared {
                    Some(g * 2.0)
                } else {
                    let n = r.norm();
                    Some(if n > 0.0 { g / n } else { DVector::zeros(diff.len()) })
                }
            }
            FastCost::Generic(_) => None,
        }
    }
}

/// Evaluates `c(w, w')`, returning `f64::INFINITY` when the labels differ.
pub fn eval_cost(c: &CostFunction, w: &Point, w_prime: &Point) -> Result<f64, TransportError> {
    let finite = c.feature_cost(&w.x, &w_prime.x)?;
    if w.y != w_prime.y {
        Ok(f64::INFINITY)
    } else {
        Ok(finite)
    }
}

/// Finite-support probability measure.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    atoms: Vec<Point>,
    weights: Vec<f64>,
}

impl DiscreteDistribution {
    /// Weights must be nonnegative and sum to one within `1e-12`.
    pub fn new(atoms: Vec<Point>, weights: Vec<f64>) -> Result<Self, TransportError> {
        if atoms.len() != weights.len() {
            return Err(TransportError::InvalidDistribution(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        if atoms.is_empty() {
            return Err(TransportError::InvalidDistribution("empty support".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(TransportError::InvalidDistribution(format!("bad weight {w}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(TransportError::InvalidDistribution(format!("weights sum to {total}")));
        }
        let d = atoms[0].x.len();
        if let Some(a) = atoms.iter().find(|a| a.x.len() != d) {
            return Err(TransportError::DimensionMismatch { expected: d, found: a.x.len() });
        }
        Ok(Self { atoms, weights })
    }

    /// Rescales positive weights to sum to one.
    pub fn normalized(atoms: Vec<Point>, weights: Vec<f64>) -> Result<Self, TransportError> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(TransportError::InvalidDistribution("weights sum to zero".into()));
        }
        Self::new(atoms, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(atoms: Vec<Point>) -> Result<Self, TransportError> {
        let n = atoms.len();
        Self::normalized(atoms, vec![1.0; n])
    }

    pub fn atoms(&self) -> &[Point] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Feasibility {
    Finite,
    /// No coupling avoids moving mass across labels.
    LabelInfeasible { witness: String },
}

/// Optimal coupling `π` (rows index `P`, columns index `Q`) with its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Vec<Vec<f64>>,
    pub value: f64,
    pub feasibility: Feasibility,
    pub pivots: usize,
}

/// Lexicographic cost: mass-weighted count of infinite cells first, then the finite cost.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Lex {
    inf: f64,
    fin: f64,
}

impl Lex {
    fn of(c: f64) -> Self {
        if c.is_infinite() {
            Lex { inf: 1.0, fin: 0.0 }
        } else {
            Lex { inf: 0.0, fin: c }
        }
    }
    fn sub(self, o: Lex) -> Lex {
        Lex { inf: self.inf - o.inf, fin: self.fin - o.fin }
    }
}

fn cost_matrix(c: &CostFunction, p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<Vec<Vec<f64>>, TransportError> {
    p.atoms
        .iter()
        .map(|a| q.atoms.iter().map(|b| eval_cost(c, a, b)).collect::<Result<Vec<_>, _>>())
        .collect()
}

/// Spanning-tree basis of the transportation problem.
struct Basis {
    m: usize,
    n: usize,
    cells: Vec<(usize, usize)>,
}

impl Basis {
    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        // Nodes 0..m are rows, m..m+n columns; edges carry the cell index.
        let mut adj = vec![Vec::new(); self.m + self.n];
        for (k, &(i, j)) in self.cells.iter().enumerate() {
            adj[i].push((self.m + j, k));
            adj[self.m + j].push((i, k));
        }
        adj
    }

    /// Potentials with `u_0 = 0` and `u_i + v_j = c_ij` on basic cells.
    fn potentials(&self, cost: &[Vec<Lex>]) -> (Vec<Lex>, Vec<Lex>) {
        let adj = self.adjacency();
        let mut pot = vec![None; self.m + self.n];
        pot[0] = Some(Lex { inf: 0.0, fin: 0.0 });
        let mut queue = VecDeque::from([0usize]);
        while let Some(node) = queue.pop_front() {
            let here = pot[node].expect("visited nodes carry a potential");
            for &(next, k) in &adj[node] {
                if pot[next].is_none() {
                    let (i, j) = self.cells[k];
                    pot[next] = Some(cost[i][j].sub(here));
                    queue.push_back(next);
                }
            }
        }
        let pot: Vec<Lex> = pot.into_iter().map(|p| p.expect("basis is a spanning tree")).collect();
        (pot[..self.m].to_vec(), pot[self.m..].to_vec())
    }

    /// Cells on the tree path from column `j` to row `i`, in order.
    fn path(&self, i: usize, j: usize) -> Vec<usize> {
        let adj = self.adjacency();
        let start = self.m + j;
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; self.m + self.n];
        let mut seen = vec![false; self.m + self.n];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(node) = queue.pop_front() {
            if node == i {
                break;
            }
            for &(next, k) in &adj[node] {
                if !seen[next] {
                    seen[next] = true;
                    prev[next] = Some((node, k));
                    queue.push_back(next);
                }
            }
        }
        let mut out = Vec::new();
        let mut node = i;
        while node != start {
            let (p, k) = prev[node].expect("tree is connected");
            out.push(k);
            node = p;
        }
        out.reverse();
        out
    }

    /// Basic flows for marginals `a`, `b` by leaf elimination.
    fn flows(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let total = self.m + self.n;
        let mut remaining: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
        let mut degree = vec![0usize; total];
        let adj = self.adjacency();
        for (node, edges) in adj.iter().enumerate() {
            degree[node] = edges.len();
        }
        let mut done = vec![false; self.cells.len()];
        let mut flow = vec![0.0; self.cells.len()];
        let mut leaves: Vec<usize> = (0..total).filter(|&v| degree[v] == 1).collect();
        while let Some(leaf) = leaves.pop() {
            if degree[leaf] != 1 {
                continue;
            }
            let Some(&(other, k)) = adj[leaf].iter().find(|(_, k)| !done[*k]) else { continue };
            done[k] = true;
            flow[k] = remaining[leaf];
            remaining[other] -= remaining[leaf];
            remaining[leaf] = 0.0;
            degree[leaf] -= 1;
            degree[other] -= 1;
            if degree[other] == 1 {
                leaves.push(other);
            }
        }
        flow
    }
}

fn is_spanning_tree(m: usize, n: usize, cells: &[(usize, usize)]) -> bool {
    if cells.len() != m + n - 1 {
        return false;
    }
    // Union-find; m+n-1 edges without a cycle span all nodes.
    let mut parent: Vec<usize> = (0..m + n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(i, j) in cells {
        let (a, b) = (find(&mut parent, i), find(&mut parent, m + j));
        if a == b {
            return false;
        }
        parent[a] = b;
    }
    true
}

fn finalize(cost: &[Vec<f64>], plan: Vec<Vec<f64>>, pivots: usize) -> TransportPlan {
    let mut value = 0.0;
    let mut infeasible_mass = 0.0;
    let mut witness = None;
    for (i, row) in plan.iter().enumerate() {
        for (j, &pi) in row.iter().enumerate() {
            if pi <= 0.0 {
                continue;
            }
            if cost[i][j].is_infinite() {
                if pi > 1e-12 {
                    infeasible_mass += pi;
                    witness.get_or_insert((i, j));
                }
            } else {
                value += pi * cost[i][j];
            }
        }
    }
    if infeasible_mass > 0.0 {
        let (i, j) = witness.expect("positive infeasible mass has a witness cell");
        TransportPlan {
            plan,
            value: f64::INFINITY,
            feasibility: Feasibility::LabelInfeasible {
                witness: format!(
                    "label masses differ: every coupling moves at least {infeasible_mass:.3e} mass across labels (e.g. row {i} -> column {j})"
                ),
            },
            pivots,
        }
    } else {
        TransportPlan { plan, value, feasibility: Feasibility::Finite, pivots }
    }
}

const REDUCED_COST_TOL: f64 = 1e-12;

/// Transportation simplex: north-west corner start on ε-perturbed marginals,
/// entering cell by most negative (lexicographic) reduced cost with ties
/// broken by the lowest `(row, column)`, leaving cell by minimum ratio with
/// the same tie rule.
///
/// The perturbation only decides the basis; reported flows are recomputed on
/// the final basis with the exact marginals.
pub fn ot_discrepancy(
    c: &CostFunction,
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
) -> Result<TransportPlan, TransportError> {
    let cost = cost_matrix(c, p, q)?;
    solve_transport(&cost, p.weights(), q.weights())
}

/// Same as [`ot_discrepancy`] on an explicit cost matrix (entries may be `+∞`).
pub fn solve_transport(cost: &[Vec<f64>], a: &[f64], b: &[f64]) -> Result<TransportPlan, TransportError> {
    let m = a.len();
    let n = b.len();
    let lex: Vec<Vec<Lex>> = cost.iter().map(|r| r.iter().map(|&v| Lex::of(v)).collect()).collect();
    let fin_scale = cost
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1.0);

    let eps = 1e-11 / (m + n) as f64;
    let mut ap: Vec<f64> = a.iter().map(|v| v + eps).collect();
    let mut bp = b.to_vec();
    bp[n - 1] += eps * m as f64;
    // Absorb rounding so the perturbed problem balances exactly enough.
    let diff: f64 = ap.iter().sum::<f64>() - bp.iter().sum::<f64>();
    bp[n - 1] += diff;
    if ap.iter().any(|v| *v < 0.0) || bp.iter().any(|v| *v < 0.0) {
        return Err(TransportError::InvalidDistribution("negative marginal".into()));
    }

    // North-west corner.
    let mut cells = Vec::with_capacity(m + n - 1);
    let mut flow = Vec::with_capacity(m + n - 1);
    let (mut i, mut j) = (0, 0);
    loop {
        let x = ap[i].min(bp[j]);
        cells.push((i, j));
        flow.push(x);
        ap[i] -= x;
        bp[j] -= x;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if (ap[i] <= bp[j] && i < m - 1) || j == n - 1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    debug_assert_eq!(cells.len(), m + n - 1);
    let mut basis = Basis { m, n, cells };

    let cap = 50 * (m + n) * (m + n) + 1000;
    let mut pivots = 0;
    loop {
        let (u, v) = basis.potentials(&lex);
        let mut in_basis = vec![vec![false; n]; m];
        for &(bi, bj) in &basis.cells {
            in_basis[bi][bj] = true;
        }
        let mut entering: Option<((usize, usize), Lex)> = None;
        for r in 0..m {
            for s in 0..n {
                if in_basis[r][s] {
                    continue;
                }
                let red = lex[r][s].sub(u[r]).sub(v[s]);
                let red = Lex { inf: red.inf.round(), fin: red.fin };
                let negative = red.inf < 0.0 || (red.inf == 0.0 && red.fin < -REDUCED_COST_TOL * fin_scale);
                if !negative {
                    continue;
                }
                // Strict comparison keeps the lowest (row, column) on ties.
                let better = match entering {
                    None => true,
                    Some((_, best)) => red.inf < best.inf || (red.inf == best.inf && red.fin < best.fin),
                };
                if better {
                    entering = Some(((r, s), red));
                }
            }
        }
        let Some(((ei, ej), _)) = entering else { break };
        if pivots >= cap {
            return Err(TransportError::PivotCap(cap));
        }
        pivots += 1;

        let path = basis.path(ei, ej);
        // Cells at even positions along the path lose mass.
        let mut leave_pos = None;
        let mut theta = f64::INFINITY;
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                let f = flow[k];
                let better = match leave_pos {
                    None => true,
                    Some(lp) => f < theta || (f == theta && basis.cells[k] < basis.cells[path[lp]]),
                };
                if better {
                    theta = f;
                    leave_pos = Some(pos);
                }
            }
        }
        let leave_pos = leave_pos.expect("a cycle always has a losing cell");
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                flow[k] -= theta;
            } else {
                flow[k] += theta;
            }
        }
        let leave_k = path[leave_pos];
        basis.cells[leave_k] = (ei, ej);
        flow[leave_k] = theta;
    }

    // Exact flows on the optimal basis.
    let exact = basis.flows(a, b);
    let mut plan = vec![vec![0.0; n]; m];
    for (k, &(bi, bj)) in basis.cells.iter().enumerate() {
        plan[bi][bj] = if exact[k] < 0.0 { 0.0 } else { exact[k] };
    }
    Ok(finalize(cost, plan, pivots))
}

/// Vertex enumeration oracle: tries every spanning-tree basis, keeps the
/// primal-feasible ones and returns the cheapest (lexicographically). Limited
/// to supports of at most 5 atoms per side.
pub fn ot_brute_force(
    c: &CostFunction,
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
) -> Result<f64, TransportError> {
    let cost = cost_matrix(c, p, q)?;
    brute_force_value(&cost, p.weights(), q.weights())
}

/// Brute-force value for an explicit cost matrix.
pub fn brute_force_value(cost: &[Vec<f64>], a: &[f64], b: &[f64]) -> Result<f64, TransportError> {
    let m = a.len();
    let n = b.len();
    if m > 5 || n > 5 {
        return Err(TransportError::SupportTooLarge { rows: m, cols: n });
    }
    let all: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let size = m + n - 1;
    let mut best: Option<(f64, f64)> = None;
    let mut chosen = Vec::with_capacity(size);
    enumerate(&all, 0, size, &mut chosen, &mut |cells| {
        if !is_spanning_tree(m, n, cells) {
            return;
        }
        let basis = Basis { m, n, cells: cells.to_vec() };
        let flows = basis.flows(a, b);
        if flows.iter().any(|f| *f < -1e-12) {
            return;
        }
        let mut inf_mass = 0.0;
        let mut fin = 0.0;
        for (k, &(i, j)) in cells.iter().enumerate() {
            let f = flows[k].max(0.0);
            if cost[i][j].is_infinite() {
                if f > 1e-12 {
                    inf_mass += f;
                }
            } else {
                fin += f * cost[i][j];
            }
        }
        let cand = (inf_mass, fin);
        best = match best {
            None => Some(cand),
            Some(b) if cand.0 < b.0 - 1e-12 || (cand.0 <= b.0 + 1e-12 && cand.1 < b.1) => Some(cand),
            keep => keep,
        };
    });
    let (inf_mass, fin) = best.expect("the north-west corner basis is always feasible");
    Ok(if inf_mass > 0.0 { f64::INFINITY } else { fin })
}

fn enumerate<F: FnMut(&[(usize, usize)])>(
    all: &[(usize, usize)],
    start: usize,
    size: usize,
    chosen: &mut Vec<(usize, usize)>,
    visit: &mut F,
) {
    if chosen.len() == size {
        visit(chosen);
        return;
    }
    let need = size - chosen.len();
    for k in start..=all.len().saturating_sub(need) {
        chosen.push(all[k]);
        enumerate(all, k + 1, size, chosen, visit);
        chosen.pop();
    }
}

/// Cholesky factor of a cost's metric, when it has one.
pub fn cost_factor(c: &CostFunction) -> Option<Result<CholeskyFactor, LinalgError>> {
    match c {
        CostFunction::Mahalanobis { lambda } | CostFunction::MahalanobisNorm { lambda } => Some(lambda.cholesky()),
        _ => None,
    }
}
