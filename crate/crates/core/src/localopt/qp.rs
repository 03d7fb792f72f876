//! Dense convex QP solver.
//!
//! Canonical form:
//!
//! ```text
//!   min  ½ xᵀQx + cᵀx + constant
//!   s.t. E x  = f
//!        G x <= h
//!        l <= x <= u        (entries may be infinite)
//! ```
//!
//! Multiplier convention: `L = f(x) + yᵀ(Ex − f) + zᵀ(Gx − h) + z_lᵀ(l − x) + z_uᵀ(x − u)`,
//! so stationarity reads `Qx + c + Eᵀy + Gᵀz − z_l + z_u = 0` and every inequality
//! multiplier is non-negative.
//!
//! The solve runs in three stages:
//! 1. variables with `l == u` are substituted out;
//! 2. a Mehrotra predictor–corrector interior-point method drives the residuals down;
//! 3. the active set read off the interior iterate is solved exactly (polish) and
//!    kept when it certifies a smaller KKT residual.
//!
//! When the interior method stalls, a phase-1 least-violation problem decides
//! between `Infeasible` (with the worst-violated tagged row) and `MaxIter`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ConstraintId;

/// Violation above which a phase-1 problem declares the original infeasible.
const INFEASIBILITY_TOL: f64 = 1e-6;
/// Steps taken towards the boundary are shortened by this fraction.
const STEP_FRACTION: f64 = 0.995;
/// Refinement passes on each Newton solve.
const REFINE_STEPS: usize = 2;
/// Iterations without a new best merit before the interior-point loop gives up.
const STALL_ITERS: usize = 25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

/// Which model constraint a QP row (or variable bound) encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowTag {
    pub constraint: ConstraintId,
    pub agent: Option<u32>,
    pub slot: Option<usize>,
}

impl RowTag {
    pub const GENERIC: RowTag = RowTag {
        constraint: ConstraintId::Generic,
        agent: None,
        slot: None,
    };

    pub fn new(constraint: ConstraintId, agent: Option<u32>, slot: Option<usize>) -> Self {
        Self {
            constraint,
            agent,
            slot,
        }
    }
}

impl std::fmt::Display for RowTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.constraint.describe())?;
        if let Some(a) = self.agent {
            write!(f, ", agent {a}")?;
        }
        if let Some(s) = self.slot {
            write!(f, ", slot {s}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub constant: f64,
    pub eq: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub eq_tags: Vec<RowTag>,
    pub ineq_tags: Vec<RowTag>,
    /// Tags for the bounds of each variable.
    pub var_tags: Vec<RowTag>,
}

impl QpProblem {
    /// Unconstrained problem `min ½ xᵀQx + cᵀx`.
    pub fn new(q: DMatrix<f64>, c: DVector<f64>) -> Self {
        let n = c.len();
        Self {
            q,
            c,
            constant: 0.0,
            eq: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
            eq_tags: Vec::new(),
            ineq_tags: Vec::new(),
            var_tags: vec![RowTag::GENERIC; n],
        }
    }

    pub fn with_equalities(mut self, eq: DMatrix<f64>, rhs: DVector<f64>) -> Self {
        self.eq_tags = vec![RowTag::GENERIC; eq.nrows()];
        self.eq = eq;
        self.eq_rhs = rhs;
        self
    }

    pub fn with_inequalities(mut self, ineq: DMatrix<f64>, rhs: DVector<f64>) -> Self {
        self.ineq_tags = vec![RowTag::GENERIC; ineq.nrows()];
        self.ineq = ineq;
        self.ineq_rhs = rhs;
        self
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q * x)) + self.c.dot(x) + self.constant
    }

    /// Analytic gradient `Qx + c`.
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q * x + &self.c
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.n();
        let dim = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(QpError::Dimension(format!("{what}: expected {want}, got {got}")))
            }
        };
        dim("Q rows", self.q.nrows(), n)?;
        dim("Q cols", self.q.ncols(), n)?;
        dim("E cols", self.eq.ncols(), n)?;
        dim("f len", self.eq_rhs.len(), self.eq.nrows())?;
        dim("G cols", self.ineq.ncols(), n)?;
        dim("h len", self.ineq_rhs.len(), self.ineq.nrows())?;
        dim("lower len", self.lower.len(), n)?;
        dim("upper len", self.upper.len(), n)?;
        dim("eq tags", self.eq_tags.len(), self.eq.nrows())?;
        dim("ineq tags", self.ineq_tags.len(), self.ineq.nrows())?;
        dim("var tags", self.var_tags.len(), n)?;

        let finite = |m: &[f64]| m.iter().all(|v| v.is_finite());
        if !finite(self.q.as_slice())
            || !finite(self.c.as_slice())
            || !finite(self.eq.as_slice())
            || !finite(self.eq_rhs.as_slice())
            || !finite(self.ineq.as_slice())
            || !finite(self.ineq_rhs.as_slice())
            || !self.constant.is_finite()
        {
            return Err(QpError::InvalidProblem("non-finite data".into()));
        }
        let scale = self.q.amax().max(1.0);
        for i in 0..n {
            for j in 0..i {
                if (self.q[(i, j)] - self.q[(j, i)]).abs() > 1e-12 * scale {
                    return Err(QpError::InvalidProblem(format!("Q not symmetric at ({i},{j})")));
                }
            }
            if self.lower[i].is_nan() || self.upper[i].is_nan() || self.lower[i] > self.upper[i] {
                return Err(QpError::InvalidProblem(format!("bounds inverted for variable {i}")));
            }
            if self.lower[i] == f64::INFINITY || self.upper[i] == f64::NEG_INFINITY {
                return Err(QpError::InvalidProblem(format!("empty bound for variable {i}")));
            }
        }
        // Smallest eigenvalue >= -1e-8  <=>  Q + 1e-8·I positive definite,
        // checked per block of the sparsity pattern.
        let shift = 1e-8 * (1.0 + f64::EPSILON);
        for idx in components(n, off_diagonal(&self.q)) {
            let block = DMatrix::from_fn(idx.len(), idx.len(), |a, b| {
                self.q[(idx[a], idx[b])] + if a == b { shift } else { 0.0 }
            });
            if block.cholesky().is_none() {
                return Err(QpError::InvalidProblem("Q is not positive semidefinite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// KKT residual below which a solution is reported optimal.
    pub qp_tol: f64,
    /// Interior-point iteration budget.
    pub max_qp_iter: usize,
    /// Curvature floor added to otherwise flat directions.
    pub regularization: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            qp_tol: 1e-8,
            max_qp_iter: 20000,
            regularization: 1e-9,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), QpError> {
        if !(self.qp_tol > 0.0) || !(self.regularization > 0.0) || self.max_qp_iter == 0 {
            return Err(QpError::InvalidProblem(
                "solver config values must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfeasibilityReport {
    /// Constraint with the largest unavoidable violation.
    pub worst: RowTag,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub eq_duals: DVector<f64>,
    pub ineq_duals: DVector<f64>,
    pub lower_duals: DVector<f64>,
    pub upper_duals: DVector<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: QpStatus,
    pub infeasibility: Option<InfeasibilityReport>,
}

/// Largest of the stationarity, primal feasibility, dual feasibility and
/// complementarity violations of `solution` for `problem`.
pub fn kkt_residual(problem: &QpProblem, solution: &QpSolution) -> f64 {
    let x = &solution.x;
    let mut grad = &problem.q * x + &problem.c;
    grad.gemv_tr(1.0, &problem.eq, &solution.eq_duals, 1.0);
    grad.gemv_tr(1.0, &problem.ineq, &solution.ineq_duals, 1.0);
    grad -= &solution.lower_duals;
    grad += &solution.upper_duals;
    let mut worst = grad.amax();

    if problem.eq.nrows() > 0 {
        worst = worst.max((&problem.eq * x - &problem.eq_rhs).amax());
    }
    if problem.ineq.nrows() > 0 {
        let slack = &problem.ineq_rhs - &problem.ineq * x;
        for (&s, &z) in slack.iter().zip(solution.ineq_duals.iter()) {
            worst = worst.max(-s).max(-z).max((s * z).abs());
        }
    }
    for i in 0..problem.n() {
        let (l, u, xi) = (problem.lower[i], problem.upper[i], x[i]);
        let (zl, zu) = (solution.lower_duals[i], solution.upper_duals[i]);
        worst = worst.max(-zl).max(-zu);
        if l.is_finite() {
            worst = worst.max(l - xi).max((zl * (xi - l)).abs());
        } else {
            worst = worst.max(zl.abs());
        }
        if u.is_finite() {
            worst = worst.max(xi - u).max((zu * (u - xi)).abs());
        } else {
            worst = worst.max(zu.abs());
        }
    }
    if worst.is_nan() {
        f64::INFINITY
    } else {
        worst
    }
}

/// Problem with fixed variables substituted out and empty rows removed.
struct Reduced {
    free: Vec<usize>,
    fixed: Vec<(usize, f64)>,
    eq_rows: Vec<usize>,
    ineq_rows: Vec<usize>,
    q: DMatrix<f64>,
    c: DVector<f64>,
    e: DMatrix<f64>,
    f: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

enum Reduction {
    Ok(Box<Reduced>),
    /// A row with no free variables is violated.
    Inconsistent(InfeasibilityReport),
}

fn reduce(p: &QpProblem) -> Reduction {
    let n = p.n();
    let mut free = Vec::new();
    let mut fixed = Vec::new();
    for i in 0..n {
        let (l, u) = (p.lower[i], p.upper[i]);
        if l.is_finite() && u.is_finite() && u - l <= 1e-13 * (1.0 + l.abs()) {
            fixed.push((i, 0.5 * (l + u)));
        } else {
            free.push(i);
        }
    }
    let mut x_fixed = DVector::zeros(n);
    for &(i, v) in &fixed {
        x_fixed[i] = v;
    }
    let nf = free.len();

    let row_is_empty = |m: &DMatrix<f64>, r: usize| free.iter().all(|&j| m[(r, j)] == 0.0);

    let mut eq_rows = Vec::new();
    let eq_shift = &p.eq * &x_fixed;
    for r in 0..p.eq.nrows() {
        if row_is_empty(&p.eq, r) {
            let miss = (eq_shift[r] - p.eq_rhs[r]).abs();
            if miss > INFEASIBILITY_TOL {
                return Reduction::Inconsistent(InfeasibilityReport {
                    worst: p.eq_tags[r],
                    magnitude: miss,
                });
            }
        } else {
            eq_rows.push(r);
        }
    }
    let mut ineq_rows = Vec::new();
    let ineq_shift = &p.ineq * &x_fixed;
    for r in 0..p.ineq.nrows() {
        if row_is_empty(&p.ineq, r) {
            let miss = ineq_shift[r] - p.ineq_rhs[r];
            if miss > INFEASIBILITY_TOL {
                return Reduction::Inconsistent(InfeasibilityReport {
                    worst: p.ineq_tags[r],
                    magnitude: miss,
                });
            }
        } else {
            ineq_rows.push(r);
        }
    }

    let q = DMatrix::from_fn(nf, nf, |a, b| p.q[(free[a], free[b])]);
    let qx = &p.q * &x_fixed;
    let c = DVector::from_fn(nf, |a, _| p.c[free[a]] + qx[free[a]]);
    let e = DMatrix::from_fn(eq_rows.len(), nf, |r, a| p.eq[(eq_rows[r], free[a])]);
    let f = DVector::from_fn(eq_rows.len(), |r, _| p.eq_rhs[eq_rows[r]] - eq_shift[eq_rows[r]]);
    let g = DMatrix::from_fn(ineq_rows.len(), nf, |r, a| p.ineq[(ineq_rows[r], free[a])]);
    let h = DVector::from_fn(ineq_rows.len(), |r, _| {
        p.ineq_rhs[ineq_rows[r]] - ineq_shift[ineq_rows[r]]
    });
    let lower = DVector::from_fn(nf, |a, _| p.lower[free[a]]);
    let upper = DVector::from_fn(nf, |a, _| p.upper[free[a]]);
    Reduction::Ok(Box::new(Reduced {
        free,
        fixed,
        eq_rows,
        ineq_rows,
        q,
        c,
        e,
        f,
        g,
        h,
        lower,
        upper,
    }))
}

/// Primal–dual point of the reduced problem.
#[derive(Clone)]
struct Point {
    x: DVector<f64>,
    y: DVector<f64>,
    zg: DVector<f64>,
    sg: DVector<f64>,
    zl: DVector<f64>,
    sl: DVector<f64>,
    zu: DVector<f64>,
    su: DVector<f64>,
}

struct Residuals {
    dual: DVector<f64>,
    eq: DVector<f64>,
    g: DVector<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
}

impl Residuals {
    fn primal_inf(&self) -> f64 {
        self.eq.amax().max(self.g.amax()).max(self.l.amax()).max(self.u.amax())
    }
}

struct Ipm<'a> {
    r: &'a Reduced,
    lo: Vec<usize>,
    up: Vec<usize>,
    reg: f64,
    blocks: Vec<Block>,
    singles: Vec<Single>,
}

/// Variables coupled through `Q` or a shared inequality row. The Newton
/// matrix `Q + GᵀDG + bounds` is block diagonal over these groups.
struct Block {
    idx: Vec<usize>,
    /// Inequality rows with a nonzero in the block.
    rows: Vec<usize>,
    q: DMatrix<f64>,
    /// `G` restricted to `rows` × `idx`.
    g: DMatrix<f64>,
}

/// Uncoupled variable: its Newton block is a scalar.
struct Single {
    i: usize,
    q: f64,
    /// Nonzeros `(row, value)` of its `G` column.
    g: Vec<(usize, f64)>,
}

/// Connected components of the graph on `0..n` with the given edges,
/// each sorted, ordered by smallest member.
fn components(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for (a, b) in edges {
        let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let ri = root(&mut parent, i);
        if slot[ri] == usize::MAX {
            slot[ri] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[ri]].push(i);
    }
    groups
}

fn off_diagonal(q: &DMatrix<f64>) -> impl Iterator<Item = (usize, usize)> + '_ {
    let n = q.nrows();
    (0..n).flat_map(move |j| (0..j).filter(move |&i| q[(i, j)] != 0.0).map(move |i| (i, j)))
}

fn coupling_blocks(r: &Reduced) -> (Vec<Block>, Vec<Single>) {
    let n = r.c.len();
    let mut row_links = Vec::new();
    for k in 0..r.g.nrows() {
        let mut first = None;
        for j in 0..n {
            if r.g[(k, j)] != 0.0 {
                match first {
                    None => first = Some(j),
                    Some(f) => row_links.push((f, j)),
                }
            }
        }
    }
    let mut blocks = Vec::new();
    let mut singles = Vec::new();
    for idx in components(n, off_diagonal(&r.q).chain(row_links)) {
        if let [i] = idx[..] {
            let g = (0..r.g.nrows()).filter(|&k| r.g[(k, i)] != 0.0).map(|k| (k, r.g[(k, i)])).collect();
            singles.push(Single { i, q: r.q[(i, i)], g });
            continue;
        }
        let rows: Vec<usize> = (0..r.g.nrows())
            .filter(|&k| idx.iter().any(|&j| r.g[(k, j)] != 0.0))
            .collect();
        let q = DMatrix::from_fn(idx.len(), idx.len(), |a, b| r.q[(idx[a], idx[b])]);
        let g = DMatrix::from_fn(rows.len(), idx.len(), |a, b| r.g[(rows[a], idx[b])]);
        blocks.push(Block { idx, rows, q, g });
    }
    (blocks, singles)
}

struct Direction {
    dx: DVector<f64>,
    dy: DVector<f64>,
    dzg: DVector<f64>,
    dsg: DVector<f64>,
    dzl: DVector<f64>,
    dsl: DVector<f64>,
    dzu: DVector<f64>,
    dsu: DVector<f64>,
}

/// Factorized Newton system for one interior-point iterate.
struct Newton {
    /// One factor per coupling block.
    chol: Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    /// Inverse Newton diagonal of each uncoupled variable.
    inv_single: Vec<f64>,
    /// `H⁻¹ Eᵀ`.
    hinv_et: DMatrix<f64>,
    schur: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    dg: DVector<f64>,
    dl: DVector<f64>,
    du: DVector<f64>,
    /// Bound barrier contribution to the Newton diagonal.
    bound: DVector<f64>,
}

fn cholesky_with_shift(
    mut m: DMatrix<f64>,
    base_shift: f64,
) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(ch) = m.clone().cholesky() {
        return Some(ch);
    }
    let scale = (0..m.nrows()).map(|i| m[(i, i)].abs()).fold(1.0, f64::max);
    let mut shift = base_shift * scale;
    let mut applied = 0.0;
    for _ in 0..12 {
        for i in 0..m.nrows() {
            m[(i, i)] += shift - applied;
        }
        applied = shift;
        if let Some(ch) = m.clone().cholesky() {
            return Some(ch);
        }
        shift *= 100.0;
    }
    None
}

impl<'a> Ipm<'a> {
    fn new(r: &'a Reduced, reg: f64) -> Self {
        let lo = (0..r.lower.len()).filter(|&i| r.lower[i].is_finite()).collect();
        let up = (0..r.upper.len()).filter(|&i| r.upper[i].is_finite()).collect();
        let (blocks, singles) = coupling_blocks(r);
        Self { r, lo, up, reg, blocks, singles }
    }

    /// `H⁻¹ v` with the block factors.
    fn solve_h(&self, k: &Newton, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for (s, &inv) in self.singles.iter().zip(&k.inv_single) {
            out[s.i] = v[s.i] * inv;
        }
        for (b, ch) in self.blocks.iter().zip(&k.chol) {
            let part = ch.solve(&DVector::from_fn(b.idx.len(), |a, _| v[b.idx[a]]));
            for (a, &i) in b.idx.iter().enumerate() {
                out[i] = part[a];
            }
        }
        out
    }

    /// Unregularized Newton matrix times `v`.
    fn apply_h(&self, k: &Newton, v: &DVector<f64>) -> DVector<f64> {
        let r = self.r;
        let gv = (&r.g * v).component_mul(&k.dg);
        let mut out = &r.q * v + k.bound.component_mul(v);
        out.gemv_tr(1.0, &r.g, &gv, 1.0);
        out
    }

    /// Solves `H dx + Eᵀ dy = rhs`, `E dx = req` with the factored system.
    fn solve_condensed(&self, k: &Newton, rhs: &DVector<f64>, req: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let hinv_rhs = self.solve_h(k, rhs);
        match &k.schur {
            Some(schur) => {
                let t = &self.r.e * &hinv_rhs - req;
                let dy = schur.solve(&t);
                let dx = &hinv_rhs - &k.hinv_et * &dy;
                (dx, dy)
            }
            None => (hinv_rhs, DVector::zeros(0)),
        }
    }

    /// Condensed solve plus iterative refinement against the exact matrix,
    /// recovering accuracy lost to the regularization shifts.
    fn solve_refined(&self, k: &Newton, rhs: &DVector<f64>, req: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let r = self.r;
        let (mut dx, mut dy) = self.solve_condensed(k, rhs, req);
        for _ in 0..REFINE_STEPS {
            let mut r1 = rhs - self.apply_h(k, &dx);
            r1.gemv_tr(-1.0, &r.e, &dy, 1.0);
            let r2 = req - &r.e * &dx;
            let scale = rhs.amax().max(req.amax()).max(f64::MIN_POSITIVE);
            if r1.amax().max(r2.amax()) <= 1e-15 * scale {
                break;
            }
            let (cx, cy) = self.solve_condensed(k, &r1, &r2);
            dx += cx;
            dy += cy;
        }
        (dx, dy)
    }

    fn m(&self) -> usize {
        self.r.g.nrows() + self.lo.len() + self.up.len()
    }

    fn initial_point(&self) -> Point {
        let r = self.r;
        let n = r.c.len();
        let x = DVector::from_fn(n, |i, _| {
            let (l, u) = (r.lower[i], r.upper[i]);
            match (l.is_finite(), u.is_finite()) {
                (true, true) => 0.5 * (l + u),
                (true, false) => l + 1.0,
                (false, true) => u - 1.0,
                (false, false) => 0.0,
            }
        });
        let slack_g = &r.h - &r.g * &x;
        let sg = slack_g.map(|s| s.max(1.0));
        let sl = DVector::from_fn(self.lo.len(), |k, _| (x[self.lo[k]] - r.lower[self.lo[k]]).max(1e-2));
        let su = DVector::from_fn(self.up.len(), |k, _| (r.upper[self.up[k]] - x[self.up[k]]).max(1e-2));
        Point {
            x,
            y: DVector::zeros(r.e.nrows()),
            zg: DVector::from_element(sg.len(), 1.0),
            sg,
            zl: DVector::from_element(self.lo.len(), 1.0),
            sl,
            zu: DVector::from_element(self.up.len(), 1.0),
            su,
        }
    }

    fn residuals(&self, p: &Point) -> Residuals {
        let r = self.r;
        let mut dual = &r.q * &p.x + &r.c;
        dual.gemv_tr(1.0, &r.e, &p.y, 1.0);
        dual.gemv_tr(1.0, &r.g, &p.zg, 1.0);
        for (k, &i) in self.lo.iter().enumerate() {
            dual[i] -= p.zl[k];
        }
        for (k, &i) in self.up.iter().enumerate() {
            dual[i] += p.zu[k];
        }
        let eq = &r.e * &p.x - &r.f;
        let g = &r.g * &p.x + &p.sg - &r.h;
        let l = DVector::from_fn(self.lo.len(), |k, _| {
            let i = self.lo[k];
            r.lower[i] - p.x[i] + p.sl[k]
        });
        let u = DVector::from_fn(self.up.len(), |k, _| {
            let i = self.up[k];
            p.x[i] + p.su[k] - r.upper[i]
        });
        Residuals { dual, eq, g, l, u }
    }

    fn factor(&self, p: &Point) -> Option<Newton> {
        let r = self.r;
        let dg = p.zg.component_div(&p.sg);
        let dl = p.zl.component_div(&p.sl);
        let du = p.zu.component_div(&p.su);
        let mut bound = DVector::<f64>::zeros(r.c.len());
        for (k, &i) in self.lo.iter().enumerate() {
            bound[i] += dl[k];
        }
        for (k, &i) in self.up.iter().enumerate() {
            bound[i] += du[k];
        }
        let mut chol = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mut h = b.q.clone();
            if !b.rows.is_empty() {
                let mut scaled = b.g.clone();
                for (a, &k) in b.rows.iter().enumerate() {
                    scaled.row_mut(a).scale_mut(dg[k]);
                }
                h.gemm_tr(1.0, &b.g, &scaled, 1.0);
            }
            for (a, &i) in b.idx.iter().enumerate() {
                h[(a, a)] += bound[i];
            }
            chol.push(cholesky_with_shift(h, self.reg)?);
        }
        let scale = self.singles.iter().map(|s| s.q.abs()).fold(1.0, f64::max);
        let inv_single: Vec<f64> = self
            .singles
            .iter()
            .map(|s| {
                let h = s.q + bound[s.i] + s.g.iter().map(|&(k, v)| dg[k] * v * v).sum::<f64>();
                1.0 / if h > 0.0 { h } else { self.reg * scale }
            })
            .collect();
        let me = r.e.nrows();
        let (hinv_et, schur) = if me > 0 {
            let mut hinv_et = DMatrix::zeros(r.c.len(), me);
            for (s, &inv) in self.singles.iter().zip(&inv_single) {
                for row in 0..me {
                    hinv_et[(s.i, row)] = r.e[(row, s.i)] * inv;
                }
            }
            for (b, ch) in self.blocks.iter().zip(&chol) {
                let rhs = DMatrix::from_fn(b.idx.len(), me, |a, row| r.e[(row, b.idx[a])]);
                let part = ch.solve(&rhs);
                for (a, &i) in b.idx.iter().enumerate() {
                    hinv_et.row_mut(i).copy_from(&part.row(a));
                }
            }
            let s = &r.e * &hinv_et;
            (hinv_et, Some(cholesky_with_shift(s, 1e-13)?))
        } else {
            (DMatrix::zeros(r.c.len(), 0), None)
        };
        Some(Newton {
            chol,
            inv_single,
            hinv_et,
            schur,
            dg,
            dl,
            du,
            bound,
        })
    }

    /// Solves the Newton system for complementarity targets `rc_*`
    /// (the desired change in `s∘z` is `-rc`).
    fn direction(
        &self,
        p: &Point,
        res: &Residuals,
        k: &Newton,
        rc_g: &DVector<f64>,
        rc_l: &DVector<f64>,
        rc_u: &DVector<f64>,
    ) -> Direction {
        let r = self.r;
        // Per-row corrections w = D r_i − S⁻¹ r_c.
        let wg = DVector::from_fn(rc_g.len(), |j, _| k.dg[j] * res.g[j] - rc_g[j] / p.sg[j]);
        let wl = DVector::from_fn(rc_l.len(), |j, _| k.dl[j] * res.l[j] - rc_l[j] / p.sl[j]);
        let wu = DVector::from_fn(rc_u.len(), |j, _| k.du[j] * res.u[j] - rc_u[j] / p.su[j]);

        let mut rhs = -&res.dual;
        rhs.gemv_tr(-1.0, &r.g, &wg, 1.0);
        for (j, &i) in self.lo.iter().enumerate() {
            rhs[i] += wl[j];
        }
        for (j, &i) in self.up.iter().enumerate() {
            rhs[i] -= wu[j];
        }

        let (dx, dy) = self.solve_refined(k, &rhs, &-&res.eq);

        let adx_g = &r.g * &dx;
        let dzg = DVector::from_fn(wg.len(), |j, _| k.dg[j] * adx_g[j] + wg[j]);
        let dsg = DVector::from_fn(wg.len(), |j, _| -res.g[j] - adx_g[j]);
        let dzl = DVector::from_fn(wl.len(), |j, _| -k.dl[j] * dx[self.lo[j]] + wl[j]);
        let dsl = DVector::from_fn(wl.len(), |j, _| -res.l[j] + dx[self.lo[j]]);
        let dzu = DVector::from_fn(wu.len(), |j, _| k.du[j] * dx[self.up[j]] + wu[j]);
        let dsu = DVector::from_fn(wu.len(), |j, _| -res.u[j] - dx[self.up[j]]);
        Direction {
            dx,
            dy,
            dzg,
            dsg,
            dzl,
            dsl,
            dzu,
            dsu,
        }
    }

    fn max_step(p: &Point, d: &Direction) -> f64 {
        let mut alpha: f64 = 1.0;
        let mut limit = |v: &DVector<f64>, dv: &DVector<f64>| {
            for (a, b) in v.iter().zip(dv.iter()) {
                if *b < 0.0 {
                    alpha = alpha.min(-a / b);
                }
            }
        };
        limit(&p.sg, &d.dsg);
        limit(&p.zg, &d.dzg);
        limit(&p.sl, &d.dsl);
        limit(&p.zl, &d.dzl);
        limit(&p.su, &d.dsu);
        limit(&p.zu, &d.dzu);
        alpha
    }

    fn gap(p: &Point) -> f64 {
        p.sg.dot(&p.zg) + p.sl.dot(&p.zl) + p.su.dot(&p.zu)
    }

    fn max_complementarity(p: &Point) -> f64 {
        let m = |s: &DVector<f64>, z: &DVector<f64>| {
            s.iter().zip(z.iter()).map(|(a, b)| (a * b).abs()).fold(0.0, f64::max)
        };
        m(&p.sg, &p.zg).max(m(&p.sl, &p.zl)).max(m(&p.su, &p.zu))
    }

    /// Runs until every residual and complementarity product is below `tol`.
    /// Returns the best point seen, iteration count and whether it converged.
    fn run(&self, tol: f64, max_iter: usize) -> (Point, usize, bool) {
        let mut p = self.initial_point();
        let m = self.m();
        let mut slow_steps = 0;
        let mut best = (f64::INFINITY, p.clone());
        let mut since_best = 0;
        for iter in 0..max_iter {
            let res = self.residuals(&p);
            let comp = Self::max_complementarity(&p);
            let dual_inf = res.dual.amax();
            let primal_inf = res.primal_inf();
            if dual_inf <= tol && primal_inf <= tol && comp <= tol {
                return (p, iter, true);
            }
            let merit = dual_inf.max(primal_inf).max(comp);
            if merit.is_finite() && merit < best.0 {
                best = (merit, p.clone());
                since_best = 0;
            } else {
                since_best += 1;
            }
            let diverged = [&p.zg, &p.zl, &p.zu, &p.x]
                .iter()
                .any(|v| v.iter().any(|a| !a.is_finite() || a.abs() > 1e13));
            if diverged || slow_steps > 30 || since_best > STALL_ITERS {
                return (best.1, iter, false);
            }

            let Some(k) = self.factor(&p) else {
                return (best.1, iter, false);
            };

            if m == 0 {
                let d = self.direction(
                    &p,
                    &res,
                    &k,
                    &DVector::zeros(0),
                    &DVector::zeros(0),
                    &DVector::zeros(0),
                );
                p.x += &d.dx;
                p.y += &d.dy;
                continue;
            }

            let mu = Self::gap(&p) / m as f64;
            // Predictor: pure Newton towards s∘z = 0.
            let rc_g = p.sg.component_mul(&p.zg);
            let rc_l = p.sl.component_mul(&p.zl);
            let rc_u = p.su.component_mul(&p.zu);
            let aff = self.direction(&p, &res, &k, &rc_g, &rc_l, &rc_u);
            let a_aff = Self::max_step(&p, &aff).min(1.0);
            let mu_aff = {
                let f = |s: &DVector<f64>, ds: &DVector<f64>, z: &DVector<f64>, dz: &DVector<f64>| {
                    (s + ds * a_aff).dot(&(z + dz * a_aff))
                };
                (f(&p.sg, &aff.dsg, &p.zg, &aff.dzg)
                    + f(&p.sl, &aff.dsl, &p.zl, &aff.dzl)
                    + f(&p.su, &aff.dsu, &p.zu, &aff.dzu))
                    / m as f64
            };
            let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
            let target = sigma * mu;

            // Corrector with second-order term.
            let rc_g = DVector::from_fn(rc_g.len(), |j, _| {
                rc_g[j] + aff.dsg[j] * aff.dzg[j] - target
            });
            let rc_l = DVector::from_fn(rc_l.len(), |j, _| {
                rc_l[j] + aff.dsl[j] * aff.dzl[j] - target
            });
            let rc_u = DVector::from_fn(rc_u.len(), |j, _| {
                rc_u[j] + aff.dsu[j] * aff.dzu[j] - target
            });
            let d = self.direction(&p, &res, &k, &rc_g, &rc_l, &rc_u);
            let alpha = (STEP_FRACTION * Self::max_step(&p, &d)).min(1.0);
            if alpha < 1e-8 {
                slow_steps += 1;
            } else {
                slow_steps = 0;
            }

            p.x.axpy(alpha, &d.dx, 1.0);
            p.y.axpy(alpha, &d.dy, 1.0);
            p.zg.axpy(alpha, &d.dzg, 1.0);
            p.sg.axpy(alpha, &d.dsg, 1.0);
            p.zl.axpy(alpha, &d.dzl, 1.0);
            p.sl.axpy(alpha, &d.dsl, 1.0);
            p.zu.axpy(alpha, &d.dzu, 1.0);
            p.su.axpy(alpha, &d.dsu, 1.0);
        }
        (best.1, max_iter, false)
    }
}

/// Full-size solution assembled from a reduced-space primal–dual point.
fn expand(
    problem: &QpProblem,
    red: &Reduced,
    x_free: &DVector<f64>,
    y: &DVector<f64>,
    zg: &DVector<f64>,
    zl_free: &DVector<f64>,
    zu_free: &DVector<f64>,
) -> QpSolution {
    let n = problem.n();
    let mut x = DVector::zeros(n);
    for &(i, v) in &red.fixed {
        x[i] = v;
    }
    for (a, &i) in red.free.iter().enumerate() {
        x[i] = x_free[a];
    }
    let mut eq_duals = DVector::zeros(problem.eq.nrows());
    for (k, &r) in red.eq_rows.iter().enumerate() {
        eq_duals[r] = y[k];
    }
    let mut ineq_duals = DVector::zeros(problem.ineq.nrows());
    for (k, &r) in red.ineq_rows.iter().enumerate() {
        ineq_duals[r] = zg[k];
    }
    let mut lower_duals = DVector::zeros(n);
    let mut upper_duals = DVector::zeros(n);
    for (a, &i) in red.free.iter().enumerate() {
        lower_duals[i] = zl_free[a];
        upper_duals[i] = zu_free[a];
    }
    if !red.fixed.is_empty() {
        let mut grad = &problem.q * &x + &problem.c;
        grad.gemv_tr(1.0, &problem.eq, &eq_duals, 1.0);
        grad.gemv_tr(1.0, &problem.ineq, &ineq_duals, 1.0);
        for &(i, _) in &red.fixed {
            if grad[i] >= 0.0 {
                lower_duals[i] = grad[i];
            } else {
                upper_duals[i] = -grad[i];
            }
        }
    }
    let mut sol = QpSolution {
        objective: problem.objective(&x),
        x,
        eq_duals,
        ineq_duals,
        lower_duals,
        upper_duals,
        kkt_residual: 0.0,
        iterations: 0,
        status: QpStatus::MaxIter,
        infeasibility: None,
    };
    sol.kkt_residual = kkt_residual(problem, &sol);
    sol
}

fn expand_point(problem: &QpProblem, red: &Reduced, ipm: &Ipm, p: &Point) -> QpSolution {
    let nf = red.free.len();
    let mut zl = DVector::zeros(nf);
    let mut zu = DVector::zeros(nf);
    for (k, &i) in ipm.lo.iter().enumerate() {
        zl[i] = p.zl[k];
    }
    for (k, &i) in ipm.up.iter().enumerate() {
        zu[i] = p.zu[k];
    }
    expand(problem, red, &p.x, &p.y, &p.zg, &zl, &zu)
}

/// Solves the equality-constrained problem on the active set guessed from `p`.
fn polish(problem: &QpProblem, red: &Reduced, ipm: &Ipm, p: &Point) -> Option<QpSolution> {
    let nf = red.free.len();
    let mut at_lower = vec![false; nf];
    let mut at_upper = vec![false; nf];
    for (k, &i) in ipm.lo.iter().enumerate() {
        at_lower[i] = p.zl[k] > p.sl[k];
    }
    for (k, &i) in ipm.up.iter().enumerate() {
        at_upper[i] = p.zu[k] > p.su[k];
    }
    let mut x = p.x.clone();
    let mut movable = Vec::new();
    for i in 0..nf {
        if at_lower[i] && at_upper[i] {
            // Both look active only for a degenerate point; take the closer bound.
            if x[i] - red.lower[i] <= red.upper[i] - x[i] {
                at_upper[i] = false;
            } else {
                at_lower[i] = false;
            }
        }
        if at_lower[i] {
            x[i] = red.lower[i];
        } else if at_upper[i] {
            x[i] = red.upper[i];
        } else {
            movable.push(i);
        }
    }
    let active_g: Vec<usize> = (0..red.g.nrows()).filter(|&k| p.zg[k] > p.sg[k]).collect();
    let me = red.e.nrows();
    let ma = active_g.len();
    let nm = movable.len();
    let dim = nm + me + ma;

    let mut kkt = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    // Contribution of the pinned variables moves to the right-hand side.
    let mut pinned = x.clone();
    for &i in &movable {
        pinned[i] = 0.0;
    }
    let q_pinned = &red.q * &pinned;
    for (a, &i) in movable.iter().enumerate() {
        for (b, &j) in movable.iter().enumerate() {
            kkt[(a, b)] = red.q[(i, j)];
        }
        rhs[a] = -red.c[i] - q_pinned[i];
    }
    let e_pinned = &red.e * &pinned;
    for r in 0..me {
        for (a, &i) in movable.iter().enumerate() {
            kkt[(nm + r, a)] = red.e[(r, i)];
            kkt[(a, nm + r)] = red.e[(r, i)];
        }
        rhs[nm + r] = red.f[r] - e_pinned[r];
    }
    let g_pinned = &red.g * &pinned;
    for (r, &k) in active_g.iter().enumerate() {
        for (a, &i) in movable.iter().enumerate() {
            kkt[(nm + me + r, a)] = red.g[(k, i)];
            kkt[(a, nm + me + r)] = red.g[(k, i)];
        }
        rhs[nm + me + r] = red.h[k] - g_pinned[k];
    }

    // Proximal regularization plus iterative refinement tolerates dependent rows.
    let delta = 1e-10 * (1.0 + kkt.amax());
    let mut reg = kkt.clone();
    for i in 0..dim {
        reg[(i, i)] += if i < nm { delta } else { -delta };
    }
    let mut sol = DVector::zeros(dim);
    let lu = reg.lu();
    if dim > 0 {
        sol = lu.solve(&rhs)?;
    }
    for _ in 0..20 {
        if dim == 0 {
            break;
        }
        let resid = &rhs - &kkt * &sol;
        if resid.amax() <= 1e-15 * (1.0 + rhs.amax()) {
            break;
        }
        sol += lu.solve(&resid)?;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }

    for (a, &i) in movable.iter().enumerate() {
        x[i] = sol[a].clamp(red.lower[i], red.upper[i]);
    }
    let y = sol.rows(nm, me).into_owned();
    let mut zg = DVector::zeros(red.g.nrows());
    for (r, &k) in active_g.iter().enumerate() {
        zg[k] = sol[nm + me + r];
    }
    let mut grad = &red.q * &x + &red.c;
    grad.gemv_tr(1.0, &red.e, &y, 1.0);
    grad.gemv_tr(1.0, &red.g, &zg, 1.0);
    let mut zl = DVector::zeros(nf);
    let mut zu = DVector::zeros(nf);
    for i in 0..nf {
        if at_lower[i] {
            zl[i] = grad[i];
        } else if at_upper[i] {
            zu[i] = -grad[i];
        }
    }
    Some(expand(problem, red, &x, &y, &zg, &zl, &zu))
}

/// Least-violation problem: minimize squared equality and inequality breaches
/// subject to the variable bounds. Always feasible.
fn phase_one(problem: &QpProblem, config: &SolverConfig) -> Option<InfeasibilityReport> {
    let n = problem.n();
    let me = problem.eq.nrows();
    let mg = problem.ineq.nrows();
    let nt = n + me + mg;
    let mut q = DMatrix::zeros(nt, nt);
    for i in n..nt {
        q[(i, i)] = 1.0;
    }
    let mut eq = DMatrix::zeros(me, nt);
    eq.view_mut((0, 0), (me, n)).copy_from(&problem.eq);
    for r in 0..me {
        eq[(r, n + r)] = -1.0;
    }
    let mut ineq = DMatrix::zeros(mg, nt);
    ineq.view_mut((0, 0), (mg, n)).copy_from(&problem.ineq);
    for r in 0..mg {
        ineq[(r, n + me + r)] = -1.0;
    }
    let mut lower = DVector::from_element(nt, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(nt, f64::INFINITY);
    lower.rows_mut(0, n).copy_from(&problem.lower);
    upper.rows_mut(0, n).copy_from(&problem.upper);
    for i in n + me..nt {
        lower[i] = 0.0;
    }
    let mut aux = QpProblem::new(q, DVector::zeros(nt))
        .with_equalities(eq, problem.eq_rhs.clone())
        .with_inequalities(ineq, problem.ineq_rhs.clone())
        .with_bounds(lower, upper);
    aux.eq_tags = problem.eq_tags.clone();
    aux.ineq_tags = problem.ineq_tags.clone();

    let sol = solve_stage(&aux, config, false);
    let mut worst: Option<InfeasibilityReport> = None;
    let mut consider = |tag: RowTag, v: f64| {
        if worst.is_none_or(|w| v > w.magnitude) {
            worst = Some(InfeasibilityReport {
                worst: tag,
                magnitude: v,
            });
        }
    };
    for r in 0..me {
        consider(problem.eq_tags[r], sol.x[n + r].abs());
    }
    for r in 0..mg {
        consider(problem.ineq_tags[r], sol.x[n + me + r].max(0.0));
    }
    worst.filter(|w| w.magnitude > INFEASIBILITY_TOL)
}

fn solve_stage(problem: &QpProblem, config: &SolverConfig, allow_phase_one: bool) -> QpSolution {
    let n = problem.n();
    let red = match reduce(problem) {
        Reduction::Ok(r) => r,
        Reduction::Inconsistent(report) => {
            let x = DVector::from_fn(n, |i, _| {
                let (l, u) = (problem.lower[i], problem.upper[i]);
                if l.is_finite() { l } else if u.is_finite() { u } else { 0.0 }
            });
            return QpSolution {
                objective: problem.objective(&x),
                x,
                eq_duals: DVector::zeros(problem.eq.nrows()),
                ineq_duals: DVector::zeros(problem.ineq.nrows()),
                lower_duals: DVector::zeros(n),
                upper_duals: DVector::zeros(n),
                kkt_residual: f64::INFINITY,
                iterations: 0,
                status: QpStatus::Infeasible,
                infeasibility: Some(report),
            };
        }
    };

    let ipm = Ipm::new(&red, config.regularization);
    let ipm_tol = 0.1 * config.qp_tol;
    let (point, iterations, converged) = ipm.run(ipm_tol, config.max_qp_iter);

    let mut best = expand_point(problem, &red, &ipm, &point);
    if converged || best.kkt_residual <= 1e-4 {
        if let Some(polished) = polish(problem, &red, &ipm, &point) {
            if polished.kkt_residual < best.kkt_residual {
                best = polished;
            }
        }
    }
    best.iterations = iterations;
    if best.kkt_residual <= config.qp_tol {
        best.status = QpStatus::Optimal;
        return best;
    }
    if allow_phase_one {
        if let Some(report) = phase_one(problem, config) {
            best.status = QpStatus::Infeasible;
            best.infeasibility = Some(report);
            return best;
        }
    }
    best.status = QpStatus::MaxIter;
    best
}

/// Solves `problem`. Errors are reserved for malformed input; optimality,
/// infeasibility and budget exhaustion are reported through `status`.
pub fn solve_qp(problem: &QpProblem, config: &SolverConfig) -> Result<QpSolution, QpError> {
    config.validate()?;
    problem.validate()?;
    Ok(solve_stage(problem, config, true))
}
