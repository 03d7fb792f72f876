//! Helpers shared by the integration tests: a KKT certificate computed
//! without the library's own residual code, and a random feasible QP source.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use transactive::localopt::{QpProblem, QpSolution};

/// Worst violation of stationarity, primal and dual feasibility and
/// complementarity, evaluated row by row.
pub fn kkt_oracle(p: &QpProblem, s: &QpSolution) -> f64 {
    let n = p.c.len();
    let x = &s.x;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut g = p.c[i];
        for j in 0..n {
            g += p.q[(i, j)] * x[j];
        }
        for r in 0..p.eq.nrows() {
            g += p.eq[(r, i)] * s.eq_duals[r];
        }
        for r in 0..p.ineq.nrows() {
            g += p.ineq[(r, i)] * s.ineq_duals[r];
        }
        g += s.upper_duals[i] - s.lower_duals[i];
        worst = worst.max(g.abs());
    }
    for r in 0..p.eq.nrows() {
        let ax: f64 = (0..n).map(|j| p.eq[(r, j)] * x[j]).sum();
        worst = worst.max((ax - p.eq_rhs[r]).abs());
    }
    for r in 0..p.ineq.nrows() {
        let slack = p.ineq_rhs[r] - (0..n).map(|j| p.ineq[(r, j)] * x[j]).sum::<f64>();
        let z = s.ineq_duals[r];
        worst = worst.max(-slack).max(-z).max((slack * z).abs());
    }
    for i in 0..n {
        let (zl, zu) = (s.lower_duals[i], s.upper_duals[i]);
        worst = worst.max(-zl).max(-zu);
        let gap_l = if p.lower[i].is_finite() { x[i] - p.lower[i] } else { f64::INFINITY };
        let gap_u = if p.upper[i].is_finite() { p.upper[i] - x[i] } else { f64::INFINITY };
        worst = worst.max(-gap_l).max(-gap_u);
        worst = worst.max(if gap_l.is_finite() { (zl * gap_l).abs() } else { zl.abs() });
        worst = worst.max(if gap_u.is_finite() { (zu * gap_u).abs() } else { zu.abs() });
    }
    worst
}

/// Feasible by construction: every row is satisfied at a random interior point.
pub fn random_qp(rng: &mut ChaCha8Rng) -> QpProblem {
    let n = rng.gen_range(2..=12);
    let rank = rng.gen_range(1..=n);
    let m = DMatrix::from_fn(rank, n, |_, _| rng.gen_range(-2.0..2.0));
    let all_bounded = rng.gen_bool(0.7);
    let mut q = m.transpose() * m;
    if !all_bounded {
        q += DMatrix::identity(n, n) * 0.1;
    }
    let c = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
    let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
    let lower = DVector::from_fn(n, |i, _| {
        if all_bounded || rng.gen_bool(0.5) {
            x0[i] - rng.gen_range(0.0..2.0)
        } else {
            f64::NEG_INFINITY
        }
    });
    let upper = DVector::from_fn(n, |i, _| {
        if all_bounded || rng.gen_bool(0.5) {
            x0[i] + rng.gen_range(0.0..2.0)
        } else {
            f64::INFINITY
        }
    });
    let me = rng.gen_range(0..=n / 2);
    let eq = DMatrix::from_fn(me, n, |_, _| rng.gen_range(-1.0..1.0));
    let eq_rhs = &eq * &x0;
    let mi = rng.gen_range(0..=n);
    let ineq = DMatrix::from_fn(mi, n, |_, _| rng.gen_range(-1.0..1.0));
    let ineq_rhs = &ineq * &x0 + DVector::from_fn(mi, |_, _| rng.gen_range(0.0..1.0));
    QpProblem::new(q, c)
        .with_equalities(eq, eq_rhs)
        .with_inequalities(ineq, ineq_rhs)
        .with_bounds(lower, upper)
}
