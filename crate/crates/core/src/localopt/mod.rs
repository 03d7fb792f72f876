//! Per-agent cost minimization as convex QPs.
//!
//! Three problems share one variable layout per agent, stacked slot-major inside
//! each block: `[p_re | p_g | p_ac | p_f | p_et]`, each block `H` long (the
//! trade block is absent in the standalone problem). Indoor temperature is not a
//! variable: the thermal recursion is unrolled into its affine form so the
//! comfort band becomes linear rows in `p_ac`.
//!
//! * standalone problem: one agent, no trading;
//! * individual problem: one agent trading at a fixed price vector;
//! * centralized problem: every agent stacked, with a market-clearing row per
//!   slot whose multiplier is the equilibrium price. Only used as a test oracle.

pub mod qp;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{
    self, ConstraintId, ModelError, ProsumerSpec, Schedule, ThermalAffine,
};
pub use qp::{
    kkt_residual, solve_qp, InfeasibilityReport, QpError, QpProblem, QpSolution, QpStatus,
    RowTag, SolverConfig,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalOptError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("agent {agent} is infeasible{}", match .report { Some(r) => format!(": {} violated by {:.3e}", r.worst, r.magnitude), None => String::new() })]
    Infeasible {
        agent: u32,
        report: Option<InfeasibilityReport>,
    },
    #[error("solver did not reach tolerance for agent {agent} (KKT residual {residual:.3e})")]
    NotConverged { agent: u32, residual: f64 },
    #[error("{0}")]
    Input(String),
}

/// Index map of one agent's block inside a (possibly stacked) QP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub slots: usize,
    pub with_trade: bool,
    pub offset: usize,
}

impl Layout {
    pub fn new(slots: usize, with_trade: bool, offset: usize) -> Self {
        Self {
            slots,
            with_trade,
            offset,
        }
    }

    pub fn len(&self) -> usize {
        self.slots * if self.with_trade { 5 } else { 4 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn p_re(&self, t: usize) -> usize {
        self.offset + t
    }

    pub fn p_g(&self, t: usize) -> usize {
        self.offset + self.slots + t
    }

    pub fn p_ac(&self, t: usize) -> usize {
        self.offset + 2 * self.slots + t
    }

    pub fn p_f(&self, t: usize) -> usize {
        self.offset + 3 * self.slots + t
    }

    pub fn p_et(&self, t: usize) -> usize {
        debug_assert!(self.with_trade);
        self.offset + 4 * self.slots + t
    }
}

type SparseRow = Vec<(usize, f64)>;

/// Accumulates a QP row by row before assembling dense matrices.
struct Builder {
    n: usize,
    q: DMatrix<f64>,
    c: DVector<f64>,
    constant: f64,
    lower: DVector<f64>,
    upper: DVector<f64>,
    var_tags: Vec<RowTag>,
    eq: Vec<(SparseRow, f64, RowTag)>,
    ineq: Vec<(SparseRow, f64, RowTag)>,
}

impl Builder {
    fn new(n: usize) -> Self {
        Self {
            n,
            q: DMatrix::zeros(n, n),
            c: DVector::zeros(n),
            constant: 0.0,
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
            var_tags: vec![RowTag::GENERIC; n],
            eq: Vec::new(),
            ineq: Vec::new(),
        }
    }

    fn bound(&mut self, i: usize, lo: f64, hi: f64, tag: RowTag) {
        self.lower[i] = lo;
        self.upper[i] = hi;
        self.var_tags[i] = tag;
    }

    fn finish(self) -> QpProblem {
        let dense = |rows: &[(SparseRow, f64, RowTag)], n: usize| {
            let mut m = DMatrix::zeros(rows.len(), n);
            for (r, (row, _, _)) in rows.iter().enumerate() {
                for &(j, v) in row {
                    m[(r, j)] += v;
                }
            }
            let rhs = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
            let tags = rows.iter().map(|r| r.2).collect::<Vec<_>>();
            (m, rhs, tags)
        };
        let (eq, eq_rhs, eq_tags) = dense(&self.eq, self.n);
        let (ineq, ineq_rhs, ineq_tags) = dense(&self.ineq, self.n);
        QpProblem {
            q: self.q,
            c: self.c,
            constant: self.constant,
            eq,
            eq_rhs,
            ineq,
            ineq_rhs,
            lower: self.lower,
            upper: self.upper,
            eq_tags,
            ineq_tags,
            var_tags: self.var_tags,
        }
    }
}

/// Upper bound on purchases when nothing better is known: ten times the grid capacity.
pub fn default_trade_cap(spec: &ProsumerSpec) -> Vec<f64> {
    vec![10.0 * spec.grid_cap; spec.horizon()]
}

/// Per-agent, per-slot purchase caps for a trading pool: twice the renewable
/// power every other agent has available. Purchases can never exceed the
/// others' supply, so the cap is slack at any market-clearing point, and it
/// pins purchases to zero in slots where nobody else can sell.
pub fn trade_caps(specs: &[ProsumerSpec]) -> Vec<Vec<f64>> {
    let h = specs.first().map_or(0, |s| s.horizon());
    let pooled: Vec<f64> = (0..h)
        .map(|t| specs.iter().map(|s| s.renewable_avail[t]).sum())
        .collect();
    specs
        .iter()
        .map(|s| {
            (0..h)
                .map(|t| 2.0 * (pooled[t] - s.renewable_avail[t]).max(0.0))
                .collect()
        })
        .collect()
}

/// Writes one agent's objective, bounds and rows into `b`.
///
/// `trade` carries the price vector (may be all zeros) and per-slot purchase cap
/// when the agent is allowed to trade.
fn add_agent(
    b: &mut Builder,
    spec: &ProsumerSpec,
    layout: Layout,
    trade: Option<(&[f64], &[f64])>,
    floor: f64,
) {
    let h = layout.slots;
    let agent = Some(spec.id);
    let tag = |c: ConstraintId, t: Option<usize>| RowTag::new(c, agent, t);

    for t in 0..h {
        let (re, g, ac, f) = (layout.p_re(t), layout.p_g(t), layout.p_ac(t), layout.p_f(t));
        b.q[(re, re)] += floor;
        b.q[(g, g)] += 2.0 * spec.tariff.a_g + floor;
        b.c[g] += spec.tariff.b_g;
        b.q[(ac, ac)] += floor;
        b.q[(f, f)] += 2.0 * spec.flex.beta_f + floor;
        b.c[f] -= 2.0 * spec.flex.beta_f * spec.flex.p_ref[t];
        b.constant += spec.flex.beta_f * spec.flex.p_ref[t] * spec.flex.p_ref[t];

        b.bound(re, 0.0, spec.renewable_avail[t], tag(ConstraintId::RenewableAvailability, Some(t)));
        b.bound(g, 0.0, spec.grid_cap, tag(ConstraintId::GridCapacity, Some(t)));
        b.bound(ac, 0.0, f64::INFINITY, tag(ConstraintId::HvacNonNegative, Some(t)));
        b.bound(
            f,
            spec.flex.p_min[t],
            spec.flex.p_max[t],
            tag(ConstraintId::FlexBounds, Some(t)),
        );
    }

    // Comfort: beta · |A p + d − t_ref|² with the unrolled thermal model.
    let thermal = ThermalAffine::new(&spec.hvac, &spec.outdoor_temp);
    let beta = spec.hvac.beta_ac;
    if beta > 0.0 {
        let dev = thermal.offset.add_scalar(-spec.hvac.t_ref);
        let ata = thermal.matrix.transpose() * &thermal.matrix;
        let atd = thermal.matrix.transpose() * &dev;
        for s in 0..h {
            for r in 0..h {
                b.q[(layout.p_ac(s), layout.p_ac(r))] += 2.0 * beta * ata[(s, r)];
            }
            b.c[layout.p_ac(s)] += 2.0 * beta * atd[s];
        }
        b.constant += beta * dev.norm_squared();
    }
    for t in 0..h {
        let row: SparseRow = (0..=t)
            .map(|s| (layout.p_ac(s), thermal.matrix[(t, s)]))
            .filter(|&(_, v)| v != 0.0)
            .collect();
        let neg: SparseRow = row.iter().map(|&(j, v)| (j, -v)).collect();
        let band = tag(ConstraintId::IndoorTemperature, Some(t));
        b.ineq.push((row, spec.hvac.t_max - thermal.offset[t], band));
        b.ineq.push((neg, thermal.offset[t] - spec.hvac.t_min, band));
    }

    let balance_id = if trade.is_some() {
        ConstraintId::CoordinatedBalance
    } else {
        ConstraintId::StandaloneBalance
    };
    for t in 0..h {
        let mut row = vec![
            (layout.p_re(t), 1.0),
            (layout.p_g(t), 1.0),
            (layout.p_ac(t), -1.0),
            (layout.p_f(t), -1.0),
        ];
        if let Some((lambda, cap)) = trade {
            let et = layout.p_et(t);
            row.push((et, 1.0));
            b.q[(et, et)] += floor;
            b.c[et] += lambda[t];
            b.bound(
                et,
                -spec.renewable_avail[t],
                cap[t].max(0.0),
                tag(ConstraintId::Overselling, Some(t)),
            );
        }
        b.eq.push((row, spec.inflexible[t], tag(balance_id, Some(t))));
    }
    let flex_row = (0..h).map(|t| (layout.p_f(t), 1.0)).collect();
    b.eq.push((
        flex_row,
        spec.flex.p_ref.iter().sum(),
        tag(ConstraintId::FlexEnergy, None),
    ));
}

fn check_spec(spec: &ProsumerSpec) -> Result<(), LocalOptError> {
    spec.validate().map_err(LocalOptError::from)
}

/// Standalone cost minimization for one agent.
pub fn build_ucmp(spec: &ProsumerSpec, config: &SolverConfig) -> Result<QpProblem, LocalOptError> {
    check_spec(spec)?;
    let layout = Layout::new(spec.horizon(), false, 0);
    let mut b = Builder::new(layout.len());
    add_agent(&mut b, spec, layout, None, config.regularization);
    Ok(b.finish())
}

/// Individual problem at prices `lambda`; purchases capped per slot by `trade_cap`
/// (defaults to [`default_trade_cap`]).
pub fn build_ilp(
    spec: &ProsumerSpec,
    lambda: &[f64],
    trade_cap: Option<&[f64]>,
    config: &SolverConfig,
) -> Result<QpProblem, LocalOptError> {
    check_spec(spec)?;
    let h = spec.horizon();
    if lambda.len() != h || trade_cap.is_some_and(|c| c.len() != h) {
        return Err(ModelError::LengthMismatch {
            what: "lambda/trade_cap",
            expected: h,
            got: lambda.len(),
        }
        .into());
    }
    if lambda.iter().any(|l| !l.is_finite()) {
        return Err(LocalOptError::Input("prices must be finite".into()));
    }
    let fallback;
    let cap = match trade_cap {
        Some(c) => c,
        None => {
            fallback = default_trade_cap(spec);
            &fallback
        }
    };
    let layout = Layout::new(h, true, 0);
    let mut b = Builder::new(layout.len());
    add_agent(&mut b, spec, layout, Some((lambda, cap)), config.regularization);
    Ok(b.finish())
}

/// Reads a schedule out of a solved block: clips solver noise into the bounds,
/// moves any grid draw that idle renewable capacity could cover onto renewable
/// (deterministic tie-break for flat cost directions), and recomputes `t_in`.
pub fn extract_schedule(
    spec: &ProsumerSpec,
    layout: Layout,
    problem: &QpProblem,
    x: &DVector<f64>,
) -> Schedule {
    let h = layout.slots;
    let clip = |i: usize| x[i].clamp(problem.lower[i], problem.upper[i]);
    let mut s = Schedule::zeros(h);
    for t in 0..h {
        s.p_re[t] = clip(layout.p_re(t));
        s.p_g[t] = clip(layout.p_g(t));
        s.p_ac[t] = clip(layout.p_ac(t));
        s.p_f[t] = clip(layout.p_f(t));
        if layout.with_trade {
            s.p_et[t] = clip(layout.p_et(t));
        }
        let room = spec.renewable_avail[t] - s.p_re[t];
        if room > model::TOL_FEAS && s.p_g[t] > model::TOL_FEAS {
            let shift = room.min(s.p_g[t]);
            s.p_re[t] += shift;
            s.p_g[t] -= shift;
        }
    }
    s.t_in = model::unroll_temperature(&spec.hvac, &spec.outdoor_temp, &s.p_ac)
        .expect("lengths checked by spec validation");
    s
}

fn finish_solve(
    agent: u32,
    problem: &QpProblem,
    config: &SolverConfig,
) -> Result<QpSolution, LocalOptError> {
    let sol = solve_qp(problem, config)?;
    match sol.status {
        QpStatus::Optimal => Ok(sol),
        QpStatus::Infeasible => Err(LocalOptError::Infeasible {
            agent,
            report: sol.infeasibility,
        }),
        QpStatus::MaxIter => Err(LocalOptError::NotConverged {
            agent,
            residual: sol.kkt_residual,
        }),
    }
}

/// Solved agent problem.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSolution {
    pub schedule: Schedule,
    /// Operating cost, plus trading cost for the individual problem.
    pub cost: f64,
    /// QP objective including the regularization floor.
    pub objective: f64,
}

/// Standalone benchmark: minimum operating cost without trading.
pub fn solve_ucmp(spec: &ProsumerSpec, config: &SolverConfig) -> Result<AgentSolution, LocalOptError> {
    let problem = build_ucmp(spec, config)?;
    let sol = finish_solve(spec.id, &problem, config)?;
    let schedule = extract_schedule(spec, Layout::new(spec.horizon(), false, 0), &problem, &sol.x);
    let cost = model::operating_cost(spec, &schedule)?;
    Ok(AgentSolution {
        schedule,
        cost,
        objective: sol.objective,
    })
}

/// Individual problem at fixed prices: operating plus trading cost.
pub fn solve_ilp(
    spec: &ProsumerSpec,
    lambda: &[f64],
    trade_cap: Option<&[f64]>,
    config: &SolverConfig,
) -> Result<AgentSolution, LocalOptError> {
    let problem = build_ilp(spec, lambda, trade_cap, config)?;
    let sol = finish_solve(spec.id, &problem, config)?;
    let schedule = extract_schedule(spec, Layout::new(spec.horizon(), true, 0), &problem, &sol.x);
    let cost = model::operating_cost(spec, &schedule)? + model::trading_cost(&schedule.p_et, lambda)?;
    Ok(AgentSolution {
        schedule,
        cost,
        objective: sol.objective,
    })
}

/// Centralized coordinated optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralizedSolution {
    pub schedules: Vec<Schedule>,
    /// Multiplier of each slot's market-clearing row: the equilibrium price.
    pub lambda_star: Vec<f64>,
    pub operating_costs: Vec<f64>,
    /// Sum of operating costs plus trading costs at `lambda_star`.
    pub total_cost: f64,
    pub kkt_residual: f64,
}

pub fn build_ccmp(
    specs: &[ProsumerSpec],
    trade_caps: &[Vec<f64>],
    config: &SolverConfig,
) -> Result<(QpProblem, Vec<Layout>), LocalOptError> {
    if specs.len() < 2 {
        return Err(LocalOptError::Input("centralized problem needs at least two agents".into()));
    }
    let h = specs[0].horizon();
    if trade_caps.len() != specs.len() {
        return Err(LocalOptError::Input("one trade-cap series per agent required".into()));
    }
    for (s, cap) in specs.iter().zip(trade_caps) {
        check_spec(s)?;
        if cap.len() != h {
            return Err(ModelError::LengthMismatch {
                what: "trade cap",
                expected: h,
                got: cap.len(),
            }
            .into());
        }
        if s.horizon() != h {
            return Err(ModelError::LengthMismatch {
                what: "agent horizon",
                expected: h,
                got: s.horizon(),
            }
            .into());
        }
    }
    let block = Layout::new(h, true, 0).len();
    let layouts: Vec<Layout> = (0..specs.len())
        .map(|i| Layout::new(h, true, i * block))
        .collect();
    let mut b = Builder::new(block * specs.len());
    let zero_price = vec![0.0; h];
    for ((spec, layout), cap) in specs.iter().zip(&layouts).zip(trade_caps) {
        add_agent(&mut b, spec, *layout, Some((&zero_price, cap)), config.regularization);
    }
    for t in 0..h {
        let row = layouts.iter().map(|l| (l.p_et(t), 1.0)).collect();
        b.eq.push((row, 0.0, RowTag::new(ConstraintId::MarketClearing, None, Some(t))));
    }
    Ok((b.finish(), layouts))
}

/// Solves every agent jointly with per-slot market clearing, using the same
/// purchase caps as the consensus engine ([`trade_caps`]).
pub fn solve_ccmp_centralized(
    specs: &[ProsumerSpec],
    config: &SolverConfig,
) -> Result<CentralizedSolution, LocalOptError> {
    let caps = trade_caps(specs);
    let (problem, layouts) = build_ccmp(specs, &caps, config)?;
    let sol = solve_qp(&problem, config)?;
    match sol.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible => {
            return Err(LocalOptError::Infeasible {
                agent: sol
                    .infeasibility
                    .and_then(|r| r.worst.agent)
                    .unwrap_or(u32::MAX),
                report: sol.infeasibility,
            })
        }
        QpStatus::MaxIter => {
            return Err(LocalOptError::NotConverged {
                agent: u32::MAX,
                residual: sol.kkt_residual,
            })
        }
    }
    let h = specs[0].horizon();
    let clearing_start = problem.eq.nrows() - h;
    let lambda_star: Vec<f64> = (0..h).map(|t| sol.eq_duals[clearing_start + t]).collect();
    let mut schedules = Vec::with_capacity(specs.len());
    let mut operating_costs = Vec::with_capacity(specs.len());
    let mut total = 0.0;
    for (spec, layout) in specs.iter().zip(&layouts) {
        let s = extract_schedule(spec, *layout, &problem, &sol.x);
        let op = model::operating_cost(spec, &s)?;
        total += op + model::trading_cost(&s.p_et, &lambda_star)?;
        operating_costs.push(op);
        schedules.push(s);
    }
    Ok(CentralizedSolution {
        schedules,
        lambda_star,
        operating_costs,
        total_cost: total,
        kkt_residual: sol.kkt_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BalanceMode, FlexLoadParams, HvacParams, TariffModel};
    use approx::assert_abs_diff_eq;

    /// Agent with no HVAC need: outdoor, setpoint and initial temperature coincide.
    fn plain_spec(id: u32, renewable: Vec<f64>, inflexible: Vec<f64>, tariff: TariffModel) -> ProsumerSpec {
        let h = inflexible.len();
        ProsumerSpec {
            id,
            grid_cap: 20.0,
            renewable_avail: renewable,
            inflexible,
            outdoor_temp: vec![24.0; h],
            hvac: HvacParams {
                t_ref: 24.0,
                t_init: 24.0,
                t_min: 20.0,
                t_max: 28.0,
                beta_ac: 0.0,
                ..HvacParams::default()
            },
            flex: FlexLoadParams::none(h),
            tariff,
        }
    }

    fn cfg() -> SolverConfig {
        SolverConfig::default()
    }

    #[test]
    fn free_renewable_covers_everything() {
        let mut spec = plain_spec(0, vec![3.0, 2.0, 5.0], vec![1.0, 2.0, 0.5], TariffModel::default());
        spec.hvac.beta_ac = 0.2;
        let sol = solve_ucmp(&spec, &cfg()).unwrap();
        assert_abs_diff_eq!(sol.cost, 0.0, epsilon = 1e-8);
        for &g in &sol.schedule.p_g {
            assert_abs_diff_eq!(g, 0.0, epsilon = 1e-8);
        }
        assert!(sol.schedule.p_et.iter().all(|&p| p == 0.0));
        assert!(model::validate_schedule(&spec, &sol.schedule, BalanceMode::Standalone).is_empty());
    }

    #[test]
    fn inflexible_only_draws_from_grid() {
        let tariff = TariffModel { a_g: 0.02, b_g: 0.05 };
        let load = vec![1.5, 4.0, 0.0, 2.5];
        let spec = plain_spec(0, vec![0.0; 4], load.clone(), tariff);
        let sol = solve_ucmp(&spec, &cfg()).unwrap();
        for (g, l) in sol.schedule.p_g.iter().zip(&load) {
            assert_abs_diff_eq!(g, l, epsilon = 1e-8);
        }
        assert_abs_diff_eq!(sol.cost, model::grid_cost(&load, &tariff).unwrap(), epsilon = 1e-8);
    }

    fn flex_shift_spec() -> ProsumerSpec {
        let mut spec = plain_spec(0, vec![0.0, 0.0], vec![2.0, 0.0], TariffModel { a_g: 0.1, b_g: 0.0 });
        spec.flex = FlexLoadParams {
            p_min: vec![0.0, 0.0],
            p_max: vec![1.0, 1.0],
            p_ref: vec![1.0, 0.0],
            beta_f: 0.05,
        };
        spec
    }

    #[test]
    fn flexible_shift_matches_grid_search() {
        let spec = flex_shift_spec();
        // Brute force over the single free scalar p_f[0]; p_f[1] = 1 - p_f[0].
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=100 {
            let x = k as f64 / 100.0;
            let p_g = [2.0 + x, 1.0 - x];
            let cost = 0.1 * (p_g[0] * p_g[0] + p_g[1] * p_g[1])
                + 0.05 * ((x - 1.0).powi(2) + (1.0 - x).powi(2));
            if cost < best.0 {
                best = (cost, x);
            }
        }
        let sol = solve_ucmp(&spec, &cfg()).unwrap();
        assert_abs_diff_eq!(sol.schedule.p_f[0], best.1, epsilon = 0.005);
        assert_abs_diff_eq!(sol.cost, best.0, epsilon = 0.005);
        assert!(sol.schedule.p_f[0] < 1.0, "some load moves to slot 1");
        assert!(model::validate_schedule(&spec, &sol.schedule, BalanceMode::Standalone).is_empty());
        // The QP objective agrees with the model's cost up to the curvature floor.
        assert_abs_diff_eq!(sol.objective, sol.cost, epsilon = 1e-7);
    }

    #[test]
    fn zero_price_makes_trading_worthless() {
        let spec = plain_spec(0, vec![4.0, 2.5], vec![1.0, 2.0], TariffModel::default());
        let ucmp = solve_ucmp(&spec, &cfg()).unwrap();
        let ilp = solve_ilp(&spec, &[0.0, 0.0], None, &cfg()).unwrap();
        assert_abs_diff_eq!(ilp.cost, ucmp.cost, epsilon = 1e-7);
    }

    #[test]
    fn buyer_balances_marginal_grid_price_against_trade_price() {
        let tariff = TariffModel { a_g: 0.01, b_g: 0.03 };
        let spec = plain_spec(0, vec![0.0], vec![5.0], tariff);
        // lambda == b_g: any grid draw is dearer than trading, so buy it all.
        let sol = solve_ilp(&spec, &[0.03], None, &cfg()).unwrap();
        assert!(sol.schedule.p_et[0] >= -1e-9);
        assert_abs_diff_eq!(sol.schedule.p_et[0], 5.0, epsilon = 1e-6);
        // Interior split: 2 a p_g + b = lambda gives p_g = 1.
        let sol = solve_ilp(&spec, &[0.05], None, &cfg()).unwrap();
        assert_abs_diff_eq!(sol.schedule.p_g[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.schedule.p_et[0], 4.0, epsilon = 1e-6);
    }

    #[test]
    fn seller_sells_all_renewable() {
        let spec = plain_spec(0, vec![2.0], vec![0.0], TariffModel::default());
        // Exhaustive check over p_et in [-2, 0]: revenue only, no internal use.
        let best = (0..=200)
            .map(|k| -2.0 + k as f64 / 100.0)
            .map(|p| (0.2 * p, p))
            .fold((f64::INFINITY, 0.0), |a, b| if b.0 < a.0 { b } else { a });
        let sol = solve_ilp(&spec, &[0.2], None, &cfg()).unwrap();
        assert_abs_diff_eq!(sol.schedule.p_et[0], best.1, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.cost, -0.4, epsilon = 1e-6);
        assert!(model::validate_schedule(&spec, &sol.schedule, BalanceMode::Coordinated).is_empty());
    }

    #[test]
    fn individual_problem_never_worse_than_standalone() {
        let mut spec = flex_shift_spec();
        spec.renewable_avail = vec![1.0, 3.0];
        spec.hvac.beta_ac = 0.1;
        spec.outdoor_temp = vec![30.0, 32.0];
        let ucmp = solve_ucmp(&spec, &cfg()).unwrap();
        for lambda in [[0.0, 0.0], [0.1, 0.3], [0.5, -0.1], [1.0, 1.0]] {
            let ilp = solve_ilp(&spec, &lambda, None, &cfg()).unwrap();
            assert!(ilp.objective <= ucmp.objective + 1e-8, "{lambda:?}");
        }
    }

    #[test]
    fn centralized_symmetric_agents_do_not_trade() {
        let tariff = TariffModel { a_g: 0.02, b_g: 0.04 };
        let a = plain_spec(0, vec![0.0; 3], vec![1.0, 3.0, 2.0], tariff);
        let b = ProsumerSpec { id: 1, ..a.clone() };
        let sol = solve_ccmp_centralized(&[a.clone(), b], &cfg()).unwrap();
        for s in &sol.schedules {
            for &p in &s.p_et {
                assert_abs_diff_eq!(p, 0.0, epsilon = 1e-8);
            }
        }
        let alone = solve_ucmp(&a, &cfg()).unwrap();
        assert_abs_diff_eq!(sol.total_cost, 2.0 * alone.cost, epsilon = 1e-7);
    }

    /// Seller with 1 kW of renewable, buyer with 2 kW of load, a_g = 0.1, b_g = 0.
    /// KKT by hand: the buyer draws p_g = 1 from the grid, buys 1 kW, and the price
    /// equals its marginal grid cost 2 · 0.1 · 1 = 0.2. Total cost 0.1 · 1² = 0.1.
    fn two_agent_market() -> Vec<ProsumerSpec> {
        let tariff = TariffModel { a_g: 0.1, b_g: 0.0 };
        vec![
            plain_spec(0, vec![1.0], vec![0.0], tariff),
            plain_spec(1, vec![0.0], vec![2.0], tariff),
        ]
    }

    #[test]
    fn centralized_two_agent_market() {
        let sol = solve_ccmp_centralized(&two_agent_market(), &cfg()).unwrap();
        assert_abs_diff_eq!(sol.schedules[0].p_et[0], -1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.schedules[1].p_et[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.schedules[1].p_g[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.lambda_star[0], 0.2, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.total_cost, 0.1, epsilon = 1e-6);
        let clearing: f64 = sol.schedules.iter().map(|s| s.p_et[0]).sum();
        assert_abs_diff_eq!(clearing, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn centralized_needs_two_agents() {
        let one = &two_agent_market()[..1];
        assert!(matches!(
            solve_ccmp_centralized(one, &cfg()),
            Err(LocalOptError::Input(_))
        ));
    }

    #[test]
    fn infeasible_agent_is_named() {
        // 30 kW of load against a 20 kW grid connection and no renewable.
        let spec = plain_spec(7, vec![0.0], vec![30.0], TariffModel::default());
        match solve_ucmp(&spec, &cfg()) {
            Err(LocalOptError::Infeasible { agent, report }) => {
                assert_eq!(agent, 7);
                let report = report.expect("worst row reported");
                assert_eq!(report.worst.constraint, ConstraintId::StandaloneBalance);
                assert_abs_diff_eq!(report.magnitude, 10.0, epsilon = 1e-4);
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn trade_caps_exclude_own_supply() {
        let caps = trade_caps(&two_agent_market());
        assert_eq!(caps, vec![vec![0.0], vec![2.0]]);
    }
}
