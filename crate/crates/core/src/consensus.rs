//! Synchronous price/mismatch consensus between prosumer agents.
//!
//! Each round runs three barrier-separated phases: every agent mixes its
//! neighbours' previous prices and nudges its own by its mismatch estimate,
//! solves its individual problem at that price, then mixes the neighbours'
//! mismatch estimates and adds its own change in trade. Agents exchange only
//! prices and mismatch estimates.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::localopt::{self, LocalOptError, SolverConfig};
use crate::model::{ProsumerSpec, Schedule};
use crate::topology::{TopologyError, WeightMatrix};

/// Allowed drift of the tracking invariant per round.
pub const TRACKING_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ConsensusError {
    #[error("invalid consensus input: {0}")]
    Input(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Agent(#[from] LocalOptError),
    #[error("could not start worker pool: {0}")]
    ThreadPool(String),
}

/// Tuning of the consensus iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusConfig {
    /// Learning rate, $/kWh per kW of mismatch.
    pub epsilon: f64,
    /// Bound on the per-agent price change between rounds (2-norm over slots).
    pub tol_lambda: f64,
    /// Bound on the per-agent mismatch estimate (2-norm over slots), kW.
    pub tol_e: f64,
    /// Bound on the pool imbalance in every slot, kW.
    pub clearing_tol: f64,
    pub max_rounds: usize,
    /// Initial price per slot; each agent's base grid price when absent.
    pub lambda_init: Option<Vec<f64>>,
    /// Worker cap for the per-round phases; results do not depend on it.
    pub threads: Option<usize>,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.005,
            tol_lambda: 1e-4,
            tol_e: 1e-3,
            clearing_tol: 1e-3,
            max_rounds: 5000,
            lambda_init: None,
            threads: None,
        }
    }
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<(), ConsensusError> {
        let positive = [
            ("epsilon", self.epsilon),
            ("tol_lambda", self.tol_lambda),
            ("tol_e", self.tol_e),
            ("clearing_tol", self.clearing_tol),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConsensusError::Input(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_rounds == 0 {
            return Err(ConsensusError::Input("max_rounds must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(ConsensusError::Input("threads must be at least 1".into()));
        }
        if let Some(init) = &self.lambda_init {
            if init.iter().any(|v| !v.is_finite()) {
                return Err(ConsensusError::Input("lambda_init must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Learning rate scaled to the grid-cost curvature: half the mean `a_g`.
pub fn auto_epsilon(specs: &[ProsumerSpec]) -> f64 {
    let n = specs.len().max(1) as f64;
    0.5 * specs.iter().map(|s| s.tariff.a_g).sum::<f64>() / n
}

/// What one agent knows between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    /// Price estimate per slot, $/kWh.
    pub lambda: Vec<f64>,
    /// Mismatch estimate per slot, kW.
    pub e: Vec<f64>,
    /// Trade from the previous round, kW.
    pub p_et_prev: Vec<f64>,
    pub schedule: Schedule,
    pub round: usize,
}

/// Snapshot of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Price estimates, indexed `[agent][slot]`.
    pub lambda: Vec<Vec<f64>>,
    /// 2-norm of each agent's mismatch estimate.
    pub e_norm: Vec<f64>,
    /// Pool imbalance `sum_i p_et` per slot.
    pub mismatch: Vec<f64>,
    /// Operating plus trading cost of each agent at this round's price.
    pub objective: Vec<f64>,
    /// Largest `|sum_i e_i - sum_i p_et|` over slots.
    pub tracking_error: f64,
}

/// Full history of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunTrace {
    pub rounds: Vec<RoundRecord>,
    pub converged: bool,
    pub rounds_used: usize,
    pub wall_time_s: f64,
}

/// Result of a consensus run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub trace: RunTrace,
    pub schedules: Vec<Schedule>,
    /// Final price estimates, indexed `[agent][slot]`.
    pub lambda: Vec<Vec<f64>>,
    /// Final operating plus trading cost per agent.
    pub costs: Vec<f64>,
}

impl RunOutcome {
    pub fn converged(&self) -> bool {
        self.trace.converged
    }

    /// Agent-averaged price per slot.
    pub fn mean_lambda(&self) -> Vec<f64> {
        let n = self.lambda.len() as f64;
        let h = self.lambda.first().map_or(0, Vec::len);
        (0..h).map(|t| self.lambda.iter().map(|l| l[t]).sum::<f64>() / n).collect()
    }

    /// Largest pool imbalance over slots.
    pub fn clearing_residual(&self) -> f64 {
        max_abs(&pool_sum(self.schedules.iter().map(|s| s.p_et.as_slice()), self.horizon()))
    }

    fn horizon(&self) -> usize {
        self.schedules.first().map_or(0, Schedule::horizon)
    }
}

fn pool_sum<'a>(series: impl Iterator<Item = &'a [f64]>, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; h];
    for s in series {
        for (o, v) in out.iter_mut().zip(s) {
            *o += v;
        }
    }
    out
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Round-zero states: initial prices, zero mismatch and zero previous trade.
pub fn init_states(
    specs: &[ProsumerSpec],
    config: &ConsensusConfig,
) -> Result<Vec<AgentState>, ConsensusError> {
    let h = specs
        .first()
        .ok_or_else(|| ConsensusError::Input("no agents".into()))?
        .horizon();
    if let Some(s) = specs.iter().find(|s| s.horizon() != h) {
        return Err(ConsensusError::Input(format!(
            "agent {} has {} slots, expected {h}",
            s.id,
            s.horizon()
        )));
    }
    if let Some(init) = &config.lambda_init {
        if init.len() != h {
            return Err(ConsensusError::Input(format!(
                "lambda_init has {} slots, expected {h}",
                init.len()
            )));
        }
    }
    Ok(specs
        .iter()
        .map(|s| AgentState {
            lambda: config.lambda_init.clone().unwrap_or_else(|| vec![s.tariff.b_g; h]),
            e: vec![0.0; h],
            p_et_prev: vec![0.0; h],
            schedule: Schedule::zeros(h),
            round: 0,
        })
        .collect())
}

/// New price of agent `i`: `sum_j w_ij lambda_j + epsilon e_i`.
fn price_of(i: usize, states: &[AgentState], w: &WeightMatrix, lambdas: &[Vec<f64>], epsilon: f64) -> Vec<f64> {
    let mut out = w.mix_row(i, lambdas);
    for (o, e) in out.iter_mut().zip(&states[i].e) {
        *o += epsilon * e;
    }
    out
}

/// New mismatch of agent `i`: `sum_j w_ij e_j + p_et_i(new) - p_et_i(prev)`.
fn mismatch_of(i: usize, states: &[AgentState], w: &WeightMatrix, es: &[Vec<f64>], trade: &[f64]) -> Vec<f64> {
    let mut out = w.mix_row(i, es);
    for ((o, new), old) in out.iter_mut().zip(trade).zip(&states[i].p_et_prev) {
        *o += new - old;
    }
    out
}

/// Price update for every agent from the previous round's values.
pub fn price_update(states: &[AgentState], w: &WeightMatrix, epsilon: f64) -> Vec<Vec<f64>> {
    let lambdas: Vec<Vec<f64>> = states.iter().map(|s| s.lambda.clone()).collect();
    (0..states.len()).map(|i| price_of(i, states, w, &lambdas, epsilon)).collect()
}

/// Mismatch update for every agent given this round's trades.
pub fn mismatch_update(states: &[AgentState], w: &WeightMatrix, new_trades: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let es: Vec<Vec<f64>> = states.iter().map(|s| s.e.clone()).collect();
    (0..states.len())
        .map(|i| mismatch_of(i, states, w, &es, &new_trades[i]))
        .collect()
}

/// Per-agent stopping rule: small price change and small mismatch for everyone.
pub fn check_convergence(states: &[AgentState], prev_lambda: &[Vec<f64>], config: &ConsensusConfig) -> bool {
    states.iter().zip(prev_lambda).all(|(s, prev)| {
        let drift: Vec<f64> = s.lambda.iter().zip(prev).map(|(a, b)| a - b).collect();
        norm2(&drift) <= config.tol_lambda && norm2(&s.e) <= config.tol_e
    })
}

/// Runs consensus rounds until convergence or `max_rounds`.
///
/// Running out of rounds is not an error: the trace reports `converged = false`.
pub fn run(
    specs: &[ProsumerSpec],
    weights: &WeightMatrix,
    config: &ConsensusConfig,
    solver: &SolverConfig,
) -> Result<RunOutcome, ConsensusError> {
    config.validate()?;
    if weights.n() != specs.len() {
        return Err(ConsensusError::Input(format!(
            "weight matrix is for {} agents, scenario has {}",
            weights.n(),
            specs.len()
        )));
    }
    for s in specs {
        s.validate().map_err(LocalOptError::from)?;
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = config.threads {
        pool = pool.num_threads(t);
    }
    let pool = pool.build().map_err(|e| ConsensusError::ThreadPool(e.to_string()))?;
    pool.install(|| run_rounds(specs, weights, config, solver))
}

fn run_rounds(
    specs: &[ProsumerSpec],
    weights: &WeightMatrix,
    config: &ConsensusConfig,
    solver: &SolverConfig,
) -> Result<RunOutcome, ConsensusError> {
    let start = Instant::now();
    let mut states = init_states(specs, config)?;
    let n = specs.len();
    let h = specs[0].horizon();
    let caps = if n > 1 { localopt::trade_caps(specs) } else { vec![vec![0.0; h]] };
    let mut trace = RunTrace::default();
    let mut costs = vec![0.0; n];

    for round in 1..=config.max_rounds {
        let prev_lambda: Vec<Vec<f64>> = states.iter().map(|s| s.lambda.clone()).collect();
        let lambdas: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| price_of(i, &states, weights, &prev_lambda, config.epsilon))
            .collect();

        let solved: Vec<_> = (0..n)
            .into_par_iter()
            .map(|i| localopt::solve_ilp(&specs[i], &lambdas[i], Some(&caps[i]), solver))
            .collect();
        let mut solutions = Vec::with_capacity(n);
        for s in solved {
            solutions.push(s?);
        }
        let trades: Vec<Vec<f64>> = solutions.iter().map(|s| s.schedule.p_et.clone()).collect();
        costs = solutions.iter().map(|s| s.cost).collect();

        let prev_e: Vec<Vec<f64>> = states.iter().map(|s| s.e.clone()).collect();
        let es: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| mismatch_of(i, &states, weights, &prev_e, &trades[i]))
            .collect();

        for ((state, sol), (lambda, e)) in states.iter_mut().zip(solutions).zip(lambdas.into_iter().zip(es)) {
            state.lambda = lambda;
            state.e = e;
            state.p_et_prev = sol.schedule.p_et.clone();
            state.schedule = sol.schedule;
            state.round = round;
        }

        let mismatch = pool_sum(trades.iter().map(Vec::as_slice), h);
        let e_sum = pool_sum(states.iter().map(|s| s.e.as_slice()), h);
        let tracking_error = e_sum.iter().zip(&mismatch).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        debug_assert!(
            tracking_error <= TRACKING_TOL,
            "tracking invariant broken at round {round}: {tracking_error:e}"
        );
        let converged =
            check_convergence(&states, &prev_lambda, config) && max_abs(&mismatch) <= config.clearing_tol;
        trace.rounds.push(RoundRecord {
            round,
            lambda: states.iter().map(|s| s.lambda.clone()).collect(),
            e_norm: states.iter().map(|s| norm2(&s.e)).collect(),
            mismatch,
            objective: costs.clone(),
            tracking_error,
        });
        trace.rounds_used = round;
        if converged {
            trace.converged = true;
            break;
        }
    }
    trace.wall_time_s = start.elapsed().as_secs_f64();
    Ok(RunOutcome {
        trace,
        lambda: states.iter().map(|s| s.lambda.clone()).collect(),
        schedules: states.into_iter().map(|s| s.schedule).collect(),
        costs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FlexLoadParams, HvacParams, TariffModel};
    use crate::topology::{complete, metropolis_weights};
    use approx::assert_abs_diff_eq;

    fn state(lambda: Vec<f64>, e: Vec<f64>, prev: Vec<f64>) -> AgentState {
        let h = lambda.len();
        AgentState { lambda, e, p_et_prev: prev, schedule: Schedule::zeros(h), round: 1 }
    }

    fn half() -> WeightMatrix {
        WeightMatrix { w: vec![vec![0.5, 0.5], vec![0.5, 0.5]] }
    }

    fn identity() -> WeightMatrix {
        WeightMatrix { w: vec![vec![1.0, 0.0], vec![0.0, 1.0]] }
    }

    fn plain(id: u32, renewable: f64, load: f64, tariff: TariffModel) -> ProsumerSpec {
        ProsumerSpec {
            id,
            grid_cap: 20.0,
            renewable_avail: vec![renewable],
            inflexible: vec![load],
            outdoor_temp: vec![24.0],
            hvac: HvacParams { t_ref: 24.0, t_init: 24.0, beta_ac: 0.0, ..HvacParams::default() },
            flex: FlexLoadParams::none(1),
            tariff,
        }
    }

    #[test]
    fn price_update_substitution() {
        let states = vec![state(vec![10.0], vec![5.0], vec![0.0]), state(vec![20.0], vec![0.0], vec![0.0])];
        let lambda = price_update(&states, &half(), 0.1);
        assert_abs_diff_eq!(lambda[0][0], 15.5, epsilon = 1e-12);
        assert_abs_diff_eq!(lambda[1][0], 15.0, epsilon = 1e-12);
    }

    #[test]
    fn price_update_fixed_point_and_identity() {
        let states = vec![state(vec![3.0, 4.0], vec![0.0; 2], vec![0.0; 2]); 2];
        assert_eq!(price_update(&states, &half(), 0.1), vec![vec![3.0, 4.0]; 2]);
        let states = vec![state(vec![1.0], vec![2.0], vec![0.0]), state(vec![5.0], vec![-1.0], vec![0.0])];
        let lambda = price_update(&states, &identity(), 0.5);
        assert_eq!(lambda, vec![vec![2.0], vec![4.5]]);
    }

    #[test]
    fn mismatch_update_substitution() {
        let states = vec![state(vec![0.0], vec![4.0], vec![1.0]), state(vec![0.0], vec![0.0], vec![0.0])];
        let e = mismatch_update(&states, &half(), &[vec![0.0], vec![0.0]]);
        assert_abs_diff_eq!(e[0][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e[1][0], 2.0, epsilon = 1e-12);
        let steady = vec![state(vec![0.0], vec![3.0], vec![1.5]); 2];
        assert_eq!(mismatch_update(&steady, &half(), &[vec![1.5], vec![1.5]]), vec![vec![3.0]; 2]);
    }

    #[test]
    fn mismatch_update_conserves_sum() {
        let w = metropolis_weights(&complete(3).unwrap()).unwrap();
        let states = vec![
            state(vec![0.0; 2], vec![0.3, -1.0], vec![1.0, 0.0]),
            state(vec![0.0; 2], vec![2.0, 0.5], vec![-2.0, 1.0]),
            state(vec![0.0; 2], vec![-0.7, 0.1], vec![0.5, 0.5]),
        ];
        let trades = vec![vec![0.5, 0.2], vec![-1.0, 1.5], vec![0.0, 0.0]];
        let e = mismatch_update(&states, &w, &trades);
        for t in 0..2 {
            let before: f64 = states.iter().map(|s| s.e[t]).sum();
            let delta: f64 = (0..3).map(|i| trades[i][t] - states[i].p_et_prev[t]).sum();
            let after: f64 = e.iter().map(|v| v[t]).sum();
            assert_abs_diff_eq!(after, before + delta, epsilon = 1e-12);
        }
    }

    #[test]
    fn convergence_requires_both_conditions_for_all() {
        let cfg = ConsensusConfig::default();
        let prev = vec![vec![0.1, 0.2]; 2];
        let calm = vec![state(vec![0.1, 0.2], vec![0.0; 2], vec![0.0; 2]); 2];
        assert!(check_convergence(&calm, &prev, &cfg));
        let mut noisy = calm.clone();
        noisy[1].e = vec![2.0 * cfg.tol_e, 0.0];
        assert!(!check_convergence(&noisy, &prev, &cfg));
        let mut drifting = calm.clone();
        drifting[0].lambda[0] += 0.5 * cfg.tol_lambda;
        assert!(check_convergence(&drifting, &prev, &cfg));
        drifting[0].e = vec![0.0, 1.0];
        assert!(!check_convergence(&drifting, &prev, &cfg));
    }

    #[test]
    fn init_states_defaults() {
        let specs = vec![plain(0, 1.0, 0.0, TariffModel::default()), plain(1, 0.0, 2.0, TariffModel::default())];
        let states = init_states(&specs, &ConsensusConfig::default()).unwrap();
        assert_eq!(states[0], states[1]);
        assert_eq!(states[0].lambda, vec![0.03]);
        let zero = ConsensusConfig { lambda_init: Some(vec![0.0]), ..ConsensusConfig::default() };
        let states = init_states(&specs, &zero).unwrap();
        assert_eq!(states[1].lambda, vec![0.0]);
        let e_sum: f64 = states.iter().map(|s| s.e[0]).sum();
        let p_sum: f64 = states.iter().map(|s| s.p_et_prev[0]).sum();
        assert_eq!(e_sum, p_sum);
        let mut bad = specs.clone();
        bad[1].inflexible.push(0.0);
        assert!(init_states(&bad, &ConsensusConfig::default()).is_err());
    }

    #[test]
    fn symmetric_agents_without_renewable_do_not_trade() {
        let specs = vec![plain(0, 0.0, 2.0, TariffModel::default()), plain(1, 0.0, 2.0, TariffModel::default())];
        let w = metropolis_weights(&complete(2).unwrap()).unwrap();
        let out = run(&specs, &w, &ConsensusConfig::default(), &SolverConfig::default()).unwrap();
        assert!(out.converged());
        for s in &out.schedules {
            assert_eq!(s.p_et, vec![0.0]);
        }
        assert_eq!(out.lambda[0], out.lambda[1]);
    }

    #[test]
    fn two_agent_market_clears_at_hand_solved_price() {
        let tariff = TariffModel { a_g: 0.1, b_g: 0.0 };
        let specs = vec![plain(0, 1.0, 0.0, tariff), plain(1, 0.0, 2.0, tariff)];
        let w = metropolis_weights(&complete(2).unwrap()).unwrap();
        let out = run(&specs, &w, &ConsensusConfig::default(), &SolverConfig::default()).unwrap();
        assert!(out.converged(), "rounds {}", out.trace.rounds_used);
        assert_abs_diff_eq!(out.mean_lambda()[0], 0.2, epsilon = 1e-3);
        assert_abs_diff_eq!(out.schedules[1].p_et[0], 1.0, epsilon = 1e-3);
        assert_abs_diff_eq!(out.costs.iter().sum::<f64>(), 0.1, epsilon = 1e-4);
        assert!(out.trace.rounds.iter().all(|r| r.tracking_error <= TRACKING_TOL));
    }

    #[test]
    fn truncated_run_reports_not_converged() {
        let tariff = TariffModel { a_g: 0.1, b_g: 0.0 };
        let specs = vec![plain(0, 1.0, 0.0, tariff), plain(1, 0.0, 2.0, tariff)];
        let w = metropolis_weights(&complete(2).unwrap()).unwrap();
        let cfg = ConsensusConfig { max_rounds: 1, ..ConsensusConfig::default() };
        let out = run(&specs, &w, &cfg, &SolverConfig::default()).unwrap();
        assert!(!out.converged());
        assert_eq!(out.trace.rounds.len(), 1);
    }

    #[test]
    fn infeasible_agent_aborts_run() {
        let specs = vec![plain(0, 0.0, 1.0, TariffModel::default()), plain(9, 0.0, 50.0, TariffModel::default())];
        let w = metropolis_weights(&complete(2).unwrap()).unwrap();
        match run(&specs, &w, &ConsensusConfig::default(), &SolverConfig::default()) {
            Err(ConsensusError::Agent(LocalOptError::Infeasible { agent, .. })) => assert_eq!(agent, 9),
            other => panic!("expected infeasible agent 9, got {other:?}"),
        }
    }
}
