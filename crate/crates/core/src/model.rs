//! Device models, cost functions and feasibility checks for a single prosumer.
//!
//! Every formula the optimizer and the consensus engine evaluate lives here:
//! supply bounds, the linearized tiered tariff, the first-order HVAC thermal
//! recursion, flexible-load shifting, and the trading balance.
//!
//! Units: power in kW, temperature in °C, money in $. With the default one-hour
//! slot, kW and kWh coincide numerically and every cost is a per-slot energy charge.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Feasibility tolerance for balance and bound checks, kW (or °C for temperature rows).
pub const TOL_FEAS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter {field}: {reason}")]
    InvalidParameter { field: String, reason: String },
    #[error("negative grid draw {value} at slot {slot}")]
    NegativeGridDraw { slot: usize, value: f64 },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ModelError {
    ModelError::InvalidParameter {
        field: field.into(),
        reason: reason.into(),
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), ModelError> {
    if expected == got {
        Ok(())
    } else {
        Err(ModelError::LengthMismatch {
            what,
            expected,
            got,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    /// Number of operating slots.
    pub slots: usize,
    /// Hours per slot.
    pub slot_duration: f64,
}

impl Horizon {
    pub fn new(slots: usize) -> Self {
        Self {
            slots,
            slot_duration: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.slots == 0 {
            return Err(invalid("horizon.slots", "must be at least 1"));
        }
        if !(self.slot_duration > 0.0) || !self.slot_duration.is_finite() {
            return Err(invalid("horizon.slot_duration", "must be positive"));
        }
        Ok(())
    }
}

impl Default for Horizon {
    fn default() -> Self {
        Self::new(24)
    }
}

/// Linear approximation of a tiered tariff: unit price `a_g * p_g + b_g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TariffModel {
    /// Price slope, $/kWh per kW.
    pub a_g: f64,
    /// Base price, $/kWh.
    pub b_g: f64,
}

impl Default for TariffModel {
    fn default() -> Self {
        Self {
            a_g: 0.01,
            b_g: 0.03,
        }
    }
}

impl TariffModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.a_g >= 0.0) || !self.a_g.is_finite() {
            return Err(invalid("tariff.a_g", "must be finite and >= 0"));
        }
        if !(self.b_g >= 0.0) || !self.b_g.is_finite() {
            return Err(invalid("tariff.b_g", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Marginal grid price at draw `p_g`, i.e. d(cost)/d(p_g).
    pub fn marginal_price(&self, p_g: f64) -> f64 {
        2.0 * self.a_g * p_g + self.b_g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HvacParams {
    /// Thermal capacitance parameter.
    pub phi_c: f64,
    /// Thermal resistance parameter.
    pub phi_r: f64,
    /// Working mode: positive cools, negative heats.
    pub eta: f64,
    /// Setpoint, °C.
    pub t_ref: f64,
    /// Lowest tolerable indoor temperature, °C.
    pub t_min: f64,
    /// Highest tolerable indoor temperature, °C.
    pub t_max: f64,
    /// Discomfort sensitivity, $/°C².
    pub beta_ac: f64,
    /// Indoor temperature before the first slot, °C.
    pub t_init: f64,
}

impl Default for HvacParams {
    fn default() -> Self {
        Self {
            phi_c: 3.3,
            phi_r: 1.35,
            eta: 1.0,
            t_ref: 23.0,
            t_min: 20.0,
            t_max: 26.0,
            beta_ac: 1.0,
            t_init: 23.0,
        }
    }
}

impl HvacParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let all = [
            self.phi_c,
            self.phi_r,
            self.eta,
            self.t_ref,
            self.t_min,
            self.t_max,
            self.beta_ac,
            self.t_init,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(invalid("hvac", "all parameters must be finite"));
        }
        if self.phi_c <= 0.0 {
            return Err(invalid("hvac.phi_c", "must be > 0"));
        }
        if self.phi_r <= 0.0 {
            return Err(invalid("hvac.phi_r", "must be > 0"));
        }
        if self.eta == 0.0 {
            return Err(invalid("hvac.eta", "must be nonzero"));
        }
        if !(self.t_min <= self.t_ref && self.t_ref <= self.t_max) {
            return Err(invalid("hvac.t_ref", "must satisfy t_min <= t_ref <= t_max"));
        }
        if self.beta_ac < 0.0 {
            return Err(invalid("hvac.beta_ac", "must be >= 0"));
        }
        Ok(())
    }

    /// Per-slot retention factor `1 - 1/(phi_c * phi_r)`.
    fn retention(&self) -> f64 {
        1.0 - 1.0 / (self.phi_c * self.phi_r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexLoadParams {
    pub p_min: Vec<f64>,
    pub p_max: Vec<f64>,
    /// Preferred schedule, kW.
    pub p_ref: Vec<f64>,
    /// Shift discomfort sensitivity, $/kW².
    pub beta_f: f64,
}

impl FlexLoadParams {
    /// A flexible load that is pinned to zero.
    pub fn none(slots: usize) -> Self {
        Self {
            p_min: vec![0.0; slots],
            p_max: vec![0.0; slots],
            p_ref: vec![0.0; slots],
            beta_f: 0.0,
        }
    }

    pub fn validate(&self, slots: usize) -> Result<(), ModelError> {
        check_len("flex.p_min", slots, self.p_min.len())?;
        check_len("flex.p_max", slots, self.p_max.len())?;
        check_len("flex.p_ref", slots, self.p_ref.len())?;
        for t in 0..slots {
            let (lo, hi, pref) = (self.p_min[t], self.p_max[t], self.p_ref[t]);
            if !(lo.is_finite() && hi.is_finite() && pref.is_finite()) {
                return Err(invalid(format!("flex[{t}]"), "values must be finite"));
            }
            if !(0.0 <= lo && lo <= hi) {
                return Err(invalid(format!("flex.p_min[{t}]"), "need 0 <= p_min <= p_max"));
            }
            if !(lo <= pref && pref <= hi) {
                return Err(invalid(format!("flex.p_ref[{t}]"), "need p_min <= p_ref <= p_max"));
            }
        }
        if !(self.beta_f >= 0.0) || !self.beta_f.is_finite() {
            return Err(invalid("flex.beta_f", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// One agent's private device parameters and exogenous series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProsumerSpec {
    pub id: u32,
    /// Grid draw capacity, kW.
    pub grid_cap: f64,
    pub renewable_avail: Vec<f64>,
    pub inflexible: Vec<f64>,
    pub outdoor_temp: Vec<f64>,
    pub hvac: HvacParams,
    pub flex: FlexLoadParams,
    pub tariff: TariffModel,
}

impl ProsumerSpec {
    pub fn horizon(&self) -> usize {
        self.inflexible.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let h = self.horizon();
        if h == 0 {
            return Err(invalid("inflexible", "horizon must have at least one slot"));
        }
        check_len("renewable_avail", h, self.renewable_avail.len())?;
        check_len("outdoor_temp", h, self.outdoor_temp.len())?;
        if !(self.grid_cap > 0.0) || !self.grid_cap.is_finite() {
            return Err(invalid("grid_cap", "must be finite and > 0"));
        }
        for t in 0..h {
            if !(self.renewable_avail[t] >= 0.0) || !self.renewable_avail[t].is_finite() {
                return Err(invalid(format!("renewable_avail[{t}]"), "must be finite and >= 0"));
            }
            if !(self.inflexible[t] >= 0.0) || !self.inflexible[t].is_finite() {
                return Err(invalid(format!("inflexible[{t}]"), "must be finite and >= 0"));
            }
            if !self.outdoor_temp[t].is_finite() {
                return Err(invalid(format!("outdoor_temp[{t}]"), "must be finite"));
            }
        }
        self.hvac.validate()?;
        self.flex.validate(h)?;
        self.tariff.validate()
    }
}

/// One agent's decisions over the horizon. `p_et` is positive when buying.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub p_re: Vec<f64>,
    pub p_g: Vec<f64>,
    pub p_ac: Vec<f64>,
    pub p_f: Vec<f64>,
    pub p_et: Vec<f64>,
    /// Indoor temperature implied by `p_ac`, °C.
    pub t_in: Vec<f64>,
}

impl Schedule {
    pub fn zeros(slots: usize) -> Self {
        Self {
            p_re: vec![0.0; slots],
            p_g: vec![0.0; slots],
            p_ac: vec![0.0; slots],
            p_f: vec![0.0; slots],
            p_et: vec![0.0; slots],
            t_in: vec![0.0; slots],
        }
    }

    pub fn horizon(&self) -> usize {
        self.p_g.len()
    }
}

/// One step of the HVAC thermal recursion.
pub fn thermal_step(t_prev: f64, t_out: f64, p_ac: f64, hvac: &HvacParams) -> f64 {
    t_prev - (t_prev - t_out + hvac.eta * hvac.phi_r * p_ac) / (hvac.phi_c * hvac.phi_r)
}

/// Indoor temperature trajectory by iterating [`thermal_step`] from `hvac.t_init`.
pub fn unroll_temperature(
    hvac: &HvacParams,
    t_out: &[f64],
    p_ac: &[f64],
) -> Result<Vec<f64>, ModelError> {
    check_len("p_ac", t_out.len(), p_ac.len())?;
    let mut t = hvac.t_init;
    Ok(t_out
        .iter()
        .zip(p_ac)
        .map(|(&out, &p)| {
            t = thermal_step(t, out, p, hvac);
            t
        })
        .collect())
}

/// The thermal recursion written as `t_in = matrix * p_ac + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermalAffine {
    /// Lower-triangular response of indoor temperature to HVAC power.
    pub matrix: DMatrix<f64>,
    /// Free response driven by the initial and outdoor temperatures.
    pub offset: DVector<f64>,
}

impl ThermalAffine {
    pub fn new(hvac: &HvacParams, t_out: &[f64]) -> Self {
        let h = t_out.len();
        let keep = hvac.retention();
        let gain = 1.0 / (hvac.phi_c * hvac.phi_r);
        let drive = hvac.eta / hvac.phi_c;

        let mut powers = Vec::with_capacity(h + 1);
        let mut acc = 1.0;
        for _ in 0..=h {
            powers.push(acc);
            acc *= keep;
        }

        let matrix = DMatrix::from_fn(h, h, |t, s| {
            if s <= t {
                -drive * powers[t - s]
            } else {
                0.0
            }
        });
        let mut offset = DVector::zeros(h);
        let mut t_free = hvac.t_init;
        for t in 0..h {
            t_free = keep * t_free + gain * t_out[t];
            offset[t] = t_free;
        }
        Self { matrix, offset }
    }

    pub fn apply(&self, p_ac: &[f64]) -> Vec<f64> {
        let p = DVector::from_column_slice(p_ac);
        (&self.matrix * p + &self.offset).iter().copied().collect()
    }
}

/// Grid energy charge over the horizon.
pub fn grid_cost(p_g: &[f64], tariff: &TariffModel) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for (slot, &p) in p_g.iter().enumerate() {
        if p < 0.0 || p.is_nan() {
            return Err(ModelError::NegativeGridDraw { slot, value: p });
        }
        total += tariff.a_g * p * p + tariff.b_g * p;
    }
    Ok(total)
}

/// Quadratic discomfort from deviating off the HVAC setpoint.
pub fn hvac_discomfort(t_in: &[f64], hvac: &HvacParams) -> f64 {
    hvac.beta_ac
        * t_in
            .iter()
            .map(|t| (t - hvac.t_ref) * (t - hvac.t_ref))
            .sum::<f64>()
}

/// Quadratic discomfort from shifting the flexible load off its preferred schedule.
pub fn flex_discomfort(p_f: &[f64], flex: &FlexLoadParams) -> f64 {
    flex.beta_f
        * p_f
            .iter()
            .zip(&flex.p_ref)
            .map(|(p, r)| (p - r) * (p - r))
            .sum::<f64>()
}

/// Breakdown of an agent's operating cost.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub grid: f64,
    pub hvac: f64,
    pub flex: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.grid + self.hvac + self.flex
    }
}

pub fn operating_cost_breakdown(
    spec: &ProsumerSpec,
    schedule: &Schedule,
) -> Result<CostBreakdown, ModelError> {
    let h = spec.horizon();
    check_len("schedule.p_g", h, schedule.p_g.len())?;
    check_len("schedule.p_ac", h, schedule.p_ac.len())?;
    check_len("schedule.p_f", h, schedule.p_f.len())?;
    let t_in = unroll_temperature(&spec.hvac, &spec.outdoor_temp, &schedule.p_ac)?;
    Ok(CostBreakdown {
        grid: grid_cost(&schedule.p_g, &spec.tariff)?,
        hvac: hvac_discomfort(&t_in, &spec.hvac),
        flex: flex_discomfort(&schedule.p_f, &spec.flex),
    })
}

/// Grid cost plus HVAC and flexible-load discomfort.
pub fn operating_cost(spec: &ProsumerSpec, schedule: &Schedule) -> Result<f64, ModelError> {
    operating_cost_breakdown(spec, schedule).map(|c| c.total())
}

/// Payment for traded energy at the given prices; negative when revenue dominates.
pub fn trading_cost(p_et: &[f64], lambda: &[f64]) -> Result<f64, ModelError> {
    check_len("lambda", p_et.len(), lambda.len())?;
    Ok(p_et.iter().zip(lambda).map(|(p, l)| p * l).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMode {
    /// No trading: supply must cover demand locally.
    Standalone,
    /// Trades enter the per-slot balance.
    Coordinated,
}

/// Identifies a model constraint. Also used to tag optimizer rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintId {
    /// `0 <= p_g <= grid_cap`.
    GridCapacity,
    /// `0 <= p_re <= renewable_avail`.
    RenewableAvailability,
    /// `p_ac >= 0`.
    HvacNonNegative,
    /// `t_min <= t_in <= t_max`.
    IndoorTemperature,
    /// `t_in` disagrees with the thermal recursion.
    ThermalDynamics,
    /// `p_min <= p_f <= p_max`.
    FlexBounds,
    /// Total flexible energy equals the preferred total.
    FlexEnergy,
    /// Selling no more than the available renewable energy.
    Overselling,
    /// Trade above the configured trade cap.
    TradeCap,
    /// Local supply/demand balance without trading.
    StandaloneBalance,
    /// Local supply/demand balance including trades.
    CoordinatedBalance,
    /// Trade recorded in a standalone schedule.
    StandaloneTrade,
    /// Sum of all agents' trades in a slot.
    MarketClearing,
    /// Constraint of a QP not built from the model.
    Generic,
}

impl ConstraintId {
    pub fn describe(&self) -> &'static str {
        match self {
            ConstraintId::GridCapacity => "grid draw within [0, grid_cap]",
            ConstraintId::RenewableAvailability => "renewable use within [0, available]",
            ConstraintId::HvacNonNegative => "HVAC power non-negative",
            ConstraintId::IndoorTemperature => "indoor temperature within tolerable band",
            ConstraintId::ThermalDynamics => "indoor temperature follows thermal dynamics",
            ConstraintId::FlexBounds => "flexible load within per-slot bounds",
            ConstraintId::FlexEnergy => "flexible energy total equals preferred total",
            ConstraintId::Overselling => "sales limited by available renewable energy",
            ConstraintId::TradeCap => "purchases limited by trade cap",
            ConstraintId::StandaloneBalance => "standalone supply/demand balance",
            ConstraintId::CoordinatedBalance => "coordinated supply/demand balance",
            ConstraintId::StandaloneTrade => "no trading in standalone mode",
            ConstraintId::MarketClearing => "trades clear in every slot",
            ConstraintId::Generic => "generic constraint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: ConstraintId,
    /// `None` for constraints spanning the whole horizon.
    pub slot: Option<usize>,
    /// Amount by which the constraint is breached.
    pub magnitude: f64,
}

/// Lists every constraint the schedule breaks, at tolerance [`TOL_FEAS`].
///
/// Shape problems (series of the wrong length) are reported as a single
/// violation against the balance constraint for the mode, with the length
/// difference as magnitude.
#[allow(clippy::needless_range_loop)]
pub fn validate_schedule(
    spec: &ProsumerSpec,
    schedule: &Schedule,
    mode: BalanceMode,
) -> Vec<Violation> {
    let h = spec.horizon();
    let balance_id = match mode {
        BalanceMode::Standalone => ConstraintId::StandaloneBalance,
        BalanceMode::Coordinated => ConstraintId::CoordinatedBalance,
    };
    let lens = [
        schedule.p_re.len(),
        schedule.p_g.len(),
        schedule.p_ac.len(),
        schedule.p_f.len(),
        schedule.p_et.len(),
        schedule.t_in.len(),
    ];
    if let Some(&bad) = lens.iter().find(|&&l| l != h) {
        return vec![Violation {
            constraint: balance_id,
            slot: None,
            magnitude: (bad as f64 - h as f64).abs(),
        }];
    }

    let mut out = Vec::new();
    let mut push = |constraint, slot, magnitude: f64| {
        if magnitude > TOL_FEAS {
            out.push(Violation {
                constraint,
                slot,
                magnitude,
            });
        }
    };

    let t_model = unroll_temperature(&spec.hvac, &spec.outdoor_temp, &schedule.p_ac)
        .unwrap_or_else(|_| schedule.t_in.clone());

    for t in 0..h {
        let s = Some(t);
        let p_g = schedule.p_g[t];
        push(ConstraintId::GridCapacity, s, (-p_g).max(p_g - spec.grid_cap));
        let p_re = schedule.p_re[t];
        push(
            ConstraintId::RenewableAvailability,
            s,
            (-p_re).max(p_re - spec.renewable_avail[t]),
        );
        push(ConstraintId::HvacNonNegative, s, -schedule.p_ac[t]);
        push(
            ConstraintId::ThermalDynamics,
            s,
            (schedule.t_in[t] - t_model[t]).abs(),
        );
        let t_in = t_model[t];
        push(
            ConstraintId::IndoorTemperature,
            s,
            (spec.hvac.t_min - t_in).max(t_in - spec.hvac.t_max),
        );
        let p_f = schedule.p_f[t];
        push(
            ConstraintId::FlexBounds,
            s,
            (spec.flex.p_min[t] - p_f).max(p_f - spec.flex.p_max[t]),
        );

        let demand = schedule.p_ac[t] + p_f + spec.inflexible[t];
        let mut supply = p_re + p_g;
        match mode {
            BalanceMode::Standalone => {
                push(ConstraintId::StandaloneTrade, s, schedule.p_et[t].abs());
            }
            BalanceMode::Coordinated => {
                supply += schedule.p_et[t];
                push(
                    ConstraintId::Overselling,
                    s,
                    -spec.renewable_avail[t] - schedule.p_et[t],
                );
            }
        }
        push(balance_id, s, (supply - demand).abs());
    }

    let flex_total: f64 = schedule.p_f.iter().sum();
    let pref_total: f64 = spec.flex.p_ref.iter().sum();
    push(ConstraintId::FlexEnergy, None, (flex_total - pref_total).abs());
    out
}
