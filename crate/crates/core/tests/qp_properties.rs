//! Randomized optimality checks of the QP solver and the agent problems,
//! certified by a KKT oracle written independently of the library.

mod common;

use common::{kkt_oracle, random_qp};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transactive::localopt::{self, solve_qp, QpProblem, QpStatus, SolverConfig};
use transactive::model::{self, BalanceMode, FlexLoadParams, HvacParams, ProsumerSpec, TariffModel, TOL_FEAS};

#[test]
fn random_feasible_qps_meet_kkt_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let config = SolverConfig::default();
    for k in 0..100 {
        let p = random_qp(&mut rng);
        let s = solve_qp(&p, &config).unwrap();
        assert_eq!(s.status, QpStatus::Optimal, "instance {k}");
        let r = kkt_oracle(&p, &s);
        assert!(r <= 1e-8, "instance {k}: KKT residual {r:e}");
        assert!((p.objective(&s.x) - s.objective).abs() <= 1e-9 * (1.0 + s.objective.abs()), "instance {k}");
    }
}

#[test]
fn solution_is_not_beaten_by_feasible_perturbations() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let config = SolverConfig::default();
    for _ in 0..20 {
        let n = rng.gen_range(2..=6);
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let q = m.transpose() * m + DMatrix::identity(n, n) * 0.05;
        let c = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let p = QpProblem::new(q, c).with_bounds(DVector::from_element(n, -1.0), DVector::from_element(n, 1.0));
        let s = solve_qp(&p, &config).unwrap();
        let best = p.objective(&s.x);
        for _ in 0..200 {
            let y = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            assert!(p.objective(&y) >= best - 1e-9);
        }
    }
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let p = random_qp(&mut rng);
        let n = p.c.len();
        let x = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
        let g = p.gradient(&x);
        let step = 1e-5;
        for i in 0..n {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[i] += step;
            lo[i] -= step;
            let fd = (p.objective(&hi) - p.objective(&lo)) / (2.0 * step);
            let scale = g[i].abs().max(1.0);
            assert!((fd - g[i]).abs() <= 1e-6 * scale, "component {i}: {fd} vs {}", g[i]);
        }
    }
}

#[test]
fn agent_cost_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tariff = TariffModel { a_g: 0.013, b_g: 0.04 };
    let flex = FlexLoadParams { p_min: vec![0.0; 4], p_max: vec![2.0; 4], p_ref: vec![0.5, 1.0, 1.5, 0.2], beta_f: 0.07 };
    let hvac = HvacParams { beta_ac: 0.8, ..HvacParams::default() };
    let t_out = vec![30.0, 31.0, 29.0, 27.5];
    let affine = model::ThermalAffine::new(&hvac, &t_out);
    let cost = |p_g: &[f64], p_ac: &[f64], p_f: &[f64]| {
        model::grid_cost(p_g, &tariff).unwrap()
            + model::hvac_discomfort(&affine.apply(p_ac), &hvac)
            + model::flex_discomfort(p_f, &flex)
    };
    for _ in 0..20 {
        let p_g: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..8.0)).collect();
        let p_ac: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..5.0)).collect();
        let p_f: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..2.0)).collect();
        let t_in = affine.apply(&p_ac);
        let step = 1e-5;
        for t in 0..4 {
            // Grid: 2 a p + b.
            let mut hi = p_g.clone();
            let mut lo = p_g.clone();
            hi[t] += step;
            lo[t] -= step;
            let fd = (cost(&hi, &p_ac, &p_f) - cost(&lo, &p_ac, &p_f)) / (2.0 * step);
            let g = 2.0 * tariff.a_g * p_g[t] + tariff.b_g;
            assert!((fd - g).abs() <= 1e-6 * g.abs().max(1.0));
            // Flex: 2 beta (p - p_ref).
            let mut hi = p_f.clone();
            let mut lo = p_f.clone();
            hi[t] += step;
            lo[t] -= step;
            let fd = (cost(&p_g, &p_ac, &hi) - cost(&p_g, &p_ac, &lo)) / (2.0 * step);
            let g = 2.0 * flex.beta_f * (p_f[t] - flex.p_ref[t]);
            assert!((fd - g).abs() <= 1e-6 * g.abs().max(1.0));
            // HVAC: 2 beta sum_s (T_s - T_ref) dT_s/dp_t, with dT_s/dp_t from the recursion.
            let mut g = 0.0;
            #[allow(clippy::needless_range_loop)]
            for s in t..4 {
                let mut pert = p_ac.clone();
                pert[t] += 1.0;
                let slope = indoor(&hvac, &t_out, &pert)[s] - indoor(&hvac, &t_out, &p_ac)[s];
                g += 2.0 * hvac.beta_ac * (t_in[s] - hvac.t_ref) * slope;
            }
            let mut hi = p_ac.clone();
            let mut lo = p_ac.clone();
            hi[t] += step;
            lo[t] -= step;
            let fd = (cost(&p_g, &hi, &p_f) - cost(&p_g, &lo, &p_f)) / (2.0 * step);
            assert!((fd - g).abs() <= 1e-6 * g.abs().max(1.0), "hvac slot {t}: {fd} vs {g}");
        }
    }
}

/// Slot-wise thermal recursion, kept separate from the library's affine form.
fn indoor(hvac: &HvacParams, t_out: &[f64], p_ac: &[f64]) -> Vec<f64> {
    let mut t = hvac.t_init;
    t_out
        .iter()
        .zip(p_ac)
        .map(|(&o, &p)| {
            t -= (t - o + hvac.eta * hvac.phi_r * p) / (hvac.phi_c * hvac.phi_r);
            t
        })
        .collect()
}

fn random_spec(rng: &mut ChaCha8Rng, id: u32, h: usize) -> ProsumerSpec {
    let p_max: Vec<f64> = (0..h).map(|_| rng.gen_range(0.0..2.0)).collect();
    let p_ref: Vec<f64> = p_max.iter().map(|&m| rng.gen_range(0.0..=m)).collect();
    ProsumerSpec {
        id,
        grid_cap: rng.gen_range(15.0..25.0),
        renewable_avail: (0..h).map(|_| if rng.gen_bool(0.5) { rng.gen_range(0.0..6.0) } else { 0.0 }).collect(),
        inflexible: (0..h).map(|_| rng.gen_range(0.0..3.0)).collect(),
        outdoor_temp: (0..h).map(|_| rng.gen_range(18.0..34.0)).collect(),
        hvac: HvacParams { beta_ac: rng.gen_range(0.0..2.0), ..HvacParams::default() },
        flex: FlexLoadParams { p_min: vec![0.0; h], p_max, p_ref, beta_f: rng.gen_range(0.0..0.2) },
        tariff: TariffModel { a_g: rng.gen_range(0.005..0.02), b_g: rng.gen_range(0.0..0.05) },
    }
}

#[test]
fn solver_schedules_pass_validation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let config = SolverConfig::default();
    for k in 0..30 {
        let h = rng.gen_range(1..=8);
        let spec = random_spec(&mut rng, k, h);
        let alone = localopt::solve_ucmp(&spec, &config).unwrap();
        let v = model::validate_schedule(&spec, &alone.schedule, BalanceMode::Standalone);
        assert!(v.is_empty(), "standalone {k}: {v:?}");
        for (t, &temp) in alone.schedule.t_in.iter().enumerate() {
            assert!(temp >= spec.hvac.t_min - TOL_FEAS && temp <= spec.hvac.t_max + TOL_FEAS, "slot {t}");
        }
        let lambda: Vec<f64> = (0..h).map(|_| rng.gen_range(0.0..0.2)).collect();
        let cap = vec![30.0; h];
        let ilp = localopt::solve_ilp(&spec, &lambda, Some(&cap), &config).unwrap();
        let v = model::validate_schedule(&spec, &ilp.schedule, BalanceMode::Coordinated);
        assert!(v.is_empty(), "individual {k}: {v:?}");
        assert!(ilp.cost <= alone.cost + 1e-6, "trading can only help agent {k}");
    }
}
