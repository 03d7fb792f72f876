//! Seeded synthetic daily profiles.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::profiles::{AgentProfile, ProfileTable};

/// Fractions of high-renewable sellers and zero-renewable buyers; the rest are mixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchetypeMix {
    pub sellers: f64,
    pub buyers: f64,
}

impl Default for ArchetypeMix {
    fn default() -> Self {
        Self { sellers: 0.3, buyers: 0.4 }
    }
}

impl ArchetypeMix {
    pub const ALL_SELLERS: Self = Self { sellers: 1.0, buyers: 0.0 };
    pub const ALL_BUYERS: Self = Self { sellers: 0.0, buyers: 1.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    Seller,
    Buyer,
    Mixed,
}

/// Shape constants of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    /// Hour at which generation starts.
    pub sunrise_h: f64,
    /// Hour at which generation ends.
    pub sunset_h: f64,
    /// Midday renewable peak of a seller, kW.
    pub seller_peak_kw: f64,
    /// Midday renewable peak of a mixed agent, kW.
    pub mixed_peak_kw: f64,
    /// Load floor, kW.
    pub base_load_kw: f64,
    pub morning_peak_h: f64,
    pub morning_peak_kw: f64,
    pub evening_peak_h: f64,
    pub evening_peak_kw: f64,
    /// Standard width of the load peaks, hours.
    pub peak_width_h: f64,
    /// Relative per-slot noise amplitude.
    pub noise: f64,
    /// Relative spread of agent-level scale factors.
    pub agent_spread: f64,
    pub temp_mean_c: f64,
    pub temp_amplitude_c: f64,
    /// Hour of the daily temperature maximum.
    pub temp_peak_h: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            sunrise_h: 6.0,
            sunset_h: 18.0,
            seller_peak_kw: 5.0,
            mixed_peak_kw: 2.0,
            base_load_kw: 0.6,
            morning_peak_h: 7.5,
            morning_peak_kw: 1.2,
            evening_peak_h: 19.5,
            evening_peak_kw: 2.0,
            peak_width_h: 1.5,
            noise: 0.1,
            agent_spread: 0.2,
            temp_mean_c: 26.0,
            temp_amplitude_c: 5.0,
            temp_peak_h: 15.0,
        }
    }
}

/// Hour of day at the middle of slot `t`.
pub fn slot_hour(t: usize, horizon: usize) -> f64 {
    (t as f64 + 0.5) * 24.0 / horizon as f64
}

/// Unit daylight bell: zero outside sunrise..sunset.
pub fn daylight(hour: f64, params: &SynthParams) -> f64 {
    if hour <= params.sunrise_h || hour >= params.sunset_h {
        return 0.0;
    }
    (std::f64::consts::PI * (hour - params.sunrise_h) / (params.sunset_h - params.sunrise_h)).sin()
}

fn bump(hour: f64, center: f64, width: f64) -> f64 {
    let d = (hour - center).abs();
    let d = d.min(24.0 - d);
    (-0.5 * (d / width).powi(2)).exp()
}

/// Assigns archetypes to `n` agents in a seeded random order.
pub fn archetypes(rng: &mut ChaCha8Rng, n: usize, mix: ArchetypeMix) -> Vec<Archetype> {
    let sellers = ((n as f64 * mix.sellers.clamp(0.0, 1.0)).round() as usize).min(n);
    let buyers = ((n as f64 * mix.buyers.clamp(0.0, 1.0)).round() as usize).min(n - sellers);
    let mut kinds: Vec<Archetype> = std::iter::repeat_n(Archetype::Seller, sellers)
        .chain(std::iter::repeat_n(Archetype::Buyer, buyers))
        .chain(std::iter::repeat(Archetype::Mixed))
        .take(n)
        .collect();
    kinds.shuffle(rng);
    kinds
}

/// Generates `n` agent profiles; identical for identical arguments.
///
/// Sellers get at least as much daily renewable energy as daily load whenever
/// the horizon contains a daylight slot.
pub fn synth_profiles(seed: u64, n: usize, horizon: usize, mix: ArchetypeMix, params: &SynthParams) -> ProfileTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = archetypes(&mut rng, n, mix);
    let mut agents = Vec::with_capacity(n);
    for (id, kind) in kinds.into_iter().enumerate() {
        let spread = params.agent_spread;
        let load_scale = 1.0 + rng.gen_range(-spread..=spread);
        let sun_scale = 1.0 + rng.gen_range(-spread..=spread);
        let temp_offset = rng.gen_range(-1.0..=1.0);
        let peak = match kind {
            Archetype::Seller => params.seller_peak_kw,
            Archetype::Mixed => params.mixed_peak_kw,
            Archetype::Buyer => 0.0,
        } * sun_scale;
        let mut load = Vec::with_capacity(horizon);
        let mut renewable = Vec::with_capacity(horizon);
        let mut temp = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let h = slot_hour(t, horizon);
            let shape = params.base_load_kw
                + params.morning_peak_kw * bump(h, params.morning_peak_h, params.peak_width_h)
                + params.evening_peak_kw * bump(h, params.evening_peak_h, params.peak_width_h);
            let jitter = 1.0 + rng.gen_range(-params.noise..=params.noise);
            load.push((shape * load_scale * jitter).max(0.0));
            let jitter = 1.0 + rng.gen_range(-params.noise..=params.noise);
            renewable.push((peak * daylight(h, params) * jitter).max(0.0));
            let phase = 2.0 * std::f64::consts::PI * (h - params.temp_peak_h) / 24.0;
            temp.push(params.temp_mean_c + params.temp_amplitude_c * phase.cos() + temp_offset);
        }
        if kind == Archetype::Seller {
            let (e_load, e_sun) = (load.iter().sum::<f64>(), renewable.iter().sum::<f64>());
            if e_sun > 0.0 && e_sun < e_load {
                let k = e_load / e_sun;
                renewable.iter_mut().for_each(|r| *r *= k);
            }
        }
        agents.push(AgentProfile {
            agent_id: id as u32,
            load_kw: load,
            renewable_kw: renewable,
            outdoor_temp_c: temp,
        });
    }
    ProfileTable { agents }
}
