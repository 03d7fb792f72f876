//! Decentralized transactive-energy simulation.
//!
//! Prosumer agents with HVAC, flexible and inflexible loads and rooftop
//! renewables agree on per-slot trading prices by exchanging only a price
//! estimate and an energy-mismatch estimate with their neighbours. Each round
//! every agent solves its own convex QP at its current price; the mismatch
//! estimates track the pool imbalance and push the prices until the market clears.
// `!(x > 0.0)` is used on purpose so NaN is rejected with the bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod consensus;
pub mod data;
pub mod localopt;
pub mod model;
pub mod topology;
