//! Optimal claim reporting in a two-class bonus-malus system.
//!
//! The policyholder chooses, claim by claim, whether to report (and pay only
//! the deductible, but move to or stay in the expensive class) or to absorb
//! the loss. Reporting decisions follow a barrier: a claim is reported iff it
//! exceeds `b(i, t, s, x)`. This crate computes the value function
//! `V(i, t, s, x) = sup_b E[h(X_T)]` on a characteristic-aligned grid, extracts
//! the optimal barrier, and provides an exact event-driven simulator of the
//! controlled process to cross-check both.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix `f64`, which is what the command line tool uses.

// `!(a > b)` is used on purpose: it also rejects NaN. Index loops mirror
// the stencil formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod grid;
pub mod model;
pub mod scalar;
pub mod simulator;
pub mod solver;

pub use error::{Error, Result};
pub use grid::{BarrierField, Grid, GridSpec, ValueField};
pub use model::{Class, ClaimLaw, ModelParams, PremiumSpec, UtilitySpec, Warning};
pub use scalar::Scalar;
pub use simulator::{
    compare_policies, dpp_residual, estimate_value, sample_path, DppResidual, Event, McResult, PathRecord,
    PolicyComparison, PolicySpec, State,
};
pub use solver::{
    iterate, jump_operator, optimal_jump_operator, sweep_characteristic, BarrierMode, FixedBarrier, SolveControl,
    SolveResult, StopRule, DEFAULT_MAX_ITERATIONS, DEFAULT_TOLERANCE, PAPER_ITERATIONS,
};

pub type Params = ModelParams<f64>;
pub type Grid64 = Grid<f64>;
pub type GridSpec64 = GridSpec<f64>;
pub type Field = ValueField<f64>;
pub type Barriers = BarrierField<f64>;
pub type Control = SolveControl<f64>;
pub type Solution = SolveResult<f64>;
pub type Policy<'a> = PolicySpec<'a, f64>;
pub type Init = State<f64>;

pub type Params32 = ModelParams<f32>;
pub type Field32 = ValueField<f32>;
