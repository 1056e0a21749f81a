//! Delay-optimal precoding and power control for multi-stream MIMO links
//! under imperfect channel knowledge.
//!
//! The crate solves the average-cost Bellman equation of the joint queue
//! chain (full solver) or its per-stream decomposition, analyzes the
//! resulting stationary behavior, calibrates the power price against an
//! average power budget, and simulates the controlled system slot by slot.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below name the double-precision instances.

pub mod cache;
pub mod error;
pub mod io;
pub mod mdp_decomposed;
pub mod mdp_full;
pub mod model;
pub mod phy;
pub mod scalar;
pub mod simulator;
pub mod steady;
pub mod waterfill;

pub use cache::{ColumnStats, EigenSampleCache};
pub use error::{Error, Result};
pub use mdp_decomposed::{decomposed_policy, solve_decomposed, solve_theta, DecomposedSolution, StreamSolution};
pub use mdp_full::{bellman_backup, extract_action, solve_rvi, solve_rvi_from, FullSolution, RviOptions};
pub use model::{Allocation, ChainParams, ControlAction, JointState, StateSpace, StreamProfile};
pub use phy::{alpha, ChannelSample, CsitModel, PhyConfig};
pub use scalar::Real;
pub use simulator::{run_seeds, run_sim, PolicyHandle, RrRule, SimReport};
pub use steady::{
    calibrate_gamma, steady_state_full, steady_state_per_stream, CalibrationMode, CalibrationOptions,
    CalibrationResult, SolverMode, SteadyState,
};
pub use waterfill::{phi, sort_assignment, waterfill_power, PhiResult, WaterfillParams};

pub type PhyConfig64 = PhyConfig<f64>;
pub type Cache64 = EigenSampleCache<f64>;
pub type ChainParams64 = ChainParams<f64>;
pub type FullSolution64 = FullSolution<f64>;
pub type DecomposedSolution64 = DecomposedSolution<f64>;
pub type SteadyState64 = SteadyState<f64>;

pub type PhyConfig32 = PhyConfig<f32>;
pub type Cache32 = EigenSampleCache<f32>;
pub type ChainParams32 = ChainParams<f32>;
