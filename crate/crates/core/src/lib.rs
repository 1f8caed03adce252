//! Design-space exploration for 2D-mesh AI accelerators.
//!
//! Analytical power/performance/area models, operator placement, a
//! soft actor-critic agent with prioritized replay, a residual world model
//! with short-horizon planning, and Pareto-based final selection.

pub mod analysis;
pub mod arch;
pub mod error;
pub mod graph;
pub mod kvcache;
pub mod neural;
pub mod partition;
pub mod planner;
pub mod procnode;
pub mod rlenv;
pub mod sac;
pub mod scalar;
pub mod search;
pub mod surrogate;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision networks, used by gradient checks and oracles.
pub type Mlp64 = neural::Mlp<f64>;
pub type Sac64 = sac::Sac<f64>;
pub type WorldModel64 = planner::WorldModel<f64>;
pub type Surrogate64 = surrogate::SurrogateModel<f64>;

/// Single-precision networks, used during exploration.
pub type Mlp32 = neural::Mlp<f32>;
pub type Sac32 = sac::Sac<f32>;
pub type WorldModel32 = planner::WorldModel<f32>;
pub type Surrogate32 = surrogate::SurrogateModel<f32>;
