//! Analysis toolkit for multi-class, multi-pool service systems operating
//! under the leaf-activity-priority (LAP) discipline.
//!
//! The crate covers the full chain from a static instance to its stochastic
//! behavior at scale:
//!
//! * [`model`] — network instances, the static planning LP, and its duals;
//! * [`priority`] — leaf-elimination priorities and the LAP equilibrium;
//! * [`simulator`] — exact continuous-time Markov chain simulation at scale
//!   `r`, with steady-state estimation; [`oracle`] solves tiny instances by
//!   brute force for cross-validation;
//! * [`fluid`] — law-of-large-numbers dynamics and the drain property;
//! * [`scalelimits`] — hydrodynamic and local-fluid refinements of the
//!   deviation process around the equilibrium;
//! * [`experiments`] — scaling sweeps for the stationary-deviation growth
//!   exponent and Lyapunov workload drift.
//!
//! The `laplab` command-line tool in the companion crate drives these
//! modules from network files; the book under `book/` walks through the
//! concepts with runnable examples.

pub mod experiments;
pub mod fluid;
pub mod lp;
pub mod model;
pub mod ode;
pub mod oracle;
pub mod priority;
pub mod rng;
pub mod scalelimits;
pub mod simulator;
pub mod stats;

pub use experiments::{ScalingConfig, ScalingResult};
pub use fluid::{FluidState, FluidTrajectory};
pub use model::{DualVariables, Network, SppSolution};
pub use ode::StepControl;
pub use priority::{EquilibriumPoint, PriorityOrder, TieBreak};
pub use scalelimits::{DeviationState, LinearMaps};
pub use simulator::{SimConfig, SystemState};

// The guide's code blocks double as documentation tests; each chapter of
// book/src is compiled and run by `cargo test --doc`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/lap.md")]
    mod lap {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/fluid.md")]
    mod fluid {}
    #[doc = include_str!("../../../book/src/scalelimits.md")]
    mod scalelimits {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
