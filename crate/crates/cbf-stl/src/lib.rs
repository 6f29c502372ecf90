//! Reachability-based control barrier functions for signal temporal logic (STL)
//! over scalar systems.
//!
//! The pipeline:
//!
//! 1. [`formula`] parses STL formulas over band predicates and rewrites every
//!    until into its always/eventually decomposition with a shared parameter.
//! 2. [`reachability`] solves the backward-reachability value function
//!    `V_h(x, t)` for the supported 1-D dynamics by the method of
//!    characteristics under the pointwise-optimal input.
//! 3. [`operator`] implements the operator that time-shifts a value function
//!    and extends it with a predicate plateau over a parameterized window,
//!    together with the full nesting calculus and repetition counters.
//! 4. [`taskgraph`] folds the logic structure into a min/max satisfaction
//!    function `σ` and builds the parameter-sharing layout.
//! 5. [`control`] runs the online controller: combinatorial barrier
//!    constraints, a small quadratic program per step, and Euler integration
//!    of the enhanced state `(x, τ̂)`.
//! 6. [`oracle`] is an independent quantitative robustness monitor used to
//!    verify every produced trajectory.
//! 7. [`scenario`] ties everything together behind a config file / preset
//!    interface consumed by the CLI.

pub mod control;
pub mod error;
pub mod formula;
pub mod operator;
pub mod oracle;
pub mod reachability;
pub mod scenario;
pub mod taskgraph;

pub use error::Error;
