//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Formula text failed to parse; `pos` is a byte offset into the input.
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },

    /// A predicate label was referenced but never declared.
    #[error("unknown predicate label `{0}`")]
    UnknownPredicate(String),

    /// A temporal interval with `t_lo > t_hi` or a negative bound.
    #[error("invalid interval [{lo}, {hi}]: bounds must satisfy 0 <= lo <= hi")]
    InvalidInterval { lo: f64, hi: f64 },

    /// Negation applied to anything but a predicate.
    #[error("negation is only supported directly on predicates (at position {pos})")]
    NegatedNonPredicate { pos: usize },

    /// Invalid predicate parameters.
    #[error("predicate `{label}`: scale and radius must be positive (c = {c}, r = {r})")]
    InvalidPredicate { label: String, c: f64, r: f64 },

    /// Value-function solve produced a non-finite state.
    #[error("non-finite state while integrating from grid node (x = {x}, t = {t})")]
    NonFiniteState { x: f64, t: f64 },

    /// Bad grid specification.
    #[error("invalid grid spec: {0}")]
    InvalidGrid(String),

    /// A value-function lookup at positive time.
    #[error("value function queried at t = {0} > 0")]
    PositiveTime(f64),

    /// Operator queried past its active window without an advance.
    #[error("operator value queried at t = {t} beyond the active window end {beta} (missed advance)")]
    WindowElapsed { t: f64, beta: f64 },

    /// Advance called before the active window end was reached.
    #[error("advance called at t = {t} before the active window end {beta}")]
    AdvanceTooEarly { t: f64, beta: f64 },

    /// A window-function evaluation referenced an unbound slot.
    #[error("window function references unbound parameter slot {0}")]
    UnboundSlot(usize),

    /// Parameter vector outside its admissible box.
    #[error("parameter slot {slot} value {value} outside its domain [{lo}, {hi}]")]
    ParamOutOfBounds {
        slot: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    /// Tied parameter slots must have identical domains.
    #[error("tied parameter slots {a} and {b} have inconsistent domains")]
    InconsistentSlotDomains { a: usize, b: usize },

    /// Plateau maintenance failed at a window completion check.
    #[error("satisfaction violated at t = {t}: {detail}")]
    SatisfactionViolated { t: f64, detail: String },

    /// The per-step program could not be made feasible even with slack.
    #[error("controller infeasible at t = {t}: {detail}")]
    ControllerInfeasible { t: f64, detail: String },

    /// The monitored signal is shorter than the formula horizon.
    #[error("signal ends at t = {signal_end} but the formula horizon from t = {t} requires {needed}")]
    HorizonExceedsSignal {
        t: f64,
        signal_end: f64,
        needed: f64,
    },

    /// A signal with fewer than two samples or non-increasing times.
    #[error("invalid signal: {0}")]
    InvalidSignal(String),

    /// Scenario configuration problems.
    #[error("scenario config: {0}")]
    Config(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Convenience result alias.
pub type Result<T> = std::result::Result<T, Error>;
