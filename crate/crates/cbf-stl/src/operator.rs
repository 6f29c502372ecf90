//! The reachability-based STL operator and its nesting calculus.
//!
//! A single layer maps a value function `V` to a time-shifted copy with a
//! predicate plateau: `(T V)(x, t) = V(x, t − α(τ))` for `t ≤ α(τ)` and
//! `h(x)` for `α(τ) < t ≤ β(τ)`, with `α, β` nonnegative affine functions of
//! free parameters `τ` over a box `Θ`. Temporal fragments associate with
//! layers as follows:
//!
//! * always `G[a,b]` → `α ≡ a`, `β ≡ b`, no parameter;
//! * eventually `F[a,b]` → `α = β = a + τ`, `τ ∈ [0, b−a]`;
//! * until `U[a,b]` → a pair of layers sharing one slot `τ ∈ [0, b−a]`:
//!   left `(0, a+τ)`, right `(a+τ, a+τ)`.
//!
//! Nesting composes windows by anchoring the inner layer at the outer `α` and
//! chaining repeated instances of point-window inner layers until the outer
//! deadline is met. Interval-window inner layers (always / until-left) merge
//! with a window-type parent into one stretched window instead of repeating;
//! point-window inner layers (eventually / until-right) under a window-type
//! parent repeat, each new window anchored at the previous elapsed end.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::reachability::{eval_value, ValueFunction};

/// Index of a free parameter slot (dense per-operator ids from a
/// [`SlotArena`]).
pub type SlotId = usize;

/// Mints dense slot ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SlotArena {
    next: SlotId,
}

impl SlotArena {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fresh(&mut self) -> SlotId {
        let id = self.next;
        self.next += 1;
        id
    }

    /// Number of slots minted so far.
    pub fn len(&self) -> usize {
        self.next
    }

    pub fn is_empty(&self) -> bool {
        self.next == 0
    }
}

/// Nonnegative affine function of parameter slots: `a0 + Σ coef_i · τ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowFunction {
    pub a0: f64,
    /// `(slot id, nonnegative coefficient)` pairs.
    pub terms: Vec<(SlotId, f64)>,
}

impl WindowFunction {
    pub fn constant(a0: f64) -> Self {
        debug_assert!(a0 >= 0.0);
        Self { a0, terms: vec![] }
    }

    pub fn affine(a0: f64, slot: SlotId, coef: f64) -> Self {
        debug_assert!(a0 >= 0.0 && coef >= 0.0);
        Self {
            a0,
            terms: vec![(slot, coef)],
        }
    }

    /// Replace one slot by a fixed value, folding it into the constant term.
    pub fn substitute(&self, slot: SlotId, value: f64) -> WindowFunction {
        let mut out = WindowFunction {
            a0: self.a0,
            terms: Vec::new(),
        };
        for &(s, c) in &self.terms {
            if s == slot {
                out.a0 += c * value;
            } else {
                out.terms.push((s, c));
            }
        }
        out
    }

    /// Pointwise sum of two window functions.
    pub fn plus(&self, other: &WindowFunction) -> WindowFunction {
        let mut terms = self.terms.clone();
        for &(s, c) in &other.terms {
            if let Some(t) = terms.iter_mut().find(|(s2, _)| *s2 == s) {
                t.1 += c;
            } else {
                terms.push((s, c));
            }
        }
        WindowFunction {
            a0: self.a0 + other.a0,
            terms,
        }
    }

    /// Evaluate at a slot assignment (`values[slot]`).
    pub fn eval(&self, values: &[f64]) -> Result<f64> {
        let mut out = self.a0;
        for &(s, c) in &self.terms {
            let v = values.get(s).copied().ok_or(Error::UnboundSlot(s))?;
            out += c * v;
        }
        Ok(out)
    }

    /// Minimum over a box (coefficients are nonnegative, so the minimum sits
    /// at every slot's lower bound). Slots absent from the box contribute
    /// their coefficient times zero.
    pub fn min_over(&self, bx: &ParamBox) -> f64 {
        let mut out = self.a0;
        for &(s, c) in &self.terms {
            if let Some(b) = bx.bound(s) {
                out += c * b.lo;
            }
        }
        out
    }

    /// Maximum over a box.
    pub fn max_over(&self, bx: &ParamBox) -> f64 {
        let mut out = self.a0;
        for &(s, c) in &self.terms {
            if let Some(b) = bx.bound(s) {
                out += c * b.hi;
            }
        }
        out
    }
}

/// Convenience wrapper mirroring the window-evaluation operation.
pub fn window_eval(w: &WindowFunction, values: &[f64]) -> Result<f64> {
    w.eval(values)
}

/// Domain bound of one slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotBound {
    pub id: SlotId,
    pub lo: f64,
    pub hi: f64,
}

/// Box domain over a set of slots (may be empty).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamBox {
    pub slots: Vec<SlotBound>,
}

impl ParamBox {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single(id: SlotId, lo: f64, hi: f64) -> Self {
        Self {
            slots: vec![SlotBound { id, lo, hi }],
        }
    }

    pub fn bound(&self, id: SlotId) -> Option<&SlotBound> {
        self.slots.iter().find(|b| b.id == id)
    }

    /// Check an assignment against the box (only bound slots are checked).
    pub fn contains(&self, values: &[f64], tol: f64) -> Result<()> {
        for b in &self.slots {
            let v = values.get(b.id).copied().ok_or(Error::UnboundSlot(b.id))?;
            if v < b.lo - tol || v > b.hi + tol {
                return Err(Error::ParamOutOfBounds {
                    slot: b.id,
                    value: v,
                    lo: b.lo,
                    hi: b.hi,
                });
            }
        }
        Ok(())
    }
}

/// Which temporal fragment a layer came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Always,
    Eventually,
    UntilLeft,
    UntilRight,
    Identity,
}

impl LayerKind {
    /// Point-window layers have `α = β` (a single satisfaction instant).
    pub fn is_point(self) -> bool {
        matches!(
            self,
            LayerKind::Eventually | LayerKind::UntilRight | LayerKind::Identity
        )
    }

    /// Interval-window layers have `β ≥ α` with positive width in general.
    pub fn is_window(self) -> bool {
        matches!(self, LayerKind::Always | LayerKind::UntilLeft)
    }
}

/// One operator layer: windows `α, β` over a parameter box, plus the
/// originating interval as a template for minting repeated instances.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorLayer {
    pub kind: LayerKind,
    pub alpha: WindowFunction,
    pub beta: WindowFunction,
    pub theta: ParamBox,
    /// Originating interval bounds (template for fresh instances).
    pub t_lo: f64,
    pub t_hi: f64,
}

fn check_interval(t_lo: f64, t_hi: f64) -> Result<()> {
    if !(0.0 <= t_lo && t_lo <= t_hi) || !t_lo.is_finite() || !t_hi.is_finite() {
        return Err(Error::InvalidInterval { lo: t_lo, hi: t_hi });
    }
    Ok(())
}

/// `G[t_lo, t_hi]`: constant window, no parameter.
pub fn layer_always(t_lo: f64, t_hi: f64) -> Result<OperatorLayer> {
    check_interval(t_lo, t_hi)?;
    Ok(OperatorLayer {
        kind: LayerKind::Always,
        alpha: WindowFunction::constant(t_lo),
        beta: WindowFunction::constant(t_hi),
        theta: ParamBox::empty(),
        t_lo,
        t_hi,
    })
}

/// `F[t_lo, t_hi]`: point window `t_lo + τ`, `τ ∈ [0, t_hi − t_lo]`.
pub fn layer_eventually(t_lo: f64, t_hi: f64, arena: &mut SlotArena) -> Result<OperatorLayer> {
    check_interval(t_lo, t_hi)?;
    let s = arena.fresh();
    Ok(OperatorLayer {
        kind: LayerKind::Eventually,
        alpha: WindowFunction::affine(t_lo, s, 1.0),
        beta: WindowFunction::affine(t_lo, s, 1.0),
        theta: ParamBox::single(s, 0.0, t_hi - t_lo),
        t_lo,
        t_hi,
    })
}

/// `U[t_lo, t_hi]`: a pair of layers sharing one fresh slot.
pub fn layer_until(
    t_lo: f64,
    t_hi: f64,
    arena: &mut SlotArena,
) -> Result<(OperatorLayer, OperatorLayer, SlotId)> {
    check_interval(t_lo, t_hi)?;
    let s = arena.fresh();
    let left = OperatorLayer {
        kind: LayerKind::UntilLeft,
        alpha: WindowFunction::constant(0.0),
        beta: WindowFunction::affine(t_lo, s, 1.0),
        theta: ParamBox::single(s, 0.0, t_hi - t_lo),
        t_lo,
        t_hi,
    };
    let right = OperatorLayer {
        kind: LayerKind::UntilRight,
        alpha: WindowFunction::affine(t_lo, s, 1.0),
        beta: WindowFunction::affine(t_lo, s, 1.0),
        theta: ParamBox::single(s, 0.0, t_hi - t_lo),
        t_lo,
        t_hi,
    };
    Ok((left, right, s))
}

/// The identity operator: `α = β ≡ 0`, empty box.
pub fn layer_identity() -> OperatorLayer {
    OperatorLayer {
        kind: LayerKind::Identity,
        alpha: WindowFunction::constant(0.0),
        beta: WindowFunction::constant(0.0),
        theta: ParamBox::empty(),
        t_lo: 0.0,
        t_hi: 0.0,
    }
}

/// One elapsed window in a layer's history.
#[derive(Debug, Clone, PartialEq)]
pub struct ElapsedWindow {
    /// Instance index within the parent instance (1-based).
    pub j: u64,
    /// The slot value frozen at the elapse, if the layer has a parameter.
    pub frozen_tau: Option<f64>,
    /// Realized window start `α″` at the elapse.
    pub alpha_end: f64,
    /// Realized window end `β″` at the elapse (the chained quantity).
    pub beta_end: f64,
}

/// Per-layer runtime state within a nested operator.
#[derive(Debug, Clone, PartialEq)]
struct LayerState {
    template: OperatorLayer,
    /// Current instance windows, relative to `base` (live slot ids).
    inst_alpha: WindowFunction,
    inst_beta: WindowFunction,
    inst_slot: Option<SlotBound>,
    /// Anchor of the current instance (may reference live ancestor slots).
    base: WindowFunction,
    /// Deadline stretch inherited from contiguous window-type ancestors.
    stretch: WindowFunction,
}

/// How a repetition interface decides between chaining another instance and
/// declaring the obligation discharged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RepetitionPolicy {
    /// Chain while the elapsed point is short of the parent window end.
    #[default]
    Literal,
    /// Chain while the elapsed point is short of the parent window end plus
    /// the repeated layer's lower offset, so the last instance can still
    /// witness queries anchored at the very end of the parent window.
    CoverageExtended,
}

/// Scheduling controls for [`NestedOperator::advance_bounded`].
#[derive(Debug, Clone, Default)]
pub struct AdvanceOptions {
    /// Skip the window-elapsed precondition (used when a sibling branch of a
    /// disjunction discharged the instance early).
    pub forced: bool,
    /// Lowest layer index whose repetition interface this walk may process.
    pub min_layer: usize,
    /// Resume a previously blocked walk at this layer instead of the
    /// innermost one.
    pub start_layer: Option<usize>,
    pub policy: RepetitionPolicy,
}

/// Result of a bounded advance walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvanceOutcome {
    /// A new instance was chained at this repetition interface.
    Minted { layer: usize },
    /// The interface at the walk's lower bound is discharged; outer layers
    /// were left untouched.
    Blocked { layer: usize },
    /// Every layer's obligation is discharged.
    Complete,
}

/// A composed per-leaf operator with repetition counters and frozen history.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedOperator {
    arena: SlotArena,
    layers: Vec<LayerState>,
    /// Per-layer instance counters (1-based).
    pub counters: Vec<u64>,
    /// Per-layer elapsed-window history.
    pub history: Vec<Vec<ElapsedWindow>>,
    /// All obligations discharged.
    pub complete: bool,
}

impl NestedOperator {
    /// Promote a single layer to a nested operator.
    pub fn from_layer(layer: OperatorLayer) -> Self {
        Self::from_layers(vec![layer])
    }

    /// Build from an outermost→innermost layer stack. Slots are re-minted
    /// into the operator's own arena; identity layers are dropped.
    pub fn from_layers(layers: Vec<OperatorLayer>) -> Self {
        let templates: Vec<OperatorLayer> = layers
            .into_iter()
            .filter(|l| l.kind != LayerKind::Identity)
            .collect();
        let templates = if templates.is_empty() {
            vec![layer_identity()]
        } else {
            templates
        };
        let n = templates.len();
        let mut op = NestedOperator {
            arena: SlotArena::new(),
            layers: Vec::with_capacity(n),
            counters: vec![1; n],
            history: vec![Vec::new(); n],
            complete: false,
        };
        for t in templates {
            let (inst_alpha, inst_beta, inst_slot) = op.mint_instance(&t);
            op.layers.push(LayerState {
                template: t,
                inst_alpha,
                inst_beta,
                inst_slot,
                base: WindowFunction::constant(0.0),
                stretch: WindowFunction::constant(0.0),
            });
        }
        op.rebuild_anchors(0);
        op
    }

    fn mint_instance(
        &mut self,
        template: &OperatorLayer,
    ) -> (WindowFunction, WindowFunction, Option<SlotBound>) {
        match template.kind {
            LayerKind::Always | LayerKind::Identity => (
                WindowFunction::constant(template.t_lo),
                WindowFunction::constant(template.t_hi),
                None,
            ),
            LayerKind::Eventually | LayerKind::UntilRight => {
                let s = self.arena.fresh();
                (
                    WindowFunction::affine(template.t_lo, s, 1.0),
                    WindowFunction::affine(template.t_lo, s, 1.0),
                    Some(SlotBound {
                        id: s,
                        lo: 0.0,
                        hi: template.t_hi - template.t_lo,
                    }),
                )
            }
            LayerKind::UntilLeft => {
                let s = self.arena.fresh();
                (
                    WindowFunction::constant(0.0),
                    WindowFunction::affine(template.t_lo, s, 1.0),
                    Some(SlotBound {
                        id: s,
                        lo: 0.0,
                        hi: template.t_hi - template.t_lo,
                    }),
                )
            }
        }
    }

    /// Recompute `base` and `stretch` for layers `from..` (anchors chain on
    /// the layer above).
    fn rebuild_anchors(&mut self, from: usize) {
        for i in from..self.layers.len() {
            if i == 0 {
                // Layer 0 keeps whatever base it was given (constant 0 at
                // construction; a chained constant after re-minting).
                self.layers[0].stretch = WindowFunction::constant(0.0);
                continue;
            }
            let parent = self.layers[i - 1].clone();
            let child_kind = self.layers[i].template.kind;
            self.layers[i].base = parent.base.plus(&parent.inst_alpha);
            // Repetition interfaces (window-type parent, point-type child)
            // consume the parent's deadline stretch through chaining; merged
            // interval-window children inherit and extend it.
            let repeating = child_kind.is_point() && parent.template.kind.is_window();
            self.layers[i].stretch = if repeating {
                WindowFunction::constant(0.0)
            } else if parent.template.kind.is_window() {
                // width of the parent window: β − α (affine with nonneg
                // coefficients minus possibly slot terms; for the supported
                // kinds the width is a0 difference plus slot terms of β).
                let mut width = parent.inst_beta.clone();
                width.a0 -= parent.inst_alpha.a0;
                for &(s, c) in &parent.inst_alpha.terms {
                    if let Some(t) = width.terms.iter_mut().find(|(s2, _)| *s2 == s) {
                        t.1 -= c;
                    }
                }
                width.terms.retain(|&(_, c)| c != 0.0);
                parent.stretch.plus(&width)
            } else {
                parent.stretch.clone()
            };
        }
    }

    /// Slot count of the operator's arena (for sizing assignment vectors).
    pub fn slot_count(&self) -> usize {
        self.arena.len()
    }

    /// The current live slots (one per parameterized layer instance).
    pub fn live_theta(&self) -> ParamBox {
        ParamBox {
            slots: self
                .layers
                .iter()
                .filter_map(|l| l.inst_slot)
                .collect(),
        }
    }

    /// Live slot of a given layer, if any.
    pub fn layer_slot(&self, layer: usize) -> Option<SlotBound> {
        self.layers[layer].inst_slot
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_kind(&self, layer: usize) -> LayerKind {
        self.layers[layer].template.kind
    }

    /// Active window start `α″` of the innermost (leaf) window.
    pub fn active_alpha(&self) -> WindowFunction {
        let l = self.layers.last().expect("nonempty");
        l.base.plus(&l.inst_alpha)
    }

    /// Active window end `β″` of the innermost window, including the merged
    /// stretch from contiguous window-type ancestors.
    pub fn active_beta(&self) -> WindowFunction {
        let l = self.layers.last().expect("nonempty");
        l.base.plus(&l.inst_beta).plus(&l.stretch)
    }

    /// Window of an arbitrary layer's current instance.
    pub fn layer_window(&self, layer: usize) -> (WindowFunction, WindowFunction) {
        let l = &self.layers[layer];
        (
            l.base.plus(&l.inst_alpha),
            l.base.plus(&l.inst_beta).plus(&l.stretch),
        )
    }

    /// α slope with respect to a live slot (how much the active window start
    /// moves per unit of that slot).
    pub fn alpha_slope(&self, slot: SlotId) -> f64 {
        self.active_alpha()
            .terms
            .iter()
            .find(|(s, _)| *s == slot)
            .map(|(_, c)| *c)
            .unwrap_or(0.0)
    }

    /// Structured-text dump of the layer stack, counters, and history.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(
                out,
                "layer {i}: kind={:?} interval=[{}, {}] j={} base_a0={:.4} alpha_a0={:.4} beta_a0={:.4} slot={:?}",
                l.template.kind,
                l.template.t_lo,
                l.template.t_hi,
                self.counters[i],
                l.base.a0,
                l.inst_alpha.a0,
                l.inst_beta.a0,
                l.inst_slot.map(|s| s.id),
            );
            for w in &self.history[i] {
                let _ = writeln!(
                    out,
                    "  elapsed j={} window=[{:.4}, {:.4}] frozen_tau={:?}",
                    w.j, w.alpha_end, w.beta_end, w.frozen_tau
                );
            }
        }
        let _ = writeln!(out, "complete={}", self.complete);
        out
    }

    /// Evaluate the operator at `(x, t)` with the given live-slot assignment.
    ///
    /// Pre-window: `V(x, t − α″)`; plateau `α″ < t ≤ β″`: `h(x)`;
    /// past the window without an advance is an error. A completed operator
    /// evaluates to `+∞` (fully discharged obligation).
    pub fn operator_value(
        &self,
        v: &ValueFunction,
        x: f64,
        t: f64,
        values: &[f64],
    ) -> Result<f64> {
        if self.complete {
            return Ok(f64::INFINITY);
        }
        let a = self.active_alpha().eval(values)?;
        let b = self.active_beta().eval(values)?;
        if t <= a {
            eval_value(v, x, t - a)
        } else if t <= b + 1e-9 {
            Ok(v.predicate.eval(x))
        } else {
            Err(Error::WindowElapsed { t, beta: b })
        }
    }

    /// Whether the active window has elapsed at time `t` (within `eps`).
    pub fn window_elapsed(&self, t: f64, values: &[f64], eps: f64) -> Result<bool> {
        if self.complete {
            return Ok(false);
        }
        Ok(t >= self.active_beta().eval(values)? - eps)
    }

    /// Advance past an elapsed window: freeze the live parameters, record
    /// history, and either chain the next repetition of the innermost
    /// point-window layer under a window-type parent (new window anchored at
    /// the elapsed end) or propagate completion outward. Counters reset
    /// innermost-first as outer instances elapse.
    pub fn advance(&mut self, t: f64, values: &[f64]) -> Result<()> {
        self.advance_bounded(t, values, &AdvanceOptions::default())
            .map(|_| ())
    }

    /// [`advance`](Self::advance) with external scheduling control. The walk
    /// processes repetition interfaces at layer indices `>= min_layer` only;
    /// when the interface at `min_layer` itself is discharged the walk stops
    /// with [`AdvanceOutcome::Blocked`] instead of touching outer layers, so
    /// a coordinator can keep several operators that share a repeated layer
    /// in lockstep. A later call with `start_layer = Some(min_layer - 1)` and
    /// a smaller bound resumes the walk without re-recording inner layers.
    pub fn advance_bounded(
        &mut self,
        t: f64,
        values: &[f64],
        opts: &AdvanceOptions,
    ) -> Result<AdvanceOutcome> {
        if self.complete {
            return Err(Error::AdvanceTooEarly {
                t,
                beta: f64::INFINITY,
            });
        }
        if opts.start_layer.is_none() && !opts.forced {
            let beta_end = self.active_beta().eval(values)?;
            if t < beta_end - 1e-9 {
                return Err(Error::AdvanceTooEarly { t, beta: beta_end });
            }
        }

        let mut i = opts.start_layer.unwrap_or(self.layers.len() - 1);
        loop {
            // Record the elapsed instance of layer i.
            let (aw, bw) = self.layer_window(i);
            let frozen_tau = match self.layers[i].inst_slot {
                Some(sb) => Some(values.get(sb.id).copied().ok_or(Error::UnboundSlot(sb.id))?),
                None => None,
            };
            self.history[i].push(ElapsedWindow {
                j: self.counters[i],
                frozen_tau,
                alpha_end: aw.eval(values)?,
                beta_end: bw.eval(values)?,
            });

            if i == 0 {
                self.complete = true;
                return Ok(AdvanceOutcome::Complete);
            }

            let repeating = self.layers[i].template.kind.is_point()
                && self.layers[i - 1].template.kind.is_window();
            if repeating {
                let point = aw.eval(values)?;
                let (_, parent_end) = self.layer_window(i - 1);
                let deadline = parent_end.eval(values)?
                    + match opts.policy {
                        RepetitionPolicy::Literal => 0.0,
                        RepetitionPolicy::CoverageExtended => self.layers[i].template.t_lo,
                    };
                if point < deadline - 1e-9 {
                    // Chain the next instance: anchor at the inner block's
                    // elapsed end (the completion time), so each repetition
                    // starts with its full lower offset of lead time.
                    let chain = point.max(t).max(0.0);
                    self.counters[i] += 1;
                    let template = self.layers[i].template.clone();
                    let (ia, ib, islot) = self.mint_instance(&template);
                    let li = &mut self.layers[i];
                    li.inst_alpha = ia;
                    li.inst_beta = ib;
                    li.inst_slot = islot;
                    li.base = WindowFunction::constant(chain);
                    // Fresh instances for everything below.
                    for k in i + 1..self.layers.len() {
                        self.counters[k] = 1;
                        let template = self.layers[k].template.clone();
                        let (ia, ib, islot) = self.mint_instance(&template);
                        let lk = &mut self.layers[k];
                        lk.inst_alpha = ia;
                        lk.inst_beta = ib;
                        lk.inst_slot = islot;
                    }
                    self.rebuild_anchors(i + 1);
                    return Ok(AdvanceOutcome::Minted { layer: i });
                }
                // Final repetition: this layer's obligations under the parent
                // are discharged; reset and let the parent elapse too.
                self.counters[i] = 1;
                if i == opts.min_layer {
                    return Ok(AdvanceOutcome::Blocked { layer: i });
                }
            }
            i -= 1;
        }
    }

    /// Fold the current value of a live slot into the layer's instance
    /// windows as a constant, dropping the slot binding. Used when a
    /// mid-chain window has been crossed by the trajectory: the satisfaction
    /// instant is committed and later parameter motion must not slide the
    /// windows anchored on it.
    pub fn freeze_slot(&mut self, layer: usize, value: f64) {
        let li = &mut self.layers[layer];
        let Some(sb) = li.inst_slot.take() else {
            return;
        };
        li.inst_alpha = li.inst_alpha.substitute(sb.id, value);
        li.inst_beta = li.inst_beta.substitute(sb.id, value);
        if layer + 1 < self.layers.len() {
            self.rebuild_anchors(layer + 1);
        }
    }

    /// The final-satisfaction-instance test at a repetition interface: with
    /// `J` elapsed windows of `layer`, the instance is final iff the previous
    /// elapsed end is at most the outer deadline and the deadline is at most
    /// the last elapsed end (the next window's earliest completion would
    /// already exceed the deadline).
    pub fn repetition_done(&self, layer: usize, beta_prime: f64) -> bool {
        repetition_done_history(
            &self.history[layer],
            self.layers[layer].base.a0,
            beta_prime,
        )
    }
}

/// Standalone form of the final-instance test over an elapsed-window history.
/// `anchor` plays the role of `β″_0` (the composed window start before any
/// instance elapsed).
pub fn repetition_done_history(history: &[ElapsedWindow], anchor: f64, beta_prime: f64) -> bool {
    match history.len() {
        0 => false,
        n => {
            let prev = if n == 1 {
                anchor
            } else {
                history[n - 2].beta_end
            };
            let last = history[n - 1].beta_end;
            prev <= beta_prime + 1e-12 && beta_prime <= last + 1e-12
        }
    }
}

/// Compose an outer layer onto an inner operator (identity is a no-op). The
/// result starts a fresh execution: counters at 1, empty history.
pub fn compose(outer: OperatorLayer, inner: &NestedOperator) -> NestedOperator {
    if outer.kind == LayerKind::Identity {
        return inner.clone();
    }
    let mut layers = vec![outer];
    layers.extend(inner.layers.iter().map(|l| l.template.clone()));
    NestedOperator::from_layers(layers)
}

/// Recursive window-end chain: `β″_1 = α′ + β(τ_1)`,
/// `β″_{j+1} = β″_j + β(τ_{j+1})` with `β(τ) = b0 + b1·τ`.
pub fn recursive_beta_ends(alpha_prime: f64, b0: f64, b1: f64, taus: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(taus.len());
    let mut prev = alpha_prime;
    for &tau in taus {
        prev += b0 + b1 * tau;
        out.push(prev);
    }
    out
}

/// Closed-form window-end chain: `β″_J = α′ + β(τ_J) + Σ_{j<J} β(τ_j)`.
pub fn closed_form_beta_ends(alpha_prime: f64, b0: f64, b1: f64, taus: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(taus.len());
    for jj in 0..taus.len() {
        let mut sum = alpha_prime + b0 + b1 * taus[jj];
        for &tau in &taus[..jj] {
            sum += b0 + b1 * tau;
        }
        out.push(sum);
    }
    out
}

/// Number of repetitions of an inner point-window layer `β(τ) = b0 + b1·τ`
/// under an outer window `[α′, β′]`, with every `τ_j` pinned to `tau`:
/// the maximal `J` with `β″_{J−1} ≤ β′ ≤ β″_J`. Returns `None` when the
/// chain cannot reach the deadline (degenerate zero-width steps).
pub fn enumerate_repetition_bound(
    alpha_prime: f64,
    beta_prime: f64,
    b0: f64,
    b1: f64,
    tau: f64,
) -> Option<u64> {
    let step = b0 + b1 * tau;
    let mut prev = alpha_prime;
    for j in 1..=1_000_000u64 {
        let next = prev + step;
        if prev <= beta_prime + 1e-12 && beta_prime <= next + 1e-12 {
            return Some(j);
        }
        if next <= prev {
            return None;
        }
        prev = next;
    }
    None
}

/// Ordering-based constraint pruning: with window 1 starting no later than
/// window 2 for every admissible parameter value, nonnegativity of the first
/// operator value implies nonnegativity of the second on
/// `t ∈ [0, min(α_2, β_1)]`. Returns whether the implication is certified at
/// time `t` (conservatively using box extremes).
pub fn ordering_dominates(
    alpha1: &WindowFunction,
    beta1: &WindowFunction,
    box1: &ParamBox,
    alpha2: &WindowFunction,
    box2: &ParamBox,
    t: f64,
) -> bool {
    let a1_max = alpha1.max_over(box1);
    let a2_min = alpha2.min_over(box2);
    if a1_max > a2_min + 1e-12 {
        return false;
    }
    let b1_min = beta1.min_over(box1);
    (0.0..=a2_min.min(b1_min)).contains(&t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::BandPredicate;
    use crate::reachability::{
        solve_value_function, Dynamics1D, DynamicsKind, GridSpec,
    };
    use approx::assert_abs_diff_eq;

    #[test]
    fn layer_constructors() {
        let g = layer_always(1.0, 3.0).unwrap();
        assert_eq!(g.alpha.a0, 1.0);
        assert_eq!(g.beta.a0, 3.0);
        assert!(g.theta.slots.is_empty());

        let g0 = layer_always(0.0, 0.0).unwrap();
        assert_eq!((g0.alpha.a0, g0.beta.a0), (0.0, 0.0));

        let mut arena = SlotArena::new();
        let f = layer_eventually(3.0, 4.0, &mut arena).unwrap();
        assert_eq!(f.alpha, f.beta);
        assert_eq!(f.alpha.a0, 3.0);
        assert_eq!(f.theta.slots[0].lo, 0.0);
        assert_eq!(f.theta.slots[0].hi, 1.0);

        let f2 = layer_eventually(10.0, 30.0, &mut arena).unwrap();
        assert_eq!(f2.theta.slots[0].hi, 20.0);

        let (l, r, s) = layer_until(1.0, 2.0, &mut arena).unwrap();
        assert_eq!(l.alpha.a0, 0.0);
        assert_eq!(l.beta.a0, 1.0);
        assert_eq!(r.alpha.a0, 1.0);
        assert_eq!(l.beta.terms[0].0, s);
        assert_eq!(r.alpha.terms[0].0, s);
        assert_eq!(l.theta.slots[0].hi, 1.0);

        assert!(layer_always(3.0, 1.0).is_err());
    }

    #[test]
    fn window_eval_basics() {
        let w = WindowFunction::affine(3.0, 0, 1.0);
        assert_eq!(window_eval(&w, &[0.5]).unwrap(), 3.5);
        let c = WindowFunction::constant(0.0);
        assert_eq!(window_eval(&c, &[]).unwrap(), 0.0);
        assert!(matches!(
            window_eval(&w, &[]),
            Err(Error::UnboundSlot(0))
        ));
    }

    #[test]
    fn compose_g_over_f_first_window() {
        let mut arena = SlotArena::new();
        let inner = NestedOperator::from_layer(layer_eventually(3.0, 4.0, &mut arena).unwrap());
        let op = compose(layer_always(0.0, 25.0).unwrap(), &inner);
        // First window: α″ = β″ = 3 + τ_1.
        let slot = op.layer_slot(1).unwrap().id;
        let mut vals = vec![0.0; op.slot_count()];
        vals[slot] = 1.0;
        assert_abs_diff_eq!(op.active_alpha().eval(&vals).unwrap(), 4.0);
        assert_abs_diff_eq!(op.active_beta().eval(&vals).unwrap(), 4.0);
    }

    #[test]
    fn identity_compose_is_noop() {
        let mut arena = SlotArena::new();
        let inner = NestedOperator::from_layer(layer_eventually(3.0, 4.0, &mut arena).unwrap());
        let op = compose(layer_identity(), &inner);
        assert_eq!(op, inner);
    }

    #[test]
    fn g_over_f_chaining_and_count() {
        // All realized τ = 0: windows at 3, 6, ..., 27; the deadline 25 is
        // reached at instance 9.
        let mut arena = SlotArena::new();
        let inner = NestedOperator::from_layer(layer_eventually(3.0, 4.0, &mut arena).unwrap());
        let mut op = compose(layer_always(0.0, 25.0).unwrap(), &inner);
        let mut count = 0;
        for _ in 0..50 {
            if op.complete {
                break;
            }
            let slot = op.layer_slot(1).unwrap().id;
            let mut vals = vec![0.0; op.slot_count()];
            vals[slot] = 0.0;
            let b = op.active_beta().eval(&vals).unwrap();
            op.advance(b, &vals).unwrap();
            count += 1;
            if !op.complete {
                // Chain consistency: new window at fresh slot 0 equals the
                // elapsed end plus the layer offset.
                let vals = vec![0.0; op.slot_count()];
                let a_next = op.active_alpha().eval(&vals).unwrap();
                assert_abs_diff_eq!(a_next, b + 3.0, epsilon = 1e-12);
            }
        }
        assert!(op.complete);
        assert_eq!(count, 9);
        assert_eq!(op.history[1].len(), 9);
        assert_abs_diff_eq!(op.history[1].last().unwrap().beta_end, 27.0);
    }

    #[test]
    fn repetition_bound_enumeration() {
        assert_eq!(
            enumerate_repetition_bound(0.0, 25.0, 3.0, 1.0, 0.0),
            Some(9)
        );
        // eventually-over-always and friends: one instance.
        assert_eq!(enumerate_repetition_bound(3.0, 3.0, 1.0, 1.0, 0.0), Some(1));
        // threshold case: deadline within one step → 1.
        assert_eq!(enumerate_repetition_bound(0.0, 2.0, 3.0, 1.0, 0.0), Some(1));
        // degenerate zero step that can never reach the deadline.
        assert_eq!(enumerate_repetition_bound(0.0, 5.0, 0.0, 1.0, 0.0), None);
    }

    #[test]
    fn g_over_g_merges_single_window() {
        let inner = NestedOperator::from_layer(layer_always(1.0, 2.0).unwrap());
        let mut op = compose(layer_always(0.0, 5.0).unwrap(), &inner);
        // Merged window [0+1, 5+2].
        assert_abs_diff_eq!(op.active_alpha().eval(&[]).unwrap(), 1.0);
        assert_abs_diff_eq!(op.active_beta().eval(&[]).unwrap(), 7.0);
        op.advance(7.0, &[]).unwrap();
        assert!(op.complete);
        assert_eq!(op.history[1].len(), 1);
    }

    #[test]
    fn f_over_g_single_window() {
        let mut arena = SlotArena::new();
        let inner = NestedOperator::from_layer(layer_always(1.0, 2.0).unwrap());
        let mut op = compose(layer_eventually(3.0, 4.0, &mut arena).unwrap(), &inner);
        let slot = op.layer_slot(0).unwrap().id;
        let mut vals = vec![0.0; op.slot_count()];
        vals[slot] = 0.5;
        // Window [3.5+1, 3.5+2]: the point parent adds no stretch.
        assert_abs_diff_eq!(op.active_alpha().eval(&vals).unwrap(), 4.5);
        assert_abs_diff_eq!(op.active_beta().eval(&vals).unwrap(), 5.5);
        op.advance(5.5, &vals).unwrap();
        assert!(op.complete);
    }

    #[test]
    fn advance_too_early_rejected() {
        let inner = NestedOperator::from_layer(layer_always(1.0, 2.0).unwrap());
        let mut op = compose(layer_always(0.0, 5.0).unwrap(), &inner);
        assert!(matches!(
            op.advance(3.0, &[]),
            Err(Error::AdvanceTooEarly { .. })
        ));
    }

    #[test]
    fn closed_form_matches_recursion() {
        let taus = [0.3, 0.8, 0.1, 0.55, 0.0, 1.0];
        let rec = recursive_beta_ends(2.0, 3.0, 1.0, &taus);
        let cf = closed_form_beta_ends(2.0, 3.0, 1.0, &taus);
        for (a, b) in rec.iter().zip(cf.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn repetition_done_two_sided() {
        let hist = vec![
            ElapsedWindow {
                j: 1,
                frozen_tau: Some(0.0),
                alpha_end: 3.0,
                beta_end: 3.0,
            },
            ElapsedWindow {
                j: 2,
                frozen_tau: Some(0.0),
                alpha_end: 6.0,
                beta_end: 6.0,
            },
        ];
        assert!(repetition_done_history(&hist, 0.0, 5.0));
        assert!(!repetition_done_history(&hist, 0.0, 8.0));
        assert!(!repetition_done_history(&hist[..1].to_vec(), 0.0, 5.0));
        assert!(repetition_done_history(&hist[..1].to_vec(), 0.0, 2.0));
    }

    #[test]
    fn operator_value_branches() {
        let p = BandPredicate::new("p", 10.0, 0.25, 1.0).unwrap();
        let d = Dynamics1D::new(DynamicsKind::Linear, -0.5, 0.5).unwrap();
        let spec = GridSpec {
            x_min: -2.0,
            x_max: 3.0,
            n_x: 101,
            t_horizon: 5.0,
            n_t: 51,
            dt_int: 0.01,
        };
        let v = solve_value_function(&d, &p, &spec).unwrap();
        let op = NestedOperator::from_layer(layer_always(1.0, 3.0).unwrap());
        // Pre-window branch: value is the time-shifted V.
        let at_zero = op.operator_value(&v, 0.9, 0.0, &[]).unwrap();
        assert_abs_diff_eq!(
            at_zero,
            crate::reachability::eval_value(&v, 0.9, -1.0).unwrap(),
            epsilon = 1e-12
        );
        // Plateau branch: h(x).
        let mid = op.operator_value(&v, 0.9, 2.0, &[]).unwrap();
        assert_abs_diff_eq!(mid, p.eval(0.9), epsilon = 1e-12);
        // Branch boundary t = α: both branches agree (terminal condition).
        let at_a = op.operator_value(&v, 0.9, 1.0, &[]).unwrap();
        assert_abs_diff_eq!(at_a, p.eval(0.9), epsilon = 1e-9);
        // Past the window: error.
        assert!(matches!(
            op.operator_value(&v, 0.9, 3.5, &[]),
            Err(Error::WindowElapsed { .. })
        ));
    }

    #[test]
    fn ordering_dominates_cases() {
        let a1 = WindowFunction::constant(1.0);
        let b1 = WindowFunction::constant(3.0);
        let a2 = WindowFunction::constant(2.0);
        let e = ParamBox::empty();
        // Identical windows: reflexive on [0, min(α, β)].
        assert!(ordering_dominates(&a1, &b1, &e, &a1, &e, 0.5));
        // (1,3) vs (2,4): certified on [0, 2].
        assert!(ordering_dominates(&a1, &b1, &e, &a2, &e, 2.0));
        assert!(!ordering_dominates(&a1, &b1, &e, &a2, &e, 2.5));
        // Ordering violated: never certified.
        assert!(!ordering_dominates(&a2, &b1, &e, &a1, &e, 0.5));
    }

    #[test]
    fn window_nonnegativity_over_boxes() {
        let mut arena = SlotArena::new();
        let inner = NestedOperator::from_layer(layer_eventually(1.0, 2.0, &mut arena).unwrap());
        let op = compose(layer_always(0.0, 10.0).unwrap(), &inner);
        let bx = op.live_theta();
        assert!(op.active_alpha().min_over(&bx) >= 0.0);
        assert!(op.active_beta().min_over(&bx) >= 0.0);
    }

    #[test]
    fn describe_contains_layers() {
        let mut arena = SlotArena::new();
        let inner = NestedOperator::from_layer(layer_eventually(3.0, 4.0, &mut arena).unwrap());
        let op = compose(layer_always(0.0, 25.0).unwrap(), &inner);
        let text = op.describe();
        assert!(text.contains("Always"));
        assert!(text.contains("Eventually"));
        assert!(text.contains("complete=false"));
    }
}
