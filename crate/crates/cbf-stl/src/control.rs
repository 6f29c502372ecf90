//! Online control synthesis by set invariance of the composed operators.
//!
//! A scenario compiles to a logic tree of operator leaves with a shared
//! parameter layout. At each step the controller solves a small QP for the
//! control input `u`, the parameter rates `ω`, and a slack `s`, subject to
//! one barrier-decay constraint per live leaf and one containment constraint
//! per independent parameter. A scheduler watches window endpoints: it
//! freezes parameters whose windows the trajectory has crossed, re-mints
//! repeated instances in lockstep across leaves that share a repeated layer,
//! and discharges disjunction branches as they are satisfied.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::{BandPredicate, NormalizedFormula, PredicateMap};
use crate::operator::{
    AdvanceOptions, AdvanceOutcome, NestedOperator, ParamBox, RepetitionPolicy,
};
use crate::reachability::{
    eval_value, solve_cached, value_gradients, Dynamics1D, GridSpec, ValueFunction,
};
use crate::taskgraph::{
    build_logic_tree, build_param_layout, completion_horizon, fold_sigma, instantiate_leaf,
    sigma_fold_eval, LogicNode, LogicTree, ParamLayout, SigmaExpr, TieKey,
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Reference-input profile tracked by the controller when constraints allow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum URef {
    #[default]
    Zero,
    Const {
        value: f64,
    },
    Sin {
        amplitude: f64,
        frequency: f64,
    },
}

impl URef {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            URef::Zero => 0.0,
            URef::Const { value } => value,
            URef::Sin {
                amplitude,
                frequency,
            } => amplitude * (frequency * t).sin(),
        }
    }
}

/// Gains and tolerances of the online controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// Class-K gain on the barrier margin `V_k + |V_k − σ|`.
    pub k: f64,
    /// Containment gain on the parameter barriers.
    pub kappa_hat: f64,
    /// Parameter reference decay rate: `ω_ref = −k_omega (τ̂ − lb)`.
    pub k_omega: f64,
    /// Input-tracking weight `δ ∈ (0, 1)`; `1 − δ` weights the rates.
    pub delta: f64,
    /// Quadratic penalty on the slack variable.
    pub slack_weight: f64,
    /// Controller step.
    pub dt: f64,
    /// Parameter-rate bound `|ω_i| ≤ ω_max`.
    pub omega_max: f64,
    /// Strict-inequality margin in the barrier constraints.
    pub eps_strict: f64,
    /// Satisfaction tolerance at plateau checks (discretization slop).
    pub eps_disc: f64,
    /// Per-substep state-increment bound for the norm-controlled integrator.
    pub norm_bound: f64,
    /// Input-grid resolution for non-affine dynamics.
    pub u_grid: usize,
    /// Hard simulation cap; `0` derives it from the completion horizon.
    pub max_time: f64,
    /// Stop the run when a required plateau check fails.
    pub abort_on_violation: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            k: 2.0,
            kappa_hat: 2.0,
            k_omega: 0.2,
            delta: 0.7,
            slack_weight: 1e4,
            dt: 0.01,
            omega_max: 5.0,
            eps_strict: 1e-9,
            eps_disc: 0.05,
            norm_bound: 0.05,
            u_grid: 41,
            max_time: 0.0,
            abort_on_violation: true,
        }
    }
}

// ---------------------------------------------------------------------------
// Pipeline: compiled scenario
// ---------------------------------------------------------------------------

/// Leaves advancing in lockstep because they share a repeated layer.
#[derive(Debug, Clone)]
pub struct Group {
    pub tie: TieKey,
    /// `(leaf index, repetition-interface layer index in that leaf's chain)`.
    pub members: Vec<(usize, usize)>,
    /// Minimal logic subtree spanning the members; its tri-state fold
    /// decides when the shared instance is complete.
    pub subtree: LogicNode,
}

/// A scenario compiled for online synthesis: logic tree, σ fold, parameter
/// layout, per-leaf value functions and lockstep groups.
pub struct Pipeline {
    pub dynamics: Dynamics1D,
    pub logic: LogicTree,
    pub sigma: SigmaExpr,
    pub layout: ParamLayout,
    pub preds: Vec<BandPredicate>,
    pub vfs: Vec<ValueFunction>,
    /// Innermost-first.
    pub groups: Vec<Group>,
    pub horizon: f64,
}

fn spanning_subtree(node: &LogicNode, members: &[usize]) -> LogicNode {
    let covers = |n: &LogicNode| {
        let ls = n.leaf_indices();
        members.iter().all(|m| ls.contains(m))
    };
    let mut cur = node;
    loop {
        let next = match cur {
            LogicNode::And(cs) | LogicNode::Or(cs) => cs.iter().find(|c| covers(c)),
            LogicNode::Leaf(_) => None,
        };
        match next {
            Some(n) => cur = n,
            None => return cur.clone(),
        }
    }
}

/// Compile a normalized formula into a synthesis pipeline. Negated leaves
/// are rejected: the reachability solve targets the band superlevel set and
/// has no complement form.
pub fn build_pipeline(
    nf: &NormalizedFormula,
    predicates: &PredicateMap,
    dynamics: Dynamics1D,
    x_range: (f64, f64),
    vf_horizon: f64,
    cache_dir: Option<&Path>,
) -> Result<Pipeline> {
    let logic = build_logic_tree(nf);
    for leaf in &logic.leaves {
        if leaf.negated {
            return Err(Error::Config(format!(
                "negated predicate `{}` is not supported by the synthesis pipeline \
                 (the monitor accepts it)",
                leaf.label
            )));
        }
    }
    let layout = build_param_layout(&logic)?;
    let sigma = fold_sigma(&logic);

    let spec = GridSpec::default_for(x_range.0, x_range.1, vf_horizon);
    let mut preds = Vec::with_capacity(logic.leaves.len());
    let mut vfs = Vec::with_capacity(logic.leaves.len());
    for leaf in &logic.leaves {
        let p = predicates
            .get(&leaf.label)
            .ok_or_else(|| Error::UnknownPredicate(leaf.label.clone()))?
            .clone();
        vfs.push(solve_cached(&dynamics, &p, &spec, cache_dir)?);
        preds.push(p);
    }

    // Lockstep groups: one per tie class that owns a repetition interface
    // (point-kind layer directly under a window-kind layer).
    let mut by_tie: BTreeMap<(u8, usize), Vec<(usize, usize)>> = BTreeMap::new();
    for (k, leaf) in logic.leaves.iter().enumerate() {
        for l in 1..leaf.layers.len() {
            if leaf.layers[l].kind.is_point() && leaf.layers[l - 1].kind.is_window() {
                let key = match leaf.layers[l].tie {
                    Some(TieKey::Node(id)) => (0u8, id),
                    Some(TieKey::Until(s)) => (1u8, s),
                    None => (2u8, k * 1024 + l),
                };
                by_tie.entry(key).or_default().push((k, l));
            }
        }
    }
    let mut groups: Vec<Group> = by_tie
        .into_iter()
        .map(|(key, members)| {
            let tie = match key {
                (0, id) => TieKey::Node(id),
                (1, s) => TieKey::Until(s),
                (_, id) => TieKey::Node(id),
            };
            let leaves: Vec<usize> = members.iter().map(|&(k, _)| k).collect();
            let subtree = spanning_subtree(&logic.root, &leaves);
            Group {
                tie,
                members,
                subtree,
            }
        })
        .collect();
    // Innermost-first: deeper interface layers are processed before outer
    // ones within one scheduling cascade.
    groups.sort_by_key(|g| {
        std::cmp::Reverse(g.members.iter().map(|&(_, l)| l).max().unwrap_or(0))
    });
    // Every leaf under a group's subtree must be a member: the repeated
    // layer dominates exactly the leaves that carry its tie.
    for g in &groups {
        let span = g.subtree.leaf_indices();
        for s in &span {
            if !g.members.iter().any(|&(k, _)| k == *s) {
                return Err(Error::Config(format!(
                    "repetition group {:?} spans leaf {s} that does not share its slot",
                    g.tie
                )));
            }
        }
    }

    let horizon = completion_horizon(&logic);
    Ok(Pipeline {
        dynamics,
        logic,
        sigma,
        layout,
        preds,
        vfs,
        groups,
        horizon,
    })
}

// ---------------------------------------------------------------------------
// Active-set QP
// ---------------------------------------------------------------------------

/// Minimize `½ vᵀ diag(q) v − cᵀ v` subject to `rows[i].0 · v ≥ rows[i].1`,
/// starting from the feasible point `v0`, by a primal active-set iteration.
pub fn qp_solve(
    q: &[f64],
    c: &[f64],
    rows: &[(Vec<f64>, f64)],
    v0: &[f64],
) -> Result<Vec<f64>> {
    let n = q.len();
    debug_assert_eq!(c.len(), n);
    let dot = |a: &[f64], v: &[f64]| a.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();

    let mut v = v0.to_vec();
    let mut working: Vec<usize> = Vec::new();

    for _ in 0..200 {
        // Equality-constrained KKT solve on the working set.
        let m = working.len();
        let mut kkt = DMatrix::<f64>::zeros(n + m, n + m);
        let mut rhs = DVector::<f64>::zeros(n + m);
        for i in 0..n {
            kkt[(i, i)] = q[i];
            rhs[i] = c[i];
        }
        for (j, &ri) in working.iter().enumerate() {
            for i in 0..n {
                kkt[(i, n + j)] = -rows[ri].0[i];
                kkt[(n + j, i)] = rows[ri].0[i];
            }
            rhs[n + j] = rows[ri].1;
        }
        let sol = match kkt.lu().solve(&rhs) {
            Some(s) => s,
            None => {
                // Degenerate working set: drop the newest row and retry.
                if working.pop().is_none() {
                    return Err(Error::Config("singular unconstrained QP".into()));
                }
                continue;
            }
        };
        let v_star: Vec<f64> = (0..n).map(|i| sol[i]).collect();
        let step: Vec<f64> = (0..n).map(|i| v_star[i] - v[i]).collect();
        let step_norm = step.iter().map(|s| s * s).sum::<f64>().sqrt();

        if step_norm <= 1e-11 {
            // Stationary on the working set: check multipliers.
            let (mut worst, mut worst_j) = (-1e-9, usize::MAX);
            for j in 0..m {
                let lam = sol[n + j];
                if lam < worst {
                    worst = lam;
                    worst_j = j;
                }
            }
            if worst_j == usize::MAX {
                return Ok(v);
            }
            working.remove(worst_j);
            continue;
        }

        // Longest feasible step toward the EQP solution.
        let mut alpha = 1.0f64;
        let mut blocker = usize::MAX;
        for (ri, row) in rows.iter().enumerate() {
            if working.contains(&ri) {
                continue;
            }
            let ap = dot(&row.0, &step);
            if ap < -1e-12 {
                let a_i = (row.1 - dot(&row.0, &v)) / ap;
                if a_i < alpha {
                    alpha = a_i.max(0.0);
                    blocker = ri;
                }
            }
        }
        for i in 0..n {
            v[i] += alpha * step[i];
        }
        if blocker == usize::MAX {
            // Full step accepted with no blocking constraint.
            continue;
        }
        if working.len() < n {
            working.push(blocker);
        } else {
            // Working set full; accept the clipped point.
            return Ok(v);
        }
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// Runtime state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum LeafPhase {
    Active,
    /// Innermost window elapsed; `ok` is the plateau verdict. Awaiting the
    /// enclosing group (or already fully walked for group-free leaves).
    Elapsed { ok: bool },
    /// Walk blocked at this repetition interface (repetition discharged);
    /// awaiting the outer group.
    Blocked { layer: usize },
    Complete { ok: bool },
}

struct LeafRt {
    op: NestedOperator,
    /// Independent-parameter column per layer index.
    cols: Vec<Option<usize>>,
    /// Repetition-interface layer indices, innermost (largest) first.
    interfaces: Vec<usize>,
    phase: LeafPhase,
    walk_start: Option<usize>,
    plateau_min: f64,
    /// Slot values captured when the window elapsed.
    snapshot: Vec<f64>,
}

impl LeafRt {
    fn vals(&self, tau_hat: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.op.slot_count()];
        for l in 0..self.op.num_layers() {
            if let Some(sb) = self.op.layer_slot(l) {
                if let Some(col) = self.cols[l] {
                    v[sb.id] = tau_hat[col];
                }
            }
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Done,
    Pending,
    Failed,
}

fn fold_status(node: &LogicNode, leaf: &impl Fn(usize) -> Status) -> Status {
    match node {
        LogicNode::Leaf(k) => leaf(*k),
        LogicNode::And(cs) => {
            let mut all_done = true;
            for c in cs {
                match fold_status(c, leaf) {
                    Status::Failed => return Status::Failed,
                    Status::Pending => all_done = false,
                    Status::Done => {}
                }
            }
            if all_done {
                Status::Done
            } else {
                Status::Pending
            }
        }
        LogicNode::Or(cs) => {
            let mut all_failed = true;
            for c in cs {
                match fold_status(c, leaf) {
                    Status::Done => return Status::Done,
                    Status::Pending => all_failed = false,
                    Status::Failed => {}
                }
            }
            if all_failed {
                Status::Failed
            } else {
                Status::Pending
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Simulation output
// ---------------------------------------------------------------------------

/// One controller step of the closed-loop trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub x: f64,
    pub tau_hat: Vec<f64>,
    pub u: f64,
    pub omega: Vec<f64>,
    pub sigma: f64,
    pub slack: f64,
    pub leaf_v: Vec<f64>,
    /// Active window `[α″, β″]` per leaf (NaN once discharged).
    pub leaf_a: Vec<f64>,
    pub leaf_b: Vec<f64>,
}

/// Outcome of one member leaf at a repetition-instance completion.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberLog {
    pub leaf: usize,
    /// Whether this leaf's own window was satisfied (false for a branch
    /// discharged vacuously by a disjunction sibling).
    pub discharged: bool,
    pub forced: bool,
    /// Elapsed window endpoints at completion time.
    pub a: f64,
    pub b: f64,
}

/// One completed instance of a lockstep group.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceLog {
    pub group: usize,
    pub instance: u64,
    pub time: f64,
    pub members: Vec<MemberLog>,
    /// Whether a new instance was chained (false on the final repetition).
    pub minted: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunSummary {
    pub completed: bool,
    pub violation: Option<String>,
    pub end_time: f64,
    pub max_slack: f64,
    pub integral_slack: f64,
    pub integral_sigma: f64,
    /// Largest excursion of any τ̂ outside its box (should stay ≤ ε_t·ω_max).
    pub tau_excursion: f64,
    pub instances: Vec<InstanceLog>,
}

pub struct SimResult {
    pub trace: Vec<TraceRow>,
    pub summary: RunSummary,
}

/// Simulation inputs: initial state, initial parameters (defaults to the
/// box midpoint) and the tracked references.
#[derive(Debug, Clone)]
pub struct SimOptions {
    pub x0: f64,
    pub tau0: Option<Vec<f64>>,
    pub u_ref: URef,
    pub cfg: ControllerConfig,
    /// After every obligation is discharged, keep integrating (holding the
    /// state with the input that minimizes `|ẋ|`) until this time, so the
    /// recorded signal covers the formula horizon for the monitor.
    pub min_time: f64,
    /// Columns whose `ω` reference pulls toward the scheduled initial value
    /// instead of the lower bound. Useful when an early pull would drag a
    /// deliberately late window into the middle of other obligations.
    pub anchor_slots: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Controller step
// ---------------------------------------------------------------------------

struct LeafRow {
    /// ω coefficients per independent column.
    d_tau: Vec<f64>,
    /// Coefficient of `u` (affine dynamics only; the input-dependent part
    /// is folded into `rhs` per grid point otherwise).
    dv_dx: f64,
    /// `∂V/∂t + k (V + |V − σ|)`.
    base: f64,
}

#[allow(clippy::too_many_arguments)]
fn solve_controller(
    pl: &Pipeline,
    cfg: &ControllerConfig,
    rows: &[LeafRow],
    tau_hat: &[f64],
    u_ref: f64,
    omega_ref: &[f64],
    x: f64,
) -> Result<(f64, Vec<f64>, f64)> {
    let nl = pl.layout.num_independent();
    let d = &pl.dynamics;

    // Containment rows, shared by every sub-problem: −g ω_i ≥ −κ̂ σ̂_i over
    // the ω block, plus rate bounds.
    let slot_rows = |off: usize, n: usize| -> Vec<(Vec<f64>, f64)> {
        let mut out = Vec::new();
        for i in 0..nl {
            let (lo, hi) = (pl.layout.lb[i], pl.layout.ub[i]);
            let g = 2.0 * tau_hat[i] - lo - hi;
            let sig = -(tau_hat[i] - lo) * (tau_hat[i] - hi);
            let mut a = vec![0.0; n];
            a[off + i] = -g;
            out.push((a, -cfg.kappa_hat * sig));
            let mut a = vec![0.0; n];
            a[off + i] = 1.0;
            out.push((a, -cfg.omega_max));
            let mut a = vec![0.0; n];
            a[off + i] = -1.0;
            out.push((a, -cfg.omega_max));
        }
        out
    };

    // Feasible ω start for the containment rows (exact when in the box).
    let omega0 = |rows_c: &[(Vec<f64>, f64)], off: usize| -> Vec<f64> {
        let mut w = vec![0.0; nl];
        for i in 0..nl {
            let (a, b) = &rows_c[3 * i];
            if a[off + i] * w[i] < *b {
                if a[off + i].abs() > 1e-12 {
                    w[i] = (b / a[off + i]).clamp(-cfg.omega_max, cfg.omega_max);
                } else {
                    w[i] = 0.0;
                }
            }
        }
        w
    };

    let affine = !matches!(
        d.kind,
        crate::reachability::DynamicsKind::NonAffine { .. }
    );

    if affine {
        // Variables (u, ω_1..L, s).
        let n = 1 + nl + 1;
        let (au, bu) = d.affine_parts(x).expect("input-affine family");
        let mut cons: Vec<(Vec<f64>, f64)> = Vec::new();
        for r in rows {
            let mut a = vec![0.0; n];
            a[0] = r.dv_dx * bu;
            for i in 0..nl {
                a[1 + i] = r.d_tau[i];
            }
            a[n - 1] = 1.0;
            cons.push((a, cfg.eps_strict - r.base - r.dv_dx * au));
        }
        cons.extend(slot_rows(1, n));
        let mut a = vec![0.0; n];
        a[0] = 1.0;
        cons.push((a, d.u_min));
        let mut a = vec![0.0; n];
        a[0] = -1.0;
        cons.push((a, -d.u_max));
        let mut a = vec![0.0; n];
        a[n - 1] = 1.0;
        cons.push((a, 0.0));

        let mut q = vec![2.0 * (1.0 - cfg.delta); n];
        q[0] = 2.0 * cfg.delta;
        q[n - 1] = 2.0 * cfg.slack_weight;
        let mut c = vec![0.0; n];
        c[0] = 2.0 * cfg.delta * u_ref.clamp(d.u_min, d.u_max);
        for i in 0..nl {
            c[1 + i] = 2.0 * (1.0 - cfg.delta) * omega_ref[i];
        }

        // Feasible start: tracked input, containment-feasible rates, slack
        // lifted to cover the leaf rows.
        let mut v0 = vec![0.0; n];
        v0[0] = u_ref.clamp(d.u_min, d.u_max);
        let w0 = omega0(&cons[rows.len()..], 1);
        v0[1..1 + nl].copy_from_slice(&w0);
        let mut need = 0.0f64;
        for (a, b) in cons.iter().take(rows.len()) {
            let lhs: f64 = a
                .iter()
                .zip(&v0)
                .take(n - 1)
                .map(|(x, y)| x * y)
                .sum();
            need = need.max(b - lhs);
        }
        v0[n - 1] = need.max(0.0);

        let v = qp_solve(&q, &c, &cons, &v0)?;
        Ok((v[0], v[1..1 + nl].to_vec(), v[n - 1]))
    } else {
        // Non-affine input channel: grid over u, QP in (ω, s) per point.
        let n = nl + 1;
        let ng = cfg.u_grid.max(2);
        let mut best: Option<(f64, f64, Vec<f64>, f64)> = None;
        let u_ref_c = u_ref.clamp(d.u_min, d.u_max);
        for gi in 0..ng {
            let u = d.u_min + (d.u_max - d.u_min) * gi as f64 / (ng - 1) as f64;
            let fx = d.f(x, u);
            let mut cons: Vec<(Vec<f64>, f64)> = Vec::new();
            for r in rows {
                let mut a = vec![0.0; n];
                for i in 0..nl {
                    a[i] = r.d_tau[i];
                }
                a[n - 1] = 1.0;
                cons.push((a, cfg.eps_strict - r.base - r.dv_dx * fx));
            }
            cons.extend(slot_rows(0, n));
            let mut a = vec![0.0; n];
            a[n - 1] = 1.0;
            cons.push((a, 0.0));

            let mut q = vec![2.0 * (1.0 - cfg.delta); n];
            q[n - 1] = 2.0 * cfg.slack_weight;
            let mut c = vec![0.0; n];
            for i in 0..nl {
                c[i] = 2.0 * (1.0 - cfg.delta) * omega_ref[i];
            }

            let mut v0 = vec![0.0; n];
            let w0 = omega0(&cons[rows.len()..], 0);
            v0[..nl].copy_from_slice(&w0);
            let mut need = 0.0f64;
            for (a, b) in cons.iter().take(rows.len()) {
                let lhs: f64 = a
                    .iter()
                    .zip(&v0)
                    .take(n - 1)
                    .map(|(x, y)| x * y)
                    .sum();
                need = need.max(b - lhs);
            }
            v0[n - 1] = need.max(0.0);

            let v = qp_solve(&q, &c, &cons, &v0)?;
            let mut obj = cfg.delta * (u - u_ref_c) * (u - u_ref_c)
                + cfg.slack_weight * v[n - 1] * v[n - 1];
            for i in 0..nl {
                obj += (1.0 - cfg.delta) * (v[i] - omega_ref[i]) * (v[i] - omega_ref[i]);
            }
            if best.as_ref().is_none_or(|b| obj < b.0) {
                best = Some((obj, u, v[..nl].to_vec(), v[n - 1]));
            }
        }
        let (_, u, w, s) = best.expect("nonempty grid");
        Ok((u, w, s))
    }
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

/// Run the closed loop until every obligation is discharged (or the time cap
/// or a required plateau violation stops it).
pub fn simulate(pl: &Pipeline, opt: &SimOptions) -> Result<SimResult> {
    let cfg = &opt.cfg;
    let nl = pl.layout.num_independent();
    let n_leaves = pl.logic.leaves.len();
    // Literal matches the repetition-count enumeration: repeat while the current
    // instance's satisfaction instant still lies before the parent window's
    // end. The extended policy only adds instants past the parent window,
    // which crowds the tail of the run without covering anything new.
    let policy = RepetitionPolicy::Literal;

    let mut tau_hat: Vec<f64> = match &opt.tau0 {
        Some(v) => {
            if v.len() != nl {
                return Err(Error::Config(format!(
                    "tau0 has {} entries, layout has {nl} independent parameters",
                    v.len()
                )));
            }
            v.clone()
        }
        None => {
            // Columns driving repeated layers start at their lower bound so
            // consecutive instances sit as densely as the windows allow;
            // single-shot parameters start mid-box.
            let mut repeating = vec![false; nl];
            for g in &pl.groups {
                for &(k, l) in &g.members {
                    if let Some(col) = pl.layout.independent_of(k, l) {
                        repeating[col] = true;
                    }
                }
            }
            (0..nl)
                .map(|i| {
                    if repeating[i] {
                        pl.layout.lb[i]
                    } else {
                        0.5 * (pl.layout.lb[i] + pl.layout.ub[i])
                    }
                })
                .collect()
        }
    };

    // Per-column ω-reference target: the lower bound by default (promotes
    // earlier satisfaction), the scheduled initial value for anchored slots.
    let omega_target: Vec<f64> = (0..nl)
        .map(|i| {
            if opt.anchor_slots.contains(&i) {
                tau_hat[i]
            } else {
                pl.layout.lb[i]
            }
        })
        .collect();

    let mut leaves: Vec<LeafRt> = (0..n_leaves)
        .map(|k| {
            let info = &pl.logic.leaves[k];
            let op = instantiate_leaf(info);
            let cols = (0..info.layers.len())
                .map(|l| pl.layout.independent_of(k, l))
                .collect();
            let interfaces: Vec<usize> = (1..info.layers.len())
                .rev()
                .filter(|&l| {
                    info.layers[l].kind.is_point() && info.layers[l - 1].kind.is_window()
                })
                .collect();
            LeafRt {
                op,
                cols,
                interfaces,
                phase: LeafPhase::Active,
                walk_start: None,
                plateau_min: f64::INFINITY,
                snapshot: Vec::new(),
            }
        })
        .collect();

    let mut group_finished = vec![false; pl.groups.len()];
    let max_time = if cfg.max_time > 0.0 {
        cfg.max_time
    } else {
        // A repetition minted just before its deadline can overshoot the
        // nominal horizon by most of one instance, so leave ample room.
        1.5 * pl.horizon + 10.0
    };

    let mut trace: Vec<TraceRow> = Vec::new();
    let mut summary = RunSummary::default();
    let mut t = 0.0f64;
    let mut x = opt.x0;

    'outer: loop {
        if !x.is_finite() {
            return Err(Error::NonFiniteState { x, t });
        }
        // Leaf values, windows and barrier rows at the current state.
        let mut leaf_v = vec![f64::INFINITY; n_leaves];
        let mut leaf_a = vec![f64::NAN; n_leaves];
        let mut leaf_b = vec![f64::NAN; n_leaves];
        for (k, rt) in leaves.iter_mut().enumerate() {
            match rt.phase {
                LeafPhase::Active => {
                    let vals = rt.vals(&tau_hat);
                    let a = rt.op.active_alpha().eval(&vals)?;
                    let b = rt.op.active_beta().eval(&vals)?;
                    leaf_a[k] = a;
                    leaf_b[k] = b;
                    if t > a {
                        let h = pl.preds[k].eval(x);
                        rt.plateau_min = rt.plateau_min.min(h);
                        leaf_v[k] = h;
                    } else {
                        leaf_v[k] = eval_value(&pl.vfs[k], x, (t - a).min(0.0))?;
                    }
                }
                LeafPhase::Elapsed { ok } | LeafPhase::Complete { ok } => {
                    leaf_v[k] = if ok { f64::INFINITY } else { f64::NEG_INFINITY };
                }
                LeafPhase::Blocked { .. } => leaf_v[k] = f64::INFINITY,
            }
        }
        let sigma = sigma_fold_eval(&pl.sigma, &mut |k| Ok(leaf_v[k]))?;

        if leaves.iter().all(|rt| matches!(rt.phase, LeafPhase::Complete { .. })) {
            // Hold the state until the requested signal extent.
            while t < opt.min_time - 1e-12 {
                let u = hold_input(&pl.dynamics, x);
                trace.push(TraceRow {
                    t,
                    x,
                    tau_hat: tau_hat.clone(),
                    u,
                    omega: vec![0.0; nl],
                    sigma,
                    slack: 0.0,
                    leaf_v: leaf_v.clone(),
                    leaf_a: leaf_a.clone(),
                    leaf_b: leaf_b.clone(),
                });
                x += cfg.dt * pl.dynamics.f(x, u);
                t += cfg.dt;
            }
            trace.push(TraceRow {
                t,
                x,
                tau_hat: tau_hat.clone(),
                u: 0.0,
                omega: vec![0.0; nl],
                sigma,
                slack: 0.0,
                leaf_v,
                leaf_a,
                leaf_b,
            });
            summary.completed = true;
            summary.end_time = t;
            break 'outer;
        }
        if t >= max_time {
            trace.push(TraceRow {
                t,
                x,
                tau_hat: tau_hat.clone(),
                u: 0.0,
                omega: vec![0.0; nl],
                sigma,
                slack: 0.0,
                leaf_v,
                leaf_a,
                leaf_b,
            });
            summary.end_time = t;
            summary
                .violation
                .get_or_insert_with(|| "time cap reached before completion".into());
            break 'outer;
        }

        let mut rows: Vec<LeafRow> = Vec::new();
        for (k, rt) in leaves.iter().enumerate() {
            if rt.phase != LeafPhase::Active {
                continue;
            }
            let v = leaf_v[k];
            let margin = cfg.k * (v + (v - sigma).abs());
            let a = leaf_a[k];
            if t > a {
                rows.push(LeafRow {
                    d_tau: vec![0.0; nl],
                    dv_dx: pl.preds[k].eval_grad(x),
                    base: margin,
                });
            } else {
                let (dv_dt, dv_dx) = value_gradients(&pl.vfs[k], x, (t - a).min(0.0))?;
                let mut d_tau = vec![0.0; nl];
                for &(slot, coef) in &rt.op.active_alpha().terms {
                    for l in 0..rt.op.num_layers() {
                        if rt.op.layer_slot(l).map(|sb| sb.id) == Some(slot) {
                            if let Some(col) = rt.cols[l] {
                                d_tau[col] -= coef * dv_dt;
                            }
                        }
                    }
                }
                rows.push(LeafRow {
                    d_tau,
                    dv_dx,
                    base: dv_dt + margin,
                });
            }
        }

        let u_ref = opt.u_ref.eval(t);
        let omega_ref: Vec<f64> = (0..nl)
            .map(|i| {
                (-cfg.k_omega * (tau_hat[i] - omega_target[i]))
                    .clamp(-cfg.omega_max, cfg.omega_max)
            })
            .collect();
        let (u, omega, slack) =
            solve_controller(pl, cfg, &rows, &tau_hat, u_ref, &omega_ref, x)?;

        trace.push(TraceRow {
            t,
            x,
            tau_hat: tau_hat.clone(),
            u,
            omega: omega.clone(),
            sigma,
            slack,
            leaf_v,
            leaf_a,
            leaf_b,
        });
        summary.max_slack = summary.max_slack.max(slack);
        summary.integral_slack += slack * cfg.dt;
        if sigma.is_finite() {
            summary.integral_sigma += sigma.max(0.0) * cfg.dt;
        }

        // Norm-controlled Euler update under zero-order hold.
        let mut n_sub = 1usize;
        while (pl.dynamics.f(x, u).abs() * cfg.dt / n_sub as f64) > cfg.norm_bound
            && n_sub < 1024
        {
            n_sub *= 2;
        }
        let h = cfg.dt / n_sub as f64;
        for _ in 0..n_sub {
            x += h * pl.dynamics.f(x, u);
        }
        for i in 0..nl {
            tau_hat[i] += omega[i] * cfg.dt;
            let exc = (pl.layout.lb[i] - tau_hat[i])
                .max(tau_hat[i] - pl.layout.ub[i])
                .max(0.0);
            summary.tau_excursion = summary.tau_excursion.max(exc);
        }
        t += cfg.dt;

        // Freeze mid-chain parameters whose windows the trajectory crossed:
        // the committed satisfaction instants must not slide.
        for rt in leaves.iter_mut() {
            if rt.phase != LeafPhase::Active {
                continue;
            }
            for l in 0..rt.op.num_layers() - 1 {
                if rt.op.layer_slot(l).is_some() {
                    let vals = rt.vals(&tau_hat);
                    let (_, bw) = rt.op.layer_window(l);
                    if t >= bw.eval(&vals)? - 1e-12 {
                        let col = rt.cols[l].unwrap_or(0);
                        rt.op.freeze_slot(l, tau_hat[col]);
                    }
                }
            }
        }

        // Leaf elapse events.
        for (k, rt) in leaves.iter_mut().enumerate() {
            if rt.phase != LeafPhase::Active {
                continue;
            }
            let vals = rt.vals(&tau_hat);
            let b = rt.op.active_beta().eval(&vals)?;
            if t >= b - 1e-9 {
                rt.plateau_min = rt.plateau_min.min(pl.preds[k].eval(x));
                let ok = rt.plateau_min >= -cfg.eps_disc;
                rt.snapshot = vals;
                rt.phase = LeafPhase::Elapsed { ok };
                if rt.interfaces.is_empty() {
                    // No repetition anywhere: discharge the whole chain now.
                    let snap = rt.snapshot.clone();
                    let out = rt.op.advance_bounded(
                        t,
                        &snap,
                        &AdvanceOptions {
                            forced: false,
                            min_layer: 0,
                            start_layer: None,
                            policy,
                        },
                    )?;
                    debug_assert_eq!(out, AdvanceOutcome::Complete);
                    rt.phase = LeafPhase::Complete { ok };
                }
            }
        }

        // Lockstep cascade: complete group instances innermost-first until
        // nothing more fires this step.
        let mut progressed = true;
        while progressed {
            progressed = false;
            for (gi, g) in pl.groups.iter().enumerate() {
                if group_finished[gi] {
                    continue;
                }
                let member_layer = |k: usize| {
                    g.members
                        .iter()
                        .find(|&&(m, _)| m == k)
                        .map(|&(_, l)| l)
                        .expect("spanned leaf is a member")
                };
                let status = fold_status(&g.subtree, &|k| {
                    let rt = &leaves[k];
                    match rt.phase {
                        LeafPhase::Active => Status::Pending,
                        LeafPhase::Elapsed { ok } => {
                            // An elapsed leaf reports to its innermost
                            // not-yet-finished group only.
                            if rt.interfaces.first() == Some(&member_layer(k)) {
                                if ok {
                                    Status::Done
                                } else {
                                    Status::Failed
                                }
                            } else {
                                Status::Pending
                            }
                        }
                        LeafPhase::Blocked { layer } => {
                            if layer > member_layer(k) {
                                Status::Done
                            } else {
                                Status::Pending
                            }
                        }
                        LeafPhase::Complete { ok } => {
                            if ok {
                                Status::Done
                            } else {
                                Status::Failed
                            }
                        }
                    }
                });
                match status {
                    Status::Pending => {}
                    Status::Failed => {
                        summary.violation = Some(format!(
                            "plateau violated in repetition group {:?} at t = {t:.3}",
                            g.tie
                        ));
                        if cfg.abort_on_violation {
                            summary.end_time = t;
                            break 'outer;
                        }
                        // Tolerated: discharge the instance anyway.
                        progressed |= advance_group(
                            pl, g, gi, &mut leaves, &mut group_finished, &tau_hat, t,
                            policy, &mut summary,
                        )?;
                    }
                    Status::Done => {
                        progressed |= advance_group(
                            pl, g, gi, &mut leaves, &mut group_finished, &tau_hat, t,
                            policy, &mut summary,
                        )?;
                    }
                }
            }
        }

        // Required-obligation failure outside any group.
        let root_status = fold_status(&pl.logic.root, &|k| match leaves[k].phase {
            LeafPhase::Complete { ok: false } | LeafPhase::Elapsed { ok: false } => {
                Status::Failed
            }
            LeafPhase::Complete { ok: true } => Status::Done,
            _ => Status::Pending,
        });
        if root_status == Status::Failed && cfg.abort_on_violation {
            summary
                .violation
                .get_or_insert_with(|| format!("required obligation violated at t = {t:.3}"));
            summary.end_time = t;
            break 'outer;
        }
    }

    Ok(SimResult { trace, summary })
}

/// Input that best holds the current state in place (`argmin |f(x, u)|`).
fn hold_input(d: &Dynamics1D, x: f64) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..41 {
        let u = d.u_min + (d.u_max - d.u_min) * i as f64 / 40.0;
        let v = d.f(x, u).abs();
        if v < best.0 {
            best = (v, u);
        }
    }
    best.1
}

#[allow(clippy::too_many_arguments)]
fn advance_group(
    pl: &Pipeline,
    g: &Group,
    gi: usize,
    leaves: &mut [LeafRt],
    group_finished: &mut [bool],
    tau_hat: &[f64],
    t: f64,
    policy: RepetitionPolicy,
    summary: &mut RunSummary,
) -> Result<bool> {
    let instance = leaves[g.members[0].0].op.counters[g.members[0].1];
    let mut members = Vec::with_capacity(g.members.len());
    let mut outcomes = Vec::with_capacity(g.members.len());
    for &(k, lg) in &g.members {
        let rt = &mut leaves[k];
        let (forced, vals, discharged) = match &rt.phase {
            LeafPhase::Elapsed { ok } => (false, rt.snapshot.clone(), *ok),
            LeafPhase::Blocked { .. } => (false, rt.vals(tau_hat), true),
            LeafPhase::Active => (true, rt.vals(tau_hat), false),
            LeafPhase::Complete { .. } => {
                return Err(Error::Config(
                    "completed leaf inside an active repetition group".into(),
                ))
            }
        };
        let (a, b) = if rt.phase == LeafPhase::Active {
            let a = rt.op.active_alpha().eval(&vals)?;
            let b = rt.op.active_beta().eval(&vals)?;
            (a, b)
        } else {
            let a = rt.op.active_alpha().eval(&vals).unwrap_or(f64::NAN);
            let b = rt.op.active_beta().eval(&vals).unwrap_or(f64::NAN);
            (a, b)
        };
        let out = rt.op.advance_bounded(
            t,
            &vals,
            &AdvanceOptions {
                forced,
                min_layer: lg,
                start_layer: rt.walk_start,
                policy,
            },
        )?;
        match out {
            AdvanceOutcome::Minted { layer } => {
                debug_assert_eq!(layer, lg);
                rt.phase = LeafPhase::Active;
                rt.walk_start = None;
                rt.plateau_min = f64::INFINITY;
                rt.snapshot.clear();
            }
            AdvanceOutcome::Blocked { layer } => {
                debug_assert_eq!(layer, lg);
                rt.phase = LeafPhase::Blocked { layer };
                rt.walk_start = Some(layer.saturating_sub(1));
            }
            AdvanceOutcome::Complete => {
                return Err(Error::Config(
                    "bounded walk completed inside a repetition group".into(),
                ))
            }
        }
        outcomes.push(out);
        members.push(MemberLog {
            leaf: k,
            discharged,
            forced,
            a,
            b,
        });
    }
    let minted = matches!(outcomes[0], AdvanceOutcome::Minted { .. });
    if outcomes
        .iter()
        .any(|o| matches!(o, AdvanceOutcome::Minted { .. }) != minted)
    {
        return Err(Error::Config(
            "repetition group members disagree on chaining".into(),
        ));
    }
    if minted {
        // A fresh outer instance re-arms every repetition nested below it.
        for (gj, other) in pl.groups.iter().enumerate() {
            if gj == gi {
                continue;
            }
            let deeper_shared = other.members.iter().any(|&(k, l)| {
                g.members
                    .iter()
                    .any(|&(k2, l2)| k2 == k && l > l2)
            });
            if deeper_shared {
                group_finished[gj] = false;
            }
        }
    } else {
        group_finished[gi] = true;
        // Leaves whose outermost repetition just finished can discharge the
        // remaining outer layers immediately when no outer group exists.
        for &(k, lg) in &g.members {
            let rt = &mut leaves[k];
            let has_outer = rt.interfaces.iter().any(|&l| l < lg);
            if !has_outer {
                let vals = rt.vals(tau_hat);
                let out = rt.op.advance_bounded(
                    t,
                    &vals,
                    &AdvanceOptions {
                        forced: false,
                        min_layer: 0,
                        start_layer: rt.walk_start,
                        policy,
                    },
                )?;
                debug_assert_eq!(out, AdvanceOutcome::Complete);
                rt.phase = LeafPhase::Complete { ok: true };
                rt.walk_start = None;
            }
        }
    }
    summary.instances.push(InstanceLog {
        group: gi,
        instance,
        time: t,
        members,
        minted,
    });
    Ok(true)
}

// ---------------------------------------------------------------------------
// Trace output and post-hoc checks
// ---------------------------------------------------------------------------

/// Write the trace as CSV (deterministic shortest-round-trip floats).
pub fn write_trace_csv<W: Write>(w: &mut W, trace: &[TraceRow]) -> Result<()> {
    let nl = trace.first().map_or(0, |r| r.tau_hat.len());
    let nk = trace.first().map_or(0, |r| r.leaf_v.len());
    let mut header = String::from("t,x");
    for i in 0..nl {
        header.push_str(&format!(",tau_hat_{}", i + 1));
    }
    header.push_str(",u");
    for i in 0..nl {
        header.push_str(&format!(",omega_{}", i + 1));
    }
    header.push_str(",sigma,slack");
    for k in 0..nk {
        header.push_str(&format!(",v_{k},a_{k},b_{k}"));
    }
    writeln!(w, "{header}")?;
    for r in trace {
        let mut line = format!("{},{}", r.t, r.x);
        for v in &r.tau_hat {
            line.push_str(&format!(",{v}"));
        }
        line.push_str(&format!(",{}", r.u));
        for v in &r.omega {
            line.push_str(&format!(",{v}"));
        }
        line.push_str(&format!(",{},{}", r.sigma, r.slack));
        for k in 0..nk {
            line.push_str(&format!(",{},{},{}", r.leaf_v[k], r.leaf_a[k], r.leaf_b[k]));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Read back the `(t, x)` columns of a trace CSV.
pub fn read_trace_csv(text: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut times = Vec::new();
    let mut states = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if !line.starts_with("t,x") {
                return Err(Error::Config("trace CSV must start with t,x columns".into()));
            }
            continue;
        }
        let mut parts = line.split(',');
        let (Some(ts), Some(xs)) = (parts.next(), parts.next()) else {
            return Err(Error::Config(format!("short CSV row {i}")));
        };
        let t: f64 = ts
            .parse()
            .map_err(|_| Error::Config(format!("bad time on row {i}: {ts}")))?;
        let x: f64 = xs
            .parse()
            .map_err(|_| Error::Config(format!("bad state on row {i}: {xs}")))?;
        times.push(t);
        states.push(x);
    }
    Ok((times, states))
}

/// Post-hoc soundness of the one-window-at-a-time constraint schedule: every
/// discharged member window of every completed instance must be satisfied by
/// the recorded trajectory itself.
pub fn check_instance_windows(
    trace: &[TraceRow],
    summary: &RunSummary,
    preds: &[BandPredicate],
    eps: f64,
) -> Result<()> {
    let sample = |tq: f64| -> f64 {
        // Linear interpolation on the trace grid.
        match trace.binary_search_by(|r| r.t.partial_cmp(&tq).unwrap()) {
            Ok(i) => trace[i].x,
            Err(0) => trace[0].x,
            Err(i) if i >= trace.len() => trace[trace.len() - 1].x,
            Err(i) => {
                let (r0, r1) = (&trace[i - 1], &trace[i]);
                let w = (tq - r0.t) / (r1.t - r0.t);
                r0.x + w * (r1.x - r0.x)
            }
        }
    };
    for inst in &summary.instances {
        for m in &inst.members {
            if !m.discharged || !m.a.is_finite() {
                continue;
            }
            let mut worst = f64::INFINITY;
            let mut tq = m.a;
            let end = m.b.max(m.a);
            loop {
                worst = worst.min(preds[m.leaf].eval(sample(tq.min(end))));
                if tq >= end {
                    break;
                }
                tq += 0.01;
            }
            if worst < -eps {
                return Err(Error::SatisfactionViolated {
                    t: inst.time,
                    detail: format!(
                        "leaf {} window [{:.3}, {:.3}] dips to {worst:.4}",
                        m.leaf, m.a, m.b
                    ),
                });
            }
        }
    }
    Ok(())
}

/// Containment check for the parameter trajectory against the layout box.
pub fn check_containment(trace: &[TraceRow], layout: &ParamLayout, tol: f64) -> Result<()> {
    for r in trace {
        for (i, &v) in r.tau_hat.iter().enumerate() {
            if v < layout.lb[i] - tol || v > layout.ub[i] + tol {
                return Err(Error::ParamOutOfBounds {
                    slot: i,
                    value: v,
                    lo: layout.lb[i],
                    hi: layout.ub[i],
                });
            }
        }
    }
    Ok(())
}

/// Live parameter box of the layout (convenience for diagnostics).
pub fn layout_box(layout: &ParamLayout) -> ParamBox {
    layout.theta_box()
}
