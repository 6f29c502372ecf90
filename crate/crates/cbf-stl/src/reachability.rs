//! Backward-reachability value functions for 1-D dynamics with box input
//! constraints.
//!
//! `V_h(x, t)` for `t ≤ 0` is the best achievable running maximum of the
//! predicate function `h` over the horizon `[t, 0]`, starting from `x` at
//! time `t` under admissible inputs. Because predicates are concave bands and
//! the state is scalar, the optimal input is the pointwise maximizer of
//! `(∂h/∂x)·f(x, u)`, so the solve reduces to one forward integration per
//! state-grid node under that feedback, recording the running maximum of `h`
//! at every grid time offset. This stores the exact supremum quantity and
//! makes time-monotonicity hold by construction (a longer horizon sees a
//! superset of the same optimal path).

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::BandPredicate;

/// Supported 1-D control systems with box input set `[u_min, u_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dynamics1D {
    pub kind: DynamicsKind,
    pub u_min: f64,
    pub u_max: f64,
}

/// The three dynamics families used by the built-in scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum DynamicsKind {
    /// `ẋ = −tanh(x) + a·x·u³ + b·u`
    NonAffine { a: f64, b: f64 },
    /// `ẋ = −0.1·tanh(x) + u·(0.5x + 1.0)`
    Affine,
    /// `ẋ = 0.1x + u`
    Linear,
}

impl Dynamics1D {
    pub fn new(kind: DynamicsKind, u_min: f64, u_max: f64) -> Result<Self> {
        if !(u_min < u_max) || !u_min.is_finite() || !u_max.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "input bounds must satisfy u_min < u_max (got [{u_min}, {u_max}])"
            )));
        }
        Ok(Self { kind, u_min, u_max })
    }

    /// Vector field `f(x, u)`.
    pub fn f(&self, x: f64, u: f64) -> f64 {
        match self.kind {
            DynamicsKind::NonAffine { a, b } => -x.tanh() + a * x * u * u * u + b * u,
            DynamicsKind::Affine => -0.1 * x.tanh() + u * (0.5 * x + 1.0),
            DynamicsKind::Linear => 0.1 * x + u,
        }
    }

    /// The input-dependent part of `f` (what the optimal input maximizes
    /// against the gradient sign).
    fn input_term(&self, x: f64, u: f64) -> f64 {
        match self.kind {
            DynamicsKind::NonAffine { a, b } => a * x * u * u * u + b * u,
            DynamicsKind::Affine => u * (0.5 * x + 1.0),
            DynamicsKind::Linear => u,
        }
    }

    /// Candidate set for the pointwise maximizer: the input-box boundary,
    /// plus the interior critical points `±√(−b/(3ax))` of the non-affine
    /// family when real-valued and admissible.
    /// Split `f(x, u) = a(x) + b(x)·u` for the input-affine families.
    pub fn affine_parts(&self, x: f64) -> Option<(f64, f64)> {
        match self.kind {
            DynamicsKind::NonAffine { .. } => None,
            DynamicsKind::Affine => Some((-0.1 * x.tanh(), 0.5 * x + 1.0)),
            DynamicsKind::Linear => Some((0.1 * x, 1.0)),
        }
    }

    pub fn input_candidates(&self, x: f64) -> Vec<f64> {
        let mut c = vec![self.u_min, self.u_max];
        if let DynamicsKind::NonAffine { a, b } = self.kind {
            let denom = 3.0 * a * x;
            if x != 0.0 && denom != 0.0 {
                let arg = -b / denom;
                if arg >= 0.0 {
                    let root = arg.sqrt();
                    for cand in [root, -root] {
                        if cand >= self.u_min && cand <= self.u_max {
                            c.push(cand);
                        }
                    }
                }
            }
        }
        c
    }
}

/// The input in the candidate set maximizing `grad_sign · (input term)`.
pub fn optimal_input(dyn_: &Dynamics1D, x: f64, grad_sign: f64) -> f64 {
    let s = if grad_sign >= 0.0 { 1.0 } else { -1.0 };
    let mut best_u = dyn_.u_min;
    let mut best_v = f64::NEG_INFINITY;
    for u in dyn_.input_candidates(x) {
        let v = s * dyn_.input_term(x, u);
        if v > best_v {
            best_v = v;
            best_u = u;
        }
    }
    best_u
}

/// Grid specification for a value-function solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    /// Time extent: the grid covers `t ∈ [−t_horizon, 0]`.
    pub t_horizon: f64,
    pub n_t: usize,
    /// Internal integration step (before norm-control halving).
    pub dt_int: f64,
}

impl GridSpec {
    /// Default grid over a state range: 401 space nodes, 0.05 s time slices,
    /// 0.01 s internal step.
    pub fn default_for(x_min: f64, x_max: f64, t_horizon: f64) -> Self {
        Self {
            x_min,
            x_max,
            n_x: 401,
            t_horizon,
            n_t: (t_horizon / 0.05).round() as usize + 1,
            dt_int: 0.01,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.t_horizon > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "t_horizon must be positive (got {})",
                self.t_horizon
            )));
        }
        if self.n_x < 2 || self.n_t < 2 {
            return Err(Error::InvalidGrid("need n_x >= 2 and n_t >= 2".into()));
        }
        if !(self.x_min < self.x_max) {
            return Err(Error::InvalidGrid(format!(
                "x range empty: [{}, {}]",
                self.x_min, self.x_max
            )));
        }
        if !(self.dt_int > 0.0) {
            return Err(Error::InvalidGrid("dt_int must be positive".into()));
        }
        Ok(())
    }
}

/// A solved value function on a uniform `(x, t)` grid, `t ∈ [−T, 0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub spec: GridSpec,
    pub dynamics: Dynamics1D,
    pub predicate: BandPredicate,
    /// Row-major: `values[i * n_t + j]` is `V(x_i, t_j)` with
    /// `x_i = x_min + i·dx` and `t_j = −T + j·dt`.
    pub values: Vec<f64>,
    /// Number of grid nodes where integration hit the step-halving limit.
    pub step_limited_nodes: usize,
}

impl ValueFunction {
    #[inline]
    pub fn dx(&self) -> f64 {
        (self.spec.x_max - self.spec.x_min) / (self.spec.n_x - 1) as f64
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.spec.t_horizon / (self.spec.n_t - 1) as f64
    }

    #[inline]
    pub fn x_at(&self, i: usize) -> f64 {
        self.spec.x_min + i as f64 * self.dx()
    }

    #[inline]
    pub fn t_at(&self, j: usize) -> f64 {
        -self.spec.t_horizon + j as f64 * self.dt()
    }

    #[inline]
    fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.spec.n_t + j]
    }
}

/// Solve `V_h` for the given dynamics, predicate, and grid.
///
/// For each state node the optimally controlled trajectory is integrated
/// forward once with first-order Euler steps under norm control (the step is
/// halved whenever a single update would move the state by more than half a
/// grid cell), and the running maximum of `h` is recorded at every grid time
/// offset. States are clamped to the grid range plus a margin.
pub fn solve_value_function(
    dyn_: &Dynamics1D,
    p: &BandPredicate,
    spec: &GridSpec,
) -> Result<ValueFunction> {
    spec.validate()?;
    let n_x = spec.n_x;
    let n_t = spec.n_t;
    let dx = (spec.x_max - spec.x_min) / (n_x - 1) as f64;
    let dt = spec.t_horizon / (n_t - 1) as f64;
    let margin = 0.25 * (spec.x_max - spec.x_min);
    let clamp_lo = spec.x_min - margin;
    let clamp_hi = spec.x_max + margin;

    let columns: Vec<std::result::Result<(Vec<f64>, bool), Error>> = (0..n_x)
        .into_par_iter()
        .map(|i| {
            let x0 = spec.x_min + i as f64 * dx;
            let mut x = x0;
            let mut running_max = p.eval(x);
            // run_max_at[m] = best h over elapsed horizon m·dt.
            let mut run_max_at = vec![0.0f64; n_t];
            run_max_at[0] = running_max;
            let mut step_limited = false;
            for m in 1..n_t {
                // Integrate one grid slice [ (m−1)dt, m·dt ].
                let mut remaining = dt;
                while remaining > 1e-12 {
                    let grad = p.eval_grad(x);
                    let sign = if grad == 0.0 { 1.0 } else { grad.signum() };
                    let u = optimal_input(dyn_, x, sign);
                    let mut step = spec.dt_int.min(remaining);
                    let dxdt = dyn_.f(x, u);
                    // Norm control: halve the step until the state move is at
                    // most half a grid cell (bounded number of halvings).
                    let mut halvings = 0;
                    while (dxdt * step).abs() > 0.5 * dx && halvings < 20 {
                        step *= 0.5;
                        halvings += 1;
                    }
                    if halvings >= 20 {
                        step_limited = true;
                    }
                    x += dxdt * step;
                    if !x.is_finite() {
                        return Err(Error::NonFiniteState { x: x0, t: -(m as f64) * dt });
                    }
                    x = x.clamp(clamp_lo, clamp_hi);
                    remaining -= step;
                    // Re-evaluate h along the path so the running max tracks
                    // the supremum at sub-slice resolution.
                    let h = p.eval(x);
                    if h > running_max {
                        running_max = h;
                    }
                }
                run_max_at[m] = running_max;
            }
            // V(x_i, t_j) with t_j = −T + j·dt has horizon |t_j| = (n_t−1−j)·dt.
            let mut col = vec![0.0f64; n_t];
            for (j, slot) in col.iter_mut().enumerate() {
                *slot = run_max_at[n_t - 1 - j];
            }
            Ok((col, step_limited))
        })
        .collect();

    let mut values = vec![0.0f64; n_x * n_t];
    let mut step_limited_nodes = 0;
    for (i, res) in columns.into_iter().enumerate() {
        let (col, limited) = res?;
        if limited {
            step_limited_nodes += 1;
        }
        values[i * n_t..(i + 1) * n_t].copy_from_slice(&col);
    }

    Ok(ValueFunction {
        spec: *spec,
        dynamics: *dyn_,
        predicate: p.clone(),
        values,
        step_limited_nodes,
    })
}

/// Bilinear interpolation of `V` at `(x, t)`, `t ≤ 0`. `x` outside the grid
/// clamps to the nearest edge; `t` earlier than the grid clamps to the
/// earliest slice.
pub fn eval_value(v: &ValueFunction, x: f64, t: f64) -> Result<f64> {
    if t > 0.0 {
        return Err(Error::PositiveTime(t));
    }
    Ok(eval_bilinear(v, x, t))
}

fn eval_bilinear(v: &ValueFunction, x: f64, t: f64) -> f64 {
    let n_x = v.spec.n_x;
    let n_t = v.spec.n_t;
    let dx = v.dx();
    let dt = v.dt();

    let xf = ((x - v.spec.x_min) / dx).clamp(0.0, (n_x - 1) as f64);
    let tf = ((t + v.spec.t_horizon) / dt).clamp(0.0, (n_t - 1) as f64);

    let i0 = (xf.floor() as usize).min(n_x - 2);
    let j0 = (tf.floor() as usize).min(n_t - 2);
    let wx = xf - i0 as f64;
    let wt = tf - j0 as f64;

    let v00 = v.value(i0, j0);
    let v10 = v.value(i0 + 1, j0);
    let v01 = v.value(i0, j0 + 1);
    let v11 = v.value(i0 + 1, j0 + 1);
    v00 * (1.0 - wx) * (1.0 - wt) + v10 * wx * (1.0 - wt) + v01 * (1.0 - wx) * wt + v11 * wx * wt
}

/// Central finite-difference gradients `(∂V/∂t, ∂V/∂x)` at `(x, t)`,
/// one-sided at grid edges.
pub fn value_gradients(v: &ValueFunction, x: f64, t: f64) -> Result<(f64, f64)> {
    if t > 0.0 {
        return Err(Error::PositiveTime(t));
    }
    let dx = v.dx();
    let dt = v.dt();

    let x_lo = (x - dx).max(v.spec.x_min);
    let x_hi = (x + dx).min(v.spec.x_max);
    let dv_dx = if x_hi > x_lo {
        (eval_bilinear(v, x_hi, t) - eval_bilinear(v, x_lo, t)) / (x_hi - x_lo)
    } else {
        0.0
    };

    let t_lo = (t - dt).max(-v.spec.t_horizon);
    let t_hi = (t + dt).min(0.0);
    let dv_dt = if t_hi > t_lo {
        (eval_bilinear(v, x, t_hi) - eval_bilinear(v, x, t_lo)) / (t_hi - t_lo)
    } else {
        0.0
    };

    Ok((dv_dt, dv_dx))
}

/// Monotonicity tolerance scaled to the predicate magnitude.
pub fn monotonicity_tolerance(p: &BandPredicate) -> f64 {
    1e-6 * p.c * p.r * p.r
}

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

/// Deterministic FNV-1a hash of the solve key (dynamics, predicate, grid).
pub fn cache_key(dyn_: &Dynamics1D, p: &BandPredicate, spec: &GridSpec) -> u64 {
    let canonical = format!(
        "{:?}|{:.17e}|{:.17e}|{}|{:.17e}|{:.17e}|{:.17e}|{:.17e}|{}|{:.17e}|{}|{:.17e}",
        dyn_.kind,
        dyn_.u_min,
        dyn_.u_max,
        p.label,
        p.c,
        p.r,
        p.x0,
        spec.x_min,
        spec.n_x,
        spec.x_max,
        spec.n_t,
        spec.t_horizon
    );
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in canonical.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    // dt_int folded in separately (kept out of the format string above for
    // readability).
    for b in format!("{:.17e}", spec.dt_int).bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn cache_path(dir: &Path, key: u64) -> PathBuf {
    dir.join(format!("vf-{key:016x}.bin"))
}

/// Serialize a solved value function into the cache directory.
pub fn cache_store(dir: &Path, v: &ValueFunction) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let key = cache_key(&v.dynamics, &v.predicate, &v.spec);
    let path = cache_path(dir, key);
    let mut bytes = Vec::with_capacity(16 + v.values.len() * 8);
    bytes.extend_from_slice(b"CBFSTLVF");
    bytes.extend_from_slice(&(v.values.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&(v.step_limited_nodes as u64).to_le_bytes());
    for val in &v.values {
        bytes.extend_from_slice(&val.to_le_bytes());
    }
    fs::write(&path, bytes)?;
    Ok(path)
}

/// Load a value function from cache, if present and matching the key.
pub fn cache_load(
    dir: &Path,
    dyn_: &Dynamics1D,
    p: &BandPredicate,
    spec: &GridSpec,
) -> Result<Option<ValueFunction>> {
    let key = cache_key(dyn_, p, spec);
    let path = cache_path(dir, key);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(&path)?;
    if bytes.len() < 24 || &bytes[..8] != b"CBFSTLVF" {
        return Ok(None);
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let step_limited_nodes = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if n != spec.n_x * spec.n_t || bytes.len() != 24 + n * 8 {
        return Ok(None);
    }
    let mut values = Vec::with_capacity(n);
    for chunk in bytes[24..].chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(Some(ValueFunction {
        spec: *spec,
        dynamics: *dyn_,
        predicate: p.clone(),
        values,
        step_limited_nodes,
    }))
}

/// Solve with optional cache directory: load on hit, store on miss.
pub fn solve_cached(
    dyn_: &Dynamics1D,
    p: &BandPredicate,
    spec: &GridSpec,
    cache_dir: Option<&Path>,
) -> Result<ValueFunction> {
    if let Some(dir) = cache_dir {
        if let Some(v) = cache_load(dir, dyn_, p, spec)? {
            return Ok(v);
        }
    }
    let v = solve_value_function(dyn_, p, spec)?;
    if let Some(dir) = cache_dir {
        cache_store(dir, &v)?;
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// Exhaustive cross-check utility
// ---------------------------------------------------------------------------

/// Brute-force reachability check used as an independent oracle in tests:
/// forward-simulate every piecewise-constant input signal with `switches`
/// switch points over the candidate values `{u_min, u*, u_max}` and report
/// whether any achieves `max_{s ∈ [0, horizon]} h(x(s)) ≥ 0`.
pub fn brute_force_reachable(
    dyn_: &Dynamics1D,
    p: &BandPredicate,
    x0: f64,
    horizon: f64,
    switches: usize,
    dt_int: f64,
) -> bool {
    // Candidate input levels: box boundary, zero-hold, and the optimal-input
    // values toward the band from above/below.
    let mut levels = vec![dyn_.u_min, dyn_.u_max, 0.0];
    levels.push(optimal_input(dyn_, x0, 1.0));
    levels.push(optimal_input(dyn_, x0, -1.0));
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();

    let segments = switches + 1;
    let seg_len = horizon / segments as f64;
    let n_combo = levels.len().pow(segments as u32);
    for combo in 0..n_combo {
        let mut idx = combo;
        let mut x = x0;
        let mut best = p.eval(x);
        'outer: for _ in 0..segments {
            let u = levels[idx % levels.len()];
            idx /= levels.len();
            let mut remaining = seg_len;
            while remaining > 1e-12 {
                let step = dt_int.min(remaining);
                x += dyn_.f(x, u) * step;
                if !x.is_finite() {
                    break 'outer;
                }
                remaining -= step;
                let h = p.eval(x);
                if h > best {
                    best = h;
                }
            }
        }
        if best >= 0.0 {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn band(c: f64, r: f64, x0: f64) -> BandPredicate {
        BandPredicate::new("p", c, r, x0).unwrap()
    }

    fn linear() -> Dynamics1D {
        Dynamics1D::new(DynamicsKind::Linear, -0.5, 0.5).unwrap()
    }

    fn nonaffine() -> Dynamics1D {
        Dynamics1D::new(DynamicsKind::NonAffine { a: 8.0, b: 0.5 }, -0.5, 0.5).unwrap()
    }

    fn small_spec() -> GridSpec {
        GridSpec {
            x_min: -2.0,
            x_max: 3.0,
            n_x: 101,
            t_horizon: 5.0,
            n_t: 51,
            dt_int: 0.01,
        }
    }

    #[test]
    fn terminal_condition_exact() {
        let p = band(10.0, 0.25, 1.0);
        let v = solve_value_function(&linear(), &p, &small_spec()).unwrap();
        let j_end = v.spec.n_t - 1;
        for i in 0..v.spec.n_x {
            assert_eq!(v.value(i, j_end), p.eval(v.x_at(i)));
        }
    }

    #[test]
    fn monotone_in_time() {
        let p = band(10.0, 0.25, 1.0);
        for d in [linear(), nonaffine()] {
            let v = solve_value_function(&d, &p, &small_spec()).unwrap();
            let tol = monotonicity_tolerance(&p);
            for i in 0..v.spec.n_x {
                for j in 0..v.spec.n_t - 1 {
                    assert!(
                        v.value(i, j) >= v.value(i, j + 1) - tol,
                        "monotonicity violated at node ({i}, {j})"
                    );
                }
            }
        }
    }

    #[test]
    fn optimal_input_linear_signs() {
        let d = linear();
        assert_eq!(optimal_input(&d, 0.3, 1.0), 0.5);
        assert_eq!(optimal_input(&d, 0.3, -1.0), -0.5);
    }

    #[test]
    fn optimal_input_nonaffine_candidates() {
        let d = nonaffine();
        // x > 0: −b/(3ax) < 0, so only the box boundary competes.
        let cands = d.input_candidates(1.0);
        assert_eq!(cands.len(), 2);
        // x < 0: interior roots ±√(−b/(3ax)) become real; for x = −1 the
        // roots ±√(0.5/24) ≈ ±0.144 are admissible.
        let cands = d.input_candidates(-1.0);
        assert_eq!(cands.len(), 4);
        let root = (0.5f64 / 24.0).sqrt();
        assert!(cands.iter().any(|u| (u - root).abs() < 1e-12));
        assert!(cands.iter().any(|u| (u + root).abs() < 1e-12));
        // x = 0 skips the division guard.
        assert_eq!(d.input_candidates(0.0).len(), 2);
    }

    #[test]
    fn eval_value_interpolation_identity() {
        let p = band(10.0, 0.25, 1.0);
        let v = solve_value_function(&linear(), &p, &small_spec()).unwrap();
        for (i, j) in [(0, 0), (50, 25), (100, 50)] {
            let got = eval_value(&v, v.x_at(i), v.t_at(j)).unwrap();
            assert_abs_diff_eq!(got, v.value(i, j), epsilon = 1e-12);
        }
        // Midpoint in x at t = 0 is the mean of the neighbors.
        let mid = 0.5 * (v.x_at(10) + v.x_at(11));
        let got = eval_value(&v, mid, 0.0).unwrap();
        assert_abs_diff_eq!(
            got,
            0.5 * (p.eval(v.x_at(10)) + p.eval(v.x_at(11))),
            epsilon = 1e-12
        );
    }

    #[test]
    fn eval_value_rejects_positive_time() {
        let p = band(10.0, 0.25, 1.0);
        let v = solve_value_function(&linear(), &p, &small_spec()).unwrap();
        assert!(matches!(
            eval_value(&v, 0.0, 0.1),
            Err(Error::PositiveTime(_))
        ));
        assert!(value_gradients(&v, 0.0, 0.1).is_err());
    }

    #[test]
    fn gradients_consistent() {
        let p = band(10.0, 0.25, 1.0);
        let v = solve_value_function(&linear(), &p, &small_spec()).unwrap();
        // dV/dx at the band center, t = 0, vanishes by symmetry.
        let (_, dv_dx) = value_gradients(&v, 1.0, 0.0).unwrap();
        assert!(dv_dx.abs() < 1e-6, "dV/dx at center = {dv_dx}");
        // dV/dt ≤ tol everywhere sampled (time monotonicity).
        let tol = monotonicity_tolerance(&p);
        for &x in &[-1.5, 0.0, 0.6, 1.0, 2.0] {
            for &t in &[-4.5, -2.0, -0.5] {
                let (dv_dt, _) = value_gradients(&v, x, t).unwrap();
                assert!(dv_dt <= tol + 1e-9, "dV/dt = {dv_dt} at ({x}, {t})");
            }
        }
        // Deep inside the reach plateau V ≡ c·r² so dV/dx ≈ 0 there; near
        // the terminal slice outside influence, V ≡ h and dV/dx ≈ h′.
        let (_, g) = value_gradients(&v, 1.1, 0.0).unwrap();
        assert_abs_diff_eq!(g, p.eval_grad(1.1), epsilon = 0.05 * p.c);
    }

    #[test]
    fn linear_reaches_band_from_origin() {
        // From x = 0 the time-optimal trajectory under u = +0.5 reaches the
        // band edge 0.75 in t* = 10·ln(1.05/0.5)/... (solve 0.1x + 0.5):
        // x(t) = 5(e^{0.1 t} − 1) = 0.75 → t* = 10·ln(1.15) ≈ 1.398.
        let p = band(10.0, 0.25, 1.0);
        let v = solve_value_function(&linear(), &p, &small_spec()).unwrap();
        let t_star = 10.0 * (1.15f64).ln();
        assert!(eval_value(&v, 0.0, -(t_star + 0.1)).unwrap() >= 0.0);
        assert!(eval_value(&v, 0.0, -(t_star - 0.1)).unwrap() < 0.0);
    }

    #[test]
    fn zero_level_set_widens() {
        let p = band(10.0, 0.25, 1.0);
        let v = solve_value_function(&nonaffine(), &p, &small_spec()).unwrap();
        // The zero superlevel set in x grows monotonically as t decreases.
        let mut prev_width = -1.0f64;
        for j in (0..v.spec.n_t).rev() {
            let width = (0..v.spec.n_x).filter(|&i| v.value(i, j) >= 0.0).count() as f64;
            assert!(
                width >= prev_width,
                "superlevel set shrank at slice {j}"
            );
            prev_width = width;
        }
    }

    #[test]
    fn sign_agreement_with_brute_force() {
        let p = band(10.0, 0.25, 1.0);
        let d = linear();
        let v = solve_value_function(&d, &p, &small_spec()).unwrap();
        let mut agree = 0;
        let mut total = 0;
        let mut boundary_disagreements = 0;
        for ix in 0..11 {
            let x = -2.0 + 5.0 * ix as f64 / 10.0;
            for it in 1..=11 {
                let horizon = 5.0 * it as f64 / 11.0;
                let vf_sign = eval_value(&v, x, -horizon).unwrap() >= 0.0;
                let bf_sign = brute_force_reachable(&d, &p, x, horizon, 3, 0.01);
                total += 1;
                if vf_sign == bf_sign {
                    agree += 1;
                } else {
                    // Disagreements must hug the zero level set.
                    let val = eval_value(&v, x, -horizon).unwrap();
                    if val.abs() < 0.5 {
                        boundary_disagreements += 1;
                    }
                }
            }
        }
        assert!(
            agree as f64 >= 0.95 * total as f64,
            "agreement {agree}/{total}"
        );
        assert_eq!(agree + boundary_disagreements, total);
    }

    #[test]
    fn cache_round_trip_bit_identical() {
        let p = band(10.0, 0.25, 1.0);
        let d = linear();
        let spec = GridSpec {
            n_x: 21,
            n_t: 11,
            ..small_spec()
        };
        let dir = tempfile::tempdir().unwrap();
        let v1 = solve_cached(&d, &p, &spec, Some(dir.path())).unwrap();
        let v2 = solve_cached(&d, &p, &spec, Some(dir.path())).unwrap();
        assert_eq!(v1.values, v2.values);
        // A different grid misses the cache.
        let spec2 = GridSpec { n_x: 22, ..spec };
        assert!(cache_load(dir.path(), &d, &p, &spec2).unwrap().is_none());
    }

    #[test]
    fn invalid_specs_rejected() {
        let p = band(10.0, 0.25, 1.0);
        let bad = GridSpec {
            t_horizon: -1.0,
            ..small_spec()
        };
        assert!(solve_value_function(&linear(), &p, &bad).is_err());
        assert!(Dynamics1D::new(DynamicsKind::Linear, 0.5, -0.5).is_err());
    }
}
