//! Scenario configuration: TOML schema, validation, built-in presets, and
//! the run orchestration shared by the CLI and the test suite.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{
    build_pipeline, simulate, ControllerConfig, Pipeline, SimOptions, SimResult, URef,
};
use crate::error::{Error, Result};
use crate::formula::{
    normalize_until, parse_formula, BandPredicate, Formula, NormalizedFormula, PredicateMap,
};
use crate::oracle::{satisfied, SampledSignal, Verdict};
use crate::reachability::{Dynamics1D, DynamicsKind};

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredicateConfig {
    pub c: f64,
    pub r: f64,
    pub x0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    #[serde(flatten)]
    pub kind: DynamicsKind,
    #[serde(default = "default_u_min")]
    pub u_min: f64,
    #[serde(default = "default_u_max")]
    pub u_max: f64,
}

fn default_u_min() -> f64 {
    -0.5
}
fn default_u_max() -> f64 {
    0.5
}

/// Value-function grid controls. The state range defaults to the predicate
/// bands padded by `x_pad`, widened to include the initial state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub x_min: Option<f64>,
    pub x_max: Option<f64>,
    pub x_pad: f64,
    /// Time extent of the value-function grid (look-ahead horizon).
    pub vf_horizon: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            x_min: None,
            x_max: None,
            x_pad: 1.25,
            vf_horizon: 40.0,
        }
    }
}

/// One simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub dynamics: DynamicsConfig,
    pub predicates: BTreeMap<String, PredicateConfig>,
    pub formula: String,
    pub x0: f64,
    /// Initial independent parameters; defaults to a coverage-friendly
    /// point (repeated-layer slots at their lower bound, others mid-box).
    #[serde(default)]
    pub tau0: Option<Vec<f64>>,
    /// Parameter columns whose ω reference holds the scheduled initial value
    /// instead of decaying toward the lower bound.
    #[serde(default)]
    pub anchor_slots: Vec<usize>,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub u_ref: URef,
    #[serde(default)]
    pub grid: GridConfig,
    /// Minimum recorded signal extent; defaults to the formula horizon.
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

/// Parse a TOML scenario and validate everything checkable without solving.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    validate_scenario(&cfg)?;
    Ok(cfg)
}

/// Static validation: predicates well formed, formula parses against them,
/// horizon covers the formula, controller parameters sane.
pub fn validate_scenario(cfg: &ScenarioConfig) -> Result<()> {
    let preds = predicate_map(cfg)?;
    let f = parse_formula(&cfg.formula, &preds)?;
    let nf = normalize_until(&f);
    if let Some(h) = cfg.horizon {
        if h < nf.horizon() {
            return Err(Error::Config(format!(
                "horizon {h} is below the formula horizon {}",
                nf.horizon()
            )));
        }
    }
    let c = &cfg.controller;
    if !(c.dt > 0.0) || !(c.delta > 0.0 && c.delta < 1.0) || !(c.slack_weight > 0.0) {
        return Err(Error::Config(
            "controller requires dt > 0, delta in (0,1), slack_weight > 0".into(),
        ));
    }
    if !(cfg.dynamics.u_min < cfg.dynamics.u_max) {
        return Err(Error::Config("input bounds must satisfy u_min < u_max".into()));
    }
    Ok(())
}

/// Predicate declarations as the parser's lookup table.
pub fn predicate_map(cfg: &ScenarioConfig) -> Result<PredicateMap> {
    let mut m = PredicateMap::new();
    for (label, p) in &cfg.predicates {
        m.insert(label.clone(), BandPredicate::new(label.clone(), p.c, p.r, p.x0)?);
    }
    Ok(m)
}

/// State range of the value-function grid for this scenario.
pub fn state_range(cfg: &ScenarioConfig) -> (f64, f64) {
    let mut lo = cfg.x0;
    let mut hi = cfg.x0;
    for p in cfg.predicates.values() {
        lo = lo.min(p.x0 - p.r);
        hi = hi.max(p.x0 + p.r);
    }
    (
        cfg.grid.x_min.unwrap_or(lo - cfg.grid.x_pad),
        cfg.grid.x_max.unwrap_or(hi + cfg.grid.x_pad),
    )
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

/// Everything produced by one scenario run.
pub struct ScenarioOutcome {
    pub pipeline: Pipeline,
    pub formula: Formula,
    pub normalized: NormalizedFormula,
    pub result: SimResult,
    pub robustness: f64,
    pub verdict: Verdict,
}

/// Compile the scenario into a pipeline (value functions included).
pub fn compile_scenario(cfg: &ScenarioConfig, cache: Option<&Path>) -> Result<Pipeline> {
    validate_scenario(cfg)?;
    let preds = predicate_map(cfg)?;
    let f = parse_formula(&cfg.formula, &preds)?;
    let nf = normalize_until(&f);
    let dynamics = Dynamics1D::new(cfg.dynamics.kind, cfg.dynamics.u_min, cfg.dynamics.u_max)?;
    build_pipeline(
        &nf,
        &preds,
        dynamics,
        state_range(cfg),
        cfg.grid.vf_horizon,
        cache,
    )
}

/// Run the scenario end to end: synthesize the trace and verify it with the
/// independent robustness monitor.
pub fn run_scenario(cfg: &ScenarioConfig, cache: Option<&Path>) -> Result<ScenarioOutcome> {
    let pipeline = compile_scenario(cfg, cache)?;
    let preds = predicate_map(cfg)?;
    let formula = parse_formula(&cfg.formula, &preds)?;
    let normalized = normalize_until(&formula);
    let min_time = cfg
        .horizon
        .unwrap_or_else(|| normalized.horizon())
        + 2.0 * cfg.controller.dt;
    if let Some(t0) = &cfg.tau0 {
        let nl = pipeline.layout.num_independent();
        if t0.len() != nl {
            return Err(Error::Config(format!(
                "tau0 has {} entries, formula has {nl} independent parameters",
                t0.len()
            )));
        }
        for (i, &v) in t0.iter().enumerate() {
            if v < pipeline.layout.lb[i] || v > pipeline.layout.ub[i] {
                return Err(Error::ParamOutOfBounds {
                    slot: i,
                    value: v,
                    lo: pipeline.layout.lb[i],
                    hi: pipeline.layout.ub[i],
                });
            }
        }
    }
    let opt = SimOptions {
        x0: cfg.x0,
        tau0: cfg.tau0.clone(),
        u_ref: cfg.u_ref,
        cfg: cfg.controller,
        min_time,
        anchor_slots: cfg.anchor_slots.clone(),
    };
    let result = simulate(&pipeline, &opt)?;
    let sig = SampledSignal::new(
        result.trace.iter().map(|r| r.t).collect(),
        result.trace.iter().map(|r| r.x).collect(),
    )?;
    // An aborted run can leave a signal shorter than the formula horizon;
    // report it as unsatisfied rather than failing, so diagnostics land.
    let (verdict, robustness) = if sig.end() >= normalized.horizon() {
        satisfied(&formula, &preds, &sig, 0.0, cfg.controller.eps_disc)?
    } else {
        (Verdict::Unsat, f64::NEG_INFINITY)
    };
    Ok(ScenarioOutcome {
        pipeline,
        formula,
        normalized,
        result,
        robustness,
        verdict,
    })
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// Names of all built-in presets.
pub const PRESET_NAMES: &[&str] = &[
    "nonaffine-case1",
    "nonaffine-case2",
    "nonaffine-case2-plus",
    "nonaffine-case2-minus",
    "nonaffine-case2-sin",
    "affine-case1",
    "affine-case2",
    "affine-case2-alt",
    "linear",
    "fig1",
];

fn band(c: f64, r: f64, x0: f64) -> PredicateConfig {
    PredicateConfig { c, r, x0 }
}

fn nonaffine() -> DynamicsConfig {
    DynamicsConfig {
        kind: DynamicsKind::NonAffine { a: 8.0, b: 0.5 },
        u_min: -0.5,
        u_max: 0.5,
    }
}

fn affine() -> DynamicsConfig {
    DynamicsConfig {
        kind: DynamicsKind::Affine,
        u_min: -0.5,
        u_max: 0.5,
    }
}

fn linear() -> DynamicsConfig {
    DynamicsConfig {
        kind: DynamicsKind::Linear,
        u_min: -0.5,
        u_max: 0.5,
    }
}

fn affine_family_predicates() -> BTreeMap<String, PredicateConfig> {
    let mut m = BTreeMap::new();
    m.insert("mu1".into(), band(10.0, 0.25, 1.0));
    m.insert("mu2".into(), band(10.0, 0.25, 0.0));
    m.insert("mu3".into(), band(10.0, 0.2, -0.75));
    m
}

/// Built-in scenarios for the simulation studies.
pub fn preset(name: &str) -> Result<ScenarioConfig> {
    let cfg = match name {
        "nonaffine-case1" => {
            let mut predicates = BTreeMap::new();
            predicates.insert("mu1".into(), band(10.0, 0.25, 1.0));
            predicates.insert("mu2".into(), band(10.0, 0.25, 1.75));
            ScenarioConfig {
                name: name.into(),
                dynamics: nonaffine(),
                predicates,
                formula: "G[0,25] F[3,4] (mu1 U[1,2] (F[1,2] mu2))".into(),
                x0: 1.0,
                tau0: None,
                anchor_slots: vec![],
                controller: ControllerConfig::default(),
                u_ref: URef::Zero,
                grid: GridConfig::default(),
                horizon: None,
                seed: 0,
            }
        }
        "nonaffine-case2" | "nonaffine-case2-plus" | "nonaffine-case2-minus"
        | "nonaffine-case2-sin" => {
            let mut predicates = BTreeMap::new();
            predicates.insert("mu1".into(), band(10.0, 0.25, 1.0));
            predicates.insert("mu2".into(), band(10.0, 0.25, 1.75));
            predicates.insert("mu3".into(), band(10.0, 0.2, 1.5));
            let u_ref = match name {
                "nonaffine-case2-minus" => URef::Const { value: -1.0 },
                "nonaffine-case2-sin" => URef::Sin {
                    amplitude: 1.0,
                    frequency: 0.5,
                },
                _ => URef::Const { value: 1.0 },
            };
            ScenarioConfig {
                name: name.into(),
                dynamics: nonaffine(),
                predicates,
                formula: "G[0,25] F[3,4] (mu1 U[1,2] (F[1,2] (mu2 | G[0,1] mu3)))".into(),
                x0: 1.0,
                tau0: None,
                anchor_slots: vec![],
                // A saturated positive reference rides the reachability
                // boundary far above the bands before the pre-window
                // constraint turns it around: solve the value functions on a
                // grid wide enough to see the whole excursion.
                controller: ControllerConfig::default(),
                u_ref,
                grid: GridConfig {
                    x_max: Some(30.0),
                    ..GridConfig::default()
                },
                horizon: None,
                seed: 0,
            }
        }
        "affine-case1" => ScenarioConfig {
            name: name.into(),
            dynamics: affine(),
            predicates: affine_family_predicates(),
            formula: "(G[0,25] F[3,4] (mu1 U[1,2] (F[1,2] mu2))) & (F[10,30] G[0,1] mu3)"
                .into(),
            x0: 1.0,
            // Schedule the one-shot mu3 hold after the repeated block's last
            // instance and keep its reference there; a stronger reference
            // pull keeps the repeated windows dense enough to clear the tail.
            tau0: Some(vec![0.0, 0.0, 0.0, 19.0]),
            anchor_slots: vec![3],
            controller: ControllerConfig {
                k_omega: 1.0,
                ..ControllerConfig::default()
            },
            u_ref: URef::Zero,
            grid: GridConfig::default(),
            horizon: None,
            seed: 0,
        },
        "affine-case2" | "affine-case2-alt" => ScenarioConfig {
            name: name.into(),
            dynamics: affine(),
            predicates: affine_family_predicates(),
            formula: "G[0,100] F[1,3] ((G[0,25] F[3,4] (mu1 U[1,2] (F[1,2] mu2))) \
                      & (F[10,30] G[0,1] mu3))"
                .into(),
            x0: if name == "affine-case2-alt" { -0.5 } else { 1.0 },
            // As in `affine-case1`: within each repetition of the block, put
            // the mu3 hold after the inner repeated windows and keep its
            // reference there.
            tau0: Some(vec![0.0, 0.0, 0.0, 0.0, 19.0]),
            anchor_slots: vec![4],
            controller: ControllerConfig {
                k_omega: 1.0,
                ..ControllerConfig::default()
            },
            u_ref: URef::Zero,
            grid: GridConfig::default(),
            horizon: None,
            seed: 0,
        },
        "linear" => ScenarioConfig {
            name: name.into(),
            dynamics: linear(),
            predicates: affine_family_predicates(),
            formula: "(G[0,15] F[3,4] (mu1 U[1,2] (F[1,2] mu2))) & (F[10,30] G[0,1] mu3)"
                .into(),
            x0: 1.0,
            // Schedule the one-shot mu3 hold after the repeated block's last
            // obligation and keep its reference there.
            tau0: Some(vec![0.0, 0.0, 0.0, 14.0]),
            anchor_slots: vec![3],
            controller: ControllerConfig::default(),
            u_ref: URef::Zero,
            grid: GridConfig::default(),
            horizon: None,
            seed: 0,
        },
        "fig1" => {
            let mut predicates = BTreeMap::new();
            predicates.insert("mu1".into(), band(10.0, 0.25, 1.0));
            ScenarioConfig {
                name: name.into(),
                dynamics: nonaffine(),
                predicates,
                formula: "G[1,3] mu1".into(),
                x0: 1.0,
                tau0: None,
                anchor_slots: vec![],
                controller: ControllerConfig::default(),
                u_ref: URef::Zero,
                grid: GridConfig {
                    vf_horizon: 6.0,
                    ..GridConfig::default()
                },
                horizon: None,
                seed: 0,
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (available: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    validate_scenario(&cfg)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_validate() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            assert_eq!(&cfg.name, name);
        }
    }

    #[test]
    fn toml_round_trip() {
        let cfg = preset("linear").unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back = parse_scenario(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn custom_config_parses() {
        let text = r#"
            name = "hold"
            formula = "G[0,2] p"
            x0 = 1.0

            [dynamics]
            family = "Linear"

            [predicates.p]
            c = 10.0
            r = 0.25
            x0 = 1.0

            [u_ref]
            kind = "sin"
            amplitude = 1.0
            frequency = 0.5
        "#;
        let cfg = parse_scenario(text).unwrap();
        assert_eq!(
            cfg.u_ref,
            URef::Sin {
                amplitude: 1.0,
                frequency: 0.5
            }
        );
        assert_eq!(cfg.controller.dt, 0.01);
    }

    #[test]
    fn bad_horizon_rejected() {
        let mut cfg = preset("linear").unwrap();
        cfg.horizon = Some(1.0);
        assert!(validate_scenario(&cfg).is_err());
    }

    #[test]
    fn undeclared_label_rejected() {
        let mut cfg = preset("linear").unwrap();
        cfg.formula = "G[0,1] nosuch".into();
        assert!(validate_scenario(&cfg).is_err());
    }
}
