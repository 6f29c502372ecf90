//! Scenario-driven command-line entry point.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cbf_stl::control::{write_trace_csv, RunSummary};
use cbf_stl::formula::{normalize_until, parse_formula};
use cbf_stl::operator::{layer_always, NestedOperator};
use cbf_stl::oracle::{satisfied, SampledSignal, Verdict};
use cbf_stl::reachability::{eval_value, solve_cached, Dynamics1D, GridSpec};
use cbf_stl::scenario::{
    parse_scenario, predicate_map, preset, state_range, ScenarioConfig, PRESET_NAMES,
};
use cbf_stl::operator::enumerate_repetition_bound;
use cbf_stl::taskgraph::{
    build_logic_tree, build_param_layout, build_stl_tree, completion_horizon,
    fold_sigma_with_order, instantiate_leaf,
};

#[derive(Parser)]
#[command(name = "cbf-stl", about = "STL synthesis and verification scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Built-in scenario name.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Path to a TOML scenario file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Value-function cache directory.
    #[arg(long)]
    vf_cache: Option<PathBuf>,
    /// Worker threads for value-function solves.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario, verify the trace, and write artifacts.
    Run(ScenarioArgs),
    /// Pre-solve and cache the scenario's value functions.
    SolveVf(ScenarioArgs),
    /// Evaluate the robustness of a recorded trace against a formula.
    Robustness {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Trace CSV (columns t,x,... as written by `run`).
        #[arg(long)]
        trace: PathBuf,
        /// Evaluation time.
        #[arg(long, default_value_t = 0.0)]
        time: f64,
    },
    /// Dump trees, layout matrices, and operator stacks for a scenario.
    Explain(ScenarioArgs),
}

fn load_scenario(args: &ScenarioArgs) -> Result<ScenarioConfig> {
    let mut cfg = match (&args.preset, &args.config) {
        (Some(name), None) => preset(name)?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            parse_scenario(&text)?
        }
        _ => bail!(
            "exactly one of --preset or --config is required (presets: {})",
            PRESET_NAMES.join(", ")
        ),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn setup_jobs(jobs: usize) {
    if jobs > 1 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
}

fn write_summary(path: &Path, cfg: &ScenarioConfig, s: &RunSummary, verdict: Verdict, rho: f64) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "scenario: {}", cfg.name)?;
    writeln!(f, "seed: {}", cfg.seed)?;
    writeln!(f, "verdict: {verdict}")?;
    writeln!(f, "robustness: {rho}")?;
    writeln!(f, "completed: {}", s.completed)?;
    writeln!(f, "end_time: {}", s.end_time)?;
    writeln!(f, "max_slack: {}", s.max_slack)?;
    writeln!(f, "integral_slack: {}", s.integral_slack)?;
    writeln!(f, "integral_sigma: {}", s.integral_sigma)?;
    writeln!(f, "tau_excursion: {}", s.tau_excursion)?;
    if let Some(v) = &s.violation {
        writeln!(f, "violation: {v}")?;
    }
    for inst in &s.instances {
        let members: Vec<String> = inst
            .members
            .iter()
            .map(|m| {
                format!(
                    "leaf{}{}{}",
                    m.leaf,
                    if m.discharged { "+" } else { "-" },
                    if m.forced { "(forced)" } else { "" }
                )
            })
            .collect();
        writeln!(
            f,
            "instance: group={} n={} t={:.3} minted={} members={}",
            inst.group,
            inst.instance,
            inst.time,
            inst.minted,
            members.join(",")
        )?;
    }
    Ok(())
}

fn cmd_run(args: &ScenarioArgs) -> Result<ExitCode> {
    setup_jobs(args.jobs);
    let cfg = load_scenario(args)?;
    let outcome = cbf_stl::scenario::run_scenario(&cfg, args.vf_cache.as_deref())?;
    fs::create_dir_all(&args.out)?;

    let mut trace_file = fs::File::create(args.out.join("trace.csv"))?;
    write_trace_csv(&mut trace_file, &outcome.result.trace)?;

    // Plot data: state with band overlays, and parameters.
    let preds = predicate_map(&cfg)?;
    let mut f = fs::File::create(args.out.join("plot_state.csv"))?;
    let mut header = String::from("t,x");
    for label in preds.keys() {
        header.push_str(&format!(",{label}_lo,{label}_hi"));
    }
    writeln!(f, "{header}")?;
    for r in &outcome.result.trace {
        let mut line = format!("{},{}", r.t, r.x);
        for p in preds.values() {
            line.push_str(&format!(",{},{}", p.x0 - p.r, p.x0 + p.r));
        }
        writeln!(f, "{line}")?;
    }
    let mut f = fs::File::create(args.out.join("plot_params.csv"))?;
    let nl = outcome.pipeline.layout.num_independent();
    let mut header = String::from("t");
    for i in 0..nl {
        header.push_str(&format!(",tau_hat_{}", i + 1));
    }
    writeln!(f, "{header}")?;
    for r in &outcome.result.trace {
        let mut line = format!("{}", r.t);
        for v in &r.tau_hat {
            line.push_str(&format!(",{v}"));
        }
        writeln!(f, "{line}")?;
    }

    write_summary(
        &args.out.join("summary.txt"),
        &cfg,
        &outcome.result.summary,
        outcome.verdict,
        outcome.robustness,
    )?;

    println!(
        "{}: verdict {} (robustness {:.4}), end t = {:.2}, artifacts in {}",
        cfg.name,
        outcome.verdict,
        outcome.robustness,
        outcome.result.summary.end_time,
        args.out.display()
    );
    if let Some(v) = &outcome.result.summary.violation {
        eprintln!("warning: {v}");
    }
    Ok(if outcome.robustness >= -cfg.controller.eps_disc {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_solve_vf(args: &ScenarioArgs) -> Result<ExitCode> {
    setup_jobs(args.jobs);
    let cfg = load_scenario(args)?;
    let preds = predicate_map(&cfg)?;
    let dynamics = Dynamics1D::new(cfg.dynamics.kind, cfg.dynamics.u_min, cfg.dynamics.u_max)?;
    let (x_min, x_max) = state_range(&cfg);
    let spec = GridSpec::default_for(x_min, x_max, cfg.grid.vf_horizon);
    let cache = args.vf_cache.as_deref();

    use rayon::prelude::*;
    let solved: Vec<_> = preds
        .values()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|p| solve_cached(&dynamics, p, &spec, cache).map(|v| (p.label.clone(), v)))
        .collect::<std::result::Result<_, _>>()?;
    for (label, v) in &solved {
        println!(
            "solved V for `{label}`: {} x {} grid, {} step-limited nodes",
            v.spec.n_x, v.spec.n_t, v.step_limited_nodes
        );
    }

    // Surface emission: the raw value function and a plateau-extended copy
    // with window (1, 3].
    if cfg.name == "fig1" {
        fs::create_dir_all(&args.out)?;
        let (label, v) = &solved[0];
        let op = NestedOperator::from_layer(layer_always(1.0, 3.0)?);
        let vals: Vec<f64> = Vec::new();

        let mut fv = fs::File::create(args.out.join("vf_surface.csv"))?;
        let mut fo = fs::File::create(args.out.join("operator_surface.csv"))?;
        writeln!(fv, "x,t,v")?;
        writeln!(fo, "x,t,v")?;
        let n_x = v.spec.n_x;
        for i in (0..n_x).step_by(4) {
            let x = v.spec.x_min + (v.spec.x_max - v.spec.x_min) * i as f64 / (n_x - 1) as f64;
            let mut t = -v.spec.t_horizon;
            while t <= 0.0 + 1e-9 {
                writeln!(fv, "{x},{t},{}", eval_value(v, x, t.min(0.0))?)?;
                t += 0.1;
            }
            // The operator surface lives on forward time: shifted copy for
            // t <= 1, plateau h(x) on (1, 3].
            let mut t = 0.0;
            while t <= 3.0 + 1e-9 {
                writeln!(fo, "{x},{t},{}", op.operator_value(v, x, t, &vals)?)?;
                t += 0.1;
            }
        }
        println!(
            "fig1 surfaces for `{label}` written to {}",
            args.out.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_robustness(args: &ScenarioArgs, trace: &Path, time: f64) -> Result<ExitCode> {
    let cfg = load_scenario(args)?;
    let preds = predicate_map(&cfg)?;
    let f = parse_formula(&cfg.formula, &preds)?;
    let text = fs::read_to_string(trace)
        .with_context(|| format!("reading {}", trace.display()))?;
    let (times, states) = cbf_stl::control::read_trace_csv(&text)?;
    let sig = SampledSignal::new(times, states)?;
    let (verdict, rho) = satisfied(&f, &preds, &sig, time, cfg.controller.eps_disc)?;
    println!("robustness at t = {time}: {rho} ({verdict})");
    Ok(if rho >= -cfg.controller.eps_disc {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_explain(args: &ScenarioArgs) -> Result<ExitCode> {
    let cfg = load_scenario(args)?;
    let preds = predicate_map(&cfg)?;
    let f = parse_formula(&cfg.formula, &preds)?;
    let nf = normalize_until(&f);
    println!("formula: {f}");
    println!("normalized: {}", nf.root);
    println!("horizon: {}", nf.horizon());

    let stl_tree = build_stl_tree(&nf);
    println!("\nSTL tree (DOT):\n{}", stl_tree.to_dot("stl"));

    let lt = build_logic_tree(&nf);
    println!("logic tree (DOT):\n{}", lt.to_dot("logic"));
    for (k, leaf) in lt.leaves.iter().enumerate() {
        let op = instantiate_leaf(leaf);
        println!("leaf {k} (`{}`):\n{}", leaf.label, op.describe());
        for l in 1..leaf.layers.len() {
            if leaf.layers[l].kind.is_point() && leaf.layers[l - 1].kind.is_window() {
                if let Some(j) = enumerate_repetition_bound(
                    leaf.layers[l - 1].t_lo,
                    leaf.layers[l - 1].t_hi,
                    leaf.layers[l].t_lo,
                    1.0,
                    0.0,
                ) {
                    println!("  repetition bound at layer {l} (tau = 0): J = {j}");
                }
            }
        }
    }

    let layout = build_param_layout(&lt)?;
    println!("parameter layout:\n{}", layout.describe());

    let (sigma, order) = fold_sigma_with_order(&lt);
    println!("sigma: {}", sigma.shape());
    println!("fold order: {order:?}");
    println!("completion horizon: {}", completion_horizon(&lt));
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::SolveVf(args) => cmd_solve_vf(args),
        Command::Robustness {
            scenario,
            trace,
            time,
        } => cmd_robustness(scenario, trace, *time),
        Command::Explain(args) => cmd_explain(args),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
