//! Drivers behind the `nscbf` binary: `run`, `verify`, `list-scenarios`,
//! `dump-config`.
//!
//! `run` simulates every initial state of a scenario and writes one
//! trajectory CSV per run plus a plain-text report; its exit code encodes
//! the outcome (0 clean, 2 safety violation, 3 infeasibility fallback used,
//! 4 solver hard failure). `verify` samples the boundary and reports
//! gradient, normal-form, and feasibility diagnostics.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::controllers::{
    sample_boundary_states, search_feasible_params, verify_boundary_feasibility, ParamSearch,
};
use crate::safeset::{check_gradients_fd, check_sufficiently_different};
use crate::scenario::{
    dump_config, load_scenario, ControllerKind, Scenario, ScenarioError, SlidingSpec,
    BUILTIN_NAMES,
};
use crate::sim::{simulate, SimError, SimOutcome, StepStatus};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 2;
pub const EXIT_INFEASIBLE_FALLBACK: i32 = 3;
pub const EXIT_SOLVER_FAILURE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "nscbf", about = "Safety filters for nonsmooth safe sets under switching dynamics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write trajectory files and a report.
    Run(RunArgs),
    /// Check boundary feasibility, gradients, and the normal form.
    Verify(VerifyArgs),
    /// List built-in scenarios.
    ListScenarios,
    /// Print a scenario configuration as TOML.
    DumpConfig(DumpArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ControllerArg {
    Act,
    All,
    Adp,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SlidingArg {
    Chatter,
    Equiv,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Built-in scenario name or path to a TOML config.
    #[arg(long)]
    pub scenario: String,
    #[arg(long, value_enum)]
    pub controller: Option<ControllerArg>,
    /// Class-kappa gain override.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Transition gain override.
    #[arg(long = "M")]
    pub m: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub tf: Option<f64>,
    #[arg(long, value_enum)]
    pub sliding: Option<SlidingArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Constrain every active piece on switching surfaces instead of the
    /// min-guard piece.
    #[arg(long)]
    pub strict_boundary: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub scenario: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub boundary_samples: usize,
    /// Also search the default grids for feasible (alpha, M).
    #[arg(long)]
    pub recommend: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub strict_boundary: bool,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub scenario: String,
}

pub fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Run(args) => run(&args),
        Command::Verify(args) => verify(&args),
        Command::ListScenarios => {
            for name in BUILTIN_NAMES {
                println!("{name}");
            }
            Ok(EXIT_OK)
        }
        Command::DumpConfig(args) => {
            let scenario = load_scenario(&args.scenario)?;
            println!("{}", dump_config(&scenario.config)?);
            Ok(EXIT_OK)
        }
    }
}

fn apply_overrides(scenario: Scenario, args: &RunArgs) -> Result<Scenario, ScenarioError> {
    let mut config = scenario.config;
    if let Some(kind) = args.controller {
        config.controller.kind = match kind {
            ControllerArg::Act => ControllerKind::Act,
            ControllerArg::All => ControllerKind::All,
            ControllerArg::Adp => ControllerKind::Adp,
        };
    }
    if let Some(alpha) = args.alpha {
        config.controller.alpha = alpha;
        config.controller.c_alpha = alpha.max(f64::MIN_POSITIVE);
    }
    if let Some(m) = args.m {
        config.controller.transition_m = m;
    }
    if let Some(dt) = args.dt {
        config.integrator.dt = dt;
    }
    if let Some(tf) = args.tf {
        config.integrator.t_final = tf;
    }
    if let Some(sliding) = args.sliding {
        config.integrator.sliding = match sliding {
            SlidingArg::Chatter => SlidingSpec::Chatter,
            SlidingArg::Equiv => SlidingSpec::Equivalent,
        };
    }
    if args.strict_boundary {
        config.controller.strict_pieces = true;
    }
    Scenario::from_config(config)
}

/// One trajectory row per time sample: `t, x_1..x_n, u_1..u_m, h, alpha, M,
/// qp_status, active_clauses, piece_id`. Gains that do not apply to the
/// controller stay empty.
pub fn write_trajectory_csv(
    path: &Path,
    scenario: &Scenario,
    outcome: &SimOutcome,
) -> Result<(), CliError> {
    let n = scenario.state_dim();
    let m = scenario.input_dim();
    let traj = &outcome.trajectory;
    let mut text = String::new();
    let mut header = String::from("t");
    for i in 1..=n {
        let _ = write!(header, ",x_{i}");
    }
    for i in 1..=m {
        let _ = write!(header, ",u_{i}");
    }
    header.push_str(",h,alpha,M,qp_status,active_clauses,piece_id");
    text.push_str(&header);
    text.push('\n');
    for k in 0..traj.len() {
        let _ = write!(text, "{}", traj.times[k]);
        for i in 0..n {
            let _ = write!(text, ",{}", traj.states[k][i]);
        }
        for i in 0..m {
            let _ = write!(text, ",{}", traj.inputs[k][i]);
        }
        let _ = write!(text, ",{}", traj.h_values[k]);
        match traj.alphas[k] {
            Some(a) => {
                let _ = write!(text, ",{a}");
            }
            None => {
                let _ = write!(text, ",{}", scenario.config.controller.alpha);
            }
        }
        match traj.transition_gains[k] {
            Some(g) => {
                let _ = write!(text, ",{g}");
            }
            None => match scenario.config.controller.kind {
                ControllerKind::All => {
                    let _ = write!(text, ",{}", scenario.config.controller.transition_m);
                }
                _ => text.push(','),
            },
        }
        let status = match traj.statuses[k] {
            StepStatus::Optimal => "optimal",
            StepStatus::InfeasibleFallback => "infeasible_fallback",
        };
        let clauses =
            traj.active_clauses[k].iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";");
        let _ = write!(text, ",{status},{clauses},{}", traj.pieces[k]);
        text.push('\n');
    }
    write_file(path, &text)
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    let to_err = |source| CliError::Io { path: path.display().to_string(), source };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(to_err)?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(to_err)?;
    f.write_all(text.as_bytes()).map_err(to_err)
}

pub fn run(args: &RunArgs) -> Result<i32, CliError> {
    let scenario = apply_overrides(load_scenario(&args.scenario)?, args)?;
    let controller = scenario.controller();
    let cfg = scenario.integrator();

    let mut report = String::new();
    let _ = writeln!(report, "scenario: {}", scenario.config.name);
    let _ = writeln!(
        report,
        "controller: {:?} (alpha = {}, M = {})",
        scenario.config.controller.kind,
        scenario.config.controller.alpha,
        scenario.config.controller.transition_m
    );
    let _ = writeln!(report, "dt = {}, t_final = {}, seed = {}", cfg.dt, cfg.t_final, args.seed);

    let mut any_violation = false;
    let mut any_fallback = false;
    let mut any_failure = false;
    for (k, x0) in scenario.initial_states().iter().enumerate() {
        let outcome = simulate(x0, controller.as_ref(), &scenario.dnf, &scenario.dynamics, &cfg)?;
        let file = args.out.join(format!("{}-run{k:03}.csv", scenario.config.name));
        write_trajectory_csv(&file, &scenario, &outcome)?;
        let r = &outcome.report;
        let _ = writeln!(
            report,
            "run {k}: min_h = {:.6}, first_violation = {}, infeasible_steps = {}, sliding_steps = {}, file = {}",
            r.min_h,
            r.first_violation_time.map_or("none".into(), |t| format!("{t:.4}")),
            r.infeasible_steps,
            outcome.trajectory.sliding.iter().filter(|s| **s).count(),
            file.display()
        );
        if let Some(failure) = &outcome.solver_failure {
            let _ = writeln!(report, "run {k}: solver failure: {failure}");
            any_failure = true;
        }
        if outcome.codim_fallbacks > 0 {
            let _ = writeln!(
                report,
                "run {k}: warning: {} step(s) met more than two pieces; integrated the raw field",
                outcome.codim_fallbacks
            );
        }
        any_violation |= r.violated();
        any_fallback |= r.infeasible_steps > 0;
    }

    let report_path = args.out.join(format!("{}-report.txt", scenario.config.name));
    write_file(&report_path, &report)?;
    print!("{report}");

    Ok(if any_failure {
        EXIT_SOLVER_FAILURE
    } else if any_violation {
        EXIT_VIOLATION
    } else if any_fallback {
        EXIT_INFEASIBLE_FALLBACK
    } else {
        EXIT_OK
    })
}

pub fn verify(args: &VerifyArgs) -> Result<i32, CliError> {
    let scenario = load_scenario(&args.scenario)?;
    let domain = scenario.domain();
    let tol = scenario.tolerances();
    let bounds = scenario.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);

    let mut report = String::new();
    let mut pass = true;
    let _ = writeln!(report, "scenario: {}", scenario.config.name);

    // gradient residuals over sampled states
    let mut worst_grad: f64 = 0.0;
    let mut worst_name = String::new();
    for _ in 0..20 {
        let x = domain.sample(&mut rng);
        for c in scenario.registry.iter() {
            let r = check_gradients_fd(c, &x, 1e-5);
            if r > worst_grad {
                worst_grad = r;
                worst_name = c.name.clone();
            }
        }
    }
    let grad_ok = worst_grad <= 1e-5;
    pass &= grad_ok;
    let _ = writeln!(
        report,
        "gradients: worst residual {worst_grad:.3e} ({worst_name}) -> {}",
        if grad_ok { "pass" } else { "FAIL" }
    );

    // pairwise distinguishability
    let diff = check_sufficiently_different(&scenario.registry, &domain, 2000, args.seed);
    pass &= diff.ok();
    let _ = writeln!(
        report,
        "sufficiently different: {} flagged pair(s) -> {}",
        diff.flagged.len(),
        if diff.ok() { "pass" } else { "FAIL" }
    );

    // normal-form spot check against the expression tree
    let mut worst_gap: f64 = 0.0;
    for _ in 0..1000 {
        let x = domain.sample(&mut rng);
        let tree = scenario.expr.eval(&scenario.registry, &x).expect("valid expr");
        worst_gap = worst_gap.max((tree - scenario.dnf.h(&x)).abs());
    }
    let dnf_ok = worst_gap <= 1e-12;
    pass &= dnf_ok;
    let _ = writeln!(
        report,
        "normal form vs tree: worst gap {worst_gap:.3e} over 1000 states -> {}",
        if dnf_ok { "pass" } else { "FAIL" }
    );

    // boundary feasibility
    let band = 1e-3;
    let samples =
        sample_boundary_states(&scenario.dnf, &domain, args.boundary_samples, band, &mut rng);
    let _ = writeln!(
        report,
        "boundary samples: {} of {} requested (band |h| <= {band})",
        samples.len(),
        args.boundary_samples
    );
    if samples.is_empty() {
        pass = false;
        let _ = writeln!(report, "boundary feasibility: FAIL (no boundary samples found)");
    } else {
        let feas = verify_boundary_feasibility(
            &scenario.dnf,
            &scenario.dynamics,
            &samples,
            &tol,
            &bounds,
            band,
        )
        .map_err(SimError::Control)?;
        pass &= feas.pass();
        let worst = feas.worst.map(|i| format!("{:?}", feas.samples[i].state.as_slice()));
        let _ = writeln!(
            report,
            "boundary feasibility: min margin {:.6} at {} -> {}",
            feas.min_margin,
            worst.unwrap_or_else(|| "n/a".into()),
            if feas.pass() { "pass" } else { "FAIL" }
        );
    }

    if args.recommend {
        let interior: Vec<DVector<f64>> = std::iter::from_fn(|| Some(domain.sample(&mut rng)))
            .filter(|x| scenario.dnf.h(x) >= 0.0)
            .take(50)
            .collect();
        let search = search_feasible_params(
            &scenario.dnf,
            &scenario.dynamics,
            &interior,
            &[1.0, 2.0, 5.0],
            &[1.0, 10.0, 100.0, 1000.0],
            &bounds,
        )
        .map_err(SimError::Control)?;
        match search {
            ParamSearch::Found { alpha, m } => {
                let _ = writeln!(report, "recommended parameters: alpha = {alpha}, M = {m}");
            }
            ParamSearch::NotFound { worst_margin, .. } => {
                let _ = writeln!(
                    report,
                    "recommended parameters: none on the default grids (worst margin {worst_margin:.4})"
                );
            }
        }
    }

    let _ = writeln!(report, "verdict: {}", if pass { "pass" } else { "FAIL" });
    if let Some(out) = &args.out {
        write_file(out, &report)?;
    }
    print!("{report}");
    Ok(if pass { EXIT_OK } else { 1 })
}
