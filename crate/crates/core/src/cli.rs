//! Command-line driver. Exit codes: 0 success, 1 solver failure, 2 usage or
//! configuration error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::adjoint::{lbfgs, polak_ribiere_cg, BaselineOptions, BaselineResult};
use crate::admm::{solve, solve_with_observer, AdmmParams, AdmmRun, StopReason};
use crate::config::RunConfig;
use crate::diagnostics::{write_csv, write_svg_plots, write_trajectory_csv, RunManifest};
use crate::error::Error;
use crate::experiments::burgers::{
    embed_trajectory, l2_distance, lf_explicit_rollout, make_implicit_problem, newton_implicit_rollout, BurgersConfig,
};
use crate::experiments::lorenz::{admm_init_4dvar, make_4dvar_problem, trajectory_rmse, LorenzConfig};
use crate::gradcheck::check_problem;
use crate::lagrangian::{PenaltyVector, ProximalWeights};
use crate::problem::{DualVariables, Trajectory};

/// Largest relative finite-difference error `checkgrad` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "dynadmm", about = "Proximal ADMM for dynamics-constrained optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    max_iter: Option<usize>,
    /// Feasibility tolerance (and stationarity tolerance where it applies).
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Also write objective and constraint-error plots.
    #[arg(long, global = true)]
    svg: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run ADMM on a configured instance.
    Solve { config: PathBuf },
    /// Estimate smoothness constants and emit a penalty certificate.
    Tune { config: PathBuf },
    /// Lorenz-63 4DVar twin experiment.
    Lorenz4dvar {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, value_enum, default_value_t = Baseline::None)]
        baseline: Baseline,
    },
    /// Viscous Burgers equation with the Lax–Friedrichs schemes.
    Burgers {
        #[arg(long, default_value_t = 0.1)]
        dt: f64,
        #[arg(long, value_enum, default_value_t = Scheme::Admm)]
        scheme: Scheme,
    },
    /// Finite-difference checks of every analytic derivative.
    Checkgrad { config: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Baseline {
    Cg,
    Lbfgs,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Scheme {
    Explicit,
    Implicit,
    Admm,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidParameter(_) | Error::UnsupportedShape(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> crate::Result<i32> {
    let config = match &cli.command {
        Command::Solve { config } | Command::Tune { config } | Command::Checkgrad { config } => {
            Some(RunConfig::load(config)?)
        }
        _ => None,
    };
    fs::create_dir_all(&cli.out)?;
    match (&cli.command, config) {
        (Command::Solve { .. }, Some(config)) => cmd_solve(cli, &config),
        (Command::Tune { .. }, Some(config)) => cmd_tune(cli, &config),
        (Command::Checkgrad { .. }, Some(config)) => cmd_checkgrad(cli, &config),
        (
            Command::Lorenz4dvar {
                seed,
                rho,
                eta,
                baseline,
            },
            _,
        ) => cmd_lorenz(cli, *seed, *rho, *eta, *baseline),
        (Command::Burgers { dt, scheme }, _) => cmd_burgers(cli, *dt, *scheme),
        (_, None) => unreachable!("configuration loaded above"),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> crate::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn apply_globals(cli: &Cli, params: &mut AdmmParams) {
    if let Some(n) = cli.max_iter {
        params.max_iterations = n;
    }
    if let Some(t) = cli.tol {
        params.feasibility_tol = t;
        params.kkt_tol = t;
    }
}

/// Writes the iteration log (and plots); returns exit code 1 if the run aborted.
fn emit_run(cli: &Cli, run: &AdmmRun) -> crate::Result<i32> {
    write_csv(&run.log, &cli.out.join("iterations.csv"))?;
    if cli.svg {
        write_svg_plots(&run.log, &cli.out)?;
    }
    let last = run.log.last();
    println!(
        "stop {:?} after {} iterations, objective {:.6e}, constraint error {:.3e}",
        run.stop,
        run.log.len(),
        last.map_or(f64::NAN, |r| r.objective),
        last.map_or(f64::NAN, |r| r.constraint_inf),
    );
    Ok(match &run.error {
        Some(e) => {
            eprintln!("solver failure: {e}");
            1
        }
        None => 0,
    })
}

fn run_summary(run: &AdmmRun) -> serde_json::Value {
    let last = run.log.last();
    json!({
        "stop": run.stop,
        "iterations": run.log.len(),
        "objective": last.map(|r| r.objective),
        "constraint_inf": last.map(|r| r.constraint_inf),
        "kkt_stat": last.map(|r| r.kkt_stat),
        "error": run.error.as_ref().map(|e| e.to_string()),
    })
}

fn cmd_solve(cli: &Cli, config: &RunConfig) -> crate::Result<i32> {
    let mut manifest = RunManifest::start("solve", serde_json::to_value(config).unwrap_or_default(), config.seed);
    let instance = config.build()?;
    let n = instance.problem.n();
    let eta = ProximalWeights::uniform(n + 1, instance.eta)?;
    let (rho, working_box) = match instance.rho {
        Some(r) => (PenaltyVector::uniform(n, r)?, None),
        None => {
            let certificate = config.certify(&instance)?;
            write_json(&cli.out.join("certificate.json"), &certificate)?;
            manifest.certificate = serde_json::to_value(&certificate).ok();
            (certificate.penalties, Some(config.working_box(&instance)))
        }
    };
    let mut params = AdmmParams::new(rho, eta);
    config.apply_to(&mut params);
    apply_globals(cli, &mut params);
    // The certificate only covers iterates inside the box its constants were sampled on.
    let mut outside = 0usize;
    let run = solve_with_observer(&instance.problem, instance.x0.clone(), instance.lambda0.clone(), &params, &mut |s| {
        if working_box.as_ref().is_some_and(|b| !b.contains(&s.x)) {
            outside += 1;
        }
    })?;
    if outside > 0 {
        eprintln!("warning: {outside} iterates left the working box; the penalty certificate does not cover them");
    }
    let code = emit_run(cli, &run)?;
    write_trajectory_csv(run.state.x.blocks(), &cli.out.join("solution.csv"))?;
    let mut summary = run_summary(&run);
    summary["iterations_outside_box"] = json!(working_box.as_ref().map(|_| outside));
    write_json(&cli.out.join("summary.json"), &summary)?;
    manifest.finish();
    manifest.write(&cli.out.join("manifest.json"))?;
    Ok(code)
}

fn cmd_tune(cli: &Cli, config: &RunConfig) -> crate::Result<i32> {
    let mut manifest = RunManifest::start("tune", serde_json::to_value(config).unwrap_or_default(), config.seed);
    let instance = config.build()?;
    let certificate = config.certify(&instance)?;
    write_json(&cli.out.join("certificate.json"), &certificate)?;
    println!("penalties {:?}", certificate.penalties.as_slice());
    println!("condition holds on every row: {}", certificate.condition.passes);
    manifest.certificate = serde_json::to_value(&certificate).ok();
    manifest.finish();
    manifest.write(&cli.out.join("manifest.json"))?;
    Ok(0)
}

fn write_baseline(cli: &Cli, result: &BaselineResult) -> crate::Result<()> {
    let mut text = String::from("iter,objective,gradient_norm\n");
    for (k, (f, g)) in result.trace.objective.iter().zip(&result.trace.gradient_norm).enumerate() {
        text.push_str(&format!("{k},{f:.16e},{g:.16e}\n"));
    }
    fs::write(cli.out.join("baseline_trace.csv"), text)?;
    Ok(())
}

fn cmd_lorenz(cli: &Cli, seed: Option<u64>, rho: Option<f64>, eta: Option<f64>, baseline: Baseline) -> crate::Result<i32> {
    let config = LorenzConfig {
        seed: seed.unwrap_or(LorenzConfig::default().seed),
        ..LorenzConfig::default()
    };
    let (rho, eta) = (rho.unwrap_or(0.3), eta.unwrap_or(10.0));
    let mut params = AdmmParams::uniform(config.steps, rho, eta)?;
    params.max_iterations = 5000;
    apply_globals(cli, &mut params);
    let snapshot = json!({
        "lorenz": config,
        "rho": rho,
        "eta": eta,
        "max_iterations": params.max_iterations,
        "feasibility_tol": params.feasibility_tol,
        "kkt_tol": params.kkt_tol,
        "baseline": baseline,
    });
    let mut manifest = RunManifest::start("lorenz4dvar", snapshot, Some(config.seed));

    let (problem, data) = make_4dvar_problem(&config)?;
    let (x0, lambda0) = admm_init_4dvar(&problem, &data)?;
    let run = solve(&problem, x0, lambda0, &params)?;
    let code = emit_run(cli, &run)?;
    write_trajectory_csv(run.state.x.blocks(), &cli.out.join("trajectory.csv"))?;
    write_trajectory_csv(data.truth.blocks(), &cli.out.join("truth.csv"))?;
    let rmse = trajectory_rmse(&run.state.x, &data.truth);
    println!("ADMM truth RMSE {rmse:.6}");

    let mut summary = run_summary(&run);
    summary["rmse"] = json!(rmse);
    if baseline != Baseline::None {
        let opts = BaselineOptions::default();
        let background = &data.observations[0];
        let result = match baseline {
            Baseline::Cg => polak_ribiere_cg(&problem, background, &opts)?,
            _ => lbfgs(&problem, background, &opts)?,
        };
        let trajectory = problem.feasibility_rollout(&result.v0)?;
        let baseline_rmse = trajectory_rmse(&trajectory, &data.truth);
        println!("{baseline:?} baseline truth RMSE {baseline_rmse:.6} ({:?})", result.status);
        write_baseline(cli, &result)?;
        write_trajectory_csv(trajectory.blocks(), &cli.out.join("baseline_trajectory.csv"))?;
        summary["baseline"] = json!({
            "kind": baseline,
            "status": result.status,
            "objective": result.value,
            "iterations": result.trace.objective.len().saturating_sub(1),
            "rmse": baseline_rmse,
        });
    }
    write_json(&cli.out.join("summary.json"), &summary)?;
    manifest.finish();
    manifest.write(&cli.out.join("manifest.json"))?;
    Ok(code)
}

fn cmd_burgers(cli: &Cli, dt: f64, scheme: Scheme) -> crate::Result<i32> {
    let config = BurgersConfig::with_dt(dt);
    config.validate()?;
    let snapshot = json!({
        "burgers": config,
        "scheme": scheme,
        "max_iterations": cli.max_iter,
        "tol": cli.tol,
    });
    let mut manifest = RunManifest::start("burgers", snapshot, None);
    let initial = config.initial_profile();
    let mut code = 0;
    let mut summary = json!({ "scheme": scheme, "dt": dt, "steps": config.steps() });
    let field: Trajectory = match scheme {
        Scheme::Explicit => Trajectory::new(lf_explicit_rollout(&config, &initial)?)?,
        Scheme::Implicit => newton_implicit_rollout(&config, &initial)?,
        Scheme::Admm => {
            let problem = make_implicit_problem(&config, &initial)?;
            let (n, d) = (problem.n(), problem.d());
            let mut params = AdmmParams::uniform(n, 0.1, 2.0)?;
            params.max_iterations = 50_000;
            params.feasibility_tol = 1e-6;
            // Stop on feasibility alone.
            params.kkt_tol = f64::INFINITY;
            if let Some(n) = cli.max_iter {
                params.max_iterations = n;
            }
            if let Some(t) = cli.tol {
                params.feasibility_tol = t;
            }
            let run = solve(&problem, Trajectory::zeros(n + 1, d), DualVariables::zeros(n, d), &params)?;
            code = emit_run(cli, &run)?;
            let full = embed_trajectory(&run.state.x)?;
            let oracle = newton_implicit_rollout(&config, &initial)?;
            let gap = full.max_abs_diff(&oracle);
            println!("gap to the Newton solution {gap:.3e}");
            summary = json!({
                "scheme": scheme,
                "dt": dt,
                "steps": n,
                "run": run_summary(&run),
                "reached_tolerance": run.stop != StopReason::MaxIterations && run.error.is_none(),
                "newton_gap_inf": gap,
            });
            full
        }
    };
    let last = &field[field.len() - 1];
    if scheme != Scheme::Implicit {
        let reference = newton_implicit_rollout(&config, &initial)?;
        summary["l2_to_implicit_at_final_time"] = json!(l2_distance(&config, last, &reference[reference.len() - 1]));
    }
    write_trajectory_csv(field.blocks(), &cli.out.join("field.csv"))?;
    write_json(&cli.out.join("summary.json"), &summary)?;
    manifest.finish();
    manifest.write(&cli.out.join("manifest.json"))?;
    Ok(code)
}

fn cmd_checkgrad(cli: &Cli, config: &RunConfig) -> crate::Result<i32> {
    let instance = config.build()?;
    let n = instance.problem.n();
    let rho = PenaltyVector::uniform(n, instance.rho.unwrap_or(1.0))?;
    let report = check_problem(&instance.problem, &instance.x0, &rho, 10, 0.1, config.seed.unwrap_or(0))?;
    write_json(&cli.out.join("gradcheck.json"), &report)?;
    println!(
        "relative errors: adjoint {:.2e}, block {:.2e}, jacobian {:.2e}, terms {:.2e}",
        report.adjoint, report.block, report.jacobian_transpose, report.term
    );
    if report.worst() <= GRADCHECK_TOLERANCE {
        Ok(0)
    } else {
        eprintln!("finite-difference check failed (worst {:.2e})", report.worst());
        Ok(1)
    }
}
