//! The four subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use hjb_core::io::{write_json_file, write_paths_csv, write_policy_field, write_value_function};
use hjb_core::verification::{action_identity_check, bellman_consistency, compare_value};
use hjb_core::{
    estimate_action, estimate_moments, extract_policy, solve, validate_problem, MomentReport,
    PathEnsemble, PolicyField, Problem, RiccatiSolution, SimOptions, ValidationReport,
    ValueFunction,
};
use serde::Serialize;
use serde_json::json;

use crate::{load_problem, CommandKind, Failure, Outcome, RunConfig};

/// Monte Carlo checks accept gaps up to this many standard errors ...
const MC_SIGMAS: f64 = 3.0;
/// ... plus this allowance for time and space discretization.
const DISCRETIZATION_TOLERANCE: f64 = 2e-2;
/// Interior error allowed against the closed-form linear-quadratic solution.
const ORACLE_TOLERANCE: f64 = 1e-2;
/// Split points of the Bellman checks as fractions of the horizon.
const BELLMAN_FRACTIONS: [f64; 3] = [0.25, 0.5, 0.75];

/// Runs `cfg.command`, filling in resolved defaults and the loaded problem.
pub(crate) fn dispatch(cfg: &mut RunConfig, problem: &mut Option<Problem>) -> Result<Outcome, Failure> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Failure::Io {
        path: cfg.output_dir.display().to_string(),
        message: e.to_string(),
    })?;
    let p = problem.insert(load_problem(&cfg.problem_path, &cfg.overrides)?);
    let report = validate_problem(p);
    if !report.is_valid() {
        return Err(Failure::Invalid(report));
    }
    match cfg.command {
        CommandKind::Solve => run_solve(cfg, p),
        CommandKind::Simulate => run_simulate(cfg, p),
        CommandKind::Moments => run_moments(cfg, p),
        CommandKind::Verify => run_verify(cfg, p),
    }
}

fn output_failure(path: &Path) -> impl Fn(hjb_core::Error) -> Failure + '_ {
    move |e| match e {
        hjb_core::Error::Io(_) | hjb_core::Error::Json(_) => Failure::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        },
        other => other.into(),
    }
}

fn write_json<T: Serialize>(cfg: &RunConfig, name: &str, value: &T) -> Result<(), Failure> {
    let path = cfg.output_dir.join(name);
    write_json_file(&path, value).map_err(output_failure(&path))
}

fn invalid(path: &str, message: String) -> Failure {
    Failure::Invalid(ValidationReport {
        violations: vec![hjb_core::problem::Violation {
            path: path.into(),
            message,
        }],
    })
}

/// `--x0`, or the grid centre when absent; recorded back into the config.
fn resolve_x0(cfg: &mut RunConfig, p: &Problem) -> Result<Vec<f64>, Failure> {
    let x0 = cfg.x0.clone().unwrap_or_else(|| {
        p.grid
            .lo
            .iter()
            .zip(&p.grid.hi)
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect()
    });
    if x0.len() != p.dim {
        return Err(invalid("x0", format!("has {} entries, problem dimension is {}", x0.len(), p.dim)));
    }
    if !p.grid.contains(&x0) {
        return Err(invalid("x0", format!("{x0:?} lies outside the grid")));
    }
    cfg.x0 = Some(x0.clone());
    Ok(x0)
}

fn solve_with_policy(p: &Problem) -> Result<(ValueFunction, PolicyField, hjb_core::SolveReport), Failure> {
    let (vf, report) = solve(p)?;
    let policy = extract_policy(p, &vf)?;
    Ok((vf, policy, report))
}

fn sim_options(cfg: &RunConfig, keep_paths: bool) -> SimOptions {
    SimOptions {
        workers: cfg.workers,
        keep_paths,
    }
}

fn run_solve(cfg: &mut RunConfig, p: &Problem) -> Result<Outcome, Failure> {
    let (vf, policy, report) = solve_with_policy(p)?;
    let out = &cfg.output_dir;
    let (json, csv) = (out.join("value.json"), out.join("value.csv"));
    write_value_function(&vf, &json, &csv).map_err(output_failure(&csv))?;
    let (json, csv) = (out.join("policy.json"), out.join("policy.csv"));
    write_policy_field(&policy, &json, &csv).map_err(output_failure(&csv))?;
    write_json(cfg, "solve_report.json", &report)?;
    println!(
        "solved {} slices x {} points with {} sub-steps per slice (dtau_sub {:.3e}, bound {:.3e})",
        vf.values.len(),
        vf.grid.len(),
        report.n_substeps_per_slice,
        report.cfl_dtau_used,
        report.cfl_dtau_bound
    );
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct SimulationSummary<'a> {
    x0: &'a [f64],
    tau_i: f64,
    tau_f: f64,
    /// Solver cost-to-go at `(τ_i, x0)`.
    j_initial: f64,
    #[serde(flatten)]
    ensemble: &'a PathEnsemble,
}

fn run_simulate(cfg: &mut RunConfig, p: &Problem) -> Result<Outcome, Failure> {
    let x0 = resolve_x0(cfg, p)?;
    let (vf, policy, _) = solve_with_policy(p)?;
    let ens = estimate_action(p, &x0, &policy, cfg.n_paths, cfg.seed, sim_options(cfg, cfg.dump_paths))?;
    let summary = SimulationSummary {
        x0: &x0,
        tau_i: p.horizon.tau_i,
        tau_f: p.horizon.tau_f,
        j_initial: vf.interpolate(p.horizon.tau_i, &x0)?,
        ensemble: &ens,
    };
    write_json(cfg, "ensemble.json", &summary)?;
    if cfg.dump_paths {
        let path = cfg.output_dir.join("paths.csv");
        let io_failure = |e: std::io::Error| Failure::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut w = BufWriter::new(File::create(&path).map_err(io_failure)?);
        write_paths_csv(&mut w, &ens.paths, p.dim).map_err(output_failure(&path))?;
        w.flush().map_err(io_failure)?;
    }
    println!(
        "{} paths from {:?}: mean cost {:.6} ± {:.2e}, J(tau_i, x0) = {:.6}",
        ens.n_paths, x0, ens.mean_cost, ens.std_error, summary.j_initial
    );
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct MomentSummary<'a> {
    u: &'a [f64],
    sigma: &'a [f64],
    seed: u64,
    #[serde(flatten)]
    report: &'a MomentReport,
}

fn run_moments(cfg: &mut RunConfig, p: &Problem) -> Result<Outcome, Failure> {
    let u = cfg.u.clone().unwrap_or_else(|| vec![0.0; p.dim]);
    if u.len() != p.dim {
        return Err(invalid("u", format!("has {} entries, problem dimension is {}", u.len(), p.dim)));
    }
    let dtau = cfg.dtau.unwrap_or_else(|| p.horizon.dtau());
    cfg.u = Some(u.clone());
    cfg.dtau = Some(dtau);
    let report = estimate_moments(&u, &p.noise, dtau, cfg.n_paths, cfg.seed)?;
    write_json(
        cfg,
        "moments.json",
        &MomentSummary {
            u: &u,
            sigma: &p.noise.sigma,
            seed: cfg.seed,
            report: &report,
        },
    )?;
    println!(
        "{} increments of length {dtau:e}: mean {:?}",
        report.n_samples, report.mean_increment
    );
    Ok(Outcome::Done)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Serialize)]
struct Check {
    name: String,
    status: Status,
    /// Quantity compared against `tolerance`.
    measured: Option<f64>,
    tolerance: Option<f64>,
    detail: serde_json::Value,
}

impl Check {
    fn compare(name: impl Into<String>, measured: f64, tolerance: f64, detail: serde_json::Value) -> Self {
        let status = if measured <= tolerance {
            Status::Pass
        } else {
            Status::Fail
        };
        Self {
            name: name.into(),
            status,
            measured: Some(measured),
            tolerance: Some(tolerance),
            detail,
        }
    }

    fn skipped(name: impl Into<String>, reason: String) -> Self {
        Self {
            name: name.into(),
            status: Status::Skipped,
            measured: None,
            tolerance: None,
            detail: json!({ "reason": reason }),
        }
    }
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    seed: u64,
    n_paths: usize,
    x0: &'a [f64],
    passed: bool,
    checks: &'a [Check],
}

fn run_verify(cfg: &mut RunConfig, p: &Problem) -> Result<Outcome, Failure> {
    let x0 = resolve_x0(cfg, p)?;
    let (vf, policy, _) = solve_with_policy(p)?;
    let opts = sim_options(cfg, false);
    let mut checks = Vec::new();

    let terminal = vf.values[p.horizon.n_steps]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    checks.push(Check::compare("terminal_slice_zero", terminal, 0.0, json!({})));

    checks.push(match RiccatiSolution::from_problem(p) {
        Ok(sol) => {
            let cmp = compare_value(&vf, &sol)?;
            Check::compare(
                "riccati_oracle",
                cmp.interior_max_abs_error,
                ORACLE_TOLERANCE,
                serde_json::to_value(&cmp).map_err(hjb_core::Error::from)?,
            )
        }
        Err(e) => Check::skipped("riccati_oracle", e.to_string()),
    });

    let action = action_identity_check(p, &vf, &policy, &x0, cfg.n_paths, cfg.seed, opts)?;
    checks.push(Check::compare(
        "action_identity",
        (action.s_estimate - action.j_initial).abs(),
        MC_SIGMAS * action.std_error + DISCRETIZATION_TOLERANCE,
        serde_json::to_value(&action).map_err(hjb_core::Error::from)?,
    ));

    let h = p.horizon;
    for (i, frac) in BELLMAN_FRACTIONS.into_iter().enumerate() {
        let name = format!("bellman_split_{frac}");
        let tau_prime = h.tau_i + frac * (h.tau_f - h.tau_i);
        if h.nearest_slice(tau_prime) == 0 {
            checks.push(Check::skipped(name, "split point rounds to the initial slice".into()));
            continue;
        }
        let seed = cfg.seed.wrapping_add(1 + i as u64);
        let b = bellman_consistency(p, &vf, &policy, &x0, h.tau_i, tau_prime, cfg.n_paths, seed, opts)?;
        checks.push(Check::compare(
            name,
            (b.rhs_estimate - b.lhs).abs(),
            MC_SIGMAS * b.std_error + DISCRETIZATION_TOLERANCE,
            serde_json::to_value(&b).map_err(hjb_core::Error::from)?,
        ));
    }

    let passed = checks.iter().all(|c| c.status != Status::Fail);
    write_json(
        cfg,
        "verify.json",
        &VerifyReport {
            seed: cfg.seed,
            n_paths: cfg.n_paths,
            x0: &x0,
            passed,
            checks: &checks,
        },
    )?;
    for c in &checks {
        let status = match c.status {
            Status::Pass => "pass",
            Status::Fail => "FAIL",
            Status::Skipped => "skip",
        };
        match (c.measured, c.tolerance) {
            (Some(m), Some(t)) => println!("[{status}] {}: {m:.3e} (tolerance {t:.3e})", c.name),
            _ => println!("[{status}] {}", c.name),
        }
    }
    Ok(if passed {
        Outcome::Done
    } else {
        Outcome::ChecksFailed
    })
}
