//! Convergence study: one capped solve against a tight reference solution.

use super::sinkhorn::{build_instance, solver_options};
use super::write_json;
use crate::config::RunConfig;
use crate::error::{input, internal, Result};
use rsb_core::eot::{contraction_bound, diagnostics_report, fit_contraction, solve};
use serde::Serialize;
use std::path::Path;
use std::process::ExitCode;

#[derive(Serialize)]
struct FitRow {
    rate: f64,
    constant: f64,
    plateau: f64,
    points: usize,
}

#[derive(Serialize)]
struct FitSummary {
    iterations: usize,
    converged: bool,
    /// A priori per-iteration contraction factor for this cost size.
    bound: f64,
    /// Geometric fit of the observed optimality-gap decay.
    fit: Option<FitRow>,
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    let (mu, nu, cost) = build_instance(cfg)?;
    let mut run_opts = solver_options(cfg, true);
    run_opts.keep_history = true;
    let run_sol = solve(&cost, &mu, &nu, &run_opts).map_err(input)?;

    let mut ref_opts = solver_options(cfg, false);
    ref_opts.max_iters = cfg.sinkhorn.reference_iters.max(2 * cfg.sinkhorn.max_iters);
    ref_opts.tol = run_opts.tol.min(1e-13);
    let ref_sol = solve(&cost, &mu, &nu, &ref_opts).map_err(input)?;
    if !ref_sol.converged {
        log::warn!("reference solve hit its cap; gap baselines may be loose");
    }

    let rows =
        diagnostics_report(&cost, &mu, &nu, &run_sol, &ref_sol, cfg.sinkhorn.w1).map_err(input)?;
    rsb_core::io::write_jsonl(out.join("diagnostics.jsonl"), &rows).map_err(internal)?;

    let gaps: Vec<f64> = rows.iter().filter_map(|r| r.gap).collect();
    write_json(
        &out.join("fit.json"),
        &FitSummary {
            iterations: run_sol.iterations,
            converged: run_sol.converged,
            bound: contraction_bound(cfg.sinkhorn.cost_scale),
            fit: fit_contraction(&gaps).map(|f| FitRow {
                rate: f.rate,
                constant: f.constant,
                plateau: f.plateau,
                points: f.points,
            }),
        },
    )?;

    if run_sol.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        log::warn!(
            "solver stopped at the iteration cap ({}) without meeting tol",
            run_sol.iterations
        );
        Ok(ExitCode::from(3))
    }
}
