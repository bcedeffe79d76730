//! One entropic transport solve with per-iteration records.

use super::write_json;
use crate::config::RunConfig;
use crate::error::{input, internal, Result};
use rand::Rng;
use rsb_core::eot::{
    contraction_bound, coupling_from_potentials, solve, CostMatrix, DiscreteMeasure,
    MarginalSchedule, SinkhornOptions, SinkhornSolution,
};
use rsb_core::sde::path_rng;
use serde::Serialize;
use std::path::Path;
use std::process::ExitCode;

/// RNG streams for random instances, away from the path streams other
/// commands use.
const SOURCE_STREAM: usize = usize::MAX - 1;
const TARGET_STREAM: usize = usize::MAX;

#[derive(Serialize)]
struct IterRow {
    k: usize,
    objective: f64,
    residual: f64,
    marginal_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
}

#[derive(Serialize)]
struct Summary {
    atoms_source: usize,
    atoms_target: usize,
    cost_scale: f64,
    iterations: usize,
    converged: bool,
    objective: Option<f64>,
    lambda_sum: f64,
    /// A priori per-iteration contraction factor for this cost size.
    contraction_bound: f64,
}

/// Load the configured measures, or draw a uniform-weight random instance
/// on the unit cube when neither side is a file.
pub fn build_instance(cfg: &RunConfig) -> Result<(DiscreteMeasure, DiscreteMeasure, CostMatrix)> {
    let s = &cfg.sinkhorn;
    let (mu, nu) = match (&s.source, &s.target) {
        (Some(a), Some(b)) => (load_measure(a)?, load_measure(b)?),
        (None, None) => (
            random_measure(s.atoms_source, s.dim, cfg.seed, SOURCE_STREAM)?,
            random_measure(s.atoms_target, s.dim, cfg.seed, TARGET_STREAM)?,
        ),
        _ => {
            return Err(input(
                "pass both source and target measure files, or neither for a random instance",
            ));
        }
    };
    let cost = CostMatrix::sq_euclidean(&mu, &nu)
        .and_then(|c| c.rescaled_to_sup(s.cost_scale))
        .map_err(input)?;
    Ok((mu, nu, cost))
}

fn load_measure(path: &Path) -> Result<DiscreteMeasure> {
    let (points, weights) = rsb_core::io::read_measure_csv(path)
        .map_err(|e| input(format!("{}: {e}", path.display())))?;
    let weights = weights.unwrap_or_else(|| vec![1.0; points.len()]);
    DiscreteMeasure::new(points, weights).map_err(input)
}

fn random_measure(n: usize, dim: usize, seed: u64, stream: usize) -> Result<DiscreteMeasure> {
    if n == 0 || dim == 0 {
        return Err(input("random instances need positive atom count and dim"));
    }
    let mut rng = path_rng(seed, stream);
    let points = (0..n)
        .map(|_| (0..dim).map(|_| rng.gen::<f64>()).collect())
        .collect();
    DiscreteMeasure::new(points, vec![1.0; n]).map_err(input)
}

pub fn solver_options(cfg: &RunConfig, keep_history: bool) -> SinkhornOptions {
    let s = &cfg.sinkhorn;
    let schedule = if s.perturb != 0.0 {
        let scale = (s.dim as f64).sqrt();
        MarginalSchedule::Tilted {
            direction: vec![1.0 / scale; s.dim],
            eps: s.perturb,
        }
    } else {
        MarginalSchedule::Exact
    };
    SinkhornOptions {
        max_iters: s.max_iters,
        tol: s.tol,
        centered: s.centered,
        mu_star: None,
        schedule,
        keep_history,
    }
}

pub fn write_iteration_log(out: &Path, sol: &SinkhornSolution) -> Result<()> {
    let rows: Vec<IterRow> = sol
        .history
        .iter()
        .map(|r| IterRow {
            k: r.k,
            objective: r.objective,
            residual: r.residual,
            marginal_error: r.marginal_error,
            lambda: r.lambda,
        })
        .collect();
    rsb_core::io::write_jsonl(out.join("diagnostics.jsonl"), &rows).map_err(internal)
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    let (mu, nu, cost) = build_instance(cfg)?;
    let opts = solver_options(cfg, cfg.sinkhorn.history);
    let sol = solve(&cost, &mu, &nu, &opts).map_err(input)?;

    write_iteration_log(out, &sol)?;
    let coupling = coupling_from_potentials(&cost, &mu, &nu, &sol.potentials).map_err(input)?;
    rsb_core::io::write_matrix_csv(out.join("coupling.csv"), &coupling.weights, cost.n, cost.m)
        .map_err(internal)?;
    write_json(&out.join("potentials.json"), &sol.potentials)?;
    write_json(
        &out.join("summary.json"),
        &Summary {
            atoms_source: cost.n,
            atoms_target: cost.m,
            cost_scale: cfg.sinkhorn.cost_scale,
            iterations: sol.iterations,
            converged: sol.converged,
            objective: sol.history.last().map(|r| r.objective),
            lambda_sum: sol.lambda_sum,
            contraction_bound: contraction_bound(cfg.sinkhorn.cost_scale),
        },
    )?;

    if sol.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        log::warn!(
            "solver stopped at the iteration cap ({}) without meeting tol",
            sol.iterations
        );
        Ok(ExitCode::from(3))
    }
}
