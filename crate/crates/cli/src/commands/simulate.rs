//! Reference-process simulation with a terminal-law summary.

use super::write_json;
use crate::config::RunConfig;
use crate::error::{input, internal, CliError, Result};
use rsb_core::domains::Domain;
use rsb_core::metrics;
use rsb_core::sde::{simulate_forward_batch, DriftSpec, SimOptions, Trajectory, ZeroField};
use serde::Serialize;
use std::path::Path;
use std::process::ExitCode;

#[derive(Serialize)]
struct Summary {
    paths: usize,
    steps: usize,
    epsilon: f64,
    /// Fraction of paths with at least one boundary contact.
    hit_fraction: f64,
    /// Local time accumulated per path, averaged.
    mean_local_time: f64,
    /// Closed-form terminal law the summary statistics compare against,
    /// when one is known for the configured domain and drift.
    reference: Option<&'static str>,
    terminal_ks_vs_reference: Option<f64>,
    terminal_l1_vs_reference: Option<f64>,
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    let domain = cfg.domain.build()?;
    let grid = cfg.grid.build()?;
    let drift = cfg.drift.to_spec(cfg.grid.t_end)?;
    let sim = &cfg.simulate;
    if sim.paths == 0 {
        return Err(CliError::Input("paths must be positive".into()));
    }
    if !(sim.epsilon > 0.0) {
        return Err(CliError::Input("epsilon must be positive".into()));
    }
    let start = match &sim.start {
        Some(s) => {
            if s.len() != domain.dim() || !domain.contains(s).map_err(input)? {
                return Err(CliError::Input(format!(
                    "start point {s:?} is not inside the domain"
                )));
            }
            s.clone()
        }
        None => domain.interior_point(),
    };

    let starts = vec![start; sim.paths];
    let trajs = simulate_forward_batch(
        &domain,
        &drift,
        sim.epsilon,
        &ZeroField,
        &starts,
        &grid,
        &SimOptions::default(),
        cfg.seed,
    )
    .map_err(input)?;

    if sim.csv {
        rsb_core::io::write_trajectories_csv(out.join("trajectories.csv"), &trajs)
            .map_err(internal)?;
    }
    if sim.binary {
        rsb_core::io::write_trajectories_bin(out.join("trajectories.bin"), &trajs)
            .map_err(internal)?;
    }

    let n = trajs.len() as f64;
    let hit_fraction = trajs.iter().filter(|t| t.hit_count() > 0).count() as f64 / n;
    let mean_local_time = trajs
        .iter()
        .map(|t| t.hits.iter().flatten().map(|h| h.local_time).sum::<f64>())
        .sum::<f64>()
        / n;
    let (reference, ks, l1) = terminal_comparison(&domain, &drift, sim.epsilon, &trajs)?;

    write_json(
        &out.join("summary.json"),
        &Summary {
            paths: sim.paths,
            steps: cfg.grid.steps,
            epsilon: sim.epsilon,
            hit_fraction,
            mean_local_time,
            reference,
            terminal_ks_vs_reference: ks,
            terminal_l1_vs_reference: l1,
        },
    )?;
    Ok(ExitCode::SUCCESS)
}

/// Compare the terminal marginal against its stationary law where that law
/// has a closed form: 1-d intervals with zero drift (uniform) or linear
/// restoring drift (truncated Gaussian). The comparison is meaningful once
/// `t_end` spans several relaxation times.
fn terminal_comparison(
    domain: &Domain,
    drift: &DriftSpec,
    epsilon: f64,
    trajs: &[Trajectory],
) -> Result<(Option<&'static str>, Option<f64>, Option<f64>)> {
    let (a, b) = match domain {
        Domain::Hypercube { lo, hi } if lo.len() == 1 => (lo[0], hi[0]),
        _ => return Ok((None, None, None)),
    };
    let terminal: Vec<f64> = trajs.iter().map(|t| t.terminal()[0]).collect();
    let bins = ((terminal.len() as f64).sqrt() as usize).clamp(10, 100);
    match drift {
        DriftSpec::Zero => {
            let ks = metrics::ks_statistic_cdf(&terminal, |x| ((x - a) / (b - a)).clamp(0.0, 1.0))
                .map_err(internal)?;
            let flat = 1.0 / (b - a);
            let l1 =
                metrics::l1_hist_distance(&terminal, a, b, bins, |_| flat).map_err(internal)?;
            Ok((Some("uniform"), Some(ks), Some(l1)))
        }
        DriftSpec::ReflectedOu { theta } => {
            let std = (epsilon / theta).sqrt();
            let ks = metrics::ks_statistic_cdf(&terminal, |x| {
                metrics::truncated_gaussian_cdf(x, 0.0, std, a, b)
            })
            .map_err(internal)?;
            let l1 = metrics::l1_hist_distance(&terminal, a, b, bins, |x| {
                metrics::truncated_gaussian_density(x, 0.0, std, a, b)
            })
            .map_err(internal)?;
            Ok((Some("truncated_gaussian"), Some(ks), Some(l1)))
        }
        _ => Ok((None, None, None)),
    }
}
