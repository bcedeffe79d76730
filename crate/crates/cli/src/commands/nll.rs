//! Exact likelihood evaluation under a trained checkpoint.

use super::generate::load_checkpoint;
use super::write_json;
use crate::config::RunConfig;
use crate::error::{input, Result};
use rsb_core::sampling::{negative_log_likelihood, NllOptions, NormalizedPrior};
use rsb_core::tasks::Task;
use std::path::Path;
use std::process::ExitCode;

pub fn run(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    let s = &cfg.nll;
    let path = s
        .checkpoint
        .as_ref()
        .ok_or_else(|| input("nll needs a checkpoint; pass --checkpoint"))?;
    let (ckpt, meta) = load_checkpoint(path)?;
    let domain = meta.domain.build()?;
    meta.drift.validate().map_err(input)?;
    let grid = meta.grid.build()?;

    let data: Vec<Vec<f64>> = match &s.data {
        Some(csv) => {
            let (points, weights) = rsb_core::io::read_measure_csv(csv)
                .map_err(|e| input(format!("{}: {e}", csv.display())))?;
            if weights.is_some() {
                log::warn!("ignoring the weight column; likelihoods are per point");
            }
            for (i, p) in points.iter().enumerate() {
                if p.len() != domain.dim() || !domain.contains(p).map_err(input)? {
                    return Err(input(format!(
                        "data row {} is not a point inside the domain",
                        i + 1
                    )));
                }
            }
            points
        }
        None => {
            let task: Task = meta
                .task
                .as_ref()
                .ok_or_else(|| input("nll needs --data or a task checkpoint"))?
                .parse()
                .map_err(input)?;
            task.data_cloud(s.n, cfg.seed.wrapping_add(2))
        }
    };

    let prior = NormalizedPrior::new(meta.prior.clone(), &domain, s.volume_samples, cfg.seed)
        .map_err(input)?;
    let nets = if s.use_ema { &ckpt.ema } else { &ckpt.nets };
    let opts = NllOptions {
        hutchinson_probes: s.probes,
        seed: cfg.seed,
        ..NllOptions::default()
    };
    let report = negative_log_likelihood(
        &domain,
        &meta.drift,
        meta.epsilon,
        &prior,
        Some(&nets.forward),
        &nets.backward,
        &data,
        &grid,
        &opts,
    )
    .map_err(input)?;
    if !report.flagged.is_empty() {
        log::warn!(
            "{} of {} flow endpoints left the domain beyond the guard tolerance",
            report.flagged.len(),
            data.len()
        );
    }
    write_json(&out.join("nll.json"), &report)?;
    Ok(ExitCode::SUCCESS)
}
