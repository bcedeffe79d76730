//! Sampling from a trained checkpoint, with an optional step-budget
//! comparison against a second checkpoint.

use super::write_json;
use crate::config::{CheckpointMeta, RunConfig};
use crate::error::{input, internal, Result};
use rsb_core::domains::Domain;
use rsb_core::io::Checkpoint;
use rsb_core::metrics::sliced_w1;
use rsb_core::sampling::{generate, GenerateOptions};
use rsb_core::sde::TimeGrid;
use rsb_core::tasks::Task;
use rsb_core::training::BridgeNets;
use serde::Serialize;
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

const W1_PROJECTIONS: usize = 128;
const W1_SEED: u64 = 1;

#[derive(Serialize)]
struct Summary {
    n: usize,
    steps: usize,
    corrector_steps: usize,
    mean_local_time: f64,
    fallback_steps: usize,
    corrector_moves: usize,
    domain_diameter: f64,
    /// Sliced transport distance to a fresh draw from the task data law,
    /// when the checkpoint records a task.
    sliced_w1_vs_data: Option<f64>,
    sliced_w1_over_diameter: Option<f64>,
}

#[derive(Serialize)]
struct NfeComparison {
    nfe: usize,
    n: usize,
    main_sliced_w1: f64,
    baseline_sliced_w1: f64,
}

pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, CheckpointMeta)> {
    let ckpt = Checkpoint::load(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let meta = CheckpointMeta::from_value(&ckpt.meta)?;
    Ok((ckpt, meta))
}

fn pick_nets(ckpt: &Checkpoint, use_ema: bool, domain: &Domain) -> Result<BridgeNets> {
    let nets = if use_ema { &ckpt.ema } else { &ckpt.nets };
    if nets.backward.space_dim() != domain.dim() {
        return Err(input(format!(
            "checkpoint fields act on dimension {} but the domain has dimension {}",
            nets.backward.space_dim(),
            domain.dim()
        )));
    }
    Ok(nets.clone())
}

fn sample_from(
    ckpt: &Checkpoint,
    meta: &CheckpointMeta,
    use_ema: bool,
    steps: usize,
    n: usize,
    opts: &GenerateOptions,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, rsb_core::sampling::GenerateOutcome)> {
    let domain = meta.domain.build()?;
    meta.drift.validate().map_err(input)?;
    let grid = TimeGrid::uniform(meta.grid.t_end, steps).map_err(input)?;
    let nets = pick_nets(ckpt, use_ema, &domain)?;
    let outcome = generate(
        &domain,
        &meta.drift,
        meta.epsilon,
        &meta.prior,
        &nets.backward,
        Some(&nets.forward),
        &grid,
        n,
        opts,
        seed,
    )
    .map_err(input)?;
    let samples = outcome.samples.clone();
    Ok((samples, outcome))
}

/// Sliced transport distance between a sample cloud and a fresh data draw
/// of the recorded task.
fn w1_vs_task_data(task: Task, samples: &[Vec<f64>], seed: u64) -> Result<f64> {
    let reference = task.data_cloud(samples.len(), seed);
    let wa = vec![1.0 / samples.len() as f64; samples.len()];
    let wb = vec![1.0 / reference.len() as f64; reference.len()];
    sliced_w1(samples, &wa, &reference, &wb, W1_PROJECTIONS, W1_SEED).map_err(internal)
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    let s = &cfg.sampling;
    let path = s
        .checkpoint
        .as_ref()
        .ok_or_else(|| input("generate needs a checkpoint; pass --checkpoint"))?;
    let (ckpt, meta) = load_checkpoint(path)?;
    let domain = meta.domain.build()?;
    let steps = s.steps.unwrap_or(meta.grid.steps);
    let opts = GenerateOptions {
        corrector_steps: s.corrector_steps,
        r_snr: s.r_snr,
        ..GenerateOptions::default()
    };
    let (samples, outcome) = sample_from(&ckpt, &meta, s.use_ema, steps, s.n, &opts, cfg.seed)?;

    rsb_core::io::write_cloud_csv(out.join("samples.csv"), &samples).map_err(internal)?;
    if s.gnuplot {
        write_gnuplot(&out.join("samples.dat"), &samples)?;
    }

    let task: Option<Task> = match &meta.task {
        Some(name) => Some(name.parse().map_err(input)?),
        None => None,
    };
    let data_seed = cfg.seed.wrapping_add(1);
    let w1 = match task {
        Some(task) => Some(w1_vs_task_data(task, &samples, data_seed)?),
        None => None,
    };
    let diameter = domain.diameter();
    write_json(
        &out.join("summary.json"),
        &Summary {
            n: s.n,
            steps,
            corrector_steps: s.corrector_steps,
            mean_local_time: outcome.mean_local_time,
            fallback_steps: outcome.fallback_steps,
            corrector_moves: outcome.corrector_moves,
            domain_diameter: diameter,
            sliced_w1_vs_data: w1,
            sliced_w1_over_diameter: w1.map(|v| v / diameter),
        },
    )?;

    if let Some(nfe) = s.nfe {
        let baseline_path = s
            .baseline
            .as_ref()
            .ok_or_else(|| input("--nfe needs a baseline checkpoint; pass --baseline"))?;
        let task =
            task.ok_or_else(|| input("the step-budget comparison needs a task checkpoint"))?;
        let (base_ckpt, base_meta) = load_checkpoint(baseline_path)?;
        let (main_s, _) = sample_from(&ckpt, &meta, s.use_ema, nfe, s.n, &opts, cfg.seed)?;
        let (base_s, _) =
            sample_from(&base_ckpt, &base_meta, s.use_ema, nfe, s.n, &opts, cfg.seed)?;
        write_json(
            &out.join("nfe_comparison.json"),
            &NfeComparison {
                nfe,
                n: s.n,
                main_sliced_w1: w1_vs_task_data(task, &main_s, data_seed)?,
                baseline_sliced_w1: w1_vs_task_data(task, &base_s, data_seed)?,
            },
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn write_gnuplot(path: &Path, samples: &[Vec<f64>]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(internal)?);
    for p in samples {
        let row: Vec<String> = p.iter().map(f64::to_string).collect();
        writeln!(w, "{}", row.join(" ")).map_err(internal)?;
    }
    w.flush().map_err(internal)
}
