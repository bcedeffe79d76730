//! Alternating-stage training of the field pair on a built-in task.

use super::write_json;
use crate::config::{task_domain_section, CheckpointMeta, GridSection, RunConfig};
use crate::error::{input, internal, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rsb_core::io::Checkpoint;
use rsb_core::tasks::Task;
use rsb_core::training::{train_bridge, zero_output_field, BridgeNets, TrainConfig, TrainEvent};
use serde::Serialize;
use std::path::Path;
use std::process::ExitCode;

/// RNG stream for network initialization, away from trajectory streams.
const INIT_STREAM: u64 = u64::MAX - 2;

#[derive(Serialize)]
struct StageRow {
    stage: usize,
    direction: rsb_core::training::StageKind,
    loss_start: f64,
    loss_end: f64,
    hits_frac: f64,
}

#[derive(Serialize)]
struct Summary {
    task: String,
    stages: usize,
    steps_per_stage: usize,
    epsilon: f64,
    stage_losses: Vec<f64>,
    stage_hit_fractions: Vec<f64>,
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    let t = &cfg.training;
    let name = t
        .task
        .as_ref()
        .ok_or_else(|| input("train needs a task; pass --task or set [training] task"))?;
    let task: Task = name.parse().map_err(input)?;
    let domain = task.domain();
    let drift = task.drift();
    let grid = task.grid();
    let prior = task.prior();
    prior.validate(&domain).map_err(input)?;

    let train_cfg = TrainConfig {
        epsilon: t.epsilon,
        stages: t.stages,
        steps_per_stage: t.steps_per_stage,
        pool_paths: t.pool_paths,
        batch_paths: t.batch_paths,
        refresh_every: t.refresh_every,
        lr: t.lr,
        ema_decay: t.ema_decay,
        seed: cfg.seed,
        ..TrainConfig::default()
    };

    let widths = task.net_widths();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(INIT_STREAM);
    let mut nets = BridgeNets {
        forward: zero_output_field(&widths, &mut init_rng).map_err(input)?,
        backward: zero_output_field(&widths, &mut init_rng).map_err(input)?,
    };

    let mut sample_data = |rng: &mut ChaCha8Rng| task.sample_data(&domain, rng);
    let mut sample_prior = |rng: &mut ChaCha8Rng| {
        prior
            .sample(&domain, rng)
            .expect("prior rejection budget exhausted")
    };
    let mut events: Vec<TrainEvent> = Vec::new();
    let mut on_event = |e: &TrainEvent| {
        if e.step == 0 || (e.step + 1) % 100 == 0 {
            log::info!(
                "stage {} ({:?}) step {} loss {:.5}",
                e.stage,
                e.kind,
                e.step,
                e.loss
            );
        }
        events.push(e.clone());
    };
    let outcome = train_bridge(
        &domain,
        &drift,
        &grid,
        &mut nets,
        &mut sample_data,
        &mut sample_prior,
        &train_cfg,
        Some(&mut on_event),
    )
    .map_err(input)?;

    rsb_core::io::write_jsonl(out.join("events.jsonl"), &events).map_err(internal)?;
    let stage_rows: Vec<StageRow> = (0..t.stages)
        .map(|stage| {
            let first = events
                .iter()
                .find(|e| e.stage == stage)
                .expect("every stage reports events");
            StageRow {
                stage,
                direction: first.kind,
                loss_start: first.loss,
                loss_end: outcome.stage_losses[stage],
                hits_frac: outcome.stage_hit_fractions[stage],
            }
        })
        .collect();
    rsb_core::io::write_jsonl(out.join("stages.jsonl"), &stage_rows).map_err(internal)?;

    let meta = CheckpointMeta {
        task: Some(task.name().to_string()),
        domain: task_domain_section(task),
        drift,
        grid: GridSection {
            t_end: grid.t_end(),
            steps: grid.n_steps(),
        },
        epsilon: t.epsilon,
        prior,
    };
    Checkpoint::from_outcome(&outcome, meta.to_value()?)
        .save(out.join("checkpoint.bin"))
        .map_err(internal)?;

    write_json(
        &out.join("summary.json"),
        &Summary {
            task: task.name().to_string(),
            stages: t.stages,
            steps_per_stage: t.steps_per_stage,
            epsilon: t.epsilon,
            stage_losses: outcome.stage_losses,
            stage_hit_fractions: outcome.stage_hit_fractions,
        },
    )?;
    Ok(ExitCode::SUCCESS)
}
