//! Command-line driver for the reflected Schrodinger bridge toolkit.
//!
//! Every subcommand reads an optional TOML configuration, applies flag
//! overrides, echoes the resolved configuration into the output directory,
//! and then writes its artifacts there. Outputs are a pure function of the
//! resolved configuration, whatever the worker count. Set `RSB_LOG` to
//! control verbosity. Exit codes: 0 success, 2 input error, 3 iteration-cap
//! warning.

mod commands;
mod config;
mod error;

use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use error::{internal, CliError};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rsb", version, about = "Reflected Schrodinger bridge toolkit")]
struct Cli {
    /// Configuration file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for this run.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (0 uses all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the reference reflected dynamics and summarize the
    /// terminal law.
    Simulate(SimulateArgs),
    /// Solve one entropic transport instance and record its iterations.
    Sinkhorn(SinkhornArgs),
    /// Train the forward and backward fields on a built-in task.
    Train(TrainArgs),
    /// Sample from a trained checkpoint.
    Generate(GenerateArgs),
    /// Evaluate exact negative log-likelihoods under a trained checkpoint.
    Nll(NllArgs),
    /// Convergence study of the transport solver against a reference
    /// solution.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Domain preset (interval | square | cube | ball | flower | heart |
    /// octagon | simplex).
    #[arg(long)]
    domain: Option<String>,
    /// Drift preset (zero | ou | rve | rvp).
    #[arg(long)]
    drift: Option<String>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_name = "T")]
    t_end: Option<f64>,
}

#[derive(Args)]
struct SinkhornArgs {
    /// Source measure CSV.
    #[arg(long, value_name = "PATH")]
    source: Option<PathBuf>,
    /// Target measure CSV.
    #[arg(long, value_name = "PATH")]
    target: Option<PathBuf>,
    /// Atom count per side of a random instance.
    #[arg(long)]
    atoms: Option<usize>,
    #[arg(long)]
    cost_scale: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Apply the centering shift each iteration.
    #[arg(long)]
    centered: bool,
    /// Tilt both marginals by this strength.
    #[arg(long, value_name = "EPS")]
    perturb: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Task name (spiral-flower | checkerboard-heart | mixture-octagon).
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    steps_per_stage: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Sample count.
    #[arg(short, long)]
    n: Option<usize>,
    /// Integration steps; defaults to the grid the checkpoint trained on.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    corrector_steps: Option<usize>,
    /// Also write a whitespace-separated data file for plotting.
    #[arg(long)]
    gnuplot: bool,
    /// Compare against a baseline checkpoint at this step budget.
    #[arg(long, value_name = "STEPS")]
    nfe: Option<usize>,
    /// Baseline checkpoint for the step-budget comparison.
    #[arg(long, value_name = "PATH")]
    baseline: Option<PathBuf>,
}

#[derive(Args)]
struct NllArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Evaluation points CSV.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Evaluation points drawn from the task data law when no CSV is given.
    #[arg(short, long)]
    n: Option<usize>,
    /// Divergence probe count in high dimension.
    #[arg(long)]
    probes: Option<usize>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Atom count per side of a random instance.
    #[arg(long)]
    atoms: Option<usize>,
    #[arg(long)]
    cost_scale: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Also track coupling transport distances (small instances only).
    #[arg(long)]
    w1: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RSB_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> error::Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    apply_command_args(&mut cfg, &cli.command);

    let out = cfg.out.clone().ok_or_else(|| {
        CliError::Input("no output directory; pass --out or set `out` in the config".into())
    })?;
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
            .map_err(internal)?;
    }
    std::fs::create_dir_all(&out).map_err(internal)?;
    cfg.write_resolved(&out)?;
    log::info!("writing outputs to {}", out.display());

    match &cli.command {
        Command::Simulate(_) => commands::simulate::run(&cfg, &out),
        Command::Sinkhorn(_) => commands::sinkhorn::run(&cfg, &out),
        Command::Train(_) => commands::train::run(&cfg, &out),
        Command::Generate(_) => commands::generate::run(&cfg, &out),
        Command::Nll(_) => commands::nll::run(&cfg, &out),
        Command::Diagnose(_) => commands::diagnose::run(&cfg, &out),
    }
}

fn apply_command_args(cfg: &mut RunConfig, command: &Command) {
    match command {
        Command::Simulate(a) => {
            if let Some(v) = &a.domain {
                cfg.domain.kind = v.clone();
            }
            if let Some(v) = &a.drift {
                cfg.drift.kind = v.clone();
            }
            if let Some(v) = a.paths {
                cfg.simulate.paths = v;
            }
            if let Some(v) = a.epsilon {
                cfg.simulate.epsilon = v;
            }
            if let Some(v) = a.steps {
                cfg.grid.steps = v;
            }
            if let Some(v) = a.t_end {
                cfg.grid.t_end = v;
            }
        }
        Command::Sinkhorn(a) => {
            if let Some(v) = &a.source {
                cfg.sinkhorn.source = Some(v.clone());
            }
            if let Some(v) = &a.target {
                cfg.sinkhorn.target = Some(v.clone());
            }
            if let Some(v) = a.atoms {
                cfg.sinkhorn.atoms_source = v;
                cfg.sinkhorn.atoms_target = v;
            }
            if let Some(v) = a.cost_scale {
                cfg.sinkhorn.cost_scale = v;
            }
            if let Some(v) = a.tol {
                cfg.sinkhorn.tol = v;
            }
            if let Some(v) = a.max_iters {
                cfg.sinkhorn.max_iters = v;
            }
            if a.centered {
                cfg.sinkhorn.centered = true;
            }
            if let Some(v) = a.perturb {
                cfg.sinkhorn.perturb = v;
            }
        }
        Command::Train(a) => {
            if let Some(v) = &a.task {
                cfg.training.task = Some(v.clone());
            }
            if let Some(v) = a.stages {
                cfg.training.stages = v;
            }
            if let Some(v) = a.steps_per_stage {
                cfg.training.steps_per_stage = v;
            }
            if let Some(v) = a.epsilon {
                cfg.training.epsilon = v;
            }
        }
        Command::Generate(a) => {
            if let Some(v) = &a.checkpoint {
                cfg.sampling.checkpoint = Some(v.clone());
            }
            if let Some(v) = a.n {
                cfg.sampling.n = v;
            }
            if let Some(v) = a.steps {
                cfg.sampling.steps = Some(v);
            }
            if let Some(v) = a.corrector_steps {
                cfg.sampling.corrector_steps = v;
            }
            if a.gnuplot {
                cfg.sampling.gnuplot = true;
            }
            if let Some(v) = a.nfe {
                cfg.sampling.nfe = Some(v);
            }
            if let Some(v) = &a.baseline {
                cfg.sampling.baseline = Some(v.clone());
            }
        }
        Command::Nll(a) => {
            if let Some(v) = &a.checkpoint {
                cfg.nll.checkpoint = Some(v.clone());
            }
            if let Some(v) = &a.data {
                cfg.nll.data = Some(v.clone());
            }
            if let Some(v) = a.n {
                cfg.nll.n = v;
            }
            if let Some(v) = a.probes {
                cfg.nll.probes = v;
            }
        }
        Command::Diagnose(a) => {
            if let Some(v) = a.atoms {
                cfg.sinkhorn.atoms_source = v;
                cfg.sinkhorn.atoms_target = v;
            }
            if let Some(v) = a.cost_scale {
                cfg.sinkhorn.cost_scale = v;
            }
            if let Some(v) = a.max_iters {
                cfg.sinkhorn.max_iters = v;
            }
            if a.w1 {
                cfg.sinkhorn.w1 = true;
            }
        }
    }
}
