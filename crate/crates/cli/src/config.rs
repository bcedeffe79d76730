//! Run configuration.
//!
//! A run is described by a TOML file with one section per concern plus
//! top-level `seed`, `out`, and `workers` keys; command-line flags override
//! file values. Unknown keys are rejected everywhere. After merging, the
//! resolved configuration is echoed into the output directory so the run can
//! be reproduced from that file alone.

use crate::error::{input, internal, CliError, Result};
use rsb_core::domains::Domain;
use rsb_core::sampling::PriorSpec;
use rsb_core::sde::{DriftSpec, TimeGrid};
use rsb_core::tasks::Task;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Name of the echoed configuration file inside the output directory.
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base seed; every random stream of the run derives from it.
    pub seed: u64,
    /// Output directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
    pub domain: DomainSection,
    pub drift: DriftSection,
    pub grid: GridSection,
    pub simulate: SimulateSection,
    pub sinkhorn: SinkhornSection,
    pub training: TrainingSection,
    pub sampling: SamplingSection,
    pub nll: NllSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: None,
            workers: 0,
            domain: DomainSection::default(),
            drift: DriftSection::default(),
            grid: GridSection::default(),
            simulate: SimulateSection::default(),
            sinkhorn: SinkhornSection::default(),
            training: TrainingSection::default(),
            sampling: SamplingSection::default(),
            nll: NllSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| input(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| input(format!("{}: {e}", path.display())))
    }

    /// Write the merged configuration next to the run outputs.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(internal)?;
        std::fs::write(out_dir.join(RESOLVED_CONFIG), text).map_err(internal)
    }
}

/// Geometry selection by preset name with a few shape parameters. Keys that
/// a kind does not use are rejected rather than silently ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSection {
    /// interval | square | cube | ball | flower | heart | octagon | simplex
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub petals: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<f64>,
}

impl Default for DomainSection {
    fn default() -> Self {
        DomainSection {
            kind: "interval".into(),
            lo: None,
            hi: None,
            dim: None,
            center: None,
            radius: None,
            petals: None,
            offset: None,
        }
    }
}

impl DomainSection {
    fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        let set = [
            ("lo", self.lo.is_some()),
            ("hi", self.hi.is_some()),
            ("dim", self.dim.is_some()),
            ("center", self.center.is_some()),
            ("radius", self.radius.is_some()),
            ("petals", self.petals.is_some()),
            ("offset", self.offset.is_some()),
        ];
        for (name, present) in set {
            if present && !allowed.contains(&name) {
                return Err(CliError::Input(format!(
                    "domain kind \"{}\" does not use key \"{name}\"",
                    self.kind
                )));
            }
        }
        Ok(())
    }

    fn bounds(&self) -> (f64, f64) {
        (self.lo.unwrap_or(-1.0), self.hi.unwrap_or(1.0))
    }

    pub fn build(&self) -> Result<Domain> {
        let built = match self.kind.as_str() {
            "interval" => {
                self.check_keys(&["lo", "hi"])?;
                let (lo, hi) = self.bounds();
                Domain::hypercube(vec![lo], vec![hi])
            }
            "square" => {
                self.check_keys(&["lo", "hi"])?;
                let (lo, hi) = self.bounds();
                Domain::hypercube(vec![lo; 2], vec![hi; 2])
            }
            "cube" => {
                self.check_keys(&["lo", "hi", "dim"])?;
                let (lo, hi) = self.bounds();
                let d = self.dim.unwrap_or(3);
                Domain::hypercube(vec![lo; d], vec![hi; d])
            }
            "ball" => {
                self.check_keys(&["center", "radius", "dim"])?;
                let center = match (&self.center, self.dim) {
                    (Some(c), Some(d)) if c.len() != d => {
                        return Err(CliError::Input(format!(
                            "ball center has {} coordinates but dim = {d}",
                            c.len()
                        )));
                    }
                    (Some(c), _) => c.clone(),
                    (None, d) => vec![0.0; d.unwrap_or(2)],
                };
                Domain::ball(center, self.radius.unwrap_or(1.0))
            }
            "flower" => {
                self.check_keys(&["petals", "offset"])?;
                Domain::flower(self.petals.unwrap_or(5), self.offset.unwrap_or(1.5))
            }
            "heart" => {
                self.check_keys(&[])?;
                Domain::heart()
            }
            "octagon" => {
                self.check_keys(&["radius"])?;
                Domain::regular_octagon(self.radius.unwrap_or(2.0))
            }
            "simplex" => {
                self.check_keys(&["dim"])?;
                Domain::simplex(self.dim.unwrap_or(2))
            }
            other => {
                return Err(CliError::Input(format!(
                    "unknown domain kind \"{other}\"; expected interval, square, cube, \
                     ball, flower, heart, octagon, or simplex"
                )));
            }
        };
        built.map_err(input)
    }
}

/// Base drift and diffusion schedule by preset name. Schedule end times
/// come from the grid section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftSection {
    /// zero | ou | rve | rvp
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_max: Option<f64>,
}

impl Default for DriftSection {
    fn default() -> Self {
        DriftSection {
            kind: "zero".into(),
            theta: None,
            sigma_min: None,
            sigma_max: None,
            beta_min: None,
            beta_max: None,
        }
    }
}

impl DriftSection {
    fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        let set = [
            ("theta", self.theta.is_some()),
            ("sigma_min", self.sigma_min.is_some()),
            ("sigma_max", self.sigma_max.is_some()),
            ("beta_min", self.beta_min.is_some()),
            ("beta_max", self.beta_max.is_some()),
        ];
        for (name, present) in set {
            if present && !allowed.contains(&name) {
                return Err(CliError::Input(format!(
                    "drift kind \"{}\" does not use key \"{name}\"",
                    self.kind
                )));
            }
        }
        Ok(())
    }

    pub fn to_spec(&self, t_end: f64) -> Result<DriftSpec> {
        let spec = match self.kind.as_str() {
            "zero" => {
                self.check_keys(&[])?;
                DriftSpec::Zero
            }
            "ou" => {
                self.check_keys(&["theta"])?;
                DriftSpec::ReflectedOu {
                    theta: self.theta.unwrap_or(1.0),
                }
            }
            "rve" => {
                self.check_keys(&["sigma_min", "sigma_max"])?;
                DriftSpec::Rve {
                    sigma_min: self.sigma_min.unwrap_or(0.01),
                    sigma_max: self.sigma_max.unwrap_or(5.0),
                    t_end,
                }
            }
            "rvp" => {
                self.check_keys(&["beta_min", "beta_max"])?;
                DriftSpec::Rvp {
                    beta_min: self.beta_min.unwrap_or(0.1),
                    beta_max: self.beta_max.unwrap_or(20.0),
                    t_end,
                }
            }
            other => {
                return Err(CliError::Input(format!(
                    "unknown drift kind \"{other}\"; expected zero, ou, rve, or rvp"
                )));
            }
        };
        spec.validate().map_err(input)?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub t_end: f64,
    pub steps: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            t_end: 1.0,
            steps: 100,
        }
    }
}

impl GridSection {
    pub fn build(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.t_end, self.steps).map_err(input)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub paths: usize,
    pub epsilon: f64,
    /// Common start point; defaults to an interior point of the domain.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<f64>>,
    pub csv: bool,
    pub binary: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            paths: 1000,
            epsilon: 1.0,
            start: None,
            csv: true,
            binary: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornSection {
    /// Source measure CSV; leave unset together with `target` for a random
    /// instance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    pub atoms_source: usize,
    pub atoms_target: usize,
    /// Ambient dimension of random instances.
    pub dim: usize,
    /// The cost matrix is rescaled to this sup norm.
    pub cost_scale: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub centered: bool,
    /// Tilt strength for systematically misspecified marginals; 0 disables.
    pub perturb: f64,
    /// Keep per-iteration potentials in the diagnostics.
    pub history: bool,
    /// Iteration cap of the reference solve used by `diagnose`.
    pub reference_iters: usize,
    /// Track coupling transport distances in `diagnose` (small instances
    /// only).
    pub w1: bool,
}

impl Default for SinkhornSection {
    fn default() -> Self {
        SinkhornSection {
            source: None,
            target: None,
            atoms_source: 30,
            atoms_target: 30,
            dim: 2,
            cost_scale: 0.05,
            tol: 1e-10,
            max_iters: 500,
            centered: false,
            perturb: 0.0,
            history: true,
            reference_iters: 2000,
            w1: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    pub stages: usize,
    pub steps_per_stage: usize,
    pub pool_paths: usize,
    pub batch_paths: usize,
    pub refresh_every: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub epsilon: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let base = rsb_core::TrainConfig::default();
        TrainingSection {
            task: None,
            stages: base.stages,
            steps_per_stage: base.steps_per_stage,
            pool_paths: base.pool_paths,
            batch_paths: base.batch_paths,
            refresh_every: base.refresh_every,
            lr: base.lr,
            ema_decay: base.ema_decay,
            epsilon: base.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub n: usize,
    /// Override the grid step count stored in the checkpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub corrector_steps: usize,
    pub r_snr: f64,
    /// Sample with the parameter-averaged fields.
    pub use_ema: bool,
    /// Also write a whitespace-separated data file for plotting.
    pub gnuplot: bool,
    /// Step count for a step-budget comparison against `baseline`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nfe: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<PathBuf>,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection {
            checkpoint: None,
            n: 10_000,
            steps: None,
            corrector_steps: 0,
            r_snr: rsb_core::sampling::DEFAULT_R_SNR,
            use_ema: true,
            gnuplot: false,
            nfe: None,
            baseline: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NllSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluation points CSV; defaults to fresh draws from the task data
    /// law recorded in the checkpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    pub n: usize,
    pub probes: usize,
    pub use_ema: bool,
    /// Monte Carlo budget for prior normalization on domains without a
    /// closed-form volume.
    pub volume_samples: usize,
}

impl Default for NllSection {
    fn default() -> Self {
        NllSection {
            checkpoint: None,
            data: None,
            n: 1000,
            probes: 32,
            use_ema: true,
            volume_samples: rsb_core::sampling::VOLUME_MC_SAMPLES,
        }
    }
}

/// Everything `generate` and `nll` need to rebuild the trained setup,
/// stored as the checkpoint metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub task: Option<String>,
    pub domain: DomainSection,
    pub drift: DriftSpec,
    pub grid: GridSection,
    pub epsilon: f64,
    pub prior: PriorSpec,
}

impl CheckpointMeta {
    pub fn from_value(v: &serde_json::Value) -> Result<Self> {
        serde_json::from_value(v.clone()).map_err(|e| input(format!("checkpoint metadata: {e}")))
    }

    pub fn to_value(&self) -> Result<serde_json::Value> {
        serde_json::to_value(self).map_err(internal)
    }
}

/// The domain presets behind the built-in generative tasks.
pub fn task_domain_section(task: Task) -> DomainSection {
    let mut s = DomainSection::default();
    match task {
        Task::SpiralFlower => {
            s.kind = "flower".into();
            s.petals = Some(5);
            s.offset = Some(1.5);
        }
        Task::CheckerboardHeart => {
            s.kind = "heart".into();
        }
        Task::MixtureOctagon => {
            s.kind = "octagon".into();
            s.radius = Some(2.0);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig {
            out: Some(PathBuf::from("runs/x")),
            ..RunConfig::default()
        };
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sede = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[simulate]\npath_count = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[grid]\nt_end = 1.0\nn = 5").is_err());
    }

    #[test]
    fn domain_presets_build() {
        let mut s = DomainSection::default();
        assert_eq!(s.build().unwrap().dim(), 1);
        s.kind = "heart".into();
        assert_eq!(s.build().unwrap().dim(), 2);
        s.kind = "cube".into();
        s.dim = Some(4);
        s.lo = Some(0.0);
        s.hi = Some(2.0);
        let d = s.build().unwrap();
        assert_eq!(d.dim(), 4);
        assert!(d.contains(&[1.9, 0.1, 1.0, 0.5]).unwrap());
    }

    #[test]
    fn irrelevant_domain_keys_fail() {
        let s = DomainSection {
            kind: "heart".into(),
            radius: Some(2.0),
            ..DomainSection::default()
        };
        let msg = s.build().unwrap_err().to_string();
        assert!(msg.contains("radius"), "{msg}");
        let s = DomainSection {
            kind: "interval".into(),
            petals: Some(3),
            ..DomainSection::default()
        };
        assert!(s.build().is_err());
    }

    #[test]
    fn drift_presets_resolve() {
        let mut s = DriftSection::default();
        assert_eq!(s.to_spec(1.0).unwrap(), DriftSpec::Zero);
        s.kind = "rve".into();
        match s.to_spec(2.0).unwrap() {
            DriftSpec::Rve {
                sigma_min,
                sigma_max,
                t_end,
            } => {
                assert_eq!((sigma_min, sigma_max, t_end), (0.01, 5.0, 2.0));
            }
            other => panic!("unexpected spec {other:?}"),
        }
        s.theta = Some(2.0);
        assert!(s.to_spec(1.0).is_err());
    }

    #[test]
    fn checkpoint_meta_round_trips() {
        let meta = CheckpointMeta {
            task: Some("spiral-flower".into()),
            domain: task_domain_section(Task::SpiralFlower),
            drift: DriftSpec::Rve {
                sigma_min: 0.01,
                sigma_max: 5.0,
                t_end: 1.0,
            },
            grid: GridSection::default(),
            epsilon: 0.5,
            prior: PriorSpec::uniform(),
        };
        let v = meta.to_value().unwrap();
        let back = CheckpointMeta::from_value(&v).unwrap();
        assert_eq!(back.task.as_deref(), Some("spiral-flower"));
        assert_eq!(back.domain, meta.domain);
        assert_eq!(back.drift, meta.drift);
    }
}
