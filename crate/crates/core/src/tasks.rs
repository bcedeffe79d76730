//! Ready-made 2D experiment setups: each task bundles a domain, a reference
//! schedule, a prior, a data law, and training presets.

use crate::domains::Domain;
use crate::sampling::PriorSpec;
use crate::sde::{DriftSpec, TimeGrid};
use crate::training::TrainConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Attempts before a data sampler falls back to the domain's interior point.
const DATA_SAMPLE_BUDGET: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Three-turn spiral inside a five-petal flower; variance-exploding
    /// schedule with a flat prior.
    SpiralFlower,
    /// Checkerboard squares clipped to the heart curve; variance-preserving
    /// schedule with a truncated-Gaussian prior.
    CheckerboardHeart,
    /// Ring of eight Gaussian modes inside a regular octagon;
    /// variance-preserving schedule with a truncated-Gaussian prior.
    MixtureOctagon,
}

impl Task {
    pub const ALL: [Task; 3] = [
        Task::SpiralFlower,
        Task::CheckerboardHeart,
        Task::MixtureOctagon,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Task::SpiralFlower => "spiral-flower",
            Task::CheckerboardHeart => "checkerboard-heart",
            Task::MixtureOctagon => "mixture-octagon",
        }
    }

    pub fn domain(&self) -> Domain {
        match self {
            Task::SpiralFlower => Domain::flower(5, 1.5).expect("valid flower"),
            Task::CheckerboardHeart => Domain::heart().expect("valid heart"),
            Task::MixtureOctagon => Domain::regular_octagon(2.0).expect("valid octagon"),
        }
    }

    pub fn drift(&self) -> DriftSpec {
        match self {
            Task::SpiralFlower => DriftSpec::Rve {
                sigma_min: 0.01,
                sigma_max: 5.0,
                t_end: 1.0,
            },
            Task::CheckerboardHeart | Task::MixtureOctagon => DriftSpec::Rvp {
                beta_min: 0.1,
                beta_max: 20.0,
                t_end: 1.0,
            },
        }
    }

    /// Reference law at the far end of the interval: flat for the exploding
    /// schedule; for the preserving schedule the terminal law is close to a
    /// standard Gaussian restricted to the domain.
    pub fn prior(&self) -> PriorSpec {
        match self {
            Task::SpiralFlower => PriorSpec::uniform(),
            Task::CheckerboardHeart | Task::MixtureOctagon => {
                PriorSpec::truncated_gaussian(vec![0.0, 0.0], 1.0)
            }
        }
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::uniform(1.0, 100).expect("valid grid")
    }

    /// Hidden widths for both score networks; input is space plus time.
    pub fn net_widths(&self) -> Vec<usize> {
        vec![3, 32, 32, 2]
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..TrainConfig::default()
        }
    }

    /// One draw from the task's data distribution, confined to the domain.
    pub fn sample_data<R: Rng>(&self, domain: &Domain, rng: &mut R) -> Vec<f64> {
        for _ in 0..DATA_SAMPLE_BUDGET {
            let x = match self {
                Task::SpiralFlower => {
                    let u: f64 = rng.gen();
                    let th = 3.0 * std::f64::consts::TAU * u;
                    let r = 0.15 + 2.1 * u;
                    let jx: f64 = rng.sample(StandardNormal);
                    let jy: f64 = rng.sample(StandardNormal);
                    vec![r * th.cos() + 0.05 * jx, r * th.sin() + 0.05 * jy]
                }
                Task::CheckerboardHeart => {
                    let x = -16.0 + 32.0 * rng.gen::<f64>();
                    let y = -17.0 + 29.0 * rng.gen::<f64>();
                    if !checkerboard_cell(x, y) {
                        continue;
                    }
                    vec![x, y]
                }
                Task::MixtureOctagon => {
                    let k = rng.gen_range(0..8u32);
                    let ang = k as f64 * std::f64::consts::FRAC_PI_4;
                    let gx: f64 = rng.sample(StandardNormal);
                    let gy: f64 = rng.sample(StandardNormal);
                    vec![1.3 * ang.cos() + 0.18 * gx, 1.3 * ang.sin() + 0.18 * gy]
                }
            };
            if domain.contains(&x).unwrap_or(false) {
                return x;
            }
        }
        domain.interior_point()
    }

    /// Deterministic data cloud, for held-out comparisons.
    pub fn data_cloud(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        use rand::SeedableRng;
        let domain = self.domain();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| self.sample_data(&domain, &mut rng))
            .collect()
    }
}

/// Dark squares of a side-4 checkerboard over the heart's bounding box.
fn checkerboard_cell(x: f64, y: f64) -> bool {
    let cx = (x / 4.0).floor() as i64;
    let cy = (y / 4.0).floor() as i64;
    (cx + cy).rem_euclid(2) == 0
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spiral-flower" => Ok(Task::SpiralFlower),
            "checkerboard-heart" => Ok(Task::CheckerboardHeart),
            "mixture-octagon" => Ok(Task::MixtureOctagon),
            other => Err(format!(
                "unknown task '{other}'; expected spiral-flower, checkerboard-heart, or mixture-octagon"
            )),
        }
    }
}
