//! Priors over bounded domains, sample generation through the backward
//! reflected SDE with optional Langevin correction, and likelihood
//! evaluation through the probability-flow ODE.

use crate::domains::{Domain, DomainError};
use crate::linalg::norm_sq;
use crate::sde::{
    backward_em_step, path_rng, probability_flow, DivergenceMode, DriftSpec, ScoreFromZ, SdeError,
    SimOptions, TimeGrid, VectorField, ZeroField,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, SampleError>;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("domain error: {0}")]
    Domain(#[from] DomainError),
    #[error("simulation error: {0}")]
    Sde(#[from] SdeError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("rejection sampling exhausted its budget of {budget} draws")]
    RejectionBudget { budget: usize },
}

fn default_budget() -> usize {
    10_000
}

/// Reference distribution at the far end of the time interval.
///
/// `Uniform` is the flat distribution over the domain; `TruncatedGaussian`
/// is an isotropic Gaussian restricted to the domain. Rejection-based
/// samplers give up after `budget` proposals per sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    Uniform {
        #[serde(default = "default_budget")]
        budget: usize,
    },
    TruncatedGaussian {
        mean: Vec<f64>,
        scale: f64,
        #[serde(default = "default_budget")]
        budget: usize,
    },
}

impl PriorSpec {
    pub fn uniform() -> Self {
        PriorSpec::Uniform {
            budget: default_budget(),
        }
    }

    pub fn truncated_gaussian(mean: Vec<f64>, scale: f64) -> Self {
        PriorSpec::TruncatedGaussian {
            mean,
            scale,
            budget: default_budget(),
        }
    }

    pub fn budget(&self) -> usize {
        match self {
            PriorSpec::Uniform { budget } => *budget,
            PriorSpec::TruncatedGaussian { budget, .. } => *budget,
        }
    }

    /// Draw one sample; direct for hypercube/ball/simplex under the flat
    /// prior, rejection otherwise.
    pub fn sample<R: Rng>(&self, domain: &Domain, rng: &mut R) -> Result<Vec<f64>> {
        match self {
            PriorSpec::Uniform { budget } => sample_uniform(domain, *budget, rng),
            PriorSpec::TruncatedGaussian {
                mean,
                scale,
                budget,
            } => {
                let d = mean.len();
                for _ in 0..*budget {
                    let x: Vec<f64> = (0..d)
                        .map(|i| mean[i] + scale * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    if domain.contains(&x)? {
                        return Ok(x);
                    }
                }
                Err(SampleError::RejectionBudget { budget: *budget })
            }
        }
    }

    /// Check the prior is usable on this domain before any drawing starts.
    pub fn validate(&self, domain: &Domain) -> Result<()> {
        if self.budget() == 0 {
            return Err(SampleError::InvalidParameter(
                "rejection budget must be positive".into(),
            ));
        }
        if let PriorSpec::TruncatedGaussian { mean, scale, .. } = self {
            if mean.len() != domain.dim() {
                return Err(SampleError::InvalidParameter(format!(
                    "prior mean has dimension {}, domain has {}",
                    mean.len(),
                    domain.dim()
                )));
            }
            if !(scale.is_finite() && *scale > 0.0) {
                return Err(SampleError::InvalidParameter(
                    "prior scale must be positive".into(),
                ));
            }
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(SampleError::InvalidParameter(
                    "prior mean must be finite".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Number of Monte Carlo points used when a normalization constant has no
/// closed form.
pub const VOLUME_MC_SAMPLES: usize = 10_000_000;

/// A prior together with its log-normalization constant, so that densities
/// can be reported in absolute nats.
///
/// Closed forms cover the flat prior on hypercubes, balls and the simplex,
/// and the truncated Gaussian on hypercubes. Everything else falls back to
/// Monte Carlo over the bounding box (`mc_samples` points) and carries the
/// resulting standard error.
#[derive(Debug, Clone)]
pub struct NormalizedPrior {
    pub spec: PriorSpec,
    /// For `Uniform`: log volume of the domain. For `TruncatedGaussian`:
    /// log of the Gaussian mass inside the domain.
    pub log_norm: f64,
    /// Standard error of `log_norm` when it was estimated by Monte Carlo.
    pub log_norm_stderr: Option<f64>,
}

impl NormalizedPrior {
    pub fn new(spec: PriorSpec, domain: &Domain, mc_samples: usize, seed: u64) -> Result<Self> {
        spec.validate(domain)?;
        let (log_norm, log_norm_stderr) = match &spec {
            PriorSpec::Uniform { .. } => log_volume(domain, mc_samples, seed)?,
            PriorSpec::TruncatedGaussian { mean, scale, .. } => {
                log_gaussian_mass(domain, mean, *scale, mc_samples, seed)?
            }
        };
        Ok(NormalizedPrior {
            spec,
            log_norm,
            log_norm_stderr,
        })
    }

    /// Log density at `x`; negative infinity outside the closed domain.
    pub fn log_density(&self, domain: &Domain, x: &[f64]) -> Result<f64> {
        if !domain.contains(x)? {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(match &self.spec {
            PriorSpec::Uniform { .. } => -self.log_norm,
            PriorSpec::TruncatedGaussian { mean, scale, .. } => {
                let d = x.len() as f64;
                let mut q = 0.0;
                for (xi, mi) in x.iter().zip(mean) {
                    q += (xi - mi).powi(2);
                }
                -0.5 * q / (scale * scale)
                    - 0.5 * d * (2.0 * std::f64::consts::PI * scale * scale).ln()
                    - self.log_norm
            }
        })
    }

    /// Draw one sample from the underlying spec.
    pub fn sample<R: Rng>(&self, domain: &Domain, rng: &mut R) -> Result<Vec<f64>> {
        self.spec.sample(domain, rng)
    }
}

fn sample_uniform<R: Rng>(domain: &Domain, budget: usize, rng: &mut R) -> Result<Vec<f64>> {
    match domain {
        Domain::Hypercube { lo, hi } => Ok(lo
            .iter()
            .zip(hi)
            .map(|(a, b)| a + (b - a) * rng.gen::<f64>())
            .collect()),
        Domain::Ball { center, radius } => {
            let d = center.len();
            let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = crate::linalg::norm(&dir);
            if n < 1e-300 {
                dir = vec![0.0; d];
                dir[0] = 1.0;
            } else {
                for v in dir.iter_mut() {
                    *v /= n;
                }
            }
            let r = radius * rng.gen::<f64>().powf(1.0 / d as f64);
            Ok(center.iter().zip(&dir).map(|(c, u)| c + r * u).collect())
        }
        Domain::Simplex { dim } => {
            // Normalized exponentials give a flat Dirichlet over d+1 parts;
            // dropping the last part is uniform on the solid simplex.
            let parts: Vec<f64> = (0..dim + 1)
                .map(|_| -(1.0 - rng.gen::<f64>()).ln())
                .collect();
            let total: f64 = parts.iter().sum();
            Ok(parts[..*dim].iter().map(|p| p / total).collect())
        }
        Domain::Curve(_) | Domain::MeshCache(_) => {
            let d = domain.dim();
            let r = domain.bounding_radius();
            for _ in 0..budget {
                let x: Vec<f64> = (0..d).map(|_| r * (2.0 * rng.gen::<f64>() - 1.0)).collect();
                if domain.contains(&x)? {
                    return Ok(x);
                }
            }
            Err(SampleError::RejectionBudget { budget })
        }
    }
}

/// Log volume of the domain; Monte Carlo over the bounding box when no
/// closed form applies, returning the standard error of the log.
fn log_volume(domain: &Domain, mc_samples: usize, seed: u64) -> Result<(f64, Option<f64>)> {
    match domain {
        Domain::Hypercube { lo, hi } => {
            Ok((lo.iter().zip(hi).map(|(a, b)| (b - a).ln()).sum(), None))
        }
        Domain::Ball { center, radius } => {
            let d = center.len() as f64;
            let v = 0.5 * d * std::f64::consts::PI.ln() + d * radius.ln() - ln_gamma(0.5 * d + 1.0);
            Ok((v, None))
        }
        Domain::Simplex { dim } => Ok((-ln_gamma(*dim as f64 + 1.0), None)),
        Domain::Curve(_) | Domain::MeshCache(_) => {
            let d = domain.dim();
            let r = domain.bounding_radius();
            let hit_fraction = mc_hit_fraction(mc_samples, seed, |rng| {
                let x: Vec<f64> = (0..d).map(|_| r * (2.0 * rng.gen::<f64>() - 1.0)).collect();
                domain.contains(&x)
            })?;
            let (p, se_log) = hit_fraction;
            Ok((p.ln() + d as f64 * (2.0 * r).ln(), Some(se_log)))
        }
    }
}

/// Log of the mass a Gaussian `N(mean, scale^2 I)` places on the domain.
fn log_gaussian_mass(
    domain: &Domain,
    mean: &[f64],
    scale: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<(f64, Option<f64>)> {
    match domain {
        Domain::Hypercube { lo, hi } => {
            let n = Normal::new(0.0, 1.0).unwrap();
            let mut acc = 0.0;
            for i in 0..lo.len() {
                let mass = n.cdf((hi[i] - mean[i]) / scale) - n.cdf((lo[i] - mean[i]) / scale);
                if mass <= 0.0 {
                    return Err(SampleError::InvalidParameter(
                        "truncated Gaussian has no mass on the domain".into(),
                    ));
                }
                acc += mass.ln();
            }
            Ok((acc, None))
        }
        _ => {
            let d = mean.len();
            let (p, se_log) = mc_hit_fraction(mc_samples, seed, |rng| {
                let x: Vec<f64> = (0..d)
                    .map(|i| mean[i] + scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                domain.contains(&x)
            })?;
            Ok((p.ln(), Some(se_log)))
        }
    }
}

/// Fraction of `n` proposals accepted by `trial`, with the standard error of
/// its log. Hit counts are integers summed over fixed-size chunks with
/// per-chunk RNG streams, so the result does not depend on thread count.
fn mc_hit_fraction<F>(n: usize, seed: u64, trial: F) -> Result<(f64, f64)>
where
    F: Fn(&mut ChaCha8Rng) -> std::result::Result<bool, DomainError> + Sync,
{
    if n == 0 {
        return Err(SampleError::InvalidParameter(
            "Monte Carlo sample count must be positive".into(),
        ));
    }
    const CHUNK: usize = 1 << 16;
    let n_chunks = n.div_ceil(CHUNK);
    let counts: Vec<std::result::Result<usize, DomainError>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = path_rng(seed, c);
            let len = CHUNK.min(n - c * CHUNK);
            let mut hits = 0usize;
            for _ in 0..len {
                if trial(&mut rng)? {
                    hits += 1;
                }
            }
            Ok(hits)
        })
        .collect();
    let mut hits = 0usize;
    for c in counts {
        hits += c?;
    }
    if hits == 0 {
        return Err(SampleError::InvalidParameter(
            "Monte Carlo estimate has no hits; bounding box may be wrong".into(),
        ));
    }
    let p = hits as f64 / n as f64;
    let se_p = (p * (1.0 - p) / n as f64).sqrt();
    Ok((p, se_p / p))
}

/// Signal-to-noise ratio of the Langevin corrector.
pub const DEFAULT_R_SNR: f64 = 0.16;
/// Below this total-score norm the corrector move is skipped, since its step
/// size divides by the squared norm.
pub const CORRECTOR_SKIP_NORM: f64 = 1e-12;

/// One reflected Langevin correction with every ingredient supplied
/// explicitly: step size `sigma = 2 r^2 g^2 eps_sq / |s|^2`, proposal
/// `x + sigma s + sqrt(2 sigma) noise`, then reflection. Returns the new
/// point and whether a move was made (skipped below the norm threshold).
pub fn corrector_move(
    domain: &Domain,
    x: &[f64],
    s: &[f64],
    g: f64,
    r_snr: f64,
    eps_sq: f64,
    noise: &[f64],
) -> Result<(Vec<f64>, bool)> {
    let s_sq = norm_sq(s);
    if s_sq.sqrt() < CORRECTOR_SKIP_NORM {
        return Ok((x.to_vec(), false));
    }
    let sigma = 2.0 * r_snr * r_snr * g * g * eps_sq / s_sq;
    let step = (2.0 * sigma).sqrt();
    let prop: Vec<f64> = (0..x.len())
        .map(|i| x[i] + sigma * s[i] + step * noise[i])
        .collect();
    let refl = domain.reflect_step(x, &prop)?;
    Ok((refl.point, true))
}

/// One corrector move at `(x, t)` from stored fields: the total score is
/// `(z_fwd + z_bwd) / g`, the noise is a fresh standard normal, and the
/// noise term of the step size is its expected squared norm (the dimension),
/// which keeps the step size noise-independent.
#[allow(clippy::too_many_arguments)]
pub fn corrector_step<R: Rng>(
    domain: &Domain,
    x: &[f64],
    z_fwd: Option<&dyn VectorField>,
    z_bwd: &dyn VectorField,
    t: f64,
    g: f64,
    r_snr: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(g.is_finite() && g > 0.0) {
        return Err(SampleError::InvalidParameter(
            "corrector needs a positive diffusion scale".into(),
        ));
    }
    let d = x.len();
    let mut z = vec![0.0; d];
    z_bwd.eval(x, t, &mut z);
    if let Some(zf) = z_fwd {
        let mut extra = vec![0.0; d];
        zf.eval(x, t, &mut extra);
        for (zi, e) in z.iter_mut().zip(&extra) {
            *zi += e;
        }
    }
    let s: Vec<f64> = z.iter().map(|zi| zi / g).collect();
    let noise: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    corrector_move(domain, x, &s, g, r_snr, d as f64, &noise).map(|(p, _)| p)
}

/// One correction round over a whole batch. The step size pools the batch:
/// `sigma = 2 r^2 g^2 d / mean |s_i|^2`, so every sample moves with the same
/// step, which keeps samples with locally tiny scores from taking unbounded
/// moves. A single sample reduces to `corrector_step`. Returns the number of
/// moves applied (0 when the pooled score norm is below the skip threshold).
#[allow(clippy::too_many_arguments)]
pub fn corrector_sweep(
    domain: &Domain,
    states: &mut [Vec<f64>],
    rngs: &mut [ChaCha8Rng],
    z_fwd: Option<&dyn VectorField>,
    z_bwd: &dyn VectorField,
    t: f64,
    g: f64,
    r_snr: f64,
) -> Result<usize> {
    if states.is_empty() {
        return Ok(0);
    }
    if states.len() != rngs.len() {
        return Err(SampleError::InvalidParameter(
            "one RNG stream per sample required".into(),
        ));
    }
    if !(g.is_finite() && g > 0.0) {
        return Err(SampleError::InvalidParameter(
            "corrector needs a positive diffusion scale".into(),
        ));
    }
    let d = states[0].len();
    let scores: Vec<Vec<f64>> = states
        .par_iter()
        .map(|x| {
            let mut z = vec![0.0; d];
            z_bwd.eval(x, t, &mut z);
            if let Some(zf) = z_fwd {
                let mut extra = vec![0.0; d];
                zf.eval(x, t, &mut extra);
                for (zi, e) in z.iter_mut().zip(&extra) {
                    *zi += e;
                }
            }
            for zi in z.iter_mut() {
                *zi /= g;
            }
            z
        })
        .collect();
    let mean_sq = scores.iter().map(|s| norm_sq(s)).sum::<f64>() / states.len() as f64;
    if mean_sq.sqrt() < CORRECTOR_SKIP_NORM {
        return Ok(0);
    }
    let sigma = 2.0 * r_snr * r_snr * g * g * d as f64 / mean_sq;
    let step = (2.0 * sigma).sqrt();
    let moved: Vec<Result<()>> = states
        .par_iter_mut()
        .zip(rngs.par_iter_mut())
        .zip(scores.par_iter())
        .map(|((x, rng), s)| {
            let prop: Vec<f64> = (0..d)
                .map(|i| x[i] + sigma * s[i] + step * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let refl = domain.reflect_step(x, &prop)?;
            *x = refl.point;
            Ok(())
        })
        .collect();
    for m in moved {
        m?;
    }
    Ok(states.len())
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    /// Langevin correction rounds after each backward step (0 disables).
    pub corrector_steps: usize,
    pub r_snr: f64,
    /// Mute the score on the step arriving at the data end, matching the
    /// batch simulators.
    pub truncate_endpoint_scores: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            corrector_steps: 0,
            r_snr: DEFAULT_R_SNR,
            truncate_endpoint_scores: true,
        }
    }
}

#[derive(Debug)]
pub struct GenerateOutcome {
    pub samples: Vec<Vec<f64>>,
    /// Boundary local time accumulated per sample, averaged.
    pub mean_local_time: f64,
    /// Steps that exhausted the reflection fold cap.
    pub fallback_steps: usize,
    /// Corrector moves actually applied (skips excluded).
    pub corrector_moves: usize,
}

/// Draw `n` samples by integrating the backward reflected SDE from the prior
/// at the far end of the grid down to time zero, with optional pooled
/// Langevin correction after each step. Sample `i` uses RNG stream `i` of
/// `seed`, so the output is reproducible for any thread count.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    domain: &Domain,
    drift: &DriftSpec,
    epsilon: f64,
    prior: &PriorSpec,
    z_bwd: &dyn VectorField,
    z_fwd: Option<&dyn VectorField>,
    grid: &TimeGrid,
    n: usize,
    opts: &GenerateOptions,
    seed: u64,
) -> Result<GenerateOutcome> {
    drift.validate().map_err(SdeError::from)?;
    if n == 0 {
        return Err(SampleError::InvalidParameter(
            "sample count must be positive".into(),
        ));
    }
    let score = ScoreFromZ {
        z: z_bwd,
        drift,
        epsilon,
    };
    if opts.corrector_steps == 0 {
        // No cross-sample coupling: each sample runs its whole trajectory
        // independently.
        let per_sample: Vec<Result<(Vec<f64>, f64, usize)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = path_rng(seed, i);
                let mut x = prior.sample(domain, &mut rng)?;
                let mut local_time = 0.0;
                let mut fallbacks = 0usize;
                for k in (0..grid.n_steps()).rev() {
                    let use_score = !(opts.truncate_endpoint_scores && k == 0);
                    let (next, hit) = backward_em_step(
                        domain,
                        drift,
                        epsilon,
                        &score,
                        &x,
                        grid.points()[k + 1],
                        grid.dt(k),
                        use_score,
                        &mut rng,
                    )?;
                    x = next;
                    if let Some(h) = hit {
                        local_time += h.local_time;
                        if h.fallback {
                            fallbacks += 1;
                        }
                    }
                }
                Ok((x, local_time, fallbacks))
            })
            .collect();
        let mut samples = Vec::with_capacity(n);
        let mut local_time = 0.0;
        let mut fallback_steps = 0usize;
        for r in per_sample {
            let (x, lt, fb) = r?;
            samples.push(x);
            local_time += lt;
            fallback_steps += fb;
        }
        return Ok(GenerateOutcome {
            samples,
            mean_local_time: local_time / n as f64,
            fallback_steps,
            corrector_moves: 0,
        });
    }

    // Corrector rounds pool the batch score norm, so the steps advance in
    // lockstep: predict all samples, then sweep.
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| path_rng(seed, i)).collect();
    let starts: Vec<Result<Vec<f64>>> = rngs
        .par_iter_mut()
        .map(|rng| prior.sample(domain, rng))
        .collect();
    let mut states = Vec::with_capacity(n);
    for s in starts {
        states.push(s?);
    }
    let mut local_times = vec![0.0f64; n];
    let mut fallbacks = vec![0usize; n];
    let mut corrector_moves = 0usize;
    for k in (0..grid.n_steps()).rev() {
        let use_score = !(opts.truncate_endpoint_scores && k == 0);
        let stepped: Vec<Result<()>> = states
            .par_iter_mut()
            .zip(rngs.par_iter_mut())
            .zip(local_times.par_iter_mut())
            .zip(fallbacks.par_iter_mut())
            .map(|(((x, rng), lt), fb)| {
                let (next, hit) = backward_em_step(
                    domain,
                    drift,
                    epsilon,
                    &score,
                    x,
                    grid.points()[k + 1],
                    grid.dt(k),
                    use_score,
                    rng,
                )?;
                *x = next;
                if let Some(h) = hit {
                    *lt += h.local_time;
                    if h.fallback {
                        *fb += 1;
                    }
                }
                Ok(())
            })
            .collect();
        for s in stepped {
            s?;
        }
        let t = grid.points()[k];
        let g = drift.g_eff(t, epsilon);
        if g > 0.0 {
            for _ in 0..opts.corrector_steps {
                corrector_moves += corrector_sweep(
                    domain,
                    &mut states,
                    &mut rngs,
                    z_fwd,
                    z_bwd,
                    t,
                    g,
                    opts.r_snr,
                )?;
            }
        }
    }
    Ok(GenerateOutcome {
        samples: states,
        mean_local_time: local_times.iter().sum::<f64>() / n as f64,
        fallback_steps: fallbacks.iter().sum(),
        corrector_moves,
    })
}

#[derive(Debug, Clone)]
pub struct NllOptions {
    /// Divergence estimator; `None` selects the exact mode up to dimension 8
    /// and Hutchinson probes above.
    pub divergence: Option<DivergenceMode>,
    /// Probe count for the automatic Hutchinson fallback.
    pub hutchinson_probes: usize,
    /// A flow endpoint further outside the domain than this is flagged;
    /// `None` scales 1e-6 by the domain size.
    pub guard_tol: Option<f64>,
    pub truncate_endpoint_scores: bool,
    /// Base seed for per-sample probe streams.
    pub seed: u64,
}

impl Default for NllOptions {
    fn default() -> Self {
        NllOptions {
            divergence: None,
            hutchinson_probes: 32,
            guard_tol: None,
            truncate_endpoint_scores: true,
            seed: 0,
        }
    }
}

/// Negative log likelihood of a batch under the probability-flow ODE.
#[derive(Debug, Clone, Serialize)]
pub struct NllReport {
    pub per_sample_nats: Vec<f64>,
    pub mean_nats: f64,
    pub bits_per_dim: f64,
    /// Standard error of the batch mean.
    pub stderr: f64,
    /// Indices whose flow left the domain beyond the guard tolerance.
    pub flagged: Vec<usize>,
    /// Standard error of the prior log-normalization when it was estimated
    /// by Monte Carlo.
    pub prior_log_norm_stderr: Option<f64>,
}

fn probe_seed(base: u64, sample: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(sample as u64)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Evaluate `-log p(x0)` for each batch point: integrate the flow ODE from
/// time zero to the far end, accumulate the drift divergence, and add the
/// prior log-density at the endpoint.
#[allow(clippy::too_many_arguments)]
pub fn negative_log_likelihood(
    domain: &Domain,
    drift: &DriftSpec,
    epsilon: f64,
    prior: &NormalizedPrior,
    z_fwd: Option<&dyn VectorField>,
    z_bwd: &dyn VectorField,
    x0: &[Vec<f64>],
    grid: &TimeGrid,
    opts: &NllOptions,
) -> Result<NllReport> {
    if x0.is_empty() {
        return Err(SampleError::InvalidParameter("empty batch".into()));
    }
    let d = domain.dim();
    let zero = ZeroField;
    let score_fwd: Box<dyn VectorField> = match z_fwd {
        Some(z) => Box::new(ScoreFromZ { z, drift, epsilon }),
        None => Box::new(zero),
    };
    let score_bwd = ScoreFromZ {
        z: z_bwd,
        drift,
        epsilon,
    };
    let guard = opts
        .guard_tol
        .unwrap_or_else(|| 1e-6 * (1.0 + domain.bounding_radius()));
    let sim = SimOptions {
        truncate_endpoint_scores: opts.truncate_endpoint_scores,
    };
    let per_sample: Vec<Result<(f64, bool)>> = x0
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mode = match &opts.divergence {
                Some(DivergenceMode::Fd) => DivergenceMode::Fd,
                Some(DivergenceMode::Hutchinson { probes, seed }) => DivergenceMode::Hutchinson {
                    probes: *probes,
                    seed: probe_seed(*seed, i),
                },
                None => {
                    if d <= 8 {
                        DivergenceMode::Fd
                    } else {
                        DivergenceMode::Hutchinson {
                            probes: opts.hutchinson_probes,
                            seed: probe_seed(opts.seed, i),
                        }
                    }
                }
            };
            let out = probability_flow(
                domain,
                drift,
                epsilon,
                score_fwd.as_ref(),
                &score_bwd,
                x,
                grid,
                false,
                Some(mode),
                &sim,
            )?;
            let log_pt = prior.log_density(domain, &out.terminal)?;
            let nll = -(log_pt + out.div_integral);
            Ok((nll, out.max_excursion > guard))
        })
        .collect();
    let mut per_sample_nats = Vec::with_capacity(x0.len());
    let mut flagged = Vec::new();
    for (i, r) in per_sample.into_iter().enumerate() {
        let (nll, flag) = r?;
        per_sample_nats.push(nll);
        if flag {
            flagged.push(i);
        }
    }
    let n = per_sample_nats.len() as f64;
    let mean_nats = per_sample_nats.iter().sum::<f64>() / n;
    let var = per_sample_nats
        .iter()
        .map(|v| (v - mean_nats).powi(2))
        .sum::<f64>()
        / (n - 1.0).max(1.0);
    let stderr = (var / n).sqrt();
    Ok(NllReport {
        per_sample_nats,
        mean_nats,
        bits_per_dim: mean_nats / (d as f64 * std::f64::consts::LN_2),
        stderr,
        flagged,
        prior_log_norm_stderr: prior.log_norm_stderr,
    })
}
