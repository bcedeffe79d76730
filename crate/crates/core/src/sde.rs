//! Reflected stochastic differential equation simulation.
//!
//! Processes live on a compact [`Domain`] and evolve by Euler-Maruyama steps
//! that are folded back across the boundary whenever a proposal exits; each
//! fold is recorded as a boundary-local-time increment of magnitude equal to
//! the distance between the folded point and the unconstrained proposal.
//!
//! The drift has the shape `f(x, t) + g_eff(t)^2 s(x, t)` in the forward
//! direction and `f(x, t) - g_eff(t)^2 s(x, t)` in the backward direction,
//! where `s` is a log-density gradient ("score") field and
//! `g_eff(t) = sqrt(2 eps) g(t)` is the effective diffusion in front of the
//! Brownian increment. The probability-flow ODE replaces the noise with the
//! deterministic drift `f + (g_eff^2 / 2)(s_fwd - s_bwd)` and can accumulate
//! the drift divergence along its path for likelihood evaluation.

use crate::domains::{Domain, DomainError};
use crate::linalg::{all_finite, dist, norm};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Result<T> = std::result::Result<T, SdeError>;

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("domain error: {0}")]
    Domain(#[from] DomainError),
    #[error("state became non-finite at t = {t}")]
    NonFinite { t: f64 },
    #[error("invalid input: {0}")]
    BadInput(String),
}

/// Strictly increasing time points `t_0 = a < ... < t_n = b`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid over `[0, t_end]` with `n_steps` steps.
    pub fn uniform(t_end: f64, n_steps: usize) -> Result<Self> {
        Self::uniform_between(0.0, t_end, n_steps)
    }

    /// Uniform grid over `[a, b]` with `n_steps` steps.
    pub fn uniform_between(a: f64, b: f64, n_steps: usize) -> Result<Self> {
        if !(b > a) || !a.is_finite() || !b.is_finite() {
            return Err(SdeError::InvalidGrid("need finite b > a".into()));
        }
        if n_steps == 0 {
            return Err(SdeError::InvalidGrid("need at least one step".into()));
        }
        let t = (0..=n_steps)
            .map(|k| a + (b - a) * k as f64 / n_steps as f64)
            .collect();
        Ok(TimeGrid { t })
    }

    pub fn from_points(t: Vec<f64>) -> Result<Self> {
        if t.len() < 2 {
            return Err(SdeError::InvalidGrid("need at least two points".into()));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(SdeError::InvalidGrid("non-finite time point".into()));
        }
        if t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SdeError::InvalidGrid("points must increase".into()));
        }
        Ok(TimeGrid { t })
    }

    pub fn points(&self) -> &[f64] {
        &self.t
    }

    pub fn n_steps(&self) -> usize {
        self.t.len() - 1
    }

    pub fn t_start(&self) -> f64 {
        self.t[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.t.last().unwrap()
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.t[k + 1] - self.t[k]
    }
}

/// Base drift and diffusion schedule of the reference process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftSpec {
    /// No drift, unit base diffusion.
    Zero,
    /// Mean-reverting drift `f = -theta x`, unit base diffusion.
    ReflectedOu { theta: f64 },
    /// Variance-exploding schedule: no drift, effective diffusion
    /// `g_eff(t) = sigma_min r^(t/t_end) sqrt(2 ln r / t_end)` with
    /// `r = sigma_max / sigma_min`, so that the accumulated variance is
    /// `sigma_min^2 (r^(2t/t_end) - 1)`.
    Rve {
        sigma_min: f64,
        sigma_max: f64,
        t_end: f64,
    },
    /// Variance-preserving schedule: `f = -beta(t) x / 2` with `beta` linear
    /// from `beta_min` to `beta_max` over `[0, t_end]`, and
    /// `g_eff(t) = sqrt(beta(t))`.
    Rvp {
        beta_min: f64,
        beta_max: f64,
        t_end: f64,
    },
}

impl DriftSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DriftSpec::Zero => Ok(()),
            DriftSpec::ReflectedOu { theta } => {
                if theta.is_finite() {
                    Ok(())
                } else {
                    Err(SdeError::BadInput("non-finite theta".into()))
                }
            }
            DriftSpec::Rve {
                sigma_min,
                sigma_max,
                t_end,
            } => {
                if *sigma_min > 0.0 && *sigma_max > *sigma_min && *t_end > 0.0 {
                    Ok(())
                } else {
                    Err(SdeError::BadInput(
                        "need 0 < sigma_min < sigma_max and t_end > 0".into(),
                    ))
                }
            }
            DriftSpec::Rvp {
                beta_min,
                beta_max,
                t_end,
            } => {
                if *beta_min > 0.0 && *beta_max >= *beta_min && *t_end > 0.0 {
                    Ok(())
                } else {
                    Err(SdeError::BadInput(
                        "need 0 < beta_min <= beta_max and t_end > 0".into(),
                    ))
                }
            }
        }
    }

    /// Base drift `f(x, t)`, written into `out`.
    pub fn f(&self, x: &[f64], t: f64, out: &mut [f64]) {
        match self {
            DriftSpec::Zero | DriftSpec::Rve { .. } => out.fill(0.0),
            DriftSpec::ReflectedOu { theta } => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = -theta * v;
                }
            }
            DriftSpec::Rvp { .. } => {
                let b = self.beta(t);
                for (o, v) in out.iter_mut().zip(x) {
                    *o = -0.5 * b * v;
                }
            }
        }
    }

    /// Divergence of the base drift.
    pub fn div_f(&self, _x: &[f64], t: f64, dim: usize) -> f64 {
        match self {
            DriftSpec::Zero | DriftSpec::Rve { .. } => 0.0,
            DriftSpec::ReflectedOu { theta } => -theta * dim as f64,
            DriftSpec::Rvp { .. } => -0.5 * self.beta(t) * dim as f64,
        }
    }

    fn beta(&self, t: f64) -> f64 {
        match self {
            DriftSpec::Rvp {
                beta_min,
                beta_max,
                t_end,
            } => beta_min + (beta_max - beta_min) * (t / t_end).clamp(0.0, 1.0),
            _ => 0.0,
        }
    }

    /// Effective diffusion `g_eff(t) = sqrt(2 eps) g(t)` multiplying the
    /// Brownian increment.
    pub fn g_eff(&self, t: f64, epsilon: f64) -> f64 {
        match self {
            DriftSpec::Zero | DriftSpec::ReflectedOu { .. } => (2.0 * epsilon).sqrt(),
            DriftSpec::Rve {
                sigma_min,
                sigma_max,
                t_end,
            } => {
                let r = sigma_max / sigma_min;
                sigma_min * r.powf((t / t_end).clamp(0.0, 1.0)) * (2.0 * r.ln() / t_end).sqrt()
            }
            DriftSpec::Rvp { .. } => self.beta(t).sqrt(),
        }
    }

    /// Accumulated noise variance `int_0^t g_eff^2` for schedules without
    /// drift; used by closed-form kernel references.
    pub fn accumulated_variance(&self, t: f64, epsilon: f64) -> f64 {
        match self {
            DriftSpec::Zero => 2.0 * epsilon * t,
            DriftSpec::Rve {
                sigma_min,
                sigma_max,
                t_end,
            } => {
                let r = sigma_max / sigma_min;
                sigma_min * sigma_min * (r.powf(2.0 * (t / t_end).clamp(0.0, 1.0)) - 1.0)
            }
            _ => f64::NAN,
        }
    }
}

/// Time-dependent vector field on the domain, such as a score estimate.
pub trait VectorField: Sync {
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]);
}

/// The identically-zero field.
pub struct ZeroField;

impl VectorField for ZeroField {
    fn eval(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Score-style view of a scaled field: networks and stored fields follow the
/// convention `z = g_eff * score`, while the simulators and the flow ODE
/// expect plain scores, so this wrapper divides by `g_eff(t)`.
pub struct ScoreFromZ<'a> {
    pub z: &'a dyn VectorField,
    pub drift: &'a DriftSpec,
    pub epsilon: f64,
}

impl VectorField for ScoreFromZ<'_> {
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.z.eval(x, t, out);
        let g = self.drift.g_eff(t, self.epsilon);
        if g > 0.0 {
            for o in out.iter_mut() {
                *o /= g;
            }
        }
    }
}

impl<F: Fn(&[f64], f64, &mut [f64]) + Sync> VectorField for F {
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self(x, t, out)
    }
}

/// Central-difference divergence of a vector field, one coordinate pair of
/// evaluations per dimension.
pub fn divergence_fd(field: &dyn VectorField, x: &[f64], t: f64) -> f64 {
    let d = x.len();
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; d];
    let mut fm = vec![0.0; d];
    let mut acc = 0.0;
    for i in 0..d {
        let h = 1e-5 * x[i].abs().max(1.0);
        let orig = xp[i];
        xp[i] = orig + h;
        field.eval(&xp, t, &mut fp);
        xp[i] = orig - h;
        field.eval(&xp, t, &mut fm);
        xp[i] = orig;
        acc += (fp[i] - fm[i]) / (2.0 * h);
    }
    acc
}

/// Hutchinson divergence estimate with Rademacher probes.
pub fn divergence_hutchinson<R: Rng>(
    field: &dyn VectorField,
    x: &[f64],
    t: f64,
    probes: usize,
    rng: &mut R,
) -> f64 {
    let d = x.len();
    let h = 1e-5 * (1.0 + norm(x));
    let mut xp = vec![0.0; d];
    let mut xm = vec![0.0; d];
    let mut fp = vec![0.0; d];
    let mut fm = vec![0.0; d];
    let mut acc = 0.0;
    for _ in 0..probes.max(1) {
        let v: Vec<f64> = (0..d)
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        for i in 0..d {
            xp[i] = x[i] + h * v[i];
            xm[i] = x[i] - h * v[i];
        }
        field.eval(&xp, t, &mut fp);
        field.eval(&xm, t, &mut fm);
        let mut probe = 0.0;
        for i in 0..d {
            probe += v[i] * (fp[i] - fm[i]);
        }
        acc += probe / (2.0 * h);
    }
    acc / probes.max(1) as f64
}

/// Simulation switches.
#[derive(Debug, Clone)]
pub struct SimOptions {
    /// Zero the score term on the step adjacent to the endpoint where that
    /// score direction degenerates: the final step before `t_end` in the
    /// forward direction, the final step before `t_start` in the backward
    /// direction. On by default.
    pub truncate_endpoint_scores: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            truncate_endpoint_scores: true,
        }
    }
}

/// Boundary contact during one step.
#[derive(Debug, Clone)]
pub struct HitRecord {
    /// Boundary point of the first fold.
    pub boundary: Vec<f64>,
    /// Inward unit normal there.
    pub normal: Vec<f64>,
    /// Distance between the reflected arrival point and the unconstrained
    /// proposal.
    pub local_time: f64,
    /// True when the fold cap was exhausted and the arrival point fell back
    /// to the boundary.
    pub fallback: bool,
}

/// A sampled path on the grid, with sparse boundary-contact records.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: TimeGrid,
    /// `states[k]` is the position at `grid.points()[k]`.
    pub states: Vec<Vec<f64>>,
    /// `hits[k]` describes boundary contact during the transition between
    /// grid points `k` and `k + 1`.
    pub hits: Vec<Option<HitRecord>>,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().unwrap()
    }

    pub fn initial(&self) -> &[f64] {
        &self.states[0]
    }

    /// Total boundary local time accumulated along the path.
    pub fn local_time(&self) -> f64 {
        self.hits.iter().flatten().map(|h| h.local_time).sum()
    }

    pub fn hit_count(&self) -> usize {
        self.hits.iter().flatten().count()
    }
}

/// Batch of terminal states without stored paths.
#[derive(Debug, Clone)]
pub struct TerminalBatch {
    pub points: Vec<Vec<f64>>,
    pub local_times: Vec<f64>,
    pub fallback_steps: usize,
}

struct StepOutcome {
    next: Vec<f64>,
    hit: Option<HitRecord>,
}

/// One reflected Euler-Maruyama step from `x` at time `t`.
///
/// `dir` is +1 forward, -1 backward; the score coefficient is
/// `dir * g_eff^2` and `noise` holds standard normal draws.
fn em_step(
    domain: &Domain,
    drift: &DriftSpec,
    epsilon: f64,
    score: &dyn VectorField,
    x: &[f64],
    t: f64,
    dt: f64,
    dir: f64,
    noise: &[f64],
    use_score: bool,
) -> Result<StepOutcome> {
    let d = x.len();
    let mut fx = vec![0.0; d];
    drift.f(x, t, &mut fx);
    let g_eff = drift.g_eff(t, epsilon);
    let mut s = vec![0.0; d];
    if use_score {
        score.eval(x, t, &mut s);
    }
    let root_dt = dt.sqrt();
    let mut prop = vec![0.0; d];
    for i in 0..d {
        prop[i] =
            x[i] + dir * (fx[i] + dir * g_eff * g_eff * s[i]) * dt + g_eff * root_dt * noise[i];
    }
    if !all_finite(&prop) {
        return Err(SdeError::NonFinite { t });
    }
    let r = domain.reflect_step(x, &prop)?;
    let hit = if r.hit {
        Some(HitRecord {
            local_time: dist(&r.point, &prop),
            boundary: r.boundary.unwrap_or_else(|| r.point.clone()),
            normal: r.normal.unwrap_or_else(|| vec![0.0; d]),
            fallback: r.fallback,
        })
    } else {
        None
    };
    Ok(StepOutcome { next: r.point, hit })
}

fn check_start(domain: &Domain, x0: &[f64]) -> Result<()> {
    if !domain.contains(x0)? {
        return Err(SdeError::BadInput(
            "initial state lies outside the domain".into(),
        ));
    }
    Ok(())
}

/// Forward reflected SDE path started at `x0` at the first grid time,
/// with drift `f + g_eff^2 score`.
pub fn simulate_forward<R: Rng>(
    domain: &Domain,
    drift: &DriftSpec,
    epsilon: f64,
    score: &dyn VectorField,
    x0: &[f64],
    grid: &TimeGrid,
    opts: &SimOptions,
    rng: &mut R,
) -> Result<Trajectory> {
    drift.validate()?;
    check_start(domain, x0)?;
    let n = grid.n_steps();
    let d = x0.len();
    let mut states = Vec::with_capacity(n + 1);
    let mut hits = Vec::with_capacity(n);
    states.push(x0.to_vec());
    let mut noise = vec![0.0; d];
    for k in 0..n {
        for v in noise.iter_mut() {
            *v = rng.sample(rand_distr::StandardNormal);
        }
        let use_score = !(opts.truncate_endpoint_scores && k == n - 1);
        let out = em_step(
            domain,
            drift,
            epsilon,
            score,
            &states[k],
            grid.points()[k],
            grid.dt(k),
            1.0,
            &noise,
            use_score,
        )?;
        states.push(out.next);
        hits.push(out.hit);
    }
    Ok(Trajectory {
        grid: grid.clone(),
        states,
        hits,
    })
}

/// Backward reflected SDE path started at `x_end` at the last grid time,
/// integrating down the grid with drift `f - g_eff^2 score`.
pub fn simulate_backward<R: Rng>(
    domain: &Domain,
    drift: &DriftSpec,
    epsilon: f64,
    score: &dyn VectorField,
    x_end: &[f64],
    grid: &TimeGrid,
    opts: &SimOptions,
    rng: &mut R,
) -> Result<Trajectory> {
    drift.validate()?;
    check_start(domain, x_end)?;
    let n = grid.n_steps();
    let d = x_end.len();
    let mut states = vec![Vec::new(); n + 1];
    let mut hits: Vec<Option<HitRecord>> = (0..n).map(|_| None).collect();
    states[n] = x_end.to_vec();
    let mut noise = vec![0.0; d];
    for k in (0..n).rev() {
        for v in noise.iter_mut() {
            *v = rng.sample(rand_distr::StandardNormal);
        }
        let use_score = !(opts.truncate_endpoint_scores && k == 0);
        let out = em_step(
            domain,
            drift,
            epsilon,
            score,
            &states[k + 1],
            grid.points()[k + 1],
            grid.dt(k),
            -1.0,
            &noise,
            use_score,
        )?;
        states[k] = out.next;
        hits[k] = out.hit;
    }
    Ok(Trajectory {
        grid: grid.clone(),
        states,
        hits,
    })
}

/// One reflected backward transition from `x` at time `t` to `t - dt`,
/// drawing the noise from `rng`; returns the new state and any hit record.
#[allow(clippy::too_many_arguments)]
pub fn backward_em_step<R: Rng>(
    domain: &Domain,
    drift: &DriftSpec,
    epsilon: f64,
    score: &dyn VectorField,
    x: &[f64],
    t: f64,
    dt: f64,
    use_score: bool,
    rng: &mut R,
) -> Result<(Vec<f64>, Option<HitRecord>)> {
    let mut noise = vec![0.0; x.len()];
    for v in noise.iter_mut() {
        *v = rng.sample(rand_distr::StandardNormal);
    }
    let out = em_step(
        domain, drift, epsilon, score, x, t, dt, -1.0, &noise, use_score,
    )?;
    Ok((out.next, out.hit))
}

/// Deterministic per-path generator: one seed, one independent stream per
/// path index.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Forward paths from each start, parallelized; path `i` draws from an RNG
/// stream indexed by `i`, so results do not depend on thread count.
pub fn simulate_forward_batch(
    domain: &Domain,
    drift: &DriftSpec,
    epsilon: f64,
    score: &dyn VectorField,
    starts: &[Vec<f64>],
    grid: &TimeGrid,
    opts: &SimOptions,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    starts
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let mut rng = path_rng(seed, i);
            simulate_forward(domain, drift, epsilon, score, x0, grid, opts, &mut rng)
        })
        .collect()
}

/// Backward counterpart of [`simulate_forward_batch`].
pub fn simulate_backward_batch(
    domain: &Domain,
    drift: &DriftSpec,
    epsilon: f64,
    score: &dyn VectorField,
    ends: &[Vec<f64>],
    grid: &TimeGrid,
    opts: &SimOptions,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    ends.par_iter()
        .enumerate()
        .map(|(i, x_end)| {
            let mut rng = path_rng(seed, i);
            simulate_backward(domain, drift, epsilon, score, x_end, grid, opts, &mut rng)
        })
        .collect()
}

/// Forward simulation keeping only terminal states and local-time totals;
/// memory use is independent of the number of steps.
pub fn simulate_forward_terminal(
    domain: &Domain,
    drift: &DriftSpec,
    epsilon: f64,
    score: &dyn VectorField,
    starts: &[Vec<f64>],
    grid: &TimeGrid,
    opts: &SimOptions,
    seed: u64,
) -> Result<TerminalBatch> {
    let outcomes: Vec<(Vec<f64>, f64, usize)> = starts
        .par_iter()
        .enumerate()
        .map(|(i, x0)| -> Result<(Vec<f64>, f64, usize)> {
            drift.validate()?;
            check_start(domain, x0)?;
            let mut rng = path_rng(seed, i);
            let n = grid.n_steps();
            let d = x0.len();
            let mut x = x0.clone();
            let mut noise = vec![0.0; d];
            let mut local = 0.0;
            let mut fallbacks = 0usize;
            for k in 0..n {
                for v in noise.iter_mut() {
                    *v = rng.sample(rand_distr::StandardNormal);
                }
                let use_score = !(opts.truncate_endpoint_scores && k == n - 1);
                let out = em_step(
                    domain,
                    drift,
                    epsilon,
                    score,
                    &x,
                    grid.points()[k],
                    grid.dt(k),
                    1.0,
                    &noise,
                    use_score,
                )?;
                if let Some(h) = &out.hit {
                    local += h.local_time;
                    if h.fallback {
                        fallbacks += 1;
                    }
                }
                x = out.next;
            }
            Ok((x, local, fallbacks))
        })
        .collect::<Result<_>>()?;
    let mut batch = TerminalBatch {
        points: Vec::with_capacity(outcomes.len()),
        local_times: Vec::with_capacity(outcomes.len()),
        fallback_steps: 0,
    };
    for (p, l, f) in outcomes {
        batch.points.push(p);
        batch.local_times.push(l);
        batch.fallback_steps += f;
    }
    Ok(batch)
}

/// Backward counterpart of [`simulate_forward_terminal`]: integrates from the
/// grid end down to the start and returns the arrival states.
pub fn simulate_backward_terminal(
    domain: &Domain,
    drift: &DriftSpec,
    epsilon: f64,
    score: &dyn VectorField,
    ends: &[Vec<f64>],
    grid: &TimeGrid,
    opts: &SimOptions,
    seed: u64,
) -> Result<TerminalBatch> {
    let outcomes: Vec<(Vec<f64>, f64, usize)> = ends
        .par_iter()
        .enumerate()
        .map(|(i, x_end)| -> Result<(Vec<f64>, f64, usize)> {
            drift.validate()?;
            check_start(domain, x_end)?;
            let mut rng = path_rng(seed, i);
            let n = grid.n_steps();
            let d = x_end.len();
            let mut x = x_end.clone();
            let mut noise = vec![0.0; d];
            let mut local = 0.0;
            let mut fallbacks = 0usize;
            for k in (0..n).rev() {
                for v in noise.iter_mut() {
                    *v = rng.sample(rand_distr::StandardNormal);
                }
                let use_score = !(opts.truncate_endpoint_scores && k == 0);
                let out = em_step(
                    domain,
                    drift,
                    epsilon,
                    score,
                    &x,
                    grid.points()[k + 1],
                    grid.dt(k),
                    -1.0,
                    &noise,
                    use_score,
                )?;
                if let Some(h) = &out.hit {
                    local += h.local_time;
                    if h.fallback {
                        fallbacks += 1;
                    }
                }
                x = out.next;
            }
            Ok((x, local, fallbacks))
        })
        .collect::<Result<_>>()?;
    let mut batch = TerminalBatch {
        points: Vec::with_capacity(outcomes.len()),
        local_times: Vec::with_capacity(outcomes.len()),
        fallback_steps: 0,
    };
    for (p, l, f) in outcomes {
        batch.points.push(p);
        batch.local_times.push(l);
        batch.fallback_steps += f;
    }
    Ok(batch)
}

/// Constrain a free-space discrete path to the domain by metric projection:
/// `y_{k+1} = proj(y_k + dw_k)`, recording `|proj(p) - p|` as the local-time
/// increment of step `k`. Returns the constrained path and the increments.
pub fn skorokhod_decompose(
    domain: &Domain,
    start: &[f64],
    increments: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    check_start(domain, start)?;
    let d = start.len();
    let mut path = Vec::with_capacity(increments.len() + 1);
    path.push(start.to_vec());
    let mut local = Vec::with_capacity(increments.len());
    for dw in increments {
        if dw.len() != d {
            return Err(SdeError::BadInput("increment dimension mismatch".into()));
        }
        let prev = path.last().unwrap();
        let prop: Vec<f64> = prev.iter().zip(dw).map(|(a, b)| a + b).collect();
        if !all_finite(&prop) {
            return Err(SdeError::NonFinite { t: f64::NAN });
        }
        let next = domain.project(&prop)?;
        local.push(dist(&next, &prop));
        path.push(next);
    }
    Ok((path, local))
}

/// How to evaluate score-field divergences along the probability flow.
#[derive(Debug, Clone)]
pub enum DivergenceMode {
    /// Per-coordinate central differences (exact up to O(h^2)).
    Fd,
    /// Hutchinson probes with a dedicated RNG stream.
    Hutchinson { probes: usize, seed: u64 },
}

/// Probability-flow integration output.
#[derive(Debug, Clone)]
pub struct FlowOutcome {
    /// State at the far end of the integration.
    pub terminal: Vec<f64>,
    /// Integral of the flow-drift divergence along the path (zero when
    /// divergence tracking is off).
    pub div_integral: f64,
    /// Number of steps whose endpoint had to be projected back inside.
    pub projections: usize,
    /// Largest distance by which any step endpoint left the domain before
    /// projection.
    pub max_excursion: f64,
}

/// Integrate the probability-flow ODE `dx/dt = f + (g_eff^2 / 2)(s_fwd -
/// s_bwd)` across the grid with classical fourth-order Runge-Kutta steps,
/// projecting back into the domain after any step that exits. Set `backward`
/// to integrate from the last grid point down to the first. When
/// `divergence` is provided the drift divergence is accumulated along the
/// path with the same quadrature weights.
#[allow(clippy::too_many_arguments)]
pub fn probability_flow(
    domain: &Domain,
    drift: &DriftSpec,
    epsilon: f64,
    score_fwd: &dyn VectorField,
    score_bwd: &dyn VectorField,
    x_start: &[f64],
    grid: &TimeGrid,
    backward: bool,
    divergence: Option<DivergenceMode>,
    opts: &SimOptions,
) -> Result<FlowOutcome> {
    drift.validate()?;
    check_start(domain, x_start)?;
    let n = grid.n_steps();
    let d = x_start.len();
    let mut x = x_start.to_vec();
    let mut div_acc = 0.0;
    let mut projections = 0usize;
    let mut max_excursion = 0.0f64;
    let mut hutch_rng = match &divergence {
        Some(DivergenceMode::Hutchinson { seed, .. }) => Some(ChaCha8Rng::seed_from_u64(*seed)),
        _ => None,
    };

    let steps: Vec<usize> = if backward {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for k in steps {
        let (t_from, dt) = if backward {
            (grid.points()[k + 1], -grid.dt(k))
        } else {
            (grid.points()[k], grid.dt(k))
        };
        // Truncation masks are per-step: the step touching the grid end mutes
        // the forward score, the step touching the grid start mutes the
        // backward score.
        let mute_fwd = opts.truncate_endpoint_scores && k == n - 1;
        let mute_bwd = opts.truncate_endpoint_scores && k == 0;

        let eval = |x: &[f64], t: f64, out: &mut [f64]| {
            let mut fx = vec![0.0; d];
            drift.f(x, t, &mut fx);
            let g2h = 0.5 * drift.g_eff(t, epsilon).powi(2);
            let mut sf = vec![0.0; d];
            if !mute_fwd {
                score_fwd.eval(x, t, &mut sf);
            }
            let mut sb = vec![0.0; d];
            if !mute_bwd {
                score_bwd.eval(x, t, &mut sb);
            }
            for i in 0..d {
                out[i] = fx[i] + g2h * (sf[i] - sb[i]);
            }
        };
        let div_eval = |x: &[f64], t: f64, rng: &mut Option<ChaCha8Rng>| -> f64 {
            let base = drift.div_f(x, t, d);
            let g2h = 0.5 * drift.g_eff(t, epsilon).powi(2);
            let mut field_div = |field: &dyn VectorField, mute: bool| -> f64 {
                if mute {
                    return 0.0;
                }
                match (&divergence, rng.as_mut()) {
                    (Some(DivergenceMode::Fd), _) => divergence_fd(field, x, t),
                    (Some(DivergenceMode::Hutchinson { probes, .. }), Some(r)) => {
                        divergence_hutchinson(field, x, t, *probes, r)
                    }
                    _ => 0.0,
                }
            };
            base + g2h * (field_div(score_fwd, mute_fwd) - field_div(score_bwd, mute_bwd))
        };

        let mut k1 = vec![0.0; d];
        let mut k2 = vec![0.0; d];
        let mut k3 = vec![0.0; d];
        let mut k4 = vec![0.0; d];
        let mut stage = vec![0.0; d];
        eval(&x, t_from, &mut k1);
        for i in 0..d {
            stage[i] = x[i] + 0.5 * dt * k1[i];
        }
        eval(&stage, t_from + 0.5 * dt, &mut k2);
        for i in 0..d {
            stage[i] = x[i] + 0.5 * dt * k2[i];
        }
        eval(&stage, t_from + 0.5 * dt, &mut k3);
        for i in 0..d {
            stage[i] = x[i] + dt * k3[i];
        }
        eval(&stage, t_from + dt, &mut k4);
        if divergence.is_some() {
            // Simpson-style quadrature across the step, matching the RK4
            // state weights.
            let d1 = div_eval(&x, t_from, &mut hutch_rng);
            let mut mid = vec![0.0; d];
            for i in 0..d {
                mid[i] = x[i] + 0.5 * dt * k1[i];
            }
            let d2 = div_eval(&mid, t_from + 0.5 * dt, &mut hutch_rng);
            let mut end = vec![0.0; d];
            for i in 0..d {
                end[i] = x[i] + dt * k3[i];
            }
            let d3 = div_eval(&end, t_from + dt, &mut hutch_rng);
            div_acc += dt / 6.0 * (d1 + 4.0 * d2 + d3);
        }
        for i in 0..d {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if !all_finite(&x) {
            return Err(SdeError::NonFinite { t: t_from + dt });
        }
        if !domain.contains(&x)? {
            let inside = domain.project(&x)?;
            max_excursion = max_excursion.max(crate::linalg::dist(&x, &inside));
            x = inside;
            projections += 1;
        }
    }
    Ok(FlowOutcome {
        terminal: x,
        div_integral: div_acc,
        projections,
        max_excursion,
    })
}
