//! Entropic optimal transport between discrete measures.
//!
//! Measures are weighted point clouds; the solver works on a dense cost
//! matrix already divided by the entropic regularization strength, so the
//! effective problem is
//!
//! ```text
//! minimize  sum_ij g_ij c_ij + KL(g | mu x nu)   over couplings g
//! ```
//!
//! whose dual is maximized by Sinkhorn iteration in the log domain:
//! `psi_j = -log sum_i mu_i exp(phi_i - c_ij)` followed by the symmetric
//! `phi` update. The centered variant shifts every `phi` iterate so a fixed
//! reference average `mu_star(phi)` stays zero, recording the shift sequence
//! `lambda_k`; this keeps potentials bounded over long runs without changing
//! the dual objective. Diagnostics track the dual objective, optimality gap,
//! potential errors against a converged reference, and coupling distances.

use crate::linalg::logsumexp_weighted;
use crate::metrics;
use serde::Serialize;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, EotError>;

#[derive(Debug, Error)]
pub enum EotError {
    #[error("empty input")]
    EmptyInput,
    #[error("mismatched lengths")]
    LengthMismatch,
    #[error("weights must be positive and finite")]
    BadWeights,
    #[error("cost matrix contains non-finite entries")]
    BadCost,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("metric error: {0}")]
    Metric(#[from] metrics::MetricError),
}

/// Weighted points with positive weights summing to one.
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// Build from points and raw positive weights; weights are normalized.
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(EotError::EmptyInput);
        }
        if points.len() != weights.len() {
            return Err(EotError::LengthMismatch);
        }
        let dim = points[0].len();
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(EotError::LengthMismatch);
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(EotError::InvalidParameter("non-finite point".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(EotError::BadWeights);
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(DiscreteMeasure { points, weights })
    }

    /// Uniform weights on the given points.
    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0; n.max(1)])
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Weighted average of a function of the support points.
    pub fn mean_of(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// Exponentially tilt the weights by `exp(eps <a, x>)` and renormalize.
    /// The log-ratio of tilted to original weights is bounded by
    /// `2 eps max_i |<a, x_i>|`.
    pub fn perturb(&self, direction: &[f64], eps: f64) -> Result<Self> {
        if direction.len() != self.dim() {
            return Err(EotError::LengthMismatch);
        }
        let tilted: Vec<f64> = self
            .points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * (eps * crate::linalg::dot(direction, p)).exp())
            .collect();
        Self::new(self.points.clone(), tilted)
    }
}

/// Dense cost matrix, stored row-major with `n` rows (source atoms) and `m`
/// columns (target atoms).
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub c: Vec<f64>,
    pub n: usize,
    pub m: usize,
}

impl CostMatrix {
    pub fn new(c: Vec<f64>, n: usize, m: usize) -> Result<Self> {
        if n == 0 || m == 0 || c.len() != n * m {
            return Err(EotError::LengthMismatch);
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(EotError::BadCost);
        }
        Ok(CostMatrix { c, n, m })
    }

    /// Squared Euclidean costs between two supports.
    pub fn sq_euclidean(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<Self> {
        if mu.dim() != nu.dim() {
            return Err(EotError::LengthMismatch);
        }
        let n = mu.len();
        let m = nu.len();
        let mut c = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let d = crate::linalg::dist(&mu.points[i], &nu.points[j]);
                c[i * m + j] = d * d;
            }
        }
        Self::new(c, n, m)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.c[i * self.m + j]
    }

    pub fn sup_norm(&self) -> f64 {
        self.c.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    /// Rescale so the sup norm equals `target` exactly; the implied entropic
    /// strength is `sup_norm / target`.
    pub fn rescaled_to_sup(&self, target: f64) -> Result<Self> {
        if !(target > 0.0) {
            return Err(EotError::InvalidParameter(
                "target sup norm must be positive".into(),
            ));
        }
        let sup = self.sup_norm();
        if sup == 0.0 {
            return Err(EotError::InvalidParameter(
                "cannot rescale an all-zero cost".into(),
            ));
        }
        let s = target / sup;
        Self::new(self.c.iter().map(|v| v * s).collect(), self.n, self.m)
    }
}

/// Dual potentials: `phi` on the source atoms, `psi` on the target atoms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PotentialPair {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
}

impl PotentialPair {
    pub fn zeros(n: usize, m: usize) -> Self {
        PotentialPair {
            phi: vec![0.0; n],
            psi: vec![0.0; m],
        }
    }
}

/// Entropic coupling induced by a potential pair.
#[derive(Debug, Clone)]
pub struct Coupling {
    /// Row-major `n x m` weights.
    pub weights: Vec<f64>,
    pub n: usize,
    pub m: usize,
}

impl Coupling {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.m + j]
    }

    pub fn row_marginals(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for i in 0..self.n {
            for j in 0..self.m {
                out[i] += self.at(i, j);
            }
        }
        out
    }

    pub fn col_marginals(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for i in 0..self.n {
            for j in 0..self.m {
                out[j] += self.at(i, j);
            }
        }
        out
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// The coupling as a weighted cloud in the product space, for transport
    /// distances between couplings. Atoms below `min_weight` are dropped.
    pub fn product_cloud(
        &self,
        mu: &DiscreteMeasure,
        nu: &DiscreteMeasure,
        min_weight: f64,
    ) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut pts = Vec::new();
        let mut ws = Vec::new();
        for i in 0..self.n {
            for j in 0..self.m {
                let w = self.at(i, j);
                if w > min_weight {
                    let mut p = mu.points[i].clone();
                    p.extend_from_slice(&nu.points[j]);
                    pts.push(p);
                    ws.push(w);
                }
            }
        }
        (pts, ws)
    }
}

fn check_instance(cost: &CostMatrix, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<()> {
    if cost.n != mu.len() || cost.m != nu.len() {
        return Err(EotError::LengthMismatch);
    }
    Ok(())
}

/// Dual objective
/// `G = <mu, phi> + <nu, psi> - sum_ij mu_i nu_j exp(phi_i + psi_j - c_ij) + 1`.
///
/// Exactly invariant under the shift `(phi + a, psi - a)`. Returns negative
/// infinity when the mass term overflows.
pub fn dual_objective(
    cost: &CostMatrix,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    pot: &PotentialPair,
) -> Result<f64> {
    check_instance(cost, mu, nu)?;
    if pot.phi.len() != cost.n || pot.psi.len() != cost.m {
        return Err(EotError::LengthMismatch);
    }
    let linear = mu.mean_of(&pot.phi) + nu.mean_of(&pot.psi);
    let mut max_e = f64::NEG_INFINITY;
    for i in 0..cost.n {
        for j in 0..cost.m {
            let e = pot.phi[i] + pot.psi[j] - cost.at(i, j);
            if e > max_e {
                max_e = e;
            }
        }
    }
    let mut acc = 0.0;
    for i in 0..cost.n {
        for j in 0..cost.m {
            let e = pot.phi[i] + pot.psi[j] - cost.at(i, j);
            acc += mu.weights[i] * nu.weights[j] * (e - max_e).exp();
        }
    }
    let mass = acc * max_e.exp();
    Ok(linear - mass + 1.0)
}

/// Gradient of the dual objective:
/// `dG/dphi_i = mu_i - row_mass_i`, `dG/dpsi_j = nu_j - col_mass_j`.
pub fn dual_partials(
    cost: &CostMatrix,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    pot: &PotentialPair,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_instance(cost, mu, nu)?;
    let g = coupling_from_potentials(cost, mu, nu, pot)?;
    let rows = g.row_marginals();
    let cols = g.col_marginals();
    Ok((
        mu.weights.iter().zip(&rows).map(|(w, r)| w - r).collect(),
        nu.weights.iter().zip(&cols).map(|(w, c)| w - c).collect(),
    ))
}

/// Coupling `g_ij = mu_i nu_j exp(phi_i + psi_j - c_ij)`.
pub fn coupling_from_potentials(
    cost: &CostMatrix,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    pot: &PotentialPair,
) -> Result<Coupling> {
    check_instance(cost, mu, nu)?;
    let mut weights = vec![0.0; cost.n * cost.m];
    for i in 0..cost.n {
        for j in 0..cost.m {
            weights[i * cost.m + j] =
                mu.weights[i] * nu.weights[j] * (pot.phi[i] + pot.psi[j] - cost.at(i, j)).exp();
        }
    }
    Ok(Coupling {
        weights,
        n: cost.n,
        m: cost.m,
    })
}

/// Starting pair: zero `phi` and the matching `psi` update, so the target
/// marginal of the induced coupling is already exact.
pub fn initial_potentials(
    cost: &CostMatrix,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
) -> Result<PotentialPair> {
    check_instance(cost, mu, nu)?;
    let phi = vec![0.0; cost.n];
    let psi = psi_update(cost, mu, &phi);
    Ok(PotentialPair { phi, psi })
}

/// One plain Sinkhorn step: the `phi` update from the current `psi` (making
/// the source marginal exact), then the `psi` update from the new `phi`
/// (making the target marginal exact). Each iterate therefore carries the
/// `psi` derived from its own `phi`.
pub fn sinkhorn_step(
    cost: &CostMatrix,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    pot: &PotentialPair,
) -> Result<PotentialPair> {
    check_instance(cost, mu, nu)?;
    let phi = phi_update(cost, nu, &pot.psi);
    let psi = psi_update(cost, mu, &phi);
    Ok(PotentialPair { phi, psi })
}

fn psi_update(cost: &CostMatrix, mu: &DiscreteMeasure, phi: &[f64]) -> Vec<f64> {
    (0..cost.m)
        .map(|j| -logsumexp_weighted((0..cost.n).map(|i| (phi[i] - cost.at(i, j), mu.weights[i]))))
        .collect()
}

fn phi_update(cost: &CostMatrix, nu: &DiscreteMeasure, psi: &[f64]) -> Vec<f64> {
    (0..cost.n)
        .map(|i| -logsumexp_weighted((0..cost.m).map(|j| (psi[j] - cost.at(i, j), nu.weights[j]))))
        .collect()
}

/// One centered Sinkhorn step. The raw `phi` update is shifted by `lambda`
/// so that its `mu_star`-average is exactly zero, then the `psi` update runs
/// from the shifted `phi`. Returns the updated pair and the shift.
///
/// Centered iterates relate to plain ones by a complementary shift: with
/// `a_k` the running sum of shifts, `phi_centered = phi + a_k` and
/// `psi_centered = psi - a_k`, so the dual objective and the coupling agree
/// at every iteration while the potentials stay bounded.
pub fn centered_sinkhorn_step(
    cost: &CostMatrix,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    mu_star: &[f64],
    pot: &PotentialPair,
) -> Result<(PotentialPair, f64)> {
    check_instance(cost, mu, nu)?;
    if mu_star.len() != cost.n {
        return Err(EotError::LengthMismatch);
    }
    let mut phi = phi_update(cost, nu, &pot.psi);
    let lambda: f64 = -mu_star.iter().zip(&phi).map(|(w, p)| w * p).sum::<f64>();
    for p in phi.iter_mut() {
        *p += lambda;
    }
    let psi = psi_update(cost, mu, &phi);
    Ok((PotentialPair { phi, psi }, lambda))
}

/// A priori bound on the one-step contraction factor of Sinkhorn in the
/// Hilbert projective metric for costs with the given sup norm.
pub fn contraction_bound(cost_sup: f64) -> f64 {
    1.0 - (-24.0 * cost_sup).exp()
}

/// Marginals fed to the updates during [`solve`].
#[derive(Debug, Clone)]
pub enum MarginalSchedule {
    /// Use the instance marginals as given.
    Exact,
    /// Use exponentially tilted marginals on both sides, emulating
    /// systematically misspecified inputs.
    Tilted { direction: Vec<f64>, eps: f64 },
}

#[derive(Debug, Clone)]
pub struct SinkhornOptions {
    pub max_iters: usize,
    /// Stop when the sup-norm change of both potentials falls below this.
    /// A negative value disables early stopping.
    pub tol: f64,
    /// Apply the centering shift each iteration.
    pub centered: bool,
    /// Reference weights for centering; defaults to the source weights.
    pub mu_star: Option<Vec<f64>>,
    pub schedule: MarginalSchedule,
    /// Keep per-iteration potentials in the history records.
    pub keep_history: bool,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions {
            max_iters: 500,
            tol: 1e-9,
            centered: false,
            mu_star: None,
            schedule: MarginalSchedule::Exact,
            keep_history: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub k: usize,
    /// Dual objective against the exact instance marginals.
    pub objective: f64,
    /// Sup-norm potential change from the previous iterate.
    pub residual: f64,
    /// Sup-norm marginal violation of the induced coupling.
    pub marginal_error: f64,
    /// Centering shift, when centering is on.
    pub lambda: Option<f64>,
    /// Iterate potentials, when history keeping is on.
    pub potentials: Option<PotentialPair>,
}

#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    pub potentials: PotentialPair,
    pub iterations: usize,
    pub converged: bool,
    /// Sum of centering shifts (zero without centering).
    pub lambda_sum: f64,
    pub history: Vec<IterationRecord>,
}

/// Run Sinkhorn to convergence or the iteration cap.
pub fn solve(
    cost: &CostMatrix,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    opts: &SinkhornOptions,
) -> Result<SinkhornSolution> {
    check_instance(cost, mu, nu)?;
    let (upd_mu, upd_nu) = match &opts.schedule {
        MarginalSchedule::Exact => (mu.clone(), nu.clone()),
        MarginalSchedule::Tilted { direction, eps } => {
            (mu.perturb(direction, *eps)?, nu.perturb(direction, *eps)?)
        }
    };
    let mu_star = match &opts.mu_star {
        Some(w) => {
            if w.len() != cost.n {
                return Err(EotError::LengthMismatch);
            }
            let s: f64 = w.iter().sum();
            if !(s > 0.0) || w.iter().any(|v| *v < 0.0) {
                return Err(EotError::BadWeights);
            }
            w.iter().map(|v| v / s).collect::<Vec<f64>>()
        }
        None => mu.weights.clone(),
    };

    let mut pot = initial_potentials(cost, &upd_mu, &upd_nu)?;
    let mut history = Vec::new();
    let mut lambda_sum = 0.0;
    let mut converged = false;
    let mut iterations = 0;
    let record = |k: usize,
                  pot: &PotentialPair,
                  residual: f64,
                  lambda: Option<f64>|
     -> Result<IterationRecord> {
        let g = coupling_from_potentials(cost, &upd_mu, &upd_nu, pot)?;
        let rows = g.row_marginals();
        let cols = g.col_marginals();
        let marginal_error = rows
            .iter()
            .zip(&upd_mu.weights)
            .chain(cols.iter().zip(&upd_nu.weights))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        Ok(IterationRecord {
            k,
            objective: dual_objective(cost, mu, nu, pot)?,
            residual,
            marginal_error,
            lambda,
            potentials: opts.keep_history.then(|| pot.clone()),
        })
    };
    history.push(record(0, &pot, f64::INFINITY, None)?);
    for k in 1..=opts.max_iters {
        let (next, lambda) = if opts.centered {
            let (p, l) = centered_sinkhorn_step(cost, &upd_mu, &upd_nu, &mu_star, &pot)?;
            (p, Some(l))
        } else {
            (sinkhorn_step(cost, &upd_mu, &upd_nu, &pot)?, None)
        };
        let residual = pot
            .phi
            .iter()
            .zip(&next.phi)
            .chain(pot.psi.iter().zip(&next.psi))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        pot = next;
        lambda_sum += lambda.unwrap_or(0.0);
        iterations = k;
        history.push(record(k, &pot, residual, lambda)?);
        if residual <= opts.tol {
            converged = true;
            break;
        }
    }
    Ok(SinkhornSolution {
        potentials: pot,
        iterations,
        converged,
        lambda_sum,
        history,
    })
}

/// Align a potential pair by complementary centering: subtract the
/// `mu_star`-average from `phi` and add it to `psi`, which leaves the dual
/// objective and the coupling unchanged.
pub fn complementary_center(pot: &PotentialPair, mu_star: &[f64]) -> PotentialPair {
    let shift: f64 = mu_star.iter().zip(&pot.phi).map(|(w, p)| w * p).sum();
    PotentialPair {
        phi: pot.phi.iter().map(|p| p - shift).collect(),
        psi: pot.psi.iter().map(|p| p + shift).collect(),
    }
}

/// One row of a convergence study.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsRow {
    pub k: usize,
    #[serde(rename = "G")]
    pub objective: f64,
    pub gap: Option<f64>,
    pub phi_err: Option<f64>,
    pub psi_err: Option<f64>,
    pub w1: Option<f64>,
    pub ratio: Option<f64>,
}

/// Assemble per-iteration diagnostics of a kept-history run against a
/// converged reference solution: optimality gap, sup-norm potential errors
/// after complementary centering, optional transport distance between the
/// iterate coupling and the reference coupling, and the gap decay ratio.
pub fn diagnostics_report(
    cost: &CostMatrix,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    run: &SinkhornSolution,
    reference: &SinkhornSolution,
    coupling_w1: bool,
) -> Result<Vec<DiagnosticsRow>> {
    let mu_star = &mu.weights;
    let g_star = dual_objective(cost, mu, nu, &reference.potentials)?;
    let ref_pot = complementary_center(&reference.potentials, mu_star);
    let ref_coupling = coupling_from_potentials(cost, mu, nu, &reference.potentials)?;
    let (ref_pts, ref_ws) = ref_coupling.product_cloud(mu, nu, 1e-300);
    let mut rows: Vec<DiagnosticsRow> = Vec::with_capacity(run.history.len());
    let mut prev_gap: Option<f64> = None;
    for rec in &run.history {
        let gap = Some((g_star - rec.objective).max(0.0));
        let (phi_err, psi_err, w1) = match &rec.potentials {
            Some(p) => {
                let c = complementary_center(p, mu_star);
                let pe = c
                    .phi
                    .iter()
                    .zip(&ref_pot.phi)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                let se = c
                    .psi
                    .iter()
                    .zip(&ref_pot.psi)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                let w1 = if coupling_w1 {
                    let g = coupling_from_potentials(cost, mu, nu, p)?;
                    let (pts, ws) = g.product_cloud(mu, nu, 1e-300);
                    Some(metrics::exact_w1(&pts, &ws, &ref_pts, &ref_ws)?)
                } else {
                    None
                };
                (Some(pe), Some(se), w1)
            }
            None => (None, None, None),
        };
        let ratio = match (prev_gap, gap) {
            (Some(p), Some(g)) if p > 0.0 => Some(g / p),
            _ => None,
        };
        prev_gap = gap;
        rows.push(DiagnosticsRow {
            k: rec.k,
            objective: rec.objective,
            gap,
            phi_err,
            psi_err,
            w1,
            ratio,
        });
    }
    Ok(rows)
}

/// Geometric decay fit of a gap sequence.
#[derive(Debug, Clone, Copy)]
pub struct ContractionFit {
    /// Fitted per-iteration ratio.
    pub rate: f64,
    /// Fitted initial constant.
    pub constant: f64,
    /// Plateau level excluded from the fit.
    pub plateau: f64,
    /// Number of points used.
    pub points: usize,
}

/// Least-squares fit of `log gap_k ~ log c + k log rate` over the iterations
/// where the gap is at least 100x the plateau, with the plateau estimated as
/// the median of the last ten values. Returns `None` with fewer than three
/// usable points.
pub fn fit_contraction(gaps: &[f64]) -> Option<ContractionFit> {
    if gaps.len() < 5 {
        return None;
    }
    let tail_start = gaps.len().saturating_sub(10);
    let mut tail: Vec<f64> = gaps[tail_start..].to_vec();
    tail.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let plateau = tail[tail.len() / 2].max(0.0);
    let usable: Vec<(f64, f64)> = gaps
        .iter()
        .enumerate()
        .filter(|(_, g)| **g > 100.0 * plateau && **g > 0.0)
        .map(|(k, g)| (k as f64, g.ln()))
        .collect();
    if usable.len() < 3 {
        return None;
    }
    let n = usable.len() as f64;
    let sx: f64 = usable.iter().map(|(x, _)| x).sum();
    let sy: f64 = usable.iter().map(|(_, y)| y).sum();
    let sxx: f64 = usable.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = usable.iter().map(|(x, y)| x * y).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return None;
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    Some(ContractionFit {
        rate: slope.exp(),
        constant: intercept.exp(),
        plateau,
        points: usable.len(),
    })
}
