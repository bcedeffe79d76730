//! Distribution distances and reference densities.
//!
//! The workhorse is [`exact_w1`], an exact 1-Wasserstein distance between
//! small weighted point clouds computed with a dense transportation network
//! simplex. [`sliced_w1`] scales to larger clouds by averaging 1-d transport
//! over random projections. Two-sample goodness of fit uses [`ks_statistic`]
//! and [`l1_hist_distance`]. Truncated and boundary-reflected Gaussian
//! densities on an interval serve as closed-form references.

use crate::linalg::{dot, normalize};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Combined point budget for the exact transport solver.
pub const EXACT_W1_MAX_POINTS: usize = 512;

pub type Result<T> = std::result::Result<T, MetricError>;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty input")]
    EmptyInput,
    #[error("mismatched array lengths")]
    LengthMismatch,
    #[error("point dimensions disagree")]
    DimensionMismatch,
    #[error("weights must be non-negative with equal totals")]
    BadWeights,
    #[error("combined support size {0} exceeds the exact solver budget {EXACT_W1_MAX_POINTS}")]
    TooManyPoints(usize),
    #[error("transport solver failed to converge")]
    NonConvergence,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

fn validate_cloud(points: &[Vec<f64>], weights: &[f64]) -> Result<usize> {
    if points.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if points.len() != weights.len() {
        return Err(MetricError::LengthMismatch);
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(MetricError::DimensionMismatch);
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(MetricError::BadWeights);
    }
    Ok(dim)
}

/// Drop zero-weight atoms and normalize the rest to total mass one.
fn normalized_cloud(points: &[Vec<f64>], weights: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let total: f64 = weights.iter().sum();
    let mut ps = Vec::new();
    let mut ws = Vec::new();
    for (p, w) in points.iter().zip(weights) {
        if *w > 0.0 {
            ps.push(p.clone());
            ws.push(w / total);
        }
    }
    (ps, ws)
}

/// Exact 1-Wasserstein distance between two weighted point clouds under the
/// Euclidean ground metric, solved with a dense transportation network
/// simplex. The combined support may hold at most
/// [`EXACT_W1_MAX_POINTS`] points.
pub fn exact_w1(xs: &[Vec<f64>], wx: &[f64], ys: &[Vec<f64>], wy: &[f64]) -> Result<f64> {
    let dx = validate_cloud(xs, wx)?;
    let dy = validate_cloud(ys, wy)?;
    if dx != dy {
        return Err(MetricError::DimensionMismatch);
    }
    let sx: f64 = wx.iter().sum();
    let sy: f64 = wy.iter().sum();
    if sx <= 0.0 || sy <= 0.0 || (sx - sy).abs() > 1e-6 * sx.max(sy) {
        return Err(MetricError::BadWeights);
    }
    let (xs, wx) = normalized_cloud(xs, wx);
    let (ys, wy) = normalized_cloud(ys, wy);
    if xs.len() + ys.len() > EXACT_W1_MAX_POINTS {
        return Err(MetricError::TooManyPoints(xs.len() + ys.len()));
    }
    let n = xs.len();
    let m = ys.len();
    let mut cost = vec![0.0f64; n * m];
    for i in 0..n {
        for j in 0..m {
            cost[i * m + j] = crate::linalg::dist(&xs[i], &ys[j]);
        }
    }
    let flow = solve_transport(n, m, &cost, &wx, &wy)?;
    Ok(flow.iter().zip(&cost).map(|(f, c)| f * c).sum())
}

/// Minimum-cost transportation plan between supplies `a` and demands `b`
/// (both summing to one) under dense costs, via the network simplex on the
/// bipartite graph. Returns the dense flow matrix.
pub fn solve_transport(n: usize, m: usize, cost: &[f64], a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if n == 0 || m == 0 || cost.len() != n * m || a.len() != n || b.len() != m {
        return Err(MetricError::LengthMismatch);
    }
    let mut flow = vec![0.0f64; n * m];
    let mut basis = vec![false; n * m];

    // Northwest-corner initial basis: exactly n + m - 1 basic cells, some
    // possibly carrying zero flow.
    {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        let mut i = 0usize;
        let mut j = 0usize;
        loop {
            let f = a[i].min(b[j]);
            basis[i * m + j] = true;
            flow[i * m + j] = f;
            a[i] -= f;
            b[j] -= f;
            if i == n - 1 && j == m - 1 {
                break;
            }
            if a[i] <= 0.0 && i < n - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
    }

    let nodes = n + m;
    let cost_scale = cost.iter().cloned().fold(0.0f64, f64::max).max(1.0);
    let tol = 1e-12 * cost_scale;
    let max_pivots = 100 * nodes * nodes;
    let bland_after = 10 * nodes * nodes;

    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; m];

    for pivot in 0..=max_pivots {
        // Adjacency of the basis tree: node k < n is source k, node n + j is
        // sink j.
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nodes];
        for i in 0..n {
            for j in 0..m {
                if basis[i * m + j] {
                    adj[i].push((n + j, i * m + j));
                    adj[n + j].push((i, i * m + j));
                }
            }
        }

        // Potentials from a tree walk rooted at source 0.
        let mut seen = vec![false; nodes];
        let mut stack = vec![0usize];
        seen[0] = true;
        u[0] = 0.0;
        while let Some(k) = stack.pop() {
            for &(other, cell) in &adj[k] {
                if !seen[other] {
                    seen[other] = true;
                    let (i, j) = (cell / m, cell % m);
                    if other >= n {
                        v[j] = cost[cell] - u[i];
                    } else {
                        u[i] = cost[cell] - v[j];
                    }
                    stack.push(other);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(MetricError::NonConvergence);
        }

        // Entering arc: most negative reduced cost, or first negative under
        // Bland's rule once past the pivot budget guard.
        let bland = pivot >= bland_after;
        let mut entering: Option<(usize, f64)> = None;
        'scan: for i in 0..n {
            for j in 0..m {
                let cell = i * m + j;
                if basis[cell] {
                    continue;
                }
                let red = cost[cell] - u[i] - v[j];
                if red < -tol {
                    match entering {
                        Some((_, best)) if !bland && red >= best => {}
                        _ => entering = Some((cell, red)),
                    }
                    if bland {
                        break 'scan;
                    }
                }
            }
        }
        let Some((enter, _)) = entering else {
            // Optimal.
            return Ok(flow);
        };
        if pivot == max_pivots {
            return Err(MetricError::NonConvergence);
        }

        // The unique tree path from the entering arc's source to its sink
        // closes a cycle; flow alternates +/- around it.
        let src = enter / m;
        let dst = n + enter % m;
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; nodes];
        let mut seen = vec![false; nodes];
        let mut queue = std::collections::VecDeque::from([src]);
        seen[src] = true;
        while let Some(k) = queue.pop_front() {
            if k == dst {
                break;
            }
            for &(other, cell) in &adj[k] {
                if !seen[other] {
                    seen[other] = true;
                    parent[other] = Some((k, cell));
                    queue.push_back(other);
                }
            }
        }
        let mut path = Vec::new();
        let mut at = dst;
        while let Some((prev, cell)) = parent[at] {
            path.push(cell);
            at = prev;
        }
        if at != src {
            return Err(MetricError::NonConvergence);
        }
        path.reverse();

        // Walking src -> dst, arcs at even positions lose flow.
        let mut theta = f64::INFINITY;
        let mut leaving = usize::MAX;
        for (pos, &cell) in path.iter().enumerate() {
            if pos % 2 == 0 && flow[cell] < theta {
                theta = flow[cell];
                leaving = cell;
            }
        }
        for (pos, &cell) in path.iter().enumerate() {
            if pos % 2 == 0 {
                flow[cell] -= theta;
            } else {
                flow[cell] += theta;
            }
        }
        flow[enter] = theta;
        basis[enter] = true;
        basis[leaving] = false;
        flow[leaving] = 0.0;
    }
    Err(MetricError::NonConvergence)
}

/// Exact 1-d 1-Wasserstein distance between weighted atom lists, by
/// integrating the CDF gap.
pub fn w1_1d(x: &[f64], wx: &[f64], y: &[f64], wy: &[f64]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if x.len() != wx.len() || y.len() != wy.len() {
        return Err(MetricError::LengthMismatch);
    }
    let sx: f64 = wx.iter().sum();
    let sy: f64 = wy.iter().sum();
    if sx <= 0.0 || sy <= 0.0 {
        return Err(MetricError::BadWeights);
    }
    let mut events: Vec<(f64, f64, f64)> = x
        .iter()
        .zip(wx)
        .map(|(p, w)| (*p, w / sx, 0.0))
        .chain(y.iter().zip(wy).map(|(p, w)| (*p, 0.0, w / sy)))
        .collect();
    if events.iter().any(|(p, ..)| !p.is_finite()) {
        return Err(MetricError::InvalidParameter("non-finite atom".into()));
    }
    events.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut acc = 0.0;
    let mut fx = 0.0;
    let mut fy = 0.0;
    for k in 0..events.len() {
        let (z, dx, dy) = events[k];
        fx += dx;
        fy += dy;
        if k + 1 < events.len() {
            acc += (fx - fy).abs() * (events[k + 1].0 - z);
        }
    }
    Ok(acc)
}

/// Sliced 1-Wasserstein distance: the average over `n_projections` random
/// unit directions of the 1-d transport distance between the projected
/// clouds. Deterministic in `seed`.
pub fn sliced_w1(
    xs: &[Vec<f64>],
    wx: &[f64],
    ys: &[Vec<f64>],
    wy: &[f64],
    n_projections: usize,
    seed: u64,
) -> Result<f64> {
    let dx = validate_cloud(xs, wx)?;
    let dy = validate_cloud(ys, wy)?;
    if dx != dy {
        return Err(MetricError::DimensionMismatch);
    }
    if n_projections == 0 {
        return Err(MetricError::InvalidParameter(
            "need at least one projection".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..n_projections {
        let mut dir: Vec<f64> = (0..dx)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        if normalize(&mut dir) == 0.0 {
            dir[0] = 1.0;
        }
        let px: Vec<f64> = xs.iter().map(|p| dot(p, &dir)).collect();
        let py: Vec<f64> = ys.iter().map(|p| dot(p, &dir)).collect();
        acc += w1_1d(&px, wx, &py, wy)?;
    }
    Ok(acc / n_projections as f64)
}

/// Two-sample Kolmogorov-Smirnov statistic: the sup-norm gap between the
/// empirical CDFs.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(MetricError::InvalidParameter("non-finite sample".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let na = sa.len() as f64;
    let nb = sb.len() as f64;
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut best = 0.0f64;
    while ia < sa.len() && ib < sb.len() {
        let z = sa[ia].min(sb[ib]);
        while ia < sa.len() && sa[ia] <= z {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] <= z {
            ib += 1;
        }
        best = best.max((ia as f64 / na - ib as f64 / nb).abs());
    }
    Ok(best)
}

/// One-sample Kolmogorov-Smirnov statistic of `a` against a reference CDF:
/// the sup-difference between the empirical CDF and `cdf`.
pub fn ks_statistic_cdf(a: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if a.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::InvalidParameter("non-finite sample".into()));
    }
    let mut sa = a.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = sa.len() as f64;
    let mut best = 0.0f64;
    for (i, &x) in sa.iter().enumerate() {
        let f = cdf(x);
        best = best.max((f - i as f64 / n).abs());
        best = best.max((f - (i + 1) as f64 / n).abs());
    }
    Ok(best)
}

/// L1 distance between the histogram of `samples` on `[lo, hi]` with `bins`
/// equal bins and a reference density, whose per-bin mass is evaluated with
/// Simpson's rule. Samples outside the range shrink the histogram mass and so
/// count toward the distance.
pub fn l1_hist_distance(
    samples: &[f64],
    lo: f64,
    hi: f64,
    bins: usize,
    density: impl Fn(f64) -> f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if bins == 0 || !(hi > lo) {
        return Err(MetricError::InvalidParameter(
            "need bins > 0 and hi > lo".into(),
        ));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &s in samples {
        if s >= lo && s <= hi {
            let k = (((s - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
    }
    let n = samples.len() as f64;
    let mut acc = 0.0;
    for k in 0..bins {
        let a = lo + k as f64 * width;
        let b = a + width;
        let mass = (width / 6.0) * (density(a) + 4.0 * density(0.5 * (a + b)) + density(b));
        acc += (counts[k] as f64 / n - mass).abs();
    }
    Ok(acc)
}

/// Density at `x` of a Gaussian with the given mean and standard deviation,
/// truncated to `[lo, hi]`.
pub fn truncated_gaussian_density(x: f64, mean: f64, std: f64, lo: f64, hi: f64) -> f64 {
    if x < lo || x > hi || std <= 0.0 {
        return 0.0;
    }
    use statrs::distribution::{Continuous, ContinuousCDF, Normal};
    let n = Normal::new(mean, std).unwrap();
    let mass = n.cdf(hi) - n.cdf(lo);
    n.pdf(x) / mass
}

/// Distribution function of the Gaussian truncated to `[lo, hi]`.
pub fn truncated_gaussian_cdf(x: f64, mean: f64, std: f64, lo: f64, hi: f64) -> f64 {
    if x <= lo {
        return 0.0;
    }
    if x >= hi {
        return 1.0;
    }
    use statrs::distribution::{ContinuousCDF, Normal};
    let n = Normal::new(mean, std).unwrap();
    let base = n.cdf(lo);
    (n.cdf(x) - base) / (n.cdf(hi) - base)
}

/// Number of image pairs needed for the reflected kernel at variance `var`.
fn image_range(var: f64, lo: f64, hi: f64) -> i64 {
    let span = hi - lo;
    (3 + (8.0 * var.sqrt() / (2.0 * span)).ceil() as i64).max(3)
}

/// Heat kernel on `[lo, hi]` with reflecting ends: the Gaussian of variance
/// `var` centered at `center`, folded into the interval by the method of
/// images. Integrates to one over the interval.
pub fn reflected_normal_density(x: f64, center: f64, var: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    let kmax = image_range(var, lo, hi);
    let norm = 1.0 / (2.0 * std::f64::consts::PI * var).sqrt();
    let mut acc = 0.0;
    for k in -kmax..=kmax {
        let shift = 2.0 * span * k as f64;
        for c in [center + shift, 2.0 * lo - center + shift] {
            let z = x - c;
            acc += (-0.5 * z * z / var).exp();
        }
    }
    acc * norm
}

/// Spatial score `d/dx log` of [`reflected_normal_density`]. Vanishes at both
/// ends of the interval.
pub fn reflected_normal_score(x: f64, center: f64, var: f64, lo: f64, hi: f64) -> f64 {
    reflected_mixture_score(x, &[center], &[1.0], var, lo, hi)
}

/// Score of a weighted mixture of reflected Gaussians with shared variance.
pub fn reflected_mixture_score(
    x: f64,
    centers: &[f64],
    weights: &[f64],
    var: f64,
    lo: f64,
    hi: f64,
) -> f64 {
    let span = hi - lo;
    let kmax = image_range(var, lo, hi);
    let mut num = 0.0;
    let mut den = 0.0;
    for (center, w) in centers.iter().zip(weights) {
        for k in -kmax..=kmax {
            let shift = 2.0 * span * k as f64;
            for c in [center + shift, 2.0 * lo - center + shift] {
                let z = x - c;
                let e = w * (-0.5 * z * z / var).exp();
                den += e;
                num += -z / var * e;
            }
        }
    }
    if den <= 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Mixture version of [`reflected_normal_density`].
pub fn reflected_mixture_density(
    x: f64,
    centers: &[f64],
    weights: &[f64],
    var: f64,
    lo: f64,
    hi: f64,
) -> f64 {
    let total: f64 = weights.iter().sum();
    centers
        .iter()
        .zip(weights)
        .map(|(c, w)| w / total * reflected_normal_density(x, *c, var, lo, hi))
        .sum()
}

/// Largest pairwise distance within a point cloud.
pub fn cloud_diameter(points: &[Vec<f64>]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            best = best.max(crate::linalg::dist(&points[i], &points[j]));
        }
    }
    best
}
