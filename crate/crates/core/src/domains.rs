//! Bounded domain geometry and the reflection operator.
//!
//! A [`Domain`] is a compact subset of R^d with enough structure to support
//! the operations the reflected-SDE machinery needs: membership tests,
//! boundary intersection along a segment, inward unit normals, metric
//! projection, and a fold-based reflection operator for proposals that leave
//! the domain.
//!
//! Supported shapes:
//!
//! | kind        | description                                             |
//! |-------------|---------------------------------------------------------|
//! | hypercube   | axis-aligned box `[lo_i, hi_i]`                         |
//! | ball        | Euclidean ball with center and radius                  |
//! | curve       | 2-d region enclosed by a closed parametric curve        |
//! | simplex     | projected simplex `{x >= 0, sum x <= 1}`                |
//! | mesh cache  | union of balls around cached grid points                |
//!
//! Curve regions are discretized once into a closed polyline (2048 segments
//! by default); membership uses the winding number of that polyline with a
//! closeness band so that points on the boundary count as inside. Hypercube,
//! ball, and simplex boundary crossings are computed in closed form; curve and
//! mesh crossings use bisection (60 iterations).

use crate::linalg::{all_finite, dist, dot, norm, normalize, sub};
use rand::Rng;
use thiserror::Error;

/// Default number of polyline segments for smooth parametric curves.
pub const DEFAULT_CURVE_SEGMENTS: usize = 2048;
/// Maximum number of folds attempted by [`Domain::reflect_step`].
pub const MAX_FOLDS: u32 = 16;
/// Bisection iterations for boundary intersection on curve and mesh domains.
const BISECT_ITERS: u32 = 60;
/// Step used for finite-difference curve tangents (in curve parameter units).
const TANGENT_H: f64 = 1e-6;
/// Mesh-cache membership threshold as a multiple of the grid cell diagonal.
const MESH_THRESHOLD_FACTOR: f64 = 1.5;
/// Denominator floor for the inverse stick-breaking map.
const STICK_SINGULAR_TOL: f64 = 1e-12;

pub type Result<T> = std::result::Result<T, DomainError>;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("point has a non-finite coordinate")]
    NonFinite,
    #[error("point dimension {got} does not match domain dimension {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("expected the first point inside the domain")]
    ExpectedInside,
    #[error("expected the second point outside the domain")]
    ExpectedOutside,
    #[error("point is not on the domain boundary")]
    NotOnBoundary,
    #[error("cannot determine a normal direction at the queried point")]
    DegenerateNormal,
    #[error("invalid domain parameters: {0}")]
    InvalidParameters(String),
    #[error("inverse stick-breaking denominator below {STICK_SINGULAR_TOL:e}")]
    StickBreakingSingular,
    #[error("stick-breaking input must lie in the unit hypercube")]
    OutOfRange,
}

/// Parameters of the built-in closed curves, all parameterized over `t` in
/// `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub enum CurveParams {
    /// Polar flower `r(t) = sin(2 pi petals t) + offset`, requires
    /// `offset > 1` so the radius stays positive.
    Flower { petals: u32, offset: f64 },
    /// Heart curve `(16 sin^3 th, 13 cos th - 5 cos 2th - 2 cos 3th - cos 4th)`
    /// with `th = 2 pi t`.
    Heart,
    /// Piecewise-linear closed polygon over a vertex list whose first vertex
    /// is repeated at the end.
    Octagon { vertices: Vec<[f64; 2]> },
}

/// Evaluate a curve at parameter `t`; values outside `[0, 1]` wrap around.
pub fn curve_point(params: &CurveParams, t: f64) -> [f64; 2] {
    let s = t - t.floor();
    match params {
        CurveParams::Flower { petals, offset } => {
            let ang = 2.0 * std::f64::consts::PI * s;
            let r = (2.0 * std::f64::consts::PI * (*petals as f64) * s).sin() + offset;
            [r * ang.cos(), r * ang.sin()]
        }
        CurveParams::Heart => {
            let th = 2.0 * std::f64::consts::PI * s;
            [
                16.0 * th.sin().powi(3),
                13.0 * th.cos()
                    - 5.0 * (2.0 * th).cos()
                    - 2.0 * (3.0 * th).cos()
                    - (4.0 * th).cos(),
            ]
        }
        CurveParams::Octagon { vertices } => {
            let c = vertices.len() - 1;
            let u = c as f64 * s;
            let i = (u.floor() as usize).min(c - 1);
            let frac = u - i as f64;
            let a = vertices[i];
            let b = vertices[i + 1];
            [a[0] + frac * (b[0] - a[0]), a[1] + frac * (b[1] - a[1])]
        }
    }
}

/// 2-d region enclosed by a closed curve, discretized into a polyline.
#[derive(Debug, Clone)]
pub struct CurveDomain {
    pub params: CurveParams,
    /// Polyline vertices; vertex `k` sits at parameter `k / len`, and segment
    /// `k` joins vertex `k` to vertex `(k + 1) % len`.
    pts: Vec<[f64; 2]>,
    witness: [f64; 2],
    radius: f64,
    /// Points within this distance of the polyline count as inside.
    band: f64,
}

impl CurveDomain {
    fn new(params: CurveParams, segments: usize) -> Result<Self> {
        let pts: Vec<[f64; 2]> = match &params {
            CurveParams::Octagon { vertices } => vertices[..vertices.len() - 1].to_vec(),
            _ => (0..segments)
                .map(|k| curve_point(&params, k as f64 / segments as f64))
                .collect(),
        };
        let radius = pts
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
            .fold(0.0, f64::max);
        let witness = match &params {
            CurveParams::Flower { .. } | CurveParams::Heart => [0.0, 0.0],
            CurveParams::Octagon { .. } => {
                let n = pts.len() as f64;
                let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
                let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
                [cx, cy]
            }
        };
        let dom = CurveDomain {
            params,
            pts,
            witness,
            radius,
            band: 1e-9 * (1.0 + radius),
        };
        if !dom.inside(&dom.witness) {
            return Err(DomainError::InvalidParameters(
                "interior witness is not inside the curve".into(),
            ));
        }
        Ok(dom)
    }

    fn seg(&self, k: usize) -> ([f64; 2], [f64; 2]) {
        (self.pts[k], self.pts[(k + 1) % self.pts.len()])
    }

    /// Winding number of the polyline around `p` (nonzero rule).
    fn winding(&self, p: &[f64; 2]) -> i32 {
        let mut wn = 0i32;
        for k in 0..self.pts.len() {
            let (a, b) = self.seg(k);
            let left = (b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1]);
            if a[1] <= p[1] {
                if b[1] > p[1] && left > 0.0 {
                    wn += 1;
                }
            } else if b[1] <= p[1] && left < 0.0 {
                wn -= 1;
            }
        }
        wn
    }

    /// Squared distance from `p` to segment `k` and the clamped projection
    /// fraction along it.
    fn seg_dist_sq(&self, p: &[f64; 2], k: usize) -> (f64, f64) {
        let (a, b) = self.seg(k);
        let dx = b[0] - a[0];
        let dy = b[1] - a[1];
        let len_sq = dx * dx + dy * dy;
        let mut u = if len_sq > 0.0 {
            ((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len_sq
        } else {
            0.0
        };
        u = u.clamp(0.0, 1.0);
        let qx = a[0] + u * dx;
        let qy = a[1] + u * dy;
        let ex = p[0] - qx;
        let ey = p[1] - qy;
        (ex * ex + ey * ey, u)
    }

    /// Nearest polyline segment: `(segment index, fraction, distance)`.
    fn nearest(&self, p: &[f64; 2]) -> (usize, f64, f64) {
        let mut best = (0usize, 0.0f64, f64::INFINITY);
        for k in 0..self.pts.len() {
            let (d_sq, u) = self.seg_dist_sq(p, k);
            if d_sq < best.2 {
                best = (k, u, d_sq);
            }
        }
        (best.0, best.1, best.2.sqrt())
    }

    fn inside(&self, p: &[f64; 2]) -> bool {
        if self.winding(p) != 0 {
            return true;
        }
        self.nearest(p).2 <= self.band
    }

    /// Point on the polyline at parameter `t` (wraps outside `[0, 1]`).
    fn polyline_point(&self, t: f64) -> [f64; 2] {
        let s = t - t.floor();
        let u = s * self.pts.len() as f64;
        let k = (u.floor() as usize).min(self.pts.len() - 1);
        let frac = u - k as f64;
        let (a, b) = self.seg(k);
        [a[0] + frac * (b[0] - a[0]), a[1] + frac * (b[1] - a[1])]
    }
}

/// Cached point cloud approximating another domain; a point belongs to the
/// mesh cache when it lies within `threshold` of some cached point.
#[derive(Debug, Clone)]
pub struct MeshCache {
    points: Vec<Vec<f64>>,
    threshold: f64,
    dim: usize,
    radius: f64,
}

impl MeshCache {
    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        for (i, p) in self.points.iter().enumerate() {
            let d = dist(p, x);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    fn inside(&self, x: &[f64]) -> bool {
        self.nearest(x).1 <= self.threshold
    }
}

/// A compact domain in R^d.
#[derive(Debug, Clone)]
pub enum Domain {
    Hypercube { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    Curve(CurveDomain),
    Simplex { dim: usize },
    MeshCache(MeshCache),
}

/// Result of one bounded-domain reflection.
#[derive(Debug, Clone)]
pub struct Reflection {
    /// Final point, always inside the closed domain.
    pub point: Vec<f64>,
    /// True when the proposal left the domain and was reflected back.
    pub hit: bool,
    /// Number of folds applied.
    pub folds: u32,
    /// True when the fold cap was exhausted and the last boundary point was
    /// returned instead.
    pub fallback: bool,
    /// Boundary point of the first fold, when a hit occurred.
    pub boundary: Option<Vec<f64>>,
    /// Inward unit normal at that boundary point.
    pub normal: Option<Vec<f64>>,
}

impl Domain {
    pub fn hypercube(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(DomainError::InvalidParameters(
                "hypercube bounds must be non-empty and of equal length".into(),
            ));
        }
        if !all_finite(&lo) || !all_finite(&hi) {
            return Err(DomainError::NonFinite);
        }
        if lo.iter().zip(&hi).any(|(a, b)| a >= b) {
            return Err(DomainError::InvalidParameters(
                "hypercube needs lo < hi on every axis".into(),
            ));
        }
        Ok(Domain::Hypercube { lo, hi })
    }

    /// `[0, 1]^d`.
    pub fn unit_cube(dim: usize) -> Self {
        Domain::Hypercube {
            lo: vec![0.0; dim],
            hi: vec![1.0; dim],
        }
    }

    /// `[-1, 1]^d`.
    pub fn symmetric_cube(dim: usize) -> Self {
        Domain::Hypercube {
            lo: vec![-1.0; dim],
            hi: vec![1.0; dim],
        }
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        if center.is_empty() || !all_finite(&center) || !radius.is_finite() {
            return Err(DomainError::NonFinite);
        }
        if radius <= 0.0 {
            return Err(DomainError::InvalidParameters(
                "ball radius must be positive".into(),
            ));
        }
        Ok(Domain::Ball { center, radius })
    }

    pub fn curve(params: CurveParams) -> Result<Self> {
        Self::curve_with_segments(params, DEFAULT_CURVE_SEGMENTS)
    }

    pub fn curve_with_segments(params: CurveParams, segments: usize) -> Result<Self> {
        match &params {
            CurveParams::Flower { petals, offset } => {
                if *petals == 0 {
                    return Err(DomainError::InvalidParameters(
                        "flower needs at least one petal".into(),
                    ));
                }
                if !(*offset > 1.0) {
                    return Err(DomainError::InvalidParameters(
                        "flower offset must exceed 1".into(),
                    ));
                }
            }
            CurveParams::Heart => {}
            CurveParams::Octagon { vertices } => {
                if vertices.len() < 4 {
                    return Err(DomainError::InvalidParameters(
                        "polygon needs at least 3 vertices plus the closing vertex".into(),
                    ));
                }
                if vertices.first() != vertices.last() {
                    return Err(DomainError::InvalidParameters(
                        "polygon vertex list must be closed (first equals last)".into(),
                    ));
                }
                if vertices
                    .iter()
                    .any(|v| !v[0].is_finite() || !v[1].is_finite())
                {
                    return Err(DomainError::NonFinite);
                }
                let open = &vertices[..vertices.len() - 1];
                let mut distinct = 0usize;
                for (i, v) in open.iter().enumerate() {
                    if open[..i].iter().all(|w| w != v) {
                        distinct += 1;
                    }
                }
                if distinct < 3 {
                    return Err(DomainError::InvalidParameters(
                        "polygon needs at least 3 distinct vertices".into(),
                    ));
                }
                if polygon_signed_area(open).abs() < 1e-12 {
                    return Err(DomainError::InvalidParameters(
                        "polygon is degenerate (zero area)".into(),
                    ));
                }
            }
        }
        if segments < 8 {
            return Err(DomainError::InvalidParameters(
                "curve discretization needs at least 8 segments".into(),
            ));
        }
        Ok(Domain::Curve(CurveDomain::new(params, segments)?))
    }

    pub fn flower(petals: u32, offset: f64) -> Result<Self> {
        Self::curve(CurveParams::Flower { petals, offset })
    }

    pub fn heart() -> Result<Self> {
        Self::curve(CurveParams::Heart)
    }

    /// Regular octagon centered at the origin with the given circumradius.
    pub fn regular_octagon(radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(DomainError::InvalidParameters(
                "octagon radius must be positive".into(),
            ));
        }
        let mut vertices: Vec<[f64; 2]> = (0..8)
            .map(|k| {
                let ang = std::f64::consts::PI * (2.0 * k as f64 + 1.0) / 8.0;
                [radius * ang.cos(), radius * ang.sin()]
            })
            .collect();
        vertices.push(vertices[0]);
        Self::curve(CurveParams::Octagon { vertices })
    }

    pub fn simplex(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(DomainError::InvalidParameters(
                "simplex dimension must be positive".into(),
            ));
        }
        Ok(Domain::Simplex { dim })
    }

    /// Build a mesh cache from a uniform grid over the bounding box of
    /// `base`, keeping grid points that fall inside `base`. The membership
    /// threshold is 1.5 times the grid cell diagonal.
    pub fn mesh_cache(base: &Domain, resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(DomainError::InvalidParameters(
                "mesh resolution must be at least 2".into(),
            ));
        }
        let dim = base.dim();
        let total = (resolution as f64).powi(dim as i32);
        if total > 2e7 {
            return Err(DomainError::InvalidParameters(
                "mesh resolution too fine for this dimension".into(),
            ));
        }
        let r = base.bounding_radius();
        let spacing = 2.0 * r / (resolution - 1) as f64;
        let mut points = Vec::new();
        let mut idx = vec![0usize; dim];
        loop {
            let p: Vec<f64> = idx.iter().map(|&i| -r + spacing * i as f64).collect();
            if base.contains(&p)? {
                points.push(p);
            }
            let mut axis = 0;
            loop {
                if axis == dim {
                    break;
                }
                idx[axis] += 1;
                if idx[axis] < resolution {
                    break;
                }
                idx[axis] = 0;
                axis += 1;
            }
            if axis == dim {
                break;
            }
        }
        if points.is_empty() {
            return Err(DomainError::InvalidParameters(
                "mesh cache captured no interior points".into(),
            ));
        }
        let threshold = MESH_THRESHOLD_FACTOR * spacing * (dim as f64).sqrt();
        let radius = points.iter().map(|p| norm(p)).fold(0.0, f64::max) + threshold;
        Ok(Domain::MeshCache(MeshCache {
            points,
            threshold,
            dim,
            radius,
        }))
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Hypercube { lo, .. } => lo.len(),
            Domain::Ball { center, .. } => center.len(),
            Domain::Curve(_) => 2,
            Domain::Simplex { dim } => *dim,
            Domain::MeshCache(m) => m.dim,
        }
    }

    /// Radius of an origin-centered ball containing the domain.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            Domain::Hypercube { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(a, b)| a.abs().max(b.abs()).powi(2))
                .sum::<f64>()
                .sqrt(),
            Domain::Ball { center, radius } => norm(center) + radius,
            Domain::Curve(c) => c.radius,
            Domain::Simplex { .. } => 1.0,
            Domain::MeshCache(m) => m.radius,
        }
    }

    /// Largest pairwise distance between domain points (computed from the
    /// boundary discretization for curves, and up to the membership threshold
    /// for mesh caches).
    pub fn diameter(&self) -> f64 {
        match self {
            Domain::Hypercube { lo, hi } => dist(hi, lo),
            Domain::Ball { radius, .. } => 2.0 * radius,
            Domain::Curve(c) => {
                let mut best = 0.0f64;
                for i in 0..c.pts.len() {
                    for j in (i + 1)..c.pts.len() {
                        let dx = c.pts[i][0] - c.pts[j][0];
                        let dy = c.pts[i][1] - c.pts[j][1];
                        best = best.max(dx * dx + dy * dy);
                    }
                }
                best.sqrt()
            }
            Domain::Simplex { dim } => {
                if *dim >= 2 {
                    std::f64::consts::SQRT_2
                } else {
                    1.0
                }
            }
            Domain::MeshCache(m) => {
                let mut best = 0.0f64;
                for i in 0..m.points.len() {
                    for j in (i + 1)..m.points.len() {
                        best = best.max(dist(&m.points[i], &m.points[j]));
                    }
                }
                best + 2.0 * m.threshold
            }
        }
    }

    /// A point in the interior, used to orient normals and seed searches.
    pub fn interior_point(&self) -> Vec<f64> {
        match self {
            Domain::Hypercube { lo, hi } => lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect(),
            Domain::Ball { center, .. } => center.clone(),
            Domain::Curve(c) => c.witness.to_vec(),
            Domain::Simplex { dim } => vec![0.5 / *dim as f64; *dim],
            Domain::MeshCache(m) => m.points[0].clone(),
        }
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(DomainError::DimensionMismatch {
                got: x.len(),
                want: self.dim(),
            });
        }
        if !all_finite(x) {
            return Err(DomainError::NonFinite);
        }
        Ok(())
    }

    fn inside(&self, x: &[f64]) -> bool {
        match self {
            Domain::Hypercube { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(v, (a, b))| *v >= *a && *v <= *b),
            Domain::Ball { center, radius } => dist(x, center) <= *radius,
            Domain::Curve(c) => c.inside(&[x[0], x[1]]),
            Domain::Simplex { .. } => x.iter().all(|v| *v >= 0.0) && x.iter().sum::<f64>() <= 1.0,
            Domain::MeshCache(m) => m.inside(x),
        }
    }

    /// Membership in the closed domain.
    pub fn contains(&self, x: &[f64]) -> Result<bool> {
        self.check_point(x)?;
        Ok(self.inside(x))
    }

    /// Boundary crossing of the segment from `x_in` (inside) to `x_out`
    /// (outside). Returns the boundary point `b` and the weight `eta` such
    /// that `b = eta * x_in + (1 - eta) * x_out`.
    pub fn boundary_intersect(&self, x_in: &[f64], x_out: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_point(x_in)?;
        self.check_point(x_out)?;
        if !self.inside(x_in) {
            return Err(DomainError::ExpectedInside);
        }
        if self.inside(x_out) {
            return Err(DomainError::ExpectedOutside);
        }
        // `t` is the fraction of the way from x_in to x_out, so eta = 1 - t.
        let t = match self {
            Domain::Hypercube { lo, hi } => {
                let mut t_min = 1.0f64;
                for i in 0..lo.len() {
                    let d = x_out[i] - x_in[i];
                    if x_out[i] > hi[i] {
                        t_min = t_min.min((hi[i] - x_in[i]) / d);
                    } else if x_out[i] < lo[i] {
                        t_min = t_min.min((lo[i] - x_in[i]) / d);
                    }
                }
                t_min.clamp(0.0, 1.0)
            }
            Domain::Ball { center, radius } => {
                let p = sub(x_in, center);
                let d = sub(x_out, x_in);
                let a = dot(&d, &d);
                let b = 2.0 * dot(&p, &d);
                let c0 = dot(&p, &p) - radius * radius;
                let disc = (b * b - 4.0 * a * c0).max(0.0);
                ((-b + disc.sqrt()) / (2.0 * a)).clamp(0.0, 1.0)
            }
            Domain::Simplex { dim } => {
                let mut t_min = 1.0f64;
                for i in 0..*dim {
                    if x_out[i] < 0.0 {
                        t_min = t_min.min(x_in[i] / (x_in[i] - x_out[i]));
                    }
                }
                let s_in: f64 = x_in.iter().sum();
                let s_out: f64 = x_out.iter().sum();
                if s_out > 1.0 {
                    t_min = t_min.min((1.0 - s_in) / (s_out - s_in));
                }
                t_min.clamp(0.0, 1.0)
            }
            Domain::Curve(_) | Domain::MeshCache(_) => self.bisect_crossing(x_in, x_out),
        };
        let mut b: Vec<f64> = x_in
            .iter()
            .zip(x_out)
            .map(|(a, c)| a + t * (c - a))
            .collect();
        // Rounding can push b one ulp outside the closed set; snap it back so
        // callers can use b as an interior-side anchor.
        if !self.inside(&b) {
            b = self.project(&b)?;
        }
        Ok((b, 1.0 - t))
    }

    /// First containment flip along the segment, located by a coarse scan
    /// followed by bisection.
    fn bisect_crossing(&self, x_in: &[f64], x_out: &[f64]) -> f64 {
        let point_at = |t: f64| -> Vec<f64> {
            x_in.iter()
                .zip(x_out)
                .map(|(a, c)| a + t * (c - a))
                .collect()
        };
        const SCAN: usize = 32;
        let mut lo = 0.0f64;
        let mut hi = 1.0f64;
        for k in 1..=SCAN {
            let t = k as f64 / SCAN as f64;
            if self.inside(&point_at(t)) {
                lo = t;
            } else {
                hi = t;
                break;
            }
        }
        for _ in 0..BISECT_ITERS {
            let mid = 0.5 * (lo + hi);
            if self.inside(&point_at(mid)) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Inward unit normal at a boundary point.
    pub fn inward_normal(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check_point(b)?;
        let scale = 1.0 + self.bounding_radius();
        let on_tol = 1e-6 * scale;
        match self {
            Domain::Hypercube { lo, hi } => {
                let mut best = f64::INFINITY;
                let mut face_dist = vec![0.0f64; lo.len()];
                for i in 0..lo.len() {
                    let d_lo = (b[i] - lo[i]).abs();
                    let d_hi = (hi[i] - b[i]).abs();
                    face_dist[i] = d_lo.min(d_hi);
                    best = best.min(face_dist[i]);
                }
                if best > on_tol {
                    return Err(DomainError::NotOnBoundary);
                }
                let corner_tol = 1e-9 * scale;
                let mut n = vec![0.0f64; lo.len()];
                for i in 0..lo.len() {
                    if face_dist[i] <= best + corner_tol {
                        if (b[i] - lo[i]).abs() <= (hi[i] - b[i]).abs() {
                            n[i] = 1.0;
                        } else {
                            n[i] = -1.0;
                        }
                    }
                }
                if normalize(&mut n) == 0.0 {
                    return Err(DomainError::DegenerateNormal);
                }
                Ok(n)
            }
            Domain::Ball { center, radius } => {
                let r = dist(b, center);
                if (r - radius).abs() > on_tol {
                    return Err(DomainError::NotOnBoundary);
                }
                if r < 1e-12 {
                    return Err(DomainError::DegenerateNormal);
                }
                let mut n = sub(center, b);
                normalize(&mut n);
                Ok(n)
            }
            Domain::Simplex { dim } => {
                let s: f64 = b.iter().sum();
                let mut n = vec![0.0f64; *dim];
                let mut any = false;
                for i in 0..*dim {
                    if b[i].abs() <= on_tol {
                        n[i] += 1.0;
                        any = true;
                    }
                }
                if (1.0 - s).abs() <= on_tol {
                    let c = 1.0 / (*dim as f64).sqrt();
                    for v in n.iter_mut() {
                        *v -= c;
                    }
                    any = true;
                }
                if !any {
                    return Err(DomainError::NotOnBoundary);
                }
                if normalize(&mut n) == 0.0 {
                    return Err(DomainError::DegenerateNormal);
                }
                Ok(n)
            }
            Domain::Curve(c) => {
                let p = [b[0], b[1]];
                let (k, u, d) = c.nearest(&p);
                if d > on_tol {
                    return Err(DomainError::NotOnBoundary);
                }
                let n2 = match &c.params {
                    CurveParams::Octagon { .. } => self.polygon_normal(c, k, u)?,
                    _ => {
                        let t_hat = (k as f64 + u) / c.pts.len() as f64;
                        let fwd = curve_point(&c.params, t_hat + TANGENT_H);
                        let bwd = curve_point(&c.params, t_hat - TANGENT_H);
                        let tx = (fwd[0] - bwd[0]) / (2.0 * TANGENT_H);
                        let ty = (fwd[1] - bwd[1]) / (2.0 * TANGENT_H);
                        let mut n = [-ty, tx];
                        let len = (n[0] * n[0] + n[1] * n[1]).sqrt();
                        if len < 1e-300 {
                            let mut w = [c.witness[0] - p[0], c.witness[1] - p[1]];
                            let wl = (w[0] * w[0] + w[1] * w[1]).sqrt();
                            if wl < 1e-12 {
                                return Err(DomainError::DegenerateNormal);
                            }
                            w[0] /= wl;
                            w[1] /= wl;
                            w
                        } else {
                            n[0] /= len;
                            n[1] /= len;
                            self.orient_normal(&p, n, c)
                        }
                    }
                };
                Ok(vec![n2[0], n2[1]])
            }
            Domain::MeshCache(m) => {
                let (_, d) = m.nearest(b);
                if (d - m.threshold).abs() > 0.25 * m.threshold {
                    return Err(DomainError::NotOnBoundary);
                }
                let reach = 2.0 * m.threshold;
                let mut cx = vec![0.0f64; m.dim];
                let mut count = 0usize;
                for p in &m.points {
                    if dist(p, b) <= reach {
                        for (a, v) in cx.iter_mut().zip(p) {
                            *a += v;
                        }
                        count += 1;
                    }
                }
                if count == 0 {
                    return Err(DomainError::DegenerateNormal);
                }
                for v in cx.iter_mut() {
                    *v /= count as f64;
                }
                let mut n = sub(&cx, b);
                if normalize(&mut n) == 0.0 {
                    return Err(DomainError::DegenerateNormal);
                }
                Ok(n)
            }
        }
    }

    /// Inward normal for a polygon boundary point on segment `k` at fraction
    /// `u`: edge normal in the interior of an edge, angle bisector of the two
    /// adjacent edge normals at a vertex.
    fn polygon_normal(&self, c: &CurveDomain, k: usize, u: f64) -> Result<[f64; 2]> {
        let nseg = c.pts.len();
        let ccw = polygon_signed_area(&c.pts) > 0.0;
        let edge_normal = |k: usize| -> [f64; 2] {
            let (a, b) = c.seg(k);
            let dx = b[0] - a[0];
            let dy = b[1] - a[1];
            let len = (dx * dx + dy * dy).sqrt();
            if ccw {
                [-dy / len, dx / len]
            } else {
                [dy / len, -dx / len]
            }
        };
        let vertex_tol = 1e-9;
        let (prev, here);
        if u <= vertex_tol {
            prev = (k + nseg - 1) % nseg;
            here = k;
        } else if u >= 1.0 - vertex_tol {
            prev = k;
            here = (k + 1) % nseg;
        } else {
            let n = edge_normal(k);
            return Ok(n);
        }
        let n1 = edge_normal(prev);
        let n2 = edge_normal(here);
        let mut n = [n1[0] + n2[0], n1[1] + n2[1]];
        let len = (n[0] * n[0] + n[1] * n[1]).sqrt();
        if len < 1e-12 {
            return Err(DomainError::DegenerateNormal);
        }
        n[0] /= len;
        n[1] /= len;
        Ok(n)
    }

    /// Flip `n` if needed so it points into the domain, probing with small
    /// steps and falling back to the witness direction.
    fn orient_normal(&self, p: &[f64; 2], n: [f64; 2], c: &CurveDomain) -> [f64; 2] {
        let delta = 1e-5 * (1.0 + c.radius);
        let plus = [p[0] + delta * n[0], p[1] + delta * n[1]];
        if c.inside(&plus) {
            return n;
        }
        let minus = [p[0] - delta * n[0], p[1] - delta * n[1]];
        if c.inside(&minus) {
            return [-n[0], -n[1]];
        }
        let w = [c.witness[0] - p[0], c.witness[1] - p[1]];
        if w[0] * n[0] + w[1] * n[1] >= 0.0 {
            n
        } else {
            [-n[0], -n[1]]
        }
    }

    /// Reflect a proposal back into the domain by folding across the boundary,
    /// at most [`MAX_FOLDS`] times. Tangential grazes and cap exhaustion
    /// return the boundary point itself; the latter is logged.
    pub fn reflect_step(&self, x_prev: &[f64], x_prop: &[f64]) -> Result<Reflection> {
        self.check_point(x_prev)?;
        self.check_point(x_prop)?;
        if !self.inside(x_prev) {
            return Err(DomainError::ExpectedInside);
        }
        if self.inside(x_prop) {
            return Ok(Reflection {
                point: x_prop.to_vec(),
                hit: false,
                folds: 0,
                fallback: false,
                boundary: None,
                normal: None,
            });
        }
        let mut from = x_prev.to_vec();
        let mut prop = x_prop.to_vec();
        let mut first_boundary: Option<Vec<f64>> = None;
        let mut first_normal: Option<Vec<f64>> = None;
        let mut last_boundary: Vec<f64> = Vec::new();
        for fold in 0..MAX_FOLDS {
            let (b, _eta) = self.boundary_intersect(&from, &prop)?;
            let n = self.inward_normal(&b)?;
            if first_boundary.is_none() {
                first_boundary = Some(b.clone());
                first_normal = Some(n.clone());
            }
            let nu = sub(&prop, &b);
            let nd = dot(&nu, &n);
            if nd >= -1e-12 * (1.0 + norm(&nu)) {
                // Tangential graze: no usable reflection direction.
                return Ok(Reflection {
                    point: b.clone(),
                    hit: true,
                    folds: fold,
                    fallback: false,
                    boundary: first_boundary,
                    normal: first_normal,
                });
            }
            let mut reflected = b.clone();
            for i in 0..reflected.len() {
                reflected[i] += nu[i] - 2.0 * nd * n[i];
            }
            if self.inside(&reflected) {
                return Ok(Reflection {
                    point: reflected,
                    hit: true,
                    folds: fold + 1,
                    fallback: false,
                    boundary: first_boundary,
                    normal: first_normal,
                });
            }
            last_boundary = b;
            from = last_boundary.clone();
            prop = reflected;
        }
        log::warn!("reflection fold cap exhausted; returning boundary point");
        Ok(Reflection {
            point: last_boundary,
            hit: true,
            folds: MAX_FOLDS,
            fallback: true,
            boundary: first_boundary,
            normal: first_normal,
        })
    }

    /// Metric projection onto the closed domain (nearest boundary point for
    /// curve and mesh domains when outside).
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        if self.inside(x) {
            return Ok(x.to_vec());
        }
        match self {
            Domain::Hypercube { lo, hi } => Ok(x
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(v, (a, b))| v.clamp(*a, *b))
                .collect()),
            Domain::Ball { center, radius } => {
                let d = sub(x, center);
                let len = norm(&d);
                let mut scale = *radius / len;
                loop {
                    let p: Vec<f64> = center.iter().zip(&d).map(|(c, v)| c + v * scale).collect();
                    if self.inside(&p) {
                        return Ok(p);
                    }
                    // Shave an ulp-scale margin until rounding cooperates.
                    scale *= 1.0 - 1e-15;
                }
            }
            Domain::Simplex { dim } => {
                let clipped: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
                if clipped.iter().sum::<f64>() <= 1.0 {
                    return Ok(clipped);
                }
                // Euclidean projection onto the standard simplex {x >= 0,
                // sum = 1} via the sorted-threshold rule.
                let mut sorted: Vec<f64> = x.to_vec();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let mut cum = 0.0;
                let mut tau = 0.0;
                for (j, v) in sorted.iter().enumerate() {
                    cum += v;
                    let cand = (cum - 1.0) / (j + 1) as f64;
                    if v - cand > 0.0 {
                        tau = cand;
                    }
                }
                let _ = dim;
                let mut p: Vec<f64> = x.iter().map(|v| (v - tau).max(0.0)).collect();
                while p.iter().sum::<f64>() > 1.0 {
                    // Shave an ulp-scale margin until rounding cooperates.
                    let s = p.iter().sum::<f64>() * (1.0 + 1e-15);
                    for v in p.iter_mut() {
                        *v /= s;
                    }
                }
                Ok(p)
            }
            Domain::Curve(c) => {
                let p = [x[0], x[1]];
                let (k, u, _) = c.nearest(&p);
                let (a, b) = c.seg(k);
                Ok(vec![a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])])
            }
            Domain::MeshCache(m) => {
                let (i, d) = m.nearest(x);
                let q = m.points[i].clone();
                let mut s = m.threshold / d;
                loop {
                    let p: Vec<f64> = q.iter().zip(x).map(|(a, b)| a + s * (b - a)).collect();
                    if self.inside(&p) {
                        return Ok(p);
                    }
                    s *= 1.0 - 1e-15;
                }
            }
        }
    }

    /// Random boundary point; uniform in the curve parameter or face measure,
    /// not necessarily uniform in surface area.
    pub fn sample_boundary<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Domain::Hypercube { lo, hi } => {
                let d = lo.len();
                let axis = rng.gen_range(0..d);
                let high = rng.gen_bool(0.5);
                let mut p: Vec<f64> = (0..d).map(|i| rng.gen_range(lo[i]..hi[i])).collect();
                p[axis] = if high { hi[axis] } else { lo[axis] };
                p
            }
            Domain::Ball { center, radius } => {
                let mut dir: Vec<f64> = (0..center.len())
                    .map(|_| {
                        let u: f64 = rng.sample(rand_distr::StandardNormal);
                        u
                    })
                    .collect();
                if normalize(&mut dir) == 0.0 {
                    dir[0] = 1.0;
                }
                center
                    .iter()
                    .zip(&dir)
                    .map(|(c, v)| c + radius * v)
                    .collect()
            }
            Domain::Curve(c) => {
                let t: f64 = rng.gen_range(0.0..1.0);
                c.polyline_point(t).to_vec()
            }
            Domain::Simplex { dim } => {
                let d = *dim;
                // Interior of a random face: coordinate faces x_i = 0 or the
                // diagonal face sum = 1.
                let face = rng.gen_range(0..=d);
                if face == d {
                    let mut e: Vec<f64> =
                        (0..d).map(|_| -rng.gen_range(1e-12f64..1.0).ln()).collect();
                    let s: f64 = e.iter().sum();
                    for v in e.iter_mut() {
                        *v /= s;
                    }
                    e
                } else {
                    // Uniform in the solid (d-1)-simplex via Dirichlet gaps.
                    let mut e: Vec<f64> =
                        (0..d).map(|_| -rng.gen_range(1e-12f64..1.0).ln()).collect();
                    let s: f64 = e.iter().sum();
                    for v in e.iter_mut() {
                        *v /= s;
                    }
                    // Dropping one coordinate makes the rest uniform in the
                    // solid simplex; place the zero on the chosen face.
                    e[face] = 0.0;
                    e
                }
            }
            Domain::MeshCache(_) => {
                let dim = self.dim();
                let anchor = self.interior_point();
                let mut dir: Vec<f64> = (0..dim)
                    .map(|_| {
                        let u: f64 = rng.sample(rand_distr::StandardNormal);
                        u
                    })
                    .collect();
                if normalize(&mut dir) == 0.0 {
                    dir[0] = 1.0;
                }
                let reach = 2.0 * self.bounding_radius() + 1.0;
                let far: Vec<f64> = anchor
                    .iter()
                    .zip(&dir)
                    .map(|(a, v)| a + reach * v)
                    .collect();
                match self.boundary_intersect(&anchor, &far) {
                    Ok((b, _)) => b,
                    Err(_) => anchor,
                }
            }
        }
    }
}

fn polygon_signed_area(pts: &[[f64; 2]]) -> f64 {
    let n = pts.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * acc
}

/// Hypercube-to-simplex stick-breaking map
/// `y_i = x_i * prod_{j > i} (1 - x_j)`.
pub fn stick_breaking(x: &[f64]) -> Result<Vec<f64>> {
    if !all_finite(x) {
        return Err(DomainError::NonFinite);
    }
    if x.iter().any(|v| *v < 0.0 || *v > 1.0) {
        return Err(DomainError::OutOfRange);
    }
    let d = x.len();
    let mut y = vec![0.0f64; d];
    let mut tail = 1.0f64;
    for i in (0..d).rev() {
        y[i] = x[i] * tail;
        tail *= 1.0 - x[i];
    }
    Ok(y)
}

/// Inverse stick-breaking `x_i = y_i / (1 - sum_{j > i} y_j)`; fails when a
/// denominator drops below `1e-12`.
pub fn stick_breaking_inverse(y: &[f64]) -> Result<Vec<f64>> {
    if !all_finite(y) {
        return Err(DomainError::NonFinite);
    }
    let d = y.len();
    let mut x = vec![0.0f64; d];
    let mut suffix = 0.0f64;
    for i in (0..d).rev() {
        let denom = 1.0 - suffix;
        if denom < STICK_SINGULAR_TOL {
            return Err(DomainError::StickBreakingSingular);
        }
        x[i] = y[i] / denom;
        suffix += y[i];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!(
                (x - y).abs() <= tol,
                "expected {a:?} close to {b:?} within {tol}"
            );
        }
    }

    fn builtin_domains() -> Vec<(&'static str, Domain)> {
        vec![
            ("interval", Domain::unit_cube(1)),
            ("square", Domain::symmetric_cube(2)),
            ("cube3", Domain::unit_cube(3)),
            ("ball2", Domain::ball(vec![0.5, -0.25], 1.5).unwrap()),
            ("flower", Domain::flower(5, 3.0).unwrap()),
            ("heart", Domain::heart().unwrap()),
            ("octagon", Domain::regular_octagon(3.0).unwrap()),
            ("simplex3", Domain::simplex(3).unwrap()),
            (
                "mesh_ball",
                Domain::mesh_cache(&Domain::ball(vec![0.0, 0.0], 1.0).unwrap(), 41).unwrap(),
            ),
        ]
    }

    #[test]
    fn interval_boundary_intersect_example() {
        let d = Domain::unit_cube(1);
        let (b, eta) = d.boundary_intersect(&[0.5], &[1.3]).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-12);
        assert!((eta - 0.375).abs() < 1e-12);
    }

    #[test]
    fn boundary_intersect_rejects_bad_preconditions() {
        let d = Domain::unit_cube(1);
        assert!(matches!(
            d.boundary_intersect(&[1.5], &[2.0]),
            Err(DomainError::ExpectedInside)
        ));
        assert!(matches!(
            d.boundary_intersect(&[0.5], &[0.6]),
            Err(DomainError::ExpectedOutside)
        ));
        assert!(matches!(
            d.boundary_intersect(&[f64::NAN], &[2.0]),
            Err(DomainError::NonFinite)
        ));
        assert!(matches!(
            d.contains(&[0.0, 0.0]),
            Err(DomainError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn heart_ray_hits_top_notch() {
        let d = Domain::heart().unwrap();
        let (b, _) = d.boundary_intersect(&[0.0, 0.0], &[0.0, 10.0]).unwrap();
        // The crossing sits on the polyline, within discretization error of
        // the exact notch point (0, 5).
        assert_close(&b, &[0.0, 5.0], 1e-3);
    }

    #[test]
    fn flower_contains_vertex_and_rejects_outside() {
        let d = Domain::flower(5, 3.0).unwrap();
        assert!(d.contains(&[3.0, 0.0]).unwrap());
        assert!(d.contains(&[0.0, 0.0]).unwrap());
        assert!(!d.contains(&[3.2, 0.0]).unwrap());
        assert!(!d.contains(&[5.0, 0.0]).unwrap());
    }

    #[test]
    fn ball_reflection_example() {
        let d = Domain::ball(vec![0.0, 0.0], 1.0).unwrap();
        let r = d.reflect_step(&[0.0, 0.0], &[1.5, 0.0]).unwrap();
        assert!(r.hit);
        assert_eq!(r.folds, 1);
        assert_close(&r.point, &[0.5, 0.0], 1e-9);
        assert_close(r.boundary.as_ref().unwrap(), &[1.0, 0.0], 1e-9);
        assert_close(r.normal.as_ref().unwrap(), &[-1.0, 0.0], 1e-9);
    }

    #[test]
    fn interval_reflection_example() {
        let d = Domain::unit_cube(1);
        let r = d.reflect_step(&[0.5], &[-0.3]).unwrap();
        assert!((r.point[0] - 0.3).abs() < 1e-12);
        let r2 = d.reflect_step(&[0.5], &[0.7]).unwrap();
        assert!(!r2.hit);
        assert!((r2.point[0] - 0.7).abs() < 1e-15);
    }

    fn coordinate_fold(lo: f64, hi: f64, x: f64) -> f64 {
        let span = hi - lo;
        let mut y = (x - lo).rem_euclid(2.0 * span);
        if y > span {
            y = 2.0 * span - y;
        }
        y + lo
    }

    #[test]
    fn hypercube_fold_matches_coordinate_fold() {
        let d = Domain::unit_cube(2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let prev = vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let prop = vec![
                prev[0] + rng.gen_range(-2.5..2.5),
                prev[1] + rng.gen_range(-2.5..2.5),
            ];
            let r = d.reflect_step(&prev, &prop).unwrap();
            assert!(!r.fallback);
            let expect = vec![
                coordinate_fold(0.0, 1.0, prop[0]),
                coordinate_fold(0.0, 1.0, prop[1]),
            ];
            assert_close(&r.point, &expect, 1e-12);
        }
    }

    #[test]
    fn hypercube_corner_normal_is_bisector() {
        let d = Domain::symmetric_cube(2);
        let n = d.inward_normal(&[1.0, 0.0]).unwrap();
        assert_close(&n, &[-1.0, 0.0], 1e-12);
        let c = d.inward_normal(&[1.0, 1.0]).unwrap();
        let s = 0.5f64.sqrt();
        assert_close(&c, &[-s, -s], 1e-12);
    }

    #[test]
    fn square_polygon_normals() {
        let square = Domain::curve(CurveParams::Octagon {
            vertices: vec![
                [1.0, -1.0],
                [1.0, 1.0],
                [-1.0, 1.0],
                [-1.0, -1.0],
                [1.0, -1.0],
            ],
        })
        .unwrap();
        let edge = square.inward_normal(&[1.0, 0.0]).unwrap();
        assert_close(&edge, &[-1.0, 0.0], 1e-12);
        let corner = square.inward_normal(&[1.0, 1.0]).unwrap();
        let s = 0.5f64.sqrt();
        assert_close(&corner, &[-s, -s], 1e-12);
    }

    #[test]
    fn octagon_requires_closed_distinct_vertices() {
        let open = Domain::curve(CurveParams::Octagon {
            vertices: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        });
        assert!(matches!(open, Err(DomainError::InvalidParameters(_))));
        let thin = Domain::curve(CurveParams::Octagon {
            vertices: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]],
        });
        assert!(thin.is_err());
    }

    #[test]
    fn flower_offset_must_exceed_one() {
        assert!(Domain::flower(5, 1.0).is_err());
        assert!(Domain::flower(5, 0.5).is_err());
        assert!(Domain::flower(0, 3.0).is_err());
    }

    #[test]
    fn curve_point_formulas() {
        let flower = CurveParams::Flower {
            petals: 5,
            offset: 3.0,
        };
        assert_close(&curve_point(&flower, 0.0), &[3.0, 0.0], 1e-12);
        let p = curve_point(&flower, 0.05);
        let ang = 0.1 * std::f64::consts::PI;
        assert_close(&p, &[4.0 * ang.cos(), 4.0 * ang.sin()], 1e-12);

        assert_close(&curve_point(&CurveParams::Heart, 0.0), &[0.0, 5.0], 1e-12);
        assert_close(&curve_point(&CurveParams::Heart, 0.5), &[0.0, -17.0], 1e-12);

        let oct = CurveParams::Octagon {
            vertices: vec![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [1.0, 0.0]],
        };
        assert_close(&curve_point(&oct, 0.0), &curve_point(&oct, 1.0), 1e-12);
        assert_close(&curve_point(&oct, 0.125), &[0.5, 0.5], 1e-12);
    }

    #[test]
    fn mesh_cache_threshold_rule() {
        let ball = Domain::ball(vec![0.0, 0.0], 1.0).unwrap();
        let mesh = Domain::mesh_cache(&ball, 21).unwrap();
        // Spacing 0.1, cell diagonal 0.1 sqrt(2), threshold 1.5x that.
        if let Domain::MeshCache(m) = &mesh {
            assert!((m.threshold - 1.5 * 0.1 * 2f64.sqrt()).abs() < 1e-12);
        } else {
            unreachable!();
        }
        assert!(mesh.contains(&[0.0, 1.2]).unwrap());
        assert!(!mesh.contains(&[0.0, 1.3]).unwrap());
    }

    #[test]
    fn boundary_samples_have_inward_normals() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (name, d) in builtin_domains() {
            let delta = match &d {
                Domain::MeshCache(m) => 0.2 * m.threshold,
                Domain::Curve(_) => 1e-6 * (1.0 + d.bounding_radius()),
                _ => 1e-5 * (1.0 + d.bounding_radius()),
            };
            // Probes at distance delta are only meaningful where the boundary
            // has no feature thinner than delta; cusps (heart) and the bumpy
            // union-of-balls surface (mesh cache) get a small failure budget.
            let budget = match &d {
                Domain::Curve(_) | Domain::MeshCache(_) => 20,
                _ => 1,
            };
            let total = 1000;
            let mut probe_failures = 0usize;
            for _ in 0..total {
                let b = d.sample_boundary(&mut rng);
                let n = d
                    .inward_normal(&b)
                    .unwrap_or_else(|e| panic!("normal failed on {name} at {b:?}: {e}"));
                assert!((norm(&n) - 1.0).abs() < 1e-9, "normal not unit on {name}");
                let inside_pt: Vec<f64> = b.iter().zip(&n).map(|(x, v)| x + delta * v).collect();
                let outside_pt: Vec<f64> = b.iter().zip(&n).map(|(x, v)| x - delta * v).collect();
                if !d.contains(&inside_pt).unwrap() || d.contains(&outside_pt).unwrap() {
                    probe_failures += 1;
                }
            }
            assert!(
                probe_failures <= budget,
                "{probe_failures}/{total} probe failures on {name} (budget {budget})"
            );
        }
    }

    #[test]
    fn reflection_confines_all_builtin_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for (name, d) in builtin_domains() {
            let dim = d.dim();
            let anchor = d.interior_point();
            let step_scale = 0.5 * (1.0 + d.bounding_radius());
            let mut prev = anchor.clone();
            for _ in 0..2000 {
                let prop: Vec<f64> = (0..dim)
                    .map(|i| {
                        let g: f64 = rng.sample(rand_distr::StandardNormal);
                        prev[i] + step_scale * 0.2 * g
                    })
                    .collect();
                let r = d
                    .reflect_step(&prev, &prop)
                    .unwrap_or_else(|e| panic!("reflection failed on {name}: {e}"));
                assert!(
                    d.contains(&r.point).unwrap(),
                    "reflection left {name}: {:?}",
                    r.point
                );
                prev = r.point;
            }
        }
    }

    #[test]
    fn projection_is_metric_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let domains = vec![
            Domain::unit_cube(3),
            Domain::ball(vec![0.0, 0.0], 1.0).unwrap(),
            Domain::simplex(4).unwrap(),
        ];
        for d in domains {
            let dim = d.dim();
            for _ in 0..200 {
                let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let p = d.project(&x).unwrap();
                assert!(d.contains(&p).unwrap());
                let dp = dist(&x, &p);
                // No sampled domain point may be closer than the projection.
                for _ in 0..100 {
                    let mut z: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    z = d.project(&z).unwrap();
                    assert!(dist(&x, &z) >= dp - 1e-9);
                }
            }
        }
    }

    #[test]
    fn simplex_projection_example() {
        let d = Domain::simplex(2).unwrap();
        let p = d.project(&[0.8, 0.8]).unwrap();
        assert_close(&p, &[0.5, 0.5], 1e-12);
        let q = d.project(&[-0.3, 0.4]).unwrap();
        assert_close(&q, &[0.0, 0.4], 1e-12);
    }

    #[test]
    fn stick_breaking_examples() {
        let y = stick_breaking(&[0.5, 0.5]).unwrap();
        assert_close(&y, &[0.25, 0.5], 1e-15);
        let y3 = stick_breaking(&[0.2, 0.3, 0.4]).unwrap();
        assert_close(&y3, &[0.084, 0.18, 0.4], 1e-15);
        let x3 = stick_breaking_inverse(&y3).unwrap();
        assert_close(&x3, &[0.2, 0.3, 0.4], 1e-12);
    }

    #[test]
    fn stick_breaking_outputs_live_in_simplex() {
        let simplex = Domain::simplex(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..500 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            let y = stick_breaking(&x).unwrap();
            assert!(simplex.contains(&y).unwrap());
            let back = stick_breaking_inverse(&y).unwrap();
            assert_close(&back, &x, 1e-10);
        }
    }

    #[test]
    fn stick_breaking_singularity_is_an_error() {
        // Suffix sum reaches 1, so the denominator for x_0 vanishes.
        let res = stick_breaking_inverse(&[0.3, 1.0]);
        assert!(matches!(res, Err(DomainError::StickBreakingSingular)));
        assert!(matches!(
            stick_breaking(&[1.5, 0.0]),
            Err(DomainError::OutOfRange)
        ));
    }

    #[test]
    fn bounding_radius_covers_boundary_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for (name, d) in builtin_domains() {
            let r = d.bounding_radius();
            for _ in 0..200 {
                let b = d.sample_boundary(&mut rng);
                assert!(
                    norm(&b) <= r + 1e-9,
                    "boundary sample escapes bounding radius on {name}"
                );
            }
        }
    }

    #[test]
    fn diameter_reasonable_for_known_shapes() {
        let square = Domain::symmetric_cube(2);
        assert!((square.diameter() - 8f64.sqrt()).abs() < 1e-12);
        let ball = Domain::ball(vec![0.0], 2.0).unwrap();
        assert!((ball.diameter() - 4.0).abs() < 1e-12);
        let flower = Domain::flower(5, 3.0).unwrap();
        let d = flower.diameter();
        assert!(d > 6.0 && d <= 8.0, "flower diameter {d}");
    }
}
