//! Homography estimation: Hartley-normalized DLT, seeded RANSAC with a
//! symmetric transfer error inlier test, and a least-squares refit on the
//! winning inlier set.

use nalgebra::{DMatrix, Matrix3, Point2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::CorrespondenceSet;

/// Determinant magnitude below which a homography counts as singular.
pub const SINGULAR_DET: f64 = 1e-12;
/// Homogeneous coordinate magnitude below which a point maps to infinity.
pub const INFINITY_W: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("too few correspondences: {found} < {needed}")]
    TooFewMatches { found: usize, needed: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("singular homography (|det| = {0:e})")]
    Singular(f64),
    #[error("point maps to infinity")]
    PointAtInfinity,
    #[error("no model with at least 4 inliers")]
    NoConsensus,
}

/// 3×3 projective transform, stored with `m[2][2] = 1` whenever that entry
/// is non-negligible (otherwise scaled to unit Frobenius norm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Self {
        Homography(normalize(m))
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Self {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::from_rows([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        Self::from_rows([[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Rotation by `angle` radians about `center` (y axis pointing down, so a
    /// positive angle turns clockwise on screen).
    pub fn rotation_about(angle: f64, center: Point2<f64>) -> Self {
        let (s, c) = angle.sin_cos();
        let r = Self::from_rows([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]);
        Self::translation(center.x, center.y)
            .compose(&r)
            .compose(&Self::translation(-center.x, -center.y))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    pub fn is_invertible(&self) -> bool {
        let d = self.determinant();
        d.is_finite() && d.abs() > SINGULAR_DET
    }

    /// Homogeneous image of `p` before the perspective divide.
    pub fn apply_homogeneous(&self, p: Point2<f64>) -> Vector3<f64> {
        self.0 * Vector3::new(p.x, p.y, 1.0)
    }

    pub fn apply(&self, p: Point2<f64>) -> Result<Point2<f64>, FitError> {
        let v = self.apply_homogeneous(p);
        if !(v.z.abs() > INFINITY_W) {
            return Err(FitError::PointAtInfinity);
        }
        Ok(Point2::new(v.x / v.z, v.y / v.z))
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &Homography) -> Homography {
        Homography::from_matrix(self.0 * inner.0)
    }

    pub fn inverse(&self) -> Result<Homography, FitError> {
        let d = self.determinant();
        if !(d.is_finite() && d.abs() > SINGULAR_DET) {
            return Err(FitError::Singular(d));
        }
        self.0
            .try_inverse()
            .map(Homography::from_matrix)
            .ok_or(FitError::Singular(d))
    }

    /// Inverse without renormalization, so the sign of the homogeneous
    /// coordinate stays meaningful (positive for points in front).
    pub(crate) fn raw_inverse(&self) -> Result<Matrix3<f64>, FitError> {
        let d = self.determinant();
        if !(d.is_finite() && d.abs() > SINGULAR_DET) {
            return Err(FitError::Singular(d));
        }
        self.0.try_inverse().ok_or(FitError::Singular(d))
    }

    pub fn max_entry_diff(&self, other: &Homography) -> f64 {
        (self.0 - other.0).abs().max()
    }
}

fn normalize(m: Matrix3<f64>) -> Matrix3<f64> {
    let norm = m.norm();
    if m[(2, 2)].abs() > 1e-12 * norm {
        m / m[(2, 2)]
    } else if norm > 0.0 {
        m / norm
    } else {
        m
    }
}

impl Serialize for Homography {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Homography {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Homography::from_rows(rows))
    }
}

/// Translate to the centroid and scale the mean distance to √2.
fn hartley(points: &[Point2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
    let (cx, cy) = (sx / n, sy / n);
    let mean = points
        .iter()
        .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean > 1e-300 {
        std::f64::consts::SQRT_2 / mean
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn transform(t: &Matrix3<f64>, p: &Point2<f64>) -> Point2<f64> {
    let v = t * Vector3::new(p.x, p.y, 1.0);
    Point2::new(v.x / v.z, v.y / v.z)
}

fn triangle_area2(a: &Point2<f64>, b: &Point2<f64>, c: &Point2<f64>) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn has_collinear_triple(pts: &[Point2<f64>]) -> bool {
    // Relative to the squared spread, so the test is scale-free.
    let spread = pts
        .iter()
        .flat_map(|a| pts.iter().map(move |b| (a - b).norm_squared()))
        .fold(0.0, f64::max);
    let tol = 1e-10 * spread.max(1e-300);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                if triangle_area2(&pts[i], &pts[j], &pts[k]).abs() <= tol {
                    return true;
                }
            }
        }
    }
    false
}

/// Estimates `H` with `dst ~ H · src` from four or more pairs.
pub fn dlt_homography(src: &[Point2<f64>], dst: &[Point2<f64>]) -> Result<Homography, FitError> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return Err(FitError::TooFewMatches {
            found: n.min(dst.len()),
            needed: 4,
        });
    }
    if src.iter().chain(dst).any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(FitError::Degenerate("non-finite point".into()));
    }
    if n == 4 && (has_collinear_triple(src) || has_collinear_triple(dst)) {
        return Err(FitError::Degenerate("collinear sample".into()));
    }

    let ts = hartley(src);
    let td = hartley(dst);
    // Pad to at least 9 rows so the SVD exposes the full right null space.
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (s, d)) in src.iter().zip(dst).enumerate() {
        let s = transform(&ts, s);
        let d = transform(&td, d);
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let r0 = 2 * k;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        let r1 = r0 + 1;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = v * x;
        a[(r1, 7)] = v * y;
        a[(r1, 8)] = v;
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| FitError::Degenerate("SVD failed".into()))?;
    // nalgebra does not sort singular values.
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let smallest = order[0];
    let second = svd.singular_values[order[1]];
    let largest = svd.singular_values[order[order.len() - 1]];
    if !(second > 1e-10 * largest) {
        return Err(FitError::Degenerate("rank-deficient system".into()));
    }
    let h = v_t.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| FitError::Degenerate("normalization not invertible".into()))?;
    let out = Homography::from_matrix(td_inv * hn * ts);
    if !out.is_invertible() {
        return Err(FitError::Singular(out.determinant()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub reproj_threshold: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            reproj_threshold: 3.0,
            confidence: 0.995,
            max_iterations: 2000,
            rng_seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn with_seed(self, rng_seed: u64) -> Self {
        RansacConfig { rng_seed, ..self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub h: Homography,
    pub inlier_mask: Vec<bool>,
    pub inlier_count: usize,
    /// Hypotheses evaluated before the adaptive bound was met.
    pub iterations: usize,
}

/// max(forward, backward) transfer error, squared.
pub fn symmetric_transfer_error_sq(h: &Homography, h_inv: &Homography, src: Point2<f64>, dst: Point2<f64>) -> f64 {
    let fwd = match h.apply(src) {
        Ok(p) => (p - dst).norm_squared(),
        Err(_) => return f64::INFINITY,
    };
    let bwd = match h_inv.apply(dst) {
        Ok(p) => (p - src).norm_squared(),
        Err(_) => return f64::INFINITY,
    };
    let e = fwd.max(bwd);
    if e.is_nan() {
        f64::INFINITY
    } else {
        e
    }
}

fn count_inliers(h: &Homography, src: &[Point2<f64>], dst: &[Point2<f64>], thr_sq: f64) -> Option<(Vec<bool>, usize)> {
    let h_inv = h.inverse().ok()?;
    let mask: Vec<bool> = src
        .iter()
        .zip(dst)
        .map(|(s, d)| symmetric_transfer_error_sq(h, &h_inv, *s, *d) < thr_sq)
        .collect();
    let count = mask.iter().filter(|&&m| m).count();
    Some((mask, count))
}

/// Oriented-triangle consistency of a minimal sample: a valid homography
/// preserves the orientation of every triple (up to one global flip).
fn sample_is_consistent(src: &[Point2<f64>; 4], dst: &[Point2<f64>; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [1, 2, 3], [0, 2, 3], [0, 1, 3]];
    let mut sign = 0.0;
    for t in TRIPLES {
        let a = triangle_area2(&src[t[0]], &src[t[1]], &src[t[2]]);
        let b = triangle_area2(&dst[t[0]], &dst[t[1]], &dst[t[2]]);
        let s = (a * b).signum();
        if a * b == 0.0 {
            return false;
        }
        if sign == 0.0 {
            sign = s;
        } else if s != sign {
            return false;
        }
    }
    true
}

fn adaptive_bound(inliers: usize, total: usize, confidence: f64, cap: usize) -> usize {
    let w = inliers as f64 / total as f64;
    let p_good = w.powi(4);
    if p_good >= 1.0 - f64::EPSILON {
        return 1;
    }
    let denom = (1.0 - p_good).ln();
    if denom >= 0.0 || !denom.is_finite() {
        return cap;
    }
    let n = ((1.0 - confidence).ln() / denom).ceil();
    if n.is_finite() && n >= 0.0 {
        (n as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// Robust candidate → query homography from a correspondence set.
pub fn ransac_homography(cs: &CorrespondenceSet, cfg: &RansacConfig) -> Result<FitResult, FitError> {
    let src: Vec<Point2<f64>> = cs.pairs.iter().map(|c| c.candidate).collect();
    let dst: Vec<Point2<f64>> = cs.pairs.iter().map(|c| c.query).collect();
    ransac_points(&src, &dst, cfg)
}

pub fn ransac_points(src: &[Point2<f64>], dst: &[Point2<f64>], cfg: &RansacConfig) -> Result<FitResult, FitError> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return Err(FitError::TooFewMatches {
            found: n.min(dst.len()),
            needed: 4,
        });
    }
    let thr_sq = cfg.reproj_threshold * cfg.reproj_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    let mut best: Option<(Homography, Vec<bool>, usize)> = None;
    let mut bound = cfg.max_iterations;
    let mut iter = 0;
    while iter < bound {
        iter += 1;
        let idx = sample(&mut rng, n, 4);
        let s4 = [
            src[idx.index(0)],
            src[idx.index(1)],
            src[idx.index(2)],
            src[idx.index(3)],
        ];
        let d4 = [
            dst[idx.index(0)],
            dst[idx.index(1)],
            dst[idx.index(2)],
            dst[idx.index(3)],
        ];
        if !sample_is_consistent(&s4, &d4) {
            continue;
        }
        let Ok(h) = dlt_homography(&s4, &d4) else {
            continue;
        };
        let Some((mask, count)) = count_inliers(&h, src, dst, thr_sq) else {
            continue;
        };
        if best.as_ref().is_none_or(|b| count > b.2) {
            bound = bound.min(adaptive_bound(count, n, cfg.confidence, cfg.max_iterations));
            best = Some((h, mask, count));
        }
    }

    let (h, mask, count) = best.ok_or(FitError::NoConsensus)?;
    if count < 4 {
        return Err(FitError::NoConsensus);
    }

    let (in_src, in_dst): (Vec<_>, Vec<_>) = src
        .iter()
        .zip(dst)
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|((s, d), _)| (*s, *d))
        .unzip();
    let refit = dlt_homography(&in_src, &in_dst)
        .ok()
        .and_then(|h2| count_inliers(&h2, src, dst, thr_sq).map(|(m, c)| (h2, m, c)));
    let (h, mask, count) = match refit {
        Some((h2, m2, c2)) if c2 >= count => (h2, m2, c2),
        _ => (h, mask, count),
    };
    Ok(FitResult {
        h,
        inlier_mask: mask,
        inlier_count: count,
        iterations: iter,
    })
}
