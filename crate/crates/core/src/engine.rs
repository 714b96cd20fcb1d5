//! Iterative coregistration of a query against ranked candidate tiles.
//!
//! Frames: the query and the candidate are resized to a square canonical
//! side `R`; the surroundings mosaic is `3R × 3R` with the candidate at
//! offset `(R, R)`. Each iteration fits `H_i : C_i → Q` and accumulates
//! `A_i = H_i ∘ A_{i-1}`, with `A_{-1}` the translation from mosaic to
//! candidate frame, so every `A_i` maps mosaic pixels to query pixels.
//! `C_{i+1}` is always re-warped from the mosaic, never from `C_i`.

use std::time::Instant;

use nalgebra::{Point2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{run_matcher, MatchError, Matcher, MatcherConfig, BUILTIN};
use crate::geo::{from_mercator, quad_area, quad_is_convex, Footprint, GeoPoint, MercPoint, TileGeom};
use crate::raster::{build_mosaic, resize, warp_perspective, Image, Mosaic, RasterError};
use crate::robustfit::{ransac_homography, FitError, Homography, RansacConfig};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("no candidates to process")]
    NoCandidates,
    #[error("invalid engine configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Matcher(#[from] MatchError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryMetadata {
    pub focal_length_mm: Option<f64>,
    pub tilt_deg: Option<f64>,
    pub cloud_cover_pct: Option<f64>,
    pub centerpoint: Option<GeoPoint>,
}

#[derive(Debug, Clone)]
pub struct QueryImage {
    pub id: String,
    pub image: Image,
    pub metadata: QueryMetadata,
}

#[derive(Debug, Clone)]
pub struct CandidateTile {
    pub image: Image,
    pub geom: TileGeom,
    /// Row-major NW, N, NE, W, E, SW, S, SE; `None` for tiles missing from
    /// the database.
    pub neighbors: [Option<Image>; 8],
    /// Retrieval position, 1-based.
    pub rank: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub max_iterations: usize,
    pub min_matches: usize,
    pub max_area_ratio: f64,
    pub matcher: String,
    pub matcher_cfg: MatcherConfig,
    pub ransac_cfg: RansacConfig,
    pub inlier_threshold: Option<usize>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            max_iterations: 4,
            min_matches: 4,
            max_area_ratio: 9.0,
            matcher: BUILTIN.to_string(),
            matcher_cfg: MatcherConfig::default(),
            ransac_cfg: RansacConfig::default(),
            inlier_threshold: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.max_iterations < 1 {
            return Err(EngineError::Config("max_iterations must be at least 1".into()));
        }
        if self.min_matches < 4 {
            return Err(EngineError::Config("min_matches must be at least 4".into()));
        }
        if !(self.max_area_ratio > 0.0) {
            return Err(EngineError::Config("max_area_ratio must be positive".into()));
        }
        let r = &self.ransac_cfg;
        if !(r.reproj_threshold > 0.0) || !(r.confidence > 0.0 && r.confidence < 1.0) {
            return Err(EngineError::Config("invalid RANSAC parameters".into()));
        }
        self.matcher_cfg.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    TooFewMatches,
    NonConvexFootprint,
    AreaExceeded,
    BelowInlierThreshold,
    EstimationFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Localized,
    /// At least one candidate completed every iteration, but none reached
    /// the inlier threshold.
    Rejected,
    NoCandidateAccepted,
}

/// Per-candidate record of one coregistration attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub rank: u8,
    pub iterations_run: usize,
    /// Inlier count of the last successful fit (0 if none).
    pub inlier_count: usize,
    pub reject_reason: Option<RejectReason>,
    /// Present when the candidate survived every iteration.
    pub footprint: Option<Footprint>,
    /// Accumulated mosaic → query homography, when accepted.
    pub homography: Option<Homography>,
    pub detail: Option<String>,
    pub wall_time_s: f64,
}

impl CandidateReport {
    pub fn accepted(&self) -> bool {
        self.footprint.is_some() && self.reject_reason.is_none()
    }

    /// Survived every stopping criterion, whether or not it then reached the
    /// inlier threshold.
    pub fn completed(&self) -> bool {
        self.footprint.is_some() && matches!(self.reject_reason, None | Some(RejectReason::BelowInlierThreshold))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub query_id: String,
    pub status: Status,
    pub footprint: Option<Footprint>,
    pub inlier_count: usize,
    pub accepted_rank: Option<u8>,
    pub candidates: Vec<CandidateReport>,
    pub seed: u64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Stop at the first candidate that passes every check.
    #[default]
    FirstAccept,
    /// Coregister every candidate; the reported prediction is unchanged.
    ExhaustAll,
}

/// Canonical-frame working set for one candidate.
pub struct Prepared {
    pub query: Image,
    pub center: Image,
    pub mosaic: Mosaic,
    pub tile_area: f64,
}

/// Resizes query, candidate and neighbors to side `r` and builds the
/// surroundings mosaic. Neighbors with other channel counts are converted.
pub fn prepare(q: &Image, c: &CandidateTile, r: u32) -> Result<Prepared, RasterError> {
    let rgb = c.image.channels() == 3;
    let fit = |img: &Image| {
        let img = if rgb { img.to_rgb() } else { img.to_gray() };
        resize(&img, r, r)
    };
    let center = fit(&c.image);
    let neighbors = c.neighbors.clone().map(|n| n.map(|img| fit(&img)));
    let mosaic = build_mosaic(&center, &c.geom, &neighbors)?;
    Ok(Prepared {
        query: resize(q, r, r),
        center,
        mosaic,
        tile_area: c.geom.mercator_area()?,
    })
}

/// Result of the per-iteration geometric checks.
#[derive(Debug, Clone, PartialEq)]
pub enum FootprintCheck {
    Valid(Footprint),
    Invalid(RejectReason, String),
}

/// Back-projects the query corners through `mosaic_to_query` onto the
/// mosaic and applies the convexity and area criteria in Mercator space.
pub fn check_footprint(
    mosaic_to_query: &Homography,
    side: u32,
    mosaic_geom: &TileGeom,
    tile_area: f64,
    max_area_ratio: f64,
) -> FootprintCheck {
    let inv = match mosaic_to_query.raw_inverse() {
        Ok(m) => m,
        Err(e) => return FootprintCheck::Invalid(RejectReason::EstimationFailure, e.to_string()),
    };
    let s = side as f64;
    let corners = [(0.0, 0.0), (s, 0.0), (s, s), (0.0, s)];
    let hom = corners.map(|(x, y)| inv * Vector3::new(x, y, 1.0));
    // Corners on both sides of the projective horizon cannot bound a
    // finite quadrilateral.
    let positive = hom.iter().filter(|v| v.z > 1e-12).count();
    let negative = hom.iter().filter(|v| v.z < -1e-12).count();
    if positive != 4 && negative != 4 {
        return FootprintCheck::Invalid(RejectReason::NonConvexFootprint, "footprint crosses the horizon".into());
    }
    let mut merc = [Point2::origin(); 4];
    for (m, v) in merc.iter_mut().zip(&hom) {
        let px = Point2::new(v.x / v.z, v.y / v.z);
        match mosaic_geom.pixel_to_mercator(px) {
            Ok(p) => *m = p.to_point(),
            Err(e) => return FootprintCheck::Invalid(RejectReason::EstimationFailure, e.to_string()),
        }
    }
    if !quad_is_convex(&merc) {
        return FootprintCheck::Invalid(RejectReason::NonConvexFootprint, "non-convex footprint".into());
    }
    let area = quad_area(&merc);
    if area > max_area_ratio * tile_area {
        return FootprintCheck::Invalid(
            RejectReason::AreaExceeded,
            format!("footprint area is {:.2}x the tile", area / tile_area),
        );
    }
    let geo = merc.map(|p| from_mercator(MercPoint::new(p.x, p.y)));
    if let Some(bad) = geo.iter().find(|g| g.validate().is_err()) {
        return FootprintCheck::Invalid(
            RejectReason::EstimationFailure,
            format!("footprint corner off the map: ({}, {})", bad.lat, bad.lon),
        );
    }
    FootprintCheck::Valid(Footprint::new(geo))
}

/// Mixes the run seed with query, rank and iteration into a RANSAC seed.
pub fn derive_seed(seed: u64, query_id: &str, rank: u8, iteration: usize) -> u64 {
    // FNV-1a over the id, then splitmix64 finalization.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in query_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed
        ^ h.rotate_left(17)
        ^ (rank as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (iteration as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Trace of one candidate's iterations, for diagnostics and tests.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// Accumulated mosaic → query homography after each completed fit.
    pub accumulated: Vec<Homography>,
    /// Per-iteration homography `H_i : C_i → Q`.
    pub steps: Vec<Homography>,
    pub inliers: Vec<usize>,
}

/// Runs the iterative loop for one candidate.
pub fn coregister_candidate(
    matcher: &mut dyn Matcher,
    q: &QueryImage,
    c: &CandidateTile,
    cfg: &EngineConfig,
    seed: u64,
) -> Result<CandidateReport, EngineError> {
    coregister_traced(matcher, q, c, cfg, seed).map(|(r, _)| r)
}

pub fn coregister_traced(
    matcher: &mut dyn Matcher,
    q: &QueryImage,
    c: &CandidateTile,
    cfg: &EngineConfig,
    seed: u64,
) -> Result<(CandidateReport, Trace), EngineError> {
    let start = Instant::now();
    let side = cfg.matcher_cfg.image_side;
    let mut trace = Trace::default();
    let mut report = CandidateReport {
        rank: c.rank,
        iterations_run: 0,
        inlier_count: 0,
        reject_reason: None,
        footprint: None,
        homography: None,
        detail: None,
        wall_time_s: 0.0,
    };
    let reject = |mut r: CandidateReport, reason, detail: String| {
        r.reject_reason = Some(reason);
        r.detail = Some(detail);
        r.wall_time_s = start.elapsed().as_secs_f64();
        r
    };

    let prep = match prepare(&q.image, c, side) {
        Ok(p) => p,
        Err(e) => return Ok((reject(report, RejectReason::EstimationFailure, e.to_string()), trace)),
    };
    let offset = side as f64;
    let mut acc = Homography::translation(-offset, -offset);
    let mut current = prep.center.clone();
    let mut footprint = None;

    for i in 0..cfg.max_iterations {
        report.iterations_run = i + 1;
        let cs = run_matcher(matcher, &prep.query, &current, &cfg.matcher_cfg)?;
        if cs.len() < cfg.min_matches {
            let d = format!("iteration {i}: {} matches", cs.len());
            return Ok((reject(report, RejectReason::TooFewMatches, d), trace));
        }
        let rcfg = cfg.ransac_cfg.with_seed(derive_seed(seed, &q.id, c.rank, i));
        let fit = match ransac_homography(&cs, &rcfg) {
            Ok(f) => f,
            Err(e @ FitError::TooFewMatches { .. }) => {
                return Ok((reject(report, RejectReason::TooFewMatches, e.to_string()), trace));
            }
            Err(e) => {
                let d = format!("iteration {i}: {e}");
                return Ok((reject(report, RejectReason::EstimationFailure, d), trace));
            }
        };
        report.inlier_count = fit.inlier_count;
        if fit.inlier_count < cfg.min_matches {
            let d = format!("iteration {i}: {} inliers", fit.inlier_count);
            return Ok((reject(report, RejectReason::TooFewMatches, d), trace));
        }
        acc = fit.h.compose(&acc);
        trace.steps.push(fit.h);
        trace.accumulated.push(acc);
        trace.inliers.push(fit.inlier_count);

        match check_footprint(&acc, side, &prep.mosaic.geom, prep.tile_area, cfg.max_area_ratio) {
            FootprintCheck::Valid(f) => footprint = Some(f),
            FootprintCheck::Invalid(reason, d) => {
                return Ok((reject(report, reason, format!("iteration {i}: {d}")), trace));
            }
        }
        if i + 1 < cfg.max_iterations {
            current = match warp_perspective(&prep.mosaic.image, &acc, (side, side)) {
                Ok(img) => img,
                Err(e) => {
                    let d = format!("iteration {i}: {e}");
                    return Ok((reject(report, RejectReason::EstimationFailure, d), trace));
                }
            };
        }
    }

    report.footprint = footprint;
    report.homography = Some(acc);
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((report, trace))
}

/// Processes candidates in rank order until one is accepted with enough
/// inliers (or all of them, in exhaust-all mode).
pub fn localize(
    matcher: &mut dyn Matcher,
    q: &QueryImage,
    candidates: &[CandidateTile],
    cfg: &EngineConfig,
    mode: RunMode,
    seed: u64,
) -> Result<LocalizationResult, EngineError> {
    if candidates.is_empty() {
        return Err(EngineError::NoCandidates);
    }
    cfg.validate()?;
    let start = Instant::now();
    let mut order: Vec<&CandidateTile> = candidates.iter().collect();
    order.sort_by_key(|c| c.rank);

    let mut result = LocalizationResult {
        query_id: q.id.clone(),
        status: Status::NoCandidateAccepted,
        footprint: None,
        inlier_count: 0,
        accepted_rank: None,
        candidates: Vec::new(),
        seed,
        wall_time_s: 0.0,
    };
    let mut any_accepted = false;
    for c in order {
        let mut report = coregister_candidate(matcher, q, c, cfg, seed)?;
        if report.accepted() {
            any_accepted = true;
            let threshold = cfg.inlier_threshold.unwrap_or(0).max(cfg.min_matches);
            if report.inlier_count < threshold {
                report.reject_reason = Some(RejectReason::BelowInlierThreshold);
                report.detail = Some(format!("{} inliers < {threshold}", report.inlier_count));
            } else if result.status != Status::Localized {
                result.status = Status::Localized;
                result.footprint = report.footprint;
                result.inlier_count = report.inlier_count;
                result.accepted_rank = Some(report.rank);
            }
        }
        result.candidates.push(report);
        if result.status == Status::Localized && mode == RunMode::FirstAccept {
            break;
        }
    }
    if result.status != Status::Localized && any_accepted {
        result.status = Status::Rejected;
    }
    result.wall_time_s = start.elapsed().as_secs_f64();
    Ok(result)
}

/// Re-decides an exhaust-all result under another inlier threshold without
/// re-running any candidate. Exact because exhaust-all processes every
/// candidate regardless of earlier decisions.
pub fn rethreshold(result: &LocalizationResult, threshold: usize) -> LocalizationResult {
    let mut out = result.clone();
    out.status = Status::NoCandidateAccepted;
    out.footprint = None;
    out.inlier_count = 0;
    out.accepted_rank = None;
    let mut any_completed = false;
    for c in out.candidates.iter_mut().filter(|c| c.completed()) {
        any_completed = true;
        if c.inlier_count < threshold {
            c.reject_reason = Some(RejectReason::BelowInlierThreshold);
            c.detail = Some(format!("{} inliers < {threshold}", c.inlier_count));
            continue;
        }
        c.reject_reason = None;
        c.detail = None;
        if out.status != Status::Localized {
            out.status = Status::Localized;
            out.footprint = c.footprint;
            out.inlier_count = c.inlier_count;
            out.accepted_rank = Some(c.rank);
        }
    }
    if out.status != Status::Localized && any_completed {
        out.status = Status::Rejected;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Correspondence, CorrespondenceSet};
    use crate::geo::{footprint_contains, MercPoint};

    fn tile_geom(r: u32) -> TileGeom {
        let ext = 1.0 / 4096.0;
        let tl = MercPoint::new(2100.0 * ext, 1600.0 * ext);
        TileGeom::from_mercator_rect(tl, MercPoint::new(tl.x + ext, tl.y + ext), r, r).unwrap()
    }

    /// Returns the correspondences that a fixed homography `C_i → Q` would
    /// produce on a grid; records calls.
    struct Scripted {
        steps: Vec<Option<Homography>>,
        calls: usize,
    }

    impl Matcher for Scripted {
        fn id(&self) -> &str {
            "scripted"
        }
        fn match_canonical(
            &mut self,
            _q: &Image,
            _c: &Image,
            cfg: &MatcherConfig,
        ) -> Result<CorrespondenceSet, MatchError> {
            let step = self.steps.get(self.calls).cloned().flatten();
            self.calls += 1;
            let s = cfg.image_side as f64;
            let mut pairs = Vec::new();
            if let Some(h) = step {
                for gy in 1..8 {
                    for gx in 1..8 {
                        let c = Point2::new(gx as f64 * s / 8.0 + 0.3 * gy as f64, gy as f64 * s / 8.0);
                        let q = h.apply(c).unwrap();
                        if q.x >= 0.0 && q.y >= 0.0 && q.x <= s && q.y <= s {
                            pairs.push(Correspondence {
                                query: q,
                                candidate: c,
                                score: 1.0,
                            });
                        }
                    }
                }
            }
            Ok(CorrespondenceSet {
                pairs,
                source: "scripted".into(),
            })
        }
    }

    fn fixture(r: u32) -> (QueryImage, CandidateTile) {
        let img = Image::from_fn(r, r, |x, y| ((x * 7 + y * 13) % 17) as f32 / 17.0);
        let q = QueryImage {
            id: "q".into(),
            image: img.clone(),
            metadata: Default::default(),
        };
        let c = CandidateTile {
            image: img,
            geom: tile_geom(r),
            neighbors: Default::default(),
            rank: 1,
        };
        (q, c)
    }

    fn cfg(r: u32) -> EngineConfig {
        EngineConfig {
            matcher_cfg: MatcherConfig {
                image_side: r,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn identity_registration_reproduces_tile() {
        let (q, c) = fixture(64);
        let mut m = Scripted {
            steps: vec![Some(Homography::identity()); 4],
            calls: 0,
        };
        let rep = coregister_candidate(&mut m, &q, &c, &cfg(64), 0).unwrap();
        assert!(rep.accepted(), "{rep:?}");
        assert_eq!(rep.iterations_run, 4);
        assert_eq!(m.calls, 4);
        let f = rep.footprint.unwrap().mercator().unwrap();
        let t = c.geom.footprint.mercator().unwrap();
        for (a, b) in f.iter().zip(&t) {
            assert!((a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_steps_keep_first_estimate() {
        let (q, c) = fixture(64);
        let h0 = Homography::rotation_about(0.2, Point2::new(32.0, 32.0));
        let mut steps = vec![Some(h0)];
        steps.extend(std::iter::repeat_n(Some(Homography::identity()), 3));
        let mut m = Scripted { steps, calls: 0 };
        let (rep, trace) = coregister_traced(&mut m, &q, &c, &cfg(64), 0).unwrap();
        assert!(rep.accepted());
        let a0 = trace.accumulated[0];
        assert!(trace.accumulated.iter().all(|a| a.max_entry_diff(&a0) < 1e-12));
    }

    #[test]
    fn stopping_criteria() {
        let (q, c) = fixture(64);
        let run = |steps: Vec<Option<Homography>>| {
            let mut m = Scripted { steps, calls: 0 };
            coregister_candidate(&mut m, &q, &c, &cfg(64), 0).unwrap()
        };
        let rep = run(vec![None]);
        assert_eq!(rep.reject_reason, Some(RejectReason::TooFewMatches));
        assert_eq!(rep.iterations_run, 1);

        // Shrinking the candidate to a fifth makes the query footprint 25×
        // the tile.
        let rep = run(vec![Some(Homography::scaling(0.2, 0.2))]);
        assert_eq!(rep.reject_reason, Some(RejectReason::AreaExceeded));

        // Strong perspective folds one query corner behind the horizon.
        let persp = Homography::from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.02, 0.0, 1.0]]);
        let rep = run(vec![Some(Homography::identity()), Some(persp)]);
        assert_eq!(rep.reject_reason, Some(RejectReason::NonConvexFootprint));
        assert_eq!(rep.iterations_run, 2);
    }

    #[test]
    fn localize_thresholds_and_order() {
        let (q, c) = fixture(64);
        let mut c2 = c.clone();
        c2.rank = 2;
        let cands = vec![c2.clone(), c.clone()];
        let mut m = Scripted {
            steps: vec![Some(Homography::identity()); 8],
            calls: 0,
        };
        let r = localize(&mut m, &q, &cands, &cfg(64), RunMode::FirstAccept, 0).unwrap();
        assert_eq!(r.status, Status::Localized);
        assert_eq!(r.accepted_rank, Some(1));
        assert_eq!(r.candidates.len(), 1);
        let centre = from_mercator(MercPoint::new((2100.0 + 0.5) / 4096.0, (1600.0 + 0.5) / 4096.0));
        assert!(footprint_contains(&r.footprint.unwrap(), centre).unwrap());

        let mut strict = cfg(64);
        strict.inlier_threshold = Some(1000);
        let mut m = Scripted {
            steps: vec![Some(Homography::identity()); 8],
            calls: 0,
        };
        let r = localize(&mut m, &q, &cands, &strict, RunMode::FirstAccept, 0).unwrap();
        assert_eq!(r.status, Status::Rejected);
        assert!(r.footprint.is_none());
        assert!(r
            .candidates
            .iter()
            .all(|c| c.reject_reason == Some(RejectReason::BelowInlierThreshold)));

        let mut m = Scripted {
            steps: vec![],
            calls: 0,
        };
        let r = localize(&mut m, &q, &cands, &cfg(64), RunMode::FirstAccept, 0).unwrap();
        assert_eq!(r.status, Status::NoCandidateAccepted);
        assert!(localize(&mut m, &q, &[], &cfg(64), RunMode::FirstAccept, 0).is_err());
    }

    #[test]
    fn seeds_differ_by_context() {
        let a = derive_seed(1, "q", 1, 0);
        assert_eq!(a, derive_seed(1, "q", 1, 0));
        assert_ne!(a, derive_seed(1, "q", 1, 1));
        assert_ne!(a, derive_seed(1, "q", 2, 0));
        assert_ne!(a, derive_seed(1, "r", 1, 0));
        assert_ne!(a, derive_seed(2, "q", 1, 0));
    }
}
