//! Synthetic query/candidate pairs with a known projective relationship.
//!
//! Each pair lives in a 3×3-tile "world": the candidate is the center
//! tile, its eight neighbors surround it, and the query is a projective
//! view of the world so its content can spill past the candidate.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::Point2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{Manifest, ManifestCandidate, ManifestQuery};
use crate::engine::{CandidateTile, QueryImage, QueryMetadata};
use crate::geo::{pixel_to_geo, quad_area, Footprint, GeoError, MercPoint, Quad, TileGeom};
use crate::raster::{warp_perspective, Image, Neighbor, RasterError};
use crate::robustfit::{dlt_homography, FitError, Homography};

/// Zoom level of the synthetic tile scheme.
pub const SYNTH_ZOOM: u32 = 12;
const MIN_OVERLAP: f64 = 0.1;
const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("no transform with overlap >= {MIN_OVERLAP} after {MAX_ATTEMPTS} attempts")]
    Overlap,
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Bench(#[from] crate::bench::BenchError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub base_side: u32,
    /// Rotation is drawn from `±rotation_range_deg`.
    pub rotation_range_deg: f64,
    /// Query zoom relative to the candidate, drawn log-uniformly.
    pub scale_range: (f64, f64),
    /// Maximum corner displacement, as a fraction of the side.
    pub perspective_jitter: f64,
    /// Maximum shift of the query center away from the candidate center, as
    /// a fraction of the side.
    pub max_offset: f64,
    /// Gaussian noise on query samples, in `[0, 1]` intensity units.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Test mode: constant worlds with no texture.
    pub flat_texture: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            base_side: 512,
            rotation_range_deg: 45.0,
            scale_range: (0.6, 1.6),
            perspective_jitter: 0.08,
            max_offset: 0.2,
            noise_sigma: 0.02,
            seed: 0,
            flat_texture: false,
        }
    }
}

impl SynthSpec {
    pub fn identity(base_side: u32, seed: u64) -> Self {
        SynthSpec {
            base_side,
            rotation_range_deg: 0.0,
            scale_range: (1.0, 1.0),
            perspective_jitter: 0.0,
            max_offset: 0.0,
            noise_sigma: 0.0,
            seed,
            flat_texture: false,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        SynthSpec { seed, ..self }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(m.into()));
        if self.base_side < 64 {
            return bad("base_side must be at least 64");
        }
        if !(self.rotation_range_deg >= 0.0 && self.rotation_range_deg <= 180.0) {
            return bad("rotation range must be in [0, 180]");
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("scale range must be a non-empty positive interval");
        }
        if !(self.perspective_jitter >= 0.0 && self.perspective_jitter < 0.25) {
            return bad("perspective jitter must be in [0, 0.25)");
        }
        if !(self.max_offset >= 0.0 && self.max_offset <= 1.0) {
            return bad("max_offset must be in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be non-negative");
        }
        Ok(())
    }
}

/// Concrete transform parameters of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairParams {
    pub rotation_deg: f64,
    pub scale: f64,
    /// Query center offset from the candidate center, in pixels.
    pub offset: (f64, f64),
    /// Displacement of the query corners TL, TR, BR, BL, in pixels.
    pub corner_jitter: [(f64, f64); 4],
}

impl PairParams {
    pub fn identity() -> Self {
        PairParams {
            rotation_deg: 0.0,
            scale: 1.0,
            offset: (0.0, 0.0),
            corner_jitter: [(0.0, 0.0); 4],
        }
    }

    pub fn sample(spec: &SynthSpec, rng: &mut impl Rng) -> Self {
        let s = spec.base_side as f64;
        let sym = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let (lo, hi) = spec.scale_range;
        let scale = if hi > lo {
            rng.gen_range(lo.ln()..=hi.ln()).exp()
        } else {
            lo
        };
        let rotation_deg = sym(rng, spec.rotation_range_deg);
        let offset = (sym(rng, spec.max_offset * s), sym(rng, spec.max_offset * s));
        let j = spec.perspective_jitter * s;
        let corner_jitter = std::array::from_fn(|_| (sym(rng, j), sym(rng, j)));
        PairParams {
            rotation_deg,
            scale,
            offset,
            corner_jitter,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub query: QueryImage,
    pub candidate: CandidateTile,
    /// Candidate frame → query frame, both at `base_side`. Absent for
    /// negatives.
    pub true_h: Option<Homography>,
    pub true_footprint: Option<Footprint>,
    pub overlap_fraction: f64,
    pub params: Option<PairParams>,
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, octave: u64, w: usize, h: usize) -> Vec<f32> {
    let base = splitmix(seed ^ splitmix(octave + 1));
    (0..w * h)
        .map(|i| (splitmix(base ^ i as u64) >> 40) as f32 / (1u64 << 24) as f32)
        .collect()
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Deterministic value-noise texture with rectangles and discs layered on
/// top for corner structure. Grayscale, mean near 0.5.
pub fn generate_texture(side: u32, seed: u64) -> Image {
    let n = side as usize;
    let mut acc = vec![0.0f32; n * n];
    let octaves: [(f32, f32); 5] = [(96.0, 1.0), (48.0, 0.6), (24.0, 0.4), (12.0, 0.3), (6.0, 0.2)];
    let total: f32 = octaves.iter().map(|o| o.1).sum();
    for (k, &(cell, amp)) in octaves.iter().enumerate() {
        let lw = (n as f32 / cell).ceil() as usize + 2;
        let lat = lattice(seed, k as u64, lw, lw);
        for y in 0..n {
            let fy = y as f32 / cell;
            let iy = fy as usize;
            let ty = smoothstep(fy - iy as f32);
            let row = &mut acc[y * n..(y + 1) * n];
            for (x, a) in row.iter_mut().enumerate() {
                let fx = x as f32 / cell;
                let ix = fx as usize;
                let tx = smoothstep(fx - ix as f32);
                let v00 = lat[iy * lw + ix];
                let v10 = lat[iy * lw + ix + 1];
                let v01 = lat[(iy + 1) * lw + ix];
                let v11 = lat[(iy + 1) * lw + ix + 1];
                let top = v00 + (v10 - v00) * tx;
                let bot = v01 + (v11 - v01) * tx;
                *a += amp * (top + (bot - top) * ty);
            }
        }
    }
    // Stretch the noise around 0.5.
    acc.iter_mut()
        .for_each(|v| *v = (0.5 + 1.6 * (*v / total - 0.5)).clamp(0.0, 1.0));

    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x5eed_5eed));
    let shapes = (n * n) / (40 * 40);
    for i in 0..shapes {
        let level: f32 = rng.gen_range(0.05..0.95);
        let keep = 0.3;
        if i % 3 == 2 {
            let r: f32 = rng.gen_range(4.0..14.0);
            let cx: f32 = rng.gen_range(0.0..n as f32);
            let cy: f32 = rng.gen_range(0.0..n as f32);
            let (x0, x1) = ((cx - r).max(0.0) as usize, ((cx + r) as usize + 1).min(n));
            let (y0, y1) = ((cy - r).max(0.0) as usize, ((cy + r) as usize + 1).min(n));
            for y in y0..y1 {
                for x in x0..x1 {
                    let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                    if dx * dx + dy * dy <= r * r {
                        let a = &mut acc[y * n + x];
                        *a = keep * *a + (1.0 - keep) * level;
                    }
                }
            }
        } else {
            let w = rng.gen_range(6..40usize);
            let h = rng.gen_range(6..40usize);
            let x0 = rng.gen_range(0..n);
            let y0 = rng.gen_range(0..n);
            for y in y0..(y0 + h).min(n) {
                for x in x0..(x0 + w).min(n) {
                    let a = &mut acc[y * n + x];
                    *a = keep * *a + (1.0 - keep) * level;
                }
            }
        }
    }
    Image::from_vec(side, side, 1, acc).expect("buffer sized to side²")
}

/// Pearson correlation of two equally sized single-channel images.
pub fn normalized_cross_correlation(a: &Image, b: &Image) -> f64 {
    let (x, y) = (a.data(), b.data());
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let my = y.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&p, &q) in x.iter().zip(y) {
        let (dp, dq) = (p as f64 - mx, q as f64 - my);
        sxy += dp * dq;
        sxx += dp * dp;
        syy += dq * dq;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Satellite-like tint of a grayscale world.
fn colorize(gray: &Image) -> Image {
    let gains = [0.92f32, 1.0, 1.08];
    let data = gray
        .data()
        .iter()
        .flat_map(|&v| gains.map(|g| (v * g).clamp(0.0, 1.0)))
        .collect();
    Image::from_vec(gray.width(), gray.height(), 3, data).expect("sized from source")
}

fn add_noise(img: &Image, sigma: f64, rng: &mut impl Rng) -> Image {
    if sigma == 0.0 {
        return img.clone();
    }
    let data = img
        .data()
        .iter()
        .map(|&v| {
            // Box-Muller.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos();
            (v as f64 + sigma * z).clamp(0.0, 1.0) as f32
        })
        .collect();
    Image::from_vec(img.width(), img.height(), img.channels(), data).expect("sized from source")
}

/// Tile geometry for a seed: a zoom-12 tile in the mid-latitude band.
pub fn synth_tile_geom(seed: u64, side: u32) -> Result<TileGeom, GeoError> {
    let n = (1u64 << SYNTH_ZOOM) as f64;
    let h = splitmix(seed ^ 0x7173);
    let tx = 2100 + h % 1500;
    let ty = 1450 + (h >> 20) % 180;
    TileGeom::from_mercator_rect(
        MercPoint::new(tx as f64 / n, ty as f64 / n),
        MercPoint::new((tx + 1) as f64 / n, (ty + 1) as f64 / n),
        side,
        side,
    )
}

struct World {
    gray: Image,
    geom: TileGeom,
}

fn make_world(spec: &SynthSpec, seed: u64, place: u64) -> Result<World, SynthError> {
    let side = spec.base_side;
    let gray = if spec.flat_texture {
        Image::from_fn(3 * side, 3 * side, |_, _| 0.5)
    } else {
        generate_texture(3 * side, seed)
    };
    let geom = synth_tile_geom(place, side)?.surroundings()?;
    Ok(World { gray, geom })
}

fn tiles_of(world: &World, side: u32, rank: u8) -> Result<CandidateTile, SynthError> {
    let center = colorize(&world.gray.crop(side, side, side, side)?);
    let mut neighbors: [Option<Image>; 8] = Default::default();
    for n in Neighbor::ALL {
        let (dx, dy) = n.offset();
        let x0 = ((1 + dx) as u32) * side;
        let y0 = ((1 + dy) as u32) * side;
        neighbors[n.index()] = Some(colorize(&world.gray.crop(x0, y0, side, side)?));
    }
    let (tl, dx, dy) = world.geom.mercator_frame()?;
    let geom = TileGeom::from_mercator_rect(
        MercPoint::new(tl.x + dx / 3.0, tl.y + dy / 3.0),
        MercPoint::new(tl.x + 2.0 * dx / 3.0, tl.y + 2.0 * dy / 3.0),
        side,
        side,
    )?;
    Ok(CandidateTile {
        image: center,
        geom,
        neighbors,
        rank,
    })
}

/// World frame → query frame for the given parameters.
pub fn world_to_query(side: u32, p: &PairParams) -> Result<Homography, FitError> {
    let s = side as f64;
    let center_world = Point2::new(1.5 * s + p.offset.0, 1.5 * s + p.offset.1);
    let sim = Homography::translation(s / 2.0, s / 2.0)
        .compose(&Homography::rotation_about(
            p.rotation_deg.to_radians(),
            Point2::origin(),
        ))
        .compose(&Homography::scaling(p.scale, p.scale))
        .compose(&Homography::translation(-center_world.x, -center_world.y));
    if p.corner_jitter.iter().all(|&(x, y)| x == 0.0 && y == 0.0) {
        return Ok(sim);
    }
    let corners = [(0.0, 0.0), (s, 0.0), (s, s), (0.0, s)].map(|(x, y)| Point2::new(x, y));
    let moved: Vec<_> = corners
        .iter()
        .zip(&p.corner_jitter)
        .map(|(c, (dx, dy))| Point2::new(c.x + dx, c.y + dy))
        .collect();
    let persp = dlt_homography(&corners, &moved)?;
    Ok(persp.compose(&sim))
}

/// Clip a polygon against the axis-aligned square `[0, s]²`.
fn clip_to_square(poly: &[Point2<f64>], s: f64) -> Vec<Point2<f64>> {
    let mut out = poly.to_vec();
    let edges: [(usize, f64, bool); 4] = [(0, 0.0, true), (0, s, false), (1, 0.0, true), (1, s, false)];
    for (axis, bound, keep_greater) in edges {
        let input = std::mem::take(&mut out);
        if input.is_empty() {
            break;
        }
        let inside = |p: &Point2<f64>| {
            let v = p[axis];
            if keep_greater {
                v >= bound
            } else {
                v <= bound
            }
        };
        for i in 0..input.len() {
            let a = input[i];
            let b = input[(i + 1) % input.len()];
            let (ia, ib) = (inside(&a), inside(&b));
            if ia {
                out.push(a);
            }
            if ia != ib {
                let t = (bound - a[axis]) / (b[axis] - a[axis]);
                out.push(a + (b - a) * t);
            }
        }
    }
    out
}

fn polygon_area(poly: &[Point2<f64>]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let s: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum();
    0.5 * s.abs()
}

/// Fraction of the query covered by the candidate tile under `true_h`.
/// Zero when the candidate crosses the projective horizon.
pub fn overlap_fraction(true_h: &Homography, side: u32) -> f64 {
    let s = side as f64;
    let corners = [(0.0, 0.0), (s, 0.0), (s, s), (0.0, s)].map(|(x, y)| Point2::new(x, y));
    let mut mapped = Vec::with_capacity(4);
    for c in corners {
        let v = true_h.apply_homogeneous(c);
        if v.z <= 1e-12 {
            return 0.0;
        }
        mapped.push(Point2::new(v.x / v.z, v.y / v.z));
    }
    let q: Quad = [mapped[0], mapped[1], mapped[2], mapped[3]];
    if !crate::geo::quad_is_convex(&q) {
        return 0.0;
    }
    polygon_area(&clip_to_square(&mapped, s)) / (s * s)
}

fn query_metadata(rng: &mut impl Rng, centerpoint: Option<crate::geo::GeoPoint>) -> QueryMetadata {
    QueryMetadata {
        focal_length_mm: Some([50.0, 180.0, 250.0, 400.0, 600.0, 800.0, 1150.0][rng.gen_range(0..7)]),
        tilt_deg: Some(rng.gen_range(0.0..60.0f64).round()),
        cloud_cover_pct: Some(rng.gen_range(0.0..80.0f64).round()),
        centerpoint,
    }
}

/// Renders a positive pair with explicit transform parameters.
pub fn make_pair_with(spec: &SynthSpec, params: &PairParams) -> Result<SynthPair, SynthError> {
    spec.validate()?;
    let side = spec.base_side;
    let s = side as f64;
    let world = make_world(spec, splitmix(spec.seed), spec.seed)?;
    let g = world_to_query(side, params)?;
    let true_h = g.compose(&Homography::translation(s, s));
    let overlap = overlap_fraction(&true_h, side);

    let g_inv = g.inverse()?;
    let centre = g_inv.apply(Point2::new(s / 2.0, s / 2.0))?;
    let centerpoint = pixel_to_geo(&world.geom, centre)?;
    let corners = [(0.0, 0.0), (s, 0.0), (s, s), (0.0, s)];
    let mut fp = [centerpoint; 4];
    for (f, (x, y)) in fp.iter_mut().zip(corners) {
        *f = pixel_to_geo(&world.geom, g_inv.apply(Point2::new(x, y))?)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(spec.seed ^ 0x0001_0001));
    let query_gray = warp_perspective(&world.gray, &g, (side, side))?;
    let query_img = add_noise(&colorize(&query_gray), spec.noise_sigma, &mut rng);
    let metadata = query_metadata(&mut rng, Some(centerpoint));
    Ok(SynthPair {
        query: QueryImage {
            id: format!("synth-{}", spec.seed),
            image: query_img,
            metadata,
        },
        candidate: tiles_of(&world, side, 1)?,
        true_h: Some(true_h),
        true_footprint: Some(Footprint::new(fp)),
        overlap_fraction: overlap,
        params: Some(*params),
    })
}

/// Samples a transform (resampling low-overlap draws) and renders the pair.
pub fn make_pair(spec: &SynthSpec) -> Result<SynthPair, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(spec.seed ^ 0xabcd));
    for _ in 0..MAX_ATTEMPTS {
        let params = PairParams::sample(spec, &mut rng);
        let g = world_to_query(spec.base_side, &params)?;
        let s = spec.base_side as f64;
        let true_h = g.compose(&Homography::translation(s, s));
        if overlap_fraction(&true_h, spec.base_side) >= MIN_OVERLAP {
            return make_pair_with(spec, &params);
        }
    }
    Err(SynthError::Overlap)
}

/// Query and candidate from unrelated worlds at unrelated places.
pub fn make_negative(spec: &SynthSpec, seed: u64) -> Result<SynthPair, SynthError> {
    spec.validate()?;
    let side = spec.base_side;
    let s = side as f64;
    let qworld = make_world(spec, splitmix(seed ^ 0x0a0a), seed ^ 0x0a0a)?;
    let cworld = make_world(spec, splitmix(seed ^ 0x0c0c), seed ^ 0x0c0c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x0e0e));
    let params = PairParams::sample(spec, &mut rng);
    let g = world_to_query(side, &params)?;
    let centre = g.inverse()?.apply(Point2::new(s / 2.0, s / 2.0))?;
    let centerpoint = pixel_to_geo(&qworld.geom, centre)?;
    let query_gray = warp_perspective(&qworld.gray, &g, (side, side))?;
    let query_img = add_noise(&colorize(&query_gray), spec.noise_sigma, &mut rng);
    let metadata = query_metadata(&mut rng, Some(centerpoint));
    Ok(SynthPair {
        query: QueryImage {
            id: format!("synth-neg-{seed}"),
            image: query_img,
            metadata,
        },
        candidate: tiles_of(&cworld, side, 1)?,
        true_h: None,
        true_footprint: None,
        overlap_fraction: 0.0,
        params: None,
    })
}

/// Area of the true footprint relative to the candidate tile.
pub fn footprint_area_ratio(pair: &SynthPair) -> Option<f64> {
    let f = pair.true_footprint?;
    let q = f.mercator_quad().ok()?;
    Some(quad_area(&q) / pair.candidate.geom.mercator_area().ok()?)
}

/// Writes one pair's images under `dir/<query id>/` and returns its
/// manifest entry (paths relative to `dir`). Positives are labeled
/// `is_positive = true`, negatives `false`.
pub fn write_pair(pair: &SynthPair, dir: &Path) -> Result<ManifestQuery, SynthError> {
    let id = &pair.query.id;
    let sub = dir.join(id);
    std::fs::create_dir_all(&sub).map_err(|source| crate::bench::BenchError::Io {
        path: sub.display().to_string(),
        source,
    })?;
    let rel = |name: String| PathBuf::from(id).join(name);
    pair.query.image.save(&dir.join(rel("query.png".into())))?;
    let c = &pair.candidate;
    let image_path = rel(format!("c{}.png", c.rank));
    c.image.save(&dir.join(&image_path))?;
    let mut neighbors = BTreeMap::new();
    for n in Neighbor::ALL {
        if let Some(img) = &c.neighbors[n.index()] {
            let p = rel(format!("c{}_{}.png", c.rank, n.name()));
            img.save(&dir.join(&p))?;
            neighbors.insert(n.name().to_string(), p);
        }
    }
    let m = &pair.query.metadata;
    Ok(ManifestQuery {
        id: id.clone(),
        image_path: rel("query.png".into()),
        centerpoint: m
            .centerpoint
            .ok_or_else(|| SynthError::Spec("query without centerpoint".into()))?,
        focal_length_mm: m.focal_length_mm,
        tilt_deg: m.tilt_deg,
        cloud_cover_pct: m.cloud_cover_pct,
        candidates: vec![ManifestCandidate {
            rank: c.rank,
            image_path,
            footprint: c.geom.footprint,
            neighbors,
            is_positive: Some(pair.true_h.is_some()),
        }],
    })
}

/// Writes `dir/manifest.json` for entries produced by [`write_pair`].
pub fn write_manifest(queries: Vec<ManifestQuery>, dir: &Path) -> Result<PathBuf, SynthError> {
    let manifest = Manifest {
        queries,
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

/// Writes pairs as a benchmark dataset (images plus `manifest.json`) under
/// `dir`.
pub fn write_dataset(pairs: &[SynthPair], dir: &Path) -> Result<PathBuf, SynthError> {
    let queries = pairs.iter().map(|p| write_pair(p, dir)).collect::<Result<_, _>>()?;
    write_manifest(queries, dir)
}
