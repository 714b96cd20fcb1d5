//! Built-in keypoint matcher and the contract every matcher backend meets.
//!
//! Detection is multi-scale Harris over a three-level pyramid; descriptors
//! are oriented 8×8 intensity patches, mean-subtracted and unit-normalized;
//! matching is mutual nearest neighbour with a ratio test.

use nalgebra::Point2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{resize_square, Image};

pub const DESCRIPTOR_LEN: usize = 64;
const PATCH: usize = 8;
const PYRAMID_LEVELS: usize = 3;
const NMS_RADIUS: i64 = 3;
const HARRIS_K: f32 = 0.04;
const MIN_RESPONSE: f32 = 1e-10;
/// Level-pixel spacing of the descriptor grid at scale 1.
const DESCRIPTOR_STEP: f64 = 2.5;
const ORIENTATION_BINS: usize = 36;
const ORIENTATION_HALF: i64 = 8;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("matcher backend `{backend}` failed: {message}")]
    Backend { backend: String, message: String },
    #[error("unknown matcher backend `{0}`")]
    UnknownBackend(String),
    #[error("invalid matcher configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Pyramid scale in base-image pixels (1, 2 or 4).
    pub scale: f64,
    pub orientation: f64,
    pub response: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor(pub [f32; DESCRIPTOR_LEN]);

impl Descriptor {
    pub fn uniform() -> Self {
        Descriptor([1.0 / (DESCRIPTOR_LEN as f32).sqrt(); DESCRIPTOR_LEN])
    }

    pub fn distance(&self, other: &Descriptor) -> f32 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            .sqrt()
    }

    pub fn norm(&self) -> f32 {
        self.0.iter().map(|v| v * v).sum::<f32>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    pub max_keypoints: usize,
    pub image_side: u32,
    pub ratio_threshold: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            max_keypoints: 2048,
            image_side: 768,
            ratio_threshold: 0.8,
        }
    }
}

impl MatcherConfig {
    pub const KEYPOINT_BUDGETS: [usize; 4] = [1024, 2048, 4096, 8192];

    pub fn validate(&self) -> Result<(), MatchError> {
        if self.max_keypoints < 4 {
            return Err(MatchError::Config("max_keypoints must be at least 4".into()));
        }
        if self.image_side < 64 {
            return Err(MatchError::Config("image_side must be at least 64".into()));
        }
        if !(self.ratio_threshold > 0.0 && self.ratio_threshold <= 1.0) {
            return Err(MatchError::Config("ratio_threshold must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub query: Point2<f64>,
    pub candidate: Point2<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
    pub source: String,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable blur of a single-channel plane with edge clamping.
fn blur(plane: &[f32], w: usize, h: usize, sigma: f64) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = (x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * row[xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for (i, kv) in k.iter().enumerate() {
            let yy = (y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize;
            let src = &tmp[yy * w..(yy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    out
}

struct Level {
    w: usize,
    h: usize,
    /// Lightly smoothed intensities used for detection.
    pixels: Vec<f32>,
    /// Smoother copy used for orientation and description.
    smooth: Vec<f32>,
    scale: f64,
}

impl Level {
    fn new(pixels: Vec<f32>, w: usize, h: usize, scale: f64) -> Self {
        let smooth = blur(&pixels, w, h, 1.0);
        Level {
            w,
            h,
            pixels,
            smooth,
            scale,
        }
    }

    #[inline]
    fn at(&self, x: i64, y: i64) -> f32 {
        let xx = x.clamp(0, self.w as i64 - 1) as usize;
        let yy = y.clamp(0, self.h as i64 - 1) as usize;
        self.smooth[yy * self.w + xx]
    }

    /// Bilinear sample of the smooth plane at level-pixel coordinates
    /// (centers at integer + 0.5).
    #[inline]
    fn sample(&self, u: f64, v: f64) -> f32 {
        let fx = u - 0.5;
        let fy = v - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = (fx - x0) as f32;
        let ty = (fy - y0) as f32;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let a = self.at(x0, y0) * (1.0 - tx) + self.at(x0 + 1, y0) * tx;
        let b = self.at(x0, y0 + 1) * (1.0 - tx) + self.at(x0 + 1, y0 + 1) * tx;
        a * (1.0 - ty) + b * ty
    }
}

/// Gaussian pyramid with factor 0.5 between levels.
pub struct ScaleSpace {
    levels: Vec<Level>,
    width: u32,
    height: u32,
}

impl ScaleSpace {
    pub fn new(img: &Image) -> Self {
        let gray = img.to_gray();
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        let mut levels = vec![Level::new(blur(gray.data(), w, h, 0.7), w, h, 1.0)];
        for l in 1..PYRAMID_LEVELS {
            let prev = &levels[l - 1];
            let (pw, ph) = (prev.w, prev.h);
            if pw < 16 || ph < 16 {
                break;
            }
            let smoothed = blur(&prev.pixels, pw, ph, 1.0);
            let (nw, nh) = (pw / 2, ph / 2);
            let mut down = vec![0.0f32; nw * nh];
            for y in 0..nh {
                for x in 0..nw {
                    let s = |dx: usize, dy: usize| smoothed[(2 * y + dy) * pw + 2 * x + dx];
                    down[y * nw + x] = 0.25 * (s(0, 0) + s(1, 0) + s(0, 1) + s(1, 1));
                }
            }
            let scale = prev.scale * (pw as f64 / nw as f64);
            levels.push(Level::new(down, nw, nh, scale));
        }
        ScaleSpace {
            levels,
            width: gray.width(),
            height: gray.height(),
        }
    }

    fn level_for(&self, scale: f64) -> &Level {
        self.levels
            .iter()
            .min_by(|a, b| (a.scale - scale).abs().total_cmp(&(b.scale - scale).abs()))
            .expect("pyramid has at least one level")
    }
}

fn harris_response(level: &Level) -> Vec<f32> {
    let (w, h) = (level.w, level.h);
    let p = &level.pixels;
    let mut ixx = vec![0.0f32; w * h];
    let mut iyy = vec![0.0f32; w * h];
    let mut ixy = vec![0.0f32; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w - 1 {
            let i = y * w + x;
            let gx = 0.5 * (p[i + 1] - p[i - 1]);
            let gy = 0.5 * (p[i + w] - p[i - w]);
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let sxx = blur(&ixx, w, h, 1.5);
    let syy = blur(&iyy, w, h, 1.5);
    let sxy = blur(&ixy, w, h, 1.5);
    sxx.iter()
        .zip(&syy)
        .zip(&sxy)
        .map(|((a, b), c)| {
            let det = a * b - c * c;
            let tr = a + b;
            det - HARRIS_K * tr * tr
        })
        .collect()
}

fn dominant_orientation(level: &Level, u: f64, v: f64) -> f64 {
    let mut hist = [0.0f64; ORIENTATION_BINS];
    let cx = (u - 0.5).round() as i64;
    let cy = (v - 0.5).round() as i64;
    let sigma = ORIENTATION_HALF as f64 * 0.75;
    for dy in -ORIENTATION_HALF..ORIENTATION_HALF {
        for dx in -ORIENTATION_HALF..ORIENTATION_HALF {
            let (x, y) = (cx + dx, cy + dy);
            let gx = (level.at(x + 1, y) - level.at(x - 1, y)) as f64;
            let gy = (level.at(x, y + 1) - level.at(x, y - 1)) as f64;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let (rx, ry) = (dx as f64 + 0.5, dy as f64 + 0.5);
            let wgt = (-(rx * rx + ry * ry) / (2.0 * sigma * sigma)).exp();
            let ang = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
            let b = ang / std::f64::consts::TAU * ORIENTATION_BINS as f64;
            // Linear vote into the two nearest bins.
            let b0 = b.floor() as usize % ORIENTATION_BINS;
            let t = b - b.floor();
            hist[b0] += mag * wgt * (1.0 - t);
            hist[(b0 + 1) % ORIENTATION_BINS] += mag * wgt * t;
        }
    }
    // Circular smoothing.
    for _ in 0..2 {
        let prev = hist;
        for i in 0..ORIENTATION_BINS {
            let l = prev[(i + ORIENTATION_BINS - 1) % ORIENTATION_BINS];
            let r = prev[(i + 1) % ORIENTATION_BINS];
            hist[i] = 0.25 * l + 0.5 * prev[i] + 0.25 * r;
        }
    }
    let (peak, &pv) = hist
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty histogram");
    if pv == 0.0 {
        return 0.0;
    }
    let l = hist[(peak + ORIENTATION_BINS - 1) % ORIENTATION_BINS];
    let r = hist[(peak + 1) % ORIENTATION_BINS];
    let denom = l - 2.0 * pv + r;
    let offset = if denom.abs() > 1e-300 {
        (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    // Linear voting centers bin i on angle i.
    let bin = peak as f64 + offset;
    (bin / ORIENTATION_BINS as f64 * std::f64::consts::TAU).rem_euclid(std::f64::consts::TAU)
}

fn refine_peak(m: f32, l: f32, r: f32) -> f64 {
    let denom = l - 2.0 * m + r;
    if denom.abs() > 1e-20 {
        (0.5 * (l - r) / denom).clamp(-0.5, 0.5) as f64
    } else {
        0.0
    }
}

fn detect_in(space: &ScaleSpace, max_keypoints: usize) -> Vec<Keypoint> {
    let mut out = Vec::new();
    for level in &space.levels {
        let resp = harris_response(level);
        let (w, h) = (level.w as i64, level.h as i64);
        let border = NMS_RADIUS.max(2);
        for y in border..h - border {
            for x in border..w - border {
                let r = resp[(y * w + x) as usize];
                if r <= MIN_RESPONSE {
                    continue;
                }
                let mut is_max = true;
                'nms: for dy in -NMS_RADIUS..=NMS_RADIUS {
                    for dx in -NMS_RADIUS..=NMS_RADIUS {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let o = resp[((y + dy) * w + x + dx) as usize];
                        // Ties resolve toward the earlier pixel in raster order.
                        if o > r || (o == r && (dy < 0 || (dy == 0 && dx < 0))) {
                            is_max = false;
                            break 'nms;
                        }
                    }
                }
                if !is_max {
                    continue;
                }
                let at = |xx: i64, yy: i64| resp[(yy * w + xx) as usize];
                let ox = refine_peak(r, at(x - 1, y), at(x + 1, y));
                let oy = refine_peak(r, at(x, y - 1), at(x, y + 1));
                let u = x as f64 + 0.5 + ox;
                let v = y as f64 + 0.5 + oy;
                out.push(Keypoint {
                    x: (u * level.scale).clamp(0.0, space.width as f64 - 1e-6),
                    y: (v * level.scale).clamp(0.0, space.height as f64 - 1e-6),
                    scale: level.scale,
                    orientation: 0.0,
                    response: r as f64,
                });
            }
        }
    }
    out.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.scale.total_cmp(&b.scale))
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
    out.truncate(max_keypoints);
    for kp in &mut out {
        let level = space.level_for(kp.scale);
        kp.orientation = dominant_orientation(level, kp.x / kp.scale, kp.y / kp.scale);
    }
    out
}

/// Multi-scale Harris keypoints, strongest first, at most
/// `cfg.max_keypoints`.
pub fn detect(img: &Image, cfg: &MatcherConfig) -> Vec<Keypoint> {
    detect_in(&ScaleSpace::new(img), cfg.max_keypoints)
}

fn describe_in(space: &ScaleSpace, kp: &Keypoint) -> Descriptor {
    let level = space.level_for(kp.scale);
    let (u, v) = (kp.x / level.scale, kp.y / level.scale);
    let (s, c) = kp.orientation.sin_cos();
    let mut d = [0.0f32; DESCRIPTOR_LEN];
    let half = (PATCH as f64 - 1.0) / 2.0;
    for j in 0..PATCH {
        for i in 0..PATCH {
            let ox = (i as f64 - half) * DESCRIPTOR_STEP;
            let oy = (j as f64 - half) * DESCRIPTOR_STEP;
            let rx = c * ox - s * oy;
            let ry = s * ox + c * oy;
            d[j * PATCH + i] = level.sample(u + rx, v + ry);
        }
    }
    let mean = d.iter().sum::<f32>() / DESCRIPTOR_LEN as f32;
    d.iter_mut().for_each(|x| *x -= mean);
    let var = d.iter().map(|x| x * x).sum::<f32>() / DESCRIPTOR_LEN as f32;
    if var.sqrt() < 1e-6 {
        return Descriptor::uniform();
    }
    let norm = d.iter().map(|x| x * x).sum::<f32>().sqrt();
    d.iter_mut().for_each(|x| *x /= norm);
    Descriptor(d)
}

/// Oriented, mean-subtracted, unit-norm patch descriptor.
pub fn describe(img: &Image, kp: &Keypoint) -> Descriptor {
    describe_in(&ScaleSpace::new(img), kp)
}

/// Keypoints and their descriptors for one image.
pub fn extract(img: &Image, cfg: &MatcherConfig) -> (Vec<Keypoint>, Vec<Descriptor>) {
    let space = ScaleSpace::new(img);
    let kps = detect_in(&space, cfg.max_keypoints);
    let descs = kps.iter().map(|kp| describe_in(&space, kp)).collect();
    (kps, descs)
}

/// A descriptor-level match: indices into the query and candidate lists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescriptorMatch {
    pub query: usize,
    pub candidate: usize,
    pub distance: f32,
}

struct NearestTwo {
    best: usize,
    d1: f32,
    d2: f32,
}

fn nearest_two(dist2: impl Iterator<Item = f32>) -> Option<NearestTwo> {
    let mut best = usize::MAX;
    let (mut d1, mut d2) = (f32::INFINITY, f32::INFINITY);
    for (i, d) in dist2.enumerate() {
        if d < d1 {
            d2 = d1;
            d1 = d;
            best = i;
        } else if d < d2 {
            d2 = d;
        }
    }
    (best != usize::MAX).then(|| NearestTwo {
        best,
        d1: d1.max(0.0).sqrt(),
        d2: d2.max(0.0).sqrt(),
    })
}

fn passes_ratio(n: &NearestTwo, ratio: f64) -> bool {
    // A lone candidate has no second neighbour; accept it.
    !n.d2.is_finite() || (n.d1 as f64) < ratio * n.d2 as f64
}

fn pairwise_sq(q: &[Descriptor], c: &[Descriptor]) -> Vec<f32> {
    let mut out = vec![0.0f32; q.len() * c.len()];
    for (i, a) in q.iter().enumerate() {
        let row = &mut out[i * c.len()..(i + 1) * c.len()];
        for (o, b) in row.iter_mut().zip(c) {
            let dot: f32 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
            let na: f32 = a.0.iter().map(|x| x * x).sum();
            let nb: f32 = b.0.iter().map(|x| x * x).sum();
            *o = (na + nb - 2.0 * dot).max(0.0);
        }
    }
    out
}

fn mutual_matches(q: &[Descriptor], c: &[Descriptor], ratio: f64, both_sides: bool) -> Vec<DescriptorMatch> {
    if q.is_empty() || c.is_empty() {
        return Vec::new();
    }
    let d = pairwise_sq(q, c);
    let nc = c.len();
    let q_nn: Vec<NearestTwo> = (0..q.len())
        .map(|i| nearest_two(d[i * nc..(i + 1) * nc].iter().copied()).expect("non-empty"))
        .collect();
    let c_nn: Vec<NearestTwo> = (0..nc)
        .map(|j| nearest_two((0..q.len()).map(|i| d[i * nc + j])).expect("non-empty"))
        .collect();
    q_nn.iter()
        .enumerate()
        .filter(|(i, n)| c_nn[n.best].best == *i && passes_ratio(n, ratio))
        .filter(|(_, n)| !both_sides || passes_ratio(&c_nn[n.best], ratio))
        .map(|(i, n)| DescriptorMatch {
            query: i,
            candidate: n.best,
            distance: n.d1,
        })
        .collect()
}

/// Mutual nearest neighbours passing the ratio test on the query side.
pub fn match_descriptors(q: &[Descriptor], c: &[Descriptor], ratio: f64) -> Vec<DescriptorMatch> {
    mutual_matches(q, c, ratio, false)
}

/// As [`match_descriptors`], with the ratio test applied on both sides;
/// the result is symmetric under swapping the inputs.
pub fn match_descriptors_symmetric(q: &[Descriptor], c: &[Descriptor], ratio: f64) -> Vec<DescriptorMatch> {
    mutual_matches(q, c, ratio, true)
}

pub fn score_from_distance(d: f32) -> f64 {
    (1.0 - d as f64 / 2.0).clamp(0.0, 1.0)
}

/// A matcher backend. Inputs arrive already resized to the canonical side;
/// returned points must be in those canonical frames.
pub trait Matcher {
    fn id(&self) -> &str;

    fn match_canonical(
        &mut self,
        query: &Image,
        candidate: &Image,
        cfg: &MatcherConfig,
    ) -> Result<CorrespondenceSet, MatchError>;
}

pub const BUILTIN: &str = "builtin";

/// Harris + oriented patch matcher. Caches the features of the most recent
/// query so repeated matching against one query skips re-extraction.
#[derive(Default)]
pub struct BuiltinMatcher {
    cache: Option<(Image, usize, Vec<Keypoint>, Vec<Descriptor>)>,
}

impl BuiltinMatcher {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Matcher for BuiltinMatcher {
    fn id(&self) -> &str {
        BUILTIN
    }

    fn match_canonical(
        &mut self,
        query: &Image,
        candidate: &Image,
        cfg: &MatcherConfig,
    ) -> Result<CorrespondenceSet, MatchError> {
        let hit = matches!(&self.cache, Some((img, n, _, _)) if img == query && *n == cfg.max_keypoints);
        if !hit {
            let (k, d) = extract(query, cfg);
            self.cache = Some((query.clone(), cfg.max_keypoints, k, d));
        }
        let (_, _, qk, qd) = self.cache.as_ref().expect("cache filled above");
        let (ck, cd) = extract(candidate, cfg);
        let pairs = match_descriptors(qd, &cd, cfg.ratio_threshold)
            .into_iter()
            .map(|m| Correspondence {
                query: Point2::new(qk[m.query].x, qk[m.query].y),
                candidate: Point2::new(ck[m.candidate].x, ck[m.candidate].y),
                score: score_from_distance(m.distance),
            })
            .collect();
        Ok(CorrespondenceSet {
            pairs,
            source: BUILTIN.into(),
        })
    }
}

/// Resizes both images to the canonical square side and dispatches to the
/// backend. Rejects backend output with points outside the canonical frame.
pub fn run_matcher(
    backend: &mut dyn Matcher,
    query: &Image,
    candidate: &Image,
    cfg: &MatcherConfig,
) -> Result<CorrespondenceSet, MatchError> {
    cfg.validate()?;
    let side = cfg.image_side;
    let q = resize_square(query, side);
    let c = resize_square(candidate, side);
    let cs = backend.match_canonical(&q, &c, cfg)?;
    let s = side as f64;
    let inside = |p: &Point2<f64>| p.x >= 0.0 && p.y >= 0.0 && p.x <= s && p.y <= s;
    if let Some(bad) = cs.pairs.iter().find(|p| !inside(&p.query) || !inside(&p.candidate)) {
        return Err(MatchError::Backend {
            backend: backend.id().to_string(),
            message: format!(
                "correspondence outside the {side}px canonical frame: query ({}, {}), candidate ({}, {})",
                bad.query.x, bad.query.y, bad.candidate.x, bad.candidate.y
            ),
        });
    }
    Ok(cs)
}
