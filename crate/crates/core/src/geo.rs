//! Geographic bookkeeping: Web Mercator mapping, footprints, and the planar
//! quadrilateral predicates used by the stopping criteria.
//!
//! Mercator coordinates are normalized to the unit square: `x` grows east
//! from the antimeridian, `y` grows south from the northern Mercator limit.
//! Pixel frames are continuous, with pixel `(i, j)` covering
//! `[i, i + 1) × [j, j + 1)`.

use nalgebra::Point2;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Latitude at which the Web Mercator square ends.
pub const MAX_MERCATOR_LAT: f64 = 85.051_128_779_806_59;

/// Open bound of the projection's domain; slightly beyond the square's edge
/// so the edge itself (and round-off at it) stays representable.
pub const MERCATOR_LAT_LIMIT: f64 = 85.05113;

/// Corner-matching tolerance (Mercator units) when validating tile rectangles.
const RECT_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside the Web Mercator domain")]
    LatitudeOutOfRange(f64),
    #[error("invalid coordinate: lat={lat}, lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("footprint crosses the antimeridian")]
    AntimeridianCrossing,
    #[error("footprint is self-intersecting or degenerate")]
    SelfIntersecting,
    #[error("degenerate tile: {0}")]
    DegenerateTile(String),
}

pub type Quad = [Point2<f64>; 4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        let p = GeoPoint { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        let ok = self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon);
        if ok {
            Ok(())
        } else {
            Err(GeoError::InvalidCoordinate {
                lat: self.lat,
                lon: self.lon,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MercPoint {
    pub x: f64,
    pub y: f64,
}

impl MercPoint {
    pub fn new(x: f64, y: f64) -> Self {
        MercPoint { x, y }
    }

    pub fn to_point(self) -> Point2<f64> {
        Point2::new(self.x, self.y)
    }
}

pub fn to_mercator(p: GeoPoint) -> Result<MercPoint, GeoError> {
    if !p.lat.is_finite() || p.lat.abs() >= MERCATOR_LAT_LIMIT {
        return Err(GeoError::LatitudeOutOfRange(p.lat));
    }
    if !p.lon.is_finite() {
        return Err(GeoError::InvalidCoordinate { lat: p.lat, lon: p.lon });
    }
    let phi = p.lat.to_radians();
    let x = (p.lon + 180.0) / 360.0;
    let y = (1.0 - (phi.tan() + 1.0 / phi.cos()).ln() / PI) / 2.0;
    Ok(MercPoint { x, y })
}

/// Inverse of [`to_mercator`]. Points outside the unit square extrapolate
/// (longitudes beyond ±180 are not wrapped).
pub fn from_mercator(m: MercPoint) -> GeoPoint {
    let lon = m.x * 360.0 - 180.0;
    let lat = (PI * (1.0 - 2.0 * m.y)).sinh().atan().to_degrees();
    GeoPoint { lat, lon }
}

/// Geographic quadrilateral with corners ordered TL, TR, BR, BL, matching
/// pixel corners `(0,0)`, `(W,0)`, `(W,H)`, `(0,H)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Footprint {
    pub corners: [GeoPoint; 4],
}

impl Footprint {
    pub fn new(corners: [GeoPoint; 4]) -> Self {
        Footprint { corners }
    }

    pub fn from_mercator_quad(q: &[MercPoint; 4]) -> Self {
        Footprint {
            corners: q.map(from_mercator),
        }
    }

    /// Mercator projection of the corners. Rejects out-of-range corners and
    /// footprints spanning more than half the globe in longitude, which only
    /// arise from antimeridian wraparound.
    pub fn mercator(&self) -> Result<[MercPoint; 4], GeoError> {
        for c in &self.corners {
            if !c.lat.is_finite() || !c.lon.is_finite() {
                return Err(GeoError::InvalidCoordinate { lat: c.lat, lon: c.lon });
            }
        }
        let (lo, hi) = self
            .corners
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
                (lo.min(c.lon), hi.max(c.lon))
            });
        if hi - lo > 180.0 {
            return Err(GeoError::AntimeridianCrossing);
        }
        let mut out = [MercPoint::new(0.0, 0.0); 4];
        for (o, c) in out.iter_mut().zip(&self.corners) {
            *o = to_mercator(*c)?;
        }
        Ok(out)
    }

    pub fn mercator_quad(&self) -> Result<Quad, GeoError> {
        Ok(self.mercator()?.map(MercPoint::to_point))
    }

    /// Area in normalized Mercator units².
    pub fn mercator_area(&self) -> Result<f64, GeoError> {
        Ok(quad_area(&self.mercator_quad()?))
    }
}

/// Pixel grid tied to a Mercator-rectilinear footprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileGeom {
    pub footprint: Footprint,
    pub width_px: u32,
    pub height_px: u32,
}

impl TileGeom {
    pub fn new(footprint: Footprint, width_px: u32, height_px: u32) -> Result<Self, GeoError> {
        let g = TileGeom {
            footprint,
            width_px,
            height_px,
        };
        g.validate()?;
        Ok(g)
    }

    /// Builds a tile from its Mercator bounds (`min` is the TL corner).
    pub fn from_mercator_rect(min: MercPoint, max: MercPoint, width_px: u32, height_px: u32) -> Result<Self, GeoError> {
        let quad = [
            MercPoint::new(min.x, min.y),
            MercPoint::new(max.x, min.y),
            MercPoint::new(max.x, max.y),
            MercPoint::new(min.x, max.y),
        ];
        TileGeom::new(Footprint::from_mercator_quad(&quad), width_px, height_px)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(GeoError::DegenerateTile("zero pixel size".into()));
        }
        let [tl, tr, br, bl] = self.footprint.mercator()?;
        let aligned = (tl.y - tr.y).abs() < RECT_TOL
            && (bl.y - br.y).abs() < RECT_TOL
            && (tl.x - bl.x).abs() < RECT_TOL
            && (tr.x - br.x).abs() < RECT_TOL;
        if !aligned {
            return Err(GeoError::DegenerateTile(
                "footprint is not a Mercator-aligned rectangle".into(),
            ));
        }
        if tr.x - tl.x <= 0.0 || bl.y - tl.y <= 0.0 {
            return Err(GeoError::DegenerateTile("zero or negative extent".into()));
        }
        Ok(())
    }

    /// Mercator TL corner and extent `(dx, dy)`.
    pub fn mercator_frame(&self) -> Result<(MercPoint, f64, f64), GeoError> {
        let [tl, tr, _, bl] = self.footprint.mercator()?;
        let dx = tr.x - tl.x;
        let dy = bl.y - tl.y;
        if !(dx > 0.0 && dy > 0.0) {
            return Err(GeoError::DegenerateTile("zero or negative extent".into()));
        }
        Ok((tl, dx, dy))
    }

    pub fn mercator_area(&self) -> Result<f64, GeoError> {
        let (_, dx, dy) = self.mercator_frame()?;
        Ok(dx * dy)
    }

    /// Pixel point to Mercator by affine interpolation; extrapolates freely.
    pub fn pixel_to_mercator(&self, px: Point2<f64>) -> Result<MercPoint, GeoError> {
        let (tl, dx, dy) = self.mercator_frame()?;
        Ok(MercPoint::new(
            tl.x + px.x / self.width_px as f64 * dx,
            tl.y + px.y / self.height_px as f64 * dy,
        ))
    }

    /// Same tile scheme with the pixel grid resampled to a new size.
    pub fn with_size(&self, width_px: u32, height_px: u32) -> TileGeom {
        TileGeom {
            footprint: self.footprint,
            width_px,
            height_px,
        }
    }

    /// The 3×3 block centered on this tile: one extent further in each
    /// Mercator direction, with three times the pixel size.
    pub fn surroundings(&self) -> Result<TileGeom, GeoError> {
        let (tl, dx, dy) = self.mercator_frame()?;
        TileGeom::from_mercator_rect(
            MercPoint::new(tl.x - dx, tl.y - dy),
            MercPoint::new(tl.x + 2.0 * dx, tl.y + 2.0 * dy),
            self.width_px * 3,
            self.height_px * 3,
        )
    }
}

pub fn pixel_to_geo(tile: &TileGeom, px: Point2<f64>) -> Result<GeoPoint, GeoError> {
    Ok(from_mercator(tile.pixel_to_mercator(px)?))
}

fn cross(o: &Point2<f64>, a: &Point2<f64>, b: &Point2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn on_segment(p: &Point2<f64>, a: &Point2<f64>, b: &Point2<f64>, eps: f64) -> bool {
    let len = (b - a).norm();
    if len == 0.0 {
        return (p - a).norm() <= eps;
    }
    let dist = cross(a, b, p).abs() / len;
    let t = (p - a).dot(&(b - a)) / (len * len);
    dist <= eps && (-eps / len..=1.0 + eps / len).contains(&t)
}

fn segments_cross(a: &Point2<f64>, b: &Point2<f64>, c: &Point2<f64>, d: &Point2<f64>) -> bool {
    let d1 = cross(a, b, c);
    let d2 = cross(a, b, d);
    let d3 = cross(c, d, a);
    let d4 = cross(c, d, b);
    if d1 * d2 < 0.0 && d3 * d4 < 0.0 {
        return true;
    }
    // Touching or collinear overlap also breaks simplicity.
    let eps = 0.0;
    (d1 == 0.0 && on_segment(c, a, b, eps))
        || (d2 == 0.0 && on_segment(d, a, b, eps))
        || (d3 == 0.0 && on_segment(a, c, d, eps))
        || (d4 == 0.0 && on_segment(b, c, d, eps))
}

/// True when the quad has no crossing or touching non-adjacent edges and
/// non-zero area.
pub fn quad_is_simple(q: &Quad) -> bool {
    if q.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return false;
    }
    if quad_area(q) == 0.0 {
        return false;
    }
    !segments_cross(&q[0], &q[1], &q[2], &q[3]) && !segments_cross(&q[1], &q[2], &q[3], &q[0])
}

/// Boundary-inclusive point-in-quadrilateral test in Mercator space.
pub fn footprint_contains(f: &Footprint, p: GeoPoint) -> Result<bool, GeoError> {
    let quad = f.mercator_quad()?;
    if !quad_is_simple(&quad) {
        return Err(GeoError::SelfIntersecting);
    }
    let m = to_mercator(p)?.to_point();
    Ok(quad_contains(&quad, &m))
}

/// Boundary-inclusive containment for a simple quad in any planar frame.
pub fn quad_contains(q: &Quad, p: &Point2<f64>) -> bool {
    let scale = q
        .iter()
        .flat_map(|c| [c.x.abs(), c.y.abs()])
        .fold(p.x.abs().max(p.y.abs()), f64::max)
        .max(1e-300);
    let eps = scale * 1e-12;
    for i in 0..4 {
        if on_segment(p, &q[i], &q[(i + 1) % 4], eps) {
            return true;
        }
    }
    // Even-odd crossing count.
    let mut inside = false;
    for i in 0..4 {
        let a = &q[i];
        let b = &q[(i + 1) % 4];
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Strictly convex, non-degenerate, non-self-intersecting.
pub fn quad_is_convex(q: &Quad) -> bool {
    if q.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return false;
    }
    let mut sign = 0.0;
    for i in 0..4 {
        let c = cross(&q[i], &q[(i + 1) % 4], &q[(i + 2) % 4]);
        if c == 0.0 {
            return false;
        }
        if sign == 0.0 {
            sign = c.signum();
        } else if c.signum() != sign {
            return false;
        }
    }
    // For four vertices, equal turn signs rule out self-intersection
    // unless the polygon winds twice, which needs at least five vertices.
    true
}

/// Shoelace area (absolute value).
pub fn quad_area(q: &Quad) -> f64 {
    let mut s = 0.0;
    for i in 0..4 {
        let a = &q[i];
        let b = &q[(i + 1) % 4];
        s += a.x * b.y - b.x * a.y;
    }
    0.5 * s.abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pt(x: f64, y: f64) -> Point2<f64> {
        Point2::new(x, y)
    }

    fn unit_square() -> Quad {
        [pt(0.0, 0.0), pt(1.0, 0.0), pt(1.0, 1.0), pt(0.0, 1.0)]
    }

    #[test]
    fn mercator_examples() {
        let m = to_mercator(GeoPoint::new(0.0, 0.0).unwrap()).unwrap();
        assert_abs_diff_eq!(m.x, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.y, 0.5, epsilon = 1e-15);
        let m = to_mercator(GeoPoint::new(0.0, 180.0).unwrap()).unwrap();
        assert_abs_diff_eq!(m.x, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.y, 0.5, epsilon = 1e-15);
        // mpmath, 40 digits.
        let m = to_mercator(GeoPoint::new(60.0, 0.0).unwrap()).unwrap();
        assert_abs_diff_eq!(m.y, 0.290_399_640_860_508_6, epsilon = 1e-14);
    }

    #[test]
    fn mercator_inverse_examples() {
        let g = from_mercator(MercPoint::new(0.5, 0.5));
        assert_abs_diff_eq!(g.lat, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.lon, 0.0, epsilon = 1e-12);
        let g = from_mercator(MercPoint::new(1.0, 0.5));
        assert_abs_diff_eq!(g.lon, 180.0, epsilon = 1e-12);
        let g = from_mercator(MercPoint::new(0.5, 0.290_399_640_860_508_6));
        assert_abs_diff_eq!(g.lat, 60.0, epsilon = 1e-10);
    }

    #[test]
    fn mercator_rejects_polar_latitudes() {
        let p = GeoPoint { lat: 86.0, lon: 0.0 };
        assert_eq!(to_mercator(p), Err(GeoError::LatitudeOutOfRange(86.0)));
        assert!(GeoPoint::new(91.0, 0.0).is_err());
    }

    #[test]
    fn square_edges_round_trip() {
        for y in [0.0, 1.0] {
            let g = from_mercator(MercPoint::new(0.5, y));
            assert_abs_diff_eq!(g.lat.abs(), MAX_MERCATOR_LAT, epsilon = 1e-12);
            assert_abs_diff_eq!(to_mercator(g).unwrap().y, y, epsilon = 1e-12);
        }
    }

    fn unit_tile(w: u32, h: u32) -> TileGeom {
        TileGeom::from_mercator_rect(MercPoint::new(0.25, 0.25), MercPoint::new(0.5, 0.5), w, h).unwrap()
    }

    #[test]
    fn pixel_to_geo_corners_and_midpoint() {
        let tile = unit_tile(200, 100);
        let tl = pixel_to_geo(&tile, pt(0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(tl.lat, tile.footprint.corners[0].lat, epsilon = 1e-12);
        assert_abs_diff_eq!(tl.lon, tile.footprint.corners[0].lon, epsilon = 1e-12);
        let mid = tile.pixel_to_mercator(pt(100.0, 50.0)).unwrap();
        assert_abs_diff_eq!(mid.x, 0.375, epsilon = 1e-15);
        assert_abs_diff_eq!(mid.y, 0.375, epsilon = 1e-15);
    }

    #[test]
    fn pixel_to_geo_extrapolates() {
        let tile = unit_tile(64, 64);
        let m = to_mercator(pixel_to_geo(&tile, pt(-32.0, -32.0)).unwrap()).unwrap();
        // Half an extent (0.125) beyond TL in both axes.
        assert_abs_diff_eq!(m.x, 0.125, epsilon = 1e-12);
        assert_abs_diff_eq!(m.y, 0.125, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_tile_is_rejected() {
        let r = TileGeom::from_mercator_rect(MercPoint::new(0.3, 0.3), MercPoint::new(0.3, 0.4), 10, 10);
        assert!(matches!(r, Err(GeoError::DegenerateTile(_))));
    }

    #[test]
    fn antimeridian_footprint_is_rejected() {
        let f = Footprint::new([
            GeoPoint { lat: 1.0, lon: 179.0 },
            GeoPoint { lat: 1.0, lon: -179.0 },
            GeoPoint { lat: 0.0, lon: -179.0 },
            GeoPoint { lat: 0.0, lon: 179.0 },
        ]);
        assert_eq!(f.mercator(), Err(GeoError::AntimeridianCrossing));
    }

    fn merc_footprint(q: &Quad) -> Footprint {
        Footprint::from_mercator_quad(&q.map(|p| MercPoint::new(p.x, p.y)))
    }

    #[test]
    fn containment_examples() {
        let sq = [pt(0.4, 0.4), pt(0.6, 0.4), pt(0.6, 0.6), pt(0.4, 0.6)];
        let f = merc_footprint(&sq);
        let center = from_mercator(MercPoint::new(0.5, 0.5));
        assert!(footprint_contains(&f, center).unwrap());
        let far = from_mercator(MercPoint::new(0.8, 0.8));
        assert!(!footprint_contains(&f, far).unwrap());
        assert!(quad_contains(&unit_square(), &pt(1.0, 0.5)));
        assert!(quad_contains(&unit_square(), &pt(0.0, 0.0)));
        assert!(!quad_contains(&unit_square(), &pt(2.0, 2.0)));
    }

    #[test]
    fn containment_rejects_bowtie() {
        let bowtie = [pt(0.4, 0.4), pt(0.6, 0.6), pt(0.6, 0.4), pt(0.4, 0.6)];
        let f = merc_footprint(&bowtie);
        let c = from_mercator(MercPoint::new(0.5, 0.45));
        assert_eq!(footprint_contains(&f, c), Err(GeoError::SelfIntersecting));
    }

    #[test]
    fn convexity_examples() {
        assert!(quad_is_convex(&unit_square()));
        let bowtie = [pt(0.0, 0.0), pt(1.0, 1.0), pt(1.0, 0.0), pt(0.0, 1.0)];
        assert!(!quad_is_convex(&bowtie));
        let collinear = [pt(0.0, 0.0), pt(1.0, 0.0), pt(2.0, 0.0), pt(0.0, 1.0)];
        assert!(!quad_is_convex(&collinear));
        let dart = [pt(0.0, 0.0), pt(2.0, 0.0), pt(0.5, 0.5), pt(0.0, 2.0)];
        assert!(!quad_is_convex(&dart));
        assert!(quad_is_simple(&dart));
    }

    #[test]
    fn area_examples() {
        assert_abs_diff_eq!(quad_area(&unit_square()), 1.0);
        let big = unit_square().map(|p| pt(p.x * 3.0, p.y * 3.0));
        assert_abs_diff_eq!(quad_area(&big), 9.0);
        // Triangulation oracle on a non-convex simple quad.
        let q = [pt(0.0, 0.0), pt(4.0, 1.0), pt(1.5, 1.5), pt(0.5, 3.0)];
        let tri = |a: &Point2<f64>, b: &Point2<f64>, c: &Point2<f64>| 0.5 * cross(a, b, c).abs();
        // Diagonal 0-2 lies inside this quad.
        let oracle = tri(&q[0], &q[1], &q[2]) + tri(&q[0], &q[2], &q[3]);
        assert_abs_diff_eq!(quad_area(&q), oracle, epsilon = 1e-12);
    }

    fn finite_quad() -> impl Strategy<Value = Quad> {
        prop::array::uniform4((-10.0..10.0f64, -10.0..10.0f64)).prop_map(|a| a.map(|(x, y)| pt(x, y)))
    }

    proptest! {
        #[test]
        fn convexity_invariant_under_rotation_and_reversal(q in finite_quad(), k in 0usize..4) {
            let mut rot = q;
            rot.rotate_left(k);
            let mut rev = q;
            rev.reverse();
            prop_assert_eq!(quad_is_convex(&q), quad_is_convex(&rot));
            prop_assert_eq!(quad_is_convex(&q), quad_is_convex(&rev));
        }

        #[test]
        fn area_is_rigid_invariant_and_scales(q in finite_quad(), theta in 0.0..6.3f64,
                                             tx in -5.0..5.0f64, ty in -5.0..5.0f64, s in 0.1..4.0f64) {
            let a = quad_area(&q);
            let (sn, cs) = theta.sin_cos();
            let moved = q.map(|p| pt(cs * p.x - sn * p.y + tx, sn * p.x + cs * p.y + ty));
            prop_assert!((quad_area(&moved) - a).abs() <= 1e-9 * (1.0 + a));
            let scaled = q.map(|p| pt(p.x * s, p.y * s));
            prop_assert!((quad_area(&scaled) - s * s * a).abs() <= 1e-9 * (1.0 + s * s * a));
        }

        #[test]
        fn mercator_round_trip(lat in -80.0..80.0f64, lon in -180.0..180.0f64) {
            let g = from_mercator(to_mercator(GeoPoint { lat, lon }).unwrap());
            prop_assert!((g.lat - lat).abs() < 1e-9);
            prop_assert!((g.lon - lon).abs() < 1e-9);
        }
    }
}
