//! Images, square resizing, perspective warping and the 3×3 surroundings
//! mosaic.
//!
//! Samples are `f32` in `[0, 1]`. Coordinates are continuous: the center of
//! pixel `(i, j)` sits at `(i + 0.5, j + 0.5)`.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use nalgebra::Vector3;
use thiserror::Error;

use crate::geo::{GeoError, TileGeom};
use crate::robustfit::{FitError, Homography};

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error("cannot warp: {0}")]
    Estimation(#[from] FitError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: u32, height: u32, channels: u8) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width as usize * height as usize * channels as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, channels: u8, data: Vec<f32>) -> Result<Self, RasterError> {
        if channels != 1 && channels != 3 {
            return Err(RasterError::Invalid(format!("{channels} channels")));
        }
        if width == 0 || height == 0 {
            return Err(RasterError::Invalid("zero-sized image".into()));
        }
        if data.len() != width as usize * height as usize * channels as usize {
            return Err(RasterError::Invalid(format!(
                "buffer of {} samples for {width}x{height}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(RasterError::Invalid("non-finite sample".into()));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> f32) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    fn idx(&self, x: u32, y: u32, c: u8) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize + c as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, c: u8) -> f32 {
        self.data[self.idx(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, c: u8, v: f32) {
        let i = self.idx(x, y, c);
        self.data[i] = v;
    }

    /// Luma (0.299 R + 0.587 G + 0.114 B); grayscale input is cloned.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// Bilinear sample at continuous coordinates, or `None` outside the
    /// image extent `[0, W] × [0, H]`.
    #[inline]
    pub fn sample(&self, u: f64, v: f64, c: u8) -> Option<f32> {
        if !(u >= 0.0 && v >= 0.0 && u <= self.width as f64 && v <= self.height as f64) {
            return None;
        }
        Some(self.sample_clamped(u, v, c))
    }

    /// Bilinear sample with edge clamping; defined everywhere.
    #[inline]
    pub fn sample_clamped(&self, u: f64, v: f64, c: u8) -> f32 {
        let fx = u - 0.5;
        let fy = v - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = (fx - x0) as f32;
        let ty = (fy - y0) as f32;
        let max_x = self.width as i64 - 1;
        let max_y = self.height as i64 - 1;
        let xa = (x0 as i64).clamp(0, max_x) as u32;
        let xb = (x0 as i64 + 1).clamp(0, max_x) as u32;
        let ya = (y0 as i64).clamp(0, max_y) as u32;
        let yb = (y0 as i64 + 1).clamp(0, max_y) as u32;
        let top = self.get(xa, ya, c) * (1.0 - tx) + self.get(xb, ya, c) * tx;
        let bot = self.get(xa, yb, c) * (1.0 - tx) + self.get(xb, yb, c) * tx;
        top * (1.0 - ty) + bot * ty
    }

    /// Copies `src` with its top-left pixel at `(x0, y0)`.
    pub fn paste(&mut self, src: &Image, x0: u32, y0: u32) -> Result<(), RasterError> {
        if src.channels != self.channels {
            return Err(RasterError::DimensionMismatch("channel count".into()));
        }
        if x0 + src.width > self.width || y0 + src.height > self.height {
            return Err(RasterError::DimensionMismatch("paste out of bounds".into()));
        }
        let row = src.width as usize * src.channels as usize;
        for y in 0..src.height {
            let d = self.idx(x0, y0 + y, 0);
            let s = src.idx(0, y, 0);
            self.data[d..d + row].copy_from_slice(&src.data[s..s + row]);
        }
        Ok(())
    }

    pub fn crop(&self, x0: u32, y0: u32, width: u32, height: u32) -> Result<Image, RasterError> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(RasterError::DimensionMismatch("crop out of bounds".into()));
        }
        let mut out = Image::new(width, height, self.channels);
        let row = width as usize * self.channels as usize;
        for y in 0..height {
            let s = self.idx(x0, y0 + y, 0);
            let d = out.idx(0, y, 0);
            out.data[d..d + row].copy_from_slice(&self.data[s..s + row]);
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Image, RasterError> {
        let err = |source| RasterError::Io {
            path: path.display().to_string(),
            source,
        };
        let img = image::open(path).map_err(err)?;
        Ok(Self::from_dynamic(img))
    }

    pub fn from_dynamic(img: DynamicImage) -> Image {
        let gray = matches!(
            img,
            DynamicImage::ImageLuma8(_)
                | DynamicImage::ImageLumaA8(_)
                | DynamicImage::ImageLuma16(_)
                | DynamicImage::ImageLumaA16(_)
        );
        if gray {
            let g = img.to_luma8();
            let data = g.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Image {
                width: g.width(),
                height: g.height(),
                channels: 1,
                data,
            }
        } else {
            let rgb = img.to_rgb8();
            let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Image {
                width: rgb.width(),
                height: rgb.height(),
                channels: 3,
                data,
            }
        }
    }

    fn quantized(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Writes an 8-bit PNG or JPEG, chosen by file extension.
    pub fn save(&self, path: &Path) -> Result<(), RasterError> {
        let err = |source| RasterError::Io {
            path: path.display().to_string(),
            source,
        };
        let raw = self.quantized();
        if self.channels == 1 {
            let buf: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(self.width, self.height, raw)
                .expect("buffer length checked at construction");
            buf.save(path).map_err(err)
        } else {
            let buf: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(self.width, self.height, raw)
                .expect("buffer length checked at construction");
            buf.save(path).map_err(err)
        }
    }
}

/// Anisotropic bilinear resize to `side × side`.
pub fn resize_square(img: &Image, side: u32) -> Image {
    resize(img, side, side)
}

pub fn resize(img: &Image, width: u32, height: u32) -> Image {
    assert!(width >= 1 && height >= 1, "target size must be positive");
    if img.dims() == (width, height) {
        return img.clone();
    }
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    let mut out = Image::new(width, height, img.channels);
    let mut i = 0;
    for y in 0..height {
        let v = (y as f64 + 0.5) * sy;
        for x in 0..width {
            let u = (x as f64 + 0.5) * sx;
            for c in 0..img.channels {
                out.data[i] = img.sample_clamped(u, v, c);
                i += 1;
            }
        }
    }
    out
}

/// Inverse warp: each destination pixel samples `src` at `h⁻¹ · p`.
/// Samples outside `src`, or behind the projective horizon, are black.
pub fn warp_perspective(src: &Image, h: &Homography, dst_size: (u32, u32)) -> Result<Image, RasterError> {
    let inv = h.raw_inverse()?;
    let (w, hgt) = dst_size;
    let mut out = Image::new(w, hgt, src.channels);
    let mut i = 0;
    for y in 0..hgt {
        let py = y as f64 + 0.5;
        for x in 0..w {
            let q = inv * Vector3::new(x as f64 + 0.5, py, 1.0);
            if q.z > 1e-12 {
                let (u, v) = (q.x / q.z, q.y / q.z);
                if src.sample(u, v, 0).is_some() {
                    for c in 0..src.channels {
                        out.data[i + c as usize] = src.sample_clamped(u, v, c);
                    }
                }
            }
            i += src.channels as usize;
        }
    }
    Ok(out)
}

/// Neighbor slots in row-major order around the center tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Neighbor {
    NW,
    N,
    NE,
    W,
    E,
    SW,
    S,
    SE,
}

impl Neighbor {
    pub const ALL: [Neighbor; 8] = [
        Neighbor::NW,
        Neighbor::N,
        Neighbor::NE,
        Neighbor::W,
        Neighbor::E,
        Neighbor::SW,
        Neighbor::S,
        Neighbor::SE,
    ];

    /// Grid offset `(dx, dy)` relative to the center, in tiles.
    pub fn offset(self) -> (i32, i32) {
        match self {
            Neighbor::NW => (-1, -1),
            Neighbor::N => (0, -1),
            Neighbor::NE => (1, -1),
            Neighbor::W => (-1, 0),
            Neighbor::E => (1, 0),
            Neighbor::SW => (-1, 1),
            Neighbor::S => (0, 1),
            Neighbor::SE => (1, 1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Neighbor::NW => "NW",
            Neighbor::N => "N",
            Neighbor::NE => "NE",
            Neighbor::W => "W",
            Neighbor::E => "E",
            Neighbor::SW => "SW",
            Neighbor::S => "S",
            Neighbor::SE => "SE",
        }
    }

    pub fn from_name(s: &str) -> Option<Neighbor> {
        Neighbor::ALL.into_iter().find(|n| n.name() == s)
    }

    pub fn index(self) -> usize {
        Neighbor::ALL.iter().position(|&n| n == self).unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct Mosaic {
    pub image: Image,
    /// Translation from the center tile frame into the mosaic frame.
    pub center_offset: (u32, u32),
    pub geom: TileGeom,
}

/// Assembles the 3×3 surroundings; absent neighbors stay black.
pub fn build_mosaic(
    center: &Image,
    center_geom: &TileGeom,
    neighbors: &[Option<Image>; 8],
) -> Result<Mosaic, RasterError> {
    let (w, h) = center.dims();
    for (slot, n) in Neighbor::ALL.iter().zip(neighbors) {
        if let Some(img) = n {
            if img.dims() != (w, h) || img.channels != center.channels {
                return Err(RasterError::DimensionMismatch(format!(
                    "neighbor {} is {}x{}x{}, center is {w}x{h}x{}",
                    slot.name(),
                    img.width,
                    img.height,
                    img.channels,
                    center.channels
                )));
            }
        }
    }
    let mut image = Image::new(3 * w, 3 * h, center.channels);
    image.paste(center, w, h)?;
    for (slot, n) in Neighbor::ALL.iter().zip(neighbors) {
        if let Some(img) = n {
            let (dx, dy) = slot.offset();
            image.paste(img, ((1 + dx) as u32) * w, ((1 + dy) as u32) * h)?;
        }
    }
    let geom = center_geom.with_size(w, h).surroundings()?;
    Ok(Mosaic {
        image,
        center_offset: (w, h),
        geom,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{pixel_to_geo, to_mercator, MercPoint};
    use approx::assert_abs_diff_eq;
    use nalgebra::Point2;

    fn ramp(w: u32, h: u32) -> Image {
        Image::from_fn(w, h, |x, y| (x as f32 + 0.1 * y as f32) / (w as f32 + 0.1 * h as f32))
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ramp(768, 768);
        assert_eq!(resize_square(&img, 768), img);
        let c = Image::from_fn(2, 2, |_, _| 0.4);
        let r = resize_square(&c, 4);
        assert!(r.data().iter().all(|&v| (v - 0.4).abs() < 1e-7));
    }

    #[test]
    fn resize_matches_direct_bilinear() {
        // 4×2 horizontal ramp down to 2×2; oracle samples centers directly.
        let img = Image::from_fn(4, 2, |x, _| x as f32 / 3.0);
        let r = resize_square(&img, 2);
        // Destination centers map to u = 1.0 and 3.0, i.e. halfway between
        // source columns 0/1 and 2/3.
        let expect = [(0.0 + 1.0 / 3.0) / 2.0, (2.0 / 3.0 + 1.0) / 2.0];
        for y in 0..2 {
            for x in 0..2 {
                assert_abs_diff_eq!(r.get(x, y, 0), expect[x as usize], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn warp_identity_is_exact() {
        let img = ramp(17, 9);
        let out = warp_perspective(&img, &Homography::identity(), (17, 9)).unwrap();
        assert_eq!(out, img);
        let bigger = warp_perspective(&img, &Homography::identity(), (20, 10)).unwrap();
        assert_eq!(bigger.crop(0, 0, 17, 9).unwrap(), img);
        assert_eq!(bigger.get(19, 9, 0), 0.0);
    }

    #[test]
    fn warp_translation_shifts_columns() {
        let img = ramp(8, 4);
        let out = warp_perspective(&img, &Homography::translation(1.0, 0.0), (8, 4)).unwrap();
        for y in 0..4 {
            assert_eq!(out.get(0, y, 0), 0.0);
            for x in 1..8 {
                assert_abs_diff_eq!(out.get(x, y, 0), img.get(x - 1, y, 0), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn warp_rotation_permutes_pixels() {
        let img = Image::from_fn(3, 3, |x, y| (y * 3 + x) as f32 / 8.0);
        let h = Homography::rotation_about(std::f64::consts::FRAC_PI_2, Point2::new(1.5, 1.5));
        let out = warp_perspective(&img, &h, (3, 3)).unwrap();
        // Forward map sends src (x, y) to (3 - y, x) in center coordinates,
        // i.e. pixel (2 - y, x).
        for y in 0..3 {
            for x in 0..3 {
                assert_abs_diff_eq!(out.get(2 - y, x, 0), img.get(x, y, 0), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn warp_rejects_singular() {
        let img = ramp(4, 4);
        let h = Homography::from_rows([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(
            warp_perspective(&img, &h, (4, 4)),
            Err(RasterError::Estimation(FitError::Singular(_)))
        ));
    }

    fn tile(w: u32) -> TileGeom {
        TileGeom::from_mercator_rect(MercPoint::new(0.5, 0.25), MercPoint::new(0.51, 0.26), w, w).unwrap()
    }

    #[test]
    fn mosaic_center_and_black_frame() {
        let c = ramp(6, 6);
        let m = build_mosaic(&c, &tile(6), &Default::default()).unwrap();
        assert_eq!(m.image.dims(), (18, 18));
        assert_eq!(m.image.crop(6, 6, 6, 6).unwrap(), c);
        assert_eq!(m.image.get(0, 0, 0), 0.0);
        assert_eq!(m.center_offset, (6, 6));

        let mut nb: [Option<Image>; 8] = Default::default();
        nb[Neighbor::SE.index()] = Some(Image::from_fn(6, 6, |_, _| 1.0));
        let m = build_mosaic(&c, &tile(6), &nb).unwrap();
        assert_eq!(m.image.get(17, 17, 0), 1.0);
        assert_eq!(m.image.get(0, 17, 0), 0.0);
    }

    #[test]
    fn mosaic_footprint_extends_one_tile() {
        let g = tile(6);
        let m = build_mosaic(&ramp(6, 6), &g, &Default::default()).unwrap();
        let tl = to_mercator(m.geom.footprint.corners[0]).unwrap();
        assert_abs_diff_eq!(tl.x, 0.49, epsilon = 1e-12);
        assert_abs_diff_eq!(tl.y, 0.24, epsilon = 1e-12);
        // Center tile corners sit at mosaic pixels (W, H) and (2W, 2H).
        let c = pixel_to_geo(&m.geom, Point2::new(6.0, 6.0)).unwrap();
        assert_abs_diff_eq!(c.lat, g.footprint.corners[0].lat, epsilon = 1e-9);
        assert_abs_diff_eq!(c.lon, g.footprint.corners[0].lon, epsilon = 1e-9);
        let c = pixel_to_geo(&m.geom, Point2::new(12.0, 12.0)).unwrap();
        assert_abs_diff_eq!(c.lat, g.footprint.corners[2].lat, epsilon = 1e-9);
    }

    #[test]
    fn mosaic_rejects_mismatch() {
        let mut nb: [Option<Image>; 8] = Default::default();
        nb[0] = Some(ramp(5, 6));
        assert!(matches!(
            build_mosaic(&ramp(6, 6), &tile(6), &nb),
            Err(RasterError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Image::from_fn(5, 3, |x, y| ((x * 3 + y) * 17 % 256) as f32 / 255.0).to_rgb();
        img.save(&p).unwrap();
        let back = Image::load(&p).unwrap();
        assert_eq!(back.channels(), 3);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-6);
        }
    }
}
