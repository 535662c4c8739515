//! Face regions as 2D polygons, feathered application masks, and region crops.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{blur_plane_in_rect, gaussian_kernel, ImageBuffer, PixelRect, Plane};

pub type Point = [f64; 2];
pub type Polygon = Vec<Point>;

/// Default mask feather (Gaussian std, pixels).
pub const DEFAULT_FEATHER_SIGMA: f64 = 2.0;
/// Default fractional bbox expansion applied before cropping.
pub const DEFAULT_CROP_EXPANSION: f64 = 0.4;
/// Default square crop side.
pub const DEFAULT_CROP_SIZE: usize = 64;
pub const MIN_CROP_SIZE: usize = 8;

/// Which makeup region a request applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Lips,
    Eyes,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Lips => "lips",
            Target::Eyes => "eyes",
        })
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lips" => Ok(Target::Lips),
            "eyes" => Ok(Target::Eyes),
            other => Err(Error::InvalidArgument(format!(
                "unknown target `{other}` (expected lips or eyes)"
            ))),
        }
    }
}

/// Lip and eye regions for one frame, in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryDoc")]
pub struct FaceGeometry {
    pub width: usize,
    pub height: usize,
    pub lips: Vec<Polygon>,
    pub eyes: Vec<Polygon>,
}

/// Either a single polygon or a list of polygons.
#[derive(Deserialize)]
#[serde(untagged)]
enum PolygonList {
    One(Polygon),
    Many(Vec<Polygon>),
}

impl From<PolygonList> for Vec<Polygon> {
    fn from(p: PolygonList) -> Self {
        match p {
            PolygonList::One(p) if p.is_empty() => Vec::new(),
            PolygonList::One(p) => vec![p],
            PolygonList::Many(v) => v,
        }
    }
}

fn empty_list() -> PolygonList {
    PolygonList::Many(Vec::new())
}

#[derive(Deserialize)]
struct GeometryDoc {
    width: usize,
    height: usize,
    #[serde(default = "empty_list")]
    lips: PolygonList,
    #[serde(default = "empty_list")]
    eyes: PolygonList,
}

impl TryFrom<GeometryDoc> for FaceGeometry {
    type Error = Error;

    fn try_from(doc: GeometryDoc) -> Result<Self> {
        FaceGeometry::new(doc.width, doc.height, doc.lips.into(), doc.eyes.into())
    }
}

impl FaceGeometry {
    pub fn new(width: usize, height: usize, lips: Vec<Polygon>, eyes: Vec<Polygon>) -> Result<Self> {
        let geom = Self {
            width,
            height,
            lips,
            eyes,
        };
        for poly in geom.lips.iter().chain(&geom.eyes) {
            validate_polygon(poly, width, height)?;
        }
        Ok(geom)
    }

    pub fn polygons(&self, target: Target) -> &[Polygon] {
        match target {
            Target::Lips => &self.lips,
            Target::Eyes => &self.eyes,
        }
    }

    pub fn check_matches(&self, image: &ImageBuffer) -> Result<()> {
        if self.width != image.width() || self.height != image.height() {
            return Err(Error::DimensionMismatch {
                expected_width: self.width,
                expected_height: self.height,
                width: image.width(),
                height: image.height(),
            });
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("geometry serialize")
    }
}

fn validate_polygon(poly: &Polygon, width: usize, height: usize) -> Result<()> {
    if poly.len() < 3 {
        return Err(Error::InvalidGeometry(format!(
            "polygon has {} vertices, need at least 3",
            poly.len()
        )));
    }
    for &[x, y] in poly {
        if !(x.is_finite() && y.is_finite())
            || x < 0.0
            || y < 0.0
            || x > width as f64
            || y > height as f64
        {
            return Err(Error::InvalidGeometry(format!(
                "vertex ({x}, {y}) outside image {width}x{height}"
            )));
        }
    }
    Ok(())
}

/// Per-frame geometry for a video, keyed by frame number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometrySequence {
    pub frames: Vec<FrameGeometry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub frame: usize,
    #[serde(flatten)]
    pub geometry: FaceGeometry,
}

impl GeometrySequence {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut seq: GeometrySequence = serde_json::from_str(&text)?;
        seq.frames.sort_by_key(|f| f.frame);
        if seq.frames.windows(2).any(|w| w[0].frame == w[1].frame) {
            return Err(Error::InvalidGeometry("duplicate frame index".into()));
        }
        Ok(seq)
    }

    pub fn get(&self, frame: usize) -> Option<&FaceGeometry> {
        self.frames
            .binary_search_by_key(&frame, |f| f.frame)
            .ok()
            .map(|i| &self.frames[i].geometry)
    }
}

/// Per-pixel compositing weights in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ApplicationMask {
    plane: Plane,
    support: PixelRect,
}

impl ApplicationMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            plane: Plane::zeros(width, height),
            support: PixelRect {
                x0: 0,
                y0: 0,
                x1: 0,
                y1: 0,
            },
        }
    }

    pub fn width(&self) -> usize {
        self.plane.width
    }

    pub fn height(&self) -> usize {
        self.plane.height
    }

    pub fn weights(&self) -> &[f32] {
        &self.plane.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.plane.get(x, y)
    }

    /// Rectangle outside which every weight is zero.
    pub fn support(&self) -> PixelRect {
        self.support
    }

    pub fn plane(&self) -> &Plane {
        &self.plane
    }

    pub fn max_weight(&self) -> f32 {
        self.plane.values.iter().cloned().fold(0.0, f32::max)
    }
}

/// Even-odd crossing test for one polygon at a point.
#[inline]
pub fn point_in_polygon(poly: &[Point], px: f64, py: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let [xi, yi] = poly[i];
        let [xj, yj] = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn bbox(polygons: &[Polygon]) -> Option<(f64, f64, f64, f64)> {
    let mut it = polygons.iter().flatten();
    let &[x, y] = it.next()?;
    Some(it.fold((x, y, x, y), |(a, b, c, d), &[x, y]| {
        (a.min(x), b.min(y), c.max(x), d.max(y))
    }))
}

/// Rasterizes polygons (union of per-polygon even-odd fills, sampled at
/// pixel centers) and feathers the result with a Gaussian of std
/// `feather_sigma`.
pub fn rasterize_mask(
    polygons: &[Polygon],
    width: usize,
    height: usize,
    feather_sigma: f64,
) -> Result<ApplicationMask> {
    if !(feather_sigma >= 0.0 && feather_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "feather sigma must be >= 0, got {feather_sigma}"
        )));
    }
    for poly in polygons {
        validate_polygon(poly, width, height)?;
    }
    let Some((bx0, by0, bx1, by1)) = bbox(polygons) else {
        return Ok(ApplicationMask::empty(width, height));
    };
    // pixel centers (i + 0.5) that can fall inside the bbox
    let rect = PixelRect {
        x0: (bx0 - 0.5).ceil().max(0.0) as usize,
        y0: (by0 - 0.5).ceil().max(0.0) as usize,
        x1: ((bx1 - 0.5).floor() as i64 + 1).clamp(0, width as i64) as usize,
        y1: ((by1 - 0.5).floor() as i64 + 1).clamp(0, height as i64) as usize,
    };
    let mut binary = Plane::zeros(width, height);
    let mut crossings = Vec::new();
    for y in rect.y0..rect.y1 {
        let py = y as f64 + 0.5;
        for poly in polygons {
            crossings.clear();
            let n = poly.len();
            let mut j = n - 1;
            for i in 0..n {
                let [xi, yi] = poly[i];
                let [xj, yj] = poly[j];
                if (yi > py) != (yj > py) {
                    crossings.push((xj - xi) * (py - yi) / (yj - yi) + xi);
                }
                j = i;
            }
            if crossings.is_empty() {
                continue;
            }
            crossings.sort_by(|a, b| a.total_cmp(b));
            // inside iff an odd number of crossings lie strictly right of px
            let mut k = 0;
            for x in rect.x0..rect.x1 {
                let px = x as f64 + 0.5;
                while k < crossings.len() && crossings[k] <= px {
                    k += 1;
                }
                if (crossings.len() - k) % 2 == 1 {
                    binary.values[y * width + x] = 1.0;
                }
            }
        }
    }
    if feather_sigma == 0.0 {
        return Ok(ApplicationMask {
            plane: binary,
            support: rect,
        });
    }
    let kernel = gaussian_kernel(feather_sigma);
    let support = rect.dilate(kernel.len() / 2, width, height);
    let mut plane = blur_plane_in_rect(&binary, &kernel, support);
    for v in &mut plane.values {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(ApplicationMask { plane, support })
}

/// Real-valued crop rectangle plus output side length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSpec {
    pub origin_x: f64,
    pub origin_y: f64,
    pub width: f64,
    pub height: f64,
    pub target_size: usize,
}

impl CropSpec {
    /// Bounding box of all vertices, grown by `expansion` of its size on
    /// each side and clamped to the image.
    pub fn around(
        polygons: &[Polygon],
        expansion: f64,
        target_size: usize,
        image_width: usize,
        image_height: usize,
    ) -> Result<Self> {
        if !(expansion >= 0.0 && expansion.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "crop expansion must be >= 0, got {expansion}"
            )));
        }
        if target_size < MIN_CROP_SIZE {
            return Err(Error::InvalidArgument(format!(
                "crop size {target_size} below minimum {MIN_CROP_SIZE}"
            )));
        }
        let (x0, y0, x1, y1) = bbox(polygons).ok_or(Error::NoRegion)?;
        let (ex, ey) = (expansion * (x1 - x0), expansion * (y1 - y0));
        let (w, h) = (image_width as f64, image_height as f64);
        let cx0 = (x0 - ex).clamp(0.0, w);
        let cy0 = (y0 - ey).clamp(0.0, h);
        let cx1 = (x1 + ex).clamp(0.0, w);
        let cy1 = (y1 + ey).clamp(0.0, h);
        Ok(Self {
            origin_x: cx0,
            origin_y: cy0,
            width: (cx1 - cx0).max(1.0).min(w),
            height: (cy1 - cy0).max(1.0).min(h),
            target_size,
        })
    }

    /// Unclamped expanded rectangle `(x0, y0, x1, y1)`; useful for reporting.
    pub fn expanded_bbox(polygons: &[Polygon], expansion: f64) -> Result<(f64, f64, f64, f64)> {
        let (x0, y0, x1, y1) = bbox(polygons).ok_or(Error::NoRegion)?;
        let (ex, ey) = (expansion * (x1 - x0), expansion * (y1 - y0));
        Ok((x0 - ex, y0 - ey, x1 + ex, y1 + ey))
    }

    /// Integer rectangle of source pixels that the resampler can read.
    pub fn source_rect(&self, image_width: usize, image_height: usize) -> PixelRect {
        PixelRect {
            x0: (self.origin_x - 1.0).floor().max(0.0) as usize,
            y0: (self.origin_y - 1.0).floor().max(0.0) as usize,
            x1: ((self.origin_x + self.width + 1.0).ceil() as usize).min(image_width),
            y1: ((self.origin_y + self.height + 1.0).ceil() as usize).min(image_height),
        }
    }
}

/// Bilinear resampling of the `spec` rectangle to `target_size` squared,
/// with pixel-center alignment and edge clamping.
pub fn resample(image: &ImageBuffer, spec: &CropSpec) -> ImageBuffer {
    let t = spec.target_size;
    let (w, h) = (image.width(), image.height());
    let sx = spec.width / t as f64;
    let sy = spec.height / t as f64;
    let mut out = ImageBuffer::new(t, t);
    let axis = |origin: f64, scale: f64, i: usize, len: usize| -> (usize, usize, f32) {
        let s = (origin + (i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    for j in 0..t {
        let (y0, y1, fy) = axis(spec.origin_y, sy, j, h);
        for i in 0..t {
            let (x0, x1, fx) = axis(spec.origin_x, sx, i, w);
            let (a, b, c, d) = (image.get(x0, y0), image.get(x1, y0), image.get(x0, y1), image.get(x1, y1));
            let px = std::array::from_fn(|ch| {
                let top = a[ch] + (b[ch] - a[ch]) * fx;
                let bot = c[ch] + (d[ch] - c[ch]) * fx;
                (top + (bot - top) * fy).clamp(0.0, 1.0)
            });
            out.set(i, j, px);
        }
    }
    out
}

/// Crops the expanded bounding box of `polygons` and resizes it to
/// `target_size x target_size`.
pub fn crop_region(
    image: &ImageBuffer,
    polygons: &[Polygon],
    expansion: f64,
    target_size: usize,
) -> Result<ImageBuffer> {
    let spec = CropSpec::around(polygons, expansion, target_size, image.width(), image.height())?;
    Ok(resample(image, &spec))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect_poly(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
        vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
    }

    #[test]
    fn full_cover_no_feather_is_all_ones() {
        let m = rasterize_mask(&[rect_poly(0.0, 0.0, 20.0, 10.0)], 20, 10, 0.0).unwrap();
        assert!(m.weights().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn empty_polygons_give_zero_mask() {
        let m = rasterize_mask(&[], 16, 16, 2.0).unwrap();
        assert!(m.weights().iter().all(|&w| w == 0.0));
        assert!(m.support().is_empty());
    }

    #[test]
    fn overlapping_polygons_stay_within_one() {
        let polys = vec![rect_poly(2.0, 2.0, 12.0, 12.0), rect_poly(6.0, 6.0, 16.0, 16.0)];
        let m = rasterize_mask(&polys, 20, 20, 1.5).unwrap();
        assert!(m.weights().iter().all(|&w| (0.0..=1.0).contains(&w)));
        // the overlap is filled, not cancelled
        assert!(m.get(9, 9) > 0.99);
    }

    #[test]
    fn weights_vanish_outside_dilated_bbox() {
        let m = rasterize_mask(&[rect_poly(10.0, 10.0, 14.0, 14.0)], 40, 40, 2.0).unwrap();
        let r = 6; // ceil(3 sigma)
        for y in 0..40 {
            for x in 0..40 {
                if x + r < 10 || x > 14 + r || y + r < 10 || y > 14 + r {
                    assert_eq!(m.get(x, y), 0.0, "({x},{y})");
                }
            }
        }
    }

    #[test]
    fn negative_feather_rejected() {
        assert!(rasterize_mask(&[rect_poly(0.0, 0.0, 4.0, 4.0)], 8, 8, -1.0).is_err());
    }

    #[test]
    fn geometry_validation() {
        assert!(FaceGeometry::new(10, 10, vec![vec![[0.0, 0.0], [1.0, 1.0]]], vec![]).is_err());
        assert!(FaceGeometry::new(10, 10, vec![rect_poly(0.0, 0.0, 11.0, 5.0)], vec![]).is_err());
        assert!(FaceGeometry::new(10, 10, vec![rect_poly(0.0, 0.0, 10.0, 10.0)], vec![]).is_ok());
    }

    #[test]
    fn geometry_doc_accepts_single_polygon_form() {
        let doc = r#"{"width": 32, "height": 32,
            "lips": [[4,4],[20,4],[12,12]],
            "eyes": [[[1,1],[5,1],[3,3]], [[10,1],[14,1],[12,3]]]}"#;
        let g: FaceGeometry = serde_json::from_str(doc).unwrap();
        assert_eq!(g.lips.len(), 1);
        assert_eq!(g.eyes.len(), 2);
        let round: FaceGeometry = serde_json::from_str(&g.to_json()).unwrap();
        assert_eq!(round, g);
        let bad = r#"{"width": 8, "height": 8, "lips": [[4,4],[20,4],[12,12]]}"#;
        assert!(serde_json::from_str::<FaceGeometry>(bad).is_err());
    }

    #[test]
    fn crop_expansion_arithmetic() {
        let polys = vec![rect_poly(10.0, 10.0, 20.0, 20.0)];
        let (x0, y0, x1, y1) = CropSpec::expanded_bbox(&polys, 0.4).unwrap();
        assert!((x0 - 6.0).abs() < 1e-12 && (y0 - 6.0).abs() < 1e-12);
        assert!((x1 - 24.0).abs() < 1e-12 && (y1 - 24.0).abs() < 1e-12);
        let spec = CropSpec::around(&polys, 0.4, 16, 100, 100).unwrap();
        assert!((spec.origin_x - 6.0).abs() < 1e-12 && (spec.width - 18.0).abs() < 1e-12);
        let clamped = CropSpec::around(&polys, 2.0, 16, 25, 25).unwrap();
        assert_eq!((clamped.origin_x, clamped.origin_y), (0.0, 0.0));
        assert_eq!((clamped.width, clamped.height), (25.0, 25.0));
    }

    #[test]
    fn crop_errors() {
        let img = ImageBuffer::new(16, 16);
        assert!(matches!(crop_region(&img, &[], 0.4, 8), Err(Error::NoRegion)));
        let polys = vec![rect_poly(2.0, 2.0, 10.0, 10.0)];
        assert!(crop_region(&img, &polys, 0.4, 4).is_err());
        assert!(crop_region(&img, &polys, -0.1, 8).is_err());
    }

    #[test]
    fn identity_crop_is_bit_exact() {
        let img = ImageBuffer::from_fn(40, 30, |x, y| {
            [(x * 7 % 13) as f32 / 13.0, (y * 5 % 11) as f32 / 11.0, ((x + y) % 3) as f32 / 3.0]
        });
        let polys = vec![rect_poly(8.0, 5.0, 24.0, 21.0)];
        let out = crop_region(&img, &polys, 0.0, 16).unwrap();
        for j in 0..16 {
            for i in 0..16 {
                assert_eq!(out.get(i, j), img.get(8 + i, 5 + j));
            }
        }
    }

    #[test]
    fn target_parses() {
        assert_eq!("lips".parse::<Target>().unwrap(), Target::Lips);
        assert_eq!(Target::Eyes.to_string(), "eyes");
        assert!("nose".parse::<Target>().is_err());
    }
}
