//! RGB raster with channels in [0, 1], plus single-channel planes used for
//! masks and highlight maps.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};

/// Rec.601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[inline]
pub fn luminance(rgb: [f32; 3]) -> f32 {
    LUMA[0] * rgb[0] + LUMA[1] * rgb[1] + LUMA[2] * rgb[2]
}

/// Row-major interleaved RGB image, every channel in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    /// Wraps raw interleaved data, rejecting wrong lengths and values outside [0, 1].
    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "expected {} channel values for {width}x{height}, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "channel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                img.set(x, y, [v[0].clamp(0.0, 1.0), v[1].clamp(0.0, 1.0), v[2].clamp(0.0, 1.0)]);
            }
        }
        img
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access for in-crate passes; callers must keep values in [0, 1].
    #[inline]
    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        debug_assert!(rgb.iter().all(|v| (0.0..=1.0).contains(v)));
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_size(&self, other: &ImageBuffer) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch {
                expected_width: self.width,
                expected_height: self.height,
                width: other.width,
                height: other.height,
            });
        }
        Ok(())
    }

    pub fn luminance_plane(&self) -> Plane {
        let values = self
            .data
            .chunks_exact(3)
            .map(|p| luminance([p[0], p[1], p[2]]))
            .collect();
        Plane {
            width: self.width,
            height: self.height,
            values,
        }
    }

    /// Snaps every channel to the nearest 8-bit level, matching a PNG round trip.
    pub fn quantized(&self) -> ImageBuffer {
        let data = self
            .data
            .iter()
            .map(|&v| quantize_channel(v) as f32 / 255.0)
            .collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.data.iter().map(|&v| quantize_channel(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode_png()?).map_err(|e| Error::io(path, e))
    }

    /// Width and height from the PNG header, without decoding pixels.
    pub fn png_dimensions(bytes: &[u8]) -> Result<(usize, usize)> {
        let (w, h) = image::ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png).into_dimensions()?;
        Ok((w as usize, h as usize))
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}

#[inline]
pub fn quantize_channel(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Single-channel real raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub(crate) width: usize,
    pub(crate) height: usize,
    pub(crate) values: Vec<f32>,
}

impl Plane {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

/// Inclusive-exclusive pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }

    /// Grows the rectangle by `r` pixels on each side, clipped to `width x height`.
    pub fn dilate(&self, r: usize, width: usize, height: usize) -> PixelRect {
        PixelRect {
            x0: self.x0.saturating_sub(r),
            y0: self.y0.saturating_sub(r),
            x1: (self.x1 + r).min(width),
            y1: (self.y1 + r).min(height),
        }
    }
}

/// Normalized discrete Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / sum) as f32).collect()
}

/// Separable blur of `plane` restricted to `rect` with zero padding outside
/// the image. Values outside `rect` in the output are zero, so `rect` must
/// contain the support of the input dilated by the kernel radius.
pub(crate) fn blur_plane_in_rect(plane: &Plane, kernel: &[f32], rect: PixelRect) -> Plane {
    let (w, h) = (plane.width, plane.height);
    let mut out = Plane::zeros(w, h);
    if rect.is_empty() {
        return out;
    }
    let r = (kernel.len() / 2) as isize;
    let rw = rect.x1 - rect.x0;
    let mut tmp = vec![0.0f32; rw * h];
    // horizontal pass over every row that can feed the vertical pass
    let ty0 = rect.y0.saturating_sub(r as usize);
    let ty1 = (rect.y1 + r as usize).min(h);
    for y in ty0..ty1 {
        let row = &plane.values[y * w..(y + 1) * w];
        for x in rect.x0..rect.x1 {
            let mut acc = 0.0f32;
            for (k, &kv) in kernel.iter().enumerate() {
                let sx = x as isize + k as isize - r;
                if sx >= 0 && (sx as usize) < w {
                    acc += kv * row[sx as usize];
                }
            }
            tmp[y * rw + (x - rect.x0)] = acc;
        }
    }
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            let mut acc = 0.0f32;
            for (k, &kv) in kernel.iter().enumerate() {
                let sy = y as isize + k as isize - r;
                if sy >= 0 && (sy as usize) < h {
                    acc += kv * tmp[sy as usize * rw + (x - rect.x0)];
                }
            }
            out.values[y * w + x] = acc;
        }
    }
    out
}
