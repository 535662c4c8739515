use crate::geometry::ApplicationMask;
use crate::image::{blur_plane_in_rect, gaussian_kernel, luminance, ImageBuffer, PixelRect, Plane};
use crate::params::GraphicsParams;

/// Quantile of in-mask luminance used as the highlight threshold.
pub const HIGHLIGHT_QUANTILE: f64 = 0.95;
/// Blur applied to the highlight map for the reflection bloom.
pub const REFLECTION_SIGMA: f64 = 4.0;
/// Specular exponent spread: `k = 1 + (1 - roughness) * SPECULAR_SPREAD`.
pub const SPECULAR_SPREAD: f64 = 32.0;
/// Upper bound on the luminance shading ratio in recoloring.
pub const MAX_SHADING: f64 = 2.0;

const CORE_WEIGHT: f32 = 0.5;
const MIN_WEIGHT: f32 = 0.01;

/// Estimated specular response inside the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct HighlightMap {
    plane: Plane,
    /// Set when the mask was too faint to estimate anything.
    pub degenerate: bool,
}

impl HighlightMap {
    pub fn values(&self) -> &[f32] {
        self.plane.values()
    }

    pub fn plane(&self) -> &Plane {
        &self.plane
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.plane.get(x, y)
    }

    /// Builds a map from raw values (clamped to [0, 1]); for tests and tools.
    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), width * height);
        Self {
            plane: Plane {
                width,
                height,
                values: values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            },
            degenerate: false,
        }
    }
}

/// Linear-interpolated quantile of a non-empty sample (sorted internally).
pub(crate) fn quantile(values: &mut [f32], q: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let h = (values.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    let (_, &mut a, rest) = values.select_nth_unstable_by(lo, |a, b| a.total_cmp(b));
    if frac == 0.0 || rest.is_empty() {
        return a as f64;
    }
    let b = rest.iter().cloned().fold(f32::INFINITY, f32::min);
    a as f64 + frac * (b as f64 - a as f64)
}

fn rect_pixels(rect: PixelRect) -> impl Iterator<Item = (usize, usize)> {
    (rect.y0..rect.y1).flat_map(move |y| (rect.x0..rect.x1).map(move |x| (x, y)))
}

/// Thresholds luminance at the `quantile` of the in-mask distribution:
/// `H = clamp((L - q) / (1 - q), 0, 1) * m`.
pub fn estimate_highlight(source: &ImageBuffer, mask: &ApplicationMask, quantile_level: f64) -> HighlightMap {
    let (w, h) = (source.width(), source.height());
    let mut plane = Plane::zeros(w, h);
    let support = mask.support();
    let collect = |min_w: f32| -> Vec<f32> {
        rect_pixels(support)
            .filter(|&(x, y)| mask.get(x, y) > min_w)
            .map(|(x, y)| luminance(source.get(x, y)))
            .collect()
    };
    let mut sample = collect(CORE_WEIGHT);
    if sample.is_empty() {
        sample = collect(MIN_WEIGHT);
    }
    if sample.is_empty() {
        log::warn!("highlight estimation skipped: mask weights all <= {MIN_WEIGHT}");
        return HighlightMap {
            plane,
            degenerate: true,
        };
    }
    let q = quantile(&mut sample, quantile_level);
    if q < 1.0 {
        for (x, y) in rect_pixels(support) {
            let m = mask.get(x, y);
            if m == 0.0 {
                continue;
            }
            let l = luminance(source.get(x, y)) as f64;
            let v = ((l - q) / (1.0 - q)).clamp(0.0, 1.0) as f32;
            plane.values[y * w + x] = v * m;
        }
    }
    HighlightMap {
        plane,
        degenerate: false,
    }
}

/// Mask-weighted mean luminance over core pixels, if meaningful.
pub(crate) fn mean_core_luminance(source: &ImageBuffer, mask: &ApplicationMask) -> Option<f64> {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (x, y) in rect_pixels(mask.support()) {
        let m = mask.get(x, y);
        if m > CORE_WEIGHT {
            num += m as f64 * luminance(source.get(x, y)) as f64;
            den += m as f64;
        }
    }
    let mean = if den > 0.0 { num / den } else { 0.0 };
    (mean >= 1e-3).then_some(mean)
}

/// Shading-preserving recolor:
/// `out = (1 - a m) src + a m clamp(c * s, 0, 1)` with `a = opacity * intensity`
/// and `s = clamp(L / mean_L, 0, 2)`.
pub fn recolor(
    source: &ImageBuffer,
    mask: &ApplicationMask,
    params: &GraphicsParams,
    user_intensity: f64,
) -> ImageBuffer {
    let mut out = source.clone();
    let alpha = params.opacity() * user_intensity;
    if alpha == 0.0 {
        return out;
    }
    let color = params.color().map(|c| c as f64 / 255.0);
    let mean_l = mean_core_luminance(source, mask);
    let w = source.width();
    let data = out.data_mut();
    for (x, y) in rect_pixels(mask.support()) {
        let m = mask.get(x, y) as f64;
        if m == 0.0 {
            continue;
        }
        let src = source.get(x, y);
        let shading = match mean_l {
            Some(mean) => (luminance(src) as f64 / mean).clamp(0.0, MAX_SHADING),
            None => 1.0,
        };
        let am = alpha * m;
        let i = (y * w + x) * 3;
        for ch in 0..3 {
            let tinted = (color[ch] * shading).clamp(0.0, 1.0);
            let v = (1.0 - am) * src[ch] as f64 + am * tinted;
            data[i + ch] = (v as f32).clamp(0.0, 1.0);
        }
    }
    out
}

pub fn specular_exponent(roughness: f64) -> f64 {
    1.0 + (1.0 - roughness) * SPECULAR_SPREAD
}

/// Adds white specular `gloss * H^k` inside the mask.
pub fn gloss_pass(
    base: &ImageBuffer,
    highlight: &HighlightMap,
    mask: &ApplicationMask,
    params: &GraphicsParams,
) -> ImageBuffer {
    let mut out = base.clone();
    let gloss = params.gloss_amount();
    if gloss == 0.0 {
        return out;
    }
    let k = specular_exponent(params.gloss_roughness());
    let w = base.width();
    let data = out.data_mut();
    for (x, y) in rect_pixels(mask.support()) {
        let m = mask.get(x, y) as f64;
        let hv = highlight.get(x, y) as f64;
        if m == 0.0 || hv == 0.0 {
            continue;
        }
        let add = m * gloss * hv.powf(k);
        let i = (y * w + x) * 3;
        for v in &mut data[i..i + 3] {
            *v = ((*v as f64 + add) as f32).clamp(0.0, 1.0);
        }
    }
    out
}

/// The highlight map blurred with the reflection kernel, evaluated on the
/// mask support.
pub(crate) fn reflection_bloom(highlight: &HighlightMap, mask: &ApplicationMask) -> Plane {
    let kernel = gaussian_kernel(REFLECTION_SIGMA);
    blur_plane_in_rect(highlight.plane(), &kernel, mask.support())
}

/// Adds a blurred copy of the highlight map (environment bloom) inside the mask.
pub fn reflection_pass(
    base: &ImageBuffer,
    highlight: &HighlightMap,
    mask: &ApplicationMask,
    params: &GraphicsParams,
) -> ImageBuffer {
    let mut out = base.clone();
    let intensity = params.reflection_intensity();
    if intensity == 0.0 {
        return out;
    }
    let support = mask.support();
    if support.is_empty() {
        return out;
    }
    let bloom = reflection_bloom(highlight, mask);
    let w = base.width();
    let data = out.data_mut();
    for (x, y) in rect_pixels(support) {
        let m = mask.get(x, y) as f64;
        let b = bloom.get(x, y) as f64;
        if m == 0.0 || b == 0.0 {
            continue;
        }
        let add = intensity * m * b;
        let i = (y * w + x) * 3;
        for v in &mut data[i..i + 3] {
            *v = ((*v as f64 + add) as f32).clamp(0.0, 1.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rasterize_mask;

    fn full_mask(w: usize, h: usize) -> ApplicationMask {
        let poly = vec![[0.0, 0.0], [w as f64, 0.0], [w as f64, h as f64], [0.0, h as f64]];
        rasterize_mask(&[poly], w, h, 0.0).unwrap()
    }

    fn params(o: f64, c: [u8; 3], g: f64, r: f64, e: f64) -> GraphicsParams {
        GraphicsParams::new(o, c, g, r, e).unwrap()
    }

    /// Brute-force quantile: full sort and linear interpolation.
    fn sorted_quantile(values: &[f32], q: f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let h = (v.len() - 1) as f64 * q;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(v.len() - 1);
        v[lo] as f64 + (h - lo as f64) * (v[hi] as f64 - v[lo] as f64)
    }

    #[test]
    fn quantile_matches_sort() {
        let vals: Vec<f32> = (0..101).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        for q in [0.0, 0.1, 0.5, 0.95, 0.999, 1.0] {
            assert_eq!(quantile(&mut vals.clone(), q), sorted_quantile(&vals, q));
        }
    }

    #[test]
    fn uniform_region_has_no_highlight() {
        let src = ImageBuffer::filled(12, 12, [0.6, 0.3, 0.3]);
        let h = estimate_highlight(&src, &full_mask(12, 12), 0.95);
        assert!(h.values().iter().all(|&v| v == 0.0));
        assert!(!h.degenerate);
    }

    #[test]
    fn single_bright_pixel_saturates() {
        let mut src = ImageBuffer::filled(10, 10, [0.2, 0.2, 0.2]);
        src.set(4, 4, [1.0, 1.0, 1.0]);
        let h = estimate_highlight(&src, &full_mask(10, 10), 0.9);
        assert_eq!(h.get(4, 4), 1.0);
        assert_eq!(h.get(0, 0), 0.0);
    }

    #[test]
    fn two_tone_matches_bruteforce() {
        let (w, hgt) = (20, 10);
        let src = ImageBuffer::from_fn(w, hgt, |x, _| if x < 10 { [0.3; 3] } else { [0.8; 3] });
        let mask = full_mask(w, hgt);
        let got = estimate_highlight(&src, &mask, 0.95);
        let lum: Vec<f32> = src.data().chunks(3).map(|p| luminance([p[0], p[1], p[2]])).collect();
        let q = sorted_quantile(&lum, 0.95);
        for (i, &l) in lum.iter().enumerate() {
            let expect = if q < 1.0 { ((l as f64 - q) / (1.0 - q)).clamp(0.0, 1.0) as f32 } else { 0.0 };
            assert_eq!(got.values()[i], expect);
        }
    }

    #[test]
    fn faint_mask_is_degenerate() {
        let src = ImageBuffer::filled(8, 8, [0.5; 3]);
        let mask = ApplicationMask::empty(8, 8);
        let h = estimate_highlight(&src, &mask, 0.95);
        assert!(h.degenerate);
        assert!(h.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_opacity_recolor_is_identity() {
        let src = ImageBuffer::from_fn(9, 9, |x, y| [x as f32 / 9.0, y as f32 / 9.0, 0.4]);
        let out = recolor(&src, &full_mask(9, 9), &params(0.0, [255, 0, 0], 0.0, 0.0, 0.0), 1.0);
        assert_eq!(out, src);
    }

    #[test]
    fn flat_gray_full_opacity_hits_target_color() {
        let src = ImageBuffer::filled(6, 6, [0.5; 3]);
        let out = recolor(&src, &full_mask(6, 6), &params(1.0, [255, 0, 0], 0.0, 0.0, 0.0), 1.0);
        assert!(out.data().chunks(3).all(|p| p == [1.0, 0.0, 0.0]));
    }

    #[test]
    fn recolor_matches_scalar_formula() {
        // 1 bright pixel + 15 dark pixels so that the mean luminance is 0.25
        let bright = [0.6f32, 0.4, 0.4];
        let lb = luminance(bright) as f64;
        let dark_l = (0.25 * 16.0 - lb) / 15.0;
        let dark = [dark_l as f32; 3];
        let src = ImageBuffer::from_fn(4, 4, |x, y| if (x, y) == (0, 0) { bright } else { dark });
        let mask = full_mask(4, 4);
        let out = recolor(&src, &mask, &params(0.5, [0, 0, 255], 0.0, 0.0, 0.0), 1.0);

        let lums: Vec<f64> = src.data().chunks(3).map(|p| luminance([p[0], p[1], p[2]]) as f64).collect();
        let mean = lums.iter().sum::<f64>() / 16.0;
        assert!((mean - 0.25).abs() < 1e-6);
        let s = (lb / mean).clamp(0.0, 2.0);
        let c = [0.0, 0.0, 1.0f64];
        for ch in 0..3 {
            let expect = 0.5 * bright[ch] as f64 + 0.5 * (c[ch] * s).clamp(0.0, 1.0);
            assert!((out.get(0, 0)[ch] as f64 - expect).abs() < 1e-6, "channel {ch}");
        }
    }

    #[test]
    fn gloss_pass_cases() {
        let base = ImageBuffer::filled(4, 4, [0.2; 3]);
        let mask = full_mask(4, 4);
        let ones = HighlightMap::from_values(4, 4, vec![1.0; 16]);
        assert_eq!(gloss_pass(&base, &ones, &mask, &params(0.5, [9, 9, 9], 0.0, 0.3, 0.0)), base);
        for rough in [0.0, 0.37, 1.0] {
            let out = gloss_pass(&base, &ones, &mask, &params(0.0, [0; 3], 0.5, rough, 0.0));
            assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        }
        let halves = HighlightMap::from_values(4, 4, vec![0.5; 16]);
        let out = gloss_pass(&base, &halves, &mask, &params(0.0, [0; 3], 1.0, 0.5, 0.0));
        let expect = 0.2f32 as f64 + 0.5f64.powi(17);
        assert!(out.data().iter().all(|&v| (v as f64 - expect).abs() < 1e-7));
    }

    #[test]
    fn reflection_pass_cases() {
        let base = ImageBuffer::filled(31, 31, [0.1; 3]);
        let mask = full_mask(31, 31);
        let zero = HighlightMap::from_values(31, 31, vec![0.0; 31 * 31]);
        assert_eq!(reflection_pass(&base, &zero, &mask, &params(0.0, [0; 3], 0.0, 0.0, 1.0)), base);
        let mut v = vec![0.0; 31 * 31];
        v[15 * 31 + 15] = 1.0;
        let spike = HighlightMap::from_values(31, 31, v);
        assert_eq!(reflection_pass(&base, &spike, &mask, &params(0.0, [0; 3], 0.0, 0.0, 0.0)), base);
        let out = reflection_pass(&base, &spike, &mask, &params(0.0, [0; 3], 0.0, 0.0, 0.6));
        // reference: 2D outer product of the normalized 1D kernel
        let radius = 12i64;
        let g: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / 32.0).exp()).collect();
        let norm: f64 = g.iter().sum();
        for y in 0..31i64 {
            for x in 0..31i64 {
                let (dx, dy) = (x - 15, y - 15);
                let k = if dx.abs() <= radius && dy.abs() <= radius {
                    g[(dx + radius) as usize] * g[(dy + radius) as usize] / (norm * norm)
                } else {
                    0.0
                };
                let got = out.get(x as usize, y as usize)[0] as f64 - 0.1f32 as f64;
                assert!((got - 0.6 * k).abs() < 1e-6, "({x},{y}) {got} vs {}", 0.6 * k);
            }
        }
    }
}
