//! Procedural portraits: a shaded skin field with textured lips and eyes,
//! plus matching polygon geometry. Good enough to train and test on when no
//! real photos are at hand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{point_in_polygon, FaceGeometry, Polygon};
use crate::image::ImageBuffer;

const LIGHT_SKIN: [f32; 3] = [0.95, 0.80, 0.70];
const DARK_SKIN: [f32; 3] = [0.38, 0.24, 0.17];
const CURVE_POINTS: usize = 24;

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    std::array::from_fn(|i| a[i] + (b[i] - a[i]) * t)
}

fn curve(n: usize, f: impl Fn(f64) -> [f64; 2]) -> Vec<[f64; 2]> {
    (0..=n).map(|i| f(-1.0 + 2.0 * i as f64 / n as f64)).collect()
}

struct LipShape {
    cx: f64,
    cy: f64,
    half_w: f64,
    upper_h: f64,
    lower_h: f64,
}

impl LipShape {
    fn top(&self, t: f64) -> f64 {
        let bow = 1.0 - 0.3 * (-(t / 0.18).powi(2)).exp();
        self.cy - self.upper_h * (1.0 - t * t).max(0.0).powf(0.7) * bow
    }

    fn seam(&self, t: f64) -> f64 {
        self.cy + 0.08 * self.upper_h * (1.0 - t * t)
    }

    fn bottom(&self, t: f64) -> f64 {
        self.cy + self.lower_h * (1.0 - t * t).max(0.0).powf(0.6)
    }

    fn polygons(&self) -> Vec<Polygon> {
        let x = |t: f64| self.cx + t * self.half_w;
        let mut upper = curve(CURVE_POINTS, |t| [x(t), self.top(t)]);
        let mut seam_back = curve(CURVE_POINTS, |t| [x(t), self.seam(t)]);
        seam_back.reverse();
        upper.extend(&seam_back[1..seam_back.len() - 1]);

        let mut lower = curve(CURVE_POINTS, |t| [x(t), self.seam(t)]);
        let mut bottom_back = curve(CURVE_POINTS, |t| [x(t), self.bottom(t)]);
        bottom_back.reverse();
        lower.extend(&bottom_back[1..bottom_back.len() - 1]);
        vec![upper, lower]
    }
}

/// Eye-shadow zone above one eye: between the upper lid and a higher arc.
fn lid_zone(cx: f64, cy: f64, half_w: f64, lid_h: f64, zone_h: f64) -> Polygon {
    let mut poly = curve(CURVE_POINTS, |t| [cx + t * half_w, cy - lid_h * (1.0 - t * t)]);
    let mut arc = curve(CURVE_POINTS, |t| {
        [cx + t * half_w * 1.15, cy - lid_h * (1.0 - t * t) - zone_h * (1.0 - t * t).sqrt()]
    });
    arc.reverse();
    poly.extend(&arc[1..arc.len() - 1]);
    poly
}

/// Builds a deterministic `size x size` portrait from `seed`.
pub fn synthetic_portrait(seed: u64, size: usize) -> (ImageBuffer, FaceGeometry) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut r = |lo: f64, hi: f64| rng.random_range(lo..hi);

    let tone = r(0.0, 1.0) as f32;
    let tint: [f32; 3] = [1.0 + r(-0.05, 0.05) as f32, 1.0 + r(-0.05, 0.05) as f32, 1.0 + r(-0.05, 0.05) as f32];
    let skin = {
        let base = lerp3(LIGHT_SKIN, DARK_SKIN, tone);
        std::array::from_fn::<f32, 3, _>(|i| base[i] * tint[i])
    };
    let light = (r(0.3, 0.7), r(0.2, 0.5));

    let lips = LipShape {
        cx: s * (0.5 + r(-0.04, 0.04)),
        cy: s * (0.72 + r(-0.03, 0.03)),
        half_w: s * (0.17 + r(-0.03, 0.03)),
        upper_h: s * (0.05 + r(-0.01, 0.015)),
        lower_h: s * (0.07 + r(-0.01, 0.02)),
    };
    let lip_tint = [0.80 + r(-0.06, 0.06) as f32, 0.52 + r(-0.08, 0.08) as f32, 0.55 + r(-0.08, 0.08) as f32];
    let lip_color: [f32; 3] = std::array::from_fn(|i| skin[i] * lip_tint[i]);
    let wrinkle_freq = r(0.8, 1.6);
    let wrinkle_phase = r(0.0, std::f64::consts::TAU);
    let gloss_spot = (
        lips.cx + lips.half_w * r(-0.35, 0.35),
        lips.cy + lips.lower_h * r(0.3, 0.6),
        lips.lower_h * r(0.3, 0.5),
        r(0.9, 1.2) as f32,
    );
    let upper_spot = (
        lips.cx + lips.half_w * r(-0.5, 0.5),
        lips.cy - lips.upper_h * 0.5,
        lips.upper_h * r(0.3, 0.45),
        r(0.5, 0.85) as f32,
    );

    let eye_y = s * (0.42 + r(-0.02, 0.02));
    let eye_dx = s * (0.17 + r(-0.015, 0.015));
    let eye_half_w = s * (0.085 + r(-0.01, 0.01));
    let eye_half_h = s * 0.03;
    let iris = [r(0.05, 0.35) as f32, r(0.05, 0.3) as f32, r(0.03, 0.25) as f32];
    let eye_centers = [lips.cx - eye_dx, lips.cx + eye_dx];

    let lip_polys = lips.polygons();
    let eye_polys: Vec<Polygon> = eye_centers
        .iter()
        .map(|&cx| lid_zone(cx, eye_y, eye_half_w, eye_half_h, s * 0.055))
        .collect();

    let noise_amp = 0.02f32;
    let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let img = ImageBuffer::from_fn(size, size, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (u, v) = (px / s, py / s);
        let shade = (1.05 - 0.35 * ((u - light.0).powi(2) + (v - light.1).powi(2))) as f32;
        let mut c: [f32; 3] = std::array::from_fn(|i| skin[i] * shade);

        let in_lips = lip_polys.iter().any(|p| point_in_polygon(p, px, py));
        if in_lips {
            let wrinkle = 0.92 + 0.08 * ((px * wrinkle_freq + wrinkle_phase).sin()) as f32;
            let fullness = (1.0 - 0.25 * ((px - lips.cx) / lips.half_w).powi(2)) as f32;
            c = std::array::from_fn(|i| lip_color[i] * shade * wrinkle * fullness);
            let d2 = (px - gloss_spot.0).powi(2) + (py - gloss_spot.1).powi(2);
            let spot = gloss_spot.3 * (-d2 / (2.0 * gloss_spot.2 * gloss_spot.2)).exp() as f32;
            let d2u = (px - upper_spot.0).powi(2) + (py - upper_spot.1).powi(2);
            let spot_u = upper_spot.3 * (-d2u / (2.0 * upper_spot.2 * upper_spot.2)).exp() as f32;
            let t = spot.max(spot_u).min(1.0);
            c = lerp3(c, [1.0; 3], t);
        }
        if (py - lips.seam((px - lips.cx) / lips.half_w)).abs() < 0.8 && (px - lips.cx).abs() < lips.half_w * 0.95 {
            c = std::array::from_fn(|i| lip_color[i] * 0.35);
        }
        for &ecx in &eye_centers {
            let (dx, dy) = ((px - ecx) / eye_half_w, (py - eye_y) / eye_half_h);
            if dx.abs() < 1.0 && dy.abs() < (1.0 - dx * dx) {
                c = [0.88, 0.86, 0.84];
                let dr = ((px - ecx).powi(2) + (py - eye_y).powi(2)).sqrt();
                if dr < eye_half_h * 0.95 {
                    c = iris;
                }
            }
        }
        std::array::from_fn(|i| c[i] + noise_amp * (noise.random::<f32>() - 0.5) * 2.0)
    });
    let geometry = FaceGeometry::new(size, size, lip_polys, eye_polys).expect("synthetic geometry inside frame");
    (img, geometry)
}
