//! Direct per-window evaluation of the MS-SSIM defining formulas, kept
//! independent of the library implementation.

#![allow(clippy::needless_range_loop)]

use makeup_core::ImageBuffer;

const WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn gray(img: &ImageBuffer) -> (usize, usize, Vec<f64>) {
    let mut v = Vec::new();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let [r, g, b] = img.get(x, y);
            v.push(0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64);
        }
    }
    (img.width(), img.height(), v)
}

fn window() -> Vec<Vec<f64>> {
    let mut w = vec![vec![0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *cell = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *cell;
        }
    }
    w.iter().map(|r| r.iter().map(|v| v / total).collect()).collect()
}

/// (mean ssim, mean cs) over all fully contained windows.
fn scale_terms(w: usize, h: usize, a: &[f64], b: &[f64]) -> (f64, f64) {
    let win = window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut ssim, mut cs, mut n) = (0.0, 0.0, 0.0);
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = (y0 + i) * w + x0 + j;
                    ma += win[i][j] * a[k];
                    mb += win[i][j] * b[k];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = (y0 + i) * w + x0 + j;
                    va += win[i][j] * (a[k] - ma) * (a[k] - ma);
                    vb += win[i][j] * (b[k] - mb) * (b[k] - mb);
                    cov += win[i][j] * (a[k] - ma) * (b[k] - mb);
                }
            }
            let c = (2.0 * cov + c2) / (va + vb + c2);
            cs += c;
            ssim += c * (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            n += 1.0;
        }
    }
    (ssim / n, cs / n)
}

fn halve(w: usize, h: usize, v: &[f64]) -> (usize, usize, Vec<f64>) {
    let (nw, nh) = (w / 2, h / 2);
    let mut out = vec![0.0; nw * nh];
    for y in 0..nh {
        for x in 0..nw {
            out[y * nw + x] = (v[2 * y * w + 2 * x] + v[2 * y * w + 2 * x + 1] + v[(2 * y + 1) * w + 2 * x] + v[(2 * y + 1) * w + 2 * x + 1]) / 4.0;
        }
    }
    (nw, nh, out)
}

pub fn reference(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let (mut w, mut h, mut ga) = gray(a);
    let (_, _, mut gb) = gray(b);
    let mut levels = 0;
    while levels < 5 && w.min(h) >= 11 << levels {
        levels += 1;
    }
    let total: f64 = WEIGHTS[..levels].iter().sum();
    let mut out = 1.0;
    for l in 0..levels {
        let (s, c) = scale_terms(w, h, &ga, &gb);
        let term: f64 = if l == levels - 1 { s } else { c };
        out *= term.max(0.0).powf(WEIGHTS[l] / total);
        let (nw, nh, na) = halve(w, h, &ga);
        gb = halve(w, h, &gb).2;
        (w, h, ga) = (nw, nh, na);
    }
    out
}

