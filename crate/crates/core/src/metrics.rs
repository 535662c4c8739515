//! Image similarity metrics and the evaluation protocols built on them.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{render_crop, Dataset, Portrait};
use crate::encoder::{estimate, ParamEstimator};
use crate::error::{Error, Result};
use crate::geometry::{FaceGeometry, Target};
use crate::image::{luminance, ImageBuffer};
use crate::params::{PARAM_DIM, PARAM_NAMES};
use crate::renderer::{render_image, RenderOptions};

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean absolute difference over all pixels and channels.
pub fn l1(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.same_size(b)?;
    let total: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum();
    Ok(total / a.data().len() as f64)
}

/// Number of dyadic scales usable for an image whose short side is `min_side`.
pub fn ms_ssim_scales(min_side: usize) -> usize {
    let mut n = 0;
    while n < MS_SSIM_WEIGHTS.len() && min_side >= SSIM_WINDOW << n {
        n += 1;
    }
    n
}

#[derive(Clone)]
struct Gray {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Gray {
    fn luma(img: &ImageBuffer) -> Self {
        Self {
            w: img.width(),
            h: img.height(),
            v: img.data().chunks_exact(3).map(|p| luminance([p[0], p[1], p[2]]) as f64).collect(),
        }
    }

    fn downsample(&self) -> Self {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let at = |dx: usize, dy: usize| self.v[(2 * y + dy) * self.w + 2 * x + dx];
                v.push((at(0, 0) + at(1, 0) + at(0, 1) + at(1, 1)) / 4.0);
            }
        }
        Self { w, h, v }
    }

    /// Separable "valid" correlation with a 1D kernel on both axes.
    fn filter(&self, k: &[f64]) -> Self {
        let n = k.len();
        let (ow, oh) = (self.w + 1 - n, self.h + 1 - n);
        let mut rows = vec![0.0; ow * self.h];
        for y in 0..self.h {
            let src = &self.v[y * self.w..(y + 1) * self.w];
            for x in 0..ow {
                rows[y * ow + x] = k.iter().zip(&src[x..x + n]).map(|(a, b)| a * b).sum();
            }
        }
        let mut v = vec![0.0; ow * oh];
        for y in 0..oh {
            for x in 0..ow {
                v[y * ow + x] = k.iter().enumerate().map(|(i, a)| a * rows[(y + i) * ow + x]).sum();
            }
        }
        Self { w: ow, h: oh, v }
    }

    fn mul(&self, o: &Self) -> Self {
        Self {
            w: self.w,
            h: self.h,
            v: self.v.iter().zip(&o.v).map(|(a, b)| a * b).collect(),
        }
    }
}

fn window_1d() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_terms(a: &Gray, b: &Gray, k: &[f64]) -> (f64, f64) {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (mu_a, mu_b) = (a.filter(k), b.filter(k));
    let (aa, bb, ab) = (a.mul(a).filter(k), b.mul(b).filter(k), a.mul(b).filter(k));
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.v.len() {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = aa.v[i] - ma * ma;
        let vb = bb.v[i] - mb * mb;
        let cov = ab.v[i] - ma * mb;
        let cs_i = (2.0 * cov + c2) / (va + vb + c2);
        cs += cs_i;
        ssim += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1) * cs_i;
    }
    let n = mu_a.v.len() as f64;
    (ssim / n, cs / n)
}

/// Multi-scale SSIM on luminance. Scales that do not fit the image are
/// dropped and the remaining weights renormalized; negative per-scale terms
/// are clamped to zero before exponentiation.
pub fn ms_ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.same_size(b)?;
    let scales = ms_ssim_scales(a.width().min(a.height()));
    if scales == 0 {
        return Err(Error::ImageTooSmall {
            width: a.width(),
            height: a.height(),
        });
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let total: f64 = weights.iter().sum();
    let k = window_1d();
    let (mut ga, mut gb) = (Gray::luma(a), Gray::luma(b));
    let mut value = 1.0;
    for (j, w) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&ga, &gb, &k);
        let term = if j + 1 == scales { ssim } else { cs };
        value *= term.max(0.0).powf(w / total);
        if j + 1 < scales {
            ga = ga.downsample();
            gb = gb.downsample();
        }
    }
    Ok(value)
}

/// Reference photo, source photo and the expected result of transferring
/// the reference makeup onto the source.
#[derive(Debug, Clone)]
pub struct TripletRecord {
    pub id: String,
    pub reference: ImageBuffer,
    pub reference_geometry: FaceGeometry,
    pub source: ImageBuffer,
    pub source_geometry: FaceGeometry,
    pub ground_truth: ImageBuffer,
}

/// Paths of one triplet as listed in a triplet file.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletPaths {
    pub reference: PathBuf,
    pub reference_geometry: PathBuf,
    pub source: PathBuf,
    pub source_geometry: PathBuf,
    pub ground_truth: PathBuf,
}

impl TripletPaths {
    pub fn load(&self, id: String) -> Result<TripletRecord> {
        let rec = TripletRecord {
            id,
            reference: ImageBuffer::load_png(&self.reference)?,
            reference_geometry: FaceGeometry::load(&self.reference_geometry)?,
            source: ImageBuffer::load_png(&self.source)?,
            source_geometry: FaceGeometry::load(&self.source_geometry)?,
            ground_truth: ImageBuffer::load_png(&self.ground_truth)?,
        };
        rec.source.same_size(&rec.ground_truth)?;
        Ok(rec)
    }
}

/// Parses a triplet list: one record per line with five whitespace-separated
/// paths `reference reference_geometry source source_geometry ground_truth`.
/// Blank lines and `#` comments are skipped; relative paths resolve against
/// `base`.
pub fn parse_triplet_list(text: &str, base: &Path) -> Result<Vec<TripletPaths>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<PathBuf> = line.split_whitespace().map(|f| base.join(f)).collect();
        let [reference, reference_geometry, source, source_geometry, ground_truth]: [PathBuf; 5] =
            fields.try_into().map_err(|f: Vec<PathBuf>| {
                Error::InvalidArgument(format!("triplet list line {}: expected 5 paths, found {}", n + 1, f.len()))
            })?;
        out.push(TripletPaths {
            reference,
            reference_geometry,
            source,
            source_geometry,
            ground_truth,
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("triplet list is empty".into()));
    }
    Ok(out)
}

pub fn load_triplet_list(path: impl AsRef<Path>) -> Result<Vec<TripletPaths>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triplet_list(&text, path.parent().unwrap_or(Path::new("")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub id: String,
    pub l1: f64,
    pub one_minus_msssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: Vec<InstanceMetrics>,
    /// Instances whose estimate or render failed, with the reason.
    pub failed: Vec<(String, String)>,
    pub mean_l1: f64,
    pub mean_one_minus_msssim: f64,
}

impl EvalReport {
    pub fn from_instances(instances: Vec<InstanceMetrics>, failed: Vec<(String, String)>) -> Self {
        let n = instances.len().max(1) as f64;
        let mean_l1 = instances.iter().map(|i| i.l1).sum::<f64>() / n;
        let mean_one_minus_msssim = instances.iter().map(|i| i.one_minus_msssim).sum::<f64>() / n;
        Self {
            instances,
            failed,
            mean_l1,
            mean_one_minus_msssim,
        }
    }

    /// Tab-separated rows with a `#` header note and summary footer.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# metrics computed over full images\nid\tl1\tone_minus_msssim\n");
        for i in &self.instances {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}", i.id, i.l1, i.one_minus_msssim);
        }
        for (id, why) in &self.failed {
            let _ = writeln!(s, "# failed {id}: {why}");
        }
        let _ = writeln!(
            s,
            "# summary\tinstances={}\tfailed={}\tmean_l1={:.6}\tmean_one_minus_msssim={:.6}",
            self.instances.len(),
            self.failed.len(),
            self.mean_l1,
            self.mean_one_minus_msssim
        );
        s
    }
}

/// Estimates each reference, renders the estimate on the source and scores
/// it against the ground truth.
pub fn evaluate_triplets<M: ParamEstimator + Sync>(triplets: &[TripletRecord], model: &M, target: Target) -> Result<EvalReport> {
    if triplets.is_empty() {
        return Err(Error::InvalidArgument("no triplets".into()));
    }
    let results: Vec<std::result::Result<InstanceMetrics, (String, String)>> = triplets
        .par_iter()
        .map(|t| {
            let run = || -> Result<InstanceMetrics> {
                let g = estimate(model, &t.reference, &t.reference_geometry, target)?;
                let out = render_image(&t.source, &t.source_geometry, &g, &RenderOptions::new(target))?;
                Ok(InstanceMetrics {
                    id: t.id.clone(),
                    l1: l1(&out, &t.ground_truth)?,
                    one_minus_msssim: 1.0 - ms_ssim(&out, &t.ground_truth)?,
                })
            };
            run().map_err(|e| (t.id.clone(), e.to_string()))
        })
        .collect();
    let (mut ok, mut failed) = (Vec::new(), Vec::new());
    for r in results {
        match r {
            Ok(m) => ok.push(m),
            Err(f) => failed.push(f),
        }
    }
    Ok(EvalReport::from_instances(ok, failed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub count: usize,
    pub mae_per_component: [f64; PARAM_DIM],
    pub mean_mae: f64,
    /// Mean L1 between region crops rendered with the true and the estimated
    /// material on each record's source portrait.
    pub roundtrip_l1: f64,
}

impl RecoveryReport {
    pub fn color_mae_max(&self) -> f64 {
        self.mae_per_component[1..4].iter().cloned().fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("component\tmae\n");
        for (name, v) in PARAM_NAMES.iter().zip(self.mae_per_component) {
            let _ = writeln!(s, "{name}\t{v:.6}");
        }
        let _ = writeln!(s, "# summary\tcount={}\tmean_mae={:.6}\troundtrip_l1={:.6}", self.count, self.mean_mae, self.roundtrip_l1);
        s
    }
}

/// Parameter recovery of `model` on a labelled dataset. `portraits` must
/// contain every source portrait referenced by the records.
pub fn evaluate_recovery<M: ParamEstimator + Sync>(dataset: &Dataset, portraits: &[Portrait], model: &M) -> Result<RecoveryReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if model.input_size() != dataset.manifest.crop_size {
        return Err(Error::DimensionMismatch {
            expected_width: model.input_size(),
            expected_height: model.input_size(),
            width: dataset.manifest.crop_size,
            height: dataset.manifest.crop_size,
        });
    }
    let by_id: HashMap<&str, &Portrait> = portraits.iter().map(|p| (p.id.as_str(), p)).collect();
    let target = dataset.manifest.target;
    let crop_size = dataset.manifest.crop_size;
    let rows: Vec<([f64; PARAM_DIM], f64)> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let rec = &dataset.manifest.records[i];
            let pred = model.predict(&dataset.crops[i])?;
            let err = std::array::from_fn(|c| (pred.values()[c] - rec.label.values()[c]).abs());
            let portrait = by_id
                .get(rec.source_id.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("unknown source portrait `{}`", rec.source_id)))?;
            let truth = render_crop(portrait, &rec.label.denormalize(), target, crop_size)?;
            let est = render_crop(portrait, &pred.denormalize(), target, crop_size)?;
            Ok((err, l1(&truth, &est)?))
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let mut mae = [0.0; PARAM_DIM];
    let mut rt = 0.0;
    for (e, r) in &rows {
        for c in 0..PARAM_DIM {
            mae[c] += e[c];
        }
        rt += r;
    }
    let mae = mae.map(|v| v / n);
    Ok(RecoveryReport {
        count: rows.len(),
        mae_per_component: mae,
        mean_mae: mae.iter().sum::<f64>() / PARAM_DIM as f64,
        roundtrip_l1: rt / n,
    })
}
