//! Derivative-free material recovery by direct search against the renderer.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{DMatrix, Matrix5, Vector5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ApplicationMask, FaceGeometry, Target, DEFAULT_FEATHER_SIGMA};
use crate::image::{luminance, ImageBuffer};
use crate::params::{GraphicsParams, NormalizedParams, PARAM_DIM, PARAM_NAMES};
use crate::renderer::{
    estimate_highlight, gloss_pass, mean_core_luminance, recolor, reflection_bloom, reflection_pass, target_mask,
    HighlightMap, HIGHLIGHT_QUANTILE, MAX_SHADING,
};

pub const DEFAULT_MAX_EVALS: usize = 2000;
pub const DEFAULT_SIMPLEX_SCALE: f64 = 0.25;
pub const DEFAULT_TOLERANCE: f64 = 1e-7;
/// Objective change below which a component counts as unidentifiable.
pub const IDENTIFIABILITY_EPS: f64 = 1e-9;
const PROBE_STEP: f64 = 0.05;
/// Simplex diameter at which a run counts as collapsed and is restarted.
const MIN_SIMPLEX: f64 = 1e-6;
const POLISH_STEP: f64 = 0.02;
const POLISH_MIN_STEP: f64 = 1e-3;
const GLOSS_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
const ROTATION_STREAM: u64 = 0x005e_ed0f_0a11;
const RESTART_SCALES: [f64; 4] = [1.0, 0.4, 0.2, 0.08];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    NelderMead,
    CoordinateSearch,
}

impl FromStr for SearchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nelder_mead" | "nelder-mead" => Ok(SearchMethod::NelderMead),
            "coordinate_search" | "coordinate-search" => Ok(SearchMethod::CoordinateSearch),
            other => Err(Error::InvalidArgument(format!("unknown search method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub method: SearchMethod,
    pub max_evals: usize,
    pub simplex_scale: f64,
    /// Objective value at or below which the search stops as converged.
    pub tolerance: f64,
    pub seed: u64,
    /// Starting point. When absent the search starts from a least-squares
    /// fit of the linear part of the renderer (if `warm_start`), else from
    /// the cube center plus a seeded jitter.
    pub initial: Option<NormalizedParams>,
    pub warm_start: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            method: SearchMethod::NelderMead,
            max_evals: DEFAULT_MAX_EVALS,
            simplex_scale: DEFAULT_SIMPLEX_SCALE,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            initial: None,
            warm_start: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_evals == 0 {
            return Err(Error::InvalidArgument("evaluation budget must be positive".into()));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::InvalidArgument(format!("tolerance {} must be positive", self.tolerance)));
        }
        if !(self.simplex_scale > 0.0 && self.simplex_scale <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "simplex scale {} must lie in (0, 1]",
                self.simplex_scale
            )));
        }
        Ok(())
    }

    fn start(&self) -> [f64; PARAM_DIM] {
        match self.initial {
            Some(v) => *v.values(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                std::array::from_fn(|_| 0.5 + rng.random_range(-0.1..0.1))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub params: GraphicsParams,
    pub normalized: NormalizedParams,
    pub residual: f64,
    pub initial_residual: f64,
    pub evaluations: usize,
    pub converged: bool,
    /// Indices (in normalized order) whose perturbation leaves the objective
    /// unchanged at the optimum.
    pub unidentifiable: Vec<usize>,
}

impl OracleResult {
    pub fn unidentifiable_names(&self) -> Vec<&'static str> {
        self.unidentifiable.iter().map(|&i| PARAM_NAMES[i]).collect()
    }
}

/// Mean absolute masked difference between a render and a fixed target.
/// The highlight map only depends on the source, so it is computed once.
pub struct Objective<'a> {
    source: &'a ImageBuffer,
    target_image: &'a ImageBuffer,
    mask: ApplicationMask,
    highlight: HighlightMap,
    pixels: Vec<usize>,
    evaluations: usize,
}

impl<'a> Objective<'a> {
    pub fn new(
        source: &'a ImageBuffer,
        geometry: &FaceGeometry,
        target_image: &'a ImageBuffer,
        target: Target,
    ) -> Result<Self> {
        geometry.check_matches(source)?;
        source.same_size(target_image)?;
        let mask = target_mask(geometry, target, DEFAULT_FEATHER_SIGMA)?;
        let pixels: Vec<usize> = mask
            .weights()
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, _)| i)
            .collect();
        if pixels.is_empty() {
            return Err(Error::NoRegion);
        }
        let highlight = estimate_highlight(source, &mask, HIGHLIGHT_QUANTILE);
        Ok(Self {
            source,
            target_image,
            mask,
            highlight,
            pixels,
            evaluations: 0,
        })
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    /// Objective at a point of the unit cube (clamped componentwise).
    pub fn eval(&mut self, v: &[f64; PARAM_DIM]) -> f64 {
        self.evaluations += 1;
        let params = NormalizedParams::clamped(*v).denormalize();
        self.eval_params(&params)
    }

    fn eval_params(&self, params: &GraphicsParams) -> f64 {
        let colored = recolor(self.source, &self.mask, params, 1.0);
        let glossy = gloss_pass(&colored, &self.highlight, &self.mask, params);
        let out = reflection_pass(&glossy, &self.highlight, &self.mask, params);
        let (a, b) = (out.data(), self.target_image.data());
        let total: f64 = self
            .pixels
            .iter()
            .map(|&i| (0..3).map(|c| (a[3 * i + c] - b[3 * i + c]).abs() as f64).sum::<f64>())
            .sum();
        total / (3 * self.pixels.len()) as f64
    }
}

fn axis_basis() -> [[f64; PARAM_DIM]; PARAM_DIM] {
    std::array::from_fn(|i| std::array::from_fn(|j| if i == j { 1.0 } else { 0.0 }))
}

/// Orthonormal directions from the QR factor of a Gaussian matrix.
fn random_basis(rng: &mut ChaCha8Rng) -> [[f64; PARAM_DIM]; PARAM_DIM] {
    let g = DMatrix::<f64>::from_fn(PARAM_DIM, PARAM_DIM, |_, _| rng.sample(StandardNormal));
    let q = g.qr().q();
    std::array::from_fn(|i| std::array::from_fn(|j| q[(j, i)]))
}

/// Shading factor used by the recolor pass.
fn shading(src: [f32; 3], mean_l: Option<f64>) -> f64 {
    match mean_l {
        Some(mean) => (luminance(src) as f64 / mean).clamp(0.0, MAX_SHADING),
        None => 1.0,
    }
}

impl Objective<'_> {
    /// Away from highlights and clamping, each channel of the render obeys
    /// `out - src = (a c) m s - a m src + r m B`, which is linear in
    /// `(a c_r, a c_g, a c_b, a, r)`. Fits those five unknowns by least
    /// squares and returns the implied opacity, color and reflection.
    fn linear_guess(&self) -> Option<(f64, [f64; 3], f64)> {
        let mean_l = mean_core_luminance(self.source, &self.mask);
        let bloom = reflection_bloom(&self.highlight, &self.mask);
        let w = self.source.width();
        let mut ata = Matrix5::<f64>::zeros();
        let mut atb = Vector5::<f64>::zeros();
        let mut rows = 0usize;
        for &i in &self.pixels {
            let (x, y) = (i % w, i / w);
            if self.highlight.get(x, y) != 0.0 {
                continue;
            }
            let src = self.source.get(x, y);
            let s = shading(src, mean_l);
            if s > 1.0 {
                continue;
            }
            let t = self.target_image.get(x, y);
            if t.iter().any(|&v| v <= 0.0 || v >= 1.0) {
                continue;
            }
            let m = self.mask.get(x, y) as f64;
            let b = bloom.get(x, y) as f64;
            for ch in 0..3 {
                let mut row = Vector5::<f64>::zeros();
                row[ch] = m * s;
                row[3] = -m * src[ch] as f64;
                row[4] = m * b;
                let rhs = (t[ch] - src[ch]) as f64;
                ata += row * row.transpose();
                atb += row * rhs;
                rows += 1;
            }
        }
        if rows < 5 {
            return None;
        }
        let theta = ata.try_inverse()? * atb;
        if theta.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let alpha = theta[3].clamp(0.0, 1.0);
        let color = std::array::from_fn(|c| if alpha > 1e-3 { (theta[c] / alpha).clamp(0.0, 1.0) } else { 0.5 });
        Some((alpha, color, theta[4].clamp(0.0, 1.0)))
    }
}

fn clamp01(v: [f64; PARAM_DIM]) -> [f64; PARAM_DIM] {
    v.map(|x| x.clamp(0.0, 1.0))
}

struct Search<'o, 'a> {
    f: &'o mut Objective<'a>,
    budget: usize,
    tolerance: f64,
    best: ([f64; PARAM_DIM], f64),
}

impl Search<'_, '_> {
    fn exhausted(&self) -> bool {
        self.f.evaluations() >= self.budget || self.best.1 <= self.tolerance
    }

    fn eval(&mut self, v: [f64; PARAM_DIM]) -> ([f64; PARAM_DIM], f64) {
        let v = clamp01(v);
        if self.f.evaluations() >= self.budget {
            return (v, f64::INFINITY);
        }
        let y = self.f.eval(&v);
        if y < self.best.1 {
            self.best = (v, y);
        }
        (v, y)
    }

    /// One Nelder-Mead run from `x0` until the simplex collapses or the
    /// budget runs out.
    fn nelder_mead(&mut self, (x0, y0): ([f64; PARAM_DIM], f64), scale: f64, basis: &[[f64; PARAM_DIM]; PARAM_DIM]) {
        let mut simplex: Vec<([f64; PARAM_DIM], f64)> = Vec::with_capacity(PARAM_DIM + 1);
        simplex.push((x0, y0));
        for dir in basis {
            if self.exhausted() {
                return;
            }
            // step the other way when the vertex would leave the cube
            let inside = dir.iter().zip(&x0).all(|(d, x)| (0.0..=1.0).contains(&(x + scale * d)));
            let sign = if inside { scale } else { -scale };
            simplex.push(self.eval(std::array::from_fn(|j| x0[j] + sign * dir[j])));
        }
        while !self.exhausted() {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let diameter = simplex[1..]
                .iter()
                .map(|(v, _)| v.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if diameter < MIN_SIMPLEX || simplex[PARAM_DIM].1 - simplex[0].1 <= self.tolerance * 1e-3 {
                return;
            }
            let worst = simplex[PARAM_DIM];
            let centroid: [f64; PARAM_DIM] =
                std::array::from_fn(|j| simplex[..PARAM_DIM].iter().map(|(v, _)| v[j]).sum::<f64>() / PARAM_DIM as f64);
            let toward = |t: f64| -> [f64; PARAM_DIM] { std::array::from_fn(|j| centroid[j] + t * (worst.0[j] - centroid[j])) };
            let reflected = self.eval(toward(-1.0));
            if reflected.1 < simplex[0].1 {
                let expanded = self.eval(toward(-2.0));
                simplex[PARAM_DIM] = if expanded.1 < reflected.1 { expanded } else { reflected };
                continue;
            }
            if reflected.1 < simplex[PARAM_DIM - 1].1 {
                simplex[PARAM_DIM] = reflected;
                continue;
            }
            let contracted = if reflected.1 < worst.1 {
                self.eval(toward(-0.5))
            } else {
                self.eval(toward(0.5))
            };
            if contracted.1 < worst.1.min(reflected.1) {
                simplex[PARAM_DIM] = contracted;
                continue;
            }
            let b = simplex[0].0;
            for vertex in simplex.iter_mut().skip(1) {
                if self.exhausted() {
                    return;
                }
                let v = std::array::from_fn(|j| b[j] + 0.5 * (vertex.0[j] - b[j]));
                *vertex = self.eval(v);
            }
        }
    }

    /// Compass search along the axes with step halving.
    fn coordinate_search(&mut self, scale: f64) {
        self.compass(scale, MIN_SIMPLEX);
    }

    fn compass(&mut self, scale: f64, min_step: f64) {
        let mut step = scale;
        while !self.exhausted() && step >= min_step {
            let mut improved = false;
            for i in 0..PARAM_DIM {
                for dir in [1.0, -1.0] {
                    if self.exhausted() {
                        return;
                    }
                    let (x, y) = self.best;
                    let mut v = x;
                    v[i] = (v[i] + dir * step).clamp(0.0, 1.0);
                    if v[i] == x[i] {
                        continue;
                    }
                    if self.eval(v).1 < y {
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
    }
}

/// Minimizes the masked render difference over the unit cube. Nelder-Mead
/// restarts from the incumbent with a halved simplex whenever a run collapses.
pub fn search(objective: &mut Objective<'_>, config: &SearchConfig) -> Result<OracleResult> {
    config.validate()?;
    let guess = match config.initial {
        None if config.warm_start => objective.linear_guess(),
        _ => None,
    };
    let x0 = match guess {
        Some((alpha, color, refl)) => [alpha, color[0], color[1], color[2], 0.5, 0.5, refl],
        None => clamp01(config.start()),
    };
    let y0 = objective.eval(&x0);
    let mut s = Search {
        f: objective,
        budget: config.max_evals,
        tolerance: config.tolerance,
        best: (x0, y0),
    };
    if guess.is_some() {
        // coarse grid over the two specular components
        for g in GLOSS_GRID {
            for r in GLOSS_GRID {
                if s.exhausted() {
                    break;
                }
                let mut v = x0;
                (v[4], v[5]) = (g, r);
                s.eval(v);
            }
        }
    }
    match config.method {
        SearchMethod::NelderMead => {
            // restarts cycle through shrinking simplex sizes; every restart
            // after the first uses a randomly rotated simplex
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ ROTATION_STREAM);
            for k in 0.. {
                if s.exhausted() {
                    break;
                }
                let before = s.f.evaluations();
                let scale = config.simplex_scale * RESTART_SCALES[k % RESTART_SCALES.len()];
                let basis = if k == 0 { axis_basis() } else { random_basis(&mut rng) };
                s.nelder_mead(s.best, scale, &basis);
                s.compass(POLISH_STEP, POLISH_MIN_STEP);
                if s.f.evaluations() == before {
                    break;
                }
            }
        }
        SearchMethod::CoordinateSearch => s.coordinate_search(config.simplex_scale),
    }
    let (best, residual) = s.best;
    let evaluations = objective.evaluations();
    let unidentifiable = (0..PARAM_DIM)
        .filter(|&i| {
            [PROBE_STEP, -PROBE_STEP].iter().all(|d| {
                let mut v = best;
                v[i] = (v[i] + d).clamp(0.0, 1.0);
                let p = NormalizedParams::clamped(v).denormalize();
                (objective.eval_params(&p) - residual).abs() < IDENTIFIABILITY_EPS
            })
        })
        .collect();
    let normalized = NormalizedParams::clamped(best);
    Ok(OracleResult {
        params: normalized.denormalize(),
        normalized,
        residual,
        initial_residual: y0,
        evaluations,
        converged: residual <= config.tolerance,
        unidentifiable,
    })
}

/// Recovers the material that turns `source` into `target_image`.
pub fn oracle_estimate(
    source: &ImageBuffer,
    geometry: &FaceGeometry,
    target_image: &ImageBuffer,
    target: Target,
    config: &SearchConfig,
) -> Result<OracleResult> {
    let mut objective = Objective::new(source, geometry, target_image, target)?;
    search(&mut objective, config)
}

/// One synthetic recovery problem with known ground truth.
#[derive(Debug, Clone)]
pub struct OracleInstance {
    pub id: String,
    pub source: ImageBuffer,
    pub geometry: FaceGeometry,
    pub target: Target,
    pub truth: GraphicsParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRecord {
    pub id: String,
    pub truth: GraphicsParams,
    pub result: OracleResult,
}

/// `count` problems on procedural portraits with uniformly drawn materials
/// whose opacity is rescaled into `[min_opacity, 1]`.
pub fn synthetic_instances(seed: u64, count: usize, size: usize, target: Target, min_opacity: f64) -> Result<Vec<OracleInstance>> {
    if !(0.0..=1.0).contains(&min_opacity) {
        return Err(Error::InvalidArgument(format!("minimum opacity {min_opacity} outside [0, 1]")));
    }
    let truths = crate::params::sample_params(&crate::params::ParamDistribution::uniform(), count, seed)?;
    crate::datagen::synthetic_portraits(seed, count, size)
        .into_iter()
        .zip(truths)
        .enumerate()
        .map(|(i, (p, t))| {
            Ok(OracleInstance {
                id: format!("{i:03}"),
                source: p.image,
                geometry: p.geometry,
                target,
                truth: t.with_opacity(min_opacity + (1.0 - min_opacity) * t.opacity())?,
            })
        })
        .collect()
}

/// Runs every instance (in parallel); instance `i` searches with seed
/// `config.seed + i`.
pub fn oracle_batch(instances: &[OracleInstance], config: &SearchConfig) -> Result<Vec<OracleRecord>> {
    instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let rendered = crate::renderer::render_image(
                &inst.source,
                &inst.geometry,
                &inst.truth,
                &crate::renderer::RenderOptions::new(inst.target),
            )?;
            let cfg = SearchConfig {
                seed: config.seed.wrapping_add(i as u64),
                ..config.clone()
            };
            let result = oracle_estimate(&inst.source, &inst.geometry, &rendered, inst.target, &cfg)?;
            Ok(OracleRecord {
                id: inst.id.clone(),
                truth: inst.truth,
                result,
            })
        })
        .collect()
}

fn params_fields(p: &GraphicsParams) -> String {
    let [r, g, b] = p.color();
    format!(
        "{:.6}\t{r}\t{g}\t{b}\t{:.6}\t{:.6}\t{:.6}",
        p.opacity(),
        p.gloss_amount(),
        p.gloss_roughness(),
        p.reflection_intensity()
    )
}

/// Tab-separated batch report with a header row.
pub fn batch_report_tsv(records: &[OracleRecord]) -> String {
    let mut s = String::from("id");
    for prefix in ["true", "est"] {
        for name in PARAM_NAMES {
            let _ = write!(s, "\t{prefix}_{name}");
        }
    }
    s.push_str("\tresidual\tevaluations\tconverged\tunidentifiable\n");
    for r in records {
        let names = r.result.unidentifiable_names().join(",");
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{:.9}\t{}\t{}\t{}",
            r.id,
            params_fields(&r.truth),
            params_fields(&r.result.params),
            r.result.residual,
            r.result.evaluations,
            r.result.converged,
            if names.is_empty() { "-" } else { &names }
        );
    }
    s
}
