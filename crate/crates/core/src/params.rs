//! Graphics-parameter schema: the seven-component material vector driving the
//! renderer, its unit-hypercube normalization, and the expert/uniform mixture
//! used to sample training labels.

use nalgebra::{SMatrix, SVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of graphics parameters.
pub const PARAM_DIM: usize = 7;

/// Cap used to map the unbounded gloss amount onto [0, 1].
pub const GLOSS_MAX: f64 = 2.0;

/// Default probability of drawing from the uniform component.
pub const DEFAULT_UNIFORM_WEIGHT: f64 = 0.5;

/// Ridge added to fitted covariances.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

/// Component names in wire order.
pub const PARAM_NAMES: [&str; PARAM_DIM] = [
    "opacity",
    "color_r",
    "color_g",
    "color_b",
    "gloss_amount",
    "gloss_roughness",
    "reflection_intensity",
];

type Vec7 = SVector<f64, PARAM_DIM>;
type Mat7 = SMatrix<f64, PARAM_DIM, PARAM_DIM>;

/// Makeup material parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct GraphicsParams {
    opacity: f64,
    color: [u8; 3],
    gloss_amount: f64,
    gloss_roughness: f64,
    reflection_intensity: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    opacity: f64,
    color_r: f64,
    color_g: f64,
    color_b: f64,
    gloss_amount: f64,
    gloss_roughness: f64,
    reflection_intensity: f64,
}

impl TryFrom<RawParams> for GraphicsParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        let channel = |name: &'static str, v: f64| -> Result<u8> {
            if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                return Err(Error::ParamOutOfRange {
                    name,
                    value: v,
                    range: "integers 0..=255",
                });
            }
            Ok(v as u8)
        };
        GraphicsParams::new(
            raw.opacity,
            [
                channel("color_r", raw.color_r)?,
                channel("color_g", raw.color_g)?,
                channel("color_b", raw.color_b)?,
            ],
            raw.gloss_amount,
            raw.gloss_roughness,
            raw.reflection_intensity,
        )
    }
}

impl From<GraphicsParams> for RawParams {
    fn from(p: GraphicsParams) -> Self {
        RawParams {
            opacity: p.opacity,
            color_r: p.color[0] as f64,
            color_g: p.color[1] as f64,
            color_b: p.color[2] as f64,
            gloss_amount: p.gloss_amount,
            gloss_roughness: p.gloss_roughness,
            reflection_intensity: p.reflection_intensity,
        }
    }
}

fn check_unit(name: &'static str, v: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(Error::ParamOutOfRange {
            name,
            value: v,
            range: "[0, 1]",
        })
    }
}

impl GraphicsParams {
    pub fn new(
        opacity: f64,
        color: [u8; 3],
        gloss_amount: f64,
        gloss_roughness: f64,
        reflection_intensity: f64,
    ) -> Result<Self> {
        if !(gloss_amount >= 0.0 && gloss_amount.is_finite()) {
            return Err(Error::ParamOutOfRange {
                name: "gloss_amount",
                value: gloss_amount,
                range: "[0, +inf)",
            });
        }
        Ok(Self {
            opacity: check_unit("opacity", opacity)?,
            color,
            gloss_amount,
            gloss_roughness: check_unit("gloss_roughness", gloss_roughness)?,
            reflection_intensity: check_unit("reflection_intensity", reflection_intensity)?,
        })
    }

    /// All-zero parameters: renders as the identity.
    pub fn zero() -> Self {
        Self {
            opacity: 0.0,
            color: [0, 0, 0],
            gloss_amount: 0.0,
            gloss_roughness: 0.0,
            reflection_intensity: 0.0,
        }
    }

    pub fn opacity(&self) -> f64 {
        self.opacity
    }

    pub fn color(&self) -> [u8; 3] {
        self.color
    }

    pub fn gloss_amount(&self) -> f64 {
        self.gloss_amount
    }

    pub fn gloss_roughness(&self) -> f64 {
        self.gloss_roughness
    }

    pub fn reflection_intensity(&self) -> f64 {
        self.reflection_intensity
    }

    pub fn with_opacity(self, opacity: f64) -> Result<Self> {
        Self::new(
            opacity,
            self.color,
            self.gloss_amount,
            self.gloss_roughness,
            self.reflection_intensity,
        )
    }

    pub fn normalize(&self) -> NormalizedParams {
        NormalizedParams([
            self.opacity,
            self.color[0] as f64 / 255.0,
            self.color[1] as f64 / 255.0,
            self.color[2] as f64 / 255.0,
            (self.gloss_amount / GLOSS_MAX).clamp(0.0, 1.0),
            self.gloss_roughness,
            self.reflection_intensity,
        ])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Parameters mapped to the unit hypercube, in the fixed order
/// `[opacity, R, G, B, gloss, roughness, reflection]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct NormalizedParams([f64; PARAM_DIM]);

impl NormalizedParams {
    pub fn new(values: [f64; PARAM_DIM]) -> Result<Self> {
        for (index, &value) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::NormalizedOutOfRange { index, value });
            }
        }
        Ok(Self(values))
    }

    /// Clamps each component into [0, 1]; NaN maps to 0.
    pub fn clamped(values: [f64; PARAM_DIM]) -> Self {
        Self(values.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
    }

    pub fn values(&self) -> &[f64; PARAM_DIM] {
        &self.0
    }

    pub fn denormalize(&self) -> GraphicsParams {
        let v = &self.0;
        let channel = |x: f64| (x * 255.0).round() as u8;
        GraphicsParams {
            opacity: v[0],
            color: [channel(v[1]), channel(v[2]), channel(v[3])],
            gloss_amount: v[4] * GLOSS_MAX,
            gloss_roughness: v[5],
            reflection_intensity: v[6],
        }
    }
}

impl TryFrom<Vec<f64>> for NormalizedParams {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        let arr: [f64; PARAM_DIM] = v.try_into().map_err(|v: Vec<f64>| {
            Error::InvalidArgument(format!("expected {PARAM_DIM} components, got {}", v.len()))
        })?;
        NormalizedParams::new(arr)
    }
}

impl From<NormalizedParams> for Vec<f64> {
    fn from(p: NormalizedParams) -> Self {
        p.0.to_vec()
    }
}

/// Mixture of a uniform distribution over the unit hypercube and a
/// multivariate normal in normalized space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution", into = "RawDistribution")]
pub struct ParamDistribution {
    mean: [f64; PARAM_DIM],
    covariance: [[f64; PARAM_DIM]; PARAM_DIM],
    uniform_weight: f64,
}

#[derive(Serialize, Deserialize)]
struct RawDistribution {
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
    uniform_weight: f64,
}

impl TryFrom<RawDistribution> for ParamDistribution {
    type Error = Error;

    fn try_from(raw: RawDistribution) -> Result<Self> {
        let bad = |what: &str| Error::InvalidDistribution(what.to_string());
        let mean: [f64; PARAM_DIM] = raw
            .mean
            .try_into()
            .map_err(|_| bad("mean must have 7 components"))?;
        if raw.covariance.len() != PARAM_DIM {
            return Err(bad("covariance must have 7 rows"));
        }
        let mut covariance = [[0.0; PARAM_DIM]; PARAM_DIM];
        for (dst, row) in covariance.iter_mut().zip(raw.covariance) {
            *dst = row
                .try_into()
                .map_err(|_| bad("covariance rows must have 7 entries"))?;
        }
        ParamDistribution::new(mean, covariance, raw.uniform_weight)
    }
}

impl From<ParamDistribution> for RawDistribution {
    fn from(d: ParamDistribution) -> Self {
        RawDistribution {
            mean: d.mean.to_vec(),
            covariance: d.covariance.iter().map(|r| r.to_vec()).collect(),
            uniform_weight: d.uniform_weight,
        }
    }
}

impl ParamDistribution {
    pub fn new(
        mean: [f64; PARAM_DIM],
        covariance: [[f64; PARAM_DIM]; PARAM_DIM],
        uniform_weight: f64,
    ) -> Result<Self> {
        let dist = Self {
            mean,
            covariance,
            uniform_weight,
        };
        dist.validate()?;
        Ok(dist)
    }

    /// Pure uniform sampling over the unit hypercube.
    pub fn uniform() -> Self {
        let mut covariance = [[0.0; PARAM_DIM]; PARAM_DIM];
        for (i, row) in covariance.iter_mut().enumerate() {
            row[i] = COVARIANCE_RIDGE;
        }
        Self {
            mean: [0.5; PARAM_DIM],
            covariance,
            uniform_weight: 1.0,
        }
    }

    pub fn mean(&self) -> &[f64; PARAM_DIM] {
        &self.mean
    }

    pub fn covariance(&self) -> &[[f64; PARAM_DIM]; PARAM_DIM] {
        &self.covariance
    }

    pub fn uniform_weight(&self) -> f64 {
        self.uniform_weight
    }

    pub fn with_uniform_weight(&self, uniform_weight: f64) -> Result<Self> {
        Self::new(self.mean, self.covariance, uniform_weight)
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidDistribution(what));
        if !(0.0..=1.0).contains(&self.uniform_weight) {
            return bad(format!("uniform_weight {} outside [0, 1]", self.uniform_weight));
        }
        if self.mean.iter().any(|v| !v.is_finite())
            || self.covariance.iter().flatten().any(|v| !v.is_finite())
        {
            return bad("non-finite entries".into());
        }
        for i in 0..PARAM_DIM {
            for j in 0..i {
                let (a, b) = (self.covariance[i][j], self.covariance[j][i]);
                if (a - b).abs() > 1e-12 {
                    return bad(format!("covariance not symmetric at ({i}, {j}): {a} vs {b}"));
                }
            }
        }
        let min_eig = SymmetricEigen::new(self.cov_matrix())
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-12 {
            return bad(format!("covariance has negative eigenvalue {min_eig}"));
        }
        Ok(())
    }

    fn cov_matrix(&self) -> Mat7 {
        Mat7::from_fn(|i, j| self.covariance[i][j])
    }

    /// Builds a reusable sampler. Fails if the distribution is invalid.
    pub fn sampler(&self) -> Result<ParamSampler> {
        self.validate()?;
        let eig = SymmetricEigen::new(self.cov_matrix());
        let mut factor = eig.eigenvectors;
        for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
            let s = lambda.max(0.0).sqrt();
            for i in 0..PARAM_DIM {
                factor[(i, j)] *= s;
            }
        }
        Ok(ParamSampler {
            mean: Vec7::from_column_slice(&self.mean),
            factor,
            uniform_weight: self.uniform_weight,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("distribution serialize")
    }
}

/// Precomputed square-root factor of a [`ParamDistribution`].
#[derive(Debug, Clone)]
pub struct ParamSampler {
    mean: Vec7,
    factor: Mat7,
    uniform_weight: f64,
}

impl ParamSampler {
    pub fn sample_normalized<R: Rng + ?Sized>(&self, rng: &mut R) -> NormalizedParams {
        // Both branches consume the same stream shape so the draw count per
        // sample is fixed.
        let u: f64 = rng.random();
        let uniform: [f64; PARAM_DIM] = std::array::from_fn(|_| rng.random::<f64>());
        let z = Vec7::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        if u < self.uniform_weight {
            NormalizedParams::clamped(uniform)
        } else {
            let x = self.mean + self.factor * z;
            NormalizedParams::clamped(std::array::from_fn(|i| x[i]))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> GraphicsParams {
        self.sample_normalized(rng).denormalize()
    }
}

/// Fits the Gaussian component to expert presets (sample mean, unbiased
/// covariance plus a small ridge).
pub fn fit_expert_distribution(
    presets: &[GraphicsParams],
    uniform_weight: f64,
) -> Result<ParamDistribution> {
    if presets.is_empty() {
        return Err(Error::NoPresets);
    }
    let n = presets.len();
    let points: Vec<Vec7> = presets
        .iter()
        .map(|p| Vec7::from_column_slice(p.normalize().values()))
        .collect();
    let mean = points.iter().fold(Vec7::zeros(), |acc, p| acc + p) / n as f64;
    let mut cov = Mat7::zeros();
    if n >= 2 {
        for p in &points {
            let d = p - mean;
            cov += d * d.transpose();
        }
        cov /= (n - 1) as f64;
    }
    cov += Mat7::identity() * COVARIANCE_RIDGE;
    // force exact symmetry
    let cov = (cov + cov.transpose()) * 0.5;
    ParamDistribution::new(
        std::array::from_fn(|i| mean[i]),
        std::array::from_fn(|i| std::array::from_fn(|j| cov[(i, j)])),
        uniform_weight,
    )
}

/// Draws `n` parameter vectors, deterministically for a given seed.
pub fn sample_params(dist: &ParamDistribution, n: usize, seed: u64) -> Result<Vec<GraphicsParams>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    let sampler = dist.sampler()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| sampler.sample(&mut rng)).collect())
}

/// A small built-in library of lipstick presets in the style an artist
/// would author: mostly saturated reds, pinks, nudes and berries, with
/// moderate gloss.
pub fn default_presets() -> Vec<GraphicsParams> {
    const TABLE: &[(f64, [u8; 3], f64, f64, f64)] = &[
        (0.85, [178, 34, 52], 0.40, 0.55, 0.20),
        (0.90, [200, 16, 46], 0.60, 0.35, 0.35),
        (0.75, [220, 90, 110], 0.80, 0.30, 0.45),
        (0.70, [196, 120, 110], 0.30, 0.70, 0.10),
        (0.80, [150, 40, 70], 0.50, 0.50, 0.25),
        (0.95, [120, 20, 40], 0.20, 0.80, 0.05),
        (0.65, [230, 120, 140], 1.00, 0.20, 0.60),
        (0.60, [210, 140, 130], 0.70, 0.40, 0.40),
        (0.85, [160, 50, 60], 0.45, 0.60, 0.20),
        (0.90, [190, 30, 90], 0.90, 0.25, 0.50),
        (0.70, [180, 100, 90], 0.25, 0.75, 0.10),
        (0.80, [140, 30, 50], 0.35, 0.65, 0.15),
        (0.75, [235, 80, 100], 0.85, 0.30, 0.55),
        (0.55, [200, 130, 120], 0.60, 0.45, 0.30),
        (0.88, [170, 20, 30], 0.50, 0.45, 0.30),
        (0.92, [100, 20, 50], 0.15, 0.85, 0.05),
        (0.68, [225, 110, 150], 1.10, 0.20, 0.65),
        (0.78, [185, 70, 80], 0.55, 0.50, 0.30),
        (0.83, [210, 50, 70], 0.65, 0.40, 0.35),
        (0.72, [170, 90, 100], 0.40, 0.60, 0.20),
        (0.87, [130, 40, 80], 0.30, 0.70, 0.15),
        (0.66, [240, 150, 160], 0.95, 0.25, 0.55),
        (0.94, [155, 25, 35], 0.25, 0.75, 0.10),
        (0.77, [205, 105, 95], 0.70, 0.35, 0.40),
    ];
    TABLE
        .iter()
        .map(|&(o, c, g, r, e)| GraphicsParams::new(o, c, g, r, e).expect("valid preset"))
        .collect()
}
