//! Inverse graphics encoder: maps a region crop to normalized material
//! parameters.

mod io;
pub mod network;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use io::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use network::{ArchConfig, ConvSpec, Layout, ParamKind, Scalar};
pub use train::{train, EpochLog, Loss, Optimizer, TrainConfig, TrainLog};

use crate::error::{Error, Result};
use crate::geometry::{crop_region, FaceGeometry, Target, DEFAULT_CROP_EXPANSION};
use crate::image::ImageBuffer;
use crate::params::{GraphicsParams, NormalizedParams, PARAM_DIM};

/// Anything that maps a crop to normalized parameters.
pub trait ParamEstimator {
    fn input_size(&self) -> usize;
    fn predict(&self, crop: &ImageBuffer) -> Result<NormalizedParams>;
}

/// Architecture, weights and a free-form version tag.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorModel {
    arch: ArchConfig,
    layout: Layout,
    weights: Vec<f32>,
    tag: String,
}

// Layout is derived from arch; compare only the defining fields.
impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.n_params == other.n_params
    }
}

impl RegressorModel {
    pub fn from_parts(arch: ArchConfig, weights: Vec<f32>, tag: String) -> Result<Self> {
        let layout = Layout::new(&arch)?;
        if weights.len() != layout.n_params() {
            return Err(Error::CorruptModel(format!(
                "expected {} weights, found {}",
                layout.n_params(),
                weights.len()
            )));
        }
        Ok(Self {
            arch,
            layout,
            weights,
            tag,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn set_tag(&mut self, tag: impl Into<String>) {
        self.tag = tag.into();
    }

    pub fn n_params(&self) -> usize {
        self.weights.len()
    }

    /// Network output for an already-planarized input.
    pub fn forward_planar(&self, input: &[f32]) -> [f32; PARAM_DIM] {
        let trace = network::forward(&self.layout, &self.weights, input);
        std::array::from_fn(|i| trace.out[i])
    }

    pub fn forward(&self, image: &ImageBuffer) -> Result<NormalizedParams> {
        let input = planarize::<f32>(image, self.arch.input_size)?;
        let out = self.forward_planar(&input);
        Ok(NormalizedParams::clamped(out.map(|v| v as f64)))
    }
}

impl ParamEstimator for RegressorModel {
    fn input_size(&self) -> usize {
        self.arch.input_size
    }

    fn predict(&self, crop: &ImageBuffer) -> Result<NormalizedParams> {
        self.forward(crop)
    }
}

/// Fan-in scaled uniform initialization, deterministic per seed. Biases
/// start at zero.
pub fn init_model(arch: &ArchConfig, seed: u64) -> Result<RegressorModel> {
    let layout = Layout::new(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = (0..layout.n_params())
        .map(|i| match layout.kind_of(i) {
            ParamKind::ConvBias(_) | ParamKind::HiddenBias | ParamKind::HeadBias => 0.0,
            _ => {
                let (fan_in, relu) = layout.fan_in(i);
                let bound = if relu { (6.0 / fan_in as f64).sqrt() } else { (3.0 / fan_in as f64).sqrt() };
                rng.random_range(-bound..bound) as f32
            }
        })
        .collect();
    RegressorModel::from_parts(arch.clone(), weights, format!("init-{seed}"))
}

/// Channel-major copy of `image` centered around zero.
pub fn planarize<T: Scalar>(image: &ImageBuffer, input_size: usize) -> Result<Vec<T>> {
    if image.width() != input_size || image.height() != input_size {
        return Err(Error::DimensionMismatch {
            expected_width: input_size,
            expected_height: input_size,
            width: image.width(),
            height: image.height(),
        });
    }
    let n = input_size * input_size;
    let mut out = vec![T::zero(); 3 * n];
    for (i, px) in image.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * n + i] = T::lit(px[c] as f64 - 0.5);
        }
    }
    Ok(out)
}

/// Mean over samples of the squared Euclidean distance between 7-vectors.
pub fn loss(predictions: &[NormalizedParams], labels: &[NormalizedParams]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, l)| p.values().iter().zip(l.values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Batch loss evaluated entirely in `T`, with its gradient w.r.t. `params`.
pub fn loss_and_gradient<T: Scalar>(layout: &Layout, params: &[T], inputs: &[Vec<T>], labels: &[[T; PARAM_DIM]]) -> (T, Vec<T>) {
    let mut grad = vec![T::zero(); params.len()];
    let mut total = T::zero();
    for (x, t) in inputs.iter().zip(labels) {
        let trace = network::forward(layout, params, x);
        let (l, d_out) = network::sample_loss_grad(&trace.out, t, inputs.len());
        total += l;
        network::backward(layout, params, &trace, &d_out, &mut grad);
    }
    (total, grad)
}

/// Batch loss only.
pub fn batch_loss<T: Scalar>(layout: &Layout, params: &[T], inputs: &[Vec<T>], labels: &[[T; PARAM_DIM]]) -> T {
    let mut total = T::zero();
    for (x, t) in inputs.iter().zip(labels) {
        let trace = network::forward(layout, params, x);
        total += network::sample_loss_grad(&trace.out, t, inputs.len()).0;
    }
    total
}

/// Crop of the reference region at the model input size, as the model sees it.
pub fn reference_crop(reference: &ImageBuffer, geometry: &FaceGeometry, target: Target, input_size: usize) -> Result<ImageBuffer> {
    geometry.check_matches(reference)?;
    let polygons = geometry.polygons(target);
    if polygons.is_empty() {
        return Err(Error::NoRegion);
    }
    Ok(crop_region(reference, polygons, DEFAULT_CROP_EXPANSION, input_size)?.quantized())
}

/// Estimates the material of the makeup on `reference`.
pub fn estimate(model: &impl ParamEstimator, reference: &ImageBuffer, geometry: &FaceGeometry, target: Target) -> Result<GraphicsParams> {
    estimate_with_crop(model, reference, geometry, target).map(|(p, _)| p)
}

/// Like [`estimate`], also returning the crop that was fed to the model.
pub fn estimate_with_crop(
    model: &impl ParamEstimator,
    reference: &ImageBuffer,
    geometry: &FaceGeometry,
    target: Target,
) -> Result<(GraphicsParams, ImageBuffer)> {
    let crop = reference_crop(reference, geometry, target, model.input_size())?;
    let v = model.predict(&crop)?;
    Ok((v.denormalize(), crop))
}
