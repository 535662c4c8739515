//! The makeup renderer: highlight estimation, shading-preserving recolor,
//! gloss and reflection passes composited under a feathered mask.

mod passes;
pub mod profile;

use std::time::{Duration, Instant};

use rayon::prelude::*;

pub use passes::{
    estimate_highlight, gloss_pass, recolor, reflection_pass, specular_exponent, HighlightMap,
    HIGHLIGHT_QUANTILE, MAX_SHADING, REFLECTION_SIGMA, SPECULAR_SPREAD,
};
pub(crate) use passes::{mean_core_luminance, reflection_bloom};
pub use profile::{profile, ProfileConfig, StageStats, TimingReport};

use crate::error::{Error, Result};
use crate::geometry::{rasterize_mask, ApplicationMask, FaceGeometry, Target, DEFAULT_FEATHER_SIGMA};
use crate::image::ImageBuffer;
use crate::params::GraphicsParams;

/// Everything needed to render one frame.
#[derive(Debug, Clone)]
pub struct RenderRequest {
    pub source: ImageBuffer,
    pub geometry: FaceGeometry,
    pub params: GraphicsParams,
    pub target: Target,
    pub user_intensity: f64,
    pub feather_sigma: f64,
}

impl RenderRequest {
    pub fn new(source: ImageBuffer, geometry: FaceGeometry, params: GraphicsParams, target: Target) -> Self {
        Self {
            source,
            geometry,
            params,
            target,
            user_intensity: 1.0,
            feather_sigma: DEFAULT_FEATHER_SIGMA,
        }
    }
}

/// Rendering options that are not part of the material.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub target: Target,
    pub user_intensity: f64,
    pub feather_sigma: f64,
}

impl RenderOptions {
    pub fn new(target: Target) -> Self {
        Self {
            target,
            user_intensity: 1.0,
            feather_sigma: DEFAULT_FEATHER_SIGMA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.user_intensity) {
            return Err(Error::InvalidArgument(format!(
                "user intensity {} outside [0, 1]",
                self.user_intensity
            )));
        }
        Ok(())
    }
}

/// Pipeline stages reported by the profiler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Mask,
    Highlight,
    Recolor,
    Gloss,
    Reflection,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Mask, Stage::Highlight, Stage::Recolor, Stage::Gloss, Stage::Reflection];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Mask => "mask",
            Stage::Highlight => "highlight",
            Stage::Recolor => "recolor",
            Stage::Gloss => "gloss",
            Stage::Reflection => "reflection",
        }
    }
}

/// Builds the application mask for `target`.
pub fn target_mask(geometry: &FaceGeometry, target: Target, feather_sigma: f64) -> Result<ApplicationMask> {
    rasterize_mask(geometry.polygons(target), geometry.width, geometry.height, feather_sigma)
}

/// Renders `params` onto `source` and reports each stage duration to `timer`.
pub fn render_timed(
    source: &ImageBuffer,
    geometry: &FaceGeometry,
    params: &GraphicsParams,
    opts: &RenderOptions,
    mut timer: impl FnMut(Stage, Duration),
) -> Result<ImageBuffer> {
    opts.validate()?;
    geometry.check_matches(source)?;
    let t = Instant::now();
    let mask = target_mask(geometry, opts.target, opts.feather_sigma)?;
    timer(Stage::Mask, t.elapsed());
    Ok(render_with_mask(source, &mask, params, opts.user_intensity, &mut timer))
}

/// Runs the passes under a precomputed mask.
pub fn render_with_mask(
    source: &ImageBuffer,
    mask: &ApplicationMask,
    params: &GraphicsParams,
    user_intensity: f64,
    mut timer: impl FnMut(Stage, Duration),
) -> ImageBuffer {
    let t = Instant::now();
    let highlight = estimate_highlight(source, mask, HIGHLIGHT_QUANTILE);
    timer(Stage::Highlight, t.elapsed());
    let t = Instant::now();
    let colored = recolor(source, mask, params, user_intensity);
    timer(Stage::Recolor, t.elapsed());
    let t = Instant::now();
    let glossy = gloss_pass(&colored, &highlight, mask, params);
    timer(Stage::Gloss, t.elapsed());
    let t = Instant::now();
    let out = reflection_pass(&glossy, &highlight, mask, params);
    timer(Stage::Reflection, t.elapsed());
    out
}

pub fn render_image(
    source: &ImageBuffer,
    geometry: &FaceGeometry,
    params: &GraphicsParams,
    opts: &RenderOptions,
) -> Result<ImageBuffer> {
    render_timed(source, geometry, params, opts, |_, _| {})
}

pub fn render(req: &RenderRequest) -> Result<ImageBuffer> {
    let opts = RenderOptions {
        target: req.target,
        user_intensity: req.user_intensity,
        feather_sigma: req.feather_sigma,
    };
    render_image(&req.source, &req.geometry, &req.params, &opts)
}

/// Renders every frame independently with the same material; frames are
/// processed in parallel and returned in input order.
pub fn render_sequence(
    frames: &[(ImageBuffer, FaceGeometry)],
    params: &GraphicsParams,
    opts: &RenderOptions,
) -> Result<Vec<ImageBuffer>> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("empty frame sequence".into()));
    }
    frames
        .par_iter()
        .enumerate()
        .map(|(i, (img, geom))| render_image(img, geom, params, opts).map_err(|e| e.in_frame(i)))
        .collect()
}
