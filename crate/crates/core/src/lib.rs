//! Parametric makeup rendering and inverse graphics estimation.
//!
//! A seven-component material vector ([`GraphicsParams`]) drives a 2D
//! compositing renderer. A compact convolutional regressor learns to recover
//! that vector from a single made-up portrait crop, trained purely on
//! synthetic renders. A derivative-free search against the renderer serves as
//! an independent recovery route, and image metrics score the results.

pub mod datagen;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod oracle;
pub mod params;
pub mod renderer;

pub use error::{Error, Result};
pub use geometry::{ApplicationMask, CropSpec, FaceGeometry, Polygon, Target};
pub use image::ImageBuffer;
pub use params::{GraphicsParams, NormalizedParams, ParamDistribution};
pub use encoder::{estimate, ParamEstimator, RegressorModel};
pub use renderer::{render, RenderOptions, RenderRequest};
