//! Synthetic supervised data: sample a material, render it on a portrait,
//! crop the region, and keep the normalized material as the label.

mod synth;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use synth::synthetic_portrait;

use crate::error::{Error, Result};
use crate::geometry::{crop_region, FaceGeometry, Target, DEFAULT_CROP_EXPANSION};
use crate::image::ImageBuffer;
use crate::params::{GraphicsParams, NormalizedParams, ParamDistribution};
use crate::renderer::{render_image, RenderOptions};

pub const DEFAULT_DATASET_SIZE: usize = 2000;
pub const DEFAULT_PORTRAIT_COUNT: usize = 20;
pub const DEFAULT_PORTRAIT_SIZE: usize = 128;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CROPS_DIR: &str = "crops";

/// A source photo with its geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Portrait {
    pub id: String,
    pub image: ImageBuffer,
    pub geometry: FaceGeometry,
}

/// Where the portraits of a dataset came from, so they can be rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PortraitSource {
    Synthetic { seed: u64, count: usize, size: usize },
    Files { entries: Vec<PortraitFiles> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortraitFiles {
    pub image: PathBuf,
    pub geometry: PathBuf,
}

impl PortraitSource {
    pub fn load(&self) -> Result<Vec<Portrait>> {
        match self {
            PortraitSource::Synthetic { seed, count, size } => Ok(synthetic_portraits(*seed, *count, *size)),
            PortraitSource::Files { entries } => entries
                .iter()
                .map(|e| {
                    let image = ImageBuffer::load_png(&e.image)?;
                    let geometry = FaceGeometry::load(&e.geometry)?;
                    geometry.check_matches(&image)?;
                    Ok(Portrait {
                        id: e.image.display().to_string(),
                        image,
                        geometry,
                    })
                })
                .collect(),
        }
    }
}

/// `count` procedural portraits; portrait `k` uses seed `seed + k`.
pub fn synthetic_portraits(seed: u64, count: usize, size: usize) -> Vec<Portrait> {
    (0..count)
        .into_par_iter()
        .map(|k| {
            let (image, geometry) = synthetic_portrait(seed.wrapping_add(k as u64), size);
            Portrait {
                id: format!("synthetic/{seed}/{k}"),
                image,
                geometry,
            }
        })
        .collect()
}

/// One training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub crop: ImageBuffer,
    pub label: NormalizedParams,
    pub source_id: String,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub label: NormalizedParams,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub crop_size: usize,
    pub target: Target,
    pub count: usize,
    pub seed: u64,
    pub distribution: ParamDistribution,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub portraits: Option<PortraitSource>,
    pub records: Vec<ManifestRecord>,
}

/// A manifest together with its decoded crops (same order as `records`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub crops: Vec<ImageBuffer>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &NormalizedParams> {
        self.manifest.records.iter().map(|r| &r.label)
    }

    pub fn sample(&self, i: usize) -> SampleRecord {
        let r = &self.manifest.records[i];
        SampleRecord {
            crop: self.crops[i].clone(),
            label: r.label,
            source_id: r.source_id.clone(),
            target: self.manifest.target,
        }
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        let records: Vec<ManifestRecord> = indices.iter().map(|&i| self.manifest.records[i].clone()).collect();
        Dataset {
            manifest: DatasetManifest {
                count: records.len(),
                records,
                ..self.manifest.clone()
            },
            crops: indices.iter().map(|&i| self.crops[i].clone()).collect(),
        }
    }

    /// Writes `manifest.json` and `crops/NNNNN.png` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let crops = dir.join(CROPS_DIR);
        std::fs::create_dir_all(&crops).map_err(|e| Error::io(&crops, e))?;
        for (rec, crop) in self.manifest.records.iter().zip(&self.crops) {
            crop.save_png(dir.join(&rec.image))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Reads a dataset written by [`Dataset::write`], checking every crop.
    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.count != manifest.records.len() {
            return Err(Error::InvalidArgument(format!(
                "manifest count {} != {} records",
                manifest.count,
                manifest.records.len()
            )));
        }
        let crops = manifest
            .records
            .iter()
            .map(|r| {
                let img = ImageBuffer::load_png(dir.join(&r.image))?;
                if img.width() != manifest.crop_size || img.height() != manifest.crop_size {
                    return Err(Error::DimensionMismatch {
                        expected_width: manifest.crop_size,
                        expected_height: manifest.crop_size,
                        width: img.width(),
                        height: img.height(),
                    });
                }
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, crops })
    }
}

/// Generation settings besides the portraits.
#[derive(Debug, Clone)]
pub struct GenerateConfig {
    pub distribution: ParamDistribution,
    pub n: usize,
    pub target: Target,
    pub crop_size: usize,
    pub seed: u64,
}

/// Per-record generator seeded from `(seed, index)`.
pub fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Renders `params` on `portrait` and crops the target region, quantized to
/// 8-bit levels as it would be stored.
pub fn render_crop(portrait: &Portrait, params: &GraphicsParams, target: Target, crop_size: usize) -> Result<ImageBuffer> {
    let rendered = render_image(&portrait.image, &portrait.geometry, params, &RenderOptions::new(target))?;
    Ok(crop_region(&rendered, portrait.geometry.polygons(target), DEFAULT_CROP_EXPANSION, crop_size)?.quantized())
}

/// Record `i` draws its portrait and material from its own stream, so the
/// result does not depend on thread count.
pub fn generate_dataset(portraits: &[Portrait], config: &GenerateConfig) -> Result<Dataset> {
    if config.n == 0 {
        return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
    }
    if portraits.is_empty() {
        return Err(Error::InvalidArgument("no portraits".into()));
    }
    let usable: Vec<&Portrait> = portraits
        .iter()
        .filter(|p| {
            let ok = !p.geometry.polygons(config.target).is_empty();
            if !ok {
                log::warn!("portrait {} has no {} polygons; skipped", p.id, config.target);
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::NoRegion);
    }
    let sampler = config.distribution.sampler()?;
    let generated: Vec<(ManifestRecord, ImageBuffer)> = (0..config.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = record_rng(config.seed, i);
            let portrait = usable[rng.random_range(0..usable.len())];
            let params = sampler.sample(&mut rng);
            let crop = render_crop(portrait, &params, config.target, config.crop_size)?;
            Ok((
                ManifestRecord {
                    image: format!("{CROPS_DIR}/{i:05}.png"),
                    label: params.normalize(),
                    source_id: portrait.id.clone(),
                },
                crop,
            ))
        })
        .collect::<Result<_>>()?;
    let (records, crops): (Vec<_>, Vec<_>) = generated.into_iter().unzip();
    Ok(Dataset {
        manifest: DatasetManifest {
            crop_size: config.crop_size,
            target: config.target,
            count: records.len(),
            seed: config.seed,
            distribution: config.distribution.clone(),
            portraits: None,
            records,
        },
        crops,
    })
}

/// Seeded shuffle, then the first `round(train_fraction * n)` records go to
/// the first half.
pub fn split_dataset(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_fraction * n as f64).round() as usize).min(n);
    let (a, b) = order.split_at(n_train);
    Ok((dataset.subset(a), dataset.subset(b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize, seed: u64) -> Dataset {
        let portraits = synthetic_portraits(1, 3, 96);
        let config = GenerateConfig {
            distribution: ParamDistribution::uniform(),
            n,
            target: Target::Lips,
            crop_size: 32,
            seed,
        };
        generate_dataset(&portraits, &config).unwrap()
    }

    #[test]
    fn single_record_label_is_normalized_sample() {
        let ds = tiny(1, 9);
        assert_eq!(ds.len(), 1);
        let mut rng = record_rng(9, 0);
        let _portrait: usize = rng.random_range(0..3);
        let expect = ParamDistribution::uniform().sampler().unwrap().sample(&mut rng);
        assert_eq!(ds.manifest.records[0].label, expect.normalize());
        assert_eq!(ds.crops[0].width(), 32);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(tiny(6, 4), tiny(6, 4));
        assert_ne!(tiny(6, 4).crops, tiny(6, 5).crops);
    }

    #[test]
    fn portraits_without_region_are_skipped() {
        let mut portraits = synthetic_portraits(1, 2, 96);
        portraits[0].geometry.lips.clear();
        let config = GenerateConfig {
            distribution: ParamDistribution::uniform(),
            n: 5,
            target: Target::Lips,
            crop_size: 16,
            seed: 0,
        };
        let ds = generate_dataset(&portraits, &config).unwrap();
        assert!(ds.manifest.records.iter().all(|r| r.source_id == portraits[1].id));
        portraits[1].geometry.lips.clear();
        assert!(matches!(generate_dataset(&portraits, &config), Err(Error::NoRegion)));
    }

    #[test]
    fn split_partitions() {
        let ds = tiny(10, 2);
        let (a, b) = split_dataset(&ds, 0.8, 3).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let mut names: Vec<_> = a.manifest.records.iter().chain(&b.manifest.records).map(|r| r.image.clone()).collect();
        names.sort();
        let mut all: Vec<_> = ds.manifest.records.iter().map(|r| r.image.clone()).collect();
        all.sort();
        assert_eq!(names, all);
        assert_eq!(split_dataset(&ds, 0.8, 3).unwrap(), (a, b));
        assert!(split_dataset(&ds, 1.0, 3).is_err());
        assert!(split_dataset(&ds, 0.0, 3).is_err());
    }

    #[test]
    fn write_load_round_trip() {
        let ds = tiny(4, 1);
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        std::fs::remove_file(dir.path().join("crops/00002.png")).unwrap();
        assert!(Dataset::load(dir.path()).is_err());
    }
}
