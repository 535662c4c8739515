//! Frame-timing harness: warm up, then time each stage over a measured window.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{render_timed, RenderOptions, Stage};
use crate::error::{Error, Result};
use crate::geometry::FaceGeometry;
use crate::image::ImageBuffer;
use crate::params::GraphicsParams;

pub const DEFAULT_WARMUP: usize = 100;
pub const DEFAULT_MEASURED: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProfileConfig {
    pub warmup: usize,
    pub measured: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            warmup: DEFAULT_WARMUP,
            measured: DEFAULT_MEASURED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: String,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl StageStats {
    fn from_samples(stage: &str, samples: &[Duration]) -> Self {
        let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(|a, b| a.total_cmp(b));
        let mean = ms.iter().sum::<f64>() / ms.len() as f64;
        Self {
            stage: stage.to_string(),
            mean_ms: mean,
            p50_ms: nearest_rank(&ms, 0.50),
            p95_ms: nearest_rank(&ms, 0.95),
        }
    }
}

/// Nearest-rank percentile of sorted, non-empty data.
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub width: usize,
    pub height: usize,
    pub warmup: usize,
    pub measured: usize,
    /// One entry per stage, then `total`.
    pub stages: Vec<StageStats>,
}

impl TimingReport {
    pub fn total(&self) -> &StageStats {
        self.stages.last().expect("total row present")
    }

    pub fn stage(&self, name: &str) -> Option<&StageStats> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "frames {}x{}, warmup {}, measured {}\n{:<12} {:>10} {:>10} {:>10}\n",
            self.width, self.height, self.warmup, self.measured, "stage", "mean ms", "p50 ms", "p95 ms"
        );
        for st in &self.stages {
            let _ = writeln!(s, "{:<12} {:>10.4} {:>10.4} {:>10.4}", st.stage, st.mean_ms, st.p50_ms, st.p95_ms);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialize")
    }
}

/// Renders `warmup + measured` frames (cycling through `frames`) on the
/// calling thread and summarizes the measured window.
pub fn profile(
    frames: &[(ImageBuffer, FaceGeometry)],
    params: &GraphicsParams,
    opts: &RenderOptions,
    config: ProfileConfig,
) -> Result<TimingReport> {
    if config.measured == 0 {
        return Err(Error::InvalidArgument("measured frame count must be >= 1".into()));
    }
    if frames.is_empty() {
        return Err(Error::InvalidArgument("no frames to profile".into()));
    }
    let mut per_stage: Vec<Vec<Duration>> = vec![Vec::with_capacity(config.measured); Stage::ALL.len() + 1];
    for i in 0..config.warmup + config.measured {
        let (img, geom) = &frames[i % frames.len()];
        let mut times = [Duration::ZERO; 5];
        let start = Instant::now();
        let out = render_timed(img, geom, params, opts, |stage, d| times[stage as usize] = d)
            .map_err(|e| e.in_frame(i % frames.len()))?;
        let total = start.elapsed();
        std::hint::black_box(out);
        if i >= config.warmup {
            for (k, d) in times.iter().enumerate() {
                per_stage[k].push(*d);
            }
            per_stage[Stage::ALL.len()].push(total);
        }
    }
    let mut stages: Vec<StageStats> = Stage::ALL
        .iter()
        .map(|s| StageStats::from_samples(s.name(), &per_stage[*s as usize]))
        .collect();
    stages.push(StageStats::from_samples("total", &per_stage[Stage::ALL.len()]));
    Ok(TimingReport {
        width: frames[0].0.width(),
        height: frames[0].0.height(),
        warmup: config.warmup,
        measured: config.measured,
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Target;

    fn frames() -> Vec<(ImageBuffer, FaceGeometry)> {
        let img = ImageBuffer::filled(32, 32, [0.5, 0.4, 0.4]);
        let geom = FaceGeometry::new(32, 32, vec![vec![[4.0, 4.0], [28.0, 6.0], [16.0, 26.0]]], vec![]).unwrap();
        vec![(img, geom)]
    }

    #[test]
    fn defaults_follow_protocol() {
        let c = ProfileConfig::default();
        assert_eq!((c.warmup, c.measured), (100, 500));
    }

    #[test]
    fn single_sample_stats_coincide() {
        let p = GraphicsParams::new(0.5, [200, 10, 10], 0.5, 0.5, 0.5).unwrap();
        let r = profile(&frames(), &p, &RenderOptions::new(Target::Lips), ProfileConfig { warmup: 2, measured: 1 }).unwrap();
        assert_eq!(r.stages.len(), 6);
        for s in &r.stages {
            assert_eq!(s.mean_ms, s.p50_ms);
            assert_eq!(s.p50_ms, s.p95_ms);
        }
        assert!(r.to_table().contains("reflection"));
        let back: TimingReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn zero_measured_rejected() {
        let p = GraphicsParams::zero();
        let cfg = ProfileConfig { warmup: 1, measured: 0 };
        assert!(profile(&frames(), &p, &RenderOptions::new(Target::Lips), cfg).is_err());
    }

    #[test]
    fn percentiles() {
        let v: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        assert_eq!(nearest_rank(&v, 0.5), 10.0);
        assert_eq!(nearest_rank(&v, 0.95), 19.0);
    }
}
