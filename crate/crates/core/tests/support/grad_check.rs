//! Backprop against central differences, in f64.

use makeup_core::encoder::{batch_loss, init_model, loss_and_gradient, ArchConfig, Layout, ParamKind};
use makeup_core::params::PARAM_DIM;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
const KINK_RATIO: f64 = 1e-3;

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Probes resampled because they straddled a ReLU kink.
    pub skipped: usize,
    pub worst_rel: f64,
    pub kinds: Vec<ParamKind>,
    pub failures: Vec<String>,
}

fn kinds(n_convs: usize) -> Vec<ParamKind> {
    let mut k: Vec<ParamKind> = (0..n_convs).flat_map(|i| [ParamKind::ConvWeight(i), ParamKind::ConvBias(i)]).collect();
    k.extend([ParamKind::HiddenWeight, ParamKind::HiddenBias, ParamKind::HeadWeight, ParamKind::HeadBias]);
    k
}

/// Probes `per_kind` weights of every parameter kind.
pub fn check(arch: &ArchConfig, per_kind: usize, seed: u64) -> GradReport {
    let model = init_model(arch, seed).unwrap();
    let layout: &Layout = model.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: Vec<f64> = model.weights().iter().map(|&w| w as f64).collect();
    // nonzero biases so every ReLU sees a generic operating point
    for (i, p) in params.iter_mut().enumerate() {
        if matches!(layout.kind_of(i), ParamKind::ConvBias(_) | ParamKind::HiddenBias | ParamKind::HeadBias) {
            *p = rng.random_range(-0.05..0.15);
        }
    }
    let inputs: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..layout.input_len()).map(|_| rng.random_range(-0.5..0.5)).collect())
        .collect();
    let labels: Vec<[f64; PARAM_DIM]> = (0..2).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect();
    let (_, grad) = loss_and_gradient(layout, &params, &inputs, &labels);
    let base = batch_loss(layout, &params, &inputs, &labels);

    let mut report = GradReport::default();
    for kind in kinds(arch.convs.len()) {
        let idx: Vec<usize> = (0..layout.n_params()).filter(|&i| layout.kind_of(i) == kind).collect();
        let mut done = 0;
        let mut attempts = 0;
        while done < per_kind.min(idx.len()) {
            attempts += 1;
            if attempts > 200 {
                report.failures.push(format!("no usable probe for {kind:?}"));
                break;
            }
            let i = idx[rng.random_range(0..idx.len())];
            let mut p = params.clone();
            p[i] += STEP;
            let up = batch_loss(layout, &p, &inputs, &labels);
            p[i] -= 2.0 * STEP;
            let down = batch_loss(layout, &p, &inputs, &labels);
            // a probe straddling a ReLU kink shows up as a large second
            // difference relative to the first; resample those
            if (up - 2.0 * base + down).abs() > KINK_RATIO * (up - down).abs() {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grad[i];
            let scale = numeric.abs().max(analytic.abs());
            if scale < 1e-9 {
                // inactive unit, no signal to compare
                continue;
            }
            let rel = (numeric - analytic).abs() / scale;
            report.worst_rel = report.worst_rel.max(rel);
            if rel > TOLERANCE {
                report.failures.push(format!("{kind:?} index {i}: analytic {analytic:e} numeric {numeric:e} rel {rel:e}"));
            }
            done += 1;
            report.checked += 1;
        }
        if done > 0 {
            report.kinds.push(kind);
        }
    }
    if report.skipped * 4 > report.checked {
        report.failures.push(format!("{} kink probes vs {} checked", report.skipped, report.checked));
    }
    report
}
