//! BatchNorm distance and leave-one-out BN sensitivity.
//!
//! The distance between observed batch statistics and a model's stored
//! running statistics is Σ_ℓ (‖μ_ℓ^s − μ_ℓ‖₂ + ‖σ_ℓ^s − σ_ℓ‖₂), with σ
//! compared as standard deviations (biased batch variance). Observed
//! statistics come from an eval-mode forward pass that never updates the
//! running statistics; because eval-mode activations are per-image
//! independent, one pass yields per-image moments from which every
//! leave-one-out batch statistic follows exactly.

use crate::error::{Error, Result};
use crate::nnkit::model::{BnMoments, FloatPolicy, Mode, Model, RunCfg};
use crate::nnkit::tape::Tape;
use crate::nnkit::tensor::Tensor;

/// Per-layer channel statistics (mean and standard deviation).
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnSensitivity {
    pub value: f64,
    pub batch_size: usize,
    pub index: usize,
}

/// Σ_ℓ (‖μ^s − μ‖₂ + ‖σ^s − σ‖₂). A pseudometric against a fixed
/// reference: non-negative, zero iff the statistics agree, symmetric.
pub fn bn_distance(observed: &[BnStats], reference: &[BnStats]) -> Result<f64> {
    if observed.len() != reference.len() {
        return Err(Error::contract(format!(
            "bn_distance: {} observed layers vs {} reference layers",
            observed.len(),
            reference.len()
        )));
    }
    let mut total = 0.0f64;
    for (layer, (obs, re)) in observed.iter().zip(reference).enumerate() {
        if obs.mean.len() != re.mean.len() || obs.std.len() != re.std.len() {
            return Err(Error::contract(format!(
                "bn_distance: channel mismatch at layer {layer} ({} vs {})",
                obs.mean.len(),
                re.mean.len()
            )));
        }
        let dm: f64 = obs
            .mean
            .iter()
            .zip(&re.mean)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let ds: f64 = obs
            .std
            .iter()
            .zip(&re.std)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        total += dm + ds;
    }
    Ok(total)
}

/// The model's stored running statistics as reference stats (std, not
/// variance).
pub fn reference_stats(model: &Model) -> Vec<BnStats> {
    model
        .bn
        .iter()
        .map(|s| BnStats {
            mean: s.running_mean.iter().map(|&v| v as f64).collect(),
            std: s.running_var.iter().map(|&v| (v as f64).sqrt()).collect(),
        })
        .collect()
}

/// One eval-mode forward pass collecting per-image BN-input moments.
/// Running statistics are not touched.
pub fn observe_batch(model: &Model, batch: &Tensor) -> Result<Vec<BnMoments>> {
    if !model.has_bn() {
        return Err(Error::contract("model has no BatchNorm layers to observe"));
    }
    let mut tape = Tape::new();
    let mut cfg = RunCfg {
        mode: Mode::Eval,
        ..RunCfg::eval(&FloatPolicy)
    };
    cfg.observe_bn = true;
    let out = model.run(&mut tape, batch, &cfg)?;
    Ok(out.bn_moments)
}

/// Batch statistics from per-image moments, optionally excluding one image.
pub fn stats_from_moments(moments: &[BnMoments], exclude: Option<usize>) -> Vec<BnStats> {
    moments
        .iter()
        .map(|m| {
            let mut mean = vec![0.0f64; m.channels];
            let mut std = vec![0.0f64; m.channels];
            let images = m.batch - exclude.map(|_| 1).unwrap_or(0);
            let count = (images * m.values_per_image) as f64;
            for c in 0..m.channels {
                let mut s0 = 0.0f64;
                let mut s1 = 0.0f64;
                for b in 0..m.batch {
                    if exclude == Some(b) {
                        continue;
                    }
                    s0 += m.sum[b * m.channels + c];
                    s1 += m.sumsq[b * m.channels + c];
                }
                let mu = s0 / count;
                let var = (s1 / count - mu * mu).max(0.0);
                mean[c] = mu;
                std[c] = var.sqrt();
            }
            BnStats { mean, std }
        })
        .collect()
}

/// All leave-one-out sensitivities of a batch: S(xᵢ) = D_BN(batch) −
/// D_BN(batch without image i), both against the model's running
/// statistics.
pub fn bn_sensitivity_all(model: &Model, batch: &Tensor) -> Result<Vec<f64>> {
    let b = batch.shape()[0];
    if b < 2 {
        return Err(Error::contract(format!(
            "BN sensitivity needs a batch of at least 2 images, got {b}"
        )));
    }
    let moments = observe_batch(model, batch)?;
    let reference = reference_stats(model);
    let full = bn_distance(&stats_from_moments(&moments, None), &reference)?;
    (0..b)
        .map(|i| {
            let minus = bn_distance(&stats_from_moments(&moments, Some(i)), &reference)?;
            Ok(full - minus)
        })
        .collect()
}

/// Sensitivity of image `i` within its batch.
pub fn bn_sensitivity(model: &Model, batch: &Tensor, i: usize) -> Result<BnSensitivity> {
    let b = batch.shape()[0];
    if i >= b {
        return Err(Error::contract(format!(
            "image index {i} out of batch of {b}"
        )));
    }
    let all = bn_sensitivity_all(model, batch)?;
    Ok(BnSensitivity {
        value: all[i],
        batch_size: b,
        index: i,
    })
}

/// Stage-2 BN filtering: group the pool into batches of `batch_size` in
/// arrival order (an undersized pool forms a single batch), drop the
/// ⌈B·r⌉ highest-sensitivity samples of each batch. Ties keep lower ids.
/// Returns (sensitivities, kept flags) aligned with the pool order.
pub fn bn_filter(
    model: &Model,
    images: &Tensor,
    ids: &[u64],
    r: f64,
    batch_size: usize,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::contract(format!(
            "filter ratio must be in [0,1), got {r}"
        )));
    }
    if batch_size < 2 {
        return Err(Error::contract("BN filter batch size must be at least 2"));
    }
    let n = ids.len();
    let mut scores = vec![0.0f64; n];
    let mut kept = vec![true; n];
    let mut start = 0;
    while start < n {
        let len = batch_size.min(n - start);
        if len == 1 {
            // a trailing single image has no leave-one-out signal; keep it
            break;
        }
        let slice = images.slice_batch(start, len)?;
        let sens = bn_sensitivity_all(model, &slice)?;
        scores[start..start + len].copy_from_slice(&sens);
        let drop = ((len as f64) * r).ceil() as usize;
        if drop > 0 {
            let mut order: Vec<usize> = (0..len).collect();
            // drop the highest sensitivities; among ties drop the higher id
            order.sort_by(|&a, &b| {
                sens[b]
                    .partial_cmp(&sens[a])
                    .unwrap()
                    .then(ids[start + b].cmp(&ids[start + a]))
            });
            for &k in order.iter().take(drop.min(len)) {
                kept[start + k] = false;
            }
        }
        start += len;
    }
    Ok((scores, kept))
}
