//! Patch-similarity diversity scoring for BN-free (ViT) models.
//!
//! For each image, the pairwise cosine similarities of the final block's
//! patch features form an N×N matrix Γ. The differential entropy of a
//! Gaussian kernel density estimate over Γ's entries measures patch
//! diversity; filtering keeps the most diverse samples.

use crate::error::{Error, Result};
use crate::filter::pipeline::keep_highest_per_class;
use crate::nnkit::model::{FloatPolicy, Mode, Model, RunCfg};
use crate::nnkit::tape::Tape;
use crate::nnkit::tensor::Tensor;

/// Differential entropy (nats) of the KDE over a similarity matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchEntropy {
    pub value: f64,
    pub bandwidth: f64,
}

/// Cosine similarity matrix Γᵢⱼ = oᵢ·oⱼ/(‖oᵢ‖‖oⱼ‖) of patch features
/// `o[N,D]`. Symmetric with unit diagonal.
pub fn patch_similarity(o: &Tensor) -> Result<Tensor> {
    let shape = o.shape();
    if shape.len() != 2 {
        return Err(Error::contract(format!(
            "patch features must be [N,D], got {shape:?}"
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    let mut norms = vec![0.0f64; n];
    for (i, row) in o.data().chunks_exact(d).enumerate() {
        let sq: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum();
        if sq <= 0.0 {
            return Err(Error::Scoring(format!("patch {i} has zero norm")));
        }
        norms[i] = sq.sqrt();
    }
    let mut gamma = vec![0.0f32; n * n];
    for i in 0..n {
        let ri = &o.data()[i * d..(i + 1) * d];
        gamma[i * n + i] = 1.0;
        for j in i + 1..n {
            let rj = &o.data()[j * d..(j + 1) * d];
            let dot: f64 = ri.iter().zip(rj).map(|(&a, &b)| a as f64 * b as f64).sum();
            let c = (dot / (norms[i] * norms[j])) as f32;
            gamma[i * n + j] = c;
            gamma[j * n + i] = c;
        }
    }
    Tensor::new(vec![n, n], gamma)
}

/// Scott's-rule bandwidth over the m = N² similarity values, floored at
/// 1e-3.
pub fn kde_bandwidth(values: &[f64]) -> f64 {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    (var.sqrt() * m.powf(-0.2)).max(1e-3)
}

const KDE_GRID: usize = 512;

/// H = −∫ f̂ log f̂ over a Gaussian KDE of Γ's entries, trapezoid rule on a
/// 512-point grid spanning [min(Γ) − 3h, max(Γ) + 3h].
pub fn patch_entropy(gamma: &Tensor) -> Result<PatchEntropy> {
    let shape = gamma.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::contract(format!(
            "similarity matrix must be square, got {shape:?}"
        )));
    }
    if shape[0] < 2 {
        return Err(Error::contract(
            "patch entropy needs at least 2 patches (N >= 2)",
        ));
    }
    let values: Vec<f64> = gamma.data().iter().map(|&v| v as f64).collect();
    let h = kde_bandwidth(&values);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let dx = (hi - lo) / (KDE_GRID - 1) as f64;
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let mut integrand = [0.0f64; KDE_GRID];
    for (g, slot) in integrand.iter_mut().enumerate() {
        let x = lo + g as f64 * dx;
        let mut density = 0.0f64;
        for &v in &values {
            let t = (x - v) / h;
            density += (-0.5 * t * t).exp();
        }
        density *= norm;
        *slot = if density > 0.0 {
            -density * density.ln()
        } else {
            0.0
        };
    }
    let mut entropy = 0.0f64;
    for g in 0..KDE_GRID - 1 {
        entropy += 0.5 * (integrand[g] + integrand[g + 1]) * dx;
    }
    Ok(PatchEntropy {
        value: entropy,
        bandwidth: h,
    })
}

/// Final-block patch features (class token excluded) for every image.
pub fn patch_features(model: &Model, images: &Tensor) -> Result<Vec<Tensor>> {
    let n = images.shape()[0];
    let mut feats = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = 64.min(n - start);
        let slice = images.slice_batch(start, len)?;
        let mut tape = Tape::new();
        let mut cfg = RunCfg {
            mode: Mode::Eval,
            ..RunCfg::eval(&FloatPolicy)
        };
        cfg.capture_patches = true;
        let out = model.run(&mut tape, &slice, &cfg)?;
        feats.extend(out.patches);
        start += len;
    }
    Ok(feats)
}

/// Stage-2 patch filtering: keep the ⌈N(1−r)⌉ highest-entropy samples per
/// class; ties break on sample id ascending. The model must be BN-free.
/// Returns (entropies, bandwidths, kept flags) aligned with the pool order.
pub fn patch_filter(
    model: &Model,
    images: &Tensor,
    ids: &[u64],
    classes: &[u16],
    r: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<bool>)> {
    if model.has_bn() {
        return Err(Error::contract(
            "patch filter routed to a model with BatchNorm layers; the pipeline should have chosen the BN filter",
        ));
    }
    if !(0.0..1.0).contains(&r) {
        return Err(Error::contract(format!(
            "filter ratio must be in [0,1), got {r}"
        )));
    }
    let feats = patch_features(model, images)?;
    let mut entropies = Vec::with_capacity(feats.len());
    let mut bandwidths = Vec::with_capacity(feats.len());
    for (i, f) in feats.iter().enumerate() {
        let gamma = patch_similarity(f).map_err(|e| match e {
            Error::Scoring(msg) => Error::Scoring(format!("sample id {}: {msg}", ids[i])),
            other => other,
        })?;
        let h = patch_entropy(&gamma)?;
        entropies.push(h.value);
        bandwidths.push(h.bandwidth);
    }
    let kept = keep_highest_per_class(ids, classes, &entropies, r);
    Ok((entropies, bandwidths, kept))
}
