//! Candidate pool and dataset construction shared by the commands.
//!
//! Pools are a deterministic function of (config, seed): per class, a clean
//! part and an optionally corrupted part, ordered clean-then-corrupt with
//! globally increasing ids. The evaluation set is fixed across seeds so
//! accuracies stay comparable.

use genq_core::datasrc::{
    build_prompt, corrupt, generate_pool, sample_prompt, synth_images, Dataset, GenRequest,
    PromptSpec, CLASS_NAMES,
};
use genq_core::error::Result;
use genq_core::filter::Pool;
use genq_core::nnkit::rng::Rng;
use genq_core::nnkit::tensor::Tensor;

use crate::config::ExperimentConfig;

pub const EVAL_SEED: u64 = 0x4556_414c; // "EVAL"

pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    Rng::new(seed).split(tag).next_u64()
}

/// Round-robin kept ids across classes (ascending ids within each class),
/// so any prefix of the result is as class-balanced as possible. `labels`
/// is indexed by sample id.
pub fn class_balanced_order(kept_ids: &[u64], labels: &[u16]) -> Vec<u64> {
    let mut classes: Vec<u16> = kept_ids.iter().map(|&id| labels[id as usize]).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut queues: Vec<std::collections::VecDeque<u64>> = classes
        .iter()
        .map(|&c| {
            kept_ids
                .iter()
                .copied()
                .filter(|&id| labels[id as usize] == c)
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(kept_ids.len());
    while out.len() < kept_ids.len() {
        for q in &mut queues {
            if let Some(id) = q.pop_front() {
                out.push(id);
            }
        }
    }
    out
}

pub fn train_set(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    genq_core::datasrc::synth_dataset(
        cfg.train.images_per_class,
        derive_seed(seed, 0x7472), // "tr"
    )
}

/// Held-out evaluation set, identical for every seed and command.
pub fn eval_set(cfg: &ExperimentConfig) -> Result<Dataset> {
    genq_core::datasrc::synth_dataset(cfg.train.eval_per_class, EVAL_SEED)
}

#[derive(Debug, Clone)]
pub struct BuiltPool {
    pub pool: Pool,
    /// True for samples that went through the corruption pass.
    pub corrupt: Vec<bool>,
}

impl BuiltPool {
    pub fn clean_fraction_of(&self, kept: impl Iterator<Item = u64>) -> f64 {
        let mut total = 0usize;
        let mut clean = 0usize;
        for id in kept {
            total += 1;
            if !self.corrupt[id as usize] {
                clean += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            clean as f64 / total as f64
        }
    }

    /// Proportional per-class prefix: the first ⌊take·(1−f)⌋ clean and
    /// remaining corrupt samples of each class, preserving pool order.
    pub fn subset_per_class(&self, take_per_class: usize) -> Result<BuiltPool> {
        let n = self.pool.len();
        let mut chosen = Vec::new();
        let classes: Vec<u16> = {
            let mut c = self.pool.labels.clone();
            c.sort_unstable();
            c.dedup();
            c
        };
        for class in classes {
            let clean_idx: Vec<usize> = (0..n)
                .filter(|&i| self.pool.labels[i] == class && !self.corrupt[i])
                .collect();
            let corrupt_idx: Vec<usize> = (0..n)
                .filter(|&i| self.pool.labels[i] == class && self.corrupt[i])
                .collect();
            let class_total = clean_idx.len() + corrupt_idx.len();
            let take = take_per_class.min(class_total);
            let frac = corrupt_idx.len() as f64 / class_total.max(1) as f64;
            let take_corrupt = ((take as f64) * frac).round() as usize;
            let take_corrupt = take_corrupt.min(corrupt_idx.len()).min(take);
            let take_clean = (take - take_corrupt).min(clean_idx.len());
            chosen.extend_from_slice(&clean_idx[..take_clean]);
            chosen.extend_from_slice(&corrupt_idx[..take_corrupt]);
        }
        chosen.sort_unstable();
        let images = self.pool.images.gather_batch(&chosen)?;
        let labels = chosen.iter().map(|&i| self.pool.labels[i]).collect();
        let ids = chosen.iter().map(|&i| self.pool.ids[i]).collect();
        let corrupt = chosen.iter().map(|&i| self.corrupt[i]).collect();
        Ok(BuiltPool {
            pool: Pool {
                images,
                labels,
                ids,
            },
            corrupt,
        })
    }
}

/// Build the candidate pool for one seed: `n_gen` images split evenly over
/// the classes, a `corrupt_fraction` of each class corrupted at the
/// configured severity. When a generation endpoint is configured, clean
/// candidates come from the external service; otherwise from the
/// procedural source.
pub fn build_pool(cfg: &ExperimentConfig, seed: u64) -> Result<BuiltPool> {
    build_pool_sized(cfg, seed, cfg.pool.n_gen / 10)
}

pub fn build_pool_sized(cfg: &ExperimentConfig, seed: u64, per_class: usize) -> Result<BuiltPool> {
    let endpoint = cfg.endpoint();
    let mut images: Vec<Tensor> = Vec::new();
    let mut labels: Vec<u16> = Vec::new();
    let mut corrupt_flags: Vec<bool> = Vec::new();
    for class in 0..CLASS_NAMES.len() {
        let n_corrupt = ((per_class as f64) * cfg.pool.corrupt_fraction).round() as usize;
        let n_corrupt = n_corrupt.min(per_class);
        let n_clean = per_class - n_corrupt;
        if n_clean > 0 {
            let clean = class_candidates(
                cfg,
                class,
                n_clean,
                derive_seed(seed, 0xc1ea_0000 + class as u64),
                endpoint.as_deref(),
            )?;
            images.push(clean.images);
            labels.extend(clean.labels);
            corrupt_flags.extend(std::iter::repeat_n(false, n_clean));
        }
        if n_corrupt > 0 {
            let source = class_candidates(
                cfg,
                class,
                n_corrupt,
                derive_seed(seed, 0xd1e7_0000 + class as u64),
                endpoint.as_deref(),
            )?;
            let dirty = corrupt(
                &source,
                cfg.pool.corrupt_severity,
                derive_seed(seed, 0xc0de_0000 + class as u64),
            )?;
            images.push(dirty.images);
            labels.extend(dirty.labels);
            corrupt_flags.extend(std::iter::repeat_n(true, n_corrupt));
        }
    }
    let images = Tensor::concat_batch(&images)?;
    let ids: Vec<u64> = (0..labels.len() as u64).collect();
    Ok(BuiltPool {
        pool: Pool {
            images,
            labels,
            ids,
        },
        corrupt: corrupt_flags,
    })
}

fn class_candidates(
    cfg: &ExperimentConfig,
    class: usize,
    count: usize,
    seed: u64,
    endpoint: Option<&str>,
) -> Result<Dataset> {
    match endpoint {
        None => synth_images(class, count, seed),
        Some(endpoint) => {
            let mut requests = Vec::with_capacity(count);
            for index in 0..count {
                let prompt_seed = derive_seed(seed, index as u64);
                let spec = PromptSpec {
                    style_token: None,
                    ..sample_prompt(CLASS_NAMES[class], prompt_seed)
                };
                let prompt = build_prompt(&spec)?;
                requests.push(GenRequest::with_options(
                    prompt,
                    prompt_seed,
                    cfg.generation.guidance_scale,
                    cfg.generation.steps,
                )?);
            }
            let tensors = generate_pool(&requests, endpoint, cfg.generation.parallel)?;
            let images = Tensor::stack(&tensors)?;
            Dataset::new(
                images,
                vec![class as u16; count],
                genq_core::datasrc::Provenance::External,
            )
        }
    }
}
