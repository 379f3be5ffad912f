//! In-distribution selection of candidate images.
//!
//! Three scoring mechanisms — energy scores on logits, BatchNorm sensitivity
//! (leave-one-out change in BN distance), and differential entropy of patch
//! similarities — composed into a two-stage pipeline: energy filtering
//! first, then BN filtering for models with BatchNorm layers or patch
//! filtering for BN-free (ViT) models.

pub mod bn;
pub mod energy;
pub mod patch;
pub mod pipeline;

use crate::nnkit::tensor::Tensor;

pub use bn::{bn_distance, bn_filter, bn_sensitivity, bn_sensitivity_all, observe_batch, BnStats};
pub use energy::{energy_filter, energy_score, EnergyForm, EnergyScore};
pub use patch::{patch_entropy, patch_filter, patch_similarity, PatchEntropy};
pub use pipeline::{run_pipeline, write_report, FilterCfg, FilterReport, ScoredSample};

/// A pool of candidate images with stable sample ids.
#[derive(Debug, Clone)]
pub struct Pool {
    /// `[N,3,32,32]` pixel data in [0,1].
    pub images: Tensor,
    pub labels: Vec<u16>,
    /// Stable ids used for tie-breaking and manifests; strictly increasing
    /// is not required but ids must be unique.
    pub ids: Vec<u64>,
}

impl Pool {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
