//! Candidate image production: prompts, procedural synthesis, corruption,
//! dataset files, and the external generation client.

pub mod client;
pub mod corrupt;
pub mod io;
pub mod prompt;
pub mod synth;

use crate::error::{Error, Result};
use crate::nnkit::tensor::Tensor;

pub use client::{generate_external, generate_pool, GenRequest};
pub use corrupt::corrupt;
pub use io::{load_dataset, save_dataset};
pub use prompt::{build_prompt, parse_prompt, sample_prompt, PromptSpec, TEMPLATES};
pub use synth::{synth_dataset, synth_images, CLASS_NAMES};

/// Where a dataset's images came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    External,
    RealScarce,
}

/// A labeled image set: `[N,3,32,32]` pixels in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u16>,
    pub class_names: Vec<String>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u16>, provenance: Provenance) -> Result<Dataset> {
        let shape = images.shape();
        if shape.len() != 4 || shape[0] != labels.len() {
            return Err(Error::contract(format!(
                "dataset images {shape:?} do not match {} labels",
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::contract("dataset must hold at least one image"));
        }
        let class_names: Vec<String> = synth::CLASS_NAMES.iter().map(|s| s.to_string()).collect();
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_names.len()) {
            return Err(Error::contract(format!(
                "label {bad} outside the {}-class space",
                class_names.len()
            )));
        }
        Ok(Dataset {
            images,
            labels,
            class_names,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Concatenate datasets (images and labels); provenance comes from the
    /// first part.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero datasets"))?;
        let images =
            Tensor::concat_batch(&parts.iter().map(|d| d.images.clone()).collect::<Vec<_>>())?;
        let labels: Vec<u16> = parts.iter().flat_map(|d| d.labels.clone()).collect();
        Dataset::new(images, labels, first.provenance)
    }

    /// Subset by row indices.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let images = self.images.gather_batch(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(images, labels, self.provenance)
    }
}
