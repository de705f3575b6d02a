//! Labelled image domains: the in-memory type, the synthetic generator and
//! the on-disk format.

mod io;
mod synth;

pub use io::{load, save, DATASET_FORMAT_VERSION};
pub use synth::{generate, Glyph, ShiftSpec, Stroke, MAX_CLASSES};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// `manifest.json` contents. Keys this version does not know are kept in
/// `extra` and written back unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub shape: [usize; 4],
    pub dtype: String,
    pub label_count: usize,
    pub domain_tag: Domain,
    #[serde(default)]
    pub generator: serde_json::Value,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// Images in `[0, 1]` with zero-based class labels.
///
/// Labels are only reachable through [`DomainDataset::labels`]; adaptation
/// entry points take image tensors, so they cannot observe target labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    images: Tensor,
    labels: Vec<usize>,
    manifest: Manifest,
}

impl DomainDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, manifest: Manifest) -> crate::Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[0] != labels.len() {
            return Err(crate::Error::Data(format!(
                "images {shape:?} do not match {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= manifest.label_count) {
            return Err(crate::Error::Data(format!(
                "label {bad} outside [0, {})",
                manifest.label_count
            )));
        }
        Ok(Self {
            images,
            labels,
            manifest,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// Ground-truth labels. Used for supervised source training and for
    /// evaluation only. Zero-based in memory.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn manifest_mut(&mut self) -> &mut Manifest {
        &mut self.manifest
    }

    pub fn domain(&self) -> Domain {
        self.manifest.domain_tag
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.manifest.label_count
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    /// Subset by sample index, keeping the manifest's generator record.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let images = self.images.select_leading(indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let mut manifest = self.manifest.clone();
        manifest.shape[0] = indices.len();
        Self {
            images,
            labels,
            manifest,
        }
    }

    /// Deterministic stratified split: every fifth sample of each class is
    /// held out. Returns `(train, test)` index lists.
    pub fn holdout_split(&self) -> (Vec<usize>, Vec<usize>) {
        let mut seen = vec![0usize; self.classes()];
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, &l) in self.labels.iter().enumerate() {
            if seen[l] % 5 == 4 {
                test.push(i);
            } else {
                train.push(i);
            }
            seen[l] += 1;
        }
        (train, test)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}
