//! Datasets, file ingestion, augmentation and synthetic transfer tasks.

mod augment;
mod csv;
mod idx;
mod synthetic;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use augment::{augment, augment_views, horizontal_flip, AugmentIds, AugmentSpec};
pub use csv::load_csv;
pub use idx::{encode_idx, load_idx, load_idx_images, load_idx_labels, parse_idx, IdxArray};
pub use synthetic::{make_synthetic_transfer_task, SyntheticTaskConfig, TransferTask};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("IDX parse error at byte {offset}: {message}")]
    Idx { offset: usize, message: String },
    #[error("CSV line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("augmentation: {0}")]
    Augment(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitTag {
    PublicPretrain,
    PrivateFinetune,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PublicPretrain => "public_pretrain",
            Self::PrivateFinetune => "private_finetune",
            Self::Test => "test",
        })
    }
}

/// Images `[N, C, H, W]` in `[0, 1]` with integer labels.
///
/// `ids` are globally unique example identifiers, used to check that no
/// example is shared between the public and private splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: SplitTag,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: SplitTag,
        images: Tensor,
        labels: Vec<usize>,
        ids: Vec<u64>,
        classes: usize,
    ) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(DataError::Invalid(format!("images must be [N, C, H, W], got {shape:?}")));
        }
        let n = shape[0];
        if labels.len() != n || ids.len() != n {
            return Err(DataError::Invalid(format!(
                "{n} images, {} labels, {} ids",
                labels.len(),
                ids.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Invalid(format!("label {bad} outside {classes} classes")));
        }
        if !images.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(DataError::Invalid("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            name: name.into(),
            split,
            images,
            labels,
            ids,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape `[C, H, W]`.
    pub fn item_shape(&self) -> &[usize] {
        self.images.item_shape()
    }

    pub fn example(&self, i: usize) -> Tensor {
        self.images.item_tensor(i)
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            split: self.split,
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// True when no example id appears in both datasets.
pub fn disjoint(a: &Dataset, b: &Dataset) -> bool {
    let seen: HashSet<u64> = a.ids.iter().copied().collect();
    b.ids.iter().all(|id| !seen.contains(id))
}
