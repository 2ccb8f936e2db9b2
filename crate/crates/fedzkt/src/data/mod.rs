//! Dataset ingestion (IDX files, synthetic fixtures) and client
//! partitioning schemes.

mod idx;
mod partition;
mod synthetic;

pub use idx::{load_idx_dataset, save_idx_dataset};
pub use partition::{
    make_partition, partition_dirichlet, partition_iid, partition_quantity_skew, PartitionPlan,
    PartitionScheme,
};
pub use synthetic::{make_noise_dataset, make_synthetic_dataset};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps a raw byte to the value range used everywhere in the pipeline.
pub fn normalize_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Inverse of [`normalize_byte`] with rounding back to the byte grid.
pub fn denormalize_to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Images in [-1, 1] with integer labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledDataset {
    /// `images` must be [N, C, H, W] with N > 0 and match `labels`; every
    /// label must be below `classes`.
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[0] == 0 {
            return Err(Error::InvalidArgument(format!(
                "images must be a non-empty [N, C, H, W] tensor, got {shape:?}"
            )));
        }
        if labels.len() != shape[0] {
            return Err(Error::LengthMismatch {
                context: "dataset labels",
                left: labels.len(),
                right: shape[0],
            });
        }
        if classes == 0 {
            return Err(Error::InvalidArgument("classes must be positive".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(LabeledDataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-sample image shape [C, H, W].
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gathers the given rows into a new dataset (classes preserved).
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let (images, labels) = self.gather(indices)?;
        LabeledDataset::new(images, labels, self.classes)
    }

    /// Gathers a mini-batch of images and labels by index.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty index list".into()));
        }
        let row_len = self.images.row_len();
        let mut values = Vec::with_capacity(indices.len() * row_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "index {i} out of range for dataset of {}",
                    self.len()
                )));
            }
            values.extend_from_slice(self.images.row(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        Ok((Tensor::from_values(&shape, values)?, labels))
    }

    /// Sample count per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.classes];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }
}
