use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ImageShape;

/// An ordered collection of labeled images. Each row of `images` is one image
/// flattened as height x width x channels with values in `[0, 1]`.
///
/// Every sample carries the integer index it had in the source dataset, so
/// subsets and partitions can be checked for disjointness.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    name: String,
    num_classes: usize,
    shape: ImageShape,
    images: Array2<f32>,
    labels: Vec<usize>,
    indices: Vec<usize>,
    augmented: Vec<bool>,
}

impl LabeledDataset {
    /// Builds a dataset whose source indices are `0..n`.
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        shape: ImageShape,
        images: Array2<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let n = labels.len();
        Self::with_indices(name, num_classes, shape, images, labels, (0..n).collect())
    }

    pub fn with_indices(
        name: impl Into<String>,
        num_classes: usize,
        shape: ImageShape,
        images: Array2<f32>,
        labels: Vec<usize>,
        indices: Vec<usize>,
    ) -> Result<Self> {
        let name = name.into();
        if images.nrows() != labels.len() || indices.len() != labels.len() {
            return Err(Error::CountMismatch { expected: labels.len(), actual: images.nrows() });
        }
        if images.ncols() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values per image ({shape})", shape.len()),
                actual: images.ncols().to_string(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::CorruptData {
                path: name.clone().into(),
                reason: format!("label {bad} outside [0, {num_classes})"),
            });
        }
        let augmented = vec![false; labels.len()];
        Ok(Self { name, num_classes, shape, images, labels, indices, augmented })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Array2<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Source index of every sample, in order.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Whether each sample is a synthesized augmentation of its source sample.
    pub fn augmented(&self) -> &[bool] {
        &self.augmented
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Samples at the given positions, in the given order.
    pub fn select(&self, positions: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            num_classes: self.num_classes,
            shape: self.shape,
            images: self.images.select(Axis(0), positions),
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            indices: positions.iter().map(|&p| self.indices[p]).collect(),
            augmented: positions.iter().map(|&p| self.augmented[p]).collect(),
        }
    }

    /// Positions of all samples with label `class`.
    pub fn positions_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Concatenation of `self` followed by `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if other.num_classes != self.num_classes || other.shape != self.shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{} classes, {}", self.num_classes, self.shape),
                actual: format!("{} classes, {}", other.num_classes, other.shape),
            });
        }
        let images =
            ndarray::concatenate(Axis(0), &[self.images.view(), other.images.view()]).expect("matching widths");
        let mut out = self.clone();
        out.images = images;
        out.labels.extend_from_slice(&other.labels);
        out.indices.extend_from_slice(&other.indices);
        out.augmented.extend_from_slice(&other.augmented);
        Ok(out)
    }

    pub(crate) fn push_augmented(&mut self, image: &[f32], label: usize, index: usize) {
        self.images.push_row(ndarray::ArrayView1::from(image)).expect("matching width");
        self.labels.push(label);
        self.indices.push(index);
        self.augmented.push(true);
    }

    /// Content hash over shape, labels, source indices and pixel bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update((self.num_classes as u64).to_le_bytes());
        for d in [self.shape.height, self.shape.width, self.shape.channels] {
            h.update((d as u64).to_le_bytes());
        }
        for ((&y, &i), &a) in self.labels.iter().zip(&self.indices).zip(&self.augmented) {
            h.update((y as u64).to_le_bytes());
            h.update((i as u64).to_le_bytes());
            h.update([a as u8]);
        }
        for v in self.images.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Train and test portions of a registered dataset.
#[derive(Debug, Clone)]
pub struct TrainTest {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Serializable summary used in manifests and reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub len: usize,
    pub num_classes: usize,
    pub fingerprint: String,
}

impl From<&LabeledDataset> for DatasetSummary {
    fn from(d: &LabeledDataset) -> Self {
        Self { name: d.name.clone(), len: d.len(), num_classes: d.num_classes, fingerprint: d.fingerprint() }
    }
}
