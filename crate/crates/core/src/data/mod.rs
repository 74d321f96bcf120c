//! Labeled image sets, the synthetic generator, patient-grouped splitting and
//! the `NGDS` file format.

pub mod io;
pub mod split;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use split::{kfold_by_patient, split_stratified_by_patient, subsample_fraction, Fold, SplitReport};
pub use synth::{gen_synthetic, SynthConfig};

pub const DEFAULT_CLASS_NAMES: [&str; 3] = ["meningioma", "glioma", "pituitary"];

/// Images `[N, C, H, W]` with one class label and one patient id per image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    images: Tensor,
    labels: Vec<usize>,
    patient_ids: Vec<u32>,
    class_names: Vec<String>,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, labels: Vec<usize>, patient_ids: Vec<u32>, class_names: Vec<String>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::dim(format!("images must be [N, C, H, W], got {:?}", images.shape())));
        }
        let n = images.shape()[0];
        if labels.len() != n || patient_ids.len() != n {
            return Err(Error::contract(format!(
                "{n} images but {} labels and {} patient ids",
                labels.len(),
                patient_ids.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::contract(format!("label {bad} has no class name ({} classes)", class_names.len())));
        }
        Ok(LabeledImageSet { images, labels, patient_ids, class_names })
    }

    /// Class names `class0..classK-1` for `k` classes.
    pub fn generic_names(k: usize) -> Vec<String> {
        if k == DEFAULT_CLASS_NAMES.len() {
            DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..k).map(|i| format!("class{i}")).collect()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// `[C, H, W]` of every image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    pub fn image_tensor(&self, i: usize) -> Tensor {
        Tensor::from_parts(self.image_shape().to_vec(), self.image(i).to_vec())
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn patient_ids(&self) -> &[u32] {
        &self.patient_ids
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn patients(&self) -> BTreeSet<u32> {
        self.patient_ids.iter().copied().collect()
    }

    /// Sample indices grouped by patient, in ascending patient order.
    pub fn patient_groups(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &p) in self.patient_ids.iter().enumerate() {
            groups.entry(p).or_default().push(i);
        }
        groups
    }

    /// Set with no samples. Tensors cannot have a zero dimension, so the
    /// image buffer holds one unused zero image of the given shape.
    pub(crate) fn empty(shape: [usize; 3], class_names: Vec<String>) -> Self {
        let [c, h, w] = shape;
        LabeledImageSet {
            images: Tensor::from_parts(vec![1, c, h, w], vec![0.0; c * h * w]),
            labels: Vec::new(),
            patient_ids: Vec::new(),
            class_names,
        }
    }

    /// New set holding the given samples in the given order.
    pub fn subset(&self, indices: &[usize]) -> LabeledImageSet {
        if indices.is_empty() {
            return LabeledImageSet::empty(self.image_shape(), self.class_names.clone());
        }
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape();
        LabeledImageSet {
            images: Tensor::from_parts(vec![indices.len(), c, h, w], data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            patient_ids: indices.iter().map(|&i| self.patient_ids[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

/// Splits `total` into parts proportional to `weights` using the
/// largest-remainder method; ties go to the lower index.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut parts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - parts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        parts[i] += 1;
        left -= 1;
    }
    parts
}
