//! Labeled datasets with stable sample ids, the stratified meta split and
//! per-epoch batching.

mod image;
mod synth;

pub use image::{load_image_dataset, load_png_dir, load_raw_binary, ImageFormat, Normalization};
pub use synth::{synth_gaussians, GaussianMixture};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{keyed_stream, stream};

/// Immutable samples: one feature row, label and id per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    ids: Vec<u64>,
    class_count: usize,
    /// `[dim]` for vectors, `[channels, height, width]` for images.
    sample_shape: Vec<usize>,
}

impl Dataset {
    /// Assigns ids `0..n` in row order.
    pub fn new(features: Tensor, labels: Vec<usize>, class_count: usize, sample_shape: Vec<usize>) -> Result<Self> {
        let ids = (0..labels.len() as u64).collect();
        Self::with_ids(features, labels, ids, class_count, sample_shape)
    }

    pub fn with_ids(
        features: Tensor,
        labels: Vec<usize>,
        ids: Vec<u64>,
        class_count: usize,
        sample_shape: Vec<usize>,
    ) -> Result<Self> {
        let (rows, cols) = features.matrix_dims();
        if features.shape().len() != 2 || rows != labels.len() || ids.len() != rows {
            return Err(Error::contract(format!(
                "features {:?} do not match {} labels and {} ids",
                features.shape(),
                labels.len(),
                ids.len()
            )));
        }
        if sample_shape.iter().product::<usize>() != cols {
            return Err(Error::contract(format!(
                "sample shape {sample_shape:?} does not describe {cols} features"
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: class_count,
            });
        }
        Ok(Self {
            features,
            labels,
            ids,
            class_count,
            sample_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn feature_dim(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows at `indices`, ids preserved.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            class_count: self.class_count,
            sample_shape: self.sample_shape.clone(),
        }
    }
}

/// Stratified hold-out of `per_class` samples per class.
///
/// Returns `(train, meta)`; the train split keeps the original order.
pub fn split_meta(dataset: &Dataset, per_class: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut by_class = vec![Vec::new(); dataset.class_count];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = stream(seed, "split");
    let mut held = vec![false; dataset.len()];
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < per_class {
            return Err(Error::InsufficientSamples {
                class,
                available: members.len(),
                required: per_class,
            });
        }
        members.shuffle(&mut rng);
        for &i in &members[..per_class] {
            held[i] = true;
        }
    }
    let (meta, train): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| held[i]);
    Ok((dataset.subset(&train), dataset.subset(&meta)))
}

/// Shuffled batch index lists for one epoch; the last batch may be short.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut keyed_stream(seed, "batches", epoch as u64));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Deterministic per-sample augmentation, seeded by sample id and epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum Augment {
    #[default]
    None,
    /// Additive Gaussian noise with this standard deviation.
    Jitter { std: f64 },
    /// Horizontal flip of image samples with probability one half.
    Flip,
}

impl Augment {
    pub fn validate(&self, sample_shape: &[usize]) -> Result<()> {
        match *self {
            Augment::Jitter { std } if !(std >= 0.0 && std.is_finite()) => {
                Err(Error::config("data.augment.std", "must be non-negative"))
            }
            Augment::Flip if sample_shape.len() != 3 => {
                Err(Error::config("data.augment", "flip needs image samples"))
            }
            _ => Ok(()),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Augment::None)
    }

    /// Applies the augmentation in place to rows of `x` whose ids are `ids`.
    pub fn apply(&self, x: &mut Tensor, ids: &[u64], sample_shape: &[usize], seed: u64, epoch: usize) {
        if self.is_none() {
            return;
        }
        let cols = x.matrix_dims().1;
        let data = x.data_mut();
        for (r, &id) in ids.iter().enumerate() {
            let key = id.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch as u64;
            let mut rng = keyed_stream(seed, "augment", key);
            let row = &mut data[r * cols..(r + 1) * cols];
            match *self {
                Augment::None => {}
                Augment::Jitter { std } => {
                    for v in row.iter_mut() {
                        let z: f64 = rng.sample(StandardNormal);
                        *v += std * z;
                    }
                }
                Augment::Flip => {
                    if rng.gen_bool(0.5) {
                        let w = sample_shape[2];
                        for line in row.chunks_mut(w) {
                            line.reverse();
                        }
                    }
                }
            }
        }
    }
}
