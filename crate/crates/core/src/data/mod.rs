//! Datasets, mini-batches and the split abstraction the trainer iterates.

mod augment;
mod blobs;
mod cifar;
mod text;

pub use augment::augment_images;
pub use blobs::{make_blob_splits, make_blobs, BlobSpec};
pub use cifar::{
    load_cifar_file, parse_cifar100_record, parse_cifar10_record, serialize_cifar10_record, stratified_subset,
    synthesize_cifar10, CifarVariant, CIFAR100_RECORD_LEN, CIFAR10_RECORD_LEN, CIFAR_IMAGE_LEN,
};
pub use text::{load_char_corpus, parse_char_corpus, CharCorpus, SequenceSplit};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// What a model consumes for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Input<F: Real = f64> {
    /// `[b, ...]` feature tensor.
    Dense(Tensor<F>),
    /// Token ids laid out sample-major: `ids[i * steps + t]`.
    Tokens {
        ids: Vec<usize>,
        batch: usize,
        steps: usize,
    },
}

impl<F: Real> Input<F> {
    pub fn batch_size(&self) -> usize {
        match self {
            Input::Dense(t) => t.rows(),
            Input::Tokens { batch, .. } => *batch,
        }
    }
}

/// One mini-batch. `labels` has one entry per logit row the model emits
/// (per sample for classifiers, per sample and step for language models).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F: Real = f64> {
    pub input: Input<F>,
    pub labels: Vec<usize>,
}

/// A finite, indexable collection of samples.
pub trait Split: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn num_classes(&self) -> usize;

    fn batch<F: Real>(&self, indices: &[usize]) -> Batch<F>;

    /// Whether inputs are images that accept crop/flip augmentation.
    fn is_image(&self) -> bool {
        false
    }
}

/// Per-channel normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// A labelled classification dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, ...]` inputs.
    pub inputs: Tensor<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: SplitTag,
    /// Statistics applied by [`Dataset::normalize`], if any.
    pub normalization: Option<ChannelStats>,
    /// Labels before synthetic corruption, when known.
    pub clean_labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(inputs: Tensor<f64>, labels: Vec<usize>, num_classes: usize, split: SplitTag) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Argument("dataset must contain at least one sample".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} inputs vs {} labels", inputs.rows(), labels.len()),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Argument(format!("label {y} outside [0, {num_classes})")));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            split,
            normalization: None,
            clean_labels: None,
        })
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    fn channel_layout(&self) -> (usize, usize) {
        let s = self.sample_shape();
        if s.len() >= 3 {
            (s[0], s[1..].iter().product())
        } else {
            (s.iter().product(), 1)
        }
    }

    /// Per-channel mean and (population) standard deviation. Images use
    /// axis 1 as the channel axis; flat features are one channel each.
    pub fn channel_stats(&self) -> ChannelStats {
        let (channels, inner) = self.channel_layout();
        let per_sample = channels * inner;
        let n = (self.labels.len() * inner) as f64;
        let data = self.inputs.data();
        let mut mean = vec![0.0; channels];
        for sample in data.chunks(per_sample) {
            for c in 0..channels {
                mean[c] += sample[c * inner..(c + 1) * inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; channels];
        for sample in data.chunks(per_sample) {
            for c in 0..channels {
                var[c] += sample[c * inner..(c + 1) * inner]
                    .iter()
                    .map(|v| (v - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        ChannelStats { mean, std }
    }

    /// Standardizes with `stats` (computed on the training split). Channels
    /// with zero spread are only centred.
    pub fn normalize(&mut self, stats: &ChannelStats) -> Result<()> {
        let (channels, inner) = self.channel_layout();
        if stats.mean.len() != channels || stats.std.len() != channels {
            return Err(Error::shape(
                "normalize",
                format!("{channels} channels vs {} statistics", stats.mean.len()),
            ));
        }
        let per_sample = channels * inner;
        for (i, v) in self.inputs.data_mut().iter_mut().enumerate() {
            let c = (i % per_sample) / inner;
            let sd = if stats.std[c] > 0.0 { stats.std[c] } else { 1.0 };
            *v = (*v - stats.mean[c]) / sd;
        }
        self.normalization = Some(stats.clone());
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let cols = self.inputs.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        let mut out = Dataset::new(
            Tensor::new(shape, data)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
            self.split,
        )?;
        out.normalization = self.normalization.clone();
        out.clean_labels = self
            .clean_labels
            .as_ref()
            .map(|c| indices.iter().map(|&i| c[i]).collect());
        Ok(out)
    }
}

impl Split for Dataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn batch<F: Real>(&self, indices: &[usize]) -> Batch<F> {
        let cols = self.inputs.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend(self.inputs.row(i).iter().map(|&v| F::of(v)));
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        Batch {
            input: Input::Dense(Tensor::new(shape, data).expect("batch shape")),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn is_image(&self) -> bool {
        self.sample_shape().len() == 3
    }
}

/// Train, validation and test splits of one task.
#[derive(Clone, Debug)]
pub struct Splits<S> {
    pub train: S,
    pub val: S,
    pub test: S,
}

impl Splits<Dataset> {
    /// Normalizes all three splits with statistics from the training split.
    pub fn normalize_from_train(&mut self) -> Result<ChannelStats> {
        let stats = self.train.channel_stats();
        self.train.normalize(&stats)?;
        self.val.normalize(&stats)?;
        self.test.normalize(&stats)?;
        Ok(stats)
    }
}

/// Sample order for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_centres_train_split() {
        let inputs = Tensor::from_fn(&[50, 3, 2, 2], |i| ((i * 37 % 101) as f64) * 0.1 + (i % 3) as f64);
        let labels = (0..50).map(|i| i % 4).collect();
        let mut ds = Dataset::new(inputs, labels, 4, SplitTag::Train).unwrap();
        let stats = ds.channel_stats();
        ds.normalize(&stats).unwrap();
        let after = ds.channel_stats();
        for c in 0..3 {
            assert!(after.mean[c].abs() < 1e-6);
            assert!((after.std[c] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn epoch_order_is_a_deterministic_permutation() {
        let a = epoch_order(100, 5, 3);
        assert_eq!(a, epoch_order(100, 5, 3));
        assert_ne!(a, epoch_order(100, 5, 4));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(Dataset::new(x.clone(), vec![0, 5], 3, SplitTag::Train).is_err());
        assert!(Dataset::new(x, vec![0], 3, SplitTag::Train).is_err());
    }
}
