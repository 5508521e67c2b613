use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, SplitTag, Splits};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn default_spread() -> f64 {
    1.0
}

/// Gaussian-cluster classification data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    /// Per-coordinate standard deviation around each class centre.
    pub noise: f64,
    /// Fraction of labels replaced by a uniformly chosen different class.
    pub label_flip: f64,
    /// Fixes the class centres.
    pub seed: u64,
    /// Selects an independent sample stream around the same centres.
    #[serde(default)]
    pub stream: u64,
    /// Standard deviation of the centre coordinates.
    #[serde(default = "default_spread")]
    pub spread: f64,
}

impl BlobSpec {
    pub fn new(classes: usize, dim: usize, samples: usize, noise: f64, label_flip: f64, seed: u64) -> Self {
        BlobSpec {
            classes,
            dim,
            samples,
            noise,
            label_flip,
            seed,
            stream: 0,
            spread: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Argument(format!(
                "blobs need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.dim == 0 || self.samples == 0 {
            return Err(Error::Argument("blob dim and samples must be positive".into()));
        }
        if !(self.noise > 0.0) || !self.noise.is_finite() {
            return Err(Error::Argument(format!(
                "blob noise must be positive, got {}",
                self.noise
            )));
        }
        if !(0.0..0.5).contains(&self.label_flip) {
            return Err(Error::Argument(format!(
                "label_flip must lie in [0, 0.5), got {}",
                self.label_flip
            )));
        }
        Ok(())
    }

    fn centres(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.classes)
            .map(|_| {
                (0..self.dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        self.spread * z
                    })
                    .collect()
            })
            .collect()
    }
}

/// Balanced Gaussian clusters (sample `i` belongs to class `i mod classes`)
/// with a fraction of labels flipped. A pure function of the spec.
pub fn make_blobs(spec: &BlobSpec, split: SplitTag) -> Result<Dataset> {
    spec.validate()?;
    let centres = spec.centres();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.stream + 1);
    let mut data = Vec::with_capacity(spec.samples * spec.dim);
    let mut labels = Vec::with_capacity(spec.samples);
    let mut clean = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let class = i % spec.classes;
        for &c in &centres[class] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(c + spec.noise * z);
        }
        let flip = rng.random::<f64>() < spec.label_flip;
        let label = if flip {
            let other = rng.random_range(0..spec.classes - 1);
            if other >= class {
                other + 1
            } else {
                other
            }
        } else {
            class
        };
        labels.push(label);
        clean.push(class);
    }
    let inputs = Tensor::new(vec![spec.samples, spec.dim], data)?;
    let mut ds = Dataset::new(inputs, labels, spec.classes, split)?;
    ds.clean_labels = Some(clean);
    Ok(ds)
}

/// Train/val/test splits around shared centres. Train and validation labels
/// carry `spec.label_flip` noise; the test split is clean.
pub fn make_blob_splits(spec: &BlobSpec, train: usize, val: usize, test: usize) -> Result<Splits<Dataset>> {
    let part = |samples, stream, flip, tag| {
        make_blobs(
            &BlobSpec {
                samples,
                stream,
                label_flip: flip,
                ..spec.clone()
            },
            tag,
        )
    };
    Ok(Splits {
        train: part(train, 0, spec.label_flip, SplitTag::Train)?,
        val: part(val, 1, spec.label_flip, SplitTag::Val)?,
        test: part(test, 2, 0.0, SplitTag::Test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let spec = BlobSpec::new(3, 4, 200, 0.5, 0.1, 11);
        assert_eq!(
            make_blobs(&spec, SplitTag::Train).unwrap(),
            make_blobs(&spec, SplitTag::Train).unwrap()
        );
        let other = BlobSpec {
            seed: 12,
            ..spec.clone()
        };
        assert_ne!(
            make_blobs(&spec, SplitTag::Train).unwrap().inputs,
            make_blobs(&other, SplitTag::Train).unwrap().inputs
        );
    }

    #[test]
    fn flip_fraction_within_binomial_band() {
        // N = 5000, rho = 0.2: 3 sigma of the binomial is 0.017.
        let ds = make_blobs(&BlobSpec::new(5, 2, 5000, 1.0, 0.2, 3), SplitTag::Train).unwrap();
        let clean = ds.clean_labels.as_ref().unwrap();
        let flipped = ds.labels.iter().zip(clean).filter(|(a, b)| a != b).count();
        let frac = flipped as f64 / 5000.0;
        assert!((0.17..=0.23).contains(&frac), "flip fraction {frac}");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(make_blobs(&BlobSpec::new(1, 2, 10, 1.0, 0.0, 0), SplitTag::Train).is_err());
        assert!(make_blobs(&BlobSpec::new(2, 2, 10, 0.0, 0.0, 0), SplitTag::Train).is_err());
        assert!(make_blobs(&BlobSpec::new(2, 2, 10, 1.0, 0.5, 0), SplitTag::Train).is_err());
    }

    #[test]
    fn splits_share_centres_and_test_is_clean() {
        let s = make_blob_splits(&BlobSpec::new(3, 2, 0, 0.01, 0.3, 4), 30, 30, 30).unwrap();
        assert_eq!(s.test.labels, s.test.clean_labels.clone().unwrap());
        // tiny noise: samples of the same class sit on the same centre across splits
        let a = s.train.inputs.row(0);
        let b = s.test.inputs.row(0);
        assert!((a[0] - b[0]).abs() < 0.1 && (a[1] - b[1]).abs() < 0.1);
    }
}
