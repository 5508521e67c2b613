//! CIFAR-10/100 binary containers: fixed-size records of label byte(s)
//! followed by 32×32 R, G, B planes in row-major order.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_IMAGE_LEN: usize = 3 * 32 * 32;
pub const CIFAR10_RECORD_LEN: usize = 1 + CIFAR_IMAGE_LEN;
pub const CIFAR100_RECORD_LEN: usize = 2 + CIFAR_IMAGE_LEN;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => CIFAR10_RECORD_LEN,
            CifarVariant::Cifar100 => CIFAR100_RECORD_LEN,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

fn image_from_bytes(pixels: &[u8]) -> Tensor<f64> {
    Tensor::new(vec![3, 32, 32], pixels.iter().map(|&b| b as f64 / 255.0).collect()).expect("cifar image shape")
}

/// Parses one 3073-byte CIFAR-10 record into `(label, [3, 32, 32] image in [0, 1])`.
pub fn parse_cifar10_record(bytes: &[u8]) -> Result<(usize, Tensor<f64>)> {
    if bytes.len() != CIFAR10_RECORD_LEN {
        return Err(Error::Format {
            offset: bytes.len().min(CIFAR10_RECORD_LEN) as u64,
            detail: format!(
                "CIFAR-10 record must be {CIFAR10_RECORD_LEN} bytes, got {}",
                bytes.len()
            ),
        });
    }
    let label = bytes[0] as usize;
    if label >= 10 {
        return Err(Error::Format {
            offset: 0,
            detail: format!("CIFAR-10 label {label} not in [0, 10)"),
        });
    }
    Ok((label, image_from_bytes(&bytes[1..])))
}

/// Parses one 3074-byte CIFAR-100 record; returns the fine label.
pub fn parse_cifar100_record(bytes: &[u8]) -> Result<(usize, Tensor<f64>)> {
    if bytes.len() != CIFAR100_RECORD_LEN {
        return Err(Error::Format {
            offset: bytes.len().min(CIFAR100_RECORD_LEN) as u64,
            detail: format!(
                "CIFAR-100 record must be {CIFAR100_RECORD_LEN} bytes, got {}",
                bytes.len()
            ),
        });
    }
    if bytes[0] >= 20 {
        return Err(Error::Format {
            offset: 0,
            detail: format!("CIFAR-100 coarse label {} not in [0, 20)", bytes[0]),
        });
    }
    let fine = bytes[1] as usize;
    if fine >= 100 {
        return Err(Error::Format {
            offset: 1,
            detail: format!("CIFAR-100 fine label {fine} not in [0, 100)"),
        });
    }
    Ok((fine, image_from_bytes(&bytes[2..])))
}

/// Inverse of [`parse_cifar10_record`] for images whose values are multiples
/// of 1/255.
pub fn serialize_cifar10_record(label: usize, image: &Tensor<f64>) -> Result<Vec<u8>> {
    if label >= 10 {
        return Err(Error::Argument(format!("CIFAR-10 label {label} not in [0, 10)")));
    }
    if image.shape() != [3, 32, 32] {
        return Err(Error::shape("serialize_cifar10_record", format!("{:?}", image.shape())));
    }
    let mut out = Vec::with_capacity(CIFAR10_RECORD_LEN);
    out.push(label as u8);
    for &v in image.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Argument(format!("pixel value {v} outside [0, 1]")));
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

/// Reads every record of a CIFAR binary file. Errors carry the absolute byte
/// offset within the file.
pub fn load_cifar_file(path: &Path, variant: CifarVariant, split: SplitTag) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let rec = variant.record_len();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::Format {
            offset: (bytes.len() / rec * rec) as u64,
            detail: format!(
                "{}: length {} is not a positive multiple of {rec}",
                path.display(),
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / rec;
    let mut data = Vec::with_capacity(n * CIFAR_IMAGE_LEN);
    let mut labels = Vec::with_capacity(n);
    for (i, chunk) in bytes.chunks(rec).enumerate() {
        let parsed = match variant {
            CifarVariant::Cifar10 => parse_cifar10_record(chunk),
            CifarVariant::Cifar100 => parse_cifar100_record(chunk),
        };
        let (label, image) = parsed.map_err(|e| match e {
            Error::Format { offset, detail } => Error::Format {
                offset: (i * rec) as u64 + offset,
                detail: format!("{}: record {i}: {detail}", path.display()),
            },
            other => other,
        })?;
        labels.push(label);
        data.extend_from_slice(image.data());
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, variant.classes(), split)
}

/// Writes `n` records in the CIFAR-10 layout whose images carry a
/// learnable class signal: a class-specific tint and oriented grating with a
/// random phase, plus pixel noise. Class of record `i` is `i mod 10`. For use
/// where the real archive is unavailable.
pub fn synthesize_cifar10(n: usize, seed: u64) -> Vec<u8> {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).expect("valid normal");
    let mut out = Vec::with_capacity(n * CIFAR10_RECORD_LEN);
    for i in 0..n {
        let class = i % 10;
        let angle = class as f64 * std::f64::consts::PI / 10.0;
        let freq = 0.25 + 0.08 * (class % 3) as f64;
        let tint = [
            0.35 + 0.3 * ((class * 7 % 10) as f64 / 9.0),
            0.35 + 0.3 * ((class * 3 % 10) as f64 / 9.0),
            0.35 + 0.3 * ((class * 9 % 10) as f64 / 9.0),
        ];
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (ca, sa) = (angle.cos(), angle.sin());
        out.push(class as u8);
        for tone in tint {
            for y in 0..32 {
                for x in 0..32 {
                    let u = ca * x as f64 + sa * y as f64;
                    let v = tone + 0.15 * (freq * u + phase).sin() + noise.sample(&mut rng);
                    out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
    }
    out
}

/// A class-balanced subset of `total` samples chosen by `seed`, in the
/// original sample order.
pub fn stratified_subset(ds: &Dataset, total: usize, seed: u64) -> Result<Dataset> {
    let classes = ds.num_classes;
    let per_class = total / classes;
    if per_class == 0 {
        return Err(Error::Argument(format!(
            "subset of {total} cannot cover {classes} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(per_class * classes);
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..ds.labels.len()).filter(|&i| ds.labels[i] == c).collect();
        if idx.len() < per_class {
            return Err(Error::Argument(format!(
                "class {c} has {} samples, subset needs {per_class}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..per_class]);
    }
    chosen.sort_unstable();
    ds.subset(&chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_zero_record() {
        let (label, img) = parse_cifar10_record(&[0u8; CIFAR10_RECORD_LEN]).unwrap();
        assert_eq!(label, 0);
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn white_record_label_nine() {
        let mut rec = vec![255u8; CIFAR10_RECORD_LEN];
        rec[0] = 9;
        let (label, img) = parse_cifar10_record(&rec).unwrap();
        assert_eq!(label, 9);
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn malformed_records() {
        let err = parse_cifar10_record(&[0u8; 100]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 100, .. }));
        let mut rec = vec![0u8; CIFAR10_RECORD_LEN];
        rec[0] = 10;
        assert!(matches!(
            parse_cifar10_record(&rec),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let mut rec = vec![0u8; CIFAR100_RECORD_LEN];
        rec[0] = 3;
        rec[1] = 77;
        assert_eq!(parse_cifar100_record(&rec).unwrap().0, 77);
    }

    #[test]
    fn file_errors_report_absolute_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut bytes = vec![1u8; 2 * CIFAR10_RECORD_LEN];
        bytes[CIFAR10_RECORD_LEN] = 42;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_cifar_file(&path, CifarVariant::Cifar10, SplitTag::Train).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset == CIFAR10_RECORD_LEN as u64));
    }

    #[test]
    fn stratified_subset_is_balanced() {
        let inputs = Tensor::zeros(&[60, 2]);
        let labels = (0..60).map(|i| (i * 7) % 3).collect();
        let ds = Dataset::new(inputs, labels, 3, SplitTag::Train).unwrap();
        let sub = stratified_subset(&ds, 30, 1).unwrap();
        for c in 0..3 {
            assert_eq!(sub.labels.iter().filter(|&&y| y == c).count(), 10);
        }
        assert_eq!(sub, stratified_subset(&ds, 30, 1).unwrap());
    }

    #[test]
    fn synthetic_records_parse() {
        let bytes = synthesize_cifar10(20, 3);
        assert_eq!(bytes.len(), 20 * CIFAR10_RECORD_LEN);
        for (i, rec) in bytes.chunks(CIFAR10_RECORD_LEN).enumerate() {
            assert_eq!(parse_cifar10_record(rec).unwrap().0, i % 10);
        }
        assert_eq!(bytes, synthesize_cifar10(20, 3));
    }

    proptest! {
        #[test]
        fn parse_serialize_bijection(label in 0u8..10, pixels in proptest::collection::vec(any::<u8>(), CIFAR_IMAGE_LEN)) {
            let mut rec = vec![label];
            rec.extend_from_slice(&pixels);
            let (l, img) = parse_cifar10_record(&rec).unwrap();
            prop_assert_eq!(serialize_cifar10_record(l, &img).unwrap(), rec);
        }
    }
}
