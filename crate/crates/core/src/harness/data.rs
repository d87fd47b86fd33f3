//! Datasets: seeded synthetic class patterns and the CIFAR-10 binary format.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::RngStream;
use crate::vitcore::{Image, ImageShape};

/// Bytes per CIFAR-10 record: one label byte and 32·32·3 pixel bytes.
pub const CIFAR_RECORD_LEN: usize = 3073;
pub const CIFAR_SHAPE: ImageShape = ImageShape {
    height: 32,
    width: 32,
    channels: 3,
};
const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("record stream of {len} bytes is not a whole number of {CIFAR_RECORD_LEN}-byte records (residue {residue})")]
    Residue { len: usize, residue: usize },
    #[error("label {label} at byte {offset} is outside 0..10")]
    BadLabel { offset: usize, label: u8 },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("dataset is empty: {0}")]
    Empty(String),
    #[error("invalid dataset spec: {0}")]
    Spec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    SyntheticClusters,
    Cifar10Binary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
}

/// Per-channel affine normalization `(x − mean) / std` applied at load time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHandle {
    pub source: DatasetSource,
    pub shape: ImageShape,
    pub classes: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    /// Constants applied to the pixels, recorded for the run manifest.
    pub normalization: Option<ChannelNorm>,
}

impl DatasetHandle {
    pub fn split_sizes(&self) -> (usize, usize) {
        (self.train.len(), self.val.len())
    }

    pub fn class_histogram(samples: &[Sample], classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for s in samples {
            h[s.label] += 1;
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
}

/// Class-mean patterns plus Gaussian noise.
///
/// Each class mean has i.i.d. standard-normal pixels. Every sample is its
/// class mean plus `noise`-scaled standard-normal noise. Train and validation
/// samples come from disjoint substreams; labels are interleaved.
pub fn synth_dataset(spec: &SynthSpec, shape: ImageShape, stream: RngStream) -> Result<DatasetHandle, DataError> {
    if spec.classes < 2 || spec.train_per_class == 0 || shape.is_empty() {
        return Err(DataError::Spec(format!(
            "need at least 2 classes and 1 sample per class, got {} / {}",
            spec.classes, spec.train_per_class
        )));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(DataError::Spec(format!("noise must be non-negative, got {}", spec.noise)));
    }
    let len = shape.len();
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| stream.substream(c as u64).gaussian(1, len).into_vec())
        .collect();
    let draw = |offset: u64, per_class: usize| -> Vec<Sample> {
        let mut s = stream.substream(offset).sampler();
        let mut out = Vec::with_capacity(per_class * spec.classes);
        for _ in 0..per_class {
            for (label, mean) in means.iter().enumerate() {
                let data = mean.iter().map(|m| m + spec.noise * s.normal()).collect();
                out.push(Sample {
                    image: Image { shape, data },
                    label,
                });
            }
        }
        out
    };
    Ok(DatasetHandle {
        source: DatasetSource::SyntheticClusters,
        shape,
        classes: spec.classes,
        train: draw(1 << 32, spec.train_per_class),
        val: draw((1 << 32) + 1, spec.val_per_class),
        normalization: None,
    })
}

/// Class means of `train`, then the fraction of `eval` closest (Euclidean)
/// to its own class mean.
pub fn nearest_mean_accuracy(train: &[Sample], eval: &[Sample], classes: usize) -> f64 {
    if eval.is_empty() || train.is_empty() {
        return 0.0;
    }
    let len = train[0].image.data.len();
    let mut sums = vec![vec![0.0; len]; classes];
    let mut counts = vec![0usize; classes];
    for s in train {
        counts[s.label] += 1;
        for (a, v) in sums[s.label].iter_mut().zip(&s.image.data) {
            *a += v;
        }
    }
    for (sum, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            sum.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let correct = eval
        .iter()
        .filter(|s| {
            let best = (0..classes)
                .filter(|&c| counts[c] > 0)
                .map(|c| {
                    let d: f64 = sums[c].iter().zip(&s.image.data).map(|(m, x)| (m - x).powi(2)).sum();
                    (c, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c);
            best == Some(s.label)
        })
        .count();
    correct as f64 / eval.len() as f64
}

/// Parses a CIFAR-10 binary record stream. Pixels are scaled to `[0, 1]`
/// and converted from the planar on-disk layout to height × width × channel.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<Sample>, DataError> {
    let residue = bytes.len() % CIFAR_RECORD_LEN;
    if residue != 0 {
        return Err(DataError::Residue {
            len: bytes.len(),
            residue,
        });
    }
    let plane = 32 * 32;
    bytes
        .chunks_exact(CIFAR_RECORD_LEN)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0];
            if label as usize >= CIFAR_CLASSES {
                return Err(DataError::BadLabel {
                    offset: i * CIFAR_RECORD_LEN,
                    label,
                });
            }
            let px = &rec[1..];
            let mut data = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                for c in 0..3 {
                    data.push(px[c * plane + p] as f64 / 255.0);
                }
            }
            Ok(Sample {
                image: Image {
                    shape: CIFAR_SHAPE,
                    data,
                },
                label: label as usize,
            })
        })
        .collect()
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Training files `data_batch_*.bin` (sorted) and validation file
/// `test_batch.bin` inside `dir`.
pub fn cifar10_files(dir: &Path) -> Result<(Vec<PathBuf>, PathBuf), DataError> {
    let entries = std::fs::read_dir(dir).map_err(|e| DataError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;
    let mut train: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    train.sort();
    if train.is_empty() {
        return Err(DataError::Empty(format!("no data_batch_*.bin in {}", dir.display())));
    }
    Ok((train, dir.join("test_batch.bin")))
}

/// Loads CIFAR-10 from a directory in the standard binary layout, keeping at
/// most `limit` training and `limit / 5` validation records when given.
/// Per-channel mean and standard deviation are measured on the kept training
/// records and applied to both splits.
pub fn load_cifar10(dir: &Path, limit: Option<usize>) -> Result<DatasetHandle, DataError> {
    let (train_files, val_file) = cifar10_files(dir)?;
    let mut train = Vec::new();
    for f in &train_files {
        train.extend(parse_cifar10(&read(f)?)?);
    }
    let mut val = parse_cifar10(&read(&val_file)?)?;
    if let Some(n) = limit {
        train.truncate(n);
        val.truncate((n / 5).max(1));
    }
    if train.is_empty() {
        return Err(DataError::Empty("no training records".into()));
    }
    let norm = channel_stats(&train, 3);
    for s in train.iter_mut().chain(val.iter_mut()) {
        apply_norm(&mut s.image, &norm);
    }
    Ok(DatasetHandle {
        source: DatasetSource::Cifar10Binary,
        shape: CIFAR_SHAPE,
        classes: CIFAR_CLASSES,
        train,
        val,
        normalization: Some(norm),
    })
}

fn channel_stats(samples: &[Sample], channels: usize) -> ChannelNorm {
    let mut sum = vec![0.0; channels];
    let mut sq = vec![0.0; channels];
    let mut count = 0usize;
    for s in samples {
        for px in s.image.data.chunks_exact(channels) {
            for c in 0..channels {
                sum[c] += px[c];
                sq[c] += px[c] * px[c];
            }
            count += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / count as f64 - m * m).max(1e-12).sqrt())
        .collect();
    ChannelNorm { mean, std }
}

fn apply_norm(img: &mut Image, norm: &ChannelNorm) {
    let c = norm.mean.len();
    for px in img.data.chunks_exact_mut(c) {
        for k in 0..c {
            px[k] = (px[k] - norm.mean[k]) / norm.std[k];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> ImageShape {
        ImageShape {
            height: 4,
            width: 4,
            channels: 2,
        }
    }

    #[test]
    fn noiseless_clusters_are_separable() {
        let spec = SynthSpec {
            classes: 5,
            train_per_class: 3,
            val_per_class: 4,
            noise: 0.0,
        };
        let d = synth_dataset(&spec, shape(), RngStream::new(1, 0)).unwrap();
        assert_eq!(d.split_sizes(), (15, 20));
        assert_eq!(nearest_mean_accuracy(&d.train, &d.val, 5), 1.0);
        assert_eq!(d, synth_dataset(&spec, shape(), RngStream::new(1, 0)).unwrap());
    }

    #[test]
    fn cifar_record_layout() {
        let mut rec = vec![0u8; CIFAR_RECORD_LEN];
        rec[0] = 7;
        rec[1] = 255; // red, pixel (0, 0)
        rec[1 + 1024 + 33] = 51; // green, pixel (1, 1)
        let s = parse_cifar10(&rec).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].label, 7);
        assert_eq!(s[0].image.get(0, 0, 0), 1.0);
        assert_eq!(s[0].image.get(1, 1, 1), 0.2);
        assert_eq!(s[0].image.get(1, 1, 0), 0.0);
    }

    #[test]
    fn cifar_errors() {
        assert_eq!(
            parse_cifar10(&[0u8; 3075]),
            Err(DataError::Residue { len: 3075, residue: 2 })
        );
        let mut two = vec![0u8; 2 * CIFAR_RECORD_LEN];
        two[CIFAR_RECORD_LEN] = 10;
        assert_eq!(
            parse_cifar10(&two),
            Err(DataError::BadLabel {
                offset: CIFAR_RECORD_LEN,
                label: 10
            })
        );
        assert_eq!(parse_cifar10(&[]).unwrap().len(), 0);
    }
}
