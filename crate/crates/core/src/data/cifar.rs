//! CIFAR-10 / CIFAR-100 in the binary distribution format.
//!
//! <https://www.cs.toronto.edu/~kriz/cifar.html>

use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{Dataset, InputShape};
use crate::error::{MbjError, Result};
use crate::scalar::Scalar;

const SIDE: usize = 32;
const CHANNELS: usize = 3;
const PIXELS: usize = SIDE * SIDE * CHANNELS;

// Per-channel statistics of the CIFAR-10 training split.
const MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
const STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn dir_names(self) -> &'static [&'static str] {
        match self {
            CifarVariant::Cifar10 => &["cifar-10-batches-bin", "cifar10", "cifar-10"],
            CifarVariant::Cifar100 => &["cifar-100-binary", "cifar100", "cifar-100"],
        }
    }

    fn train_files(self) -> &'static [&'static str] {
        match self {
            CifarVariant::Cifar10 => &[
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            CifarVariant::Cifar100 => &["train.bin"],
        }
    }

    fn test_file(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "test_batch.bin",
            CifarVariant::Cifar100 => "test.bin",
        }
    }

    /// Bytes preceding the pixels of each record; CIFAR-100 stores the
    /// coarse label before the fine one.
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }
}

fn read_records(
    path: &Path,
    variant: CifarVariant,
    rows: &mut Vec<f64>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| MbjError::io(path, e))?;
    let record = variant.label_bytes() + PIXELS;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(MbjError::Format {
            path: path.to_path_buf(),
            reason: format!("length {} is not a multiple of {record}", bytes.len()),
        });
    }
    for chunk in bytes.chunks_exact(record) {
        let label = chunk[variant.label_bytes() - 1] as usize;
        if label >= variant.classes() {
            return Err(MbjError::Format {
                path: path.to_path_buf(),
                reason: format!("label {label} out of range"),
            });
        }
        labels.push(label);
        let pixels = &chunk[variant.label_bytes()..];
        for (i, &p) in pixels.iter().enumerate() {
            let c = i / (SIDE * SIDE);
            rows.push((p as f64 / 255.0 - MEAN[c]) / STD[c]);
        }
    }
    Ok(())
}

fn load_split<T: Scalar>(dir: &Path, files: &[&str], variant: CifarVariant) -> Result<Dataset<T>> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        read_records(&dir.join(f), variant, &mut rows, &mut labels)?;
    }
    let inputs = Array2::from_shape_vec((labels.len(), PIXELS), rows)
        .expect("record parser emits whole rows")
        .mapv(T::of);
    Dataset::new(
        inputs,
        labels,
        InputShape::Image {
            channels: CHANNELS,
            height: SIDE,
            width: SIDE,
        },
        variant.classes(),
    )
}

/// Locates and loads `(train, test)` under `root`, standardized per channel.
///
/// `root` may be the batch directory itself or its parent.
pub fn load_cifar<T: Scalar>(root: &Path, variant: CifarVariant) -> Result<(Dataset<T>, Dataset<T>)> {
    let mut tried: Vec<PathBuf> = vec![root.to_path_buf()];
    tried.extend(variant.dir_names().iter().map(|d| root.join(d)));
    let dir = tried
        .iter()
        .find(|d| d.join(variant.test_file()).is_file())
        .cloned()
        .ok_or_else(|| MbjError::DatasetMissing {
            name: format!("{variant:?}"),
            tried: tried.clone(),
        })?;
    let train = load_split(&dir, variant.train_files(), variant)?;
    let test = load_split(&dir, &[variant.test_file()], variant)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fake(dir: &Path, name: &str, labels: &[u8], prefix: usize) {
        let mut bytes = Vec::new();
        for &l in labels {
            bytes.extend(std::iter::repeat_n(0u8, prefix - 1));
            bytes.push(l);
            bytes.extend(std::iter::repeat_n(255u8, PIXELS));
        }
        std::fs::write(dir.join(name), bytes).unwrap();
    }

    #[test]
    fn missing_dataset_lists_paths_tried() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_cifar::<f32>(dir.path(), CifarVariant::Cifar10).unwrap_err();
        match err {
            MbjError::DatasetMissing { tried, .. } => {
                assert!(tried.iter().any(|p| p.ends_with("cifar-10-batches-bin")))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parses_cifar100_fine_labels() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("cifar-100-binary");
        std::fs::create_dir(&sub).unwrap();
        write_fake(&sub, "train.bin", &[99, 3], 2);
        write_fake(&sub, "test.bin", &[7], 2);
        let (train, test) = load_cifar::<f32>(dir.path(), CifarVariant::Cifar100).unwrap();
        assert_eq!(train.labels, vec![99, 3]);
        assert_eq!(test.labels, vec![7]);
        let expected = ((1.0 - MEAN[0]) / STD[0]) as f32;
        assert!((train.inputs[[0, 0]] - expected).abs() < 1e-6);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("test_batch.bin"), [0u8; 10]).unwrap();
        for f in CifarVariant::Cifar10.train_files() {
            std::fs::write(dir.path().join(f), [0u8; 10]).unwrap();
        }
        let err = load_cifar::<f32>(dir.path(), CifarVariant::Cifar10).unwrap_err();
        assert!(matches!(err, MbjError::Format { .. }));
    }
}
