//! Datasets, long-tailed subsetting and synthetic stand-ins for image data.

mod cifar;
mod profile;
mod synthetic;

use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{MbjError, Result};
use crate::scalar::Scalar;

pub use cifar::{load_cifar, CifarVariant};
pub use profile::{
    build_longtail_profile, subset_dataset, write_profile_csv, HeadTailSplit, LongTailProfile,
    SubsetTarget, TailRole,
};
pub use synthetic::{
    make_retrieval_benchmark, make_synthetic_embeddings, RetrievalBenchmark,
    RetrievalBenchmarkConfig, SyntheticEmbeddingSet,
};

/// Layout of one flattened input row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputShape {
    Flat { dim: usize },
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl InputShape {
    pub fn len(&self) -> usize {
        match *self {
            InputShape::Flat { dim } => dim,
            InputShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A labelled set of inputs, one row per sample.
///
/// `source_index` keeps each row's position in the dataset it was cut
/// from, so manifests stay traceable after subsetting.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Array2<T>,
    pub labels: Vec<usize>,
    pub cameras: Option<Vec<u32>>,
    pub source_index: Vec<usize>,
    pub shape: InputShape,
    pub class_count: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        inputs: Array2<T>,
        labels: Vec<usize>,
        shape: InputShape,
        class_count: usize,
    ) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(MbjError::Shape {
                expected: format!("{} rows", labels.len()),
                got: format!("{} rows", inputs.nrows()),
            });
        }
        if inputs.ncols() != shape.len() {
            return Err(MbjError::Shape {
                expected: format!("{} columns", shape.len()),
                got: format!("{} columns", inputs.ncols()),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(MbjError::LabelOutOfRange {
                label,
                classes: class_count,
            });
        }
        let n = labels.len();
        Ok(Dataset {
            inputs,
            labels,
            cameras: None,
            source_index: (0..n).collect(),
            shape,
            class_count,
        })
    }

    pub fn with_cameras(mut self, cameras: Vec<u32>) -> Result<Self> {
        if cameras.len() != self.len() {
            return Err(MbjError::Shape {
                expected: format!("{} camera ids", self.len()),
                got: format!("{}", cameras.len()),
            });
        }
        self.cameras = Some(cameras);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.shape.len()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, T> {
        self.inputs.row(i)
    }

    /// Number of samples per class, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of the samples of each class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset<T> {
        Dataset {
            inputs: self.inputs.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            cameras: self
                .cameras
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            source_index: indices.iter().map(|&i| self.source_index[i]).collect(),
            shape: self.shape,
            class_count: self.class_count,
        }
    }

    /// Keeps only samples whose label satisfies `keep`, relabelling the
    /// survivors densely in ascending label order.
    pub fn filter_classes(&self, keep: impl Fn(usize) -> bool) -> Dataset<T> {
        let mut remap = vec![None; self.class_count];
        let mut next = 0;
        for (c, slot) in remap.iter_mut().enumerate() {
            if keep(c) {
                *slot = Some(next);
                next += 1;
            }
        }
        let indices: Vec<usize> = (0..self.len())
            .filter(|&i| remap[self.labels[i]].is_some())
            .collect();
        let mut out = self.select(&indices);
        for l in out.labels.iter_mut() {
            *l = remap[*l].expect("kept class");
        }
        out.class_count = next;
        out
    }
}

/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path_or_index: serde_json::Value,
    pub label: usize,
    pub split: String,
}

/// Writes `{path_or_index, label, split}` JSON lines, one per sample.
pub fn write_manifest<T: Scalar>(dataset: &Dataset<T>, split: &str, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| MbjError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (&idx, &label) in dataset.source_index.iter().zip(&dataset.labels) {
        let record = ManifestRecord {
            path_or_index: idx.into(),
            label,
            split: split.to_string(),
        };
        let line = serde_json::to_string(&record).expect("manifest record serializes");
        writeln!(out, "{line}").map_err(|e| MbjError::io(path, e))?;
    }
    out.flush().map_err(|e| MbjError::io(path, e))
}
