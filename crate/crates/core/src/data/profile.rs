use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{MbjError, Result};
use crate::scalar::Scalar;

/// Per-class training counts of a long-tailed set, sorted head first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailProfile {
    pub class_count: usize,
    pub max_count: usize,
    pub imbalance_ratio: f64,
    pub per_class_counts: Vec<usize>,
}

/// Exponential decay `n_i = n_max * IR^(-i / (C - 1))`, truncated to an
/// integer as in the usual CIFAR-LT construction (12,406 images for
/// CIFAR-10 at IR 100).
pub fn build_longtail_profile(
    class_count: usize,
    max_count: usize,
    imbalance_ratio: f64,
) -> Result<LongTailProfile> {
    if class_count < 2 {
        return Err(MbjError::Config(format!(
            "class_count must be at least 2, got {class_count}"
        )));
    }
    if !imbalance_ratio.is_finite() || imbalance_ratio < 1.0 {
        return Err(MbjError::Config(format!(
            "imbalance_ratio must be >= 1, got {imbalance_ratio}"
        )));
    }
    if (max_count as f64) < imbalance_ratio {
        return Err(MbjError::Config(format!(
            "max_count {max_count} is smaller than imbalance_ratio {imbalance_ratio}"
        )));
    }
    let last = (class_count - 1) as f64;
    let per_class_counts: Vec<usize> = (0..class_count)
        .map(|i| {
            let exact = max_count as f64 * imbalance_ratio.powf(-(i as f64) / last);
            // absorb representation error so exact integers do not truncate down
            (exact + 1e-9).floor() as usize
        })
        .collect();
    if let Some(class) = per_class_counts.iter().position(|&c| c < 1) {
        return Err(MbjError::Config(format!(
            "class {class} would receive no samples"
        )));
    }
    Ok(LongTailProfile {
        class_count,
        max_count,
        imbalance_ratio,
        per_class_counts,
    })
}

impl LongTailProfile {
    /// Wraps explicit counts, e.g. a balanced set with a single class cut short.
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(MbjError::Config("a profile needs at least 2 classes".into()));
        }
        if counts.contains(&0) {
            return Err(MbjError::Config("profile counts must be positive".into()));
        }
        if counts.windows(2).any(|w| w[1] > w[0]) {
            return Err(MbjError::Config(
                "profile counts must be non-increasing in class index".into(),
            ));
        }
        let max = counts[0];
        let min = *counts.last().expect("non-empty");
        Ok(LongTailProfile {
            class_count: counts.len(),
            max_count: max,
            imbalance_ratio: max as f64 / min as f64,
            per_class_counts: counts,
        })
    }

    pub fn total(&self) -> usize {
        self.per_class_counts.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailRole {
    Head,
    Tail,
}

/// Retrieval split: head identities keep every image, tail identities keep
/// `tail_images_per_class`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTailSplit {
    pub head_class_count: usize,
    pub tail_images_per_class: usize,
    pub class_assignment: Vec<TailRole>,
}

impl HeadTailSplit {
    /// The first `head_class_count` labels are head classes.
    pub fn first_head(
        class_count: usize,
        head_class_count: usize,
        tail_images_per_class: usize,
    ) -> Result<Self> {
        if head_class_count > class_count {
            return Err(MbjError::Config(format!(
                "{head_class_count} head classes requested from {class_count}"
            )));
        }
        if tail_images_per_class == 0 {
            return Err(MbjError::Config(
                "tail_images_per_class must be positive".into(),
            ));
        }
        let class_assignment = (0..class_count)
            .map(|c| {
                if c < head_class_count {
                    TailRole::Head
                } else {
                    TailRole::Tail
                }
            })
            .collect();
        Ok(HeadTailSplit {
            head_class_count,
            tail_images_per_class,
            class_assignment,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum SubsetTarget<'a> {
    Profile(&'a LongTailProfile),
    Split(&'a HeadTailSplit),
}

impl SubsetTarget<'_> {
    fn class_count(&self) -> usize {
        match self {
            SubsetTarget::Profile(p) => p.class_count,
            SubsetTarget::Split(s) => s.class_assignment.len(),
        }
    }

    /// Samples to keep for `class`; `None` keeps all of them.
    fn wanted(&self, class: usize) -> Option<usize> {
        match self {
            SubsetTarget::Profile(p) => Some(p.per_class_counts[class]),
            SubsetTarget::Split(s) => match s.class_assignment[class] {
                TailRole::Head => None,
                TailRole::Tail => Some(s.tail_images_per_class),
            },
        }
    }
}

/// Cuts `dataset` down to the per-class counts of `target`.
///
/// Each class keeps the first `k` of its samples under a seeded shuffle;
/// survivors are returned in their original order, which makes the
/// operation idempotent.
pub fn subset_dataset<T: Scalar>(
    dataset: &Dataset<T>,
    target: SubsetTarget<'_>,
    seed: u64,
) -> Result<Dataset<T>> {
    if target.class_count() != dataset.class_count {
        return Err(MbjError::Config(format!(
            "target describes {} classes, dataset has {}",
            target.class_count(),
            dataset.class_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (class, mut members) in dataset.indices_by_class().into_iter().enumerate() {
        match target.wanted(class) {
            None => keep.extend(members),
            Some(k) => {
                if members.len() < k {
                    return Err(MbjError::InsufficientSamples {
                        class,
                        needed: k,
                        available: members.len(),
                    });
                }
                members.shuffle(&mut rng);
                keep.extend_from_slice(&members[..k]);
            }
        }
    }
    keep.sort_unstable();
    Ok(dataset.select(&keep))
}

/// `class,count` CSV with a header row.
pub fn write_profile_csv(counts: &[usize], path: &Path) -> Result<()> {
    let mut out = String::from("class,count\n");
    for (c, n) in counts.iter().enumerate() {
        out.push_str(&format!("{c},{n}\n"));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| MbjError::io(path, e))
}
