//! Bounded FIFO memory of gradient-blocked vectors with tail-biased admission.
//!
//! Classes are admitted with probability proportional to `(1 / N_i)^beta`,
//! so rare classes dominate the bank even though raw images are drawn
//! uniformly.

use std::collections::VecDeque;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MbjError, Result};
use crate::scalar::Scalar;

/// Re-balancing strength and the training counts it is applied to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub beta: f64,
    pub class_counts: Vec<usize>,
}

/// `P_i = (1/N_i)^beta / sum_j (1/N_j)^beta`.
///
/// Evaluated in log space so large counts with large `beta` stay finite.
pub fn admission_probabilities(config: &SamplingConfig) -> Result<Vec<f64>> {
    if !(config.beta >= 0.0 && config.beta.is_finite()) {
        return Err(MbjError::Config(format!(
            "beta must be finite and non-negative, got {}",
            config.beta
        )));
    }
    if config.class_counts.is_empty() {
        return Err(MbjError::Config("no class counts given".into()));
    }
    if let Some(class) = config.class_counts.iter().position(|&n| n == 0) {
        return Err(MbjError::Config(format!(
            "class {class} has zero training samples"
        )));
    }
    let log_w: Vec<f64> = config
        .class_counts
        .iter()
        .map(|&n| -config.beta * (n as f64).ln())
        .collect();
    let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Per-sample admission rates `q_y = P_y / max_j P_j`.
///
/// The rarest class is always admitted; every other class keeps the
/// tail:head ratio of the class distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissionPolicy {
    probabilities: Vec<f64>,
    rates: Vec<f64>,
}

impl AdmissionPolicy {
    pub fn new(config: &SamplingConfig) -> Result<Self> {
        let probabilities = admission_probabilities(config)?;
        let top = probabilities.iter().cloned().fold(0.0, f64::max);
        let rates = probabilities.iter().map(|p| p / top).collect();
        Ok(AdmissionPolicy {
            probabilities,
            rates,
        })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn rate(&self, class: usize) -> f64 {
        self.rates[class]
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn class_count(&self) -> usize {
        self.rates.len()
    }

    pub fn admits(&self, class: usize, rng: &mut impl Rng) -> bool {
        let q = self.rates[class];
        q >= 1.0 || rng.random::<f64>() < q
    }
}

/// A detached copy of a feature or prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry<T> {
    pub vector: Array1<T>,
    pub label: usize,
    pub iteration: u64,
}

impl<T: Scalar> MemoryEntry<T> {
    pub fn new(vector: ArrayView1<'_, T>, label: usize, iteration: u64) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(MbjError::Numeric(format!(
                "non-finite vector offered to memory (label {label}, iteration {iteration})"
            )));
        }
        Ok(MemoryEntry {
            vector: vector.to_owned(),
            label,
            iteration,
        })
    }
}

/// Admits each row of `batch` independently with its class rate.
pub fn select_for_memory<T: Scalar>(
    batch: ArrayView2<'_, T>,
    labels: &[usize],
    policy: &AdmissionPolicy,
    iteration: u64,
    rng: &mut impl Rng,
) -> Result<Vec<MemoryEntry<T>>> {
    if batch.nrows() != labels.len() {
        return Err(MbjError::Shape {
            expected: format!("{} rows", labels.len()),
            got: format!("{} rows", batch.nrows()),
        });
    }
    let mut admitted = Vec::new();
    for (row, &label) in batch.rows().into_iter().zip(labels) {
        if label >= policy.class_count() {
            return Err(MbjError::LabelOutOfRange {
                label,
                classes: policy.class_count(),
            });
        }
        if policy.admits(label, rng) {
            admitted.push(MemoryEntry::new(row, label, iteration)?);
        }
    }
    Ok(admitted)
}

/// FIFO queue of memory entries, oldest first.
#[derive(Debug, Clone)]
pub struct MemoryBank<T> {
    capacity: usize,
    entries: VecDeque<MemoryEntry<T>>,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(MbjError::Config("memory capacity must be positive".into()));
        }
        Ok(MemoryBank {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    /// Five slots per class.
    pub fn for_classes(class_count: usize) -> Result<Self> {
        Self::new(5 * class_count)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &MemoryEntry<T>> {
        self.entries.iter()
    }

    /// Appends `new_entries` in order, then drops the oldest entries until
    /// the capacity holds. An oversized batch keeps only its newest tail.
    pub fn enqueue_dequeue(&mut self, new_entries: impl IntoIterator<Item = MemoryEntry<T>>) {
        for e in new_entries {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(e);
        }
    }

    pub fn snapshot(&self) -> Vec<MemoryEntry<T>> {
        self.entries.iter().cloned().collect()
    }

    pub fn occupancy_per_class(&self, class_count: usize) -> Vec<usize> {
        let mut counts = vec![0; class_count];
        for e in &self.entries {
            if e.label < class_count {
                counts[e.label] += 1;
            }
        }
        counts
    }

    /// Up to `n` distinct entries drawn uniformly without replacement.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<&MemoryEntry<T>> {
        if n >= self.entries.len() {
            return self.entries.iter().collect();
        }
        let mut picked = index::sample(rng, self.entries.len(), n).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| &self.entries[i]).collect()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// CSV dump: `d` vector columns, then `label`, then `iteration`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| MbjError::io(path, e))?;
        let mut out = BufWriter::new(file);
        let dim = self.entries.front().map_or(0, |e| e.vector.len());
        let mut header: Vec<String> = (0..dim).map(|j| format!("v{j}")).collect();
        header.push("label".into());
        header.push("iteration".into());
        let io = |e| MbjError::io(path, e);
        writeln!(out, "{}", header.join(",")).map_err(io)?;
        for e in &self.entries {
            let mut fields: Vec<String> = e.vector.iter().map(|v| v.as_f64().to_string()).collect();
            fields.push(e.label.to_string());
            fields.push(e.iteration.to_string());
            writeln!(out, "{}", fields.join(",")).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(tag: f64) -> MemoryEntry<f64> {
        MemoryEntry::new(array![tag].view(), 0, tag as u64).unwrap()
    }

    fn tags(bank: &MemoryBank<f64>) -> Vec<f64> {
        bank.iter().map(|e| e.vector[0]).collect()
    }

    fn cfg(counts: &[usize], beta: f64) -> SamplingConfig {
        SamplingConfig {
            beta,
            class_counts: counts.to_vec(),
        }
    }

    #[test]
    fn equal_counts_are_uniform() {
        let p = admission_probabilities(&cfg(&[10, 10, 10, 10], 1.5)).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn beta_zero_erases_counts() {
        let p = admission_probabilities(&cfg(&[100, 10], 0.0)).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn two_class_beta_one_point_five() {
        // (1/100)^1.5 = 1e-3, (1/10)^1.5 = 10^-1.5; normalize by hand.
        let head = 1e-3_f64;
        let tail = 10f64.powf(-1.5);
        let p = admission_probabilities(&cfg(&[100, 10], 1.5)).unwrap();
        assert!((p[0] - head / (head + tail)).abs() < 1e-12);
        assert!((p[0] - 0.030653).abs() < 1e-6);
        assert!((p[1] - 0.969346).abs() < 1e-6);
    }

    #[test]
    fn zero_count_is_rejected() {
        assert!(admission_probabilities(&cfg(&[10, 0], 1.0)).is_err());
        assert!(admission_probabilities(&cfg(&[10, 1], -1.0)).is_err());
    }

    #[test]
    fn rarest_class_always_admitted() {
        let policy = AdmissionPolicy::new(&cfg(&[100, 10], 1.5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = Array2::<f64>::ones((64, 3));
        let labels = vec![1; 64];
        let got = select_for_memory(batch.view(), &labels, &policy, 5, &mut rng).unwrap();
        assert_eq!(got.len(), 64);
        assert!(got.iter().all(|e| e.iteration == 5 && e.label == 1));
    }

    #[test]
    fn beta_zero_admits_everything() {
        let policy = AdmissionPolicy::new(&cfg(&[1000, 10, 3], 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = Array2::<f64>::ones((30, 2));
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let got = select_for_memory(batch.view(), &labels, &policy, 0, &mut rng).unwrap();
        assert_eq!(got.len(), 30);
    }

    #[test]
    fn admitted_vectors_are_copies() {
        let policy = AdmissionPolicy::new(&cfg(&[1, 1], 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut batch = array![[1.0, 2.0], [3.0, 4.0]];
        let got = select_for_memory(batch.view(), &[0, 1], &policy, 0, &mut rng).unwrap();
        batch[[0, 0]] = 99.0;
        assert_eq!(got[0].vector, array![1.0, 2.0]);
    }

    #[test]
    fn non_finite_vectors_are_refused() {
        assert!(MemoryEntry::new(array![f64::NAN].view(), 0, 0).is_err());
    }

    #[test]
    fn fifo_drops_oldest() {
        let mut bank = MemoryBank::new(3).unwrap();
        bank.enqueue_dequeue([1.0, 2.0, 3.0].map(entry));
        bank.enqueue_dequeue([entry(4.0)]);
        assert_eq!(tags(&bank), vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn under_capacity_keeps_all() {
        let mut bank = MemoryBank::new(3).unwrap();
        bank.enqueue_dequeue([1.0, 2.0].map(entry));
        assert_eq!(tags(&bank), vec![1.0, 2.0]);
    }

    #[test]
    fn oversized_push_keeps_newest() {
        let mut bank = MemoryBank::new(2).unwrap();
        bank.enqueue_dequeue([1.0, 2.0, 3.0].map(entry));
        assert_eq!(tags(&bank), vec![2.0, 3.0]);
    }

    #[test]
    fn snapshot_is_stable() {
        let mut bank = MemoryBank::<f64>::new(2).unwrap();
        assert!(bank.snapshot().is_empty());
        bank.enqueue_dequeue([entry(1.0)]);
        let snap = bank.snapshot();
        assert_eq!(snap.len(), bank.len());
        bank.enqueue_dequeue([2.0, 3.0].map(entry));
        assert_eq!(snap.len(), 1);
        assert_eq!(snap[0].vector[0], 1.0);
    }

    #[test]
    fn default_capacity_is_five_per_class() {
        assert_eq!(MemoryBank::<f32>::for_classes(10).unwrap().capacity(), 50);
        assert!(MemoryBank::<f32>::new(0).is_err());
    }

    #[test]
    fn sample_without_replacement() {
        let mut bank = MemoryBank::new(10).unwrap();
        bank.enqueue_dequeue((0..10).map(|i| entry(i as f64)));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let picked = bank.sample(4, &mut rng);
        assert_eq!(picked.len(), 4);
        let mut seen: Vec<f64> = picked.iter().map(|e| e.vector[0]).collect();
        seen.dedup();
        assert_eq!(seen.len(), 4);
        assert_eq!(bank.sample(50, &mut rng).len(), 10);
    }

    #[test]
    fn csv_dump_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.csv");
        let mut bank = MemoryBank::new(4).unwrap();
        bank.enqueue_dequeue([MemoryEntry::new(array![0.5, -1.0].view(), 3, 7).unwrap()]);
        bank.write_csv(&path).unwrap();
        assert_eq!(
            std::fs::read_to_string(path).unwrap(),
            "v0,v1,label,iteration\n0.5,-1,3,7\n"
        );
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one_and_favor_tail(
            counts in prop::collection::vec(1usize..5000, 2..30),
            beta in 0.01f64..4.0,
        ) {
            let p = admission_probabilities(&cfg(&counts, beta)).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
            for i in 0..counts.len() {
                for j in 0..counts.len() {
                    if counts[i] < counts[j] {
                        prop_assert!(p[i] > p[j]);
                    }
                }
            }
        }

        #[test]
        fn probabilities_are_scale_invariant(
            counts in prop::collection::vec(1usize..500, 2..20),
            scale in 2usize..50,
            beta in 0.0f64..3.0,
        ) {
            let p = admission_probabilities(&cfg(&counts, beta)).unwrap();
            let scaled: Vec<usize> = counts.iter().map(|c| c * scale).collect();
            let q = admission_probabilities(&cfg(&scaled, beta)).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn capacity_and_order_hold(
            capacity in 1usize..20,
            pushes in prop::collection::vec(0usize..8, 1..30),
        ) {
            let mut bank = MemoryBank::new(capacity).unwrap();
            let mut next = 0.0;
            for n in pushes {
                let batch: Vec<_> = (0..n).map(|_| { next += 1.0; entry(next) }).collect();
                bank.enqueue_dequeue(batch);
                prop_assert!(bank.len() <= capacity);
                let t = tags(&bank);
                prop_assert!(t.windows(2).all(|w| w[0] < w[1]));
                // the newest entries are exactly the most recent insertions
                if let Some(&last) = t.last() { prop_assert_eq!(last, next); }
                prop_assert_eq!(t.len(), (next as usize).min(capacity));
            }
        }
    }
}
