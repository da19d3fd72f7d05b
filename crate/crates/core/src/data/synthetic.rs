use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, InputShape};
use crate::error::{MbjError, Result};
use crate::scalar::Scalar;

/// Gaussian mixture with unit-norm class means, a unit-scale stand-in for
/// image features.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEmbeddingSet<T> {
    pub class_means: Array2<T>,
    pub within_class_scale: f64,
    pub per_class_counts: Vec<usize>,
    /// Samples grouped by class, class 0 first.
    pub samples: Vec<(Array1<T>, usize)>,
}

fn gaussian_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vector(rng, dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn make_synthetic_embeddings<T: Scalar>(
    class_count: usize,
    dim: usize,
    per_class_counts: &[usize],
    within_class_scale: f64,
    seed: u64,
) -> Result<SyntheticEmbeddingSet<T>> {
    if dim < 2 {
        return Err(MbjError::Config(format!("dim must be at least 2, got {dim}")));
    }
    if per_class_counts.len() != class_count {
        return Err(MbjError::Config(format!(
            "{} counts given for {class_count} classes",
            per_class_counts.len()
        )));
    }
    if !(within_class_scale >= 0.0 && within_class_scale.is_finite()) {
        return Err(MbjError::Config(format!(
            "within_class_scale must be finite and non-negative, got {within_class_scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..class_count).map(|_| unit_vector(&mut rng, dim)).collect();
    let class_means = Array2::from_shape_fn((class_count, dim), |(c, j)| T::of(means[c][j]));

    let mut samples = Vec::with_capacity(per_class_counts.iter().sum());
    for (class, &count) in per_class_counts.iter().enumerate() {
        for _ in 0..count {
            let noise = gaussian_vector(&mut rng, dim);
            let v: Array1<T> = means[class]
                .iter()
                .zip(&noise)
                .map(|(m, e)| T::of(m + within_class_scale * e))
                .collect();
            samples.push((v, class));
        }
    }
    Ok(SyntheticEmbeddingSet {
        class_means,
        within_class_scale,
        per_class_counts: per_class_counts.to_vec(),
        samples,
    })
}

impl<T: Scalar> SyntheticEmbeddingSet<T> {
    pub fn dim(&self) -> usize {
        self.class_means.ncols()
    }

    pub fn into_dataset(self) -> Dataset<T> {
        let dim = self.dim();
        let classes = self.class_means.nrows();
        let n = self.samples.len();
        let mut inputs = Array2::zeros((n, dim));
        let mut labels = Vec::with_capacity(n);
        for (i, (v, l)) in self.samples.into_iter().enumerate() {
            inputs.row_mut(i).assign(&v);
            labels.push(l);
        }
        Dataset::new(inputs, labels, InputShape::Flat { dim }, classes)
            .expect("generator produces consistent shapes")
    }

    /// Splits every class into its first `train_counts[c]` samples (train)
    /// and the remainder (test). Both halves share the class means.
    pub fn into_split(self, train_counts: &[usize]) -> Result<(Dataset<T>, Dataset<T>)> {
        if train_counts.len() != self.per_class_counts.len() {
            return Err(MbjError::Config(format!(
                "{} train counts given for {} classes",
                train_counts.len(),
                self.per_class_counts.len()
            )));
        }
        if let Some(class) = (0..train_counts.len()).find(|&c| train_counts[c] > self.per_class_counts[c]) {
            return Err(MbjError::InsufficientSamples {
                class,
                needed: train_counts[class],
                available: self.per_class_counts[class],
            });
        }
        let mut seen = vec![0; train_counts.len()];
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, &(_, l)) in self.samples.iter().enumerate() {
            if seen[l] < train_counts[l] {
                train.push(i);
            } else {
                test.push(i);
            }
            seen[l] += 1;
        }
        let all = self.into_dataset();
        Ok((all.select(&train), all.select(&test)))
    }
}

/// Synthetic re-identification benchmark with disjoint train/test identities.
///
/// Each image is `identity_basis * z_id + nuisance_basis * xi + noise`, where
/// the identity code `z_id` is fixed per identity and `xi` is redrawn per
/// image. A useful embedding has to suppress the nuisance directions, which
/// is what training on the long-tailed train identities teaches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalBenchmarkConfig {
    pub head_ids: usize,
    pub tail_ids: usize,
    pub head_images: usize,
    pub tail_images: usize,
    pub test_ids: usize,
    pub test_images_per_id: usize,
    pub input_dim: usize,
    pub identity_rank: usize,
    pub nuisance_rank: usize,
    pub nuisance_scale: f64,
    pub noise_scale: f64,
}

impl Default for RetrievalBenchmarkConfig {
    fn default() -> Self {
        RetrievalBenchmarkConfig {
            head_ids: 20,
            tail_ids: 100,
            head_images: 40,
            tail_images: 5,
            test_ids: 100,
            test_images_per_id: 6,
            input_dim: 32,
            identity_rank: 12,
            nuisance_rank: 8,
            nuisance_scale: 1.0,
            noise_scale: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalBenchmark<T> {
    pub train: Dataset<T>,
    pub query: Dataset<T>,
    pub gallery: Dataset<T>,
}

struct ImageModel {
    identity_basis: Vec<Vec<f64>>,
    nuisance_basis: Vec<Vec<f64>>,
}

impl ImageModel {
    fn draw(&self, rng: &mut impl Rng, code: &[f64], cfg: &RetrievalBenchmarkConfig) -> Vec<f64> {
        let mut x = vec![0.0; cfg.input_dim];
        for (basis, &z) in self.identity_basis.iter().zip(code) {
            for (xi, b) in x.iter_mut().zip(basis) {
                *xi += z * b;
            }
        }
        for basis in &self.nuisance_basis {
            let xi: f64 = rng.sample(StandardNormal);
            for (x_j, b) in x.iter_mut().zip(basis) {
                *x_j += cfg.nuisance_scale * xi * b;
            }
        }
        for x_j in x.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *x_j += cfg.noise_scale * e;
        }
        x
    }
}

pub fn make_retrieval_benchmark<T: Scalar>(
    cfg: &RetrievalBenchmarkConfig,
    seed: u64,
) -> Result<RetrievalBenchmark<T>> {
    if cfg.identity_rank + cfg.nuisance_rank > cfg.input_dim {
        return Err(MbjError::Config(format!(
            "identity_rank + nuisance_rank ({}) exceeds input_dim ({})",
            cfg.identity_rank + cfg.nuisance_rank,
            cfg.input_dim
        )));
    }
    if cfg.test_images_per_id < 2 || cfg.test_ids == 0 {
        return Err(MbjError::Config(
            "test identities need at least one query and one gallery image".into(),
        ));
    }
    if cfg.head_ids + cfg.tail_ids < 2 {
        return Err(MbjError::Config("need at least 2 training identities".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Gram-Schmidt over random directions keeps identity and nuisance subspaces orthogonal.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < cfg.identity_rank + cfg.nuisance_rank {
        let mut v = gaussian_vector(&mut rng, cfg.input_dim);
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let nuisance_basis = basis.split_off(cfg.identity_rank);
    let model = ImageModel {
        identity_basis: basis,
        nuisance_basis,
    };

    let identity_code = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let scale = 1.0 / (cfg.identity_rank as f64).sqrt();
        gaussian_vector(rng, cfg.identity_rank)
            .into_iter()
            .map(|z| z * scale)
            .collect()
    };

    let to_dataset = |rows: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize| {
        let n = rows.len();
        let inputs = Array2::from_shape_fn((n, cfg.input_dim), |(i, j)| T::of(rows[i][j]));
        Dataset::new(inputs, labels, InputShape::Flat { dim: cfg.input_dim }, classes)
    };

    let train_ids = cfg.head_ids + cfg.tail_ids;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for id in 0..train_ids {
        let code = identity_code(&mut rng);
        let images = if id < cfg.head_ids {
            cfg.head_images
        } else {
            cfg.tail_images
        };
        for _ in 0..images {
            rows.push(model.draw(&mut rng, &code, cfg));
            labels.push(id);
        }
    }
    let train = to_dataset(rows, labels, train_ids)?;

    let (mut q_rows, mut q_labels, mut g_rows, mut g_labels) = (vec![], vec![], vec![], vec![]);
    for id in 0..cfg.test_ids {
        let code = identity_code(&mut rng);
        for k in 0..cfg.test_images_per_id {
            let x = model.draw(&mut rng, &code, cfg);
            if k == 0 {
                q_rows.push(x);
                q_labels.push(id);
            } else {
                g_rows.push(x);
                g_labels.push(id);
            }
        }
    }
    Ok(RetrievalBenchmark {
        train,
        query: to_dataset(q_rows, q_labels, cfg.test_ids)?,
        gallery: to_dataset(g_rows, g_labels, cfg.test_ids)?,
    })
}
