//! Turns a dataset spec into train / evaluation splits.

use mbj::data::{
    build_longtail_profile, load_cifar, make_retrieval_benchmark, make_synthetic_embeddings, subset_dataset,
    CifarVariant, LongTailProfile, SubsetTarget,
};
use mbj::train::{Evaluation, Task};
use mbj::{Data, MbjError, Result};

use crate::config::{DatasetSpec, ExperimentConfig, DATA_ROOT_VAR};

pub struct Splits {
    pub train: Data,
    /// Held-out images for classification; empty for the retrieval benchmark.
    pub test: Data,
    /// Query / gallery views for retrieval evaluation.
    pub retrieval: Option<(Data, Data)>,
}

impl Splits {
    pub fn evaluation(&self) -> Evaluation<'_, f32> {
        match &self.retrieval {
            Some((query, gallery)) => Evaluation::Retrieval { query, gallery },
            None => Evaluation::Classification(&self.test),
        }
    }

    pub fn split(&self, name: &str) -> Result<&Data> {
        match (name, &self.retrieval) {
            ("train", _) => Ok(&self.train),
            ("test", None) => Ok(&self.test),
            ("query", Some((q, _))) => Ok(q),
            ("gallery", Some((_, g))) => Ok(g),
            _ => Err(MbjError::Config(format!(
                "no `{name}` split for this dataset (expected train, {})",
                if self.retrieval.is_some() { "query or gallery" } else { "test" }
            ))),
        }
    }
}

fn profile_counts(
    classes: usize,
    max_count: usize,
    imbalance_ratio: Option<f64>,
    reduced: Option<(usize, usize)>,
) -> Result<Vec<usize>> {
    let mut counts = match imbalance_ratio {
        Some(ir) => build_longtail_profile(classes, max_count, ir)?.per_class_counts,
        None => vec![max_count; classes],
    };
    if let Some((class, count)) = reduced {
        *counts.get_mut(class).ok_or_else(|| {
            MbjError::Config(format!("reduced_class {class} out of range for {classes} classes"))
        })? = count;
    }
    Ok(counts)
}

/// First image of every identity is a query, the rest form the gallery.
fn query_gallery(test: &Data) -> (Data, Data) {
    let mut seen = vec![false; test.class_count];
    let (mut query, mut gallery) = (Vec::new(), Vec::new());
    for (i, &label) in test.labels.iter().enumerate() {
        if seen[label] {
            gallery.push(i);
        } else {
            seen[label] = true;
            query.push(i);
        }
    }
    (test.select(&query), test.select(&gallery))
}

pub fn resolve(config: &ExperimentConfig) -> Result<Splits> {
    let (train, test) = match &config.dataset {
        DatasetSpec::Synthetic(s) => {
            let counts = match &s.counts {
                Some(c) => c.clone(),
                None => profile_counts(s.classes, s.max_count, s.imbalance_ratio, s.reduced_class.map(|c| (c, s.reduced_count)))?,
            };
            let total: Vec<usize> = counts.iter().map(|c| c + s.test_per_class).collect();
            make_synthetic_embeddings::<f32>(counts.len(), s.dim, &total, s.scale, s.seed)?.into_split(&counts)?
        }
        DatasetSpec::Retrieval(r) => {
            let b = make_retrieval_benchmark::<f32>(&r.benchmark, r.seed)?;
            let empty = b.query.select(&[]);
            return Ok(Splits {
                train: b.train,
                test: empty,
                retrieval: Some((b.query, b.gallery)),
            });
        }
        DatasetSpec::Cifar(c) => {
            let root = config.data_root().ok_or_else(|| MbjError::DatasetMissing {
                name: format!("CIFAR-{} (set data_root or {DATA_ROOT_VAR})", c.classes),
                tried: Vec::new(),
            })?;
            let variant = if c.classes == 100 { CifarVariant::Cifar100 } else { CifarVariant::Cifar10 };
            let (full, test) = load_cifar::<f32>(&root, variant)?;
            let per_class = full.len() / c.classes;
            let counts = profile_counts(c.classes, per_class, c.imbalance_ratio, c.reduced_class.map(|k| (k, c.reduced_count)))?;
            let profile = LongTailProfile::from_counts(counts)?;
            (subset_dataset(&full, SubsetTarget::Profile(&profile), c.subset_seed)?, test)
        }
    };
    let retrieval = (config.task == Task::MetricLearning).then(|| query_gallery(&test));
    Ok(Splits { train, test, retrieval })
}
