//! Two-phase training: conventional training, then fine-tuning with a
//! memory of historical features and/or prototypes.

mod loader;
mod record;
mod schedule;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analysis::{per_class_accuracy, JitterKind, JitterSubject, JitterTrace};
use crate::data::Dataset;
use crate::error::{MbjError, Result};
use crate::loss::{
    circle_memory_batch, cosface_batch, cross_entropy, memory_loss_cls, memory_loss_cosface, HeadLoss,
};
use crate::memory::{select_for_memory, AdmissionPolicy, MemoryBank, MemoryEntry, SamplingConfig};
use crate::model::{argmax_rows, EmbeddingModel, Sgd};
use crate::retrieval::{evaluate_retrieval, RetrievalMetrics};
use crate::scalar::Scalar;

pub use loader::{chi_square, gather, Loader, Sampling};
pub use record::{read_jsonl, write_jsonl, EpochMetrics, RunRecord};
pub use schedule::{ClsSchedule, DmlSchedule, Schedule, Task, Variant};

/// Held-out data scored at the end of every epoch.
#[derive(Debug, Clone, Copy)]
pub enum Evaluation<'a, T> {
    Classification(&'a Dataset<T>),
    Retrieval {
        query: &'a Dataset<T>,
        gallery: &'a Dataset<T>,
    },
}

/// What to record every iteration of an observation window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSpec {
    /// Training-set rows whose evaluation-mode feature is recorded.
    pub samples: Vec<usize>,
    /// Classes whose prototype (head row) is recorded.
    pub prototypes: Vec<usize>,
    /// First iteration (counted from the start of the phase) of the window.
    pub first_iteration: u64,
    /// Window length in iterations; `None` records to the end of the phase.
    pub max_iterations: Option<u64>,
}

impl TraceSpec {
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty() && self.prototypes.is_empty()
    }
}

/// A finished phase: its log plus the memory it ended with.
#[derive(Debug, Clone)]
pub struct PhaseOutcome<T> {
    pub record: RunRecord,
    pub feature_bank: Option<MemoryBank<T>>,
    pub prototype_bank: Option<MemoryBank<T>>,
}

// Independent random streams, so switching one mechanism on or off never
// changes the draws of another.
const STREAM_LOADER: u64 = 0;
const STREAM_AUGMENT: u64 = 1;
const STREAM_FEATURES: u64 = 2;
const STREAM_PROTOTYPES: u64 = 3;
const STREAM_DUPLICATES: u64 = 4;
const STREAM_NOISE: u64 = 5;

fn stream(seed: u64, phase: u8, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(phase) * 16 + id);
    rng
}

fn check_compatible<T: Scalar>(model: &EmbeddingModel<T>, data: &Dataset<T>) -> Result<()> {
    if data.input_dim() != model.input_len() {
        return Err(MbjError::Shape {
            expected: format!("{} input columns", model.input_len()),
            got: format!("{}", data.input_dim()),
        });
    }
    if data.class_count != model.class_count() {
        return Err(MbjError::Shape {
            expected: format!("{} classes", model.class_count()),
            got: format!("{}", data.class_count),
        });
    }
    if data.is_empty() {
        return Err(MbjError::Data("empty training set".into()));
    }
    Ok(())
}

/// Loss on the live batch, with gradients for embeddings and head.
fn batch_loss<T: Scalar>(
    task: Task,
    model: &EmbeddingModel<T>,
    emb: ArrayView2<'_, T>,
    labels: &[usize],
    schedule: &Schedule,
) -> Result<(T, Array2<T>, Array2<T>)> {
    let w = model.head.matrix();
    let out = match task {
        Task::Classification => cross_entropy(emb, labels, w)?,
        Task::MetricLearning => cosface_batch(emb, labels, w, schedule.loss.alpha, schedule.loss.delta)?,
    };
    Ok((out.loss, out.grad_embeddings, out.grad_weights))
}

/// The task's batch criterion applied to stored features; reaches the head only.
fn feature_memory_loss<'a, T: Scalar>(
    task: Task,
    entries: impl IntoIterator<Item = &'a MemoryEntry<T>>,
    weights: ArrayView2<'_, T>,
    schedule: &Schedule,
) -> Result<HeadLoss<T>> {
    match task {
        Task::Classification => memory_loss_cls(entries, weights),
        Task::MetricLearning => memory_loss_cosface(entries, weights, schedule.loss.alpha, schedule.loss.delta),
    }
}

/// Over-samples detached batch features in proportion to their class
/// admission rate, optionally adding Gaussian noise of scale `sigma`.
#[allow(clippy::too_many_arguments)]
fn duplicate_features<T: Scalar>(
    emb: ArrayView2<'_, T>,
    labels: &[usize],
    policy: &AdmissionPolicy,
    count: usize,
    sigma: Option<f64>,
    iteration: u64,
    pick_rng: &mut impl Rng,
    noise_rng: &mut impl Rng,
) -> Result<Vec<MemoryEntry<T>>> {
    let weights: Vec<f64> = labels.iter().map(|&y| policy.rate(y)).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| MbjError::Numeric(format!("duplicate weights: {e}")))?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let i = dist.sample(pick_rng);
        let mut v: Array1<T> = emb.row(i).to_owned();
        if let Some(s) = sigma {
            let s = T::of(s);
            v.mapv_inplace(|x| x + s * T::of(noise_rng.sample::<f64, _>(StandardNormal)));
        }
        out.push(MemoryEntry::new(v.view(), labels[i], iteration)?);
    }
    Ok(out)
}

fn mean_row_norm<T: Scalar>(a: ArrayView2<'_, T>) -> f64 {
    let n = a.nrows().max(1) as f64;
    a.rows().into_iter().map(|r| r.dot(&r).as_f64().sqrt()).sum::<f64>() / n
}

/// Scores `model` on `eval`, filling the evaluation fields of `m`.
fn evaluate<T: Scalar>(model: &EmbeddingModel<T>, eval: &Evaluation<'_, T>, m: &mut EpochMetrics) -> Result<()> {
    match *eval {
        Evaluation::Classification(test) => {
            let preds = model.predict(test.inputs.view())?;
            let hits = preds.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
            m.top1 = Some(hits as f64 / test.len() as f64);
            m.per_class_top1 = per_class_accuracy(&preds, &test.labels, model.class_count())
                .into_iter()
                .map(|a| if a.is_nan() { None } else { Some(a) })
                .collect();
        }
        Evaluation::Retrieval { query, gallery } => {
            let RetrievalMetrics { map, rank1 } = evaluate_retrieval(model, query, gallery)?;
            m.map = Some(map);
            m.rank1 = Some(rank1);
        }
    }
    Ok(())
}

/// Everything one training phase needs besides the model.
struct PhasePlan<'a, T> {
    phase: u8,
    task: Task,
    variant: Variant,
    train: &'a Dataset<T>,
    eval: Option<&'a Evaluation<'a, T>>,
    schedule: &'a Schedule,
    trace: Option<&'a TraceSpec>,
    /// Epoch number of the first epoch, for a continuous log across phases.
    first_epoch: usize,
    epochs: usize,
    lr: LrRule,
}

#[derive(Debug, Clone, Copy)]
enum LrRule {
    /// The phase-1 step schedule.
    Steps,
    Constant(f64),
}

fn run_phase<T: Scalar>(model: &mut EmbeddingModel<T>, plan: PhasePlan<'_, T>) -> Result<PhaseOutcome<T>> {
    let PhasePlan {
        phase,
        task,
        variant,
        train,
        eval,
        schedule,
        trace,
        first_epoch,
        epochs,
        lr: lr_rule,
    } = plan;
    schedule.validate()?;
    check_compatible(model, train)?;
    let classes = model.class_count();
    let (use_features, use_prototypes) = if phase == 1 { (false, false) } else { variant.memories(task) };
    let duplicates = phase == 2 && variant.duplicates_features();
    let sampling = if phase == 2 && variant.class_balanced_loader() {
        Sampling::ClassBalanced
    } else {
        Sampling::Uniform
    };
    let policy = AdmissionPolicy::new(&SamplingConfig {
        beta: schedule.beta,
        class_counts: train.class_counts(),
    })?;
    let capacity = schedule.capacity(classes);
    let mut feature_bank = if use_features { Some(MemoryBank::new(capacity)?) } else { None };
    let mut prototype_bank = if use_prototypes { Some(MemoryBank::new(capacity)?) } else { None };
    let sigma_fixed = match variant {
        Variant::FrRj => Some(schedule.jitter_sigma),
        _ => None,
    };
    let eta = T::of(schedule.loss.eta);

    let loader = Loader::new(train, schedule.batch_size, sampling);
    let seed = schedule.seed;
    let mut rng_loader = stream(seed, phase, STREAM_LOADER);
    let mut rng_augment = stream(seed, phase, STREAM_AUGMENT);
    let mut rng_features = stream(seed, phase, STREAM_FEATURES);
    let mut rng_prototypes = stream(seed, phase, STREAM_PROTOTYPES);
    let mut rng_duplicates = stream(seed, phase, STREAM_DUPLICATES);
    let mut rng_noise = stream(seed, phase, STREAM_NOISE);

    let mut record = RunRecord::new(task, variant);
    let mut traces: Vec<JitterTrace> = Vec::new();
    if let Some(spec) = trace {
        for &index in &spec.samples {
            if index >= train.len() {
                return Err(MbjError::Config(format!("trace sample {index} is outside the training set")));
            }
            let class = train.labels[index];
            traces.push(JitterTrace::new(JitterSubject::Sample { index, class }, JitterKind::Feature));
        }
        for &class in &spec.prototypes {
            if class >= classes {
                return Err(MbjError::LabelOutOfRange { label: class, classes });
            }
            traces.push(JitterTrace::new(JitterSubject::Prototype { class }, JitterKind::Weight));
        }
    }
    let window_start = trace.map_or(0, |t| t.first_iteration);
    let window_end = trace
        .and_then(|t| t.max_iterations)
        .map_or(u64::MAX, |n| window_start.saturating_add(n));

    // Fresh optimizer state at the start of every phase.
    Sgd::reset(model.params_mut());
    let mut iteration: u64 = 0;
    for local_epoch in 0..epochs {
        let epoch = first_epoch + local_epoch;
        let lr = match lr_rule {
            LrRule::Steps => schedule.phase1_lr_at(local_epoch),
            LrRule::Constant(lr) => lr,
        };
        let opt = Sgd {
            lr,
            momentum: schedule.momentum,
            weight_decay: schedule.weight_decay,
        };
        let batches = loader.epoch(&mut rng_loader);
        let mut sum_batch = 0.0;
        let mut sum_memory = 0.0;
        let mut bank_ever_filled = false;
        for idx in &batches {
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let x = gather(train, idx, schedule.augment, &mut rng_augment);
            model.zero_grad();
            let (emb, cache) = model.forward_train(x.view())?;
            let (l_batch, mut grad_emb, mut grad_w) = batch_loss(task, model, emb.view(), &labels, schedule)?;
            let mut l_memory = T::zero();

            if let Some(bank) = feature_bank.as_mut() {
                let admitted = select_for_memory(emb.view(), &labels, &policy, iteration, &mut rng_features)?;
                bank.enqueue_dequeue(admitted);
                // A batch-sized random subset keeps the per-step cost constant.
                let drawn = bank.sample(labels.len(), &mut rng_features);
                let m = feature_memory_loss(task, drawn, model.head.matrix(), schedule)?;
                l_memory += m.loss;
                grad_w.scaled_add(eta, &m.grad_weights);
            }
            if let Some(bank) = prototype_bank.as_mut() {
                let rows = model.head.matrix().select(Axis(0), &labels);
                let admitted = select_for_memory(rows.view(), &labels, &policy, iteration, &mut rng_prototypes)?;
                bank.enqueue_dequeue(admitted);
                let m = circle_memory_batch(
                    emb.view(),
                    &labels,
                    bank.iter(),
                    schedule.loss.alpha,
                    schedule.loss.delta,
                )?;
                l_memory += m.loss;
                grad_emb.scaled_add(eta, &m.grad_embeddings);
            }
            if duplicates {
                let count = labels.len().min(capacity);
                let sigma = sigma_fixed.map(|s| s.unwrap_or_else(|| 0.1 * mean_row_norm(emb.view())));
                let dups = duplicate_features(
                    emb.view(),
                    &labels,
                    &policy,
                    count,
                    sigma,
                    iteration,
                    &mut rng_duplicates,
                    &mut rng_noise,
                )?;
                let m = feature_memory_loss(task, &dups, model.head.matrix(), schedule)?;
                l_memory += m.loss;
                grad_w.scaled_add(eta, &m.grad_weights);
            }
            bank_ever_filled |= feature_bank.as_ref().is_some_and(|b| !b.is_empty())
                || prototype_bank.as_ref().is_some_and(|b| !b.is_empty());

            let total = l_memory * eta + l_batch;
            if !total.is_finite() {
                return Err(MbjError::Divergence {
                    epoch,
                    iteration,
                    loss_batch: l_batch.as_f64(),
                    loss_memory: l_memory.as_f64(),
                });
            }
            model.backward(&cache, grad_emb.view());
            model.head.add_grad(&grad_w);
            opt.step(model.params_mut());

            if (window_start..window_end).contains(&iteration) {
                record_traces(model, train, &mut traces, iteration)?;
            }
            sum_batch += l_batch.as_f64();
            sum_memory += l_memory.as_f64();
            iteration += 1;
        }
        if (use_features || use_prototypes) && !bank_ever_filled {
            let w = format!("epoch {epoch}: memory bank stayed empty for the whole epoch");
            log::warn!("{w}");
            record.warnings.push(w);
        }
        let n = batches.len().max(1) as f64;
        let mut occupancy = vec![0; classes];
        for bank in feature_bank.iter().chain(prototype_bank.iter()) {
            for (o, c) in occupancy.iter_mut().zip(bank.occupancy_per_class(classes)) {
                *o += c;
            }
        }
        let mut m = EpochMetrics {
            epoch,
            phase,
            lr,
            loss_batch: sum_batch / n,
            loss_memory: sum_memory / n,
            top1: None,
            per_class_top1: Vec::new(),
            bank_occupancy_per_class: occupancy,
            loader_class_counts: loader.class_histogram(&batches, classes),
            map: None,
            rank1: None,
        };
        if let Some(e) = eval {
            evaluate(model, e, &mut m)?;
        }
        log::info!(
            "phase {phase} epoch {epoch}: loss_batch {:.4} loss_memory {:.4} top1 {:?} mAP {:?}",
            m.loss_batch,
            m.loss_memory,
            m.top1,
            m.map
        );
        record.epochs.push(m);
    }
    record.traces = traces;
    Ok(PhaseOutcome {
        record,
        feature_bank,
        prototype_bank,
    })
}

fn record_traces<T: Scalar>(
    model: &EmbeddingModel<T>,
    train: &Dataset<T>,
    traces: &mut [JitterTrace],
    iteration: u64,
) -> Result<()> {
    if traces.is_empty() {
        return Ok(());
    }
    let sample_rows: Vec<usize> = traces
        .iter()
        .filter_map(|t| match t.subject {
            JitterSubject::Sample { index, .. } => Some(index),
            JitterSubject::Prototype { .. } => None,
        })
        .collect();
    let features = if sample_rows.is_empty() {
        None
    } else {
        Some(model.embed(train.inputs.select(Axis(0), &sample_rows).view())?)
    };
    let w = model.head.matrix();
    let mut next_sample = 0;
    for t in traces.iter_mut() {
        let v: Vec<f64> = match t.subject {
            JitterSubject::Sample { .. } => {
                let f = features.as_ref().expect("sample traces have features");
                let row = f.row(next_sample).iter().map(|x| x.as_f64()).collect();
                next_sample += 1;
                row
            }
            JitterSubject::Prototype { class } => w.row(class).iter().map(|x| x.as_f64()).collect(),
        };
        t.push(iteration, v)?;
    }
    Ok(())
}

/// Conventional training with natural (uniform-over-images) sampling:
/// cross-entropy for classification, CosFace for metric learning.
pub fn train_phase1<T: Scalar>(
    model: &mut EmbeddingModel<T>,
    train: &Dataset<T>,
    eval: Option<&Evaluation<'_, T>>,
    task: Task,
    schedule: &Schedule,
) -> Result<RunRecord> {
    let out = run_phase(
        model,
        PhasePlan {
            phase: 1,
            task,
            variant: Variant::Baseline,
            train,
            eval,
            schedule,
            trace: None,
            first_epoch: 0,
            epochs: schedule.phase1_epochs,
            lr: LrRule::Steps,
        },
    )?;
    Ok(out.record)
}

/// Phase-2 fine-tuning of an already trained model with any variant.
pub fn train_phase2<T: Scalar>(
    model: &mut EmbeddingModel<T>,
    train: &Dataset<T>,
    eval: Option<&Evaluation<'_, T>>,
    task: Task,
    variant: Variant,
    schedule: &Schedule,
    trace: Option<&TraceSpec>,
) -> Result<PhaseOutcome<T>> {
    run_phase(
        model,
        PhasePlan {
            phase: 2,
            task,
            variant,
            train,
            eval,
            schedule,
            trace,
            first_epoch: schedule.phase1_epochs,
            epochs: schedule.phase2_epochs,
            lr: LrRule::Constant(schedule.resolved_phase2_lr()),
        },
    )
}

/// Continues conventional training of a copy of a converged model at the
/// final phase-1 rate for `epochs` epochs, recording the traces in `spec`.
pub fn observe_jitter<T: Scalar>(
    converged: &EmbeddingModel<T>,
    train: &Dataset<T>,
    task: Task,
    schedule: &Schedule,
    spec: &TraceSpec,
    epochs: usize,
) -> Result<Vec<JitterTrace>> {
    if spec.is_empty() {
        return Err(MbjError::Config("nothing to trace".into()));
    }
    let mut model = converged.clone();
    let out = run_phase(
        &mut model,
        PhasePlan {
            phase: 3,
            task,
            variant: Variant::Baseline,
            train,
            eval: None,
            schedule,
            trace: Some(spec),
            first_epoch: schedule.phase1_epochs,
            epochs,
            lr: LrRule::Constant(schedule.final_phase1_lr()),
        },
    )?;
    Ok(out.record.traces)
}

/// Classification fine-tuning with a feature memory.
pub fn train_phase2_mbj<T: Scalar>(
    model: &mut EmbeddingModel<T>,
    train: &Dataset<T>,
    eval: Option<&Evaluation<'_, T>>,
    schedule: &ClsSchedule,
    trace: Option<&TraceSpec>,
) -> Result<PhaseOutcome<T>> {
    train_phase2(model, train, eval, Task::Classification, Variant::Mbj, schedule, trace)
}

/// Metric-learning fine-tuning with a prototype memory.
pub fn train_phase2_mbj_dml<T: Scalar>(
    model: &mut EmbeddingModel<T>,
    train: &Dataset<T>,
    eval: Option<&Evaluation<'_, T>>,
    schedule: &DmlSchedule,
    trace: Option<&TraceSpec>,
) -> Result<PhaseOutcome<T>> {
    train_phase2(model, train, eval, Task::MetricLearning, Variant::Mbj, schedule, trace)
}

/// Fine-tunes a copy of `phase1` with `variant`, so every variant starts
/// from the same checkpoint.
pub fn run_ablation_variant<T: Scalar>(
    phase1: &EmbeddingModel<T>,
    variant: Variant,
    task: Task,
    train: &Dataset<T>,
    eval: Option<&Evaluation<'_, T>>,
    schedule: &Schedule,
) -> Result<(EmbeddingModel<T>, PhaseOutcome<T>)> {
    let mut model = phase1.clone();
    let out = train_phase2(&mut model, train, eval, task, variant, schedule, None)?;
    Ok((model, out))
}

/// Top-1 accuracy of `model` on `data`.
pub fn top1<T: Scalar>(model: &EmbeddingModel<T>, data: &Dataset<T>) -> Result<f64> {
    let (_, logits) = model.forward(data.inputs.view())?;
    let preds = argmax_rows(logits.view());
    Ok(preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count() as f64 / data.len() as f64)
}
