//! Run directories and the commands that fill them.
//!
//! ```text
//! <output>/config.toml        resolved configuration
//!          profile.csv        training images per class
//!          phase1.ckpt        model after conventional training
//!          final.ckpt         model after phase 2
//!          metrics.jsonl      one line per epoch, both phases
//!          summary.csv        final metrics: phase1, baseline, <variant>
//!          feature_bank.csv   bank variants only
//!          prototype_bank.csv
//!          traces.json        raw jitter traces, when configured
//!          jitter/*.csv       angular-variance curves
//!          embeddings/*.bin   evaluation-split embeddings of final.ckpt
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use mbj::analysis::{
    export_embeddings, jitter_curve, per_class_accuracy, plateau_stats, shot_bucketed_accuracy, write_curve_csv,
    write_matrix, JitterSubject, JitterTrace,
};
use mbj::data::{write_manifest, write_profile_csv};
use mbj::model::{argmax_rows, BackboneConfig, EmbeddingModel, ModelConfig};
use mbj::retrieval::evaluate_retrieval;
use mbj::train::{observe_jitter, run_ablation_variant, train_phase1, train_phase2, TraceSpec, Variant};
use mbj::{Data, MbjError, Model, Result};
use serde::{Deserialize, Serialize};

use crate::config::{Backbone, ExperimentConfig};
use crate::data::{resolve, Splits};

pub const CONFIG: &str = "config.toml";
pub const SUMMARY: &str = "summary.csv";
pub const TRACES: &str = "traces.json";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> MbjError + '_ {
    move |source| MbjError::Io {
        path: path.into(),
        source,
    }
}

fn format_err(path: &Path) -> impl FnOnce(String) -> MbjError + '_ {
    move |reason| MbjError::Format {
        path: path.into(),
        reason,
    }
}

/// Final metrics of one model on the evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub top1: Option<f64>,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    pub rank1: Option<f64>,
}

pub fn summarize(model: &Model, splits: &Splits, label: &str) -> Result<SummaryRow> {
    let mut row = SummaryRow {
        model: label.to_string(),
        top1: None,
        many: None,
        medium: None,
        few: None,
        map: None,
        rank1: None,
    };
    if let Some((query, gallery)) = &splits.retrieval {
        let m = evaluate_retrieval(model, query, gallery)?;
        row.map = Some(m.map);
        row.rank1 = Some(m.rank1);
        return Ok(row);
    }
    let test = &splits.test;
    let (_, logits) = model.forward(test.inputs.view())?;
    let preds = argmax_rows(logits.view());
    row.top1 = Some(preds.iter().zip(&test.labels).filter(|(p, l)| p == l).count() as f64 / test.len() as f64);
    let per_class = per_class_accuracy(&preds, &test.labels, test.class_count);
    let (acc, counts): (Vec<f64>, Vec<usize>) = per_class
        .iter()
        .zip(splits.train.class_counts())
        .filter(|(a, _)| !a.is_nan())
        .map(|(&a, n)| (a, n))
        .unzip();
    let shots = shot_bucketed_accuracy(&acc, &counts)?;
    row.many = shots.many;
    row.medium = shots.medium;
    row.few = shots.few;
    Ok(row)
}

pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path)(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| format_err(path)(e.to_string()))?;
    }
    w.flush().map_err(io(path))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path)(e.to_string()))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format_err(path)(e.to_string()))
}

pub fn new_model(config: &ExperimentConfig, train: &Data) -> Result<Model> {
    let backbone = match config.model.backbone {
        Backbone::Mlp => BackboneConfig::Mlp {
            input_dim: train.input_dim(),
            hidden_dim: config.model.hidden_dim,
            embedding_dim: config.model.embedding_dim,
        },
        Backbone::Resnet32 => BackboneConfig::resnet32(train.shape)?,
    };
    EmbeddingModel::new(
        ModelConfig {
            backbone,
            class_count: train.class_count,
            normalize_head: config.model.normalize_head,
        },
        config.schedule.seed,
    )
}

/// Traces from the post-phase-1 observation and from phase 2.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub observe: Vec<JitterTrace>,
    pub phase2: Vec<JitterTrace>,
}

impl TraceFile {
    fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io(path))?;
        serde_json::from_str(&text).map_err(|e| format_err(path)(e.to_string()))
    }

    fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self).expect("traces serialize")).map_err(io(path))
    }

    fn is_empty(&self) -> bool {
        self.observe.is_empty() && self.phase2.is_empty()
    }
}

fn subject_name(t: &JitterTrace) -> String {
    match t.subject {
        JitterSubject::Prototype { class } => format!("prototype_c{class}"),
        JitterSubject::Sample { index, class } => format!("sample{index}_c{class}"),
    }
}

/// Plateau statistics of one trace's angular-variance curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterRow {
    pub source: String,
    pub subject: String,
    pub points: usize,
    pub final_variance: f64,
    pub initial_slope: Option<f64>,
    pub final_slope: Option<f64>,
    pub slope_ratio: Option<f64>,
}

fn write_jitter(dir: &Path, traces: &TraceFile) -> Result<Vec<JitterRow>> {
    let jdir = dir.join("jitter");
    fs::create_dir_all(&jdir).map_err(io(&jdir))?;
    let mut rows = Vec::new();
    for (source, list) in [("observe", &traces.observe), ("phase2", &traces.phase2)] {
        for t in list.iter().filter(|t| t.len() >= 2) {
            let curve = jitter_curve(t)?;
            let subject = subject_name(t);
            write_curve_csv(&curve, &jdir.join(format!("{source}_{subject}.csv")))?;
            let stats = plateau_stats(&curve).ok();
            rows.push(JitterRow {
                source: source.to_string(),
                subject,
                points: curve.len(),
                final_variance: curve.last().map_or(0.0, |c| c.1),
                initial_slope: stats.map(|s| s.initial_slope),
                final_slope: stats.map(|s| s.final_slope),
                slope_ratio: stats.map(|s| s.ratio()),
            });
        }
    }
    let path = dir.join("jitter_stats.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| format_err(&path)(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| format_err(&path)(e.to_string()))?;
    }
    w.flush().map_err(io(&path))?;
    Ok(rows)
}

fn export_splits(model: &Model, splits: &Splits, dir: &Path) -> Result<()> {
    let edir = dir.join("embeddings");
    fs::create_dir_all(&edir).map_err(io(&edir))?;
    let names: &[&str] = if splits.retrieval.is_some() { &["query", "gallery"] } else { &["test"] };
    for name in names {
        export_embeddings(model, splits.split(name)?, &edir.join(format!("{name}.bin")))?;
    }
    Ok(())
}

fn prepare(config: &ExperimentConfig) -> Result<(PathBuf, Splits)> {
    let dir = config.output.clone();
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    config.save(&dir.join(CONFIG))?;
    let splits = resolve(config)?;
    write_profile_csv(&splits.train.class_counts(), &dir.join("profile.csv"))?;
    info!(
        "{} training images over {} classes; {} {} run in {}",
        splits.train.len(),
        splits.train.class_count,
        config.task,
        config.variant,
        dir.display()
    );
    Ok((dir, splits))
}

fn phase1(config: &ExperimentConfig, splits: &Splits, dir: &Path) -> Result<(Model, mbj::train::RunRecord)> {
    let mut model = new_model(config, &splits.train)?;
    let record = train_phase1(&mut model, &splits.train, Some(&splits.evaluation()), config.task, &config.schedule)?;
    model.save(&dir.join("phase1.ckpt"))?;
    if let Some(last) = record.last() {
        info!("phase 1 done: {}", metric_line(last.top1, last.map));
    }
    Ok((model, record))
}

fn metric_line(top1: Option<f64>, map: Option<f64>) -> String {
    match (top1, map) {
        (Some(t), _) => format!("top-1 {:.2}%", 100.0 * t),
        (_, Some(m)) => format!("mAP {:.2}%", 100.0 * m),
        _ => "no evaluation".into(),
    }
}

/// Both phases plus a baseline continuation from the same checkpoint.
pub fn train(config: &ExperimentConfig) -> Result<Vec<SummaryRow>> {
    let (dir, splits) = prepare(config)?;
    let (first, mut record) = phase1(config, &splits, &dir)?;
    let mut rows = vec![summarize(&first, &splits, "phase1")?];
    if config.variant != Variant::Baseline {
        let (base, _) = run_ablation_variant(
            &first,
            Variant::Baseline,
            config.task,
            &splits.train,
            Some(&splits.evaluation()),
            &config.schedule,
        )?;
        rows.push(summarize(&base, &splits, Variant::Baseline.id())?);
    }
    let mut model = first.clone();
    let trace = config.jitter.phase2.then(|| config.jitter.spec());
    let outcome = train_phase2(
        &mut model,
        &splits.train,
        Some(&splits.evaluation()),
        config.task,
        config.variant,
        &config.schedule,
        trace.as_ref(),
    )?;
    model.save(&dir.join("final.ckpt"))?;
    rows.push(summarize(&model, &splits, config.variant.id())?);
    let final_row = rows.last().expect("just pushed");
    info!("phase 2 done: {}", metric_line(final_row.top1, final_row.map));

    if let Some(bank) = &outcome.feature_bank {
        bank.write_csv(&dir.join("feature_bank.csv"))?;
    }
    if let Some(bank) = &outcome.prototype_bank {
        bank.write_csv(&dir.join("prototype_bank.csv"))?;
    }
    let mut traces = TraceFile {
        observe: Vec::new(),
        phase2: outcome.record.traces.clone(),
    };
    record.extend(outcome.record);
    for w in &record.warnings {
        warn!("{w}");
    }
    record.write_jsonl(&dir.join("metrics.jsonl"))?;
    write_summary(&rows, &dir.join(SUMMARY))?;

    if config.jitter.observe_epochs > 0 {
        traces.observe = observe_jitter(
            &first,
            &splits.train,
            config.task,
            &config.schedule,
            &config.jitter.spec(),
            config.jitter.observe_epochs,
        )?;
    }
    if !traces.is_empty() {
        traces.write(&dir.join(TRACES))?;
        write_jitter(&dir, &traces)?;
    }
    export_splits(&model, &splits, &dir)?;
    Ok(rows)
}

/// Phase 1 once, then each variant from the shared checkpoint in its own
/// sub-directory. Returns one row per variant.
pub fn ablate(config: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<SummaryRow>> {
    let (dir, splits) = prepare(config)?;
    let (first, record) = phase1(config, &splits, &dir)?;
    let phase1_row = summarize(&first, &splits, "phase1")?;
    let mut rows = Vec::new();
    for &variant in variants {
        let sub_config = ExperimentConfig {
            variant,
            output: dir.join(variant.id()),
            ..config.clone()
        };
        let sub = &sub_config.output;
        fs::create_dir_all(sub).map_err(io(sub))?;
        sub_config.save(&sub.join(CONFIG))?;
        let (model, outcome) = run_ablation_variant(
            &first,
            variant,
            config.task,
            &splits.train,
            Some(&splits.evaluation()),
            &config.schedule,
        )?;
        model.save(&sub.join("final.ckpt"))?;
        first.save(&sub.join("phase1.ckpt"))?;
        if let Some(bank) = &outcome.feature_bank {
            bank.write_csv(&sub.join("feature_bank.csv"))?;
        }
        if let Some(bank) = &outcome.prototype_bank {
            bank.write_csv(&sub.join("prototype_bank.csv"))?;
        }
        let mut full = record.clone();
        full.extend(outcome.record);
        full.write_jsonl(&sub.join("metrics.jsonl"))?;
        let row = summarize(&model, &splits, variant.id())?;
        info!("{variant}: {}", metric_line(row.top1, row.map));
        write_summary(&[phase1_row.clone(), row.clone()], &sub.join(SUMMARY))?;
        rows.push(row);
    }
    write_summary(&rows, &dir.join("ablation.csv"))?;
    Ok(rows)
}

fn load_run(dir: &Path) -> Result<(ExperimentConfig, Splits)> {
    let config = ExperimentConfig::load(&dir.join(CONFIG))?;
    let splits = resolve(&config)?;
    Ok((config, splits))
}

fn checkpoint(dir: &Path, name: &str) -> Result<Model> {
    let file = match name {
        "final" | "phase1" => format!("{name}.ckpt"),
        other => return Err(MbjError::Config(format!("unknown checkpoint `{other}` (expected final or phase1)"))),
    };
    EmbeddingModel::load(&dir.join(file))
}

/// Re-evaluates a checkpoint of a finished run; writes `eval.csv`.
pub fn eval(dir: &Path, which: &str) -> Result<SummaryRow> {
    let (config, splits) = load_run(dir)?;
    let model = checkpoint(dir, which)?;
    let label = if which == "final" { config.variant.id() } else { which };
    let row = summarize(&model, &splits, label)?;
    write_summary(std::slice::from_ref(&row), &dir.join("eval.csv"))?;
    Ok(row)
}

/// Observation request for [`jitter_stats`].
#[derive(Debug, Clone, Default)]
pub struct Observe {
    pub epochs: usize,
    pub samples: Vec<usize>,
    pub prototypes: Vec<usize>,
}

/// Curves and plateau statistics for the traces of a run, optionally
/// recording a fresh observation from `phase1.ckpt` first.
pub fn jitter_stats(dir: &Path, observe: Option<&Observe>) -> Result<Vec<JitterRow>> {
    let path = dir.join(TRACES);
    let mut traces = if path.exists() { TraceFile::read(&path)? } else { TraceFile::default() };
    if let Some(o) = observe {
        let (config, splits) = load_run(dir)?;
        let first = checkpoint(dir, "phase1")?;
        let spec = TraceSpec {
            samples: o.samples.clone(),
            prototypes: o.prototypes.clone(),
            ..TraceSpec::default()
        };
        traces.observe = observe_jitter(&first, &splits.train, config.task, &config.schedule, &spec, o.epochs)?;
        traces.write(&path)?;
    }
    if traces.is_empty() {
        return Err(MbjError::Config(format!(
            "{} has no traces; pass --epochs with --sample or --prototype",
            dir.display()
        )));
    }
    write_jitter(dir, &traces)
}

pub fn export(dir: &Path, which: &str, split: &str, out: Option<&Path>) -> Result<PathBuf> {
    let (_, splits) = load_run(dir)?;
    let model = checkpoint(dir, which)?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let edir = dir.join("embeddings");
            fs::create_dir_all(&edir).map_err(io(&edir))?;
            edir.join(format!("{which}_{split}.bin"))
        }
    };
    export_embeddings(&model, splits.split(split)?, &path)?;
    Ok(path)
}

/// Writes the resolved splits as matrices plus JSON-lines manifests.
pub fn synth_data(config: &ExperimentConfig) -> Result<PathBuf> {
    let splits = resolve(config)?;
    let dir = config.output.join("data");
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    write_profile_csv(&splits.train.class_counts(), &dir.join("profile.csv"))?;
    let mut parts = vec![("train", &splits.train)];
    match &splits.retrieval {
        Some((q, g)) => parts.extend([("query", q), ("gallery", g)]),
        None => parts.push(("test", &splits.test)),
    }
    for (name, data) in parts {
        write_matrix(data.inputs.view(), &dir.join(format!("{name}.bin")))?;
        write_manifest(data, name, &dir.join(format!("{name}.jsonl")))?;
    }
    Ok(dir)
}
