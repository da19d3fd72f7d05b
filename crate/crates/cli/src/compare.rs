//! Side-by-side final metrics of finished runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mbj::train::Task;
use mbj::{MbjError, Result};

use crate::config::ExperimentConfig;
use crate::run::{read_summary, SummaryRow, CONFIG, SUMMARY};

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub metrics: Vec<&'static str>,
    /// `(run label, model, values)`; the first row is the reference.
    pub rows: Vec<(String, String, Vec<Option<f64>>)>,
}

fn values(task: Task, row: &SummaryRow) -> Vec<Option<f64>> {
    match task {
        Task::Classification => vec![row.top1, row.many, row.medium, row.few],
        Task::MetricLearning => vec![row.map, row.rank1],
    }
}

fn label(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn compare(dirs: &[PathBuf]) -> Result<Comparison> {
    if dirs.len() < 2 {
        return Err(MbjError::Config("compare needs at least two run directories".into()));
    }
    let mut reference: Option<(PathBuf, ExperimentConfig)> = None;
    let mut rows = Vec::new();
    for dir in dirs {
        let config = ExperimentConfig::load(&dir.join(CONFIG))?;
        if let Some((ref_dir, r)) = &reference {
            if r.task != config.task || r.dataset != config.dataset {
                return Err(MbjError::Config(format!(
                    "{} and {} use different tasks or datasets",
                    ref_dir.display(),
                    dir.display()
                )));
            }
        }
        let summary = read_summary(&dir.join(SUMMARY))?;
        let last = summary.last().ok_or_else(|| MbjError::Data(format!("{} has an empty summary", dir.display())))?;
        rows.push((label(dir), last.model.clone(), values(config.task, last)));
        reference.get_or_insert((dir.clone(), config));
    }
    let metrics = match reference.expect("at least two runs").1.task {
        Task::Classification => vec!["top1", "many", "medium", "few"],
        Task::MetricLearning => vec!["mAP", "rank1"],
    };
    Ok(Comparison { metrics, rows })
}

impl Comparison {
    /// `row - reference` per metric, in percentage points.
    pub fn deltas(&self, row: usize) -> Vec<Option<f64>> {
        self.rows[row]
            .2
            .iter()
            .zip(&self.rows[0].2)
            .map(|(v, r)| Some(100.0 * (v.as_ref()? - r.as_ref()?)))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| MbjError::Format {
            path: path.into(),
            reason: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        let mut header = vec!["run".to_string(), "model".to_string()];
        header.extend(self.metrics.iter().map(|m| m.to_string()));
        header.extend(self.metrics.iter().map(|m| format!("delta_{m}")));
        w.write_record(&header).map_err(err)?;
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for (i, (run, model, vals)) in self.rows.iter().enumerate() {
            let mut rec = vec![run.clone(), model.clone()];
            rec.extend(vals.iter().map(|&v| cell(v)));
            rec.extend(self.deltas(i).into_iter().map(cell));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| MbjError::Io {
            path: path.into(),
            source: e,
        })
    }

    /// Percentages with deltas against the first run.
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.0.len()).chain([3]).max().unwrap_or(3);
        let mut out = format!("{:width$}", "run");
        for m in &self.metrics {
            let _ = write!(out, "  {m:>16}");
        }
        out.push('\n');
        for (i, (run, _, vals)) in self.rows.iter().enumerate() {
            let _ = write!(out, "{run:width$}");
            for (v, d) in vals.iter().zip(self.deltas(i)) {
                let text = match (v, d) {
                    (Some(v), Some(d)) if i > 0 => format!("{:.2} ({d:+.2})", 100.0 * v),
                    (Some(v), _) => format!("{:.2}", 100.0 * v),
                    (None, _) => "-".into(),
                };
                let _ = write!(out, "  {text:>16}");
            }
            out.push('\n');
        }
        out
    }
}
