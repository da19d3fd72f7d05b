//! Jitter diagnostics, shot-bucketed accuracy and embedding export.

use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{MbjError, Result};
use crate::model::EmbeddingModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterKind {
    Weight,
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterSubject {
    Prototype { class: usize },
    Sample { index: usize, class: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: u64,
    pub vector: Vec<f64>,
}

/// Successive recordings of one prototype or one sample's feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterTrace {
    pub subject: JitterSubject,
    pub kind: JitterKind,
    pub points: Vec<TracePoint>,
}

impl JitterTrace {
    pub fn new(subject: JitterSubject, kind: JitterKind) -> Self {
        JitterTrace {
            subject,
            kind,
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, iteration: u64, vector: Vec<f64>) -> Result<()> {
        if let Some(first) = self.points.first() {
            if first.vector.len() != vector.len() {
                return Err(MbjError::Shape {
                    expected: format!("trace vectors of dim {}", first.vector.len()),
                    got: format!("{}", vector.len()),
                });
            }
        }
        self.points.push(TracePoint { iteration, vector });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(MbjError::Numeric(
            "zero-norm or non-finite vector in jitter trace".into(),
        ));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot.clamp(-1.0, 1.0).acos().to_degrees()
}

fn mean_squared_deviation(units: &[Vec<f64>], sum: &[f64]) -> Result<f64> {
    if units.len() == 1 {
        return Ok(0.0);
    }
    let mean = unit(sum).map_err(|_| {
        MbjError::Numeric("trace directions cancel; mean direction is undefined".into())
    })?;
    Ok(units.iter().map(|u| angle_deg(u, &mean).powi(2)).sum::<f64>() / units.len() as f64)
}

/// Mean squared angle (degrees^2) between each of the first `k` recorded
/// directions and their normalized mean direction. A single vector gives 0.
pub fn angular_variance(trace: &JitterTrace, k: usize) -> Result<f64> {
    if k == 0 || k > trace.len() {
        return Err(MbjError::Config(format!(
            "prefix length {k} outside 1..={}",
            trace.len()
        )));
    }
    let units = trace.points[..k]
        .iter()
        .map(|p| unit(&p.vector))
        .collect::<Result<Vec<_>>>()?;
    let dim = units[0].len();
    let mut sum = vec![0.0; dim];
    for u in &units {
        for (s, x) in sum.iter_mut().zip(u) {
            *s += x;
        }
    }
    mean_squared_deviation(&units, &sum)
}

/// Angular variance at every prefix length `k = 1..=len`.
pub fn jitter_curve(trace: &JitterTrace) -> Result<Vec<(usize, f64)>> {
    if trace.len() < 2 {
        return Err(MbjError::Config(
            "a jitter curve needs at least 2 recorded vectors".into(),
        ));
    }
    let units = trace
        .points
        .iter()
        .map(|p| unit(&p.vector))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = vec![0.0; units[0].len()];
    let mut curve = Vec::with_capacity(units.len());
    for k in 1..=units.len() {
        for (s, x) in sum.iter_mut().zip(&units[k - 1]) {
            *s += x;
        }
        curve.push((k, mean_squared_deviation(&units[..k], &sum)?));
    }
    Ok(curve)
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Slopes of the first and last quarters of a curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauStats {
    pub initial_slope: f64,
    pub final_slope: f64,
}

impl PlateauStats {
    /// `final_slope / initial_slope`; below 0.1 reads as a plateau.
    pub fn ratio(&self) -> f64 {
        self.final_slope / self.initial_slope
    }
}

pub fn plateau_stats(curve: &[(usize, f64)]) -> Result<PlateauStats> {
    if curve.len() < 8 {
        return Err(MbjError::Config(
            "plateau statistics need at least 8 curve points".into(),
        ));
    }
    let q = curve.len() / 4;
    let pts: Vec<(f64, f64)> = curve.iter().map(|&(k, v)| (k as f64, v)).collect();
    Ok(PlateauStats {
        initial_slope: least_squares_slope(&pts[..q]),
        final_slope: least_squares_slope(&pts[pts.len() - q..]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotBucket {
    Many,
    Medium,
    Few,
}

impl ShotBucket {
    /// Many > 100, medium 20..=100, few < 20 training images.
    pub fn of(training_count: usize) -> Self {
        if training_count > 100 {
            ShotBucket::Many
        } else if training_count >= 20 {
            ShotBucket::Medium
        } else {
            ShotBucket::Few
        }
    }
}

/// Unweighted mean accuracy per bucket; an empty bucket is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShotAccuracy {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub overall: f64,
}

pub fn shot_bucketed_accuracy(per_class_acc: &[f64], training_counts: &[usize]) -> Result<ShotAccuracy> {
    if per_class_acc.len() != training_counts.len() || per_class_acc.is_empty() {
        return Err(MbjError::Shape {
            expected: format!("{} per-class accuracies", training_counts.len()),
            got: format!("{}", per_class_acc.len()),
        });
    }
    let mean_of = |bucket: ShotBucket| {
        let accs: Vec<f64> = per_class_acc
            .iter()
            .zip(training_counts)
            .filter(|(_, &n)| ShotBucket::of(n) == bucket)
            .map(|(&a, _)| a)
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    };
    Ok(ShotAccuracy {
        many: mean_of(ShotBucket::Many),
        medium: mean_of(ShotBucket::Medium),
        few: mean_of(ShotBucket::Few),
        overall: per_class_acc.iter().sum::<f64>() / per_class_acc.len() as f64,
    })
}

/// Top-1 accuracy of each class on `dataset` (NaN for absent classes).
pub fn per_class_accuracy(predictions: &[usize], labels: &[usize], class_count: usize) -> Vec<f64> {
    let mut hit = vec![0usize; class_count];
    let mut total = vec![0usize; class_count];
    for (&p, &l) in predictions.iter().zip(labels) {
        total[l] += 1;
        if p == l {
            hit[l] += 1;
        }
    }
    hit.iter()
        .zip(&total)
        .map(|(&h, &t)| if t == 0 { f64::NAN } else { h as f64 / t as f64 })
        .collect()
}

/// Writes a `(n, d)` little-endian header (two u64) and `n * d` f32 values.
pub fn write_matrix<T: Scalar>(matrix: ArrayView2<'_, T>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| MbjError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| MbjError::io(path, e);
    out.write_all(&(matrix.nrows() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&(matrix.ncols() as u64).to_le_bytes()).map_err(io)?;
    for v in matrix.iter() {
        out.write_all(&(v.as_f64() as f32).to_le_bytes()).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_matrix(path: &Path) -> Result<Array2<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| MbjError::io(path, e))?;
    let bad = |reason: String| MbjError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 {
        return Err(bad("missing (n, d) header".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let d = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != n * d * 4 {
        return Err(bad(format!("expected {} data bytes, found {}", n * d * 4, body.len())));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Array2::from_shape_vec((n, d), values).expect("size checked above"))
}

/// Files produced by [`export_embeddings`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingExport {
    pub embeddings: PathBuf,
    pub labels: PathBuf,
    pub head: PathBuf,
}

impl EmbeddingExport {
    pub fn at(path: &Path) -> Self {
        EmbeddingExport {
            embeddings: path.to_path_buf(),
            labels: path.with_extension("labels.csv"),
            head: path.with_extension("head.bin"),
        }
    }
}

/// Evaluation-mode embeddings of every sample, the head weights, and a
/// `index,label,camera,source_index` sidecar CSV.
pub fn export_embeddings<T: Scalar>(
    model: &EmbeddingModel<T>,
    dataset: &Dataset<T>,
    path: &Path,
) -> Result<EmbeddingExport> {
    let files = EmbeddingExport::at(path);
    let embeddings = model.embed(dataset.inputs.view())?;
    write_matrix(embeddings.view(), &files.embeddings)?;
    write_matrix(model.read_prototypes().view(), &files.head)?;
    let mut csv = String::from("index,label,camera,source_index\n");
    for i in 0..dataset.len() {
        let cam = dataset
            .cameras
            .as_ref()
            .map_or(String::new(), |c| c[i].to_string());
        csv.push_str(&format!(
            "{i},{},{cam},{}\n",
            dataset.labels[i], dataset.source_index[i]
        ));
    }
    std::fs::write(&files.labels, csv).map_err(|e| MbjError::io(&files.labels, e))?;
    Ok(files)
}

pub fn write_curve_csv(curve: &[(usize, f64)], path: &Path) -> Result<()> {
    let mut out = String::from("k,angular_variance_deg2\n");
    for (k, v) in curve {
        out.push_str(&format!("{k},{v}\n"));
    }
    std::fs::write(path, out).map_err(|e| MbjError::io(path, e))
}

pub fn write_shot_csv(acc: &ShotAccuracy, path: &Path) -> Result<()> {
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let out = format!(
        "many,medium,few,overall\n{},{},{},{}\n",
        cell(acc.many),
        cell(acc.medium),
        cell(acc.few),
        acc.overall
    );
    std::fs::write(path, out).map_err(|e| MbjError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(vectors: &[Vec<f64>]) -> JitterTrace {
        let mut t = JitterTrace::new(JitterSubject::Prototype { class: 0 }, JitterKind::Weight);
        for (i, v) in vectors.iter().enumerate() {
            t.push(i as u64, v.clone()).unwrap();
        }
        t
    }

    #[test]
    fn single_vector_has_zero_variance() {
        assert_eq!(angular_variance(&trace(&[vec![0.3, 0.4]]), 1).unwrap(), 0.0);
    }

    #[test]
    fn identical_vectors_have_zero_variance() {
        let t = trace(&vec![vec![1.0, 2.0, 3.0]; 5]);
        assert!(angular_variance(&t, 5).unwrap().abs() < 1e-6);
    }

    #[test]
    fn orthogonal_pair_is_2025() {
        let t = trace(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((angular_variance(&t, 2).unwrap() - 2025.0).abs() < 1e-6);
    }

    #[test]
    fn zero_vector_is_rejected() {
        let t = trace(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert!(angular_variance(&t, 2).is_err());
        assert!(angular_variance(&t, 3).is_err());
    }

    #[test]
    fn curve_starts_at_zero_and_matches_prefix_calls() {
        let t = trace(&[vec![1.0, 0.0], vec![0.9, 0.2], vec![1.0, -0.3], vec![0.8, 0.1]]);
        let curve = jitter_curve(&t).unwrap();
        assert_eq!(curve[0], (1, 0.0));
        for &(k, v) in &curve {
            assert!((v - angular_variance(&t, k).unwrap()).abs() < 1e-9);
        }
        let flat = jitter_curve(&trace(&vec![vec![2.0, 1.0]; 6])).unwrap();
        assert!(flat.iter().all(|&(_, v)| v.abs() < 1e-6));
    }

    #[test]
    fn slope_of_a_line() {
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 3.0 * i as f64 + 1.0)).collect();
        assert!((least_squares_slope(&pts) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn plateau_ratio_of_saturating_curve() {
        let curve: Vec<(usize, f64)> = (1..=200).map(|k| (k, 100.0 * (1.0 - (-(k as f64) / 10.0).exp()))).collect();
        assert!(plateau_stats(&curve).unwrap().ratio() < 0.1);
        let line: Vec<(usize, f64)> = (1..=200).map(|k| (k, k as f64)).collect();
        assert!((plateau_stats(&line).unwrap().ratio() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn buckets_by_thresholds() {
        let acc = shot_bucketed_accuracy(&[0.9, 0.6, 0.3], &[150, 50, 10]).unwrap();
        assert_eq!(acc.many, Some(0.9));
        assert_eq!(acc.medium, Some(0.6));
        assert_eq!(acc.few, Some(0.3));
        assert!((acc.overall - 0.6).abs() < 1e-12);
        assert_eq!(ShotBucket::of(100), ShotBucket::Medium);
        assert_eq!(ShotBucket::of(20), ShotBucket::Medium);
        assert_eq!(ShotBucket::of(19), ShotBucket::Few);
        assert_eq!(ShotBucket::of(101), ShotBucket::Many);
    }

    #[test]
    fn perfect_accuracy_everywhere_and_absent_buckets() {
        let acc = shot_bucketed_accuracy(&[1.0, 1.0], &[500, 5]).unwrap();
        assert_eq!(acc.many, Some(1.0));
        assert_eq!(acc.medium, None);
        assert_eq!(acc.few, Some(1.0));
        assert_eq!(acc.overall, 1.0);
    }

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = ndarray::array![[1.5f32, -2.0], [0.25, 8.0], [3.0, 0.0]];
        write_matrix(m.view(), &path).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), m);
        std::fs::write(&path, [0u8; 20]).unwrap();
        assert!(read_matrix(&path).is_err());
    }

    proptest! {
        #[test]
        fn variance_ignores_positive_rescaling(
            vecs in prop::collection::vec(prop::collection::vec(0.1f64..2.0, 3), 2..8),
            scales in prop::collection::vec(0.01f64..100.0, 8),
        ) {
            let t = trace(&vecs);
            let scaled: Vec<Vec<f64>> = vecs.iter().zip(&scales).map(|(v, s)| v.iter().map(|x| x * s).collect()).collect();
            let t2 = trace(&scaled);
            let a = angular_variance(&t, vecs.len()).unwrap();
            let b = angular_variance(&t2, vecs.len()).unwrap();
            prop_assert!((a - b).abs() < 1e-6 * a.max(1.0));
        }

        #[test]
        fn buckets_recompose_overall(
            rows in prop::collection::vec((0.0f64..1.0, 1usize..400), 1..40),
        ) {
            let acc: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let counts: Vec<usize> = rows.iter().map(|r| r.1).collect();
            let s = shot_bucketed_accuracy(&acc, &counts).unwrap();
            let size = |b: ShotBucket| counts.iter().filter(|&&n| ShotBucket::of(n) == b).count() as f64;
            let recomposed = s.many.unwrap_or(0.0) * size(ShotBucket::Many)
                + s.medium.unwrap_or(0.0) * size(ShotBucket::Medium)
                + s.few.unwrap_or(0.0) * size(ShotBucket::Few);
            prop_assert!((recomposed / counts.len() as f64 - s.overall).abs() < 1e-9);
        }
    }
}
