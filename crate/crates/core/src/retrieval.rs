//! Cosine-similarity retrieval metrics (mAP and Rank-1).

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{MbjError, Result};
use crate::loss::normalize_rows;
use crate::model::EmbeddingModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    pub rank1: f64,
}

/// Identity (and optional camera) labels of one side of a retrieval split.
#[derive(Debug, Clone, Copy)]
pub struct Labels<'a> {
    pub ids: &'a [usize],
    pub cameras: Option<&'a [u32]>,
}

/// Average precision of one ranked relevance list: the mean, over relevant
/// positions, of the precision at that position. No relevant item gives 0.
pub fn average_precision(ranked_relevance: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// mAP and Rank-1 of `query` against `gallery` embeddings.
///
/// Gallery items sharing both identity and camera with the query are
/// dropped from its ranking. Ties in similarity keep gallery order.
pub fn retrieval_metrics<T: Scalar>(
    query: ArrayView2<'_, T>,
    query_labels: Labels<'_>,
    gallery: ArrayView2<'_, T>,
    gallery_labels: Labels<'_>,
) -> Result<RetrievalMetrics> {
    if query.nrows() != query_labels.ids.len() || gallery.nrows() != gallery_labels.ids.len() {
        return Err(MbjError::Shape {
            expected: "one identity per embedding row".into(),
            got: format!(
                "{} query rows / {} ids, {} gallery rows / {} ids",
                query.nrows(),
                query_labels.ids.len(),
                gallery.nrows(),
                gallery_labels.ids.len()
            ),
        });
    }
    if query.ncols() != gallery.ncols() {
        return Err(MbjError::Shape {
            expected: format!("{} gallery columns", query.ncols()),
            got: format!("{}", gallery.ncols()),
        });
    }
    if query.nrows() == 0 {
        return Err(MbjError::Data("empty query set".into()));
    }
    let cams = match (query_labels.cameras, gallery_labels.cameras) {
        (Some(q), Some(g)) => Some((q, g)),
        _ => None,
    };
    let (q, _) = normalize_rows(query);
    let (g, _) = normalize_rows(gallery);
    let sims = q.dot(&g.t());
    let mut ap_sum = 0.0;
    let mut rank1_hits = 0usize;
    for (qi, row) in sims.rows().into_iter().enumerate() {
        let id = query_labels.ids[qi];
        let mut ranked: Vec<usize> = (0..g.nrows())
            .filter(|&gi| match cams {
                Some((qc, gc)) => !(gallery_labels.ids[gi] == id && gc[gi] == qc[qi]),
                None => true,
            })
            .collect();
        ranked.sort_by(|&a, &b| row[b].as_f64().total_cmp(&row[a].as_f64()));
        let relevance: Vec<bool> = ranked.iter().map(|&gi| gallery_labels.ids[gi] == id).collect();
        if !relevance.contains(&true) {
            return Err(MbjError::Data(format!(
                "query {qi} (identity {id}) has no valid match in the gallery"
            )));
        }
        ap_sum += average_precision(&relevance);
        if relevance[0] {
            rank1_hits += 1;
        }
    }
    let n = query.nrows() as f64;
    Ok(RetrievalMetrics {
        map: ap_sum / n,
        rank1: rank1_hits as f64 / n,
    })
}

/// Embeds both sets with `model` in evaluation mode and scores them.
pub fn evaluate_retrieval<T: Scalar>(
    model: &EmbeddingModel<T>,
    query: &Dataset<T>,
    gallery: &Dataset<T>,
) -> Result<RetrievalMetrics> {
    let q = model.embed(query.inputs.view())?;
    let g = model.embed(gallery.inputs.view())?;
    retrieval_metrics(
        q.view(),
        Labels {
            ids: &query.labels,
            cameras: query.cameras.as_deref(),
        },
        g.view(),
        Labels {
            ids: &gallery.labels,
            cameras: gallery.cameras.as_deref(),
        },
    )
}
