//! Classification accuracy and leave-one-out retrieval metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub overall_acc: f64,
    /// Unweighted mean over the classes present in the split.
    pub mean_class_acc: f64,
    /// `None` for classes with no samples.
    pub per_class_acc: Vec<Option<f64>>,
}

pub fn classification_metrics(predicted: &[usize], labels: &[usize], classes: usize) -> Result<ClassificationMetrics> {
    if predicted.len() != labels.len() {
        return Err(Error::Input(format!("{} predictions for {} labels", predicted.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::Input("cannot score an empty split".into()));
    }
    if let Some(&bad) = labels.iter().chain(predicted).find(|&&c| c >= classes) {
        return Err(Error::Input(format!("class {bad} out of range for {classes} classes")));
    }
    let mut total = vec![0usize; classes];
    let mut hits = vec![0usize; classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        total[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let per_class_acc: Vec<Option<f64>> =
        total.iter().zip(&hits).map(|(&t, &h)| (t > 0).then(|| h as f64 / t as f64)).collect();
    let empty: Vec<usize> = (0..classes).filter(|&c| total[c] == 0).collect();
    if !empty.is_empty() {
        log::warn!("classes {empty:?} have no samples; excluded from mean class accuracy");
    }
    let defined: Vec<f64> = per_class_acc.iter().flatten().copied().collect();
    Ok(ClassificationMetrics {
        overall_acc: hits.iter().sum::<usize>() as f64 / labels.len() as f64,
        mean_class_acc: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class_acc,
    })
}

/// Recall levels of the interpolated precision-recall curve.
pub const RECALL_LEVELS: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub map: f64,
    pub pr_curve: Vec<PrPoint>,
    /// Queries that contributed (had at least one relevant item).
    pub queries: usize,
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Leave-one-out retrieval: every item queries all others, ranked by
/// ascending cosine distance with ties broken by index. Returns the mean
/// average precision and the 11-point interpolated precision-recall curve.
pub fn retrieval_map(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<RetrievalResult> {
    let m = embeddings.len();
    if m != labels.len() {
        return Err(Error::Input(format!("{m} embeddings for {} labels", labels.len())));
    }
    if m < 2 {
        return Err(Error::Input("retrieval needs at least two items".into()));
    }
    if let Some(e) = embeddings.iter().find(|e| e.len() != embeddings[0].len()) {
        return Err(Error::Input(format!("embedding widths {} and {} differ", embeddings[0].len(), e.len())));
    }
    let mut ap_sum = 0.0;
    let mut curve = [0.0; RECALL_LEVELS.len()];
    let mut queries = 0usize;
    let mut skipped = 0usize;
    for q in 0..m {
        let relevant = labels.iter().enumerate().filter(|&(i, &l)| i != q && l == labels[q]).count();
        if relevant == 0 {
            skipped += 1;
            continue;
        }
        let mut ranked: Vec<(f64, usize)> = (0..m)
            .filter(|&i| i != q)
            .map(|i| (1.0 - cosine_similarity(&embeddings[q], &embeddings[i]), i))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut points: Vec<(f64, f64)> = Vec::with_capacity(relevant);
        for (rank, &(_, i)) in ranked.iter().enumerate() {
            if labels[i] == labels[q] {
                hits += 1;
                let precision = hits as f64 / (rank + 1) as f64;
                precision_sum += precision;
                points.push((hits as f64 / relevant as f64, precision));
            }
        }
        ap_sum += precision_sum / relevant as f64;
        // Interpolated precision: best precision at any recall ≥ level.
        for (slot, &level) in curve.iter_mut().zip(&RECALL_LEVELS) {
            *slot += points.iter().filter(|(r, _)| *r >= level - 1e-12).map(|&(_, p)| p).fold(0.0, f64::max);
        }
        queries += 1;
    }
    if skipped > 0 {
        log::debug!("{skipped} queries have no relevant items and are excluded from mAP");
    }
    if queries == 0 {
        return Err(Error::Input("retrieval needs at least one pair of items with the same label".into()));
    }
    Ok(RetrievalResult {
        map: ap_sum / queries as f64,
        pr_curve: RECALL_LEVELS
            .iter()
            .zip(curve)
            .map(|(&recall, total)| PrPoint { recall, precision: total / queries as f64 })
            .collect(),
        queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_predictor_on_balanced_split() {
        let labels: Vec<usize> = (0..80).map(|i| i % 8).collect();
        let m = classification_metrics(&[3; 80], &labels, 8).unwrap();
        assert_eq!(m.overall_acc, 0.125);
        assert_eq!(m.mean_class_acc, 0.125);
    }

    #[test]
    fn imbalance_separates_overall_and_mean_class() {
        let mut labels = vec![0; 100];
        labels.extend(1..8);
        labels.extend(1..8);
        let m = classification_metrics(&vec![0; labels.len()], &labels, 8).unwrap();
        assert!(m.overall_acc > m.mean_class_acc);
        assert_eq!(m.mean_class_acc, 0.125);
    }

    #[test]
    fn empty_class_is_excluded() {
        let m = classification_metrics(&[0, 1, 1], &[0, 1, 0], 3).unwrap();
        assert_eq!(m.per_class_acc, vec![Some(0.5), Some(1.0), None]);
        assert_eq!(m.mean_class_acc, 0.75);
    }

    #[test]
    fn perfect_clusters_give_unit_map() {
        let mut emb = Vec::new();
        let mut labels = Vec::new();
        for c in 0..4 {
            for _ in 0..3 {
                let mut e = vec![0.0; 4];
                e[c] = 2.0;
                emb.push(e);
                labels.push(c);
            }
        }
        let r = retrieval_map(&emb, &labels).unwrap();
        assert_eq!(r.map, 1.0);
        assert!(r.pr_curve.iter().all(|p| p.precision == 1.0));
    }

    #[test]
    fn hand_worked_four_items() {
        // Unit vectors at 0°, 50°, 20°, 90°; cosine distance grows with the angle.
        // Rankings: q0 → 2, 1, 3 (AP 1/2); q1 → 2, 3, 0 (AP 1/3);
        // q2 → 0, 1, 3 (AP 1/3); q3 → 1, 2, 0 (AP 1/2).
        let at = |deg: f64| vec![deg.to_radians().cos(), deg.to_radians().sin()];
        let emb = vec![at(0.0), at(50.0), at(20.0), at(90.0)];
        let labels = [0, 0, 1, 1];
        let r = retrieval_map(&emb, &labels).unwrap();
        let expected = (0.5 + 1.0 / 3.0 + 1.0 / 3.0 + 0.5) / 4.0;
        assert!((r.map - expected).abs() < 1e-15, "{}", r.map);
    }

    #[test]
    fn query_without_relevant_items_is_skipped() {
        let emb = vec![vec![1.0, 0.0], vec![1.0, 0.1], vec![0.0, 1.0]];
        let r = retrieval_map(&emb, &[0, 0, 1]).unwrap();
        assert_eq!(r.queries, 2);
        assert_eq!(r.map, 1.0);
        assert!(retrieval_map(&emb, &[0, 1, 2]).is_err());
        assert!(retrieval_map(&emb[..1], &[0]).is_err());
    }
}
