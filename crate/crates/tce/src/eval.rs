//! Retrieval evaluation: per-query ranks, R@K, and median rank.

use crate::data::Dataset;
use crate::error::Result;
use crate::model::TceModel;
use crate::tensor::Tensor;

/// Per-query ranks of the ground-truth video (1-based) and the aggregates
/// computed from them. R@K values are percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub ranks: Vec<usize>,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub medr: usize,
}

impl std::fmt::Display for RetrievalResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "R@1 {:.1}% | R@5 {:.1}% | R@10 {:.1}% | MedR {}",
            self.r1, self.r5, self.r10, self.medr
        )
    }
}

/// Aggregates a rank multiset. The median of an even count takes the lower
/// of the two middle values.
pub fn metrics_from_ranks(ranks: Vec<usize>) -> RetrievalResult {
    assert!(!ranks.is_empty(), "metrics over zero queries");
    let n = ranks.len() as f64;
    let recall_at = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n * 100.0;
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    let medr = sorted[(sorted.len() - 1) / 2];
    RetrievalResult { r1: recall_at(1), r5: recall_at(5), r10: recall_at(10), medr, ranks }
}

/// Rank of each query's ground-truth video under descending score, ties going
/// to the lower video index. `scores` is row-major `[n_queries, n_videos]`.
pub fn ranks_from_scores(scores: &[f64], n_queries: usize, n_videos: usize, targets: &[usize]) -> Vec<usize> {
    assert_eq!(scores.len(), n_queries * n_videos);
    assert_eq!(targets.len(), n_queries);
    let mut ranks = Vec::with_capacity(n_queries);
    for q in 0..n_queries {
        let row = &scores[q * n_videos..(q + 1) * n_videos];
        let mut order: Vec<usize> = (0..n_videos).collect();
        order.sort_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let rank = order.iter().position(|&v| v == targets[q]).expect("target in index") + 1;
        ranks.push(rank);
    }
    ranks
}

/// Encodes every query and every unique video once (inference mode) and
/// scores all pairs by cosine. Returns the embeddings alongside the metrics
/// so callers can dump them.
pub struct Evaluation {
    pub result: RetrievalResult,
    pub query_embeddings: Vec<Tensor>,
    pub video_embeddings: Vec<Tensor>,
}

pub fn evaluate(model: &TceModel, dataset: &Dataset) -> Result<Evaluation> {
    evaluate_subset(model, dataset, &(0..dataset.num_pairs()).collect::<Vec<_>>())
}

/// Evaluates only the given record indices (still ranking against every
/// unique video in the dataset).
pub fn evaluate_subset(model: &TceModel, dataset: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    let mut query_embeddings = Vec::with_capacity(indices.len());
    let mut targets = Vec::with_capacity(indices.len());
    for &i in indices {
        let (embedding, _) = model.embed_query(&dataset.tokens[i])?;
        query_embeddings.push(embedding);
        targets.push(dataset.target(i));
    }
    let mut video_embeddings = Vec::with_capacity(dataset.num_videos());
    for frames in &dataset.videos {
        video_embeddings.push(model.embed_video(frames)?);
    }
    let (nq, nv) = (query_embeddings.len(), video_embeddings.len());
    let mut scores = Vec::with_capacity(nq * nv);
    for q in &query_embeddings {
        for v in &video_embeddings {
            scores.push(crate::joint::cosine(q, v)?);
        }
    }
    let ranks = ranks_from_scores(&scores, nq, nv, &targets);
    Ok(Evaluation { result: metrics_from_ranks(ranks), query_embeddings, video_embeddings })
}
