//! Retrieval metrics and the person / non-person evaluation protocols.

mod eval;
mod permutation;

pub use eval::{
    evaluate, rank_queries, score_rankings, ClassFilter, EvalProtocol, EvalReport, QueryRanking, QueryScore,
    RankingTable, Relevance,
};
pub use permutation::{permutation_test, PermutationResult};

/// Mean of precision@k over the ranks holding a relevant item, divided by
/// the total number of relevant items. `None` when nothing is relevant.
pub fn average_precision(ranked: &[bool], n_relevant: usize) -> Option<f64> {
    if n_relevant == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in ranked.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / n_relevant as f64)
}

/// Average precision restricted to the top `r` positions, normalized by `r`.
pub fn map_at_r(ranked: &[bool], r: usize) -> Option<f64> {
    if r == 0 {
        return None;
    }
    let top = &ranked[..r.min(ranked.len())];
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in top.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / r as f64)
}
