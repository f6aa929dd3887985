use rand::seq::SliceRandom;
use rand::Rng;

use super::eval::{score_rankings, RankingTable};

#[derive(Clone, Debug, PartialEq)]
pub struct PermutationResult {
    pub observed: f64,
    pub baseline_mean: f64,
    pub baseline_sd: f64,
    /// `(1 + #{shuffled >= observed}) / (1 + n_shuffles)`.
    pub p_value: f64,
    pub n_shuffles: usize,
}

fn mean_ap(table: &RankingTable, groups: &[u32]) -> f64 {
    let s = score_rankings(table, groups);
    let aps: Vec<f64> = s.iter().filter_map(|q| q.ap).collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Chance level of a fixed ranking: the relevance groups of the eligible
/// entries are shuffled among themselves and mAP recomputed each time.
pub fn permutation_test<R: Rng + ?Sized>(table: &RankingTable, n_shuffles: usize, rng: &mut R) -> PermutationResult {
    let observed = mean_ap(table, &table.groups);
    let slots: Vec<usize> = (0..table.groups.len()).filter(|&i| table.eligible[i]).collect();
    let mut pool: Vec<u32> = slots.iter().map(|&i| table.groups[i]).collect();
    let mut groups = table.groups.clone();
    let mut values = Vec::with_capacity(n_shuffles);
    for _ in 0..n_shuffles {
        pool.shuffle(rng);
        for (&i, &g) in slots.iter().zip(&pool) {
            groups[i] = g;
        }
        values.push(mean_ap(table, &groups));
    }
    let n = values.len().max(1) as f64;
    let baseline_mean = values.iter().sum::<f64>() / n;
    let baseline_sd = (values.iter().map(|v| (v - baseline_mean).powi(2)).sum::<f64>() / n).sqrt();
    let exceed = values.iter().filter(|&&v| v >= observed).count();
    PermutationResult {
        observed,
        baseline_mean,
        baseline_sd,
        p_value: (1 + exceed) as f64 / (1 + n_shuffles) as f64,
        n_shuffles,
    }
}
