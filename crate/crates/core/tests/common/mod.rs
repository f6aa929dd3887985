//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use exclusion_search::losses::{ConfusionConfig, MsLossConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vec(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn naive_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// Mining by literal application of the two inequalities.
pub fn naive_mine(emb: &[Vec<f64>], labels: &[u64], eps: f64) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let m = emb.len();
    let mut pos = vec![Vec::new(); m];
    let mut neg = vec![Vec::new(); m];
    for i in 0..m {
        let mut has_pos = false;
        let mut has_neg = false;
        let mut max_neg = -2.0;
        let mut min_pos = 2.0;
        for j in 0..m {
            if j == i {
                continue;
            }
            let s = naive_dot(&emb[i], &emb[j]);
            if labels[j] == labels[i] {
                has_pos = true;
                if s < min_pos {
                    min_pos = s;
                }
            } else {
                has_neg = true;
                if s > max_neg {
                    max_neg = s;
                }
            }
        }
        for j in 0..m {
            if j == i {
                continue;
            }
            let s = naive_dot(&emb[i], &emb[j]);
            if labels[j] == labels[i] {
                if !has_neg || s < max_neg + eps {
                    pos[i].push(j);
                }
            } else if !has_pos || s > min_pos - eps {
                neg[i].push(j);
            }
        }
    }
    (pos, neg)
}

/// MS loss by direct per-term summation over fixed pair sets.
pub fn naive_ms_value(emb: &[Vec<f64>], pos: &[Vec<usize>], neg: &[Vec<usize>], cfg: &MsLossConfig) -> f64 {
    let m = emb.len();
    let mut total = 0.0;
    for i in 0..m {
        let mut sp = 0.0;
        for &j in &pos[i] {
            sp += (-cfg.alpha * (naive_dot(&emb[i], &emb[j]) - cfg.base)).exp();
        }
        let mut sn = 0.0;
        for &k in &neg[i] {
            sn += (cfg.beta * (naive_dot(&emb[i], &emb[k]) - cfg.base)).exp();
        }
        total += (1.0 + sp).ln() / cfg.alpha + (1.0 + sn).ln() / cfg.beta;
    }
    total / m as f64
}

pub fn naive_forbidden_pairs(emb: &[Vec<f64>], tags: &[Option<String>], cfg: &ConfusionConfig) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            let both = matches!((&tags[i], &tags[j]), (Some(a), Some(b)) if cfg.forbidden_set.contains(a) && cfg.forbidden_set.contains(b));
            if both && naive_dot(&emb[i], &emb[j]) > cfg.margin {
                out.push((i, j));
            }
        }
    }
    out
}

pub fn naive_conf_value(emb: &[Vec<f64>], pairs: &[(usize, usize)], cfg: &ConfusionConfig) -> f64 {
    let mut s = 0.0;
    for &(i, j) in pairs {
        s += (cfg.gamma * (naive_dot(&emb[i], &emb[j]) - cfg.margin)).exp();
    }
    (1.0 + s).ln() / cfg.gamma
}

/// Central finite differences of `f` at `emb`, step `h`.
pub fn fd_grad(emb: &[Vec<f64>], h: f64, f: impl Fn(&[Vec<f64>]) -> f64) -> Vec<Vec<f64>> {
    let mut g = vec![vec![0.0; emb[0].len()]; emb.len()];
    let mut work = emb.to_vec();
    for i in 0..emb.len() {
        for k in 0..emb[0].len() {
            work[i][k] = emb[i][k] + h;
            let up = f(&work);
            work[i][k] = emb[i][k] - h;
            let down = f(&work);
            work[i][k] = emb[i][k];
            g[i][k] = (up - down) / (2.0 * h);
        }
    }
    g
}

/// Max-norm error of `analytic` relative to the max-norm of `reference`.
/// The scale is floored at 1e-6: below it a central difference with step
/// 1e-6 cannot resolve the gradient and the error is effectively absolute.
pub fn rel_err(analytic: &[Vec<f64>], reference: &[Vec<f64>]) -> f64 {
    let scale = reference.iter().flatten().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let err = analytic
        .iter()
        .flatten()
        .zip(reference.iter().flatten())
        .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
    err / scale.max(1e-6)
}

/// Average precision straight from its definition.
pub fn naive_ap(flags: &[bool], n_relevant: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..flags.len() {
        if flags[k] {
            let hits = flags[..=k].iter().filter(|&&f| f).count();
            total += hits as f64 / (k + 1) as f64;
        }
    }
    total / n_relevant as f64
}

/// AP truncated to the first `r` positions, normalized by `r`.
pub fn naive_map_at_r(flags: &[bool], r: usize) -> f64 {
    let cut = &flags[..r.min(flags.len())];
    let mut total = 0.0;
    for k in 0..cut.len() {
        if cut[k] {
            let hits = cut[..=k].iter().filter(|&&f| f).count();
            total += hits as f64 / (k + 1) as f64;
        }
    }
    total / r as f64
}

/// Minimum assignment cost by enumerating every injective map from the
/// smaller side to the larger one.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let m = cost[0].len();
    let transpose = n > m;
    let (rows, cols) = if transpose { (m, n) } else { (n, m) };
    let at = |r: usize, c: usize| if transpose { cost[c][r] } else { cost[r][c] };
    let mut best = f64::INFINITY;
    let mut used = vec![false; cols];
    fn rec(
        r: usize,
        rows: usize,
        cols: usize,
        acc: f64,
        used: &mut Vec<bool>,
        best: &mut f64,
        at: &dyn Fn(usize, usize) -> f64,
    ) {
        if r == rows {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                rec(r + 1, rows, cols, acc + at(r, c), used, best, at);
                used[c] = false;
            }
        }
    }
    rec(0, rows, cols, 0.0, &mut used, &mut best, &at);
    best
}

/// Box IoU as intersection area over union area, spelled out.
pub fn naive_box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix0 = if a[0] > b[0] { a[0] } else { b[0] };
    let iy0 = if a[1] > b[1] { a[1] } else { b[1] };
    let ix1 = if a[2] < b[2] { a[2] } else { b[2] };
    let iy1 = if a[3] < b[3] { a[3] } else { b[3] };
    let inter = if ix1 > ix0 && iy1 > iy0 {
        (ix1 - ix0) * (iy1 - iy0)
    } else {
        0.0
    };
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    inter / (area(a) + area(b) - inter)
}

/// Reference NMS over `(frame, box, confidence)`: a detection survives iff
/// no surviving detection ranked above it overlaps it beyond `thr`. Ranks
/// compare every pair directly instead of sorting.
pub fn naive_nms(dets: &[(u64, [f64; 4], f64)], thr: f64) -> Vec<usize> {
    let n = dets.len();
    let above = |j: usize, i: usize| dets[j].2 > dets[i].2 || (dets[j].2 == dets[i].2 && j < i);
    let rank = |i: usize| (0..n).filter(|&j| above(j, i)).count();
    let mut by_rank: Vec<usize> = vec![0; n];
    for i in 0..n {
        by_rank[rank(i)] = i;
    }
    let mut kept = vec![false; n];
    for &i in &by_rank {
        kept[i] = !(0..n)
            .any(|j| kept[j] && above(j, i) && dets[j].0 == dets[i].0 && naive_box_iou(dets[j].1, dets[i].1) > thr);
    }
    (0..n).filter(|&i| kept[i]).collect()
}

/// Top-k by a full linear scan: score everything, then repeatedly pick the
/// best remaining candidate.
pub fn naive_top_k(entries: &[(u64, u64, Vec<f64>, bool)], q: &[f64], k: usize) -> Vec<(u64, u64)> {
    let mut pool: Vec<(u64, u64, f64)> = entries
        .iter()
        .filter(|e| !e.3)
        .map(|e| (e.0, e.1, naive_dot(&e.2, q)))
        .collect();
    let mut out = Vec::new();
    while out.len() < k && !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            let (a, b) = (&pool[i], &pool[best]);
            if a.2 > b.2 || (a.2 == b.2 && (a.0, a.1) < (b.0, b.1)) {
                best = i;
            }
        }
        let p = pool.remove(best);
        out.push((p.0, p.1));
    }
    out
}
