//! Multi-similarity loss with hard-pair mining and the confusion loss over a
//! forbidden identity set.
//!
//! Both losses consume unit-norm embeddings and return gradients with
//! respect to those embeddings, treating `s_ij = f_i . f_j`. The Jacobian of
//! the normalization that produced them belongs to the embedder. Mined pair
//! sets are a non-differentiable selection: gradients flow only through the
//! similarities of the selected pairs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsLossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub base: f64,
    /// Slack used when selecting hard pairs.
    pub mining_margin: f64,
}

impl Default for MsLossConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 50.0,
            base: 0.5,
            mining_margin: 0.1,
        }
    }
}

impl MsLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::InvalidConfig("alpha and beta must be > 0".into()));
        }
        if !self.base.is_finite() || !self.mining_margin.is_finite() {
            return Err(Error::InvalidConfig("base and mining_margin must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfusionConfig {
    pub gamma: f64,
    pub margin: f64,
    /// Weight of the confusion term in the total objective.
    pub weight: f64,
    pub forbidden_set: BTreeSet<String>,
}

impl Default for ConfusionConfig {
    fn default() -> Self {
        Self {
            gamma: 10.0,
            margin: 0.2,
            weight: 0.0,
            forbidden_set: BTreeSet::new(),
        }
    }
}

impl ConfusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma.is_nan() || self.gamma <= 0.0 {
            return Err(Error::InvalidConfig("gamma must be > 0".into()));
        }
        if !(-1.0..=1.0).contains(&self.margin) {
            return Err(Error::InvalidConfig("margin must lie in [-1, 1]".into()));
        }
        if !self.weight.is_finite() || self.weight < 0.0 {
            return Err(Error::InvalidConfig("confusion weight must be >= 0".into()));
        }
        Ok(())
    }

    /// True when the confusion term can contribute at all.
    pub fn is_active(&self) -> bool {
        self.weight > 0.0 && !self.forbidden_set.is_empty()
    }
}

/// A mini-batch of embeddings with their instance labels and optional
/// identity tags.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    embeddings: Vec<Vec<f64>>,
    labels: Vec<u64>,
    identity_tags: Vec<Option<String>>,
}

impl Batch {
    /// Validates shapes, finiteness and unit norm (within 1e-6).
    pub fn new(embeddings: Vec<Vec<f64>>, labels: Vec<u64>, identity_tags: Vec<Option<String>>) -> Result<Self> {
        let b = Self::new_unchecked(embeddings, labels, identity_tags)?;
        for e in &b.embeddings {
            if e.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("batch embedding"));
            }
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::InvalidRecord(format!("embedding norm {n} is not 1")));
            }
        }
        Ok(b)
    }

    /// Shape checks only. Gradient checks perturb embeddings off the unit
    /// sphere and use this constructor.
    pub fn new_unchecked(
        embeddings: Vec<Vec<f64>>,
        labels: Vec<u64>,
        identity_tags: Vec<Option<String>>,
    ) -> Result<Self> {
        let m = embeddings.len();
        if labels.len() != m {
            return Err(Error::Dimension {
                expected: m,
                got: labels.len(),
            });
        }
        if identity_tags.len() != m {
            return Err(Error::Dimension {
                expected: m,
                got: identity_tags.len(),
            });
        }
        if let Some(d) = embeddings.first().map(Vec::len) {
            if let Some(bad) = embeddings.iter().find(|e| e.len() != d) {
                return Err(Error::Dimension {
                    expected: d,
                    got: bad.len(),
                });
            }
        }
        Ok(Self {
            embeddings,
            labels,
            identity_tags,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn labels(&self) -> &[u64] {
        &self.labels
    }

    pub fn identity_tags(&self) -> &[Option<String>] {
        &self.identity_tags
    }
}

/// Symmetric `m x m` similarity matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    m: usize,
    data: Vec<f64>,
}

impl Similarity {
    pub fn size(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.m + j]
    }
}

/// Pairwise cosine similarities of the (unit-norm) batch embeddings: plain
/// dot products clamped to `[-1, 1]`, with an exact unit diagonal.
pub fn pairwise_cosine(batch: &Batch) -> Result<Similarity> {
    let e = &batch.embeddings;
    if e.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("batch embedding"));
    }
    let m = e.len();
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        data[i * m + i] = 1.0;
        for j in i + 1..m {
            let s = dot(&e[i], &e[j]).clamp(-1.0, 1.0);
            data[i * m + j] = s;
            data[j * m + i] = s;
        }
    }
    Ok(Similarity { m, data })
}

/// Hard positives and hard negatives per anchor.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MinedPairs {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

/// Multi-similarity mining. A positive `j` of anchor `i` is kept when
/// `s_ij < max_neg(i) + eps`, a negative `k` when `s_ik > min_pos(i) - eps`.
/// An anchor without negatives keeps all its positives and one without
/// positives keeps all its negatives.
pub fn mine_pairs(batch: &Batch, sim: &Similarity, cfg: &MsLossConfig) -> MinedPairs {
    let m = batch.len();
    let eps = cfg.mining_margin;
    let mut out = MinedPairs {
        positives: vec![Vec::new(); m],
        negatives: vec![Vec::new(); m],
    };
    for i in 0..m {
        let (pos, neg): (Vec<usize>, Vec<usize>) = (0..m)
            .filter(|&j| j != i)
            .partition(|&j| batch.labels[j] == batch.labels[i]);
        let max_neg = neg.iter().map(|&k| sim.get(i, k)).fold(f64::NEG_INFINITY, f64::max);
        let min_pos = pos.iter().map(|&j| sim.get(i, j)).fold(f64::INFINITY, f64::min);
        out.positives[i] = if neg.is_empty() {
            pos.clone()
        } else {
            pos.iter().copied().filter(|&j| sim.get(i, j) < max_neg + eps).collect()
        };
        out.negatives[i] = if pos.is_empty() {
            neg
        } else {
            neg.into_iter().filter(|&k| sim.get(i, k) > min_pos - eps).collect()
        };
    }
    out
}

/// Loss value with its gradient, one row per batch embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<Vec<f64>>,
}

impl LossGrad {
    fn zero(m: usize, d: usize) -> Self {
        Self {
            loss: 0.0,
            grad: vec![vec![0.0; d]; m],
        }
    }

    /// Accumulates `coef * d s_ij` into the gradient rows of `i` and `j`.
    fn add_pair(&mut self, emb: &[Vec<f64>], i: usize, j: usize, coef: f64) {
        let (ei, ej) = (&emb[i], &emb[j]);
        for (k, (a, b)) in ei.iter().zip(ej).enumerate() {
            self.grad[i][k] += coef * b;
            self.grad[j][k] += coef * a;
        }
    }
}

/// `log(1 + sum exp(a))` and the softmax-like weights
/// `exp(a_k) / (1 + sum exp(a))`, computed without overflow.
fn log1p_sum_exp(a: &[f64]) -> (f64, Vec<f64>) {
    if a.is_empty() {
        return (0.0, Vec::new());
    }
    let top = a.iter().copied().fold(0.0_f64, f64::max);
    let shifted: Vec<f64> = a.iter().map(|x| (x - top).exp()).collect();
    let denom = (-top).exp() + shifted.iter().sum::<f64>();
    (top + denom.ln(), shifted.into_iter().map(|x| x / denom).collect())
}

/// Multi-similarity loss over mined pairs, averaged over anchors.
pub fn ms_loss(batch: &Batch, cfg: &MsLossConfig) -> Result<LossGrad> {
    cfg.validate()?;
    let m = batch.len();
    if m < 2 {
        return Err(Error::BatchTooSmall(m));
    }
    let sim = pairwise_cosine(batch)?;
    let mined = mine_pairs(batch, &sim, cfg);
    Ok(ms_loss_with_pairs(batch, &sim, &mined, cfg))
}

pub(crate) fn ms_loss_with_pairs(batch: &Batch, sim: &Similarity, mined: &MinedPairs, cfg: &MsLossConfig) -> LossGrad {
    let m = batch.len();
    let emb = &batch.embeddings;
    let mut out = LossGrad::zero(m, batch.dim());
    let inv_m = 1.0 / m as f64;
    for i in 0..m {
        let pos = &mined.positives[i];
        let a: Vec<f64> = pos.iter().map(|&j| -cfg.alpha * (sim.get(i, j) - cfg.base)).collect();
        let (l, w) = log1p_sum_exp(&a);
        out.loss += inv_m * l / cfg.alpha;
        for (&j, wj) in pos.iter().zip(w) {
            out.add_pair(emb, i, j, -inv_m * wj);
        }

        let neg = &mined.negatives[i];
        let a: Vec<f64> = neg.iter().map(|&k| cfg.beta * (sim.get(i, k) - cfg.base)).collect();
        let (l, w) = log1p_sum_exp(&a);
        out.loss += inv_m * l / cfg.beta;
        for (&k, wk) in neg.iter().zip(w) {
            out.add_pair(emb, i, k, inv_m * wk);
        }
    }
    out
}

/// Pairs `(i, j)`, `i < j`, whose identity tags both lie in the forbidden
/// set and whose similarity strictly exceeds the margin.
pub fn forbidden_pairs(batch: &Batch, sim: &Similarity, cfg: &ConfusionConfig) -> Vec<(usize, usize)> {
    let tagged: Vec<usize> = (0..batch.len())
        .filter(|&i| {
            batch.identity_tags[i]
                .as_ref()
                .is_some_and(|t| cfg.forbidden_set.contains(t))
        })
        .collect();
    let mut pairs = Vec::new();
    for (a, &i) in tagged.iter().enumerate() {
        for &j in &tagged[a + 1..] {
            if sim.get(i, j) > cfg.margin {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Confusion loss `(1/gamma) log(1 + sum exp(gamma (s_ij - margin)))` over
/// all forbidden pairs of the batch. The weight is not applied here.
pub fn confusion_loss(batch: &Batch, cfg: &ConfusionConfig) -> Result<LossGrad> {
    cfg.validate()?;
    let sim = pairwise_cosine(batch)?;
    let pairs = forbidden_pairs(batch, &sim, cfg);
    Ok(confusion_loss_with_pairs(batch, &sim, &pairs, cfg))
}

pub(crate) fn confusion_loss_with_pairs(
    batch: &Batch,
    sim: &Similarity,
    pairs: &[(usize, usize)],
    cfg: &ConfusionConfig,
) -> LossGrad {
    let mut out = LossGrad::zero(batch.len(), batch.dim());
    let a: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| cfg.gamma * (sim.get(i, j) - cfg.margin))
        .collect();
    let (l, w) = log1p_sum_exp(&a);
    out.loss = l / cfg.gamma;
    for (&(i, j), wij) in pairs.iter().zip(w) {
        out.add_pair(&batch.embeddings, i, j, wij);
    }
    out
}

/// Loss components of the combined objective.
#[derive(Clone, Debug, PartialEq)]
pub struct TotalLoss {
    pub ms: f64,
    pub confusion: f64,
    pub total: f64,
    pub grad: Vec<Vec<f64>>,
}

/// `ms_loss + weight * confusion_loss`, gradients combined the same way.
/// With a zero weight or an empty forbidden set this is exactly `ms_loss`.
pub fn total_loss(batch: &Batch, ms_cfg: &MsLossConfig, conf_cfg: &ConfusionConfig) -> Result<TotalLoss> {
    conf_cfg.validate()?;
    let ms = ms_loss(batch, ms_cfg)?;
    if !conf_cfg.is_active() {
        return Ok(TotalLoss {
            ms: ms.loss,
            confusion: 0.0,
            total: ms.loss,
            grad: ms.grad,
        });
    }
    let conf = confusion_loss(batch, conf_cfg)?;
    let w = conf_cfg.weight;
    let grad = ms
        .grad
        .iter()
        .zip(&conf.grad)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + w * y).collect())
        .collect();
    Ok(TotalLoss {
        ms: ms.loss,
        confusion: conf.loss,
        total: ms.loss + w * conf.loss,
        grad,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(emb: Vec<Vec<f64>>, labels: Vec<u64>) -> Batch {
        let n = labels.len();
        Batch::new(emb, labels, vec![None; n]).unwrap()
    }

    fn tagged(emb: Vec<Vec<f64>>, tags: &[Option<&str>]) -> Batch {
        let labels = (0..emb.len() as u64).collect();
        Batch::new(emb, labels, tags.iter().map(|t| t.map(String::from)).collect()).unwrap()
    }

    fn conf(gamma: f64, margin: f64, ids: &[&str]) -> ConfusionConfig {
        ConfusionConfig {
            gamma,
            margin,
            weight: 1.0,
            forbidden_set: ids.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn cosine_of_identical_and_orthogonal() {
        let b = batch(vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 0, 1]);
        let s = pairwise_cosine(&b).unwrap();
        assert_eq!(s.get(0, 1), 1.0);
        assert_eq!(s.get(0, 2), 0.0);
        assert_eq!(s.get(2, 2), 1.0);
    }

    #[test]
    fn non_finite_embedding_rejected() {
        let b = Batch::new_unchecked(vec![vec![f64::NAN, 0.0], vec![1.0, 0.0]], vec![0, 1], vec![None, None]).unwrap();
        assert!(matches!(pairwise_cosine(&b), Err(Error::NonFinite(_))));
        assert!(Batch::new(vec![vec![2.0, 0.0]], vec![0], vec![None]).is_err());
    }

    #[test]
    fn maximal_separation_mines_nothing() {
        let b = batch(
            vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0], vec![-1.0, 0.0]],
            vec![0, 0, 1, 1],
        );
        let cfg = MsLossConfig::default();
        let mined = mine_pairs(&b, &pairwise_cosine(&b).unwrap(), &cfg);
        assert!(mined.positives.iter().chain(&mined.negatives).all(Vec::is_empty));
        let lg = ms_loss(&b, &cfg).unwrap();
        assert_eq!(lg.loss, 0.0);
        assert!(lg.grad.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn two_items_same_label_keep_the_positive() {
        let b = batch(vec![vec![1.0, 0.0], vec![0.6, 0.8]], vec![5, 5]);
        let mined = mine_pairs(&b, &pairwise_cosine(&b).unwrap(), &MsLossConfig::default());
        assert_eq!(mined.positives, vec![vec![1], vec![0]]);
        assert!(mined.negatives.iter().all(Vec::is_empty));
    }

    #[test]
    fn single_positive_at_base() {
        // s = 0.5 = base, alpha = 2: each anchor's positive term is ln(2)/2.
        let cfg = MsLossConfig {
            alpha: 2.0,
            base: 0.5,
            ..Default::default()
        };
        let b = batch(vec![vec![1.0, 0.0], vec![0.5, 0.75f64.sqrt()]], vec![1, 1]);
        let lg = ms_loss(&b, &cfg).unwrap();
        assert!((lg.loss - 2f64.ln() / 2.0).abs() < 1e-12);
        assert!((2f64.ln() / 2.0 - 0.3466).abs() < 1e-4);
    }

    #[test]
    fn ms_needs_two_items() {
        let b = batch(vec![vec![1.0, 0.0]], vec![0]);
        assert!(matches!(
            ms_loss(&b, &MsLossConfig::default()),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn confusion_boundary_and_direct_value() {
        let none = tagged(vec![vec![1.0, 0.0], vec![1.0, 0.0]], &[None, Some("x")]);
        assert_eq!(confusion_loss(&none, &conf(1.0, 0.0, &["a"])).unwrap().loss, 0.0);

        // s == margin is not a forbidden pair.
        let b = tagged(vec![vec![1.0, 0.0], vec![0.0, 1.0]], &[Some("a"), Some("a")]);
        assert_eq!(confusion_loss(&b, &conf(1.0, 0.0, &["a"])).unwrap().loss, 0.0);

        // gamma = 1, s - margin = 1.
        let b = tagged(vec![vec![1.0, 0.0], vec![1.0, 0.0]], &[Some("a"), Some("b")]);
        let v = confusion_loss(&b, &conf(1.0, 0.0, &["a", "b"])).unwrap().loss;
        assert!((v - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        assert!((v - 1.3133).abs() < 1e-4);
    }

    #[test]
    fn total_equals_ms_when_confusion_inactive() {
        let b = Batch::new(
            vec![vec![1.0, 0.0], vec![0.8, 0.6], vec![0.0, 1.0], vec![-0.6, 0.8]],
            vec![0, 0, 1, 1],
            vec![Some("a".into()), Some("a".into()), None, None],
        )
        .unwrap();
        let ms = ms_loss(&b, &MsLossConfig::default()).unwrap();
        let zero_w = ConfusionConfig {
            weight: 0.0,
            ..conf(5.0, 0.0, &["a"])
        };
        let t = total_loss(&b, &MsLossConfig::default(), &zero_w).unwrap();
        assert_eq!((t.total, &t.grad), (ms.loss, &ms.grad));
        let empty = conf(5.0, 0.0, &[]);
        let t = total_loss(&b, &MsLossConfig::default(), &empty).unwrap();
        assert_eq!((t.total, &t.grad), (ms.loss, &ms.grad));
    }

    #[test]
    fn config_validation() {
        assert!(MsLossConfig {
            alpha: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(conf(0.0, 0.0, &[]).validate().is_err());
        assert!(conf(1.0, 1.5, &[]).validate().is_err());
        assert!(ConfusionConfig {
            weight: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
