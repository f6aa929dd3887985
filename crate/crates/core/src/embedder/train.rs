//! Balanced mini-batch training with AdamW.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adamw::{adamw_step, AdamState};
use super::model::{batch_objective, EmbedderParams, ModelConfig};
use crate::dataset::{Dataset, InstanceRecord};
use crate::losses::{ConfusionConfig, MsLossConfig};
use crate::rng::substream;
use crate::{Error, Result};

/// Which record field feeds the confusion loss as its identity tag.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagSource {
    /// Person identity labels; the forbidden set names identities.
    #[default]
    Identity,
    /// Class labels; a forbidden set of `{"person"}` covers every person.
    ClassLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Upper bound on batch size; `batch_size / samples_per_label` labels
    /// are drawn per batch.
    pub batch_size: usize,
    pub samples_per_label: usize,
    /// Learning rate of the hidden (feature) layer, `mlp1` only.
    pub lr_feature: f64,
    /// Learning rate of the output (embedding) layer.
    pub lr_embed: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub confusion_tags: TagSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            samples_per_label: 4,
            lr_feature: 1e-3,
            lr_embed: 1e-2,
            weight_decay: 1e-4,
            seed: 0,
            model: ModelConfig::default(),
            confusion_tags: TagSource::Identity,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be >= 2".into()));
        }
        if self.samples_per_label < 1 || self.labels_per_batch() < 2 {
            return Err(Error::InvalidConfig(
                "batch_size / samples_per_label must give at least 2 labels per batch".into(),
            ));
        }
        let rates = [self.lr_feature, self.lr_embed, self.weight_decay];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidConfig(
                "learning rates and weight decay must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn labels_per_batch(&self) -> usize {
        self.batch_size / self.samples_per_label.max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ms_loss: f64,
    pub conf_loss: f64,
    pub total: f64,
}

pub type TrainLog = Vec<EpochLog>;

/// One epoch of P x K batches (record indices). Labels are visited in a
/// shuffled order, `labels_per_batch` at a time, each contributing up to
/// `samples_per_label` of its records. Batches with fewer than two labels,
/// or without any label holding two samples, are not emitted.
pub fn balanced_batches<R: Rng + ?Sized>(
    records: &[InstanceRecord],
    labels_per_batch: usize,
    samples_per_label: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let mut by_label: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_label.entry(r.instance_id).or_default().push(i);
    }
    if by_label.len() < 2 {
        return Err(Error::Sampler(format!(
            "need at least 2 distinct labels, dataset has {}",
            by_label.len()
        )));
    }
    if by_label.values().all(|v| v.len() < 2) {
        return Err(Error::Sampler(
            "no label has two samples; no positive pairs exist".into(),
        ));
    }
    let mut labels: Vec<u64> = by_label.keys().copied().collect();
    labels.shuffle(rng);
    let mut batches = Vec::new();
    for group in labels.chunks(labels_per_batch) {
        if group.len() < 2 {
            continue;
        }
        let mut batch = Vec::new();
        let mut has_pair = false;
        for l in group {
            let mut idx = by_label[l].clone();
            idx.shuffle(rng);
            idx.truncate(samples_per_label);
            has_pair |= idx.len() >= 2;
            batch.extend(idx);
        }
        if has_pair {
            batches.push(batch);
        }
    }
    if batches.is_empty() {
        return Err(Error::Sampler(
            "could not form a batch with two labels and a positive pair".into(),
        ));
    }
    Ok(batches)
}

fn tag_of(r: &InstanceRecord, source: TagSource) -> Option<String> {
    match source {
        TagSource::Identity => r.identity_label.clone(),
        TagSource::ClassLabel => Some(r.class_label.clone()),
    }
}

/// Trains an embedder on `ds` under `ms_loss + weight * confusion_loss`.
///
/// Starts from `init` when given, otherwise from a seeded initialisation.
/// Deterministic for a given config.
pub fn train(
    ds: &Dataset,
    ms_cfg: &MsLossConfig,
    conf_cfg: &ConfusionConfig,
    tcfg: &TrainConfig,
    init: Option<&EmbedderParams>,
) -> Result<(EmbedderParams, TrainLog)> {
    tcfg.validate()?;
    ms_cfg.validate()?;
    conf_cfg.validate()?;
    let d_in = ds
        .d_in()
        .ok_or_else(|| Error::Sampler("cannot train on an empty dataset".into()))?;
    let mut params = match init {
        Some(p) => {
            if p.d_in() != d_in {
                return Err(Error::Dimension {
                    expected: d_in,
                    got: p.d_in(),
                });
            }
            p.clone()
        }
        None => EmbedderParams::init(&tcfg.model, d_in, tcfg.seed)?,
    };
    let records = ds.records();
    let labels: Vec<u64> = records.iter().map(|r| r.instance_id).collect();
    let tags: Vec<Option<String>> = records.iter().map(|r| tag_of(r, tcfg.confusion_tags)).collect();
    let mut states: Vec<(AdamState, AdamState)> = params
        .layers()
        .iter()
        .map(|l| (AdamState::new(l.weights.len()), AdamState::new(l.bias.len())))
        .collect();
    let n_layers = params.layers().len();
    let mut rng = substream(tcfg.seed, "sampler");
    let mut log = Vec::with_capacity(tcfg.epochs);

    for epoch in 1..=tcfg.epochs {
        let batches = balanced_batches(records, tcfg.labels_per_batch(), tcfg.samples_per_label, &mut rng)?;
        let (mut ms_sum, mut conf_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for batch in &batches {
            let inputs: Vec<&[f64]> = batch.iter().map(|&i| records[i].features.as_slice()).collect();
            let b_labels: Vec<u64> = batch.iter().map(|&i| labels[i]).collect();
            let b_tags: Vec<Option<String>> = batch.iter().map(|&i| tags[i].clone()).collect();
            let (value, grads) = batch_objective(&params, &inputs, &b_labels, &b_tags, ms_cfg, conf_cfg)?;
            ms_sum += value.ms;
            conf_sum += value.confusion;
            total_sum += value.total;
            for (k, (layer, grad)) in params.layers_mut().iter_mut().zip(&grads).enumerate() {
                let lr = if k + 1 == n_layers {
                    tcfg.lr_embed
                } else {
                    tcfg.lr_feature
                };
                let (ws, bs) = &mut states[k];
                adamw_step(&mut layer.weights, &grad.weights, ws, lr, tcfg.weight_decay);
                adamw_step(&mut layer.bias, &grad.bias, bs, lr, tcfg.weight_decay);
            }
        }
        let n = batches.len() as f64;
        log.push(EpochLog {
            epoch,
            ms_loss: ms_sum / n,
            conf_loss: conf_sum / n,
            total: total_sum / n,
        });
    }
    Ok((params, log))
}

/// Forbidden set holding every identity label present in `ds`.
pub fn person_identities(ds: &Dataset) -> BTreeSet<String> {
    ds.identities().into_iter().collect()
}

pub fn write_train_log<W: Write>(log: &[EpochLog], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in log {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}
