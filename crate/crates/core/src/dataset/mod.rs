//! Domain records, splits and dataset invariants.

mod io;
mod region;
mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, SCHEMA_VERSION};
pub use region::{BBox, Mask, Region};
pub use synth::{generate_synthetic, SyntheticGenConfig, FRAME_SIZE};

pub type InstanceId = u64;
pub type FrameId = u64;

/// Class label carried by every person instance.
pub const PERSON: &str = "person";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    /// Offset added to instance and frame ids so splits never collide.
    pub fn id_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Validation => 1_000_000,
            Split::Test => 2_000_000,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

/// Additive feature components of a synthetic person, used by the
/// partial-region probes. Local parts occupy a vertical band of the
/// instance region (fractions of its height, measured from the top); global
/// parts belong to the whole silhouette.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartKind {
    Silhouette,
    Pose,
    Head,
    UpperClothing,
    LowerClothing,
    Bag,
}

impl PartKind {
    pub const ALL: [PartKind; 6] = [
        PartKind::Silhouette,
        PartKind::Pose,
        PartKind::Head,
        PartKind::UpperClothing,
        PartKind::LowerClothing,
        PartKind::Bag,
    ];

    /// Vertical extent `(top, bottom)` for local parts, `None` for global ones.
    pub fn band(self) -> Option<(f64, f64)> {
        match self {
            PartKind::Silhouette | PartKind::Pose => None,
            PartKind::Head => Some((0.0, 0.2)),
            PartKind::UpperClothing => Some((0.2, 0.55)),
            PartKind::LowerClothing => Some((0.55, 1.0)),
            PartKind::Bag => Some((0.35, 0.65)),
        }
    }
}

/// One ground-truth occurrence of an object in a frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: InstanceId,
    pub frame_id: FrameId,
    pub class_label: String,
    pub identity_label: Option<String>,
    pub region: Region,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub parts: BTreeMap<PartKind, Vec<f64>>,
}

impl InstanceRecord {
    pub fn is_person(&self) -> bool {
        self.class_label == PERSON
    }

    pub fn key(&self) -> (InstanceId, FrameId) {
        (self.instance_id, self.frame_id)
    }

    /// Checks the per-record invariants against the expected feature width.
    pub fn validate(&self, d_in: usize) -> Result<()> {
        let ctx = || format!("instance {} frame {}", self.instance_id, self.frame_id);
        match (&self.identity_label, self.is_person()) {
            (Some(_), false) => {
                return Err(Error::InvalidRecord(format!(
                    "{}: identity_label on non-person class `{}`",
                    ctx(),
                    self.class_label
                )))
            }
            (None, true) => {
                return Err(Error::InvalidRecord(format!(
                    "{}: person without identity_label",
                    ctx()
                )))
            }
            _ => {}
        }
        if self.features.len() != d_in {
            return Err(Error::InvalidRecord(format!(
                "{}: expected {d_in} features, got {}",
                ctx(),
                self.features.len()
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRecord(format!("{}: non-finite feature", ctx())));
        }
        for (kind, v) in &self.parts {
            if v.len() != d_in || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidRecord(format!(
                    "{}: malformed part component {kind:?}",
                    ctx()
                )));
            }
        }
        self.region.validate()
    }
}

/// An ordered collection of records from one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    split: Split,
    class_vocabulary: Vec<String>,
    records: Vec<InstanceRecord>,
}

impl Dataset {
    pub fn new(split: Split, class_vocabulary: Vec<String>, records: Vec<InstanceRecord>) -> Result<Self> {
        let vocab: HashSet<&str> = class_vocabulary.iter().map(String::as_str).collect();
        if vocab.len() != class_vocabulary.len() {
            return Err(Error::InvalidConfig("duplicate class in vocabulary".into()));
        }
        let d_in = records.first().map(|r| r.features.len()).unwrap_or(0);
        let mut keys = HashSet::with_capacity(records.len());
        for r in &records {
            if !vocab.contains(r.class_label.as_str()) {
                return Err(Error::UnknownClass(r.class_label.clone()));
            }
            r.validate(d_in)?;
            if !keys.insert(r.key()) {
                return Err(Error::InvalidRecord(format!(
                    "duplicate (instance {}, frame {})",
                    r.instance_id, r.frame_id
                )));
            }
        }
        Ok(Self {
            split,
            class_vocabulary,
            records,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn class_vocabulary(&self) -> &[String] {
        &self.class_vocabulary
    }

    pub fn records(&self) -> &[InstanceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Feature width, `None` for an empty dataset.
    pub fn d_in(&self) -> Option<usize> {
        self.records.first().map(|r| r.features.len())
    }

    pub fn n_persons(&self) -> usize {
        self.records.iter().filter(|r| r.is_person()).count()
    }

    /// Sorted distinct identity labels.
    pub fn identities(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.records.iter().filter_map(|r| r.identity_label.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    fn with_records(&self, records: Vec<InstanceRecord>) -> Self {
        Self {
            split: self.split,
            class_vocabulary: self.class_vocabulary.clone(),
            records,
        }
    }

    /// Subset keeping records for which `keep` holds, order preserved.
    pub fn filter(&self, mut keep: impl FnMut(&InstanceRecord) -> bool) -> Self {
        self.with_records(self.records.iter().filter(|r| keep(r)).cloned().collect())
    }
}

/// Errors if two datasets share an instance id.
pub fn check_disjoint(a: &Dataset, b: &Dataset) -> Result<()> {
    let ids: HashSet<InstanceId> = a.records.iter().map(|r| r.instance_id).collect();
    if let Some(r) = b.records.iter().find(|r| ids.contains(&r.instance_id)) {
        return Err(Error::InvalidRecord(format!(
            "instance {} appears in both {} and {}",
            r.instance_id, a.split, b.split
        )));
    }
    Ok(())
}

/// Removes every person record, keeping all other records in order.
pub fn strip_persons(ds: &Dataset) -> Dataset {
    ds.filter(|r| !r.is_person())
}

/// Randomly drops non-person records from `ds` until it holds `target`
/// records (or no non-person records remain). Used to build the
/// with-persons training set at the same size as the stripped one.
pub fn downsample_non_persons<R: Rng + ?Sized>(ds: &Dataset, target: usize, rng: &mut R) -> Dataset {
    if ds.len() <= target {
        return ds.clone();
    }
    let non_person: Vec<usize> = (0..ds.len()).filter(|&i| !ds.records[i].is_person()).collect();
    let n_drop = (ds.len() - target).min(non_person.len());
    let mut drop = vec![false; ds.len()];
    for k in sample(rng, non_person.len(), n_drop).into_iter() {
        drop[non_person[k]] = true;
    }
    let records = ds
        .records
        .iter()
        .zip(&drop)
        .filter(|(_, &d)| !d)
        .map(|(r, _)| r.clone())
        .collect();
    ds.with_records(records)
}
