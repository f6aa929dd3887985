//! Exact cosine-similarity search with per-entry exclusion flags.
//!
//! Excluded entries stay in the index for auditing but are never returned by
//! a query. There is no way to lift an exclusion short of rebuilding.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::dataset::{FrameId, InstanceId};
use crate::{Error, Result};

pub const INDEX_SCHEMA: &str = "exclusion-search-index/v1";
const NORM_TOLERANCE: f64 = 1e-6;

pub type EntryKey = (InstanceId, FrameId);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    #[default]
    None,
    DetectedPerson,
    Undetected,
    FalsePositive,
    Manual,
}

impl ExclusionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExclusionReason::None => "none",
            ExclusionReason::DetectedPerson => "detected_person",
            ExclusionReason::Undetected => "undetected",
            ExclusionReason::FalsePositive => "false_positive",
            ExclusionReason::Manual => "manual",
        }
    }

    /// Exclusion case that produces this reason, as written to the audit.
    pub fn source_case(self) -> &'static str {
        match self {
            ExclusionReason::None => "-",
            ExclusionReason::DetectedPerson => "case1",
            ExclusionReason::Undetected => "case2",
            ExclusionReason::FalsePositive => "case4",
            ExclusionReason::Manual => "manual",
        }
    }
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub instance_id: InstanceId,
    pub frame_id: FrameId,
    pub class_label: String,
    pub identity_label: Option<String>,
    #[serde(default)]
    pub exclusion: ExclusionReason,
    pub embedding: Vec<f64>,
}

impl IndexEntry {
    pub fn new(
        instance_id: InstanceId,
        frame_id: FrameId,
        class_label: impl Into<String>,
        identity_label: Option<String>,
        embedding: Vec<f64>,
    ) -> Self {
        Self {
            instance_id,
            frame_id,
            class_label: class_label.into(),
            identity_label,
            exclusion: ExclusionReason::None,
            embedding,
        }
    }

    pub fn key(&self) -> EntryKey {
        (self.instance_id, self.frame_id)
    }

    pub fn is_excluded(&self) -> bool {
        self.exclusion != ExclusionReason::None
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub instance_id: InstanceId,
    pub frame_id: FrameId,
    pub score: f64,
}

/// Ranked hits, descending score, ties by ascending `(instance_id, frame_id)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QueryResult {
    pub hits: Vec<Hit>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchIndex {
    entries: Vec<IndexEntry>,
    positions: HashMap<EntryKey, usize>,
    dim: Option<usize>,
    version: u64,
}

/// Builds an index, checking unit norms, a common dimension and unique keys.
pub fn build_index(entries: Vec<IndexEntry>) -> Result<SearchIndex> {
    let mut positions = HashMap::with_capacity(entries.len());
    let dim = entries.first().map(|e| e.embedding.len());
    for (i, e) in entries.iter().enumerate() {
        if Some(e.embedding.len()) != dim {
            return Err(Error::Dimension {
                expected: dim.unwrap_or(0),
                got: e.embedding.len(),
            });
        }
        if e.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("index embedding"));
        }
        let n = e.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::InvalidRecord(format!(
                "entry ({}, {}) has norm {n}",
                e.instance_id, e.frame_id
            )));
        }
        if positions.insert(e.key(), i).is_some() {
            return Err(Error::DuplicateEntry {
                instance_id: e.instance_id,
                frame_id: e.frame_id,
            });
        }
    }
    Ok(SearchIndex {
        entries,
        positions,
        dim,
        version: 0,
    })
}

fn rank_order(a: &Hit, b: &Hit) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.instance_id.cmp(&b.instance_id))
        .then(a.frame_id.cmp(&b.frame_id))
}

impl SearchIndex {
    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, key: EntryKey) -> Option<&IndexEntry> {
        self.positions.get(&key).map(|&i| &self.entries[i])
    }

    pub fn position(&self, key: EntryKey) -> Option<usize> {
        self.positions.get(&key).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn searchable_len(&self) -> usize {
        self.entries.iter().filter(|e| !e.is_excluded()).count()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    /// Incremented by every exclusion that changed the index.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Every searchable entry scored against `q`, fully ranked.
    pub fn rank_all(&self, q: &[f64]) -> Vec<(usize, Hit)> {
        let mut scored: Vec<(usize, Hit)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.is_excluded())
            .map(|(i, e)| {
                let score = e.embedding.iter().zip(q).map(|(a, b)| a * b).sum();
                (
                    i,
                    Hit {
                        instance_id: e.instance_id,
                        frame_id: e.frame_id,
                        score,
                    },
                )
            })
            .collect();
        scored.sort_by(|a, b| rank_order(&a.1, &b.1));
        scored
    }

    /// Top-`k` searchable entries by cosine similarity to the unit query.
    pub fn query(&self, q: &[f64], k: usize) -> QueryResult {
        let mut hits: Vec<Hit> = self.rank_all(q).into_iter().map(|(_, h)| h).collect();
        hits.truncate(k);
        QueryResult { hits }
    }

    /// Marks an entry unsearchable. Excluding an already excluded entry
    /// changes nothing and keeps the first reason.
    pub fn exclude(&mut self, key: EntryKey, reason: ExclusionReason) -> Result<()> {
        if reason == ExclusionReason::None {
            return Err(Error::InvalidConfig("exclusion needs a reason".into()));
        }
        let &i = self.positions.get(&key).ok_or(Error::UnknownEntry {
            instance_id: key.0,
            frame_id: key.1,
        })?;
        if !self.entries[i].is_excluded() {
            self.entries[i].exclusion = reason;
            self.version += 1;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    schema: String,
    dim: Option<usize>,
    version: u64,
    len: usize,
}

pub fn write_index<W: Write>(index: &SearchIndex, mut w: W) -> Result<()> {
    let header = IndexHeader {
        schema: INDEX_SCHEMA.into(),
        dim: index.dim,
        version: index.version,
        len: index.entries.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for e in &index.entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_index<R: Read>(r: R) -> Result<SearchIndex> {
    let mut lines = BufReader::new(r).lines();
    let header: IndexHeader = match lines.next() {
        None => return build_index(Vec::new()),
        Some(l) => serde_json::from_str(&l?).map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?,
    };
    if header.schema != INDEX_SCHEMA {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported schema `{}`", header.schema),
        });
    }
    let mut entries = Vec::with_capacity(header.len);
    for (i, l) in lines.enumerate() {
        let l = l?;
        if l.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&l).map_err(|e| Error::Parse {
            line: i + 2,
            msg: e.to_string(),
        })?);
    }
    let mut index = build_index(entries)?;
    index.version = header.version;
    Ok(index)
}

#[derive(Serialize)]
struct AuditRow<'a> {
    instance_id: InstanceId,
    frame_id: FrameId,
    reason: &'a str,
    source_case: &'a str,
}

/// Exclusion audit: one row per excluded entry.
pub fn write_audit<W: Write>(index: &SearchIndex, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for e in index.entries.iter().filter(|e| e.is_excluded()) {
        out.serialize(AuditRow {
            instance_id: e.instance_id,
            frame_id: e.frame_id,
            reason: e.exclusion.as_str(),
            source_case: e.exclusion.source_case(),
        })?;
    }
    out.flush()?;
    Ok(())
}
