//! Index-exclusion front end: simulated detector, NMS, IoU, optimal
//! matching against ground truth, and the four exclusion cases.

mod detector;
mod geometry;
mod hungarian;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FrameId, InstanceId, InstanceRecord, PERSON};
use crate::index::{build_index, ExclusionReason, IndexEntry, SearchIndex};
use crate::{Error, Result};

pub use detector::{simulate_detections, DetectionRecord, DetectorNoiseModel};
pub use geometry::{iou, nms};
pub use hungarian::{hungarian_match, Assignment};

/// NMS overlap threshold used by the pipeline.
pub const NMS_IOU: f64 = 0.7;
/// A matched pair counts only above this overlap.
pub const MATCH_IOU: f64 = 0.5;
/// Pairs below this overlap get [`GATE_COST`] instead of `1 - IoU`.
pub const GATE_IOU: f64 = 0.05;
pub const GATE_COST: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseTag {
    DetectedPersonExcluded,
    /// Any ground-truth instance without a valid match, person or not.
    UndetectedPersonExcluded,
    MisclassifiedPersonIncluded,
    FalsePositiveExcluded,
    NormalIncluded,
}

impl CaseTag {
    pub const ALL: [CaseTag; 5] = [
        CaseTag::DetectedPersonExcluded,
        CaseTag::UndetectedPersonExcluded,
        CaseTag::MisclassifiedPersonIncluded,
        CaseTag::FalsePositiveExcluded,
        CaseTag::NormalIncluded,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CaseTag::DetectedPersonExcluded => "detected_person_excluded",
            CaseTag::UndetectedPersonExcluded => "undetected_person_excluded",
            CaseTag::MisclassifiedPersonIncluded => "misclassified_person_included",
            CaseTag::FalsePositiveExcluded => "false_positive_excluded",
            CaseTag::NormalIncluded => "normal_included",
        }
    }

    pub fn exclusion(self) -> ExclusionReason {
        match self {
            CaseTag::DetectedPersonExcluded => ExclusionReason::DetectedPerson,
            CaseTag::UndetectedPersonExcluded => ExclusionReason::Undetected,
            CaseTag::FalsePositiveExcluded => ExclusionReason::FalsePositive,
            CaseTag::MisclassifiedPersonIncluded | CaseTag::NormalIncluded => ExclusionReason::None,
        }
    }
}

impl fmt::Display for CaseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Outcome for one ground-truth instance, or for one person-labeled
/// detection that matched nothing (`instance_id` is `None`).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchRow {
    pub frame_id: FrameId,
    pub instance_id: Option<InstanceId>,
    pub detection: Option<usize>,
    pub iou: f64,
    pub case: CaseTag,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchReport {
    pub rows: Vec<MatchRow>,
}

impl MatchReport {
    pub fn counts(&self) -> BTreeMap<CaseTag, usize> {
        let mut out: BTreeMap<CaseTag, usize> = CaseTag::ALL.iter().map(|&c| (c, 0)).collect();
        for r in &self.rows {
            *out.entry(r.case).or_default() += 1;
        }
        out
    }

    pub fn count(&self, case: CaseTag) -> usize {
        self.rows.iter().filter(|r| r.case == case).count()
    }

    /// Person-labeled detections that matched no ground truth.
    pub fn injected_false_positives(&self) -> usize {
        self.rows.iter().filter(|r| r.instance_id.is_none()).count()
    }

    /// One line per case: `case,count,instance_ids`, ids space separated.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["case", "count", "instance_ids"])?;
        for case in CaseTag::ALL {
            let rows: Vec<&MatchRow> = self.rows.iter().filter(|r| r.case == case).collect();
            let ids: Vec<String> = rows
                .iter()
                .filter_map(|r| r.instance_id)
                .map(|id| id.to_string())
                .collect();
            out.write_record([case.as_str(), &rows.len().to_string(), &ids.join(" ")])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn pair_cost(v: f64) -> f64 {
    if v < GATE_IOU {
        GATE_COST
    } else {
        1.0 - v
    }
}

/// Matches NMS-filtered detections to ground truth frame by frame and
/// builds the index. Every ground-truth instance gets an entry embedded from
/// its own features; the excluded ones are flagged, not dropped.
pub fn apply_index_exclusion<F>(
    ds: &Dataset,
    dets: &[DetectionRecord],
    mut embed_fn: F,
) -> Result<(SearchIndex, MatchReport)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut gt: BTreeMap<FrameId, Vec<&InstanceRecord>> = BTreeMap::new();
    for r in ds.records() {
        gt.entry(r.frame_id).or_default().push(r);
    }
    let mut by_frame: BTreeMap<FrameId, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        if !gt.contains_key(&d.frame_id) {
            return Err(Error::UnknownFrame(d.frame_id));
        }
        if !(d.confidence.is_finite()) {
            return Err(Error::NonFinite("detection confidence"));
        }
        by_frame.entry(d.frame_id).or_default().push(i);
    }

    let mut report = MatchReport::default();
    for (&frame_id, records) in &gt {
        let frame_dets = by_frame.get(&frame_id).map_or(&[][..], Vec::as_slice);
        let mut overlap = vec![vec![0.0; frame_dets.len()]; records.len()];
        for (g, r) in records.iter().enumerate() {
            for (k, &d) in frame_dets.iter().enumerate() {
                overlap[g][k] = iou(&r.region, &dets[d].region)?;
            }
        }
        let cost: Vec<Vec<f64>> = overlap
            .iter()
            .map(|row| row.iter().map(|&v| pair_cost(v)).collect())
            .collect();
        let mut gt_match: Vec<Option<usize>> = vec![None; records.len()];
        let mut det_used = vec![false; frame_dets.len()];
        for (g, k) in hungarian_match(&cost).pairs {
            if overlap[g][k] > MATCH_IOU {
                gt_match[g] = Some(k);
                det_used[k] = true;
            }
        }
        for (g, r) in records.iter().enumerate() {
            let row = match gt_match[g] {
                None => MatchRow {
                    frame_id,
                    instance_id: Some(r.instance_id),
                    detection: None,
                    iou: 0.0,
                    case: CaseTag::UndetectedPersonExcluded,
                },
                Some(k) => {
                    let labeled_person = dets[frame_dets[k]].class_label == PERSON;
                    let case = match (r.is_person(), labeled_person) {
                        (true, true) => CaseTag::DetectedPersonExcluded,
                        (true, false) => CaseTag::MisclassifiedPersonIncluded,
                        (false, true) => CaseTag::FalsePositiveExcluded,
                        (false, false) => CaseTag::NormalIncluded,
                    };
                    MatchRow {
                        frame_id,
                        instance_id: Some(r.instance_id),
                        detection: Some(frame_dets[k]),
                        iou: overlap[g][k],
                        case,
                    }
                }
            };
            report.rows.push(row);
        }
        for (k, &d) in frame_dets.iter().enumerate() {
            if !det_used[k] && dets[d].class_label == PERSON {
                report.rows.push(MatchRow {
                    frame_id,
                    instance_id: None,
                    detection: Some(d),
                    iou: 0.0,
                    case: CaseTag::FalsePositiveExcluded,
                });
            }
        }
    }

    let mut entries = Vec::with_capacity(ds.len());
    for r in ds.records() {
        let e = embed_fn(&r.features)?;
        entries.push(IndexEntry::new(
            r.instance_id,
            r.frame_id,
            r.class_label.clone(),
            r.identity_label.clone(),
            e,
        ));
    }
    let mut index = build_index(entries)?;
    for row in &report.rows {
        let reason = row.case.exclusion();
        if let (Some(id), true) = (row.instance_id, reason != ExclusionReason::None) {
            index.exclude((id, row.frame_id), reason)?;
        }
    }
    Ok((index, report))
}
