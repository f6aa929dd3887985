//! Partial-region probes: person queries restricted to a crop or to a single
//! part, searched against references restricted the same way.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, Dataset, InstanceRecord, PartKind, Region};
use crate::embedder::{embed, EmbedderParams};
use crate::index::{build_index, IndexEntry};
use crate::metrics::{evaluate, EvalProtocol};
use crate::{Error, Result};

/// Default crop: 40% of the height off the top, 57.5% off the bottom.
pub const CROP_TOP: f64 = 0.4;
pub const CROP_BOTTOM: f64 = 0.575;

fn check_fractions(top: f64, bottom: f64) -> Result<()> {
    if !(top >= 0.0 && bottom >= 0.0 && top + bottom < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "crop fractions ({top}, {bottom}) must be >= 0 and sum below 1"
        )));
    }
    Ok(())
}

/// Keeps the horizontal band between `top` and `1 - bottom` of the
/// region's height. Masks keep whole rows of their own vertical extent.
pub fn crop_region(r: &Region, top: f64, bottom: f64) -> Result<Region> {
    check_fractions(top, bottom)?;
    r.validate()?;
    match r {
        Region::BBox(b) => {
            let h = b.height();
            let out = BBox::new(b.x_min, b.y_min + top * h, b.x_max, b.y_max - bottom * h);
            out.validate()?;
            Ok(Region::BBox(out))
        }
        Region::Mask(m) => {
            let (r0, r1) = m
                .row_extent()
                .ok_or_else(|| Error::DegenerateRegion("empty mask".into()))?;
            let h = (r1 - r0) as f64;
            let from = r0 + (top * h).round() as usize;
            let to = r1 - (bottom * h).round() as usize;
            let out = m.keep_rows(from, to.max(from));
            if out.count() == 0 {
                return Err(Error::DegenerateRegion(format!(
                    "crop ({top}, {bottom}) leaves nothing"
                )));
            }
            Ok(Region::Mask(out))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProbePart {
    Full,
    Crop { top: f64, bottom: f64 },
    Bag,
    UpperClothing,
}

impl ProbePart {
    pub fn name(&self) -> &'static str {
        match self {
            ProbePart::Full => "full",
            ProbePart::Crop { .. } => "cropped",
            ProbePart::Bag => "bag",
            ProbePart::UpperClothing => "upper_clothing",
        }
    }

    /// The four rows of the suite, with the default crop.
    pub fn suite() -> [ProbePart; 4] {
        [
            ProbePart::Full,
            ProbePart::Crop {
                top: CROP_TOP,
                bottom: CROP_BOTTOM,
            },
            ProbePart::Bag,
            ProbePart::UpperClothing,
        ]
    }
}

fn residual(rec: &InstanceRecord) -> Vec<f64> {
    let mut out = rec.features.clone();
    for v in rec.parts.values() {
        out.iter_mut().zip(v).for_each(|(o, x)| *o -= x);
    }
    out
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// Weight of a part inside the kept band `[top, 1 - bottom]`: the share of
/// the smaller of the two extents that overlaps, for local parts, and the
/// kept height, for global ones.
fn crop_weight(part: PartKind, keep: (f64, f64)) -> f64 {
    match part.band() {
        None => keep.1 - keep.0,
        Some(band) => overlap(band, keep) / (band.1 - band.0).min(keep.1 - keep.0),
    }
}

/// Features the embedder sees when only `part` of the instance is visible.
/// The record's unexplained residual is always kept. `Ok(None)` means the
/// record has no such part.
pub fn part_features(rec: &InstanceRecord, part: ProbePart) -> Result<Option<Vec<f64>>> {
    let single = |kind: PartKind| {
        rec.parts.get(&kind).map(|v| {
            let mut out = residual(rec);
            out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
            out
        })
    };
    match part {
        ProbePart::Full => Ok(Some(rec.features.clone())),
        ProbePart::Crop { top, bottom } => {
            check_fractions(top, bottom)?;
            if top == 0.0 && bottom == 0.0 {
                return Ok(Some(rec.features.clone()));
            }
            let keep = (top, 1.0 - bottom);
            let mut out = residual(rec);
            for (&kind, v) in &rec.parts {
                let w = crop_weight(kind, keep);
                out.iter_mut().zip(v).for_each(|(o, x)| *o += w * x);
            }
            Ok(Some(out))
        }
        ProbePart::Bag => Ok(single(PartKind::Bag)),
        ProbePart::UpperClothing => Ok(single(PartKind::UpperClothing)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeRow {
    pub part: String,
    pub loss_variant: String,
    #[serde(rename = "person_mAP")]
    pub person_map: f64,
    pub n_queries: usize,
    #[serde(skip)]
    pub n_skipped_records: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub fn get(&self, part: &str, loss_variant: &str) -> Option<&ProbeRow> {
        self.rows
            .iter()
            .find(|r| r.part == part && r.loss_variant == loss_variant)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Person dataset seen through `part`, plus the number of persons without it.
pub fn probe_dataset(ds: &Dataset, part: ProbePart) -> Result<(Dataset, usize)> {
    let mut records = Vec::new();
    let mut skipped = 0;
    for r in ds.records().iter().filter(|r| r.is_person()) {
        match part_features(r, part)? {
            Some(features) => records.push(InstanceRecord {
                features,
                parts: Default::default(),
                ..r.clone()
            }),
            None => skipped += 1,
        }
    }
    Ok((
        Dataset::new(ds.split(), ds.class_vocabulary().to_vec(), records)?,
        skipped,
    ))
}

/// Person mAP of one model on one part, over a dedicated index holding the
/// same part of every other person.
pub fn run_probe(params: &EmbedderParams, ds: &Dataset, part: ProbePart) -> Result<(f64, usize, usize)> {
    let (probe_ds, skipped) = probe_dataset(ds, part)?;
    let mut entries = Vec::with_capacity(probe_ds.len());
    for r in probe_ds.records() {
        entries.push(IndexEntry::new(
            r.instance_id,
            r.frame_id,
            r.class_label.clone(),
            r.identity_label.clone(),
            embed(params, &r.features)?,
        ));
    }
    let index = build_index(entries)?;
    let report = evaluate(&index, |f| embed(params, f), &probe_ds, &EvalProtocol::person())?;
    Ok((report.map, report.n_queries, skipped))
}

/// Every part of `parts` under every named model.
pub fn run_probe_suite(models: &[(&str, &EmbedderParams)], ds: &Dataset, parts: &[ProbePart]) -> Result<ProbeReport> {
    let mut rows = Vec::new();
    for part in parts {
        for (name, params) in models {
            let (person_map, n_queries, n_skipped_records) = run_probe(params, ds, *part)?;
            rows.push(ProbeRow {
                part: part.name().to_string(),
                loss_variant: name.to_string(),
                person_map,
                n_queries,
                n_skipped_records,
            });
        }
    }
    Ok(ProbeReport { rows })
}
