use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, Dataset, FrameId, InstanceId, Region, FRAME_SIZE, PERSON};
use crate::rng::substream;
use crate::{Error, Result};

/// Error model of the simulated detector. All rates are probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorNoiseModel {
    pub miss_rate: f64,
    /// A detected person gets a non-person label.
    pub misclass_rate: f64,
    /// A detected non-person gets the person label.
    pub false_person_rate: f64,
    /// Box coordinates move by this fraction of the box size (one sd).
    pub box_jitter: f64,
    /// A detection is emitted twice, the copy slightly shifted and less
    /// confident. NMS is expected to remove it.
    pub duplicate_rate: f64,
    /// Per frame, a person-labeled box at a random position.
    pub spurious_rate: f64,
    pub seed: u64,
}

impl Default for DetectorNoiseModel {
    fn default() -> Self {
        Self {
            miss_rate: 0.0,
            misclass_rate: 0.0,
            false_person_rate: 0.0,
            box_jitter: 0.0,
            duplicate_rate: 0.0,
            spurious_rate: 0.0,
            seed: 0,
        }
    }
}

impl DetectorNoiseModel {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("miss_rate", self.miss_rate),
            ("misclass_rate", self.misclass_rate),
            ("false_person_rate", self.false_person_rate),
            ("duplicate_rate", self.duplicate_rate),
            ("spurious_rate", self.spurious_rate),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidConfig(format!("{name} = {r} is not in [0, 1]")));
            }
        }
        if !(self.box_jitter.is_finite() && self.box_jitter >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "box_jitter = {} must be >= 0",
                self.box_jitter
            )));
        }
        Ok(())
    }
}

/// One simulated detector output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame_id: FrameId,
    pub region: Region,
    pub class_label: String,
    pub confidence: f64,
    /// Ground-truth instance the detection was simulated from; `None` for
    /// spurious boxes. Matching never looks at it.
    pub source: Option<InstanceId>,
}

const MIN_SIDE: f64 = 1.0;
const DUPLICATE_SHIFT: f64 = 0.02;

fn jitter_box<R: Rng + ?Sized>(b: &BBox, scale: f64, rng: &mut R) -> BBox {
    let n: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let (w, h) = (b.width(), b.height());
    let mut x0 = b.x_min + n[0] * scale * w;
    let mut x1 = b.x_max + n[1] * scale * w;
    let mut y0 = b.y_min + n[2] * scale * h;
    let mut y1 = b.y_max + n[3] * scale * h;
    if x1 < x0 {
        std::mem::swap(&mut x0, &mut x1);
    }
    if y1 < y0 {
        std::mem::swap(&mut y0, &mut y1);
    }
    if x1 - x0 < MIN_SIDE {
        let c = 0.5 * (x0 + x1);
        (x0, x1) = (c - MIN_SIDE / 2.0, c + MIN_SIDE / 2.0);
    }
    if y1 - y0 < MIN_SIDE {
        let c = 0.5 * (y0 + y1);
        (y0, y1) = (c - MIN_SIDE / 2.0, c + MIN_SIDE / 2.0);
    }
    BBox::new(x0, y0, x1, y1)
}

/// Simulates detections frame by frame. Every ground-truth instance and
/// every frame consumes a fixed number of draws whatever the rates, so two
/// noise models with the same seed see the same underlying randomness.
pub fn simulate_detections(ds: &Dataset, noise: &DetectorNoiseModel) -> Result<Vec<DetectionRecord>> {
    noise.validate()?;
    let mut rng = substream(noise.seed, "detector");
    let others: Vec<&String> = ds.class_vocabulary().iter().filter(|c| c.as_str() != PERSON).collect();
    let mut frames: BTreeMap<FrameId, Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.records().iter().enumerate() {
        frames.entry(r.frame_id).or_default().push(i);
    }

    let mut out = Vec::new();
    for (&frame_id, members) in &frames {
        for &i in members {
            let rec = &ds.records()[i];
            let u_miss: f64 = rng.random();
            let u_label: f64 = rng.random();
            let u_other: f64 = rng.random();
            let confidence = rng.random_range(0.5..1.0);
            let gt_box = rec
                .region
                .bounding_box()
                .ok_or_else(|| Error::DegenerateRegion(format!("instance {} has an empty region", rec.instance_id)))?;
            let jittered = jitter_box(&gt_box, noise.box_jitter, &mut rng);
            let u_dup: f64 = rng.random();
            let dup_box = jitter_box(&jittered, DUPLICATE_SHIFT, &mut rng);
            if u_miss < noise.miss_rate {
                continue;
            }
            let class_label = if rec.is_person() {
                if u_label < noise.misclass_rate {
                    match others.len() {
                        0 => "object".to_string(),
                        n => others[((u_other * n as f64) as usize).min(n - 1)].clone(),
                    }
                } else {
                    PERSON.to_string()
                }
            } else if u_label < noise.false_person_rate {
                PERSON.to_string()
            } else {
                rec.class_label.clone()
            };
            let region = if noise.box_jitter == 0.0 {
                rec.region.clone()
            } else {
                Region::BBox(jittered)
            };
            out.push(DetectionRecord {
                frame_id,
                region,
                class_label: class_label.clone(),
                confidence,
                source: Some(rec.instance_id),
            });
            if u_dup < noise.duplicate_rate {
                out.push(DetectionRecord {
                    frame_id,
                    region: Region::BBox(dup_box),
                    class_label,
                    confidence: confidence * 0.9,
                    source: Some(rec.instance_id),
                });
            }
        }
        let u_spur: f64 = rng.random();
        let side: f64 = rng.random_range(16.0..48.0);
        let x0: f64 = rng.random_range(0.0..FRAME_SIZE - side);
        let y0: f64 = rng.random_range(0.0..FRAME_SIZE - side);
        let confidence = rng.random_range(0.5..1.0);
        if u_spur < noise.spurious_rate {
            out.push(DetectionRecord {
                frame_id,
                region: Region::BBox(BBox::new(x0, y0, x0 + side, y0 + 2.0 * side)),
                class_label: PERSON.to_string(),
                confidence,
                source: None,
            });
        }
    }
    Ok(out)
}
