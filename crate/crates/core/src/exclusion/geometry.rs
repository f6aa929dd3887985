use crate::dataset::{BBox, Mask, Region};
use crate::Result;

use super::DetectionRecord;

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(crate::Error::DegenerateRegion(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for r in 0..a.height() {
        for c in 0..a.width() {
            let (x, y) = (a.get(r, c), b.get(r, c));
            inter += (x && y) as usize;
            union += (x || y) as usize;
        }
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Intersection over union. Boxes are compared analytically, masks by
/// counting cells; a box against a mask is rasterized onto the mask grid.
pub fn iou(a: &Region, b: &Region) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    match (a, b) {
        (Region::BBox(x), Region::BBox(y)) => Ok(box_iou(x, y)),
        (Region::Mask(x), Region::Mask(y)) => mask_iou(x, y),
        (Region::BBox(x), Region::Mask(m)) | (Region::Mask(m), Region::BBox(x)) => {
            mask_iou(&Mask::from_bbox(x, m.height(), m.width()), m)
        }
    }
}

/// Greedy class-agnostic suppression within each frame. Candidates are
/// visited by descending confidence, ties in input order; a candidate is
/// dropped when it overlaps an already kept detection by more than
/// `iou_threshold`. Survivors come back in input order.
pub fn nms(dets: &[DetectionRecord], iou_threshold: f64) -> Result<Vec<DetectionRecord>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].confidence.total_cmp(&dets[i].confidence).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let mut suppressed = false;
        for &k in &kept {
            if dets[k].frame_id == dets[i].frame_id && iou(&dets[k].region, &dets[i].region)? > iou_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    Ok(kept.into_iter().map(|i| dets[i].clone()).collect())
}
