use crate::data::BBox;
use crate::{Error, Result};

/// Intersection over union. A zero-area box scores 0 against everything
/// except an identical box, which scores 1.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    inter / (a.area() + b.area() - inter)
}

/// Share of records whose prediction reaches `thresh` IoU; a missing
/// prediction counts as a miss.
pub fn grounding_acc(preds: &[Option<BBox>], gts: &[BBox], thresh: f64) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::arg(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    if gts.is_empty() {
        return Err(Error::arg("grounding_acc over zero records"));
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| p.as_ref().is_some_and(|p| iou(p, g) >= thresh))
        .count();
    Ok(hits as f64 / gts.len() as f64)
}
