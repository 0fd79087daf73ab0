use serde::{Deserialize, Serialize};

use super::scene::PixelBox;
use crate::error::{Error, Result};

/// Axis-aligned box with real coordinates, `x1 <= x2`, `y1 <= y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

impl From<PixelBox> for BBox {
    fn from(b: PixelBox) -> Self {
        Self::new(b.x1 as f64, b.y1 as f64, b.x2 as f64, b.y2 as f64)
    }
}

fn quantize(v: f64, size: usize) -> u32 {
    ((v / size as f64 * 100.0).round().max(0.0) as u32).min(99)
}

/// `{<x1><y1><x2><y2>}` with each coordinate scaled to an integer in 0–99.
pub fn serialize_bbox(b: &BBox, image_size: usize) -> String {
    let q = |v| quantize(v, image_size);
    format!("{{<{}><{}><{}><{}>}}", q(b.x1), q(b.y1), q(b.x2), q(b.y2))
}

/// Inverse of [`serialize_bbox`] up to quantisation. Surrounding whitespace
/// and spaces between coordinate tokens are tolerated.
pub fn parse_bbox(text: &str, image_size: usize) -> Result<BBox> {
    let bad = || Error::Parse(format!("malformed box `{text}`"));
    let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let inner = compact
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(bad)?;
    let inner = inner.strip_prefix('<').and_then(|s| s.strip_suffix('>')).ok_or_else(bad)?;
    let vals: Vec<u32> = inner
        .split("><")
        .map(|p| p.parse::<u32>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if vals.len() != 4 || vals.iter().any(|v| *v > 99) {
        return Err(bad());
    }
    let s = image_size as f64 / 100.0;
    let [x1, y1, x2, y2] = [vals[0], vals[1], vals[2], vals[3]].map(|v| v as f64 * s);
    if x1 > x2 || y1 > y2 {
        return Err(bad());
    }
    Ok(BBox::new(x1, y1, x2, y2))
}
