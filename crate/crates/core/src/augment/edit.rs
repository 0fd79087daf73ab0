//! Attribute editing: spatial relocation, recolouring, and the matching
//! expression rewrites.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::poisson::{poisson_blend, Blend, FloatImage, PoissonConfig};
use crate::data::{Cell, Color, PixelBox, RgbImage, SceneAnnotation};
use crate::{Error, Result};

pub const RELOCATION_ATTEMPTS: usize = 50;
pub const MAX_RELOCATION_IOU: f64 = 0.1;

/// Inputs and output of one Poisson solve, kept for auditing.
#[derive(Clone, Debug)]
pub struct BlendTrace {
    pub src: FloatImage<f64>,
    pub dst: FloatImage<f64>,
    pub mask: Vec<bool>,
    pub origin: (usize, usize),
    pub result: Blend<f64>,
}

#[derive(Clone, Debug)]
pub struct Relocation {
    pub image: RgbImage,
    pub scene: SceneAnnotation,
    /// Laplace fill of the vacated footprint.
    pub infill: BlendTrace,
    /// Gradient-domain paste at the new site.
    pub paste: BlendTrace,
}

fn check_index(scene: &SceneAnnotation, idx: usize) -> Result<()> {
    if idx >= scene.objects.len() {
        return Err(Error::arg(format!("object {idx} out of range ({} objects)", scene.objects.len())));
    }
    Ok(())
}

/// Whether `bbox` may host object `idx`: IoU below the limit against every
/// other box, and a one-pixel ring around it free of other boxes so no other
/// object's pixels are touched.
pub fn placement_ok(scene: &SceneAnnotation, idx: usize, bbox: &PixelBox) -> bool {
    if bbox.x2 > scene.image_size || bbox.y2 > scene.image_size {
        return false;
    }
    let ring = bbox.dilate(1);
    scene
        .objects
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != idx)
        .all(|(_, o)| o.bbox.iou(bbox) < MAX_RELOCATION_IOU && o.bbox.intersection(&ring) == 0)
}

/// Moves object `idx` so its box starts at `(x1, y1)`.
pub fn relocate_object_at(
    image: &RgbImage,
    scene: &SceneAnnotation,
    idx: usize,
    (x1, y1): (usize, usize),
    cfg: &PoissonConfig,
) -> Result<Relocation> {
    check_index(scene, idx)?;
    let obj = &scene.objects[idx];
    let (w, h) = (obj.bbox.width(), obj.bbox.height());
    let target = PixelBox::new(x1, y1, x1 + w, y1 + h)?;
    if !placement_ok(scene, idx, &target) {
        return Err(Error::PlacementInfeasible(format!(
            "box ({x1},{y1}) collides with another object or the image edge"
        )));
    }
    let size = scene.image_size;
    let base = FloatImage::<f64>::from_rgb(image);

    let infill_src = FloatImage::filled(w, h, [0.0; 3]);
    let fill = poisson_blend(&infill_src, &base, &obj.mask, (obj.bbox.x1, obj.bbox.y1), cfg)?;
    let infill = BlendTrace {
        src: infill_src,
        dst: base.clone(),
        mask: obj.mask.clone(),
        origin: (obj.bbox.x1, obj.bbox.y1),
        result: fill,
    };

    // Source window: the box plus a one-pixel margin wherever that margin
    // exists around both the old and the new site, so boundary gradients
    // come from the object's original surroundings.
    let left = 1.min(obj.bbox.x1).min(x1);
    let top = 1.min(obj.bbox.y1).min(y1);
    let right = 1.min(size - obj.bbox.x2).min(size - target.x2);
    let bottom = 1.min(size - obj.bbox.y2).min(size - target.y2);
    let (pw, ph) = (w + left + right, h + top + bottom);
    let src = base.crop(obj.bbox.x1 - left, obj.bbox.y1 - top, pw, ph)?;
    let mut mask = vec![false; pw * ph];
    for (i, m) in obj.mask.iter().enumerate() {
        mask[(i / w + top) * pw + i % w + left] = *m;
    }
    let origin = (x1 - left, y1 - top);
    let dst = infill.result.image.clone();
    let result = poisson_blend(&src, &dst, &mask, origin, cfg)?;
    let paste = BlendTrace {
        src,
        dst,
        mask,
        origin,
        result,
    };

    let mut out = scene.clone();
    let (cx, cy) = target.center();
    out.objects[idx].bbox = target;
    out.objects[idx].position = Cell::at(cx, cy, size);
    Ok(Relocation {
        image: paste.result.image.to_rgb(),
        scene: out,
        infill,
        paste,
    })
}

/// Integer top-left positions that keep a `len`-pixel extent inside `[lo, hi)`.
fn span(lo: f64, hi: f64, len: usize) -> Option<(usize, usize)> {
    let a = lo.ceil() as usize;
    let b = (hi - len as f64).floor();
    (b >= a as f64).then_some((a, b as usize))
}

/// Moves object `idx` to a uniformly drawn offset whose box lies inside
/// `cell`, retrying up to [`RELOCATION_ATTEMPTS`] offsets.
pub fn relocate_object<R: Rng>(
    image: &RgbImage,
    scene: &SceneAnnotation,
    idx: usize,
    cell: Cell,
    rng: &mut R,
    cfg: &PoissonConfig,
) -> Result<Relocation> {
    check_index(scene, idx)?;
    let obj = &scene.objects[idx];
    let (x0, x1, y0, y1) = cell.bounds(scene.image_size);
    let xs = span(x0, x1, obj.bbox.width());
    let ys = span(y0, y1, obj.bbox.height());
    if let (Some(xs), Some(ys)) = (xs, ys) {
        for _ in 0..RELOCATION_ATTEMPTS {
            let x = rng.random_range(xs.0..=xs.1);
            let y = rng.random_range(ys.0..=ys.1);
            let bbox = PixelBox::new(x, y, x + obj.bbox.width(), y + obj.bbox.height())?;
            if placement_ok(scene, idx, &bbox) {
                return relocate_object_at(image, scene, idx, (x, y), cfg);
            }
        }
    }
    Err(Error::PlacementInfeasible(format!(
        "no free site for object {idx} in the {} cell after {RELOCATION_ATTEMPTS} offsets",
        cell.phrase()
    )))
}

/// Coordinates `(luminance sum, o1, o2)`: the channel sum and an orthonormal
/// basis of the plane orthogonal to grey.
pub fn opponent(rgb: [f64; 3]) -> (f64, [f64; 2]) {
    let [r, g, b] = rgb;
    (
        r + g + b,
        [(r - g) / std::f64::consts::SQRT_2, (r + g - 2.0 * b) / 6f64.sqrt()],
    )
}

fn from_opponent(sum: i32, o: [f64; 2]) -> [u8; 3] {
    let l = sum as f64;
    let a = o[0] * std::f64::consts::SQRT_2;
    let b = o[1] * 6f64.sqrt();
    let blue = (l - b) / 3.0;
    let rg = l - blue;
    let mut v = [((rg + a) / 2.0).round() as i32, ((rg - a) / 2.0).round() as i32, 0];
    v[2] = sum - v[0] - v[1];
    // Clamp into range, then return any surplus or deficit to the channels
    // with room so the sum is untouched.
    for c in v.iter_mut() {
        *c = (*c).clamp(0, 255);
    }
    let mut diff = sum - v.iter().sum::<i32>();
    while diff != 0 {
        let c = if diff > 0 {
            (0..3).min_by_key(|c| v[*c]).unwrap()
        } else {
            (0..3).max_by_key(|c| v[*c]).unwrap()
        };
        let step = if diff > 0 { diff.min(255 - v[c]) } else { diff.max(-v[c]) };
        v[c] += step;
        diff -= step;
    }
    v.map(|c| c as u8)
}

/// Palette transfer: moves the object's chroma so its mean lands on the
/// palette entry of `new_color`, keeping each pixel's channel sum exactly.
pub fn recolor_object(
    image: &RgbImage,
    scene: &SceneAnnotation,
    idx: usize,
    new_color: &str,
) -> Result<(RgbImage, SceneAnnotation)> {
    check_index(scene, idx)?;
    let color = Color::parse(new_color)?;
    let obj = &scene.objects[idx];
    if obj.color == color {
        return Ok((image.clone(), scene.clone()));
    }
    let pixels: Vec<(usize, usize)> = obj.pixels().collect();
    let chroma = |p: [u8; 3]| opponent(p.map(|v| v as f64)).1;
    let mut mean = [0.0; 2];
    for &(x, y) in &pixels {
        let c = chroma(image.get(x, y));
        mean[0] += c[0];
        mean[1] += c[1];
    }
    let n = pixels.len() as f64;
    let target = chroma(color.rgb());
    let shift = [target[0] - mean[0] / n, target[1] - mean[1] / n];

    let mut out = image.clone();
    for &(x, y) in &pixels {
        let p = image.get(x, y);
        let c = chroma(p);
        let sum = p.iter().map(|v| *v as i32).sum();
        out.set(x, y, from_opponent(sum, [c[0] + shift[0], c[1] + shift[1]]));
    }
    let mut s = scene.clone();
    s.objects[idx].color = color;
    Ok((out, s))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditKind {
    Spatial,
    Color,
}

impl EditKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Spatial => "spatial",
            Self::Color => "color",
        }
    }
}

fn is_word_char(c: Option<char>) -> bool {
    c.is_some_and(|c| c.is_alphanumeric())
}

/// Byte offsets of whole-word occurrences of `term` in `expr`.
fn occurrences(expr: &str, term: &str) -> Vec<usize> {
    expr.match_indices(term)
        .map(|(i, _)| i)
        .filter(|&i| !is_word_char(expr[..i].chars().next_back()) && !is_word_char(expr[i + term.len()..].chars().next()))
        .collect()
}

/// Replaces the single occurrence of `old_term` with `new_term`.
///
/// Spatial terms must be cell phrases and colour terms palette names. A
/// spatial match that is part of a longer cell phrase ("bottom" inside
/// "bottom left") does not count.
pub fn rewrite_expression(expr: &str, edit: EditKind, old_term: &str, new_term: &str) -> Result<String> {
    match edit {
        EditKind::Spatial => {
            Cell::parse(old_term)?;
            Cell::parse(new_term)?;
        }
        EditKind::Color => {
            Color::parse(old_term)?;
            Color::parse(new_term)?;
        }
    }
    let mut hits = occurrences(expr, old_term);
    if edit == EditKind::Spatial {
        let longer: Vec<(usize, usize)> = Cell::ALL
            .iter()
            .map(|c| c.phrase())
            .filter(|p| p.len() > old_term.len() && p.contains(old_term))
            .flat_map(|p| occurrences(expr, p).into_iter().map(move |i| (i, i + p.len())))
            .collect();
        hits.retain(|&i| !longer.iter().any(|&(a, b)| a <= i && i + old_term.len() <= b));
    }
    if hits.len() != 1 {
        return Err(Error::AmbiguousExpression {
            expr: expr.into(),
            term: old_term.into(),
            occurrences: hits.len(),
        });
    }
    let i = hits[0];
    Ok(format!("{}{}{}", &expr[..i], new_term, &expr[i + old_term.len()..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rewrite_examples() {
        let r = rewrite_expression("the green car at the bottom", EditKind::Color, "green", "red").unwrap();
        assert_eq!(r, "the red car at the bottom");
        let r = rewrite_expression("the car at the bottom", EditKind::Spatial, "bottom", "top right").unwrap();
        assert_eq!(r, "the car at the top right");
        let r = rewrite_expression("the red ring at the bottom left", EditKind::Spatial, "bottom left", "center").unwrap();
        assert_eq!(r, "the red ring at the center");
    }

    #[test]
    fn rewrite_errors() {
        let e = rewrite_expression("the car at the top", EditKind::Spatial, "bottom", "top").unwrap_err();
        assert!(matches!(e, Error::AmbiguousExpression { occurrences: 0, .. }));
        let e = rewrite_expression("red left red", EditKind::Color, "red", "blue").unwrap_err();
        assert!(matches!(e, Error::AmbiguousExpression { occurrences: 2, .. }));
        let e = rewrite_expression("the square at the bottom left", EditKind::Spatial, "bottom", "top").unwrap_err();
        assert!(matches!(e, Error::AmbiguousExpression { occurrences: 0, .. }));
        assert!(rewrite_expression("the reddish square", EditKind::Color, "red", "blue").is_err());
        assert!(matches!(
            rewrite_expression("the red car", EditKind::Color, "red", "mauve"),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn opponent_round_trip_keeps_sum() {
        for rgb in [[0u8, 0, 0], [255, 255, 255], [210, 90, 90], [12, 250, 3]] {
            let (l, o) = opponent(rgb.map(|v| v as f64));
            assert_eq!(from_opponent(l as i32, o), rgb);
        }
        // Saturating chroma still keeps the channel sum.
        let p = from_opponent(600, [200.0, -50.0]);
        assert_eq!(p.iter().map(|v| *v as i32).sum::<i32>(), 600);
    }

    #[test]
    fn spans() {
        assert_eq!(span(0.0, 32.0 / 3.0, 4), Some((0, 6)));
        assert_eq!(span(32.0 / 3.0, 64.0 / 3.0, 4), Some((11, 17)));
        assert_eq!(span(0.0, 3.0, 4), None);
    }
}
