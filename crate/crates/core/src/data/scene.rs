use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::RgbImage;
use crate::error::{Error, Result};

/// Countable object shapes. All share one square footprint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Square,
    Circle,
    Triangle,
    Ring,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 4] = [Self::Square, Self::Circle, Self::Triangle, Self::Ring];

    pub fn name(self) -> &'static str {
        match self {
            Self::Square => "square",
            Self::Circle => "circle",
            Self::Triangle => "triangle",
            Self::Ring => "ring",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Self::Square => "squares",
            Self::Circle => "circles",
            Self::Triangle => "triangles",
            Self::Ring => "rings",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown object class `{s}`")))
    }

    /// Footprint of an `s×s` instance, row-major.
    pub fn mask(self, s: usize) -> Vec<bool> {
        let mut m = vec![false; s * s];
        let si = s as i64;
        for i in 0..s {
            for j in 0..s {
                let (ii, jj) = (i as i64, j as i64);
                m[i * s + j] = match self {
                    Self::Square => true,
                    Self::Circle => {
                        let (a, b) = (2 * ii + 1 - si, 2 * jj + 1 - si);
                        a * a + b * b <= si * si - 2 * si + 2
                    }
                    Self::Triangle => j <= i,
                    Self::Ring => i == 0 || j == 0 || i == s - 1 || j == s - 1,
                };
            }
        }
        m
    }
}

/// Palette entries; every entry has channel sum 390, so swapping colours
/// never changes luminance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Cyan,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Self::Red,
        Self::Green,
        Self::Blue,
        Self::Yellow,
        Self::Purple,
        Self::Cyan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::Yellow => "yellow",
            Self::Purple => "purple",
            Self::Cyan => "cyan",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Self::Red => [210, 90, 90],
            Self::Green => [90, 210, 90],
            Self::Blue => [90, 90, 210],
            Self::Yellow => [180, 180, 30],
            Self::Purple => [170, 50, 170],
            Self::Cyan => [40, 170, 180],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown color `{s}`")))
    }
}

/// Scene types, each with its own background texture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Farmland,
    Forest,
    Desert,
    Lake,
    Residential,
    Industrial,
    Beach,
    Meadow,
}

impl Background {
    pub const ALL: [Background; 8] = [
        Self::Farmland,
        Self::Forest,
        Self::Desert,
        Self::Lake,
        Self::Residential,
        Self::Industrial,
        Self::Beach,
        Self::Meadow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Farmland => "farmland",
            Self::Forest => "forest",
            Self::Desert => "desert",
            Self::Lake => "lake",
            Self::Residential => "residential",
            Self::Industrial => "industrial",
            Self::Beach => "beach",
            Self::Meadow => "meadow",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown background `{s}`")))
    }

    /// Noise-free texture value at pixel `(x, y)` of a `size`-pixel image.
    pub fn texture(self, x: usize, y: usize, size: usize) -> [i32; 3] {
        let (xf, yf) = (x as f64, y as f64);
        match self {
            Self::Farmland => {
                if (y / 4) % 2 == 0 {
                    [120, 150, 60]
                } else {
                    [150, 120, 60]
                }
            }
            Self::Forest => [30, 90, 40],
            Self::Desert => {
                let d = if ((x + y) / 3) % 2 == 0 { 12 } else { -12 };
                [200 + d, 170 + d, 110 + d]
            }
            Self::Lake => {
                let w = (15.0 * (xf * 0.8 + yf * 0.3).sin()).round() as i32;
                [40 + w / 2, 80 + w, 160 + w]
            }
            Self::Residential => {
                if x % 8 == 0 || y % 8 == 0 {
                    [110, 110, 120]
                } else {
                    [150, 150, 150]
                }
            }
            Self::Industrial => {
                if ((x / 4) + (y / 4)) % 2 == 0 {
                    [90, 90, 100]
                } else {
                    [130, 125, 120]
                }
            }
            Self::Beach => {
                let edge = size as f64 / 2.0 + 3.0 * (yf / 4.0).sin();
                if xf < edge {
                    [210, 190, 140]
                } else {
                    [60, 110, 180]
                }
            }
            Self::Meadow => {
                if (x * 7 + y * 13) % 11 == 0 {
                    [200, 200, 120]
                } else {
                    [110, 180, 90]
                }
            }
        }
    }

    /// Per-pixel noise amplitude on top of the texture.
    fn noise(self) -> i32 {
        match self {
            Self::Forest => 15,
            _ => 6,
        }
    }
}

/// One of the nine cells of the 3×3 grid over the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Cell {
    #[serde(rename = "top left")]
    TopLeft,
    #[serde(rename = "top")]
    Top,
    #[serde(rename = "top right")]
    TopRight,
    #[serde(rename = "left")]
    Left,
    #[serde(rename = "center")]
    Center,
    #[serde(rename = "right")]
    Right,
    #[serde(rename = "bottom left")]
    BottomLeft,
    #[serde(rename = "bottom")]
    Bottom,
    #[serde(rename = "bottom right")]
    BottomRight,
}

impl Cell {
    pub const ALL: [Cell; 9] = [
        Self::TopLeft,
        Self::Top,
        Self::TopRight,
        Self::Left,
        Self::Center,
        Self::Right,
        Self::BottomLeft,
        Self::Bottom,
        Self::BottomRight,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Self::TopLeft => "top left",
            Self::Top => "top",
            Self::TopRight => "top right",
            Self::Left => "left",
            Self::Center => "center",
            Self::Right => "right",
            Self::BottomLeft => "bottom left",
            Self::Bottom => "bottom",
            Self::BottomRight => "bottom right",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.phrase() == s)
            .ok_or_else(|| Error::arg(format!("unknown cell `{s}`")))
    }

    pub fn row(self) -> usize {
        self as usize / 3
    }

    pub fn col(self) -> usize {
        self as usize % 3
    }

    pub fn from_row_col(row: usize, col: usize) -> Self {
        Self::ALL[row.min(2) * 3 + col.min(2)]
    }

    /// Cell containing the point `(x, y)` of a `size`-pixel image; each cell
    /// is an equal third of the width and height.
    pub fn at(x: f64, y: f64, size: usize) -> Self {
        let third = |v: f64| ((3.0 * v / size as f64).floor().max(0.0) as usize).min(2);
        Self::from_row_col(third(y), third(x))
    }

    /// Pixel extent `[x0, x1) × [y0, y1)` of this cell, as reals.
    pub fn bounds(self, size: usize) -> (f64, f64, f64, f64) {
        let s = size as f64 / 3.0;
        let (c, r) = (self.col() as f64, self.row() as f64);
        (c * s, (c + 1.0) * s, r * s, (r + 1.0) * s)
    }
}

/// Half-open integer pixel box `[x1, x2) × [y1, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl PixelBox {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Result<Self> {
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::arg(format!("degenerate box ({x1},{y1},{x2},{y2})")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> usize {
        self.x2 - self.x1
    }

    pub fn height(&self) -> usize {
        self.y2 - self.y1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) as f64 / 2.0, (self.y1 + self.y2) as f64 / 2.0)
    }

    pub fn intersection(&self, o: &Self) -> usize {
        let w = self.x2.min(o.x2).saturating_sub(self.x1.max(o.x1));
        let h = self.y2.min(o.y2).saturating_sub(self.y1.max(o.y1));
        w * h
    }

    pub fn iou(&self, o: &Self) -> f64 {
        let i = self.intersection(o);
        let u = self.area() + o.area() - i;
        if u == 0 {
            0.0
        } else {
            i as f64 / u as f64
        }
    }

    /// Grown by `r` pixels on every side, clipped at zero.
    pub fn dilate(&self, r: usize) -> Self {
        Self {
            x1: self.x1.saturating_sub(r),
            y1: self.y1.saturating_sub(r),
            x2: self.x2 + r,
            y2: self.y2 + r,
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }
}

mod mask_bits {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &[bool], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&m.iter().map(|b| if *b { '1' } else { '0' }).collect::<String>())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let s = String::deserialize(d)?;
        s.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(serde::de::Error::custom("mask must be a 0/1 string")),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub class: ObjectClass,
    pub bbox: PixelBox,
    /// Row-major footprint over `bbox`.
    #[serde(with = "mask_bits")]
    pub mask: Vec<bool>,
    pub color: Color,
    pub position: Cell,
}

impl ObjectInstance {
    /// Absolute pixel coordinates covered by the mask.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.bbox.width();
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(move |(i, _)| (self.bbox.x1 + i % w, self.bbox.y1 + i / w))
    }

    pub fn covers(&self, x: usize, y: usize) -> bool {
        self.bbox.contains(x, y) && self.mask[(y - self.bbox.y1) * self.bbox.width() + (x - self.bbox.x1)]
    }

    pub fn expression(&self) -> String {
        format!("the {} {} at the {}", self.color.name(), self.class.name(), self.position.phrase())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub id: String,
    pub seed: u64,
    pub background: Background,
    pub image_size: usize,
    pub objects: Vec<ObjectInstance>,
}

impl SceneAnnotation {
    pub fn class_counts(&self) -> BTreeMap<ObjectClass, usize> {
        let mut m = BTreeMap::new();
        for o in &self.objects {
            *m.entry(o.class).or_insert(0) += 1;
        }
        m
    }

    pub fn count(&self, class: ObjectClass) -> usize {
        self.objects.iter().filter(|o| o.class == class).count()
    }

    /// Indices of objects whose (colour, class, cell) triple is unique.
    pub fn unique_referents(&self) -> Vec<usize> {
        (0..self.objects.len())
            .filter(|i| {
                let a = &self.objects[*i];
                self.objects
                    .iter()
                    .filter(|b| b.class == a.class && b.color == a.color && b.position == a.position)
                    .count()
                    == 1
            })
            .collect()
    }
}

/// Scene generator configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Side of every object footprint.
    pub object_size: usize,
    /// Objects sit on a lattice of `slot_pitch`-pixel slots, centred in each.
    pub slot_pitch: usize,
    pub backgrounds: Vec<Background>,
    pub classes: Vec<ObjectClass>,
    pub palette: Vec<Color>,
    /// Count range of one randomly chosen dominant class.
    pub dominant: (usize, usize),
    /// Count range of every other class.
    pub other: (usize, usize),
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            object_size: 4,
            slot_pitch: 8,
            backgrounds: Background::ALL.to_vec(),
            classes: ObjectClass::ALL.to_vec(),
            palette: Color::ALL.to_vec(),
            dominant: (1, 10),
            other: (0, 2),
        }
    }
}

impl SceneSpec {
    pub fn slots_per_side(&self) -> usize {
        self.image_size / self.slot_pitch
    }

    pub fn validate(&self) -> Result<()> {
        if self.backgrounds.is_empty() || self.classes.is_empty() || self.palette.is_empty() {
            return Err(Error::Config("scene spec needs backgrounds, classes and palette".into()));
        }
        if self.object_size == 0 || self.slot_pitch < self.object_size + 2 {
            return Err(Error::Config("slot pitch must leave a 2-pixel gap between objects".into()));
        }
        if self.slots_per_side() == 0 {
            return Err(Error::Config("image smaller than one slot".into()));
        }
        if self.dominant.0 > self.dominant.1 || self.other.0 > self.other.1 {
            return Err(Error::Config("count range min exceeds max".into()));
        }
        Ok(())
    }
}

fn clamp_u8(v: i32) -> u8 {
    v.clamp(0, 255) as u8
}

/// Renders a background texture with per-pixel noise; every channel stays in
/// `[12, 245]`, so exact zeros only ever come from cutout.
pub fn render_background<R: Rng>(bg: Background, size: usize, rng: &mut R) -> RgbImage {
    let mut img = RgbImage::new(size, size);
    let amp = bg.noise();
    for y in 0..size {
        for x in 0..size {
            let t = bg.texture(x, y, size);
            let n = rng.random_range(-amp..=amp);
            img.set(x, y, [0, 1, 2].map(|c| (t[c] + n).clamp(12, 245) as u8));
        }
    }
    img
}

/// Draws an object's mask in its colour with a luminance-only texture.
pub fn render_object<R: Rng>(img: &mut RgbImage, obj: &ObjectInstance, rng: &mut R) {
    let base = obj.color.rgb();
    let pixels: Vec<_> = obj.pixels().collect();
    for (x, y) in pixels {
        let n = rng.random_range(-8..=8);
        img.set(x, y, base.map(|c| clamp_u8(c as i32 + n)));
    }
}

/// Draws a scene. Objects occupy distinct lattice slots, so bounding boxes
/// never overlap.
pub fn generate_scene<R: Rng>(spec: &SceneSpec, id: &str, seed: u64, rng: &mut R) -> Result<(RgbImage, SceneAnnotation)> {
    spec.validate()?;
    let background = *spec.backgrounds.choose(rng).expect("non-empty");
    let dominant = rng.random_range(0..spec.classes.len());
    let mut wanted = Vec::new();
    for (i, class) in spec.classes.iter().enumerate() {
        let (lo, hi) = if i == dominant { spec.dominant } else { spec.other };
        let n = rng.random_range(lo..=hi);
        wanted.extend(std::iter::repeat_n(*class, n));
    }
    wanted.shuffle(rng);

    let g = spec.slots_per_side();
    let margin = (spec.slot_pitch - spec.object_size) / 2;
    let mut used = vec![false; g * g];
    let mut objects = Vec::with_capacity(wanted.len());
    for class in wanted {
        let mut placed = false;
        for _ in 0..200 {
            let slot = rng.random_range(0..g * g);
            if used[slot] {
                continue;
            }
            used[slot] = true;
            let (x1, y1) = ((slot % g) * spec.slot_pitch + margin, (slot / g) * spec.slot_pitch + margin);
            let bbox = PixelBox::new(x1, y1, x1 + spec.object_size, y1 + spec.object_size)?;
            let (cx, cy) = bbox.center();
            objects.push(ObjectInstance {
                class,
                bbox,
                mask: class.mask(spec.object_size),
                color: *spec.palette.choose(rng).expect("non-empty"),
                position: Cell::at(cx, cy, spec.image_size),
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::PlacementInfeasible(format!(
                "no free slot for object {} after 200 attempts",
                objects.len() + 1
            )));
        }
    }

    let mut image = render_background(background, spec.image_size, rng);
    for o in &objects {
        render_object(&mut image, o, rng);
    }
    Ok((
        image,
        SceneAnnotation {
            id: id.to_string(),
            seed,
            background,
            image_size: spec.image_size,
            objects,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masks() {
        let count = |c: ObjectClass| c.mask(4).iter().filter(|b| **b).count();
        assert_eq!(count(ObjectClass::Square), 16);
        assert_eq!(count(ObjectClass::Circle), 12);
        assert_eq!(count(ObjectClass::Triangle), 10);
        assert_eq!(count(ObjectClass::Ring), 12);
        assert!(!ObjectClass::Circle.mask(4)[0]);
        assert!(!ObjectClass::Ring.mask(4)[5]);
    }

    #[test]
    fn palette_has_equal_luminance() {
        for c in Color::ALL {
            assert_eq!(c.rgb().iter().map(|v| *v as u32).sum::<u32>(), 390);
        }
    }

    #[test]
    fn cells() {
        assert_eq!(Cell::at(4.0, 4.0, 32), Cell::TopLeft);
        assert_eq!(Cell::at(12.0, 28.0, 32), Cell::Bottom);
        assert_eq!(Cell::at(31.9, 16.0, 32), Cell::Right);
        assert_eq!(Cell::parse("bottom right").unwrap(), Cell::BottomRight);
        for c in Cell::ALL {
            assert_eq!(Cell::from_row_col(c.row(), c.col()), c);
        }
    }

    #[test]
    fn generation_is_deterministic_and_consistent() {
        let spec = SceneSpec::default();
        let a = generate_scene(&spec, "a", 7, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = generate_scene(&spec, "a", 7, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        let (img, ann) = a;
        for (i, o) in ann.objects.iter().enumerate() {
            for p in &ann.objects[i + 1..] {
                assert_eq!(o.bbox.iou(&p.bbox), 0.0);
            }
            assert_eq!(Cell::at(o.bbox.center().0, o.bbox.center().1, 32), o.position);
            for (x, y) in o.pixels() {
                assert_ne!(img.get(x, y), [0, 0, 0]);
            }
        }
    }

    #[test]
    fn requested_counts_are_rendered() {
        let spec = SceneSpec {
            classes: vec![ObjectClass::Square],
            dominant: (5, 5),
            ..SceneSpec::default()
        };
        let (img, ann) = generate_scene(&spec, "s", 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(ann.count(ObjectClass::Square), 5);
        let palette: Vec<[u8; 3]> = Color::ALL.iter().map(|c| c.rgb()).collect();
        // each mask pixel is a palette colour shifted equally in all channels
        for o in &ann.objects {
            for (x, y) in o.pixels() {
                let p = img.get(x, y);
                let base = o.color.rgb();
                let d = p[0] as i32 - base[0] as i32;
                assert!(palette.contains(&base));
                assert_eq!(p[1] as i32 - base[1] as i32, d);
                assert_eq!(p[2] as i32 - base[2] as i32, d);
            }
        }
    }

    #[test]
    fn overfull_scene_is_infeasible() {
        let spec = SceneSpec {
            classes: vec![ObjectClass::Square],
            dominant: (17, 17),
            ..SceneSpec::default()
        };
        let r = generate_scene(&spec, "s", 1, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(r, Err(Error::PlacementInfeasible(_))));
    }
}
