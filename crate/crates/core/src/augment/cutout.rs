//! Count-varying cutout: several copies of a scene with a random share of
//! one class zero-filled away.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ObjectClass, RgbImage, SceneAnnotation};
use crate::{Error, Result};

/// Which count differences a variant set must respect.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GapRule {
    /// Every pair of variants differs in count by at least the gap.
    Pairwise,
    /// Every variant differs from the original count by at least the gap.
    FromOriginal,
}

impl GapRule {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pairwise => "pairwise",
            Self::FromOriginal => "from-original",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pairwise" => Ok(Self::Pairwise),
            "from-original" => Ok(Self::FromOriginal),
            _ => Err(Error::arg(format!("unknown gap rule `{s}`"))),
        }
    }

    /// Whether removal counts `ms` out of `n` satisfy the rule.
    pub fn admits(self, ms: &[usize], n: usize, gap_fraction: f64) -> bool {
        let gap = required_gap(n, gap_fraction);
        match self {
            Self::Pairwise => ms
                .iter()
                .enumerate()
                .all(|(i, a)| ms[i + 1..].iter().all(|b| a.abs_diff(*b) >= gap)),
            Self::FromOriginal => ms.iter().all(|m| *m >= gap),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoutConfig {
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub variants: usize,
    pub gap_fraction: f64,
    pub min_count: usize,
    pub max_rounds: usize,
    pub rule: GapRule,
}

impl Default for CutoutConfig {
    fn default() -> Self {
        Self {
            ratio_min: 0.15,
            ratio_max: 0.30,
            variants: 4,
            gap_fraction: 0.1,
            min_count: 7,
            max_rounds: 100,
            rule: GapRule::FromOriginal,
        }
    }
}

/// `m = ⌈r·n⌉`.
pub fn removal_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64).ceil() as usize
}

/// `⌈fraction·n⌉`.
pub fn required_gap(n: usize, fraction: f64) -> usize {
    (fraction * n as f64).ceil() as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutoutVariant {
    pub image: RgbImage,
    /// The source annotation without the removed objects.
    pub scene: SceneAnnotation,
    /// Indices into the source scene's objects, ascending.
    pub removed_ids: Vec<usize>,
    pub ratio: f64,
    pub original_count: usize,
    pub new_count: usize,
}

/// Produces `cfg.variants` cutouts of `class` from one scene. Each variant
/// draws its own ratio; whole sets are redrawn until they satisfy the gap
/// rule.
pub fn count_varying_cutout<R: Rng>(
    image: &RgbImage,
    scene: &SceneAnnotation,
    class: ObjectClass,
    cfg: &CutoutConfig,
    rng: &mut R,
) -> Result<Vec<CutoutVariant>> {
    if !(0.0 < cfg.ratio_min && cfg.ratio_min <= cfg.ratio_max && cfg.ratio_max <= 1.0) {
        return Err(Error::arg(format!("cutout ratio range [{}, {}]", cfg.ratio_min, cfg.ratio_max)));
    }
    let members: Vec<usize> = (0..scene.objects.len())
        .filter(|i| scene.objects[*i].class == class)
        .collect();
    let n = members.len();
    if n < cfg.min_count {
        return Err(Error::SceneTooSparse {
            class: class.name().into(),
            count: n,
            min: cfg.min_count,
        });
    }

    let draw = |rng: &mut R| rng.random_range(cfg.ratio_min..=cfg.ratio_max);
    let mut ratios = None;
    for _ in 0..cfg.max_rounds {
        let rs: Vec<f64> = (0..cfg.variants).map(|_| draw(rng)).collect();
        let ms: Vec<usize> = rs.iter().map(|r| removal_count(*r, n)).collect();
        if cfg.rule.admits(&ms, n, cfg.gap_fraction) {
            ratios = Some(rs);
            break;
        }
    }
    let Some(ratios) = ratios else {
        return Err(Error::ConstraintUnsatisfiable(format!(
            "{} variants of {n} {} with {} gap {} not found in {} rounds",
            cfg.variants,
            class.plural(),
            cfg.rule.name(),
            required_gap(n, cfg.gap_fraction),
            cfg.max_rounds
        )));
    };

    let mut out = Vec::with_capacity(ratios.len());
    for ratio in ratios {
        let m = removal_count(ratio, n);
        let mut removed: Vec<usize> = sample(rng, n, m).into_iter().map(|k| members[k]).collect();
        removed.sort_unstable();
        let mut img = image.clone();
        for &i in &removed {
            for (x, y) in scene.objects[i].pixels() {
                img.set(x, y, [0, 0, 0]);
            }
        }
        let mut s = scene.clone();
        s.objects = scene
            .objects
            .iter()
            .enumerate()
            .filter(|(i, _)| removed.binary_search(i).is_err())
            .map(|(_, o)| o.clone())
            .collect();
        out.push(CutoutVariant {
            image: img,
            scene: s,
            removed_ids: removed,
            ratio,
            original_count: n,
            new_count: n - m,
        });
    }
    Ok(out)
}
