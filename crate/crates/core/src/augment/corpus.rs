//! Corpus-level augmentation with per-scene seeds and provenance.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::cutout::{count_varying_cutout, CutoutConfig};
use super::edit::{recolor_object, relocate_object, rewrite_expression, EditKind};
use super::poisson::PoissonConfig;
use crate::data::{counting_record, grounding_record, Cell, Color, Provenance, Sample, SplitData};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub seed: u64,
    pub cutout: bool,
    /// Spatial attribute edits (object relocation).
    pub relocate: bool,
    /// Colour attribute edits.
    pub recolor: bool,
    /// Share of eligible scenes that receive a cutout set.
    pub cutout_rate: f64,
    /// Share of scenes that receive a spatial and a colour edit.
    pub edit_rate: f64,
    pub cutout_cfg: CutoutConfig,
    #[serde(skip)]
    pub poisson: PoissonConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cutout: true,
            relocate: true,
            recolor: true,
            cutout_rate: 0.25,
            edit_rate: 0.25,
            cutout_cfg: CutoutConfig::default(),
            poisson: PoissonConfig::default(),
        }
    }
}

/// Tallies of what was produced and why scenes were passed over.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub cutout_sets: usize,
    pub too_sparse: usize,
    pub unsatisfiable: usize,
    pub relocations: usize,
    pub relocation_infeasible: usize,
    pub recolors: usize,
    pub ambiguous: usize,
}

/// Seed for the edits of one source scene.
pub fn edit_seed(cfg_seed: u64, scene_seed: u64) -> u64 {
    scene_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ cfg_seed.rotate_left(29)
}

fn provenance(source: &str, edit: &str, seed: u64, params: serde_json::Value) -> Option<Provenance> {
    Some(Provenance {
        source_id: source.into(),
        edit_type: edit.into(),
        seed,
        params,
    })
}

/// Augments every scene of `data`; returns only the new samples and records.
pub fn augment_split(data: &SplitData, cfg: &AugmentConfig) -> Result<(SplitData, AugmentReport)> {
    let mut out = SplitData::default();
    let mut report = AugmentReport::default();
    for sample in &data.samples {
        let seed = edit_seed(cfg.seed, sample.scene.seed);
        if cfg.cutout {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            cutout_scene(sample, cfg, seed, &mut rng, &mut out, &mut report)?;
        }
        if cfg.relocate || cfg.recolor {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2);
            edit_scene(sample, cfg, seed, &mut rng, &mut out, &mut report)?;
        }
    }
    Ok((out, report))
}

fn cutout_scene(
    sample: &Sample,
    cfg: &AugmentConfig,
    seed: u64,
    rng: &mut ChaCha8Rng,
    out: &mut SplitData,
    report: &mut AugmentReport,
) -> Result<()> {
    if !rng.random_bool(cfg.cutout_rate) {
        return Ok(());
    }
    let scene = &sample.scene;
    let Some((&class, _)) = scene.class_counts().iter().rev().max_by_key(|(_, n)| **n) else {
        return Ok(());
    };
    let variants = match count_varying_cutout(&sample.image, scene, class, &cfg.cutout_cfg, rng) {
        Ok(v) => v,
        Err(Error::SceneTooSparse { .. }) => {
            report.too_sparse += 1;
            return Ok(());
        }
        Err(Error::ConstraintUnsatisfiable(_)) => {
            report.unsatisfiable += 1;
            return Ok(());
        }
        Err(e) => return Err(e),
    };
    report.cutout_sets += 1;
    for (k, v) in variants.into_iter().enumerate() {
        let mut s = v.scene;
        s.id = format!("{}-cvc{k}", scene.id);
        let mut r = counting_record(&s, class);
        r.provenance = provenance(
            &scene.id,
            "cutout",
            seed,
            json!({
                "class": class.name(),
                "ratio": v.ratio,
                "original_count": v.original_count,
                "new_count": v.new_count,
                "removed_ids": v.removed_ids,
                "rule": cfg.cutout_cfg.rule.name(),
            }),
        );
        out.records.push(r);
        out.samples.push(Sample { image: v.image, scene: s });
    }
    Ok(())
}

fn push_grounding(
    out: &mut SplitData,
    sample: Sample,
    idx: usize,
    expr: &str,
    prov: Option<Provenance>,
    report: &mut AugmentReport,
) -> Result<bool> {
    let Ok(mut r) = grounding_record(&sample.scene, idx) else {
        report.ambiguous += 1;
        return Ok(false);
    };
    if sample.scene.objects[idx].expression() != expr {
        return Err(Error::arg(format!("rewritten expression `{expr}` disagrees with the edited annotation")));
    }
    r.provenance = prov;
    out.records.push(r);
    out.samples.push(sample);
    Ok(true)
}

fn edit_scene(
    sample: &Sample,
    cfg: &AugmentConfig,
    seed: u64,
    rng: &mut ChaCha8Rng,
    out: &mut SplitData,
    report: &mut AugmentReport,
) -> Result<()> {
    if !rng.random_bool(cfg.edit_rate) {
        return Ok(());
    }
    let scene = &sample.scene;
    let Some(&idx) = scene.unique_referents().choose(rng) else {
        return Ok(());
    };
    let obj = &scene.objects[idx];
    let expr = obj.expression();

    let mut cells: Vec<Cell> = Cell::ALL.into_iter().filter(|c| *c != obj.position).collect();
    cells.shuffle(rng);
    let mut moved = None;
    for cell in cells.into_iter().filter(|_| cfg.relocate) {
        match relocate_object(&sample.image, scene, idx, cell, rng, &cfg.poisson) {
            Ok(r) => {
                moved = Some((cell, r));
                break;
            }
            Err(Error::PlacementInfeasible(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    match moved {
        Some((cell, r)) => {
            let new_expr = rewrite_expression(&expr, EditKind::Spatial, obj.position.phrase(), cell.phrase())?;
            let mut s = r.scene;
            s.id = format!("{}-loc", scene.id);
            let b = s.objects[idx].bbox;
            let prov = provenance(
                &scene.id,
                "relocate",
                seed,
                json!({
                    "object": idx,
                    "from": obj.position.phrase(),
                    "to": cell.phrase(),
                    "bbox": [b.x1, b.y1, b.x2, b.y2],
                    "sweeps": r.paste.result.sweeps,
                }),
            );
            if push_grounding(out, Sample { image: r.image, scene: s }, idx, &new_expr, prov, report)? {
                report.relocations += 1;
            }
        }
        None if cfg.relocate => report.relocation_infeasible += 1,
        None => {}
    }
    if !cfg.recolor {
        return Ok(());
    }

    let colors: Vec<Color> = Color::ALL.into_iter().filter(|c| *c != obj.color).collect();
    let color = *colors.choose(rng).expect("palette has several colours");
    let (image, mut s) = recolor_object(&sample.image, scene, idx, color.name())?;
    let new_expr = rewrite_expression(&expr, EditKind::Color, obj.color.name(), color.name())?;
    s.id = format!("{}-rec", scene.id);
    let prov = provenance(
        &scene.id,
        "recolor",
        seed,
        json!({ "object": idx, "from": obj.color.name(), "to": color.name() }),
    );
    if push_grounding(out, Sample { image, scene: s }, idx, &new_expr, prov, report)? {
        report.recolors += 1;
    }
    Ok(())
}
