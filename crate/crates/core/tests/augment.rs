use std::collections::BTreeSet;

use geomoe::augment::{
    augment_split, count_varying_cutout, opponent, recolor_object, relocate_object, relocate_object_at,
    AugmentConfig, BlendTrace, CutoutConfig, GapRule, PoissonConfig,
};
use geomoe::data::{
    build_corpus, generate_scene, render_object, Background, Cell, Color, CorpusConfig, ObjectClass, ObjectInstance,
    PixelBox, RgbImage, SceneAnnotation, SceneSpec, Task,
};
use geomoe::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// All legal removal counts for `n`: `⌈r·n⌉` over `r ∈ [0.15, 0.30]`.
fn legal_m(n: usize) -> Vec<usize> {
    let lo = (0.15 * n as f64).ceil() as usize;
    let hi = (0.30 * n as f64).ceil() as usize;
    (lo..=hi).collect()
}

/// Enumerates every 4-tuple of legal removal counts.
fn tuples(n: usize) -> Vec<[usize; 4]> {
    let ms = legal_m(n);
    let mut out = Vec::new();
    for a in &ms {
        for b in &ms {
            for c in &ms {
                for d in &ms {
                    out.push([*a, *b, *c, *d]);
                }
            }
        }
    }
    out
}

fn pairwise_ok(t: &[usize; 4], gap: usize) -> bool {
    (0..4).all(|i| (i + 1..4).all(|j| t[i].abs_diff(t[j]) >= gap))
}

fn dense_scene(n: usize, seed: u64) -> (RgbImage, SceneAnnotation) {
    let spec = SceneSpec {
        image_size: 64,
        classes: vec![ObjectClass::Square],
        dominant: (n, n),
        ..SceneSpec::default()
    };
    generate_scene(&spec, "dense", seed, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn pairwise_gap_is_infeasible_for_every_count() {
    for n in 1..=200 {
        let gap = (0.1 * n as f64).ceil() as usize;
        assert!(!tuples(n).iter().any(|t| pairwise_ok(t, gap)), "n = {n}");
    }
    let (img, scene) = dense_scene(40, 1);
    let cfg = CutoutConfig {
        rule: GapRule::Pairwise,
        ..CutoutConfig::default()
    };
    let r = count_varying_cutout(&img, &scene, ObjectClass::Square, &cfg, &mut ChaCha8Rng::seed_from_u64(2));
    assert!(matches!(r, Err(Error::ConstraintUnsatisfiable(_))));
}

#[test]
fn forty_square_scene_matches_tuple_oracle() {
    assert_eq!(legal_m(40), (6..=12).collect::<Vec<_>>());
    let (img, scene) = dense_scene(40, 3);
    let oracle: BTreeSet<[usize; 4]> = tuples(40).into_iter().filter(|t| t.iter().all(|m| *m >= 4)).collect();
    for seed in 0..20 {
        let vs = count_varying_cutout(&img, &scene, ObjectClass::Square, &CutoutConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let ms = [0, 1, 2, 3].map(|i| 40 - vs[i].new_count);
        assert!(oracle.contains(&ms), "{ms:?}");
        for v in &vs {
            assert_eq!(v.scene.count(ObjectClass::Square), v.new_count);
        }
    }
}

#[test]
fn sparse_scenes_are_rejected() {
    let (img, scene) = dense_scene(6, 4);
    let r = count_varying_cutout(&img, &scene, ObjectClass::Square, &CutoutConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(r, Err(Error::SceneTooSparse { count: 6, min: 7, .. })));
}

/// Counts objects of `class` in `original` with at least one non-black pixel
/// left in `image`.
fn visible(original: &SceneAnnotation, image: &RgbImage, class: ObjectClass) -> usize {
    original
        .objects
        .iter()
        .filter(|o| o.class == class && o.pixels().any(|(x, y)| image.get(x, y) != [0, 0, 0]))
        .count()
}

fn check_cutout_set(img: &RgbImage, scene: &SceneAnnotation, class: ObjectClass, seed: u64) -> Option<()> {
    let n = scene.count(class);
    let vs = count_varying_cutout(img, scene, class, &CutoutConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).ok()?;
    assert_eq!(vs.len(), 4);
    let gap = (0.1 * n as f64).ceil() as usize;
    for v in &vs {
        assert!((0.15..=0.30).contains(&v.ratio));
        let m = (v.ratio * n as f64).ceil() as usize;
        assert_eq!(v.new_count, n - m);
        assert_eq!(v.removed_ids.len(), m);
        assert!(n - v.new_count >= gap);
        assert_eq!(visible(scene, &v.image, class), v.new_count);
        let zero: BTreeSet<(usize, usize)> = (0..img.height)
            .flat_map(|y| (0..img.width).map(move |x| (x, y)))
            .filter(|&(x, y)| v.image.get(x, y) == [0, 0, 0])
            .collect();
        let removed: BTreeSet<(usize, usize)> = v.removed_ids.iter().flat_map(|i| scene.objects[*i].pixels()).collect();
        assert_eq!(zero, removed);
    }
    Some(())
}

#[test]
fn cutout_sets_over_generated_scenes() {
    let spec = SceneSpec::default();
    let mut emitted = 0;
    for seed in 0..300u64 {
        let (img, scene) = generate_scene(&spec, "s", seed, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (&class, _) = scene.class_counts().iter().max_by_key(|(_, n)| **n).unwrap();
        emitted += check_cutout_set(&img, &scene, class, seed).is_some() as usize;
    }
    assert!(emitted > 50, "{emitted}");
}

/// Largest `|Σ_q (f_p − f_q) − Σ_q (s_p − s_q)|` over the solved pixels,
/// recomputed from the trace.
fn residual(t: &BlendTrace) -> f64 {
    let (w, h) = (t.src.width, t.src.height);
    let f = &t.result.image;
    let mut worst = 0.0f64;
    for sy in 0..h {
        for sx in 0..w {
            if !t.mask[sy * w + sx] {
                continue;
            }
            let (x, y) = ((t.origin.0 + sx) as isize, (t.origin.1 + sy) as isize);
            for c in 0..3 {
                let mut r = 0.0;
                for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= f.width as isize || ny >= f.height as isize {
                        continue;
                    }
                    r += f.get(x as usize, y as usize, c) - f.get(nx as usize, ny as usize, c);
                    let (qx, qy) = (sx as isize + dx, sy as isize + dy);
                    if qx >= 0 && qy >= 0 && qx < w as isize && qy < h as isize {
                        r -= t.src.get(sx, sy, c) - t.src.get(qx as usize, qy as usize, c);
                    }
                }
                worst = worst.max(r.abs());
            }
        }
    }
    worst
}

/// Whether every pixel off the solved set equals the destination exactly.
fn boundary_exact(t: &BlendTrace) -> bool {
    let w = t.src.width;
    let inside = |x: usize, y: usize| {
        x >= t.origin.0
            && y >= t.origin.1
            && x < t.origin.0 + w
            && y < t.origin.1 + t.src.height
            && t.mask[(y - t.origin.1) * w + x - t.origin.0]
    };
    (0..t.dst.height).all(|y| {
        (0..t.dst.width).all(|x| inside(x, y) || (0..3).all(|c| t.result.image.get(x, y, c) == t.dst.get(x, y, c)))
    })
}

#[test]
fn relocations_over_generated_scenes() {
    let spec = SceneSpec::default();
    let cfg = PoissonConfig::default();
    let mut done = 0;
    for seed in 0..200u64 {
        let (img, scene) = generate_scene(&spec, "s", seed, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        if scene.objects.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let idx = seed as usize % scene.objects.len();
        let cell = Cell::ALL[seed as usize % 9];
        let r = match relocate_object(&img, &scene, idx, cell, &mut rng, &cfg) {
            Ok(r) => r,
            Err(Error::PlacementInfeasible(_)) => continue,
            Err(e) => panic!("{e}"),
        };
        done += 1;
        let moved = &r.scene.objects[idx];
        assert_eq!(moved.position, cell);
        let (cx, cy) = moved.bbox.center();
        assert_eq!(Cell::at(cx, cy, 32), moved.position);
        for (i, o) in r.scene.objects.iter().enumerate() {
            if i != idx {
                assert!(o.bbox.iou(&moved.bbox) < 0.1);
                assert_eq!(o, &scene.objects[i]);
                for (x, y) in o.pixels() {
                    assert_eq!(r.image.get(x, y), img.get(x, y));
                }
            }
        }
        for t in [&r.infill, &r.paste] {
            assert!(boundary_exact(t));
            assert!(residual(t) < 1e-4, "{}", residual(t));
        }
        // Nothing outside the old and new footprints changes.
        for y in 0..32 {
            for x in 0..32 {
                if !scene.objects[idx].covers(x, y) && !moved.covers(x, y) {
                    assert_eq!(r.image.get(x, y), img.get(x, y));
                }
            }
        }
    }
    assert!(done > 100, "{done}");
}

fn lone_object(class: ObjectClass, bg: [u8; 3]) -> (RgbImage, SceneAnnotation) {
    let mut img = RgbImage::filled(32, 32, bg);
    let bbox = PixelBox::new(2, 2, 6, 6).unwrap();
    let obj = ObjectInstance {
        class,
        bbox,
        mask: class.mask(4),
        color: Color::Red,
        position: Cell::TopLeft,
    };
    render_object(&mut img, &obj, &mut ChaCha8Rng::seed_from_u64(5));
    let scene = SceneAnnotation {
        id: "lone".into(),
        seed: 0,
        background: Background::Desert,
        image_size: 32,
        objects: vec![obj],
    };
    (img, scene)
}

#[test]
fn relocation_on_constant_background_reproduces_the_object() {
    for class in ObjectClass::ALL {
        let (img, scene) = lone_object(class, [120, 110, 100]);
        let r = relocate_object_at(&img, &scene, 0, (20, 23), &PoissonConfig::default()).unwrap();
        assert_eq!(r.scene.objects[0].position, Cell::BottomRight);
        let mut worst = 0i32;
        for dy in 0..4 {
            for dx in 0..4 {
                let a = img.get(2 + dx, 2 + dy);
                let b = r.image.get(20 + dx, 23 + dy);
                for c in 0..3 {
                    worst = worst.max((a[c] as i32 - b[c] as i32).abs());
                }
                // Vacated site returns to the background.
                assert_eq!(r.image.get(2 + dx, 2 + dy), [120, 110, 100]);
            }
        }
        assert!(worst < 2, "{class:?} {worst}");
    }
}

#[test]
fn noop_relocation_keeps_image_and_annotation() {
    let spec = SceneSpec::default();
    for seed in 0..20u64 {
        let (img, scene) = generate_scene(&spec, "s", seed, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = scene.objects[0].bbox;
        let r = relocate_object_at(&img, &scene, 0, (b.x1, b.y1), &PoissonConfig::default()).unwrap();
        assert_eq!(r.scene, scene);
        assert_eq!(r.image, img);
    }
}

#[test]
fn relocation_into_a_full_cell_is_infeasible() {
    let (img, mut scene) = lone_object(ObjectClass::Square, [50, 60, 70]);
    // A blocker covering the whole centre cell.
    scene.objects.push(ObjectInstance {
        class: ObjectClass::Square,
        bbox: PixelBox::new(10, 10, 22, 22).unwrap(),
        mask: vec![true; 144],
        color: Color::Blue,
        position: Cell::Center,
    });
    let r = relocate_object(&img, &scene, 0, Cell::Center, &mut ChaCha8Rng::seed_from_u64(0), &PoissonConfig::default());
    assert!(matches!(r, Err(Error::PlacementInfeasible(_))));
}

fn chroma(p: [u8; 3]) -> [f64; 2] {
    let [r, g, b] = p.map(|v| v as f64);
    [(r - g) / 2f64.sqrt(), (r + g - 2.0 * b) / 6f64.sqrt()]
}

#[test]
fn recolor_preserves_luminance_and_hits_the_palette() {
    let spec = SceneSpec::default();
    for seed in 0..100u64 {
        let (img, scene) = generate_scene(&spec, "s", seed, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let idx = seed as usize % scene.objects.len();
        let obj = &scene.objects[idx];
        let to = Color::ALL[(seed as usize) % 6];
        let (out, s) = recolor_object(&img, &scene, idx, to.name()).unwrap();
        assert_eq!(s.objects[idx].color, to);
        if to == obj.color {
            assert_eq!(out, img);
            continue;
        }
        let mut mean = [0.0; 2];
        let mut n = 0.0;
        for y in 0..32 {
            for x in 0..32 {
                let (a, b) = (img.get(x, y), out.get(x, y));
                let sum = |p: [u8; 3]| p.iter().map(|v| *v as u32).sum::<u32>();
                assert_eq!(sum(a), sum(b));
                if obj.covers(x, y) {
                    let c = chroma(b);
                    mean[0] += c[0];
                    mean[1] += c[1];
                    n += 1.0;
                } else {
                    assert_eq!(a, b);
                }
            }
        }
        let t = chroma(to.rgb());
        let d = ((mean[0] / n - t[0]).powi(2) + (mean[1] / n - t[1]).powi(2)).sqrt();
        assert!(d < 10.0, "{d}");
    }
    let (img, scene) = lone_object(ObjectClass::Ring, [1, 2, 3]);
    assert!(matches!(recolor_object(&img, &scene, 0, "mauve"), Err(Error::Argument(_))));
    assert_eq!(opponent([1.0, 2.0, 3.0]).0, 6.0);
}

#[test]
fn corpus_augmentation_is_consistent_and_deterministic() {
    let corpus = build_corpus(&CorpusConfig {
        seed: 11,
        train_per_task: 80,
        test_per_task: 1,
        ..CorpusConfig::default()
    })
    .unwrap();
    let cfg = AugmentConfig {
        cutout_rate: 1.0,
        edit_rate: 1.0,
        ..AugmentConfig::default()
    };
    let (a, report) = augment_split(&corpus.train, &cfg).unwrap();
    let (b, _) = augment_split(&corpus.train, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(report.cutout_sets > 0 && report.relocations > 0 && report.recolors > 0, "{report:?}");
    assert_eq!(a.samples.len(), a.records.len());
    let idx = a.image_index();
    for r in &a.records {
        let p = r.provenance.as_ref().expect("provenance");
        assert!(corpus.train.samples.iter().any(|s| s.scene.id == p.source_id));
        let s = &a.samples[idx[r.image_id.as_str()]].scene;
        match p.edit_type.as_str() {
            "cutout" => {
                assert_eq!(r.task, Task::OC);
                assert_eq!(r.target, p.params["new_count"].to_string());
            }
            "relocate" | "recolor" => {
                assert_eq!(r.task, Task::VG);
                let o = &s.objects[p.params["object"].as_u64().unwrap() as usize];
                assert_eq!(r.bbox, Some(o.bbox));
                assert!(r.instruction.contains(&o.expression()));
            }
            other => panic!("{other}"),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cutout_invariants_hold_for_dense_scenes(n in 7usize..=40, seed in 0u64..1000) {
        let (img, scene) = dense_scene(n, seed);
        prop_assert!(check_cutout_set(&img, &scene, ObjectClass::Square, seed).is_some());
    }
}
