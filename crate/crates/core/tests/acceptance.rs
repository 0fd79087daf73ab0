//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-5 and 8 are hard contracts and fail the process. Criteria 6
//! and 7 are empirical training targets: their lines are reported but do
//! not fail the build. `GEOMOE_ACCEPT=1,2,5` restricts the run.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use geomoe::augment::{
    augment_split, count_varying_cutout, recolor_object, relocate_object, AugmentConfig, BlendTrace, CutoutConfig,
    PoissonConfig,
};
use geomoe::data::{
    build_corpus, generate_scene, write_corpus, BBox, Cell, Color, CorpusConfig, RgbImage, SceneAnnotation, SceneSpec,
    Task, Tokenizer,
};
use geomoe::metrics::{bleu4, evaluate, grounding_acc, iou, rouge_l, Evaluation, ROUGE_BETA};
use geomoe::model::{autoregressive_loss, sparsify, AttentionMask, ModelConfig, VisionLanguageModel};
use geomoe::moe::{clone_experts, moe_forward, ExpertFfn, LoadAccumulator, Router};
use geomoe::pipeline::{extend_split, run_pipeline, PipelineConfig};
use geomoe::tensor::Tensor;
use geomoe::training::{
    cosine_lr, encode_checkpoint, fresh_check_model, grad_check, random_batch, train_stage1, train_stage2, Checkpoint,
    Dataset, GradCheckConfig, StepLog, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn quiet(_: &StepLog) {}

fn progress(msg: &str, t0: Instant) {
    eprintln!("[{:>5.0}s] {msg}", t0.elapsed().as_secs_f64());
}

// ---------------------------------------------------------------- 1

fn criterion1() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let e = 4;
    let mut balanced = LoadAccumulator::<f64>::new(e);
    let mut collapsed = LoadAccumulator::<f64>::new(e);
    for t in 0..4 * e {
        let mut row = vec![0.0; e];
        row[t % e] = 1.0;
        balanced.add_probs(&row, e);
        collapsed.add_probs(&[1.0, 0.0, 0.0, 0.0], e);
    }
    let lb = balanced.finish().unwrap().loss();
    let lc = collapsed.finish().unwrap().loss();
    let lb_ok = (lb - 1.0).abs() < 1e-12 && (lc - e as f64).abs() < 1e-12;
    ok &= lb_ok;
    notes.push(format!("load loss balanced {lb} collapsed {lc}"));

    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (d, w) = (64, 256);
    let ffn = ExpertFfn::<f64>::random(d, w, 1.0, &mut rng);
    let router = Router::random(d, e, 0.5, &mut rng).unwrap();
    let ensemble = clone_experts(&ffn, e).unwrap();
    let x = Tensor::from_fn(&[100, d], |_| rng.random_range(-1.0..1.0));
    let (y, decision) = moe_forward(&x, &router, &ensemble, 2).unwrap();
    let dense = ffn.forward(&x).unwrap();
    let mut clone_err = 0.0f64;
    for r in 0..100 {
        let s: f64 = decision.topk_w[r].iter().sum();
        for c in 0..d {
            clone_err = clone_err.max((y.row(r)[c] - s * dense.row(r)[c]).abs());
        }
    }
    ok &= clone_err < 1e-9;
    notes.push(format!("clone identity {clone_err:.1e}"));

    let cfg = ModelConfig::default();
    let m = VisionLanguageModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let single = sparsify(&m, 1, 1, cfg.moe_period, 0.01, &mut rng).unwrap();
    let img = Tensor::from_fn(&[cfg.image_size, cfg.image_size, 3], |_| rng.random_range(0.0..1.0));
    let toks: Vec<usize> = (0..12).map(|_| rng.random_range(4..cfg.vocab)).collect();
    let (a, _) = m.forward(&img, &toks).unwrap();
    let (b, _) = single.forward(&img, &toks).unwrap();
    let e1 = a.max_abs_diff(&b);
    ok &= e1 < 1e-9;
    notes.push(format!("E=1 logits {e1:.1e}"));

    let (hi, lo) = (3e-4, 3e-5);
    let s0 = cosine_lr(0, 1000, hi, lo).unwrap();
    let s1 = cosine_lr(1000, 1000, hi, lo).unwrap();
    let sm = cosine_lr(500, 1000, hi, lo).unwrap();
    let sched_ok = (s0 - hi).abs() < 1e-18 && (s1 - lo).abs() < 1e-18 && (sm - (hi + lo) / 2.0).abs() < 1e-18;
    ok &= sched_ok;
    notes.push(format!("cosine ends/mid {}", if sched_ok { "exact" } else { "off" }));
    outcome(ok, notes.join("; "))
}

// ---------------------------------------------------------------- 2

fn criterion2() -> Outcome {
    let cfg = ModelConfig {
        hidden: 32,
        layers: 2,
        heads: 2,
        vocab: 64,
        experts: 4,
        top_k: 2,
        image_size: 16,
        patch_size: 4,
        channels: 16,
        ffn_width: 64,
        lora_rank: 4,
        max_text_len: 16,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let model = fresh_check_model(&cfg, &mut rng).unwrap();
    let check = GradCheckConfig::default();
    let rep = grad_check(&model, |r| random_batch(&cfg, 2, 10, 4, r), &check, &mut rng).unwrap();
    let mut ok = rep.max_rel_error() < 1e-5;
    let mut notes = Vec::new();
    for g in ["router", "experts", "lora", "embedding"] {
        match rep.group(g) {
            Some(gr) => {
                ok &= gr.coords >= 20;
                notes.push(format!("{g} {:.1e}/{}", gr.max_rel_error, gr.coords));
            }
            None => {
                ok = false;
                notes.push(format!("{g} missing"));
            }
        }
    }
    notes.push(format!("tie margin {:.1e}", rep.tie_margin));
    outcome(ok, notes.join("; "))
}

// ---------------------------------------------------------------- 3

fn criterion3() -> Outcome {
    let corpus = build_corpus(&CorpusConfig {
        seed: 303,
        train_per_task: 4,
        test_per_task: 1,
        ..CorpusConfig::default()
    })
    .unwrap();
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let m = VisionLanguageModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let data = Dataset::<f64>::from_split(&corpus.train, &Tokenizer::standard(), &cfg).unwrap();
    let mut ok = true;
    let mut worst_perm = 0.0f64;
    let mut min_flip = f64::INFINITY;
    for i in 0..data.len() {
        let seq = data.sequence(i).unwrap();
        let (logits, _) = m.forward_sequence(&seq).unwrap();
        let base = autoregressive_loss(&logits, &seq.labels, &seq.loss_mask).unwrap();
        let mut labels = seq.labels.clone();
        for (t, l) in labels.iter_mut().enumerate() {
            if !seq.loss_mask[t] {
                *l = (*l + 1 + rng.random_range(0..cfg.vocab - 1)) % cfg.vocab;
            }
        }
        let permuted = autoregressive_loss(&logits, &labels, &seq.loss_mask).unwrap();
        worst_perm = worst_perm.max((permuted - base).abs());
        ok &= permuted == base;
        let supervised: Vec<usize> = (0..seq.labels.len()).filter(|t| seq.loss_mask[*t]).collect();
        let t = supervised[rng.random_range(0..supervised.len())];
        let mut flipped = seq.labels.clone();
        flipped[t] = (flipped[t] + 1) % cfg.vocab;
        let changed = autoregressive_loss(&logits, &flipped, &seq.loss_mask).unwrap();
        min_flip = min_flip.min((changed - base).abs());
        ok &= changed != base;
    }
    outcome(
        ok,
        format!("{} sequences; unsupervised relabel delta {worst_perm:e}; min supervised flip delta {min_flip:.2e}", data.len()),
    )
}

// ---------------------------------------------------------------- 4

fn visible(original: &SceneAnnotation, image: &RgbImage, ids: &[usize]) -> usize {
    ids.iter()
        .filter(|i| original.objects[**i].pixels().any(|(x, y)| image.get(x, y) != [0, 0, 0]))
        .count()
}

fn blend_residual(t: &BlendTrace) -> f64 {
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

fn blend_boundary_exact(t: &BlendTrace) -> bool {
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

fn criterion4() -> Outcome {
    let spec = SceneSpec::default();
    let cutout = CutoutConfig::default();
    let poisson = PoissonConfig::default();
    let (mut sets, mut sets_ok, mut pairwise_ok) = (0, 0, 0);
    let (mut moves, mut moves_ok, mut worst_residual) = (0, 0, 0.0f64);
    let (mut recolors, mut recolors_ok) = (0, 0);
    for seed in 0..500u64 {
        let (img, scene) = generate_scene(&spec, "s", seed, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (&class, &n) = scene.class_counts().iter().max_by_key(|(_, n)| **n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        if let Ok(vs) = count_varying_cutout(&img, &scene, class, &cutout, &mut rng) {
            sets += 1;
            let gap = (0.1 * n as f64).ceil() as usize;
            let ids: Vec<usize> = (0..scene.objects.len()).filter(|i| scene.objects[*i].class == class).collect();
            let mut good = vs.len() == 4;
            for v in &vs {
                let m = (v.ratio * n as f64).ceil() as usize;
                good &= (0.15..=0.30).contains(&v.ratio)
                    && v.new_count == n - m
                    && v.removed_ids.len() == m
                    && visible(&scene, &v.image, &ids) == v.new_count
                    && v.scene.count(class) == v.new_count;
                let removed: BTreeSet<(usize, usize)> =
                    v.removed_ids.iter().flat_map(|i| scene.objects[*i].pixels()).collect();
                good &= removed.iter().all(|&(x, y)| v.image.get(x, y) == [0, 0, 0]);
            }
            sets_ok += good as usize;
            let counts: Vec<usize> = vs.iter().map(|v| v.new_count).collect();
            let pairwise = (0..counts.len()).all(|i| (i + 1..counts.len()).all(|j| counts[i].abs_diff(counts[j]) >= gap));
            pairwise_ok += pairwise as usize;
        }

        let idx = seed as usize % scene.objects.len();
        let cell = Cell::ALL[(seed as usize / 3) % 9];
        if let Ok(r) = relocate_object(&img, &scene, idx, cell, &mut rng, &poisson) {
            moves += 1;
            let moved = &r.scene.objects[idx];
            let max_iou = r
                .scene
                .objects
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != idx)
                .map(|(_, o)| o.bbox.iou(&moved.bbox))
                .fold(0.0, f64::max);
            let res = blend_residual(&r.infill).max(blend_residual(&r.paste));
            worst_residual = worst_residual.max(res);
            let good = max_iou < 0.1 && blend_boundary_exact(&r.infill) && blend_boundary_exact(&r.paste) && res < 1e-4;
            moves_ok += good as usize;
        }

        let to = Color::ALL[(seed as usize + 1) % Color::ALL.len()];
        if let Ok((out, _)) = recolor_object(&img, &scene, idx, to.name()) {
            recolors += 1;
            let lum = |p: [u8; 3]| p.iter().map(|v| *v as u32).sum::<u32>();
            let same = (0..32).all(|y| (0..32).all(|x| lum(img.get(x, y)) == lum(out.get(x, y))));
            recolors_ok += same as usize;
        }
    }
    let main = sets > 0 && sets_ok == sets && moves > 0 && moves_ok == moves && recolors > 0 && recolors_ok == recolors;
    outcome(
        main,
        format!(
            "cutout sets {sets_ok}/{sets}; relocations {moves_ok}/{moves} (residual {worst_residual:.1e}); \
             recolours {recolors_ok}/{recolors}; pairwise-gap sub-check {pairwise_ok}/{sets} [{}]",
            if sets > 0 && pairwise_ok == sets { "PASS" } else { "FAIL" }
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion5(evals: &[(String, Evaluation)]) -> Outcome {
    let toks = |s: &'static str| s.split(' ').collect::<Vec<_>>();
    let b = bleu4(&toks("a b c d"), &[toks("a b c d e")]).unwrap();
    let b_ok = (b - (-0.25f64).exp()).abs() < 1e-6;
    let r = rouge_l(&toks("a b c"), &toks("a c"), ROUGE_BETA);
    let (p, rc, b2) = (2.0 / 3.0, 1.0, ROUGE_BETA * ROUGE_BETA);
    let r_ok = (r - (1.0 + b2) * p * rc / (rc + b2 * p)).abs() < 1e-6;
    let a = BBox::new(0.0, 0.0, 10.0, 10.0);
    let c = BBox::new(5.0, 5.0, 15.0, 15.0);
    let i_ok = (iou(&a, &c) - 25.0 / 175.0).abs() < 1e-6;
    let preds = [Some(a), Some(c), Some(BBox::new(1.0, 1.0, 9.0, 9.0)), None];
    let gts = [a; 4];
    let g_ok = (grounding_acc(&preds, &gts, 0.5).unwrap() - 0.5).abs() < 1e-6
        && (grounding_acc(&preds, &gts, 0.7).unwrap() - 0.25).abs() < 1e-6;
    let mut mono_bad = Vec::new();
    for (name, e) in evals {
        if let (Some(lo), Some(hi)) = (e.get(Task::VG, "acc@0.7"), e.get(Task::VG, "acc@0.5")) {
            if lo > hi {
                mono_bad.push(name.clone());
            }
        }
    }
    outcome(
        b_ok && r_ok && i_ok && g_ok && mono_bad.is_empty(),
        format!(
            "bleu4 {b:.6}, rouge_l {r:.6}, iou {:.6}, grounding oracle {}; @0.7 <= @0.5 on {}/{} evaluations",
            iou(&a, &c),
            if g_ok { "ok" } else { "off" },
            evals.len() - mono_bad.len(),
            evals.len()
        ),
    )
}

// ---------------------------------------------------------------- 6

fn desk_config(seed: u64) -> PipelineConfig {
    let stage1 = TrainConfig {
        stage: 1,
        epochs: 8,
        batch_size: 32,
        lr_max: 1e-3,
        lr_min: 1e-4,
        warm_start: 0.5,
        ..TrainConfig::default()
    };
    PipelineConfig {
        corpus: CorpusConfig {
            train_per_task: 2000,
            ..CorpusConfig::default()
        },
        augment: None,
        model: ModelConfig {
            patch_size: 8,
            ..ModelConfig::default()
        },
        stage2: TrainConfig {
            stage: 2,
            epochs: 4,
            ..stage1.clone()
        },
        stage1,
        eval_stage1: false,
        eval_limit: None,
    }
    .seeded(seed)
}

fn criterion6(evals: &mut Vec<(String, Evaluation)>, t0: Instant) -> Outcome {
    let cfg = desk_config(6);
    let start = Instant::now();
    let mut last_epoch = (0, usize::MAX);
    let mut finite = true;
    let mut on_step = |s: &StepLog| {
        finite &= s.total.is_finite() && s.grad_norm.is_finite();
        if (s.stage, s.epoch) != last_epoch {
            last_epoch = (s.stage, s.epoch);
            progress(&format!("criterion 6: stage {} epoch {} loss {:.4}", s.stage, s.epoch, s.regressive), t0);
        }
    };
    let run = match run_pipeline(&cfg, &mut on_step) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("pipeline error: {e}")),
    };
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let e = run.eval;
    let oc = e.get(Task::OC, "acc").unwrap_or(0.0);
    let sc = e.get(Task::SC, "acc").unwrap_or(0.0);
    let vg = e.get(Task::VG, "acc@0.5").unwrap_or(0.0);
    let pass = finite && oc >= 0.9 && sc >= 0.9 && vg >= 0.5;
    let detail = format!(
        "OC {:.1}% SC {:.1}% VG@0.5 {:.1}% (targets 90/90/50); finite losses {finite}; {minutes:.1} min",
        100.0 * oc,
        100.0 * sc,
        100.0 * vg
    );
    evals.push(("desk".into(), e));
    outcome(pass, detail)
}

// ---------------------------------------------------------------- 7

fn ablation_config(seed: u64) -> PipelineConfig {
    let stage1 = TrainConfig {
        stage: 1,
        epochs: 6,
        batch_size: 16,
        lr_max: 1e-3,
        lr_min: 1e-4,
        warm_start: 0.5,
        ..TrainConfig::default()
    };
    PipelineConfig {
        corpus: CorpusConfig {
            train_per_task: 300,
            test_per_task: 40,
            ..CorpusConfig::default()
        },
        augment: Some(AugmentConfig::default()),
        model: ModelConfig {
            patch_size: 8,
            ..ModelConfig::default()
        },
        stage2: TrainConfig {
            stage: 2,
            epochs: 2,
            ..stage1.clone()
        },
        stage1,
        eval_stage1: false,
        eval_limit: None,
    }
    .seeded(seed)
}

/// Stage-1 model shared by every expert count, then one stage-2 run per
/// count. Returns the aggregate score per entry of `experts`.
fn ablation_arm(
    cfg: &PipelineConfig,
    augment: bool,
    experts: &[usize],
    evals: &mut Vec<(String, Evaluation)>,
) -> geomoe::Result<Vec<f64>> {
    let tok = Tokenizer::standard();
    let corpus = build_corpus(&cfg.corpus)?;
    let mut train = corpus.train.clone();
    if augment {
        let (extra, _) = augment_split(&corpus.train, cfg.augment.as_ref().expect("augment config"))?;
        extend_split(&mut train, extra);
    }
    let data = Dataset::<f64>::from_split(&train, &tok, &cfg.model)?;
    let model = VisionLanguageModel::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.stage1.seed))?;
    let stage1 = train_stage1(model, &data, &cfg.stage1, &mut quiet)?;
    let mut scores = Vec::new();
    for &e in experts {
        let mut base = stage1.model.clone();
        base.config.experts = e;
        base.config.top_k = e.min(2);
        let st = train_stage2(base, &data, &cfg.stage2, &mut quiet)?;
        let ev = evaluate(&st.model, &corpus.test, &tok, &Task::ALL, cfg.eval_limit)?;
        scores.push(ev.mean_score());
        evals.push((format!("seed {} E={e} augment={augment}", cfg.corpus.seed), ev));
    }
    Ok(scores)
}

fn criterion7(evals: &mut Vec<(String, Evaluation)>, t0: Instant) -> Outcome {
    let experts = [1, 4, 8];
    let full_e = ModelConfig::default().experts;
    let mut by_e = [0.0; 3];
    let (mut full, mut without) = (0.0, 0.0);
    let seeds = [71u64, 72, 73];
    for &seed in &seeds {
        let cfg = ablation_config(seed);
        let with = match ablation_arm(&cfg, true, &experts, evals) {
            Ok(s) => s,
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        };
        let plain = match ablation_arm(&cfg, false, &[full_e], evals) {
            Ok(s) => s,
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        };
        progress(&format!("criterion 7: seed {seed} E-sweep {with:.3?} no-augment {plain:.3?}"), t0);
        for (a, s) in by_e.iter_mut().zip(&with) {
            *a += s / seeds.len() as f64;
        }
        full += with[experts.iter().position(|e| *e == full_e).unwrap()] / seeds.len() as f64;
        without += plain[0] / seeds.len() as f64;
    }
    let trend = by_e[0] <= by_e[1] && by_e[1] <= by_e[2];
    let modules = without <= full;
    let mut detail = String::new();
    for (e, s) in experts.iter().zip(&by_e) {
        let _ = write!(detail, "E={e} {:.2}; ", 100.0 * s);
    }
    let _ = write!(
        detail,
        "non-decreasing {trend}; augmentation off {:.2} vs on {:.2} (E={full_e}) ordered {modules}",
        100.0 * without,
        100.0 * full
    );
    outcome(trend && modules, detail)
}

// ---------------------------------------------------------------- 8

fn tiny_pipeline(seed: u64) -> PipelineConfig {
    let stage1 = TrainConfig {
        stage: 1,
        epochs: 1,
        batch_size: 8,
        lr_max: 1e-3,
        lr_min: 1e-4,
        ..TrainConfig::default()
    };
    PipelineConfig {
        corpus: CorpusConfig {
            train_per_task: 24,
            test_per_task: 4,
            ..CorpusConfig::default()
        },
        augment: Some(AugmentConfig {
            cutout_rate: 1.0,
            edit_rate: 1.0,
            ..AugmentConfig::default()
        }),
        model: ModelConfig {
            hidden: 16,
            layers: 2,
            heads: 2,
            patch_size: 8,
            channels: 16,
            ffn_width: 32,
            lora_rank: 4,
            attention: AttentionMask::Causal,
            ..ModelConfig::default()
        },
        stage2: TrainConfig { stage: 2, ..stage1.clone() },
        stage1,
        eval_stage1: true,
        eval_limit: None,
    }
    .seeded(seed)
}

fn write_run(cfg: &PipelineConfig, dir: &Path, evals: &mut Vec<(String, Evaluation)>) -> geomoe::Result<()> {
    let mut run = run_pipeline(cfg, &mut quiet)?;
    write_corpus(&dir.join("corpus"), &run.corpus)?;
    std::fs::write(dir.join("stage1.ckpt"), encode_checkpoint(&Checkpoint::from_state(&run.stage1))?).unwrap();
    std::fs::write(dir.join("stage2.ckpt"), encode_checkpoint(&Checkpoint::from_state(&run.stage2))?).unwrap();
    std::fs::write(dir.join("augment.json"), serde_json::to_vec(&run.augment).unwrap()).unwrap();
    run.eval.write(&dir.join("eval"))?;
    if let Some(e) = run.stage1_eval.take() {
        evals.push(("determinism stage 1".into(), e));
    }
    evals.push(("determinism".into(), run.eval));
    Ok(())
}

fn files(dir: &Path, out: &mut Vec<std::path::PathBuf>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            files(&p, out);
        } else {
            out.push(p);
        }
    }
}

fn criterion8(evals: &mut Vec<(String, Evaluation)>) -> Outcome {
    let cfg = tiny_pipeline(8);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        if let Err(e) = write_run(&cfg, d.path(), evals) {
            return outcome(false, format!("pipeline error: {e}"));
        }
    }
    let mut fa = Vec::new();
    files(a.path(), &mut fa);
    fa.sort();
    let mut differ = Vec::new();
    for p in &fa {
        let rel = p.strip_prefix(a.path()).unwrap();
        let other = std::fs::read(b.path().join(rel)).ok();
        if other.as_deref() != Some(std::fs::read(p).unwrap().as_slice()) {
            differ.push(rel.display().to_string());
        }
    }
    let mut fb = Vec::new();
    files(b.path(), &mut fb);
    let same_set = fa.len() == fb.len();
    outcome(
        differ.is_empty() && same_set,
        format!("{} files compared (corpus, checkpoints, metric reports); {} differ", fa.len(), differ.len()),
    )
}

// ---------------------------------------------------------------- driver

fn selected() -> BTreeSet<u32> {
    match std::env::var("GEOMOE_ACCEPT") {
        Ok(s) if !s.trim().is_empty() => s.split(',').filter_map(|p| p.trim().parse().ok()).collect(),
        _ => (1..=8).collect(),
    }
}

const TITLES: [&str; 8] = [
    "analytic identities",
    "gradient fidelity",
    "loss masking",
    "augmentation suite",
    "metric oracles",
    "desk training",
    "expert/augmentation ablation trend",
    "determinism",
];

/// Empirical targets are reported without failing the run.
const EMPIRICAL: [u32; 2] = [6, 7];

fn main() {
    let only = selected();
    let t0 = Instant::now();
    let mut evals: Vec<(String, Evaluation)> = Vec::new();
    let mut results: Vec<(u32, Outcome, f64)> = Vec::new();
    // Criterion 5 runs last so its monotonicity check sees every evaluation.
    for c in [1u32, 2, 3, 4, 6, 7, 8, 5] {
        if !only.contains(&c) {
            continue;
        }
        progress(&format!("criterion {c}: {}", TITLES[c as usize - 1]), t0);
        let start = Instant::now();
        let out = match c {
            1 => criterion1(),
            2 => criterion2(),
            3 => criterion3(),
            4 => criterion4(),
            5 => criterion5(&evals),
            6 => criterion6(&mut evals, t0),
            7 => criterion7(&mut evals, t0),
            _ => criterion8(&mut evals),
        };
        results.push((c, out, start.elapsed().as_secs_f64()));
    }
    results.sort_by_key(|r| r.0);
    let mut hard_failures = 0;
    for (c, out, secs) in &results {
        let tag = if out.pass { "PASS" } else { "FAIL" };
        let kind = if EMPIRICAL.contains(c) { " (empirical target)" } else { "" };
        println!("criterion {c} {}{kind}: {tag} [{secs:.1}s] {}", TITLES[*c as usize - 1], out.detail);
        if !out.pass && !EMPIRICAL.contains(c) {
            hard_failures += 1;
        }
    }
    if hard_failures > 0 {
        std::process::exit(1);
    }
}
