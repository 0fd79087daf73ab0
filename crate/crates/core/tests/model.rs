use geomoe::model::{
    autoregressive_loss, batch_loss, batch_loss_and_grads, sparsify, total_loss, AttentionMask,
    FeedForward, ModelConfig, Sequence, VisionLanguageModel,
};
use geomoe::tensor::Tensor;
use geomoe::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        layers: 2,
        heads: 2,
        vocab: 20,
        experts: 4,
        top_k: 2,
        moe_period: 2,
        patch_size: 4,
        image_size: 8,
        channels: 8,
        ffn_width: 24,
        lora_rank: 4,
        max_text_len: 12,
        ..ModelConfig::default()
    }
}

fn image(rng: &mut ChaCha8Rng, s: usize) -> Tensor<f64> {
    Tensor::from_fn(&[s, s, 3], |_| rng.random_range(0.0..1.0))
}

fn model(seed: u64) -> (VisionLanguageModel<f64>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = VisionLanguageModel::new(tiny(), &mut rng).unwrap();
    (m, rng)
}

#[test]
fn logits_shape_follows_config() {
    let (m, mut rng) = model(1);
    let img = image(&mut rng, 8);
    let (logits, routes) = m.forward(&img, &[1, 4, 5, 6, 2]).unwrap();
    assert_eq!(logits.shape(), &[4 + 5, 20]);
    assert!(routes.is_empty());
}

#[test]
fn input_validation() {
    let (m, mut rng) = model(2);
    let img = image(&mut rng, 8);
    assert!(matches!(m.forward(&image(&mut rng, 12), &[1]), Err(Error::Shape(_))));
    assert!(m.forward(&img, &[1; 13]).is_err());
    assert!(m.forward(&img, &[25]).is_err());
    assert_eq!(m.encode_patches(&img).unwrap().shape(), &[4, 8]);
}

#[test]
fn causality_probe() {
    for attention in [AttentionMask::Causal, AttentionMask::PrefixBidirectional] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ModelConfig { attention, ..tiny() };
        let m = sparsify(&VisionLanguageModel::new(cfg, &mut rng).unwrap(), 4, 2, 2, 0.5, &mut rng).unwrap();
        let img = image(&mut rng, 8);
        let toks = vec![1, 5, 6, 7, 8, 9];
        let (base, _) = m.forward(&img, &toks).unwrap();
        let p = 4;
        for t in 0..toks.len() {
            let mut alt = toks.clone();
            alt[t] = 10 + t;
            let (pert, _) = m.forward(&img, &alt).unwrap();
            for row in 0..p + toks.len() {
                let diff = base.row(row).iter().zip(pert.row(row)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                if row < p + t {
                    assert_eq!(diff, 0.0, "row {row} moved after perturbing token {t}");
                } else if row == p + t {
                    assert!(diff > 0.0);
                }
            }
        }
        // Visual rows: under the prefix mask, a change to the last patch
        // reaches the first visual row; under the causal mask it cannot.
        let mut img2 = img.clone();
        let n = img2.numel();
        img2.data_mut()[n - 1] += 0.5;
        let (pert, _) = m.forward(&img2, &toks).unwrap();
        let moved = base.row(0) != pert.row(0);
        assert_eq!(moved, attention == AttentionMask::PrefixBidirectional);
    }
}

#[test]
fn single_expert_sparse_matches_dense() {
    let (m, mut rng) = model(4);
    let s = sparsify(&m, 1, 1, 2, 0.01, &mut rng).unwrap();
    assert_eq!(s.moe_layers(), vec![1]);
    let img = image(&mut rng, 8);
    let toks = [1, 3, 4, 5, 2];
    let (a, _) = m.forward(&img, &toks).unwrap();
    let (b, r) = s.forward(&img, &toks).unwrap();
    assert_eq!(r.len(), 1);
    assert!(a.max_abs_diff(&b) < 1e-9);
}

#[test]
fn sparsify_clones_every_ffn_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = ModelConfig { layers: 4, ..tiny() };
    let m = VisionLanguageModel::<f64>::new(cfg, &mut rng).unwrap();
    let s = sparsify(&m, 4, 2, 2, 0.01, &mut rng).unwrap();
    assert_eq!(s.moe_layers(), vec![1, 3]);
    for (i, (db, sb)) in m.blocks.iter().zip(&s.blocks).enumerate() {
        assert_eq!(db.attn, sb.attn);
        match (&db.ffn, &sb.ffn) {
            (FeedForward::Dense(f), FeedForward::Sparse(layer)) => {
                assert!(i % 2 == 1);
                assert_eq!(layer.ensemble.len(), 4);
                assert!(layer.ensemble.experts().iter().all(|e| e == f));
            }
            (FeedForward::Dense(a), FeedForward::Dense(b)) => assert_eq!(a, b),
            _ => panic!("unexpected layer kinds at {i}"),
        }
    }
    assert!(sparsify(&m, 4, 2, 0, 0.01, &mut rng).is_err());
}

#[test]
fn loss_masking_contract() {
    let (m, mut rng) = model(6);
    let img = image(&mut rng, 8);
    let seq = Sequence::new(img, vec![1, 5, 6, 3, 7, 8, 2], 4, 4).unwrap();
    let (logits, _) = m.forward_sequence(&seq).unwrap();
    let base = autoregressive_loss(&logits, &seq.labels, &seq.loss_mask).unwrap();
    let mut labels = seq.labels.clone();
    for (t, l) in labels.iter_mut().enumerate() {
        if !seq.loss_mask[t] {
            *l = (*l + 7 + t) % 20;
        }
    }
    let perm = autoregressive_loss(&logits, &labels, &seq.loss_mask).unwrap();
    assert_eq!(base.to_bits(), perm.to_bits());
    let t = seq.loss_mask.iter().position(|b| *b).unwrap();
    let mut flipped = seq.labels.clone();
    flipped[t] = (flipped[t] + 1) % 20;
    let f = autoregressive_loss(&logits, &flipped, &seq.loss_mask).unwrap();
    assert!((f - base).abs() > 0.0);

    let none = vec![false; seq.len()];
    assert!(matches!(
        autoregressive_loss(&logits, &seq.labels, &none),
        Err(Error::NoSupervisedPositions)
    ));
}

#[test]
fn loss_examples() {
    let uniform = Tensor::<f64>::zeros(&[5, 20]);
    let l = autoregressive_loss(&uniform, &[0, 3, 4, 19, 1], &[false, true, true, false, true]).unwrap();
    assert!((l - 20f64.ln()).abs() < 1e-12);
    // Single supervised position with logits [1, 2, 0.5], target 2.
    let logits = Tensor::from_rows(&[vec![9.0, -3.0, 4.0], vec![1.0, 2.0, 0.5]]).unwrap();
    let l = autoregressive_loss(&logits, &[0, 2], &[false, true]).unwrap();
    let oracle = -(0.5f64.exp() / (1f64.exp() + 2f64.exp() + 0.5f64.exp())).ln();
    assert!((l - oracle).abs() < 1e-12);

    assert_eq!(total_loss(2.0, &[1.0, 1.2], 0.0), 2.0);
    assert_eq!(total_loss(2.0, &[], 0.01), 2.0);
    assert!((total_loss(2.0f64, &[1.0, 1.2], 0.01) - 2.011).abs() < 1e-15);
}

#[test]
fn lora_identity_freeze_and_gradient_flow() {
    let (m, mut rng) = model(7);
    let img = image(&mut rng, 8);
    let toks = [1, 5, 6, 3, 7, 2];
    let mut wrapped = m.clone();
    wrapped.wrap_lora(4, 1.0, &mut rng).unwrap();
    let (a, _) = m.forward(&img, &toks).unwrap();
    let (b, _) = wrapped.forward(&img, &toks).unwrap();
    assert_eq!(a, b);

    let mut ok = m.clone();
    assert!(ok.wrap_lora(15, 1.0, &mut rng).is_ok());
    let mut bad = m.clone();
    assert!(matches!(bad.wrap_lora(16, 1.0, &mut rng), Err(Error::Argument(_))));

    let seq = Sequence::new(img, toks.to_vec(), 4, 4).unwrap();
    batch_loss_and_grads(&mut wrapped, &[&seq], 0.01).unwrap();
    for (name, t) in wrapped.params() {
        if name.ends_with("attn.wq") || name.ends_with("attn.wv") {
            assert!(!t.requires_grad());
            assert!(t.grad().is_none(), "{name}");
        }
        if name.contains("lora_") {
            let g = t.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
            if name.ends_with(".b") {
                assert!(g.iter().any(|v| *v != 0.0), "{name}");
            }
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let (m, mut rng) = model(8);
    let img = image(&mut rng, 8);
    let a = m.generate(&img, &[1, 5, 3], 2, 6).unwrap();
    let b = m.generate(&img, &[1, 5, 3], 2, 6).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 6);
    assert!(m.generate(&img, &[1, 5, 3], 2, 0).unwrap().is_empty());
}

#[test]
fn batch_aux_loss_matches_pooled_statistics() {
    let (m, mut rng) = model(9);
    let s = sparsify(&m, 4, 2, 1, 0.5, &mut rng).unwrap();
    let seqs: Vec<_> = (0..3)
        .map(|i| Sequence::new(image(&mut rng, 8), vec![1, 5 + i, 3, 7, 2], 3, 4).unwrap())
        .collect();
    let refs: Vec<_> = seqs.iter().collect();
    let loss = batch_loss(&s, &refs, 0.1).unwrap();
    assert_eq!(loss.aux.len(), 2);
    // Pool router probabilities of every token by hand.
    for (l, layer) in s.moe_layers().iter().enumerate() {
        let mut counts = [0.0; 4];
        let mut sums = [0.0; 4];
        let mut tokens = 0.0;
        for q in &seqs {
            let (_, routes) = s.forward_sequence(q).unwrap();
            let p = &routes[l].probs;
            for r in 0..p.shape()[0] {
                let row = p.row(r);
                let best = (0..4).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                counts[best] += 1.0;
                for i in 0..4 {
                    sums[i] += row[i];
                }
                tokens += 1.0;
            }
        }
        let want: f64 = 4.0 * (0..4).map(|i| counts[i] / tokens * sums[i] / tokens).sum::<f64>();
        assert!((loss.aux[l] - want).abs() < 1e-12, "layer {layer}");
    }
    assert!((loss.total - (loss.regressive + 0.1 * (loss.aux[0] + loss.aux[1]) / 2.0)).abs() < 1e-15);
}

#[test]
fn batch_gradients_match_finite_differences() {
    let (m, mut rng) = model(10);
    let mut s = sparsify(&m, 4, 2, 1, 1.0, &mut rng).unwrap();
    s.wrap_lora(4, 1.0, &mut rng).unwrap();
    for (name, t) in s.params_mut() {
        if name.ends_with("lora_q.b") || name.ends_with("lora_v.b") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    let seqs: Vec<_> = (0..2)
        .map(|i| Sequence::new(image(&mut rng, 8), vec![1, 5 + i, 3, 7, 8, 2], 3, 4).unwrap())
        .collect();
    let refs: Vec<_> = seqs.iter().collect();
    let alpha = 0.5;
    batch_loss_and_grads(&mut s, &refs, alpha).unwrap();
    let names: Vec<String> = s.params().iter().map(|(n, _)| n.clone()).collect();
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for name in names.iter().filter(|n| n.contains("router") || n.contains("expert1.w1") || n.contains("lora_v") || n.contains("embedding")) {
        let (grad, len) = {
            let p = s.params();
            let t = p.iter().find(|(n, _)| n == name).unwrap().1;
            (t.grad().unwrap().to_vec(), t.numel())
        };
        for _ in 0..5 {
            let i = rng.random_range(0..len);
            let eval = |delta: f64| {
                let mut c = s.clone();
                for (n, t) in c.params_mut() {
                    if &n == name {
                        t.data_mut()[i] += delta;
                    }
                }
                batch_loss(&c, &refs, alpha).unwrap().total
            };
            let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let err = (grad[i] - num).abs() / grad[i].abs().max(num.abs()).max(1e-4);
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-5, "{worst}");
}
