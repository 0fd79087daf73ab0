//! Two-stage optimisation: dense warm-start then LoRA, and sparse MoE
//! fine-tuning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::dataset::Dataset;
use super::optim::{clip_grad_norm, AdamW};
use super::schedule::cosine_lr;
use crate::model::{batch_loss_and_grads, sparsify, BatchLoss, Sequence, VisionLanguageModel};
use crate::moe::LoadBalanceStats;
use crate::{Error, Result, Scalar};

/// Routing load of one MoE layer aggregated over many tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLoad {
    pub layer: usize,
    /// `F`: share of tokens whose top expert is each expert.
    pub fraction: Vec<f64>,
    /// `G`: mean router probability of each expert.
    pub mean_prob: Vec<f64>,
    pub loss: f64,
    pub entropy: f64,
    pub tokens: usize,
}

/// Token-weighted running sums of per-batch load statistics.
#[derive(Clone, Debug, Default)]
pub struct LoadTally {
    layers: Vec<usize>,
    f: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    tokens: Vec<usize>,
}

impl LoadTally {
    pub fn new(layers: Vec<usize>, experts: usize) -> Self {
        let n = layers.len();
        Self {
            layers,
            f: vec![vec![0.0; experts]; n],
            g: vec![vec![0.0; experts]; n],
            tokens: vec![0; n],
        }
    }

    pub fn add<S: Scalar>(&mut self, stats: &[LoadBalanceStats<S>]) {
        for (l, s) in stats.iter().enumerate() {
            let t = s.tokens as f64;
            for e in 0..s.experts() {
                self.f[l][e] += s.fraction[e].as_f64() * t;
                self.g[l][e] += s.mean_prob[e].as_f64() * t;
            }
            self.tokens[l] += s.tokens;
        }
    }

    pub fn finish(&self) -> Vec<LayerLoad> {
        (0..self.layers.len())
            .filter(|l| self.tokens[*l] > 0)
            .map(|l| {
                let t = self.tokens[l] as f64;
                let fraction: Vec<f64> = self.f[l].iter().map(|v| v / t).collect();
                let mean_prob: Vec<f64> = self.g[l].iter().map(|v| v / t).collect();
                let e = fraction.len() as f64;
                let loss = e * fraction.iter().zip(&mean_prob).map(|(a, b)| a * b).sum::<f64>();
                let entropy = -fraction.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
                LayerLoad {
                    layer: self.layers[l],
                    fraction,
                    mean_prob,
                    loss,
                    entropy,
                    tokens: self.tokens[l],
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub regressive: f64,
    /// Load-balancing loss per MoE layer.
    pub aux: Vec<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

impl StepLog {
    pub fn csv_header(moe_layers: &[usize]) -> String {
        let mut h = "stage,epoch,step,lr,regressive_loss".to_string();
        for l in moe_layers {
            h.push_str(&format!(",aux_loss_layer{l}"));
        }
        h.push_str(",total,grad_norm");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!("{},{},{},{:.6e},{:.6}", self.stage, self.epoch, self.step, self.lr, self.regressive);
        for a in &self.aux {
            r.push_str(&format!(",{a:.6}"));
        }
        r.push_str(&format!(",{:.6},{:.6}", self.total, self.grad_norm));
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub regressive: f64,
    pub total: f64,
    pub layers: Vec<LayerLoad>,
}

/// A model together with everything needed to continue or audit training.
#[derive(Clone, Debug)]
pub struct TrainState<S> {
    pub model: VisionLanguageModel<S>,
    pub optimizer: AdamW<S>,
    pub stage: u8,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl<S> TrainState<S> {
    /// Routing load of the last epoch, if any layer is routed.
    pub fn routing(&self) -> Vec<LayerLoad> {
        self.epochs.last().map(|e| e.layers.clone()).unwrap_or_default()
    }
}

/// Parameters updated in stage 1 once the base is frozen.
pub fn stage1_trainable(name: &str) -> bool {
    name.starts_with("text.") || name == "head" || name.contains(".lora_")
}

/// Parameters updated in stage 2.
pub fn stage2_trainable(name: &str) -> bool {
    name.contains(".moe.") || name.contains(".lora_")
}

pub fn set_trainable<S: Scalar>(model: &mut VisionLanguageModel<S>, keep: impl Fn(&str) -> bool) {
    for (name, t) in model.params_mut() {
        t.set_requires_grad(keep(&name));
    }
}

fn rng_for(seed: u64, stage: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng
}

fn check_stage(cfg: &TrainConfig, stage: u8) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != stage {
        return Err(Error::Config(format!("config is for stage {}, not {stage}", cfg.stage)));
    }
    Ok(())
}

fn batch_step<S: Scalar>(
    st: &mut TrainState<S>,
    data: &Dataset<S>,
    idx: &[usize],
    cfg: &TrainConfig,
    total_steps: usize,
) -> Result<(BatchLoss<S>, f64, f64)> {
    let seqs = idx.iter().map(|i| data.sequence(*i)).collect::<Result<Vec<Sequence<S>>>>()?;
    let refs: Vec<&Sequence<S>> = seqs.iter().collect();
    st.model.zero_grad();
    let loss = batch_loss_and_grads(&mut st.model, &refs, S::lit(cfg.alpha))?;
    if !loss.total.is_finite() {
        return Err(Error::Diverged {
            step: st.step as usize,
            detail: format!("loss {} (regressive {})", loss.total, loss.regressive),
        });
    }
    let norm = if cfg.grad_clip > 0.0 {
        clip_grad_norm(&mut st.model, cfg.grad_clip)
    } else {
        0.0
    };
    let lr = cosine_lr(st.step as usize, total_steps, cfg.lr_max, cfg.lr_min)?;
    st.optimizer.step(&mut st.model, lr)?;
    Ok((loss, norm, lr))
}

fn run_epochs<S: Scalar>(
    st: &mut TrainState<S>,
    data: &Dataset<S>,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog),
    mut before_step: impl FnMut(&mut TrainState<S>, usize) -> Result<()>,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::arg("empty training set"));
    }
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut st.rng);
        let mut tally = LoadTally::new(st.model.moe_layers(), st.model.config.experts);
        let (mut reg, mut tot) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            before_step(st, total)?;
            let (loss, grad_norm, lr) = batch_step(st, data, chunk, cfg, total)?;
            tally.add(&loss.stats);
            let log = StepLog {
                stage: st.stage,
                epoch,
                step: st.step as usize,
                lr,
                regressive: loss.regressive.as_f64(),
                aux: loss.aux.iter().map(|a| a.as_f64()).collect(),
                total: loss.total.as_f64(),
                grad_norm,
            };
            reg += log.regressive;
            tot += log.total;
            on_step(&log);
            st.steps.push(log);
            st.step += 1;
        }
        st.epochs.push(EpochLog {
            stage: st.stage,
            epoch,
            regressive: reg / per_epoch as f64,
            total: tot / per_epoch as f64,
            layers: tally.finish(),
        });
    }
    Ok(())
}

/// Stage 1: the dense model trains in full for the first `warm_start`
/// share of steps; then LoRA adapters wrap `W_q`/`W_v` and only the
/// adapters, the text embeddings and the output head keep training.
pub fn train_stage1<S: Scalar>(
    model: VisionLanguageModel<S>,
    data: &Dataset<S>,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainState<S>> {
    check_stage(cfg, 1)?;
    if model.is_sparse() {
        return Err(Error::arg("stage 1 expects a dense model"));
    }
    let mut st = TrainState {
        model,
        optimizer: AdamW::new(cfg.adam),
        stage: 1,
        step: 0,
        rng: rng_for(cfg.seed, 1),
        steps: Vec::new(),
        epochs: Vec::new(),
    };
    if st.model.has_lora() {
        set_trainable(&mut st.model, stage1_trainable);
    } else {
        set_trainable(&mut st.model, |_| true);
    }
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let warm = (cfg.warm_start * (per_epoch * cfg.epochs) as f64).round() as u64;
    run_epochs(&mut st, data, cfg, on_step, |st, _| {
        if st.step == warm && !st.model.has_lora() {
            let (rank, scale) = (st.model.config.lora_rank, st.model.config.lora_scale);
            st.model.wrap_lora(rank, scale, &mut st.rng)?;
            set_trainable(&mut st.model, stage1_trainable);
        }
        Ok(())
    })?;
    if !st.model.has_lora() {
        let (rank, scale) = (st.model.config.lora_rank, st.model.config.lora_scale);
        st.model.wrap_lora(rank, scale, &mut st.rng)?;
        set_trainable(&mut st.model, stage1_trainable);
    }
    Ok(st)
}

/// Stage 2: every `moe_period`-th FFN becomes an ensemble of clones behind
/// a fresh router; routers, experts and adapters train on the total loss.
pub fn train_stage2<S: Scalar>(
    stage1: VisionLanguageModel<S>,
    data: &Dataset<S>,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainState<S>> {
    check_stage(cfg, 2)?;
    if stage1.is_sparse() {
        return Err(Error::arg("stage 2 expects the dense stage-1 model"));
    }
    let mut rng = rng_for(cfg.seed, 2);
    let c = &stage1.config;
    let mut model = sparsify(&stage1, c.experts, c.top_k, c.moe_period, c.router_init_std, &mut rng)?;
    set_trainable(&mut model, stage2_trainable);
    let mut st = TrainState {
        model,
        optimizer: AdamW::new(cfg.adam),
        stage: 2,
        step: 0,
        rng,
        steps: Vec::new(),
        epochs: Vec::new(),
    };
    run_epochs(&mut st, data, cfg, on_step, |_, _| Ok(()))?;
    Ok(st)
}
