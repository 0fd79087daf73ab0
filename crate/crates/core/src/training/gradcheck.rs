//! Central finite-difference audit of the full-model gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{batch_loss, batch_loss_and_grads, sparsify, ModelConfig, Sequence, VisionLanguageModel};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Parameter groups reported separately.
pub const GROUPS: [&str; 5] = ["router", "experts", "lora", "embedding", "other"];

pub fn param_group(name: &str) -> &'static str {
    if name.contains(".moe.router") {
        "router"
    } else if name.contains(".moe.expert") {
        "experts"
    } else if name.contains(".lora_") {
        "lora"
    } else if name == "text.embedding" {
        "embedding"
    } else {
        "other"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Coordinates sampled per group.
    pub coords: usize,
    pub eps: f64,
    /// Batches whose smallest routing log-probability gap (top-1 vs top-2
    /// and k-th vs (k+1)-th) is below this are redrawn.
    pub min_margin: f64,
    pub max_resamples: usize,
    pub alpha: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            coords: 20,
            eps: 1e-5,
            min_margin: 1e-4,
            max_resamples: 50,
            alpha: 0.01,
            floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    /// Batches discarded for sitting too close to a routing tie.
    pub resamples: usize,
    pub tie_margin: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.group == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,coords,max_rel_error,worst_param,worst_index,analytic,numeric\n");
        for g in &self.groups {
            s.push_str(&format!(
                "{},{},{:.3e},{},{},{:.9e},{:.9e}\n",
                g.group, g.coords, g.max_rel_error, g.worst_param, g.worst_index, g.analytic, g.numeric
            ));
        }
        s
    }
}

/// Smallest routing log-probability gap over all tokens and routed layers.
pub fn batch_tie_margin(model: &VisionLanguageModel<f64>, batch: &[Sequence<f64>]) -> Result<f64> {
    let mut m = f64::INFINITY;
    for seq in batch {
        let (_, decisions) = model.forward_sequence(seq)?;
        for d in &decisions {
            m = m.min(d.tie_margin());
        }
    }
    Ok(m)
}

fn perturbed_loss(model: &mut VisionLanguageModel<f64>, batch: &[&Sequence<f64>], name: &str, i: usize, delta: f64, alpha: f64) -> Result<f64> {
    let set = |m: &mut VisionLanguageModel<f64>, d: f64| {
        for (n, t) in m.params_mut() {
            if n == name {
                t.data_mut()[i] += d;
            }
        }
    };
    set(model, delta);
    let l = batch_loss(model, batch, alpha);
    set(model, -delta);
    Ok(l?.total)
}

/// Compares analytic gradients of the total loss with central differences
/// at `cfg.coords` random coordinates of each trainable parameter group.
/// `sample` draws a batch; batches near a routing tie are redrawn.
pub fn grad_check<R: Rng>(
    model: &VisionLanguageModel<f64>,
    mut sample: impl FnMut(&mut R) -> Result<Vec<Sequence<f64>>>,
    cfg: &GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let mut resamples = 0;
    let (batch, margin) = loop {
        let batch = sample(rng)?;
        let margin = batch_tie_margin(model, &batch)?;
        if margin >= cfg.min_margin {
            break (batch, margin);
        }
        resamples += 1;
        if resamples > cfg.max_resamples {
            return Err(Error::ConstraintUnsatisfiable(format!(
                "no batch with routing margin >= {} in {} draws",
                cfg.min_margin, cfg.max_resamples
            )));
        }
    };
    let refs: Vec<&Sequence<f64>> = batch.iter().collect();

    let mut work = model.clone();
    work.zero_grad();
    batch_loss_and_grads(&mut work, &refs, cfg.alpha)?;
    let analytic: Vec<(String, Vec<f64>)> = work
        .params()
        .into_iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, t)| {
            let g = t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
            (n, g)
        })
        .collect();
    work.zero_grad();

    let mut groups = Vec::new();
    for group in GROUPS {
        let members: Vec<&(String, Vec<f64>)> = analytic.iter().filter(|(n, _)| param_group(n) == group).collect();
        let total: usize = members.iter().map(|(_, g)| g.len()).sum();
        if total == 0 {
            continue;
        }
        let mut report = GroupReport {
            group: group.into(),
            coords: cfg.coords,
            max_rel_error: 0.0,
            worst_param: String::new(),
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for _ in 0..cfg.coords {
            let mut k = rng.random_range(0..total);
            let (name, g) = members
                .iter()
                .find(|(_, g)| {
                    if k < g.len() {
                        true
                    } else {
                        k -= g.len();
                        false
                    }
                })
                .expect("index within group");
            let plus = perturbed_loss(&mut work, &refs, name, k, cfg.eps, cfg.alpha)?;
            let minus = perturbed_loss(&mut work, &refs, name, k, -cfg.eps, cfg.alpha)?;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = g[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = k;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        groups.push(report);
    }
    Ok(GradCheckReport {
        groups,
        resamples,
        tie_margin: margin,
    })
}

/// `count` sequences of random pixels and random non-special tokens; the
/// text is `len` tokens long and supervised from position `prompt`.
pub fn random_batch<R: Rng>(
    cfg: &ModelConfig,
    count: usize,
    len: usize,
    prompt: usize,
    rng: &mut R,
) -> Result<Vec<Sequence<f64>>> {
    if cfg.vocab <= 4 {
        return Err(Error::arg("vocabulary has no ordinary tokens"));
    }
    let s = cfg.image_size;
    (0..count)
        .map(|_| {
            let img = Tensor::from_fn(&[s, s, 3], |_| rng.random_range(0.0..1.0));
            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(4..cfg.vocab)).collect();
            Sequence::new(img, tokens, prompt, cfg.visual_tokens())
        })
        .collect()
}

/// A freshly initialised model in the shape stage 2 trains: LoRA factors
/// drawn non-zero (a zero `B` would silence the gradient of `A`), routed
/// layers per the config, and experts jittered apart so the router
/// gradient is informative.
pub fn fresh_check_model<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<VisionLanguageModel<f64>> {
    let mut m = VisionLanguageModel::new(cfg.clone(), rng)?;
    m.wrap_lora(cfg.lora_rank, cfg.lora_scale, rng)?;
    for (name, t) in m.params_mut() {
        if name.contains(".lora_") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    if cfg.experts > 1 {
        m = sparsify(&m, cfg.experts, cfg.top_k, cfg.moe_period, 0.5, rng)?;
        for (name, t) in m.params_mut() {
            if name.contains(".moe.expert") {
                t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
            }
        }
    }
    for (_, t) in m.params_mut() {
        t.set_requires_grad(true);
    }
    Ok(m)
}
