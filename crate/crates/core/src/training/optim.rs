use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::VisionLanguageModel;
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments of one parameter tensor and its own step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub t: u64,
}

impl<S: Scalar> Moments<S> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
            t: 0,
        }
    }
}

/// One bias-corrected AdamW update of `param` in place.
pub fn adamw_update<S: Scalar>(param: &mut [S], grad: &[S], st: &mut Moments<S>, lr: f64, cfg: &AdamWConfig, decay: bool) {
    st.t += 1;
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let c1 = S::one() - S::lit(cfg.beta1.powi(st.t as i32));
    let c2 = S::one() - S::lit(cfg.beta2.powi(st.t as i32));
    let (lr, eps) = (S::lit(lr), S::lit(cfg.eps));
    let shrink = if decay { S::one() - lr * S::lit(cfg.weight_decay) } else { S::one() };
    for i in 0..param.len() {
        let g = grad[i];
        st.m[i] = b1 * st.m[i] + (S::one() - b1) * g;
        st.v[i] = b2 * st.v[i] + (S::one() - b2) * g * g;
        let mhat = st.m[i] / c1;
        let vhat = st.v[i] / c2;
        param[i] = param[i] * shrink - lr * mhat / (vhat.sqrt() + eps);
    }
}

/// AdamW over the trainable parameters of a model, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S> {
    pub cfg: AdamWConfig,
    pub state: BTreeMap<String, Moments<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
        }
    }

    /// Applies one step with the gradients held in the model's grad buffers.
    /// Frozen parameters and parameters without a gradient are skipped.
    pub fn step(&mut self, model: &mut VisionLanguageModel<S>, lr: f64) -> Result<()> {
        for (name, t) in model.params_mut() {
            if !t.requires_grad() {
                continue;
            }
            let Some(g) = t.grad().map(|g| g.to_vec()) else {
                continue;
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name));
            }
            let decay = t.shape().len() >= 2;
            let st = self.state.entry(name).or_insert_with(|| Moments::new(g.len()));
            if st.m.len() != g.len() {
                return Err(Error::shape("optimizer state does not match parameter size"));
            }
            adamw_update(t.data_mut(), &g, st, lr, &self.cfg, decay);
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_grad_norm<S: Scalar>(model: &mut VisionLanguageModel<S>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, t) in model.params() {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = S::lit(max_norm / norm);
        for (_, t) in model.params_mut() {
            if let Some(g) = t.grad() {
                let scaled: Vec<S> = g.iter().map(|v| *v * s).collect();
                t.zero_grad();
                t.accumulate_grad(&scaled);
            }
        }
    }
    norm
}
