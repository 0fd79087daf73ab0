use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{AttentionMask, ModelConfig};
use super::lora::LoraAdapter;
use super::posenc::PosEncodingGrid;
use super::sequence::{patchify, Sequence};
use crate::error::{Error, Result};
use crate::moe::{clone_experts, ExpertFfn, MoeLayer, Router, RoutingDecision};
use crate::scalar::Scalar;
use crate::tensor::{argmax, Tape, Tensor, Var};

fn gaussian<S: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<S> {
    let n = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| S::lit(n.sample(rng))).trainable()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<S> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LayerNormParams<S> {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Tensor::full(&[d], S::one()).trainable(),
            bias: Tensor::zeros(&[d]).trainable(),
        }
    }

    fn on(&self, tape: &mut Tape<S>, x: Var, eps: S) -> Result<Var> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.layer_norm(x, g, b, eps)
    }
}

/// Multi-head self-attention without biases. `W_q` and `W_v` optionally
/// carry LoRA adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<S> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub lora_q: Option<LoraAdapter<S>>,
    pub lora_v: Option<LoraAdapter<S>>,
    pub heads: usize,
}

impl<S: Scalar> Attention<S> {
    pub fn random<R: Rng>(d: usize, heads: usize, out_scale: f64, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            wq: gaussian(&[d, d], std, rng),
            wk: gaussian(&[d, d], std, rng),
            wv: gaussian(&[d, d], std, rng),
            wo: gaussian(&[d, d], std * out_scale, rng),
            lora_q: None,
            lora_v: None,
            heads,
        }
    }

    /// Attaches zero-initialised adapters to `W_q` and `W_v` and freezes both
    /// base matrices.
    pub fn wrap_lora<R: Rng>(&mut self, rank: usize, scale: f64, rng: &mut R) -> Result<()> {
        let d = self.wq.shape()[0];
        self.lora_q = Some(LoraAdapter::new(d, rank, scale, rng)?);
        self.lora_v = Some(LoraAdapter::new(d, rank, scale, rng)?);
        self.wq.set_requires_grad(false);
        self.wv.set_requires_grad(false);
        Ok(())
    }

    fn project(
        tape: &mut Tape<S>,
        x: Var,
        w: &Tensor<S>,
        lora: &Option<LoraAdapter<S>>,
    ) -> Result<Var> {
        let wv = tape.param(w);
        let base = tape.matmul(x, wv)?;
        match lora {
            Some(a) => a.apply_on(tape, x, base),
            None => Ok(base),
        }
    }

    pub fn forward_on(&self, tape: &mut Tape<S>, x: Var, mask: &Rc<[bool]>) -> Result<Var> {
        let (_, d) = tape.dims2(x)?;
        let dh = d / self.heads;
        let q = Self::project(tape, x, &self.wq, &self.lora_q)?;
        let wk = tape.param(&self.wk);
        let k = tape.matmul(x, wk)?;
        let v = Self::project(tape, x, &self.wv, &self.lora_v)?;
        let inv = S::one() / S::lit(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = tape.slice(q, 1, a, b)?;
            let kh = tape.slice(k, 1, a, b)?;
            let vh = tape.slice(v, 1, a, b)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, inv)?;
            let attn = tape.masked_softmax(scores, mask.clone())?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 1)?
        };
        let wo = tape.param(&self.wo);
        tape.matmul(merged, wo)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeedForward<S> {
    Dense(ExpertFfn<S>),
    Sparse(MoeLayer<S>),
}

/// Routing trace of one MoE layer during a forward pass.
#[derive(Clone, Debug)]
pub struct MoeTrace<S> {
    pub layer: usize,
    pub probs: Var,
    pub decision: RoutingDecision<S>,
}

/// Pre-norm residual block: `x' = x + MSA(LN(x))`, `y = x' + FFN(LN(x'))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<S> {
    pub norm1: LayerNormParams<S>,
    pub attn: Attention<S>,
    pub norm2: LayerNormParams<S>,
    pub ffn: FeedForward<S>,
}

pub struct ForwardOutput<S> {
    /// `(P+N)×V` logits.
    pub logits: Var,
    pub moe: Vec<MoeTrace<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionLanguageModel<S> {
    pub config: ModelConfig,
    pub patch_weight: Tensor<S>,
    pub patch_bias: Tensor<S>,
    pub pos: PosEncodingGrid<S>,
    pub proj_weight: Tensor<S>,
    pub proj_bias: Tensor<S>,
    pub token_embedding: Tensor<S>,
    pub text_pos: Tensor<S>,
    pub blocks: Vec<Block<S>>,
    pub final_norm: LayerNormParams<S>,
    pub head: Tensor<S>,
}

impl<S: Scalar> VisionLanguageModel<S> {
    /// A dense model; no adapters, no routed layers.
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, c, g) = (config.hidden, config.channels, config.grid());
        let out_scale = 1.0 / (2.0 * config.layers as f64).sqrt();
        let patch_weight = gaussian(&[config.patch_dim(), c], 1.0 / (config.patch_dim() as f64).sqrt(), rng);
        let pos = PosEncodingGrid::new(gaussian(&[g, g, c], 0.1, rng))?;
        let proj_weight = gaussian(&[c, d], 1.0 / (c as f64).sqrt(), rng);
        let token_embedding = gaussian(&[config.vocab, d], 0.5, rng);
        let text_pos = gaussian(&[config.max_text_len, d], 0.1, rng);
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let attn = Attention::random(d, config.heads, out_scale, rng);
            let ffn = ExpertFfn::random(d, config.ffn_width, out_scale, rng);
            blocks.push(Block {
                norm1: LayerNormParams::new(d),
                attn,
                norm2: LayerNormParams::new(d),
                ffn: FeedForward::Dense(ffn),
            });
        }
        let head = gaussian(&[d, config.vocab], 1.0 / (d as f64).sqrt(), rng);
        Ok(Self {
            patch_weight,
            patch_bias: Tensor::zeros(&[c]).trainable(),
            pos,
            proj_weight,
            proj_bias: Tensor::zeros(&[d]).trainable(),
            token_embedding,
            text_pos,
            blocks,
            final_norm: LayerNormParams::new(d),
            head,
            config,
        })
    }

    /// Wraps `W_q`/`W_v` of every block with rank-`rank` adapters.
    pub fn wrap_lora<R: Rng>(&mut self, rank: usize, scale: f64, rng: &mut R) -> Result<()> {
        for b in &mut self.blocks {
            b.attn.wrap_lora(rank, scale, rng)?;
        }
        self.config.lora_rank = rank;
        self.config.lora_scale = scale;
        Ok(())
    }

    pub fn has_lora(&self) -> bool {
        self.blocks.iter().any(|b| b.attn.lora_q.is_some())
    }

    pub fn moe_layers(&self) -> Vec<usize> {
        (0..self.blocks.len())
            .filter(|i| matches!(self.blocks[*i].ffn, FeedForward::Sparse(_)))
            .collect()
    }

    pub fn is_sparse(&self) -> bool {
        !self.moe_layers().is_empty()
    }

    /// Named parameter tensors in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![
            ("visual.patch.weight".into(), &self.patch_weight),
            ("visual.patch.bias".into(), &self.patch_bias),
            ("visual.pos".into(), &self.pos.grid),
            ("visual.proj.weight".into(), &self.proj_weight),
            ("visual.proj.bias".into(), &self.proj_bias),
            ("text.embedding".into(), &self.token_embedding),
            ("text.pos".into(), &self.text_pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            out.push((format!("{p}.norm1.gain"), &b.norm1.gain));
            out.push((format!("{p}.norm1.bias"), &b.norm1.bias));
            out.push((format!("{p}.attn.wq"), &b.attn.wq));
            out.push((format!("{p}.attn.wk"), &b.attn.wk));
            out.push((format!("{p}.attn.wv"), &b.attn.wv));
            out.push((format!("{p}.attn.wo"), &b.attn.wo));
            for (tag, l) in [("q", &b.attn.lora_q), ("v", &b.attn.lora_v)] {
                if let Some(l) = l {
                    out.push((format!("{p}.attn.lora_{tag}.a"), &l.a));
                    out.push((format!("{p}.attn.lora_{tag}.b"), &l.b));
                }
            }
            out.push((format!("{p}.norm2.gain"), &b.norm2.gain));
            out.push((format!("{p}.norm2.bias"), &b.norm2.bias));
            match &b.ffn {
                FeedForward::Dense(f) => push_ffn(&mut out, &format!("{p}.ffn"), f),
                FeedForward::Sparse(m) => {
                    out.push((format!("{p}.moe.router"), &m.router.weight));
                    for (e, f) in m.ensemble.experts().iter().enumerate() {
                        push_ffn(&mut out, &format!("{p}.moe.expert{e}"), f);
                    }
                }
            }
        }
        out.push(("final_norm.gain".into(), &self.final_norm.gain));
        out.push(("final_norm.bias".into(), &self.final_norm.bias));
        out.push(("head".into(), &self.head));
        out
    }

    /// Mutable counterpart of [`params`](Self::params), same names and order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = vec![
            ("visual.patch.weight".into(), &mut self.patch_weight),
            ("visual.patch.bias".into(), &mut self.patch_bias),
            ("visual.pos".into(), &mut self.pos.grid),
            ("visual.proj.weight".into(), &mut self.proj_weight),
            ("visual.proj.bias".into(), &mut self.proj_bias),
            ("text.embedding".into(), &mut self.token_embedding),
            ("text.pos".into(), &mut self.text_pos),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            out.push((format!("{p}.norm1.gain"), &mut b.norm1.gain));
            out.push((format!("{p}.norm1.bias"), &mut b.norm1.bias));
            out.push((format!("{p}.attn.wq"), &mut b.attn.wq));
            out.push((format!("{p}.attn.wk"), &mut b.attn.wk));
            out.push((format!("{p}.attn.wv"), &mut b.attn.wv));
            out.push((format!("{p}.attn.wo"), &mut b.attn.wo));
            for (tag, l) in [("q", &mut b.attn.lora_q), ("v", &mut b.attn.lora_v)] {
                if let Some(l) = l {
                    out.push((format!("{p}.attn.lora_{tag}.a"), &mut l.a));
                    out.push((format!("{p}.attn.lora_{tag}.b"), &mut l.b));
                }
            }
            out.push((format!("{p}.norm2.gain"), &mut b.norm2.gain));
            out.push((format!("{p}.norm2.bias"), &mut b.norm2.bias));
            match &mut b.ffn {
                FeedForward::Dense(f) => push_ffn_mut(&mut out, &format!("{p}.ffn"), f),
                FeedForward::Sparse(m) => {
                    out.push((format!("{p}.moe.router"), &mut m.router.weight));
                    for (e, f) in m.ensemble.experts_mut().iter_mut().enumerate() {
                        push_ffn_mut(&mut out, &format!("{p}.moe.expert{e}"), f);
                    }
                }
            }
        }
        out.push(("final_norm.gain".into(), &mut self.final_norm.gain));
        out.push(("final_norm.bias".into(), &mut self.final_norm.bias));
        out.push(("head".into(), &mut self.head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.params_mut() {
            t.zero_grad();
        }
    }

    /// `P×C` patch features with positional vectors added.
    pub fn encode_patches_on(&self, tape: &mut Tape<S>, image: &Tensor<S>) -> Result<Var> {
        let s = self.config.image_size;
        if image.shape() != [s, s, 3] {
            return Err(Error::shape(format!(
                "image {:?} does not match configured {s}×{s}×3",
                image.shape()
            )));
        }
        if self.pos.side() != self.config.grid() {
            return Err(Error::shape(format!(
                "positional grid side {} for patch grid {}",
                self.pos.side(),
                self.config.grid()
            )));
        }
        let patches = patchify(image, self.config.patch_size)?;
        let patches = tape.constant(patches);
        let w = tape.param(&self.patch_weight);
        let b = tape.param(&self.patch_bias);
        let z = tape.matmul(patches, w)?;
        let z = tape.add_row(z, b)?;
        let pv = tape.param(&self.pos.grid);
        let pv = tape.reshape(pv, &[self.config.visual_tokens(), self.pos.channels()])?;
        tape.add(z, pv)
    }

    pub fn encode_patches(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let v = self.encode_patches_on(&mut tape, image)?;
        Ok(tape.value(v))
    }

    /// Causal (or prefix-bidirectional) mask over `k` positions with a
    /// visual prefix of length `p`.
    pub fn attention_mask(&self, k: usize, p: usize) -> Rc<[bool]> {
        let mut m = vec![false; k * k];
        for i in 0..k {
            for j in 0..k {
                m[i * k + j] = j <= i
                    || (self.config.attention == AttentionMask::PrefixBidirectional && i < p && j < p);
            }
        }
        m.into()
    }

    /// Builds the logits graph for one image and its text tokens.
    pub fn forward_on(&self, tape: &mut Tape<S>, image: &Tensor<S>, tokens: &[usize]) -> Result<ForwardOutput<S>> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::arg("empty text sequence"));
        }
        if tokens.len() > cfg.max_text_len {
            return Err(Error::arg(format!(
                "text length {} exceeds maximum {}",
                tokens.len(),
                cfg.max_text_len
            )));
        }
        if let Some(bad) = tokens.iter().find(|t| **t >= cfg.vocab) {
            return Err(Error::arg(format!("token id {bad} outside vocabulary {}", cfg.vocab)));
        }
        let eps = S::lit(cfg.ln_eps);
        let z = self.encode_patches_on(tape, image)?;
        let pw = tape.param(&self.proj_weight);
        let pb = tape.param(&self.proj_bias);
        let v = tape.matmul(z, pw)?;
        let v = tape.add_row(v, pb)?;
        let emb = tape.param(&self.token_embedding);
        let t = tape.embedding(emb, tokens)?;
        let tp = tape.param(&self.text_pos);
        let tp = tape.slice(tp, 0, 0, tokens.len())?;
        let t = tape.add(t, tp)?;
        let mut x = tape.concat(&[v, t], 0)?;
        let p = cfg.visual_tokens();
        let mask = self.attention_mask(p + tokens.len(), p);
        let mut moe = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let h = b.norm1.on(tape, x, eps)?;
            let a = b.attn.forward_on(tape, h, &mask)?;
            let x1 = tape.add(x, a)?;
            let h = b.norm2.on(tape, x1, eps)?;
            let f = match &b.ffn {
                FeedForward::Dense(ffn) => ffn.forward_on(tape, h)?,
                FeedForward::Sparse(layer) => {
                    let (out, probs, decision) = layer.forward_on(tape, h)?;
                    moe.push(MoeTrace {
                        layer: i,
                        probs,
                        decision,
                    });
                    out
                }
            };
            x = tape.add(x1, f)?;
        }
        let x = self.final_norm.on(tape, x, eps)?;
        let head = tape.param(&self.head);
        let logits = tape.matmul(x, head)?;
        Ok(ForwardOutput { logits, moe })
    }

    /// Value-level forward: logits and the routing decision of each MoE layer.
    pub fn forward(&self, image: &Tensor<S>, tokens: &[usize]) -> Result<(Tensor<S>, Vec<RoutingDecision<S>>)> {
        let mut tape = Tape::new();
        let out = self.forward_on(&mut tape, image, tokens)?;
        Ok((
            tape.value(out.logits),
            out.moe.into_iter().map(|m| m.decision).collect(),
        ))
    }

    pub fn forward_sequence(&self, seq: &Sequence<S>) -> Result<(Tensor<S>, Vec<RoutingDecision<S>>)> {
        self.forward(&seq.image, &seq.tokens)
    }

    /// Greedy decoding after `prompt` until `eos` or `max_tokens` new tokens.
    /// The returned tokens exclude `eos`.
    pub fn generate(&self, image: &Tensor<S>, prompt: &[usize], eos: usize, max_tokens: usize) -> Result<Vec<usize>> {
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_tokens && tokens.len() < self.config.max_text_len {
            let (logits, _) = self.forward(image, &tokens)?;
            let last = logits.row(logits.shape()[0] - 1);
            let next = argmax(last);
            if next == eos {
                break;
            }
            out.push(next);
            tokens.push(next);
        }
        Ok(out)
    }
}

fn push_ffn<'a, S>(out: &mut Vec<(String, &'a Tensor<S>)>, p: &str, f: &'a ExpertFfn<S>) {
    out.push((format!("{p}.w1"), &f.w1));
    out.push((format!("{p}.b1"), &f.b1));
    out.push((format!("{p}.w2"), &f.w2));
    out.push((format!("{p}.b2"), &f.b2));
}

fn push_ffn_mut<'a, S>(out: &mut Vec<(String, &'a mut Tensor<S>)>, p: &str, f: &'a mut ExpertFfn<S>) {
    out.push((format!("{p}.w1"), &mut f.w1));
    out.push((format!("{p}.b1"), &mut f.b1));
    out.push((format!("{p}.w2"), &mut f.w2));
    out.push((format!("{p}.b2"), &mut f.b2));
}

/// Replaces the feed-forward of every layer `i` with `(i+1) % period == 0`
/// by a routed layer whose `experts` experts are clones of that FFN. All
/// other parameters are carried over unchanged.
pub fn sparsify<S: Scalar, R: Rng>(
    model: &VisionLanguageModel<S>,
    experts: usize,
    k: usize,
    period: usize,
    router_std: f64,
    rng: &mut R,
) -> Result<VisionLanguageModel<S>> {
    if period < 1 {
        return Err(Error::arg("sparsify period must be >= 1"));
    }
    if experts == 0 || k == 0 || k > experts {
        return Err(Error::arg(format!("top-k {k} with {experts} experts")));
    }
    let mut out = model.clone();
    let d = model.config.hidden;
    for (i, b) in out.blocks.iter_mut().enumerate() {
        if !ModelConfig::is_moe_layer(i, period) {
            continue;
        }
        let FeedForward::Dense(ffn) = &b.ffn else {
            return Err(Error::arg(format!("layer {i} is already routed")));
        };
        let ensemble = clone_experts(ffn, experts)?;
        let router = Router::random(d, experts, router_std, rng)?;
        b.ffn = FeedForward::Sparse(MoeLayer::new(router, ensemble, k)?);
    }
    out.config.experts = experts;
    out.config.top_k = k;
    out.config.moe_period = period;
    out.config.router_init_std = router_std;
    Ok(out)
}
