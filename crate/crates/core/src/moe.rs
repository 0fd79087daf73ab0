//! Token-level routing, top-k expert dispatch and the load-balancing
//! auxiliary loss.
//!
//! A router maps each token to a softmax distribution over `E` experts. The
//! token is then processed by its `k` most probable experts and their
//! outputs are summed, each weighted by the raw (not renormalised) routing
//! probability. Experts outside a token's top-k receive neither forward
//! contribution nor gradient from that token.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{argmax, topk_indices, Tape, Tensor, Var};

/// Linear routing map `W ∈ R^{D×E}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Router<S> {
    pub weight: Tensor<S>,
}

impl<S: Scalar> Router<S> {
    pub fn new(weight: Tensor<S>) -> Result<Self> {
        let (_, e) = weight.dims2()?;
        if e == 0 {
            return Err(Error::arg("router needs at least one expert"));
        }
        Ok(Self { weight })
    }

    /// Gaussian initialisation, mean 0.
    pub fn random<R: Rng>(hidden: usize, experts: usize, std: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::arg(e.to_string()))?;
        Self::new(Tensor::from_fn(&[hidden, experts], |_| S::lit(normal.sample(rng))).trainable())
    }

    pub fn hidden(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn experts(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Two-layer GELU feed-forward block: `gelu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertFfn<S> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> ExpertFfn<S> {
    pub fn new(w1: Tensor<S>, b1: Tensor<S>, w2: Tensor<S>, b2: Tensor<S>) -> Result<Self> {
        let (d, h) = w1.dims2()?;
        let (h2, d2) = w2.dims2()?;
        if h != h2 || d != d2 || b1.shape() != [h] || b2.shape() != [d] {
            return Err(Error::shape(format!(
                "ffn shapes W1 {:?} b1 {:?} W2 {:?} b2 {:?}",
                w1.shape(),
                b1.shape(),
                w2.shape(),
                b2.shape()
            )));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    /// Fan-in scaled Gaussian weights; `out_scale` shrinks the second layer
    /// (residual-branch scaling).
    pub fn random<R: Rng>(hidden: usize, width: usize, out_scale: f64, rng: &mut R) -> Self {
        let n1 = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).expect("valid std");
        let n2 = Normal::new(0.0, out_scale / (width as f64).sqrt()).expect("valid std");
        Self {
            w1: Tensor::from_fn(&[hidden, width], |_| S::lit(n1.sample(rng))).trainable(),
            b1: Tensor::zeros(&[width]).trainable(),
            w2: Tensor::from_fn(&[width, hidden], |_| S::lit(n2.sample(rng))).trainable(),
            b2: Tensor::zeros(&[hidden]).trainable(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn forward_on(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let w1 = tape.param(&self.w1);
        let b1 = tape.param(&self.b1);
        let w2 = tape.param(&self.w2);
        let b2 = tape.param(&self.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h)?;
        let o = tape.matmul(h, w2)?;
        tape.add_row(o, b2)
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = self.forward_on(&mut tape, v)?;
        Ok(tape.value(out))
    }

    pub fn params(&self) -> [&Tensor<S>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<S>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// `E` experts of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertEnsemble<S> {
    experts: Vec<ExpertFfn<S>>,
}

impl<S: Scalar> ExpertEnsemble<S> {
    pub fn new(experts: Vec<ExpertFfn<S>>) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::arg("ensemble needs at least one expert"))?;
        let (d, h) = (first.hidden(), first.width());
        if experts.iter().any(|e| e.hidden() != d || e.width() != h) {
            return Err(Error::shape("experts differ in shape"));
        }
        Ok(Self { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn experts(&self) -> &[ExpertFfn<S>] {
        &self.experts
    }

    pub fn experts_mut(&mut self) -> &mut [ExpertFfn<S>] {
        &mut self.experts
    }
}

/// Deep, independently trainable copies of `ffn`.
pub fn clone_experts<S: Scalar>(ffn: &ExpertFfn<S>, count: usize) -> Result<ExpertEnsemble<S>> {
    if count == 0 {
        return Err(Error::arg("cannot clone into zero experts"));
    }
    ExpertEnsemble::new(vec![ffn.clone(); count])
}

/// Per-expert load statistics over a batch of `tokens` routed tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadBalanceStats<S> {
    /// Fraction of tokens whose most probable expert is `i`.
    pub fraction: Vec<S>,
    /// Mean routing probability of expert `i`.
    pub mean_prob: Vec<S>,
    pub tokens: usize,
}

impl<S: Scalar> LoadBalanceStats<S> {
    pub fn experts(&self) -> usize {
        self.fraction.len()
    }

    /// `E · Σ_i F_i · G_i`.
    pub fn loss(&self) -> S {
        let e = S::lit(self.experts() as f64);
        e * self
            .fraction
            .iter()
            .zip(&self.mean_prob)
            .map(|(f, g)| *f * *g)
            .sum::<S>()
    }

    /// Shannon entropy (nats) of the assignment fractions.
    pub fn utilization_entropy(&self) -> S {
        -self
            .fraction
            .iter()
            .filter(|f| **f > S::zero())
            .map(|f| *f * f.ln())
            .sum::<S>()
    }
}

/// Running sums behind [`LoadBalanceStats`]; merge several and finish once.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadAccumulator<S> {
    pub counts: Vec<usize>,
    pub prob_sums: Vec<S>,
    pub tokens: usize,
}

impl<S: Scalar> LoadAccumulator<S> {
    pub fn new(experts: usize) -> Self {
        Self {
            counts: vec![0; experts],
            prob_sums: vec![S::zero(); experts],
            tokens: 0,
        }
    }

    /// Adds the rows of a `K×E` probability table.
    pub fn add_probs(&mut self, probs: &[S], experts: usize) {
        for row in probs.chunks(experts) {
            self.counts[argmax(row)] += 1;
            for (s, p) in self.prob_sums.iter_mut().zip(row) {
                *s += *p;
            }
            self.tokens += 1;
        }
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.prob_sums.iter_mut().zip(&other.prob_sums) {
            *a += *b;
        }
        self.tokens += other.tokens;
    }

    pub fn finish(&self) -> Result<LoadBalanceStats<S>> {
        if self.tokens == 0 {
            return Err(Error::EmptyTokenBatch);
        }
        let k = S::lit(self.tokens as f64);
        Ok(LoadBalanceStats {
            fraction: self.counts.iter().map(|c| S::lit(*c as f64) / k).collect(),
            mean_prob: self.prob_sums.iter().map(|s| *s / k).collect(),
            tokens: self.tokens,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision<S> {
    /// `K×E`, rows sum to one.
    pub probs: Tensor<S>,
    pub topk_idx: Vec<Vec<usize>>,
    /// Routing probabilities of the selected experts, not renormalised.
    pub topk_w: Vec<Vec<S>>,
    pub stats: LoadBalanceStats<S>,
}

impl<S: Scalar> RoutingDecision<S> {
    pub fn accumulator(&self) -> LoadAccumulator<S> {
        let mut acc = LoadAccumulator::new(self.stats.experts());
        acc.add_probs(self.probs.data(), self.stats.experts());
        acc
    }

    /// Smallest gap between the k-th and (k+1)-th routing logits over all
    /// tokens, and between the first and second. A finite-difference step
    /// smaller than this cannot change the discrete routing.
    pub fn tie_margin(&self) -> S {
        let e = self.stats.experts();
        let mut margin = S::infinity();
        for row in self.probs.data().chunks(e) {
            let mut logp: Vec<S> = row.iter().map(|p| p.ln()).collect();
            logp.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
            if e > 1 {
                margin = margin.min(logp[0] - logp[1]);
                let k = self.topk_idx[0].len();
                if k < e {
                    margin = margin.min(logp[k - 1] - logp[k]);
                }
            }
        }
        margin
    }
}

/// Tape-level routing: returns the probability node and the discrete
/// decision derived from its values.
pub fn route_on<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    router: &Router<S>,
    k: usize,
) -> Result<(Var, RoutingDecision<S>)> {
    let (tokens, d) = tape.dims2(x)?;
    if tokens == 0 {
        return Err(Error::EmptyTokenBatch);
    }
    if d != router.hidden() {
        return Err(Error::shape(format!(
            "route: token width {d}, router expects {}",
            router.hidden()
        )));
    }
    let e = router.experts();
    if k == 0 || k > e {
        return Err(Error::arg(format!("top-k with k={k} over {e} experts")));
    }
    let w = tape.param(&router.weight);
    let logits = tape.matmul(x, w)?;
    let probs = tape.softmax(logits, 1)?;
    let values = tape.data(probs).to_vec();
    let mut topk_idx = Vec::with_capacity(tokens);
    let mut topk_w = Vec::with_capacity(tokens);
    for row in values.chunks(e) {
        let idx = topk_indices(row, k)?;
        topk_w.push(idx.iter().map(|i| row[*i]).collect());
        topk_idx.push(idx);
    }
    let mut acc = LoadAccumulator::new(e);
    acc.add_probs(&values, e);
    let decision = RoutingDecision {
        probs: Tensor::new(vec![tokens, e], values)?,
        topk_idx,
        topk_w,
        stats: acc.finish()?,
    };
    Ok((probs, decision))
}

/// Tape-level sparse mixture: returns the `K×D` output, the probability node
/// (for the auxiliary loss) and the routing decision.
pub fn moe_forward_on<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    router: &Router<S>,
    ensemble: &ExpertEnsemble<S>,
    k: usize,
) -> Result<(Var, Var, RoutingDecision<S>)> {
    if router.experts() != ensemble.len() {
        return Err(Error::shape(format!(
            "router has {} columns for {} experts",
            router.experts(),
            ensemble.len()
        )));
    }
    let (probs, decision) = route_on(tape, x, router, k)?;
    let tokens = decision.topk_idx.len();
    let e = ensemble.len();
    let mut pieces = Vec::with_capacity(e);
    let mut dest = Vec::with_capacity(tokens * k);
    for (ei, expert) in ensemble.experts().iter().enumerate() {
        let rows: Vec<usize> = (0..tokens)
            .filter(|t| decision.topk_idx[*t].contains(&ei))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let xe = tape.gather_rows(x, &rows)?;
        let ye = expert.forward_on(tape, xe)?;
        let flat: Vec<usize> = rows.iter().map(|t| t * e + ei).collect();
        let we = tape.pick(probs, &flat)?;
        pieces.push(tape.scale_rows(ye, we)?);
        dest.extend_from_slice(&rows);
    }
    let stacked = if pieces.len() == 1 {
        pieces[0]
    } else {
        tape.concat(&pieces, 0)?
    };
    let out = tape.scatter_rows(stacked, &dest, tokens)?;
    Ok((out, probs, decision))
}

/// Differentiable `E · Σ_i F_i · G_i` where `G` is the column mean of
/// `probs` and `F` enters as a constant.
pub fn load_balance_loss_on<S: Scalar>(
    tape: &mut Tape<S>,
    probs: Var,
    fraction: &[S],
) -> Result<Var> {
    let g = tape.mean_rows(probs)?;
    let f = tape.constant(Tensor::from_vec(fraction.to_vec()));
    let d = tape.dot(g, f)?;
    tape.scale(d, S::lit(fraction.len() as f64))
}

pub fn route<S: Scalar>(x: &Tensor<S>, router: &Router<S>, k: usize) -> Result<RoutingDecision<S>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    Ok(route_on(&mut tape, v, router, k)?.1)
}

pub fn moe_forward<S: Scalar>(
    x: &Tensor<S>,
    router: &Router<S>,
    ensemble: &ExpertEnsemble<S>,
    k: usize,
) -> Result<(Tensor<S>, RoutingDecision<S>)> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let (out, _, decision) = moe_forward_on(&mut tape, v, router, ensemble, k)?;
    Ok((tape.value(out), decision))
}

/// Load-balancing loss value for a set of statistics.
pub fn load_balance_loss<S: Scalar>(stats: &LoadBalanceStats<S>) -> Result<S> {
    let e = stats.experts();
    if e == 0 || stats.mean_prob.len() != e {
        return Err(Error::arg("malformed load statistics"));
    }
    Ok(stats.loss())
}

/// A routed feed-forward layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer<S> {
    pub router: Router<S>,
    pub ensemble: ExpertEnsemble<S>,
    pub top_k: usize,
}

impl<S: Scalar> MoeLayer<S> {
    pub fn new(router: Router<S>, ensemble: ExpertEnsemble<S>, top_k: usize) -> Result<Self> {
        if router.experts() != ensemble.len() {
            return Err(Error::shape("router/ensemble expert count mismatch"));
        }
        if top_k == 0 || top_k > ensemble.len() {
            return Err(Error::arg(format!(
                "top-k {top_k} with {} experts",
                ensemble.len()
            )));
        }
        Ok(Self {
            router,
            ensemble,
            top_k,
        })
    }

    pub fn forward_on(&self, tape: &mut Tape<S>, x: Var) -> Result<(Var, Var, RoutingDecision<S>)> {
        moe_forward_on(tape, x, &self.router, &self.ensemble, self.top_k)
    }
}
