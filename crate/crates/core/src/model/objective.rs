use super::sequence::Sequence;
use super::vlm::VisionLanguageModel;
use crate::error::{Error, Result};
use crate::moe::{load_balance_loss_on, LoadAccumulator, LoadBalanceStats};
use crate::scalar::Scalar;
use crate::tensor::{cross_entropy_logits, Gradients, Tape, Tensor, Var};

fn no_support(e: Error) -> Error {
    match e {
        Error::EmptyLossSupport => Error::NoSupervisedPositions,
        other => other,
    }
}

/// Next-token cross-entropy over the answer positions of `seq`.
pub fn autoregressive_loss_on<S: Scalar>(tape: &mut Tape<S>, logits: Var, seq: &Sequence<S>) -> Result<Var> {
    tape.cross_entropy(logits, &seq.labels, &seq.loss_mask)
        .map_err(no_support)
}

pub fn autoregressive_loss<S: Scalar>(logits: &Tensor<S>, labels: &[usize], mask: &[bool]) -> Result<S> {
    cross_entropy_logits(logits, labels, mask).map_err(no_support)
}

/// `regressive + alpha · mean(aux)`, with an empty `aux` contributing 0.
pub fn total_loss<S: Scalar>(regressive: S, aux: &[S], alpha: S) -> S {
    if aux.is_empty() {
        return regressive;
    }
    let mean = aux.iter().copied().sum::<S>() / S::lit(aux.len() as f64);
    regressive + alpha * mean
}

/// Loss breakdown of one batch.
#[derive(Clone, Debug)]
pub struct BatchLoss<S> {
    /// Token-weighted mean cross-entropy over all supervised positions.
    pub regressive: S,
    /// Load-balancing loss of each MoE layer over all batch tokens.
    pub aux: Vec<S>,
    pub total: S,
    pub stats: Vec<LoadBalanceStats<S>>,
}

struct Pending<S> {
    tape: Tape<S>,
    ce: Var,
    supervised: usize,
    probs: Vec<Var>,
}

fn run<S: Scalar>(
    model: &VisionLanguageModel<S>,
    batch: &[&Sequence<S>],
    alpha: S,
    want_grads: bool,
) -> Result<(BatchLoss<S>, Vec<Gradients<S>>)> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let layers = model.moe_layers().len();
    let experts = model.config.experts;
    let mut accs: Vec<LoadAccumulator<S>> = (0..layers).map(|_| LoadAccumulator::new(experts)).collect();
    let mut pending = Vec::with_capacity(batch.len());
    let mut supervised_total = 0usize;
    for seq in batch {
        let mut tape = Tape::new();
        let out = model.forward_on(&mut tape, &seq.image, &seq.tokens)?;
        let ce = autoregressive_loss_on(&mut tape, out.logits, seq)?;
        let supervised = seq.supervised();
        supervised_total += supervised;
        for (acc, m) in accs.iter_mut().zip(&out.moe) {
            acc.merge(&m.decision.accumulator());
        }
        pending.push(Pending {
            tape,
            ce,
            supervised,
            probs: out.moe.iter().map(|m| m.probs).collect(),
        });
    }
    let stats = accs.iter().map(|a| a.finish()).collect::<Result<Vec<_>>>()?;
    let aux: Vec<S> = stats.iter().map(|s| s.loss()).collect();
    let mut regressive = S::zero();
    let mut grads = Vec::new();
    let per_layer = if layers > 0 { alpha / S::lit(layers as f64) } else { S::zero() };
    for mut p in pending {
        let w = S::lit(p.supervised as f64 / supervised_total as f64);
        regressive += w * p.tape.data(p.ce)[0];
        if !want_grads {
            continue;
        }
        let mut obj = p.tape.scale(p.ce, w)?;
        if layers > 0 && alpha != S::zero() {
            for (l, probs) in p.probs.iter().enumerate() {
                // This sample's share of the batch-level G for layer l.
                let share = S::lit(p.tape.shape(*probs)[0] as f64 / stats[l].tokens as f64);
                let lb = load_balance_loss_on(&mut p.tape, *probs, &stats[l].fraction)?;
                let lb = p.tape.scale(lb, share * per_layer)?;
                obj = p.tape.add(obj, lb)?;
            }
        }
        grads.push(p.tape.backward(obj)?);
    }
    let total = total_loss(regressive, &aux, alpha);
    Ok((
        BatchLoss {
            regressive,
            aux,
            total,
            stats,
        },
        grads,
    ))
}

/// Batch loss without gradients.
pub fn batch_loss<S: Scalar>(model: &VisionLanguageModel<S>, batch: &[&Sequence<S>], alpha: S) -> Result<BatchLoss<S>> {
    Ok(run(model, batch, alpha, false)?.0)
}

/// Batch loss whose gradients are accumulated into the parameters' grad
/// buffers. Routing statistics (and hence the constant `F`) are computed over
/// all tokens of the batch before any backward pass.
pub fn batch_loss_and_grads<S: Scalar>(
    model: &mut VisionLanguageModel<S>,
    batch: &[&Sequence<S>],
    alpha: S,
) -> Result<BatchLoss<S>> {
    let (loss, grads) = run(model, batch, alpha, true)?;
    for (name, t) in model.params_mut() {
        for g in &grads {
            if let Some(v) = g.for_param(t) {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(name));
                }
                t.accumulate_grad(v);
            }
        }
    }
    Ok(loss)
}
