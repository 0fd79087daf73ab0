//! Expert-utilisation reports, overall and split by record granularity.

use serde::{Deserialize, Serialize};

use crate::data::Granularity;
use crate::model::VisionLanguageModel;
use crate::moe::RoutingDecision;
use crate::tensor::argmax;
use crate::training::{Dataset, LayerLoad, LoadTally};
use crate::{Error, Result, Scalar};

/// Entropy (nats) of a distribution; zero entries contribute nothing.
pub fn utilization_entropy(f: &[f64]) -> f64 {
    -f.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GranularityLoad {
    pub layer: usize,
    pub granularity: Granularity,
    /// Share of this granularity's tokens whose top expert is each expert.
    pub fraction: Vec<f64>,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub layers: Vec<LayerLoad>,
    pub by_granularity: Vec<GranularityLoad>,
}

impl RoutingReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,scope,tokens,fraction,mean_prob,entropy,load_loss\n");
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
        for l in &self.layers {
            s.push_str(&format!(
                "{},all,{},{},{},{:.4},{:.4}\n",
                l.layer,
                l.tokens,
                fmt(&l.fraction),
                fmt(&l.mean_prob),
                l.entropy,
                l.loss
            ));
        }
        for g in &self.by_granularity {
            s.push_str(&format!(
                "{},{},{},{},,{:.4},\n",
                g.layer,
                g.granularity.name(),
                g.tokens,
                fmt(&g.fraction),
                utilization_entropy(&g.fraction)
            ));
        }
        s
    }
}

/// Builds a report from per-example routing decisions tagged with the
/// granularity of their record.
pub fn routing_report<S: Scalar>(
    moe_layers: &[usize],
    experts: usize,
    history: &[(Granularity, Vec<RoutingDecision<S>>)],
) -> Result<RoutingReport> {
    if history.is_empty() {
        return Err(Error::arg("routing report needs at least one recorded step"));
    }
    let mut tally = LoadTally::new(moe_layers.to_vec(), experts);
    let grans = [Granularity::Local, Granularity::Global];
    let mut counts = vec![vec![vec![0usize; experts]; grans.len()]; moe_layers.len()];
    for (g, decisions) in history {
        let gi = grans.iter().position(|x| x == g).expect("two granularities");
        let stats: Vec<_> = decisions.iter().map(|d| d.stats.clone()).collect();
        tally.add(&stats);
        for (l, d) in decisions.iter().enumerate() {
            for row in d.probs.data().chunks(experts) {
                counts[l][gi][argmax(row)] += 1;
            }
        }
    }
    let mut by_granularity = Vec::new();
    for (l, layer) in moe_layers.iter().enumerate() {
        for (gi, g) in grans.iter().enumerate() {
            let n: usize = counts[l][gi].iter().sum();
            if n == 0 {
                continue;
            }
            by_granularity.push(GranularityLoad {
                layer: *layer,
                granularity: *g,
                fraction: counts[l][gi].iter().map(|c| *c as f64 / n as f64).collect(),
                tokens: n,
            });
        }
    }
    Ok(RoutingReport {
        layers: tally.finish(),
        by_granularity,
    })
}

/// Runs every example (or the first `limit`) through the model and reports
/// its routing.
pub fn collect_routing<S: Scalar>(
    model: &VisionLanguageModel<S>,
    data: &Dataset<S>,
    limit: Option<usize>,
) -> Result<RoutingReport> {
    if !model.is_sparse() {
        return Err(Error::arg("routing report needs a model with routed layers"));
    }
    let n = limit.unwrap_or(data.len()).min(data.len());
    let mut history = Vec::with_capacity(n);
    for i in 0..n {
        let (_, decisions) = model.forward_sequence(&data.sequence(i)?)?;
        history.push((data.examples[i].granularity, decisions));
    }
    routing_report(&model.moe_layers(), model.config.experts, &history)
}
