//! Task metrics and evaluation reports.

mod eval;
mod exact;
mod grounding;
mod routing;
mod text;

pub use eval::{evaluate, EvalReport, Evaluation, RecordResult, IOU_THRESHOLDS};
pub use exact::{answers_match, exact_match, normalize_text, Normalizer};
pub use grounding::{grounding_acc, iou};
pub use routing::{collect_routing, routing_report, utilization_entropy, GranularityLoad, RoutingReport};
pub use text::{bleu4, lcs_len, rouge_l, BLEU_EPSILON, ROUGE_BETA};
