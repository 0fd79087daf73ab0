//! Generation-based evaluation of a trained model on one split.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::exact::{answers_match, Normalizer};
use super::grounding::{grounding_acc, iou};
use super::text::{bleu4, rouge_l, ROUGE_BETA};
use crate::data::{parse_bbox, BBox, SplitData, Task, Tokenizer, EOS};
use crate::model::VisionLanguageModel;
use crate::training::Dataset;
use crate::{Error, Result, Scalar};

/// Thresholds at which grounding accuracy is reported.
pub const IOU_THRESHOLDS: [f64; 2] = [0.5, 0.7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub metric: String,
    /// Fraction in [0, 1].
    pub value: f64,
    pub count: usize,
    /// Where the per-record breakdown was written, if it was.
    pub details: Option<String>,
}

impl EvalReport {
    pub fn percent(&self) -> f64 {
        self.value * 100.0
    }
}

/// One evaluated record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordResult {
    pub record: usize,
    pub image_id: String,
    pub task: Task,
    pub prediction: String,
    pub target: String,
    /// Exact-match verdict, IoU, or BLEU-4 depending on the task.
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub reports: Vec<EvalReport>,
    pub records: Vec<RecordResult>,
}

impl Evaluation {
    pub fn get(&self, task: Task, metric: &str) -> Option<f64> {
        self.reports.iter().find(|r| r.task == task && r.metric == metric).map(|r| r.value)
    }

    /// Mean over tasks of each task's headline metric: BLEU-4 for IC,
    /// grounding accuracy at 0.5 for VG, accuracy otherwise.
    pub fn mean_score(&self) -> f64 {
        let heads: Vec<f64> = self
            .reports
            .iter()
            .filter(|r| matches!(r.metric.as_str(), "bleu4" | "acc" | "acc@0.5"))
            .map(|r| r.value)
            .collect();
        if heads.is_empty() {
            0.0
        } else {
            heads.iter().sum::<f64>() / heads.len() as f64
        }
    }

    /// `task,metric,count,value` with the value as a percentage to two decimals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,metric,count,value\n");
        for r in &self.reports {
            s.push_str(&format!("{},{},{},{:.2}\n", r.task, r.metric, r.count, r.percent()));
        }
        s
    }

    /// Writes `summary.csv` and `records.jsonl` under `dir`, recording the
    /// detail path in every report.
    pub fn write(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let details = dir.join("records.jsonl");
        crate::data::write_jsonl(&details, &self.records)?;
        for r in &mut self.reports {
            r.details = Some(details.display().to_string());
        }
        let summary = dir.join("summary.csv");
        std::fs::write(&summary, self.to_csv()).map_err(|e| Error::io(summary, e))?;
        Ok(())
    }
}

/// Longest target of each task in tokens, plus one for `EOS`.
fn token_budgets<S>(data: &Dataset<S>) -> BTreeMap<Task, usize> {
    let mut out = BTreeMap::new();
    for e in &data.examples {
        let n = e.tokens.len() - e.answer_start;
        let b = out.entry(e.task).or_insert(0);
        *b = (*b).max(n);
    }
    out
}

fn words(s: &str) -> Vec<String> {
    Tokenizer::split(s)
}

/// Greedily decodes every record of `split` whose task is in `tasks` and
/// scores the answers.
pub fn evaluate<S: Scalar>(
    model: &VisionLanguageModel<S>,
    split: &SplitData,
    tok: &Tokenizer,
    tasks: &[Task],
    limit: Option<usize>,
) -> Result<Evaluation> {
    let data = Dataset::<S>::from_split(split, tok, &model.config)?;
    let budgets = token_budgets(&data);
    let size = model.config.image_size;
    let mut per_task: BTreeMap<Task, usize> = BTreeMap::new();
    let mut records = Vec::new();
    for (i, e) in data.examples.iter().enumerate() {
        if !tasks.contains(&e.task) {
            continue;
        }
        let seen = per_task.entry(e.task).or_insert(0);
        if limit.is_some_and(|l| *seen >= l) {
            continue;
        }
        *seen += 1;
        let rec = &split.records[e.record];
        let out = model.generate(&data.images[e.image], data.prompt(i), EOS, budgets[&e.task])?;
        let prediction = tok.decode(&out);
        let (score, rouge) = match e.task {
            Task::IC => {
                let cand = words(&prediction);
                let reference = words(&rec.target);
                let b = if cand.is_empty() { 0.0 } else { bleu4(&cand, &[reference.clone()])? };
                let r = if cand.is_empty() { 0.0 } else { rouge_l(&cand, &reference, ROUGE_BETA) };
                (b, Some(r))
            }
            Task::VG => {
                let gt = ground_truth_box(rec.bbox.map(BBox::from), i)?;
                let pred = parse_bbox(&prediction, size).ok();
                (pred.map_or(0.0, |p| iou(&p, &gt)), None)
            }
            Task::OC => (answers_match(&prediction, &rec.target, Normalizer::Count) as u8 as f64, None),
            Task::VQA | Task::SC => (answers_match(&prediction, &rec.target, Normalizer::Text) as u8 as f64, None),
        };
        records.push(RecordResult {
            record: e.record,
            image_id: rec.image_id.clone(),
            task: e.task,
            prediction,
            target: rec.target.clone(),
            score,
            rouge_l: rouge,
        });
    }
    let mut reports = Vec::new();
    for task in Task::ALL {
        let rs: Vec<&RecordResult> = records.iter().filter(|r| r.task == task).collect();
        if rs.is_empty() {
            continue;
        }
        let n = rs.len();
        let mean = |f: &dyn Fn(&RecordResult) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n as f64;
        let mut push = |metric: &str, value: f64| {
            reports.push(EvalReport {
                task,
                metric: metric.into(),
                value,
                count: n,
                details: None,
            })
        };
        match task {
            Task::IC => {
                push("bleu4", mean(&|r| r.score));
                push("rouge_l", mean(&|r| r.rouge_l.unwrap_or(0.0)));
            }
            Task::VG => {
                let mut preds = Vec::with_capacity(n);
                let mut gts = Vec::with_capacity(n);
                for r in &rs {
                    gts.push(ground_truth_box(split.records[r.record].bbox.map(BBox::from), r.record)?);
                    preds.push(parse_bbox(&r.prediction, size).ok());
                }
                for t in IOU_THRESHOLDS {
                    push(&format!("acc@{t}"), grounding_acc(&preds, &gts, t)?);
                }
            }
            _ => push("acc", mean(&|r| r.score)),
        }
    }
    if reports.is_empty() {
        return Err(Error::arg("no records to evaluate for the requested tasks"));
    }
    Ok(Evaluation { reports, records })
}

fn ground_truth_box(b: Option<BBox>, i: usize) -> Result<BBox> {
    b.ok_or_else(|| Error::Parse(format!("grounding record {i} has no box")))
}
