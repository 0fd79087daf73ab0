//! End-to-end run: corpus, optional augmentation, both training stages and
//! evaluation. Shared by the command line and the acceptance suite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_split, AugmentConfig, AugmentReport};
use crate::data::{build_corpus, Corpus, CorpusConfig, SplitData, Task, Tokenizer};
use crate::metrics::{evaluate, Evaluation};
use crate::model::{ModelConfig, VisionLanguageModel};
use crate::training::{train_stage1, train_stage2, Dataset, StepLog, TrainConfig, TrainState};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub corpus: CorpusConfig,
    /// Augmentation of the training split; `None` trains on the raw corpus.
    pub augment: Option<AugmentConfig>,
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    /// Evaluate the stage-1 model as well as the final one.
    pub eval_stage1: bool,
    /// Cap on evaluated test records per task.
    pub eval_limit: Option<usize>,
}

impl PipelineConfig {
    /// Same seed for every stage.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        if let Some(a) = &mut self.augment {
            a.seed = seed;
        }
        self.stage1.seed = seed;
        self.stage2.seed = seed;
        self
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            augment: Some(AugmentConfig::default()),
            model: ModelConfig::default(),
            stage1: TrainConfig::default(),
            stage2: TrainConfig {
                stage: 2,
                ..TrainConfig::default()
            },
            eval_stage1: false,
            eval_limit: None,
        }
    }
}

pub struct PipelineRun {
    pub corpus: Corpus,
    pub augment: Option<AugmentReport>,
    pub stage1: TrainState<f64>,
    pub stage2: TrainState<f64>,
    pub stage1_eval: Option<Evaluation>,
    pub eval: Evaluation,
}

/// Appends `extra` to `base`; records keep pointing at their images by id.
pub fn extend_split(base: &mut SplitData, extra: SplitData) {
    base.samples.extend(extra.samples);
    base.records.extend(extra.records);
}

pub fn run_pipeline(cfg: &PipelineConfig, on_step: &mut dyn FnMut(&StepLog)) -> Result<PipelineRun> {
    let tok = Tokenizer::standard();
    let corpus = build_corpus(&cfg.corpus)?;
    let mut train = corpus.train.clone();
    let augment = match &cfg.augment {
        Some(a) => {
            let (extra, report) = augment_split(&corpus.train, a)?;
            extend_split(&mut train, extra);
            Some(report)
        }
        None => None,
    };
    let data = Dataset::<f64>::from_split(&train, &tok, &cfg.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage1.seed);
    let model = VisionLanguageModel::new(cfg.model.clone(), &mut rng)?;
    let stage1 = train_stage1(model, &data, &cfg.stage1, on_step)?;
    let stage1_eval = if cfg.eval_stage1 {
        Some(evaluate(&stage1.model, &corpus.test, &tok, &Task::ALL, cfg.eval_limit)?)
    } else {
        None
    };
    let stage2 = train_stage2(stage1.model.clone(), &data, &cfg.stage2, on_step)?;
    let eval = evaluate(&stage2.model, &corpus.test, &tok, &Task::ALL, cfg.eval_limit)?;
    Ok(PipelineRun {
        corpus,
        augment,
        stage1,
        stage2,
        stage1_eval,
        eval,
    })
}
