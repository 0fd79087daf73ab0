//! Tokenised examples ready for the decoder.

use crate::data::{Granularity, SplitData, Task, Tokenizer};
use crate::model::{ModelConfig, Sequence};
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// Index into [`Dataset::images`].
    pub image: usize,
    /// Index of the source record in the split.
    pub record: usize,
    pub tokens: Vec<usize>,
    pub answer_start: usize,
    pub task: Task,
    pub granularity: Granularity,
}

/// Every record of a split encoded as `BOS instruction SEP target EOS`.
#[derive(Clone, Debug)]
pub struct Dataset<S> {
    pub images: Vec<Tensor<S>>,
    pub examples: Vec<Example>,
    pub visual: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn from_split(data: &SplitData, tok: &Tokenizer, cfg: &ModelConfig) -> Result<Self> {
        if data.samples.iter().any(|s| s.image.width != cfg.image_size || s.image.height != cfg.image_size) {
            return Err(Error::Config(format!("images do not match image_size {}", cfg.image_size)));
        }
        let index = data.image_index();
        let images = data.samples.iter().map(|s| s.image.to_tensor()).collect();
        let mut examples = Vec::with_capacity(data.records.len());
        for (i, r) in data.records.iter().enumerate() {
            let image = *index
                .get(r.image_id.as_str())
                .ok_or_else(|| Error::Parse(format!("record {i} names unknown image {}", r.image_id)))?;
            let (tokens, answer_start) = tok.encode_pair(&r.instruction, &r.target)?;
            if tokens.len() > cfg.max_text_len {
                return Err(Error::Config(format!(
                    "record {i} needs {} text tokens, max_text_len is {}",
                    tokens.len(),
                    cfg.max_text_len
                )));
            }
            examples.push(Example {
                image,
                record: i,
                tokens,
                answer_start,
                task: r.task,
                granularity: r.granularity,
            });
        }
        Ok(Self {
            images,
            examples,
            visual: cfg.visual_tokens(),
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn sequence(&self, i: usize) -> Result<Sequence<S>> {
        let e = &self.examples[i];
        Sequence::new(self.images[e.image].clone(), e.tokens.clone(), e.answer_start, self.visual)
    }

    /// Prompt tokens (`BOS instruction SEP`) of example `i`.
    pub fn prompt(&self, i: usize) -> &[usize] {
        let e = &self.examples[i];
        &e.tokens[..e.answer_start]
    }
}
