use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Splits an `H×W×3` image into row-major `p×p` patches, each flattened in
/// `(row, col, channel)` order.
pub fn patchify<S: Scalar>(image: &Tensor<S>, patch: usize) -> Result<Tensor<S>> {
    let (h, w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::shape(format!("image must be H×W×3, got {s:?}"))),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!("{h}×{w} image not divisible into {patch}-pixel patches")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = patch * patch * 3;
    let px = image.data();
    let mut out = Vec::with_capacity(gh * gw * dim);
    for pr in 0..gh {
        for pc in 0..gw {
            for dy in 0..patch {
                let start = ((pr * patch + dy) * w + pc * patch) * 3;
                out.extend_from_slice(&px[start..start + patch * 3]);
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], out)
}

/// One training or evaluation example: an image and the text tokens
/// `BOS instruction SEP answer EOS`, with next-token labels over the full
/// visual + text sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence<S> {
    pub image: Tensor<S>,
    pub tokens: Vec<usize>,
    /// Label of position `t` is the token at position `t+1`.
    pub labels: Vec<usize>,
    /// True exactly where the label is an answer token (including EOS).
    pub loss_mask: Vec<bool>,
    pub visual: usize,
}

impl<S: Scalar> Sequence<S> {
    /// `answer_start` indexes the first answer token within `tokens`.
    pub fn new(image: Tensor<S>, tokens: Vec<usize>, answer_start: usize, visual: usize) -> Result<Self> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::arg("empty token sequence"));
        }
        if answer_start == 0 || answer_start > n {
            return Err(Error::arg(format!("answer start {answer_start} outside 1..={n}")));
        }
        let k = visual + n;
        let mut labels = vec![0; k];
        let mut loss_mask = vec![false; k];
        for t in 0..k {
            let next = t + 1;
            if next >= visual && next < k {
                let j = next - visual;
                labels[t] = tokens[j];
                loss_mask[t] = j >= answer_start;
            }
        }
        Ok(Self {
            image,
            tokens,
            labels,
            loss_mask,
            visual,
        })
    }

    pub fn len(&self) -> usize {
        self.visual + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn supervised(&self) -> usize {
        self.loss_mask.iter().filter(|m| **m).count()
    }
}
