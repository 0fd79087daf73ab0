use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Low-rank additive update `scale · x·A·B` on a frozen `D×D` projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<S> {
    pub a: Tensor<S>,
    pub b: Tensor<S>,
    pub scale: S,
}

impl<S: Scalar> LoraAdapter<S> {
    /// `A` Gaussian with std `1/sqrt(D)`, `B` zero, so the adapter starts as
    /// an exact identity extension of the base projection.
    pub fn new<R: Rng>(hidden: usize, rank: usize, scale: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank >= hidden {
            return Err(Error::arg(format!(
                "LoRA rank {rank} must satisfy 1 <= rank < D = {hidden}"
            )));
        }
        let n = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).expect("valid std");
        Ok(Self {
            a: Tensor::from_fn(&[hidden, rank], |_| S::lit(n.sample(rng))).trainable(),
            b: Tensor::zeros(&[rank, hidden]).trainable(),
            scale: S::lit(scale),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    /// `base + scale · x·A·B`
    pub fn apply_on(&self, tape: &mut Tape<S>, x: Var, base: Var) -> Result<Var> {
        let a = tape.param(&self.a);
        let b = tape.param(&self.b);
        let xa = tape.matmul(x, a)?;
        let xab = tape.matmul(xa, b)?;
        let upd = tape.scale(xab, self.scale)?;
        tape.add(base, upd)
    }
}
