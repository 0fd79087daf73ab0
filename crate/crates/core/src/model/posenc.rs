use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Learned positional vectors laid out on the `g×g` patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PosEncodingGrid<S> {
    pub grid: Tensor<S>,
}

impl<S: Scalar> PosEncodingGrid<S> {
    pub fn new(grid: Tensor<S>) -> Result<Self> {
        match grid.shape() {
            [a, b, _] if a == b => Ok(Self { grid }),
            s => Err(Error::shape(format!("positional grid must be g×g×C, got {s:?}"))),
        }
    }

    pub fn side(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[2]
    }

    /// Resamples onto a `side×side` grid with channel-wise bilinear
    /// interpolation; corner samples coincide with the source corners.
    pub fn interpolate(&self, side: usize) -> Result<Self> {
        let g1 = self.side();
        if g1 < 2 {
            return Err(Error::arg(format!("source grid side {g1} < 2")));
        }
        if side < 2 {
            return Err(Error::arg(format!("target grid side {side} < 2")));
        }
        if side == g1 {
            return Ok(self.clone());
        }
        let c = self.channels();
        let src = self.grid.data();
        let step = S::lit((g1 - 1) as f64) / S::lit((side - 1) as f64);
        let locate = |i: usize| -> (usize, usize, S) {
            let u = S::lit(i as f64) * step;
            let lo = u.floor().to_usize().unwrap_or(0).min(g1 - 1);
            let hi = (lo + 1).min(g1 - 1);
            (lo, hi, u - S::lit(lo as f64))
        };
        let mut out = vec![S::zero(); side * side * c];
        for i in 0..side {
            let (r0, r1, fr) = locate(i);
            for j in 0..side {
                let (c0, c1, fc) = locate(j);
                let at = |r: usize, col: usize, ch: usize| src[(r * g1 + col) * c + ch];
                for ch in 0..c {
                    let top = at(r0, c0, ch) * (S::one() - fc) + at(r0, c1, ch) * fc;
                    let bottom = at(r1, c0, ch) * (S::one() - fc) + at(r1, c1, ch) * fc;
                    out[(i * side + j) * c + ch] = top * (S::one() - fr) + bottom * fr;
                }
            }
        }
        let mut grid = Tensor::new(vec![side, side, c], out)?;
        grid.set_requires_grad(self.grid.requires_grad());
        Ok(Self { grid })
    }
}
