use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{axpy, dot, matmul_nn, matmul_nt, matmul_tn};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Gelu {
        x: Var,
        tanh: Vec<S>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedSoftmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<S>,
        support: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        width_in: usize,
        start: usize,
        width: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        idx: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Dot(Var, Var),
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Execution record for reverse-mode differentiation.
///
/// Nodes are stored in execution order, which is a topological order of the
/// graph. A tape is confined to one thread of execution.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<usize, Var>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<S: Scalar>(what: &str, v: &[S]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `tanh` through a single `exp`; several times cheaper than the libm call
/// and accurate to a few ulps of 1.
#[inline]
fn fast_tanh<S: Scalar>(u: S) -> S {
    let two = S::lit(2.0);
    S::one() - two / ((two * u).exp() + S::one())
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, what: &str, shape: Vec<usize>, value: Vec<S>, op: Op<S>, rg: bool) -> Result<Var> {
        check_finite(what, &value)?;
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<S> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> Tensor<S> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape consistent")
    }

    pub fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(format!("expected a matrix, got {s:?}"))),
        }
    }

    /// Records a leaf. The tensor's `requires_grad` flag decides whether
    /// gradients flow to it.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        let data = t.into_data();
        self.nodes.push(Node {
            shape,
            value: data,
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor<S>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Enters a model parameter. Repeated calls with the same tensor return
    /// the same leaf, so gradients from every use accumulate.
    pub fn param(&mut self, t: &Tensor<S>) -> Var {
        let key = t as *const Tensor<S> as usize;
        if let Some(v) = self.params.get(&key) {
            return *v;
        }
        let mut copy = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        copy.set_requires_grad(t.requires_grad());
        let v = self.leaf(copy);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let (n2, p) = self.dims2(b)?;
        if n != n2 {
            return Err(Error::shape(format!("matmul {m}x{n} by {n2}x{p}")));
        }
        let mut out = vec![S::zero(); m * p];
        matmul_nn(self.data(a), self.data(b), &mut out, m, n, p);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", vec![m, p], out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let (p, n2) = self.dims2(b)?;
        if n != n2 {
            return Err(Error::shape(format!("matmul_nt {m}x{n} by ({p}x{n2})^T")));
        }
        let mut out = vec![S::zero(); m * p];
        matmul_nt(self.data(a), self.data(b), &mut out, m, n, p);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul_nt", vec![m, p], out, Op::MatMulNT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let src = self.data(a);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push("transpose", vec![c, r], out, Op::Transpose(a), rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x + *y).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push("add", shape, out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x - *y).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push("sub", shape, out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x * *y).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let out = self.data(a).iter().map(|x| *x * c).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, out, Op::Scale(a, c), rg)
    }

    /// Adds a length-`d` vector to every row of an `n×d` matrix.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        if self.shape(b) != [d] {
            return Err(Error::shape(format!("add_row: bias {:?} for width {d}", self.shape(b))));
        }
        let bias = self.data(b);
        let mut out = self.data(x).to_vec();
        for r in 0..n {
            for (o, bv) in out[r * d..(r + 1) * d].iter_mut().zip(bias) {
                *o += *bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push("add_row", vec![n, d], out, Op::AddRow(x, b), rg)
    }

    /// Multiplies row `i` of an `n×d` matrix by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        if self.shape(w) != [n] {
            return Err(Error::shape(format!("scale_rows: weights {:?} for {n} rows", self.shape(w))));
        }
        let wv = self.data(w);
        let mut out = self.data(x).to_vec();
        for r in 0..n {
            for o in out[r * d..(r + 1) * d].iter_mut() {
                *o *= wv[r];
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push("scale_rows", vec![n, d], out, Op::ScaleRows(x, w), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = S::lit(GELU_C);
        let k = S::lit(GELU_K);
        let half = S::lit(0.5);
        let tanh: Vec<S> = self
            .data(x)
            .iter()
            .map(|&v| fast_tanh(c * (v + k * v * v * v)))
            .collect();
        let out = self
            .data(x)
            .iter()
            .zip(&tanh)
            .map(|(&v, &t)| half * v * (S::one() + t))
            .collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push("gelu", shape, out, Op::Gelu { x, tanh }, rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        if len == 0 {
            return Err(Error::shape("softmax over an empty axis"));
        }
        let src = self.data(x);
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| src[at(j)]).fold(S::neg_infinity(), S::max);
                let mut z = S::zero();
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push("softmax", shape, out, Op::Softmax { x, outer, len, inner }, rg)
    }

    /// Row softmax over the last axis of a matrix where `mask[i*cols+j]`
    /// admits entry `j` of row `i`. Excluded entries get probability 0.
    pub fn masked_softmax(&mut self, x: Var, mask: Rc<[bool]>) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if mask.len() != rows * cols {
            return Err(Error::shape("masked_softmax: mask size"));
        }
        let src = self.data(x);
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let m = &mask[r * cols..(r + 1) * cols];
            let mx = row
                .iter()
                .zip(m)
                .filter(|(_, k)| **k)
                .map(|(v, _)| *v)
                .fold(S::neg_infinity(), S::max);
            if mx == S::neg_infinity() {
                return Err(Error::shape(format!("masked_softmax: row {r} fully masked")));
            }
            let mut z = S::zero();
            for j in 0..cols {
                if m[j] {
                    let e = (row[j] - mx).exp();
                    out[r * cols + j] = e;
                    z += e;
                }
            }
            for j in 0..cols {
                out[r * cols + j] /= z;
            }
        }
        let rg = self.rg(x);
        self.push("masked_softmax", vec![rows, cols], out, Op::MaskedSoftmax { x }, rg)
    }

    /// Normalises each row over the last axis, then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm on a scalar"))?;
        if d == 0 {
            return Err(Error::shape("layer_norm with D = 0"));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm gain/bias width"));
        }
        let rows = self.data(x).len() / d;
        let src = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let inv_d = S::one() / S::lit(d as f64);
        let mut xhat = vec![S::zero(); rows * d];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * d];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() * inv_d;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits[T×V]`, over rows where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.dims2(logits)?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::shape(format!(
                "cross_entropy: {t} rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let support = mask.iter().filter(|m| **m).count();
        if support == 0 {
            return Err(Error::EmptyLossSupport);
        }
        let src = self.data(logits);
        let mut probs = vec![S::zero(); t * v];
        let mut total = S::zero();
        for r in 0..t {
            if !mask[r] {
                continue;
            }
            if targets[r] >= v {
                return Err(Error::arg(format!("target {} >= vocab {v}", targets[r])));
            }
            let row = &src[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[r * v + j] = e;
                z += e;
            }
            for j in 0..v {
                probs[r * v + j] /= z;
            }
            total += mx + z.ln() - row[targets[r]];
        }
        let loss = total / S::lit(support as f64);
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                support,
            },
            rg,
        )
    }

    /// Gathers rows `ids` of a `V×D` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(Error::arg(format!("token id {i} >= vocabulary {v}")));
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(
            "embedding",
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape(format!("concat {base:?} with {s:?} on axis {axis}")));
            }
            widths.push(s[axis] * inner);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(*p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total / inner.max(1);
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            rg,
        )
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        if start > end || end > len {
            return Err(Error::shape(format!("slice {start}..{end} of extent {len}")));
        }
        let width_in = len * inner;
        let width = (end - start) * inner;
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * width_in + start * inner;
            out.extend_from_slice(&src[base..base + width]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let rg = self.rg(x);
        self.push(
            "slice",
            new_shape,
            out,
            Op::Slice {
                x,
                outer,
                width_in,
                start: start * inner,
                width,
            },
            rg,
        )
    }

    /// Same data under a new shape of equal size.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.data(x).len() {
            return Err(Error::shape(format!("reshape {:?} to {shape:?}", self.shape(x))));
        }
        let out = self.data(x).to_vec();
        let rg = self.rg(x);
        self.push("reshape", shape.to_vec(), out, Op::Reshape(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push("sum", vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.data(x).len();
        if n == 0 {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let s = self.data(x).iter().copied().sum::<S>() / S::lit(n as f64);
        let rg = self.rg(x);
        self.push("mean", vec![], vec![s], Op::Mean(x), rg)
    }

    /// Column means of an `n×d` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        if n == 0 {
            return Err(Error::shape("mean_rows over zero rows"));
        }
        let src = self.data(x);
        let mut out = vec![S::zero(); d];
        for r in 0..n {
            axpy(S::one(), &src[r * d..(r + 1) * d], &mut out);
        }
        let inv = S::one() / S::lit(n as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(x);
        self.push("mean_rows", vec![d], out, Op::MeanRows(x), rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::shape(format!("gather row {i} of {n}")));
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(x);
        self.push(
            "gather_rows",
            vec![idx.len(), d],
            out,
            Op::GatherRows { x, idx: idx.to_vec() },
            rg,
        )
    }

    /// Sums row `r` of `x` into row `idx[r]` of a fresh `rows×d` matrix.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        if idx.len() != n {
            return Err(Error::shape("scatter_rows: index count"));
        }
        let src = self.data(x);
        let mut out = vec![S::zero(); rows * d];
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(Error::shape(format!("scatter row {i} into {rows}")));
            }
            axpy(S::one(), &src[r * d..(r + 1) * d], &mut out[i * d..(i + 1) * d]);
        }
        let rg = self.rg(x);
        self.push(
            "scatter_rows",
            vec![rows, d],
            out,
            Op::ScatterRows { x, idx: idx.to_vec() },
            rg,
        )
    }

    /// Vector of the flat entries `idx` of `x`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            out.push(*src.get(i).ok_or_else(|| Error::shape(format!("pick {i} of {}", src.len())))?);
        }
        let rg = self.rg(x);
        self.push("pick", vec![idx.len()], out, Op::Pick { x, idx: idx.to_vec() }, rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let s = dot(self.data(a), self.data(b));
        let rg = self.rg(a) || self.rg(b);
        self.push("dot", vec![], vec![s], Op::Dot(a, b), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let ln = self.node(loss);
        if ln.value.len() != 1 || !ln.shape.is_empty() && ln.shape.iter().product::<usize>() != 1 {
            return Err(Error::shape(format!("backward from non-scalar {:?}", ln.shape)));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        if ln.requires_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.params.clone();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &dyn Fn(&mut [S])| {
            if !self.rg(v) {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![S::zero(); n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let p = self.shape(*b)[1];
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &|ga| matmul_nt(g, bv, ga, m, p, n));
                acc(*b, &|gb| matmul_tn(av, g, gb, m, n, p));
            }
            Op::MatMulNT(a, b) => {
                // c = a bᵀ: da = g b, db = gᵀ a
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let p = self.shape(*b)[0];
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &|ga| matmul_nn(g, bv, ga, m, p, n));
                acc(*b, &|gb| matmul_tn(g, av, gb, m, p, n));
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc(*a, &|ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|ga| axpy(S::one(), g, ga));
                acc(*b, &|gb| axpy(S::one(), g, gb));
            }
            Op::Sub(a, b) => {
                acc(*a, &|ga| axpy(S::one(), g, ga));
                acc(*b, &|gb| axpy(-S::one(), g, gb));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &|ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &|gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|ga| axpy(*c, g, ga)),
            Op::AddRow(x, b) => {
                let d = self.shape(*b)[0];
                acc(*x, &|gx| axpy(S::one(), g, gx));
                acc(*b, &|gb| {
                    for row in g.chunks(d) {
                        axpy(S::one(), row, gb);
                    }
                });
            }
            Op::ScaleRows(x, w) => {
                let d = self.shape(*x)[1];
                let (xv, wv) = (self.data(*x), self.data(*w));
                acc(*x, &|gx| {
                    for (r, row) in g.chunks(d).enumerate() {
                        axpy(wv[r], row, &mut gx[r * d..(r + 1) * d]);
                    }
                });
                acc(*w, &|gw| {
                    for (r, row) in g.chunks(d).enumerate() {
                        gw[r] += dot(row, &xv[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Gelu { x, tanh } => {
                let xv = self.data(*x);
                let c = S::lit(GELU_C);
                let k = S::lit(GELU_K);
                let half = S::lit(0.5);
                let three = S::lit(3.0);
                acc(*x, &|gx| {
                    for j in 0..g.len() {
                        let v = xv[j];
                        let t = tanh[j];
                        let dt = (S::one() - t * t) * c * (S::one() + three * k * v * v);
                        gx[j] += g[j] * (half * (S::one() + t) + half * v * dt);
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = &node.value;
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &|gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let s: S = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x } => {
                let y = &node.value;
                let cols = node.shape[1];
                acc(*x, &|gx| {
                    for (r, (grow, yrow)) in g.chunks(cols).zip(y.chunks(cols)).enumerate() {
                        let s = dot(grow, yrow);
                        for j in 0..cols {
                            gx[r * cols + j] += yrow[j] * (grow[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gain)[0];
                let gv = self.data(*gain);
                let inv_d = S::one() / S::lit(d as f64);
                acc(*x, &|gx| {
                    let mut dh = vec![S::zero(); d];
                    for r in 0..inv_std.len() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = grow[j] * gv[j];
                        }
                        let sum_dh: S = dh.iter().copied().sum();
                        let sum_dhh = dot(&dh, hrow);
                        for j in 0..d {
                            gx[r * d + j] +=
                                inv_std[r] * (dh[j] - inv_d * sum_dh - hrow[j] * inv_d * sum_dhh);
                        }
                    }
                });
                acc(*gain, &|gg| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*bias, &|gb| {
                    for grow in g.chunks(d) {
                        axpy(S::one(), grow, gb);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                support,
            } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / S::lit(*support as f64);
                acc(*logits, &|gl| {
                    for r in 0..mask.len() {
                        if !mask[r] {
                            continue;
                        }
                        for j in 0..v {
                            gl[r * v + j] += scale * probs[r * v + j];
                        }
                        gl[r * v + targets[r]] -= scale;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                acc(*table, &|gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(S::one(), &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                });
            }
            Op::Concat { parts, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (p, &w) in parts.iter().zip(widths) {
                    acc(*p, &|gp| {
                        for o in 0..*outer {
                            axpy(S::one(), &g[o * total + off..o * total + off + w], &mut gp[o * w..(o + 1) * w]);
                        }
                    });
                    off += w;
                }
            }
            Op::Slice {
                x,
                outer,
                width_in,
                start,
                width,
            } => {
                acc(*x, &|gx| {
                    for o in 0..*outer {
                        let base = o * width_in + start;
                        axpy(S::one(), &g[o * width..(o + 1) * width], &mut gx[base..base + width]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &|gx| axpy(S::one(), g, gx)),
            Op::Sum(x) => acc(*x, &|gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = S::lit(self.data(*x).len() as f64);
                acc(*x, &|gx| gx.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::MeanRows(x) => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let inv = S::one() / S::lit(n as f64);
                acc(*x, &|gx| {
                    for r in 0..n {
                        axpy(inv, g, &mut gx[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let d = self.shape(*x)[1];
                acc(*x, &|gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(S::one(), &g[r * d..(r + 1) * d], &mut gx[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::ScatterRows { x, idx } => {
                let d = self.shape(*x)[1];
                acc(*x, &|gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(S::one(), &g[i * d..(i + 1) * d], &mut gx[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Pick { x, idx } => {
                acc(*x, &|gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        gx[i] += g[r];
                    }
                });
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &|ga| axpy(g[0], bv, ga));
                acc(*b, &|gb| axpy(g[0], av, gb));
            }
        }
    }
}

/// Result of a reverse sweep.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    params: HashMap<usize, Var>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to `v`; `None` when no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a tensor previously entered with [`Tape::param`].
    pub fn for_param(&self, t: &Tensor<S>) -> Option<&[S]> {
        let key = t as *const Tensor<S> as usize;
        self.params.get(&key).and_then(|v| self.wrt(*v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_and_square_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, -4.0]).trainable());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]).trainable());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn reuse_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0).trainable());
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0]);
    }

    #[test]
    fn param_is_keyed_by_identity() {
        let w = Tensor::from_vec(vec![1.5]).trainable();
        let mut tape = Tape::<f64>::new();
        let a = tape.param(&w);
        let b = tape.param(&w);
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.for_param(&w).unwrap(), &[3.0]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let w = Tensor::from_vec(vec![1.0, 2.0]);
        let mut tape = Tape::<f64>::new();
        let a = tape.param(&w);
        let s = tape.sum(a).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.for_param(&w).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]).trainable());
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn overflow_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1e200, 1e200]));
        let y = tape.mul(x, x);
        assert!(matches!(y, Err(Error::NonFinite(_))));
    }

    #[test]
    fn masked_softmax_zeroes_excluded_entries() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 5.0], vec![2.0, 3.0]]).unwrap());
        let mask: Rc<[bool]> = vec![true, false, true, true].into();
        let y = tape.masked_softmax(x, mask).unwrap();
        let v = tape.data(y);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
        assert!((v[2] + v[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn concat_and_slice_invert() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = tape.leaf(Tensor::from_fn(&[2, 2], |i| 10.0 + i as f64));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 5]);
        assert_eq!(tape.data(c), &[0.0, 1.0, 2.0, 10.0, 11.0, 3.0, 4.0, 5.0, 12.0, 13.0]);
        let back = tape.slice(c, 1, 3, 5).unwrap();
        assert_eq!(tape.data(back), tape.data(b));
        let rows = tape.concat(&[a, a], 0).unwrap();
        assert_eq!(tape.shape(rows), &[4, 3]);
    }
}
