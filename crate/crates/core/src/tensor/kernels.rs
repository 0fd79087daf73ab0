//! Dense row-major matrix kernels. All kernels accumulate into `out`.

use crate::scalar::Scalar;

/// `out[m×p] += a[m×n] · b[n×p]`
pub fn matmul_nn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, n: usize, p: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(out.len(), m * p);
    if p == 0 {
        return;
    }
    // Four output rows at a time: each row of `b` is read once per block.
    let mut rows = out.chunks_exact_mut(4 * p);
    let mut i = 0;
    for block in &mut rows {
        let (r0, rest) = block.split_at_mut(p);
        let (r1, rest) = rest.split_at_mut(p);
        let (r2, r3) = rest.split_at_mut(p);
        for (k, brow) in b.chunks_exact(p).enumerate() {
            let a0 = a[i * n + k];
            let a1 = a[(i + 1) * n + k];
            let a2 = a[(i + 2) * n + k];
            let a3 = a[(i + 3) * n + k];
            let lanes = r0.iter_mut().zip(r1.iter_mut()).zip(r2.iter_mut().zip(r3.iter_mut()));
            for (((o0, o1), (o2, o3)), &bj) in lanes.zip(brow) {
                *o0 += a0 * bj;
                *o1 += a1 * bj;
                *o2 += a2 * bj;
                *o3 += a3 * bj;
            }
        }
        i += 4;
    }
    for row in rows.into_remainder().chunks_exact_mut(p) {
        let arow = &a[i * n..(i + 1) * n];
        for (&aik, brow) in arow.iter().zip(b.chunks_exact(p)) {
            axpy(aik, brow, row);
        }
        i += 1;
    }
}

/// `out[m×p] += a[m×n] · b[p×n]ᵀ`
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, n: usize, p: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * p);
    if m >= 8 {
        let bt = transpose(b, p, n);
        matmul_nn(a, &bt, out, m, n, p);
        return;
    }
    for (arow, orow) in a.chunks_exact(n.max(1)).zip(out.chunks_exact_mut(p.max(1))) {
        for (o, brow) in orow.iter_mut().zip(b.chunks_exact(n.max(1))) {
            *o += dot(arow, brow);
        }
    }
}

/// `out[m×p] += a[n×m]ᵀ · b[n×p]`
pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], n: usize, m: usize, p: usize) {
    debug_assert_eq!(a.len(), n * m);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(out.len(), m * p);
    if m == 0 || p == 0 {
        return;
    }
    let at = transpose(a, n, m);
    matmul_nn(&at, b, out, m, n, p);
}

/// Row-major transpose of an `r×c` matrix.
pub fn transpose<S: Scalar>(x: &[S], r: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    // Four independent accumulators let the compiler vectorise the loop.
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
