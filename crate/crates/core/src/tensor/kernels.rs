//! Plain loops over row-major buffers. Loop order is fixed so results are
//! bitwise reproducible.

use super::Real;

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
pub(crate) fn gemm_tn<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `log(sigmoid(x))` without overflow.
pub(crate) fn log_sigmoid<S: Real>(x: S) -> S {
    x.min(S::zero()) - (S::one() + (-x.abs()).exp()).ln()
}

pub(crate) fn gelu<S: Real>(x: S) -> S {
    let half = S::from_f64(0.5);
    half * x * (S::one() + (x * S::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<S: Real>(x: S) -> S {
    let half = S::from_f64(0.5);
    let cdf = half * (S::one() + (x * S::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * S::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> alloc::vec::Vec<usize> {
    let mut s = alloc::vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
