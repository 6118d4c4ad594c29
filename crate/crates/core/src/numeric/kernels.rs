//! Raw row-major kernels shared by forward and backward passes.

use super::tensor::Real;
use crate::exec::Exec;

/// `a[m,k] @ b[k,n]`.
pub fn matmul(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    matmul_with(Exec::default().for_work(m * k * n), a, b, m, k, n)
}

pub fn matmul_with(exec: Exec, a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * n];
    exec.for_rows(&mut out, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    });
    out
}

/// `a[m,k] @ b[n,k]^T`.
pub fn matmul_nt(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * n];
    Exec::default().for_work(m * k * n).for_rows(&mut out, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    });
    out
}

/// `a[k,m]^T @ b[k,n]`.
pub fn matmul_tn(a: &[Real], b: &[Real], k: usize, m: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * n];
    Exec::default().for_work(m * k * n).for_rows(&mut out, n, |i, row| {
        for p in 0..k {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    });
    out
}

pub fn transpose(a: &[Real], rows: usize, cols: usize) -> Vec<Real> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: Real) -> Real {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
