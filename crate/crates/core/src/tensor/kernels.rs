//! Dense row-major kernels shared by the tape and the plain inference paths.

/// `out[n×m] = a[n×p] · b[p×m]`, overwriting `out`.
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], n: usize, p: usize, m: usize) {
    debug_assert_eq!(a.len(), n * p);
    debug_assert_eq!(b.len(), p * m);
    debug_assert_eq!(out.len(), n * m);
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        let a_row = &a[i * p..(i + 1) * p];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * m..(k + 1) * m];
            for (o, &bkj) in row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
}

/// `out[n×p] += g[n×m] · b[p×m]ᵀ`
pub fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], n: usize, p: usize, m: usize) {
    for i in 0..n {
        let g_row = &g[i * m..(i + 1) * m];
        let o_row = &mut out[i * p..(i + 1) * p];
        for (k, o) in o_row.iter_mut().enumerate() {
            let b_row = &b[k * m..(k + 1) * m];
            let mut acc = 0.0;
            for (x, y) in g_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

/// `out[p×m] += a[n×p]ᵀ · g[n×m]`
pub fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], n: usize, p: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * p..(i + 1) * p];
        let g_row = &g[i * m..(i + 1) * m];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let o_row = &mut out[k * m..(k + 1) * m];
            for (o, &gij) in o_row.iter_mut().zip(g_row) {
                *o += aik * gij;
            }
        }
    }
}

/// Overflow-safe `log Σ exp(x)`. Returns `-inf` for an empty slice or all `-inf` input.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}
