//! Dense row-major kernels used by the forward and backward passes.

/// `out (m×n) += a (m×k) · b (k×n)`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let ai = &a[i * k..(i + 1) * k];
        for (p, &aip) in ai.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(bp) {
                *o += aip * bv;
            }
        }
    }
}

/// `a (m×k) · b (k×n)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// `out (k×n) += aᵀ · b` for `a (m×k)`, `b (m×n)`.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        let bi = &b[i * n..(i + 1) * n];
        for (p, &aip) in ai.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(bi) {
                *o += aip * bv;
            }
        }
    }
}

/// `out (m×k) += a · bᵀ` for `a (m×n)`, `b (k×n)`.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let ai = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let bp = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(ai, bp);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent partial sums; fixed order keeps results deterministic.
    let mut s = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        s[0] += a[i] * b[i];
        s[1] += a[i + 1] * b[i + 1];
        s[2] += a[i + 2] * b[i + 2];
        s[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

/// Numerically stable `ln(sum(exp(x)))`.
pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_agree_with_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let c = matmul(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let e: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - e).abs() < 1e-12);
            }
        }
        // aᵀ·c has shape k×n when a is m×k and c is m×n.
        let mut t = vec![0.0; k * n];
        matmul_tn_acc(&a, &c, &mut t, m, k, n);
        for p in 0..k {
            for j in 0..n {
                let e: f64 = (0..m).map(|i| a[i * k + p] * c[i * n + j]).sum();
                assert!((t[p * n + j] - e).abs() < 1e-12);
            }
        }
        // c·bᵀ has shape m×k.
        let mut u = vec![0.0; m * k];
        matmul_nt_acc(&c, &b, &mut u, m, n, k);
        for i in 0..m {
            for p in 0..k {
                let e: f64 = (0..n).map(|j| c[i * n + j] * b[p * n + j]).sum();
                assert!((u[i * k + p] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lse_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
