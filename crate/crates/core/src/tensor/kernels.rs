//! Raw matmul kernels on row-major slices. All three accumulate (`out +=`),
//! so callers pass zeroed buffers for a plain product and existing gradient
//! buffers during backward.

/// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += aip * b_row[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ  (rows of b dotted against rows of a)
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            out_row[j] += acc;
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]  (rank-1 accumulation per row of a/b)
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += aip * b_row[j];
            }
        }
    }
}
