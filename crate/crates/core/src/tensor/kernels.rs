// Dense GEMM kernels on row-major slices. All accumulate into `c`.

/// c[m,n] += a[m,k] · b[k,n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cij, &bpj) in row.iter_mut().zip(b_row) {
                *cij += aip * bpj;
            }
        }
    }
}

/// c[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let a_row = &a[p * k..(p + 1) * k];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let row = &mut c[i * n..(i + 1) * n];
            for (cij, &bpj) in row.iter_mut().zip(b_row) {
                *cij += api * bpj;
            }
        }
    }
}
