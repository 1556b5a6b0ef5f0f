//! Row-major dense kernels used by the layers.

/// `out[r, c] = sum_k a[r, k] * w[c, k]`, i.e. `out = a * w^T`.
pub fn matmul_abt(a: &[f64], rows: usize, k: usize, w: &[f64], n: usize, out: &mut [f64]) {
    assert!(a.len() == rows * k && w.len() == n * k && out.len() == rows * n);
    // SAFETY: lengths checked above; strides describe row-major a, w^T and out.
    unsafe {
        matrixmultiply::dgemm(
            rows, k, n, 1.0, a.as_ptr(), k as isize, 1, w.as_ptr(), 1, k as isize, 0.0,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `dw[c, k] += sum_r dy[r, c] * x[r, k]`, i.e. `dw += dy^T * x`.
pub fn matmul_atb_acc(dy: &[f64], rows: usize, n: usize, x: &[f64], k: usize, dw: &mut [f64]) {
    assert!(dy.len() == rows * n && x.len() == rows * k && dw.len() == n * k);
    // SAFETY: lengths checked above; dy^T is read through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            n, rows, k, 1.0, dy.as_ptr(), 1, n as isize, x.as_ptr(), k as isize, 1, 1.0,
            dw.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// `out[r, k] += sum_c dy[r, c] * w[c, k]`, i.e. `out += dy * w`.
pub fn matmul_ab_acc(dy: &[f64], rows: usize, n: usize, w: &[f64], k: usize, out: &mut [f64]) {
    assert!(dy.len() == rows * n && w.len() == n * k && out.len() == rows * k);
    // SAFETY: lengths checked above; all operands row-major.
    unsafe {
        matrixmultiply::dgemm(
            rows, n, k, 1.0, dy.as_ptr(), n as isize, 1, w.as_ptr(), k as isize, 1, 1.0,
            out.as_mut_ptr(), k as isize, 1,
        );
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
