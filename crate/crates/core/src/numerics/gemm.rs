//! Row-major matrix products over flat slices, backed by `matrixmultiply`.
//!
//! All three write `out = beta * out + a·b` (with the stated transposes).
//! `matrixmultiply` is single-threaded here, so results are bit-stable
//! for a given build.

/// `out[m×n] (+)= a[m×k] · b[k×n]`.
pub fn matmul(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize, accumulate: bool) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `out[k×n] (+)= aᵀ · b` for `a[m×k]`, `b[m×n]`.
pub fn matmul_at_b(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize, accumulate: bool) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), m * n);
    assert_eq!(out.len(), k * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: as above; aᵀ is expressed through swapped strides.
    unsafe {
        matrixmultiply::sgemm(
            k, m, n, 1.0,
            a.as_ptr(), 1, k as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `out[m×k] (+)= a · bᵀ` for `a[m×n]`, `b[k×n]`.
pub fn matmul_a_bt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, n: usize, k: usize, accumulate: bool) {
    assert_eq!(a.len(), m * n);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * k);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: as above; bᵀ is expressed through swapped strides.
    unsafe {
        matrixmultiply::sgemm(
            m, n, k, 1.0,
            a.as_ptr(), n as isize, 1,
            b.as_ptr(), 1, n as isize,
            beta,
            out.as_mut_ptr(), k as isize, 1,
        );
    }
}
