//! Thin safe wrapper over `matrixmultiply::dgemm` for row-major buffers.

/// `c = beta * c + a * b` where `a` is `m×k` and `b` is `k×n` after optional
/// transposition. Untransposed operands are row-major with their logical shape;
/// a transposed operand is stored row-major with the swapped shape.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k, "gemm: lhs buffer too small");
    assert!(b.len() >= k * n, "gemm: rhs buffer too small");
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds are asserted above and the strides describe views that stay
    // inside the asserted extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
