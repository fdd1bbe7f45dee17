use super::Scalar;

fn max_offset(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs
    }
}

/// Strided GEMM: `c[m×n] = alpha * a[m×k] · b[k×n] + beta * c`.
///
/// Strides are in elements. Bounds are checked against the slices before the
/// kernel runs. The kernel is single-threaded, so results are bit-reproducible
/// for a given machine.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    rsa: usize,
    csa: usize,
    b: &[T],
    rsb: usize,
    csb: usize,
    beta: T,
    c: &mut [T],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || max_offset(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || max_offset(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    assert!(max_offset(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    // SAFETY: all reachable offsets were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
