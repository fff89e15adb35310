//! Thin safe wrapper over the blocked GEMM kernels.

use crate::real::Real;

/// Whether a row-major matrix operand is used as stored or transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Normal,
    Transposed,
}

/// `c[m×n] = a'·b' + beta·c` where `a'` is `m×k` and `b'` is `k×n` after
/// applying the requested layouts to the row-major storage of `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    a_layout: Layout,
    b: &[S],
    b_layout: Layout,
    beta: S,
    c: &mut [S],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs has wrong length");
    assert_eq!(b.len(), k * n, "gemm: rhs has wrong length");
    assert_eq!(c.len(), m * n, "gemm: output has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: lengths were checked above and the strides address exactly the
    // m×k, k×n and m×n row-major (or transposed) views of those slices.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            S::ONE,
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
