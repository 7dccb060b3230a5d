/// Strided view of a row-major-or-transposed matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    /// `rows × cols` row-major matrix, optionally viewed transposed.
    pub fn new(data: &'a [f64], cols: usize, transpose: bool) -> Self {
        if transpose {
            MatRef {
                data,
                rs: 1,
                cs: cols as isize,
            }
        } else {
            MatRef {
                data,
                rs: cols as isize,
                cs: 1,
            }
        }
    }
}

/// `c = a · b + beta · c` for an `m × k` by `k × n` product; `c` is row-major `m × n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the callers pass slices large enough for the requested extents and
    // strides; `c` is exclusively borrowed and does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
