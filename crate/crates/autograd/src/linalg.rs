/// Strided view of a row-major buffer as an `rows x cols` matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn t(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }
}

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert!(c.len() >= m * n, "gemm output too small");
    // SAFETY: `c` holds at least m * n initialized values.
    unsafe { gemm_raw(m, k, n, a, b, beta, c.as_mut_ptr()) }
}

/// `a * b` into a freshly allocated buffer, skipping the zero fill.
pub(crate) fn gemm_new(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>) -> Vec<f64> {
    if k == 0 {
        return vec![0.0; m * n];
    }
    let mut out = Vec::with_capacity(m * n);
    // SAFETY: with beta = 0 dgemm only writes `c`, and it writes all m * n entries.
    unsafe {
        gemm_raw(m, k, n, a, b, 0.0, out.as_mut_ptr());
        out.set_len(m * n);
    }
    out
}

/// # Safety
/// `c` must be valid for m * n writes, and for reads too unless `beta` is 0.
unsafe fn gemm_raw(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: *mut f64) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: &MatRef<'_>, rows: usize, cols: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * r.rs + (cols - 1) * r.cs
        }
    };
    assert!(k == 0 || last(&a, m, k) < a.data.len(), "gemm lhs out of bounds");
    assert!(k == 0 || last(&b, k, n) < b.data.len(), "gemm rhs out of bounds");
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c,
            n as isize,
            1,
        );
    }
}
