//! Same-padded, stride-1 cross-correlation: im2col + GEMM in 1D, one
//! shifted GEMM per kernel row in 2D.
//!
//! Kernels are not flipped. Weights are stored `[K, Cin, Cout]` (1D) and
//! `[K, K, Cin, Cout]` (2D), which read row-major as a `(K*..*Cin) x Cout`
//! matrix matching the 1D im2col column order.

use crate::error::{Result, TensorError};
use crate::linalg::{gemm, MatRef};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv1dDims {
    pub n: usize,
    pub len: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv2dDims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

fn bad(op: &'static str, x: &[usize], w: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: x.to_vec(),
        rhs: w.to_vec(),
    }
}

impl Conv1dDims {
    pub fn infer(x: &[usize], w: &[usize]) -> Result<Self> {
        let (n, len, cin) = match *x {
            [l, c] => (1, l, c),
            [n, l, c] => (n, l, c),
            _ => return Err(bad("conv1d", x, w)),
        };
        let [k, wc, cout] = *w else {
            return Err(bad("conv1d", x, w));
        };
        if wc != cin {
            return Err(bad("conv1d", x, w));
        }
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel { op: "conv1d", k });
        }
        Ok(Self { n, len, cin, cout, k })
    }

    fn patch(&self) -> usize {
        self.k * self.cin
    }
}

impl Conv2dDims {
    pub fn infer(x: &[usize], w: &[usize]) -> Result<Self> {
        let (n, h, wd, cin) = match *x {
            [h, w, c] => (1, h, w, c),
            [n, h, w, c] => (n, h, w, c),
            _ => return Err(bad("conv2d", x, w)),
        };
        let [k, k2, wc, cout] = *w else {
            return Err(bad("conv2d", x, w));
        };
        if k != k2 || wc != cin {
            return Err(bad("conv2d", x, w));
        }
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel { op: "conv2d", k });
        }
        Ok(Self {
            n,
            h,
            w: wd,
            cin,
            cout,
            k,
        })
    }

    fn pixels(&self) -> usize {
        self.h * self.w
    }
}

fn im2col_1d(x: &[f64], d: &Conv1dDims, cols: &mut [f64]) {
    let pad = d.k / 2;
    let patch = d.patch();
    cols.iter_mut().for_each(|c| *c = 0.0);
    for i in 0..d.len {
        for k in 0..d.k {
            let src = i + k;
            if src < pad || src - pad >= d.len {
                continue;
            }
            let src = src - pad;
            cols[i * patch + k * d.cin..i * patch + (k + 1) * d.cin]
                .copy_from_slice(&x[src * d.cin..(src + 1) * d.cin]);
        }
    }
}

fn col2im_1d(dcols: &[f64], d: &Conv1dDims, dx: &mut [f64]) {
    let pad = d.k / 2;
    let patch = d.patch();
    for i in 0..d.len {
        for k in 0..d.k {
            let src = i + k;
            if src < pad || src - pad >= d.len {
                continue;
            }
            let src = src - pad;
            let from = &dcols[i * patch + k * d.cin..i * patch + (k + 1) * d.cin];
            for (a, b) in dx[src * d.cin..(src + 1) * d.cin].iter_mut().zip(from) {
                *a += b;
            }
        }
    }
}

pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], d: &Conv1dDims) -> Vec<f64> {
    let patch = d.patch();
    let mut out = vec![0.0; d.n * d.len * d.cout];
    let mut cols = vec![0.0; d.len * patch];
    for s in 0..d.n {
        im2col_1d(&x[s * d.len * d.cin..(s + 1) * d.len * d.cin], d, &mut cols);
        let dst = &mut out[s * d.len * d.cout..(s + 1) * d.len * d.cout];
        gemm(
            d.len,
            patch,
            d.cout,
            MatRef::new(&cols, patch),
            MatRef::new(w, d.cout),
            0.0,
            dst,
        );
    }
    out
}

/// Returns `(dx, dw)` for the requested operands.
pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    d: &Conv1dDims,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let patch = d.patch();
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    let mut cols = vec![0.0; d.len * patch];
    for s in 0..d.n {
        let g = &dout[s * d.len * d.cout..(s + 1) * d.len * d.cout];
        if let Some(dw) = dw.as_mut() {
            im2col_1d(&x[s * d.len * d.cin..(s + 1) * d.len * d.cin], d, &mut cols);
            gemm(
                patch,
                d.len,
                d.cout,
                MatRef::t(&cols, patch),
                MatRef::new(g, d.cout),
                1.0,
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                d.len,
                d.cout,
                patch,
                MatRef::new(g, d.cout),
                MatRef::t(w, d.cout),
                0.0,
                &mut cols,
            );
            col2im_1d(&cols, d, &mut dx[s * d.len * d.cin..(s + 1) * d.len * d.cin]);
        }
    }
    (dx, dw)
}

/// Zero-padded layout: each sample becomes an `(H+K-1) x (W+K-1)` image, so
/// every kernel tap is one constant flat offset across the whole batch.
/// Output pixel `(s, i, j)` sits at padded index `s*Hp*Wp + i*Wp + j` and
/// reads input at that index plus `ky*Wp + kx`. The `K` taps of one kernel
/// row read `K*Cin` contiguous values, so each kernel row is one GEMM whose
/// left operand has overlapping rows.
struct Padded {
    wp: usize,
    per: usize,
    total: usize,
    /// Largest tap offset.
    reach: usize,
}

impl Padded {
    fn new(d: &Conv2dDims) -> Self {
        let (hp, wp) = (d.h + d.k - 1, d.w + d.k - 1);
        Self {
            wp,
            per: hp * wp,
            total: d.n * hp * wp,
            reach: (d.k - 1) * wp + d.k - 1,
        }
    }

    /// Output rows computed on the padded grid.
    fn span(&self) -> usize {
        self.total - self.reach
    }

    /// Calls `f(pixel, padded_index)` for every unpadded pixel, with the
    /// padded index offset by `off` rows and columns.
    fn each(&self, d: &Conv2dDims, off: usize, mut f: impl FnMut(usize, usize)) {
        for s in 0..d.n {
            for i in 0..d.h {
                let p = s * self.per + (i + off) * self.wp + off;
                let o = (s * d.h + i) * d.w;
                for j in 0..d.w {
                    f(o + j, p + j);
                }
            }
        }
    }
}

fn copy_rows(dst: &mut [f64], di: usize, src: &[f64], si: usize, c: usize) {
    dst[di * c..(di + 1) * c].copy_from_slice(&src[si * c..(si + 1) * c]);
}

fn pad_input(x: &[f64], d: &Conv2dDims, p: &Padded) -> Vec<f64> {
    let mut xp = vec![0.0; p.total * d.cin];
    p.each(d, d.k / 2, |o, q| copy_rows(&mut xp, q, x, o, d.cin));
    xp
}

/// Rows of `K*c` values starting every `c` values.
fn overlapping(data: &[f64], c: usize) -> MatRef<'_> {
    MatRef { data, rs: c, cs: 1 }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], d: &Conv2dDims) -> Vec<f64> {
    let (cin, cout, k) = (d.cin, d.cout, d.k);
    let p = Padded::new(d);
    let xp = pad_input(x, d, &p);
    let row = k * cin * cout;
    let mut acc = vec![0.0; p.span() * cout];
    for ky in 0..k {
        let a = overlapping(&xp[ky * p.wp * cin..], cin);
        let beta = if ky == 0 { 0.0 } else { 1.0 };
        gemm(
            p.span(),
            k * cin,
            cout,
            a,
            MatRef::new(&w[ky * row..(ky + 1) * row], cout),
            beta,
            &mut acc,
        );
    }
    let mut out = vec![0.0; d.n * d.pixels() * cout];
    p.each(d, 0, |o, q| copy_rows(&mut out, o, &acc, q, cout));
    out
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    d: &Conv2dDims,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (cin, cout, k) = (d.cin, d.cout, d.k);
    let p = Padded::new(d);
    let row = k * cin * cout;
    // Gradient on the padded output grid, behind `reach` leading zeros.
    let mut g = vec![0.0; (p.total + p.reach) * cout];
    p.each(d, 0, |o, q| copy_rows(&mut g, q + p.reach, dout, o, cout));

    let dw = want_dw.then(|| {
        let xp = pad_input(x, d, &p);
        let mut dw = vec![0.0; w.len()];
        let gv = MatRef::new(&g[p.reach * cout..], cout);
        for ky in 0..k {
            let a = MatRef::t(&xp[ky * p.wp * cin..], cin);
            gemm(k * cin, p.span(), cout, a, gv, 0.0, &mut dw[ky * row..(ky + 1) * row]);
        }
        dw
    });
    let dx = want_dx.then(|| {
        // Input position `q` gathers output `q - ky*Wp - kx`, which sits at
        // `q + (K-1-ky)*Wp + (K-1-kx)` in `g`: contiguous in `K-1-kx`.
        let mut flipped = vec![0.0; w.len()];
        for ky in 0..k {
            for kx in 0..k {
                for ci in 0..cin {
                    for co in 0..cout {
                        flipped[((ky * k + (k - 1 - kx)) * cout + co) * cin + ci] =
                            w[((ky * k + kx) * cin + ci) * cout + co];
                    }
                }
            }
        }
        let mut dxp = vec![0.0; p.total * cin];
        for ky in 0..k {
            let a = overlapping(&g[(k - 1 - ky) * p.wp * cout..], cout);
            let b = MatRef::new(&flipped[ky * row..(ky + 1) * row], cin);
            let beta = if ky == 0 { 0.0 } else { 1.0 };
            gemm(p.total, k * cout, cin, a, b, beta, &mut dxp);
        }
        let mut dx = vec![0.0; x.len()];
        p.each(d, d.k / 2, |o, q| copy_rows(&mut dx, o, &dxp, q, cin));
        dx
    });
    (dx, dw)
}
