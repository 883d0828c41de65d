//! Hand-differentiated kernels for the LSTM cell and multi-head attention.

use crate::error::{Result, TensorError};
use crate::math::{exp, sigmoid, tanh};

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = exp(*v - max);
        total += *v;
    }
    let inv = 1.0 / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Returns `(out [B,2H], activated gates [B,4H], tanh(c) [B,H])`.
pub(crate) fn lstm_forward(gates: &[f64], c_prev: &[f64], b: usize, h: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; b * 2 * h];
    let mut acts = vec![0.0; b * 4 * h];
    let mut tanh_c = vec![0.0; b * h];
    for r in 0..b {
        let g = &gates[r * 4 * h..(r + 1) * 4 * h];
        let a = &mut acts[r * 4 * h..(r + 1) * 4 * h];
        for j in 0..h {
            a[j] = sigmoid(g[j]);
            a[h + j] = sigmoid(g[h + j]);
            a[2 * h + j] = tanh(g[2 * h + j]);
            a[3 * h + j] = sigmoid(g[3 * h + j]);
        }
        for j in 0..h {
            let c = a[h + j] * c_prev[r * h + j] + a[j] * a[2 * h + j];
            let tc = tanh(c);
            tanh_c[r * h + j] = tc;
            out[r * 2 * h + j] = a[3 * h + j] * tc;
            out[r * 2 * h + h + j] = c;
        }
    }
    (out, acts, tanh_c)
}

/// Accumulates into `dgates` and `dc_prev` when present.
pub(crate) fn lstm_backward(
    dout: &[f64],
    acts: &[f64],
    tanh_c: &[f64],
    c_prev: &[f64],
    (b, h): (usize, usize),
    mut dgates: Option<&mut [f64]>,
    mut dc_prev: Option<&mut [f64]>,
) {
    for r in 0..b {
        let a = &acts[r * 4 * h..(r + 1) * 4 * h];
        for j in 0..h {
            let (i, f, g, o) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
            let tc = tanh_c[r * h + j];
            let dh = dout[r * 2 * h + j];
            let dc = dout[r * 2 * h + h + j] + dh * o * (1.0 - tc * tc);
            if let Some(dg) = dgates.as_deref_mut() {
                let dg = &mut dg[r * 4 * h..(r + 1) * 4 * h];
                dg[j] += dc * g * i * (1.0 - i);
                dg[h + j] += dc * c_prev[r * h + j] * f * (1.0 - f);
                dg[2 * h + j] += dc * i * (1.0 - g * g);
                dg[3 * h + j] += dh * tc * o * (1.0 - o);
            }
            if let Some(dc_prev) = dc_prev.as_deref_mut() {
                dc_prev[r * h + j] += dc * f;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttentionDims {
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
    pub heads: usize,
    pub scale: f64,
}

impl AttentionDims {
    pub fn infer(q: &[usize], k: &[usize], v: &[usize], heads: usize, scale: f64) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "attention",
            lhs: q.to_vec(),
            rhs: k.to_vec(),
        };
        if q.len() != 2 || k.len() != 2 || k != v || q[1] != k[1] {
            return Err(mismatch());
        }
        let (batch, dim) = (q[0], q[1]);
        if k[0] == 0 || !k[0].is_multiple_of(batch) {
            return Err(TensorError::Domain {
                op: "attention",
                detail: format!("{} key rows do not split evenly over {batch} queries", k[0]),
            });
        }
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Domain {
                op: "attention",
                detail: format!("width {dim} not divisible by {heads} heads"),
            });
        }
        Ok(Self {
            batch,
            len: k[0] / batch,
            dim,
            heads,
            scale,
        })
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Returns `(context [B, D], probs [B, heads, L])`.
pub(crate) fn attention_forward(q: &[f64], k: &[f64], v: &[f64], d: &AttentionDims) -> (Vec<f64>, Vec<f64>) {
    let hd = d.head_dim();
    let mut out = vec![0.0; d.batch * d.dim];
    let mut probs = vec![0.0; d.batch * d.heads * d.len];
    for b in 0..d.batch {
        for head in 0..d.heads {
            let cols = head * hd..(head + 1) * hd;
            let qh = &q[b * d.dim..][cols.clone()];
            let p = &mut probs[(b * d.heads + head) * d.len..(b * d.heads + head + 1) * d.len];
            for (i, s) in p.iter_mut().enumerate() {
                let kh = &k[(b * d.len + i) * d.dim..][cols.clone()];
                *s = d.scale * qh.iter().zip(kh).map(|(x, y)| x * y).sum::<f64>();
            }
            softmax_in_place(p);
            let o = &mut out[b * d.dim..][cols.clone()];
            for (i, &w) in p.iter().enumerate() {
                let vh = &v[(b * d.len + i) * d.dim..][cols.clone()];
                for (acc, x) in o.iter_mut().zip(vh) {
                    *acc += w * x;
                }
            }
        }
    }
    (out, probs)
}

/// Accumulates into whichever of `dq`, `dk`, `dv` are present.
pub(crate) fn attention_backward(
    dout: &[f64],
    (q, k, v): (&[f64], &[f64], &[f64]),
    probs: &[f64],
    d: &AttentionDims,
    mut dq: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut dv: Option<&mut [f64]>,
) {
    let hd = d.head_dim();
    let mut dscore = vec![0.0; d.len];
    for b in 0..d.batch {
        for head in 0..d.heads {
            let cols = head * hd..(head + 1) * hd;
            let p = &probs[(b * d.heads + head) * d.len..(b * d.heads + head + 1) * d.len];
            let g = &dout[b * d.dim..][cols.clone()];
            let mut weighted = 0.0;
            for (i, &pi) in p.iter().enumerate() {
                let row = (b * d.len + i) * d.dim;
                let vh = &v[row..][cols.clone()];
                let dp: f64 = g.iter().zip(vh).map(|(x, y)| x * y).sum();
                dscore[i] = dp;
                weighted += pi * dp;
                if let Some(dv) = dv.as_deref_mut() {
                    for (acc, x) in dv[row..][cols.clone()].iter_mut().zip(g) {
                        *acc += pi * x;
                    }
                }
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            let qh = &q[b * d.dim..][cols.clone()];
            for (i, &pi) in p.iter().enumerate() {
                let ds = d.scale * pi * (dscore[i] - weighted);
                let row = (b * d.len + i) * d.dim;
                if let Some(dq) = dq.as_deref_mut() {
                    let kh = &k[row..][cols.clone()];
                    for (acc, x) in dq[b * d.dim..][cols.clone()].iter_mut().zip(kh) {
                        *acc += ds * x;
                    }
                }
                if let Some(dk) = dk.as_deref_mut() {
                    for (acc, x) in dk[row..][cols.clone()].iter_mut().zip(qh) {
                        *acc += ds * x;
                    }
                }
            }
        }
    }
}
