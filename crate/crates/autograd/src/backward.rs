use crate::conv;
use crate::fused;
use crate::graph::{BinaryOp, Node, Op, UnaryOp, Var};
use crate::linalg::{gemm, gemm_new, MatRef};

/// Gradient buffer of `v`, or `None` when `v` does not track gradients.
fn buf<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

/// Moves `v`'s gradient buffer out so several can be borrowed at once.
/// Operands must be distinct; see [`scratch`] otherwise.
fn take(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var) -> Option<Vec<f64>> {
    let n = &nodes[v.0];
    n.requires_grad
        .then(|| grads[v.0].take().unwrap_or_else(|| vec![0.0; n.value.len()]))
}

fn put(grads: &mut [Option<Vec<f64>>], v: Var, buf: Option<Vec<f64>>) {
    if buf.is_some() {
        grads[v.0] = buf;
    }
}

fn scratch(nodes: &[Node], v: Var) -> Option<Vec<f64>> {
    let n = &nodes[v.0];
    n.requires_grad.then(|| vec![0.0; n.value.len()])
}

/// True when `v` tracks gradients but nothing has been accumulated yet,
/// so the first contribution can be written without a zero fill.
fn unset(nodes: &[Node], grads: &[Option<Vec<f64>>], v: Var) -> bool {
    nodes[v.0].requires_grad && grads[v.0].is_none()
}

fn add_into(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    if unset(nodes, grads, v) {
        grads[v.0] = Some(delta.to_vec());
    } else if let Some(g) = buf(nodes, grads, v) {
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
    }
}

/// Accumulates `f(i)` into the gradient of `v`, summing when `v` is a
/// broadcast single value and the output has `n` entries.
fn add_broadcast(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, n: usize, f: impl Fn(usize) -> f64) {
    if unset(nodes, grads, v) && nodes[v.0].value.len() == n {
        grads[v.0] = Some((0..n).map(f).collect());
    } else if let Some(g) = buf(nodes, grads, v) {
        if g.len() == n {
            for (i, a) in g.iter_mut().enumerate() {
                *a += f(i);
            }
        } else {
            g[0] += (0..n).map(f).sum::<f64>();
        }
    }
}

pub(crate) fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Unary(op, x) => {
            let xv = &nodes[x.0].value;
            let n = g.len();
            add_broadcast(nodes, grads, *x, n, |j| {
                let gj = g[j];
                match *op {
                    UnaryOp::Neg => -gj,
                    UnaryOp::Tanh => gj * (1.0 - y[j] * y[j]),
                    UnaryOp::Sigmoid => gj * y[j] * (1.0 - y[j]),
                    UnaryOp::Exp => gj * y[j],
                    UnaryOp::Log => gj / xv[j],
                    UnaryOp::Abs => gj * sign(xv[j]),
                    UnaryOp::Powf(p) => gj * p * xv[j].powf(p - 1.0),
                    UnaryOp::Scale(c) => gj * c,
                    UnaryOp::AddScalar(_) => gj,
                }
            });
        }
        Op::Binary(op, a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let at = |x: &[f64], j: usize| if x.len() == 1 { x[0] } else { x[j] };
            let n = g.len();
            match op {
                BinaryOp::Add => {
                    add_broadcast(nodes, grads, *a, n, |j| g[j]);
                    add_broadcast(nodes, grads, *b, n, |j| g[j]);
                }
                BinaryOp::Sub => {
                    add_broadcast(nodes, grads, *a, n, |j| g[j]);
                    add_broadcast(nodes, grads, *b, n, |j| -g[j]);
                }
                BinaryOp::Mul => {
                    add_broadcast(nodes, grads, *a, n, |j| g[j] * at(bv, j));
                    add_broadcast(nodes, grads, *b, n, |j| g[j] * at(av, j));
                }
                BinaryOp::Div => {
                    add_broadcast(nodes, grads, *a, n, |j| g[j] / at(bv, j));
                    add_broadcast(nodes, grads, *b, n, |j| {
                        let d = at(bv, j);
                        -g[j] * at(av, j) / (d * d)
                    });
                }
            }
        }
        Op::AddBias(x, bias) => {
            add_into(nodes, grads, *x, g);
            if let Some(db) = buf(nodes, grads, *bias) {
                let c = db.len();
                for row in g.chunks(c) {
                    for (a, b) in db.iter_mut().zip(row) {
                        *a += b;
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            let (ga, bt) = (MatRef::new(g, n), MatRef::t(&nb.value, n));
            if unset(nodes, grads, *a) {
                grads[a.0] = Some(gemm_new(m, n, k, ga, bt));
            } else if let Some(da) = buf(nodes, grads, *a) {
                gemm(m, n, k, ga, bt, 1.0, da);
            }
            let (at, gb) = (MatRef::t(&na.value, k), MatRef::new(g, n));
            if unset(nodes, grads, *b) {
                grads[b.0] = Some(gemm_new(k, m, n, at, gb));
            } else if let Some(db) = buf(nodes, grads, *b) {
                gemm(k, m, n, at, gb, 1.0, db);
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
            if let Some(dx) = buf(nodes, grads, *x) {
                for a in 0..r {
                    for b in 0..c {
                        dx[a * c + b] += g[b * r + a];
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let c = *node.shape.last().unwrap();
            if let Some(dx) = buf(nodes, grads, *x) {
                for ((dxr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dxr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = buf(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(dx) = buf(nodes, grads, *x) {
                let s = g[0] / dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::MeanAxis(x, s) => {
            if let Some(dx) = buf(nodes, grads, *x) {
                let inv = 1.0 / s.len as f64;
                for o in 0..s.outer {
                    let src = &g[o * s.inner..(o + 1) * s.inner];
                    for a in 0..s.len {
                        let dst = &mut dx[(o * s.len + a) * s.inner..(o * s.len + a + 1) * s.inner];
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d += v * inv;
                        }
                    }
                }
            }
        }
        Op::Reshape(x) => add_into(nodes, grads, *x, g),
        Op::Concat(parts, s) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.len() / (s.outer * s.inner);
                if let Some(dp) = buf(nodes, grads, *p) {
                    let block = len * s.inner;
                    for o in 0..s.outer {
                        let src = (o * s.len + offset) * s.inner;
                        for (d, v) in dp[o * block..(o + 1) * block].iter_mut().zip(&g[src..src + block]) {
                            *d += v;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice(x, s, start) => {
            if let Some(dx) = buf(nodes, grads, *x) {
                let len = g.len() / (s.outer * s.inner);
                let block = len * s.inner;
                for o in 0..s.outer {
                    let dst = (o * s.len + start) * s.inner;
                    for (d, v) in dx[dst..dst + block].iter_mut().zip(&g[o * block..(o + 1) * block]) {
                        *d += v;
                    }
                }
            }
        }
        Op::GatherRows(x, index) => {
            let c = nodes[x.0].shape[1];
            if let Some(dx) = buf(nodes, grads, *x) {
                for (r, &src) in index.iter().enumerate() {
                    for (d, v) in dx[src * c..(src + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *d += v;
                    }
                }
            }
        }
        Op::Conv1d(x, w, dims) => {
            let (nx, nw) = (&nodes[x.0], &nodes[w.0]);
            let (dx, dw) = conv::conv1d_backward(&nx.value, &nw.value, g, dims, nx.requires_grad, nw.requires_grad);
            if let Some(dx) = dx {
                add_into(nodes, grads, *x, &dx);
            }
            if let Some(dw) = dw {
                add_into(nodes, grads, *w, &dw);
            }
        }
        Op::Conv2d(x, w, dims) => {
            let (nx, nw) = (&nodes[x.0], &nodes[w.0]);
            let (dx, dw) = conv::conv2d_backward(&nx.value, &nw.value, g, dims, nx.requires_grad, nw.requires_grad);
            if let Some(dx) = dx {
                add_into(nodes, grads, *x, &dx);
            }
            if let Some(dw) = dw {
                add_into(nodes, grads, *w, &dw);
            }
        }
        Op::LstmCell {
            gates,
            c_prev,
            acts,
            tanh_c,
        } => {
            let nc = &nodes[c_prev.0];
            let (b, h) = (nc.shape[0], nc.shape[1]);
            let c = &nc.value;
            if gates != c_prev {
                let (mut dg, mut dc) = (take(nodes, grads, *gates), take(nodes, grads, *c_prev));
                fused::lstm_backward(g, acts, tanh_c, c, (b, h), dg.as_deref_mut(), dc.as_deref_mut());
                put(grads, *gates, dg);
                put(grads, *c_prev, dc);
            } else {
                let mut dg = scratch(nodes, *gates);
                let mut dc = scratch(nodes, *c_prev);
                fused::lstm_backward(g, acts, tanh_c, c, (b, h), dg.as_deref_mut(), dc.as_deref_mut());
                for (v, d) in [(*gates, dg), (*c_prev, dc)] {
                    if let Some(d) = d {
                        add_into(nodes, grads, v, &d);
                    }
                }
            }
        }
        Op::Attention { q, k, v, dims, probs } => {
            let values = (&nodes[q.0].value[..], &nodes[k.0].value[..], &nodes[v.0].value[..]);
            if q != k && q != v && k != v {
                let (mut dq, mut dk, mut dv) = (take(nodes, grads, *q), take(nodes, grads, *k), take(nodes, grads, *v));
                fused::attention_backward(
                    g,
                    values,
                    probs,
                    dims,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                put(grads, *q, dq);
                put(grads, *k, dk);
                put(grads, *v, dv);
            } else {
                let [mut dq, mut dk, mut dv] = [*q, *k, *v].map(|x| scratch(nodes, x));
                fused::attention_backward(
                    g,
                    values,
                    probs,
                    dims,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (x, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(d) = d {
                        add_into(nodes, grads, x, &d);
                    }
                }
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
