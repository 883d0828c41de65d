//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the tape, so node order is already a
//! topological order and `backward` simply walks the tape in reverse.

use crate::conv::{self, Conv1dDims, Conv2dDims};
use crate::error::{Result, TensorError};
use crate::fused::{self, AttentionDims};
use crate::linalg::{gemm_new, MatRef};
use crate::math;
use crate::tensor::{check_shape, Tensor};

/// Handle to a node on a [`Graph`]'s tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Neg,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Powf(f64),
    Scale(f64),
    AddScalar(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Decomposition of a shape around one axis as `[outer, axis, inner]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisSplit {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl AxisSplit {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, AxisSplit),
    Reshape(Var),
    Concat(Vec<Var>, AxisSplit),
    Slice(Var, AxisSplit, usize),
    GatherRows(Var, Vec<usize>),
    Conv1d(Var, Var, Conv1dDims),
    Conv2d(Var, Var, Conv2dDims),
    LstmCell {
        gates: Var,
        c_prev: Var,
        acts: Vec<f64>,
        tanh_c: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttentionDims,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a tensor onto the tape. Gradients are tracked when the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Untracked input.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                detail: format!("expected {n} values, got {}", data.len()),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![1], vec![value], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shapes are validated on push")
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Adds the gradient of `v` (if any) into `t`'s accumulator.
    pub fn accumulate_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    /// Per-head attention probabilities `[batch, heads, len]` saved by an
    /// [`attention`](Self::attention) node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ----------------------------------------------------------------- elementwise

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let xs = &self.nodes[x.0].value;
        let out: Vec<f64> = match op {
            UnaryOp::Neg => xs.iter().map(|v| -v).collect(),
            UnaryOp::Tanh => xs.iter().map(|&v| math::tanh(v)).collect(),
            UnaryOp::Sigmoid => xs.iter().map(|&v| math::sigmoid(v)).collect(),
            UnaryOp::Exp => xs.iter().map(|v| v.exp()).collect(),
            UnaryOp::Log => {
                if let Some(bad) = xs.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(TensorError::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                xs.iter().map(|v| v.ln()).collect()
            }
            UnaryOp::Abs => xs.iter().map(|v| v.abs()).collect(),
            UnaryOp::Powf(p) => {
                let integral = p.fract() == 0.0;
                if let Some(bad) = xs.iter().find(|&&v| (v < 0.0 && !integral) || (v == 0.0 && p < 0.0)) {
                    return Err(TensorError::Domain {
                        op: "powf",
                        detail: format!("base {bad} outside the domain of exponent {p}"),
                    });
                }
                xs.iter().map(|v| v.powf(p)).collect()
            }
            UnaryOp::Scale(c) => xs.iter().map(|v| v * c).collect(),
            UnaryOp::AddScalar(c) => xs.iter().map(|v| v + c).collect(),
        };
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Unary(op, x), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Tanh, x).expect("tanh is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x).expect("exp is total")
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Neg, x).expect("neg is total")
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Abs, x).expect("abs is total")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryOp::Scale(c), x).expect("scale is total")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryOp::AddScalar(c), x).expect("add_scalar is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary(UnaryOp::Powf(p), x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Powf(2.0), x).expect("integer powers are total")
    }

    /// Elementwise binary op. Shapes must match, or one side must hold a
    /// single value which is then broadcast.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let shape = if na.shape == nb.shape || nb.value.len() == 1 {
            na.shape.clone()
        } else if na.value.len() == 1 {
            nb.shape.clone()
        } else {
            return Err(mismatch(op_name(op), &na.shape, &nb.shape));
        };
        let n: usize = shape.iter().product();
        let (av, bv) = (&na.value, &nb.value);
        let at = |x: &[f64], i: usize| if x.len() == 1 { x[0] } else { x[i] };
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
        };
        let out = if av.len() == bv.len() {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(at(av, i), at(bv, i))).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    /// Adds a bias vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (nx, nb) = (&self.nodes[x.0], &self.nodes[bias.0]);
        let c = *nx.shape.last().unwrap();
        if nb.value.len() != c {
            return Err(mismatch("add_bias", &nx.shape, &nb.shape));
        }
        let mut out = Vec::with_capacity(nx.value.len());
        for row in nx.value.chunks(c) {
            out.extend(row.iter().zip(&nb.value).map(|(x, b)| x + b));
        }
        let shape = nx.shape.clone();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(shape, out, Op::AddBias(x, bias), rg))
    }

    // ----------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(mismatch("matmul", &na.shape, &nb.shape));
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let out = gemm_new(m, k, n, MatRef::new(&na.value, k), MatRef::new(&nb.value, n));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nx = &self.nodes[x.0];
        if nx.shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                shape: nx.shape.clone(),
                detail: "transpose needs a matrix".into(),
            });
        }
        let (r, c) = (nx.shape[0], nx.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = nx.value[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, r], out, Op::Transpose(x), rg))
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let nx = &self.nodes[x.0];
        if nx.value.iter().any(|v| v.is_nan()) {
            return Err(TensorError::NanInput { op: "softmax" });
        }
        let c = *nx.shape.last().unwrap();
        let mut out = nx.value.clone();
        for row in out.chunks_mut(c) {
            fused::softmax_in_place(row);
        }
        let shape = nx.shape.clone();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax(x), rg))
    }

    // ----------------------------------------------------------------- reductions & layout

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Mean(x), rg)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let nx = &self.nodes[x.0];
        if axis >= nx.shape.len() {
            return Err(TensorError::InvalidShape {
                shape: nx.shape.clone(),
                detail: format!("axis {axis} out of range"),
            });
        }
        let s = AxisSplit::of(&nx.shape, axis);
        let mut out = vec![0.0; s.outer * s.inner];
        let inv = 1.0 / s.len as f64;
        for o in 0..s.outer {
            let dst = &mut out[o * s.inner..(o + 1) * s.inner];
            for a in 0..s.len {
                let src = &nx.value[(o * s.len + a) * s.inner..(o * s.len + a + 1) * s.inner];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let mut shape = nx.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::MeanAxis(x, s), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = check_shape(shape)?;
        let nx = &self.nodes[x.0];
        if n != nx.value.len() {
            return Err(mismatch("reshape", &nx.shape, shape));
        }
        let value = nx.value.clone();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = &self.nodes[parts.first().expect("concat of nothing").0].shape;
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                shape: first.clone(),
                detail: format!("axis {axis} out of range"),
            });
        }
        let mut shape = first.clone();
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            let compatible =
                s.len() == first.len() && s.iter().zip(first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", first, s));
            }
            total += s[axis];
        }
        shape[axis] = total;
        let split = AxisSplit::of(&shape, axis);
        let mut out = vec![0.0; shape.iter().product()];
        let mut offset = 0;
        for p in parts {
            let n = &self.nodes[p.0];
            let len = n.shape[axis];
            let block = len * split.inner;
            for o in 0..split.outer {
                let dst = (o * split.len + offset) * split.inner;
                out[dst..dst + block].copy_from_slice(&n.value[o * block..(o + 1) * block]);
            }
            offset += len;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, out, Op::Concat(parts.to_vec(), split), rg))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let nx = &self.nodes[x.0];
        if axis >= nx.shape.len() || len == 0 || start + len > nx.shape[axis] {
            return Err(TensorError::InvalidShape {
                shape: nx.shape.clone(),
                detail: format!("slice {start}..{} on axis {axis} out of range", start + len),
            });
        }
        let s = AxisSplit::of(&nx.shape, axis);
        let block = len * s.inner;
        let mut out = Vec::with_capacity(s.outer * block);
        for o in 0..s.outer {
            let src = (o * s.len + start) * s.inner;
            out.extend_from_slice(&nx.value[src..src + block]);
        }
        let mut shape = nx.shape.clone();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Slice(x, s, start), rg))
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let nx = &self.nodes[x.0];
        if nx.shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                shape: nx.shape.clone(),
                detail: "gather_rows needs a matrix".into(),
            });
        }
        let (r, c) = (nx.shape[0], nx.shape[1]);
        if index.is_empty() {
            return Err(TensorError::InvalidShape {
                shape: nx.shape.clone(),
                detail: "empty row index".into(),
            });
        }
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(TensorError::InvalidShape {
                    shape: nx.shape.clone(),
                    detail: format!("row {i} out of range"),
                });
            }
            out.extend_from_slice(&nx.value[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![index.len(), c], out, Op::GatherRows(x, index.to_vec()), rg))
    }

    // ----------------------------------------------------------------- convolution

    /// Same-padded, stride-1 cross-correlation.
    /// `x: [L, Cin]` or `[N, L, Cin]`, `w: [K, Cin, Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        let dims = Conv1dDims::infer(xs, ws)?;
        let out = conv::conv1d_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, &dims);
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = dims.cout;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(shape, out, Op::Conv1d(x, w, dims), rg))
    }

    /// Same-padded, stride-1 2D cross-correlation.
    /// `x: [H, W, Cin]` or `[N, H, W, Cin]`, `w: [K, K, Cin, Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        let dims = Conv2dDims::infer(xs, ws)?;
        let out = conv::conv2d_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, &dims);
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = dims.cout;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(shape, out, Op::Conv2d(x, w, dims), rg))
    }

    // ----------------------------------------------------------------- fused recurrent ops

    /// One LSTM cell update from pre-activation gates `[B, 4H]` laid out as
    /// `[input | forget | candidate | output]` and the previous cell `[B, H]`.
    /// Returns `[B, 2H]` holding `h` in the first `H` columns and `c` after.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Result<Var> {
        let (ng, nc) = (&self.nodes[gates.0], &self.nodes[c_prev.0]);
        if ng.shape.len() != 2 || nc.shape.len() != 2 || ng.shape[0] != nc.shape[0] || ng.shape[1] != 4 * nc.shape[1] {
            return Err(mismatch("lstm_cell", &ng.shape, &nc.shape));
        }
        let (b, h) = (nc.shape[0], nc.shape[1]);
        let (out, acts, tanh_c) = fused::lstm_forward(&ng.value, &nc.value, b, h);
        let rg = self.rg(gates) || self.rg(c_prev);
        Ok(self.push(
            vec![b, 2 * h],
            out,
            Op::LstmCell {
                gates,
                c_prev,
                acts,
                tanh_c,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention of one query per sample over
    /// that sample's key/value rows.
    ///
    /// `q: [B, D]`; `k`, `v: [B*L, D]` with the rows of sample `b` at
    /// `b*L .. (b+1)*L`. Each of `heads` heads owns `D / heads` consecutive
    /// columns. Scores are multiplied by `scale` before the softmax.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: f64) -> Result<Var> {
        let (nq, nk, nv) = (&self.nodes[q.0], &self.nodes[k.0], &self.nodes[v.0]);
        let dims = AttentionDims::infer(&nq.shape, &nk.shape, &nv.shape, heads, scale)?;
        let (out, probs) = fused::attention_forward(&nq.value, &nk.value, &nv.value, &dims);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            vec![dims.batch, dims.dim],
            out,
            Op::Attention { q, k, v, dims, probs },
            rg,
        ))
    }

    // ----------------------------------------------------------------- backward

    /// Reverse sweep from a single-element `loss`. Gradients of earlier
    /// sweeps are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = &self.nodes[loss.0].shape;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NotScalar(shape.clone()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            crate::backward::backprop(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

pub(crate) fn op_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    }
}
