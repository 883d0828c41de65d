use spt_autograd::{Graph, Rng, Tensor, TensorError, UnaryOp};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn tracked(shape: &[usize], data: &[f64]) -> Tensor {
    t(shape, data).with_grad()
}

#[test]
fn tensor_rejects_inconsistent_shapes() {
    assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::new(&[0, 2], vec![]).is_err());
    let x = tracked(&[3], &[1.0, 2.0, 3.0]);
    assert_eq!(x.grad().unwrap(), &[0.0; 3]);
}

#[test]
fn sigmoid_and_tanh_at_zero() {
    let mut g = Graph::new();
    let x = g.leaf(&tracked(&[1], &[0.0]));
    let s = g.sigmoid(x);
    assert_eq!(g.value(s), &[0.5]);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25]);

    let mut g = Graph::new();
    let x = g.leaf(&tracked(&[1], &[0.0]));
    let y = g.tanh(x);
    assert_eq!(g.value(y), &[0.0]);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0]);
}

#[test]
fn product_rule_on_shared_operand() {
    let mut g = Graph::new();
    let x = g.leaf(&tracked(&[1], &[3.0]));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_identity_and_accumulation() {
    let mut g = Graph::new();
    let x = g.leaf(&tracked(&[1], &[1.7]));
    g.backward(x).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0]);

    let mut g = Graph::new();
    let x = g.leaf(&tracked(&[1], &[1.7]));
    let y = g.add(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0]);
    assert_eq!(g.grad(y).unwrap(), &[1.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(&tracked(&[2], &[1.0, 2.0]));
    assert_eq!(g.backward(x), Err(TensorError::NotScalar(vec![2])));
}

#[test]
fn grads_accumulate_into_tensor() {
    let mut p = tracked(&[2], &[1.0, -1.0]);
    for _ in 0..2 {
        let mut g = Graph::new();
        let x = g.leaf(&p);
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.accumulate_grad(x, &mut p).unwrap();
    }
    assert_eq!(p.grad().unwrap(), &[2.0, 2.0]);
    p.zero_grad();
    assert_eq!(p.grad().unwrap(), &[0.0, 0.0]);
}

#[test]
fn binary_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(&t(&[2, 3], &[0.0; 6]));
    let b = g.leaf(&t(&[3, 2], &[0.0; 6]));
    let err = g.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn scalar_broadcast() {
    let mut g = Graph::new();
    let a = g.leaf(&tracked(&[3], &[1.0, 2.0, 3.0]));
    let c = g.leaf(&tracked(&[1], &[2.0]));
    let y = g.mul(a, c).unwrap();
    assert_eq!(g.value(y), &[2.0, 4.0, 6.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(c).unwrap(), &[6.0]);
    assert_eq!(g.grad(a).unwrap(), &[2.0, 2.0, 2.0]);
}

#[test]
fn log_and_pow_domains() {
    let mut g = Graph::new();
    let x = g.leaf(&t(&[2], &[1.0, 0.0]));
    assert!(matches!(g.log(x), Err(TensorError::Domain { op: "log", .. })));
    let y = g.leaf(&t(&[1], &[-2.0]));
    assert!(g.powf(y, 0.5).is_err());
    let sq = g.powf(y, 2.0).unwrap();
    assert_eq!(g.value(sq), &[4.0]);
    let z = g.unary(UnaryOp::Exp, x).unwrap();
    assert_eq!(g.value(z)[1], 1.0);
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let ones = g.leaf(&t(&[2, 1], &[1.0, 1.0]));
    let c = g.matmul(a, ones).unwrap();
    assert_eq!(g.shape(c), &[2, 1]);
    assert_eq!(g.value(c), &[3.0, 7.0]);

    let mut rng = Rng::new(3);
    let m = Tensor::uniform(&[3, 4], 1.0, &mut rng).unwrap();
    let eye = Tensor::new(&[4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
    let mv = g.leaf(&m);
    let ev = g.leaf(&eye);
    let p = g.matmul(mv, ev).unwrap();
    assert_eq!(g.value(p), m.data());

    assert!(g.matmul(a, mv).is_err());
}

#[test]
fn matmul_gradient_is_row_sums() {
    // d sum(A B) / dA[i][j] = sum_k B[j][k]; checked against central differences.
    let mut rng = Rng::new(11);
    let a = Tensor::uniform(&[3, 4], 1.0, &mut rng).unwrap().with_grad();
    let b = Tensor::uniform(&[4, 5], 1.0, &mut rng).unwrap();
    let mut g = Graph::new();
    let av = g.leaf(&a);
    let bv = g.leaf(&b);
    let c = g.matmul(av, bv).unwrap();
    let s = g.sum(c);
    g.backward(s).unwrap();
    let grad = g.grad(av).unwrap();

    let f = |a: &Tensor| -> f64 {
        let mut g = Graph::new();
        let av = g.leaf(a);
        let bv = g.leaf(&b);
        let c = g.matmul(av, bv).unwrap();
        g.value(c).iter().sum()
    };
    let h = 1e-6;
    for (idx, &want) in grad.iter().enumerate().take(12) {
        let mut p = a.clone();
        p.data_mut()[idx] += h;
        let mut m = a.clone();
        m.data_mut()[idx] -= h;
        let numeric = (f(&p) - f(&m)) / (2.0 * h);
        assert!((numeric - want).abs() < 1e-8, "{idx}: {numeric} vs {want}");
        let row_sum: f64 = b.data()[(idx % 4) * 5..(idx % 4) * 5 + 5].iter().sum();
        assert!((row_sum - grad[idx]).abs() < 1e-12);
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.leaf(&t(&[2], &[0.0, 0.0]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5]);

    for c in [-1e3, 0.0, 42.0, 1e3] {
        let x = g.leaf(&t(&[1], &[c]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y), &[1.0]);
    }

    let x = g.leaf(&t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
    let y = g.softmax(x).unwrap();
    for (got, want) in g.value(y).iter().zip([1.0 / 6.0, 1.0 / 3.0, 0.5]) {
        assert!((got - want).abs() < 1e-15);
    }

    let x = g.leaf(&t(&[2], &[0.0, f64::NAN]));
    assert_eq!(g.softmax(x), Err(TensorError::NanInput { op: "softmax" }));
}

#[test]
fn conv1d_examples() {
    let mut g = Graph::new();
    let x = g.leaf(&t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]));
    let w = g.leaf(&t(&[3, 1, 1], &[1.0, 0.0, -1.0]));
    let y = g.conv1d(x, w).unwrap();
    assert_eq!(g.value(y), &[-2.0, -2.0, -2.0, 3.0]);

    let zero = g.leaf(&t(&[3, 1, 1], &[0.0; 3]));
    let y = g.conv1d(x, zero).unwrap();
    assert_eq!(g.value(y), &[0.0; 4]);

    let ident = g.leaf(&t(&[3, 1, 1], &[0.0, 1.0, 0.0]));
    let y = g.conv1d(x, ident).unwrap();
    assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);

    let even = g.leaf(&t(&[2, 1, 1], &[1.0, 1.0]));
    assert_eq!(g.conv1d(x, even), Err(TensorError::EvenKernel { op: "conv1d", k: 2 }));
}

#[test]
fn conv_identity_kernels_are_exact_on_random_input() {
    let mut rng = Rng::new(5);
    let mut g = Graph::new();
    let x1 = Tensor::uniform(&[2, 9, 3], 10.0, &mut rng).unwrap();
    let mut w1 = vec![0.0; 5 * 3 * 3];
    for c in 0..3 {
        w1[(2 * 3 + c) * 3 + c] = 1.0;
    }
    let xv = g.leaf(&x1);
    let wv = g.leaf(&t(&[5, 3, 3], &w1));
    let y = g.conv1d(xv, wv).unwrap();
    assert_eq!(g.value(y), x1.data());

    let x2 = Tensor::uniform(&[2, 6, 5, 2], 10.0, &mut rng).unwrap();
    let mut w2 = vec![0.0; 3 * 3 * 2 * 2];
    for c in 0..2 {
        w2[((3 + 1) * 2 + c) * 2 + c] = 1.0;
    }
    let xv = g.leaf(&x2);
    let wv = g.leaf(&t(&[3, 3, 2, 2], &w2));
    let y = g.conv2d(xv, wv).unwrap();
    assert_eq!(g.value(y), x2.data());
}

#[test]
fn conv2d_ones_kernel_counts_support() {
    let mut g = Graph::new();
    let x = g.leaf(&t(&[3, 3, 1], &[1.0; 9]));
    let w = g.leaf(&t(&[3, 3, 1, 1], &[1.0; 9]));
    let y = g.conv2d(x, w).unwrap();
    let v = g.value(y);
    assert_eq!(v[4], 9.0);
    assert_eq!([v[0], v[2], v[6], v[8]], [4.0; 4]);
    assert_eq!([v[1], v[3], v[5], v[7]], [6.0; 4]);
}

#[test]
fn conv2d_rejects_bad_shapes() {
    let mut g = Graph::new();
    let x = g.leaf(&t(&[3, 3, 2], &[1.0; 18]));
    let w = g.leaf(&t(&[3, 3, 1, 1], &[1.0; 9]));
    assert!(matches!(g.conv2d(x, w), Err(TensorError::ShapeMismatch { .. })));
    let w = g.leaf(&t(&[2, 2, 2, 1], &[1.0; 8]));
    assert_eq!(g.conv2d(x, w), Err(TensorError::EvenKernel { op: "conv2d", k: 2 }));
}

#[test]
fn layout_ops() {
    let mut g = Graph::new();
    let a = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.leaf(&t(&[2, 1], &[9.0, 8.0]));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.value(c), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    let s = g.slice(c, 1, 1, 2).unwrap();
    assert_eq!(g.value(s), &[2.0, 9.0, 4.0, 8.0]);
    let r = g.gather_rows(c, &[1, 1, 0]).unwrap();
    assert_eq!(g.shape(r), &[3, 3]);
    assert_eq!(&g.value(r)[..3], &[3.0, 4.0, 8.0]);
    let m = g.mean_axis(c, 0).unwrap();
    assert_eq!(g.value(m), &[2.0, 3.0, 8.5]);
    let tr = g.transpose(a).unwrap();
    assert_eq!(g.value(tr), &[1.0, 3.0, 2.0, 4.0]);
    assert!(g.concat(&[a, tr, b], 0).is_err());
    assert!(g.slice(c, 1, 2, 2).is_err());
}

#[test]
fn lstm_cell_zero_state_stays_zero() {
    let mut g = Graph::new();
    let gates = g.leaf(&t(&[2, 12], &[0.0; 24]));
    let c = g.leaf(&t(&[2, 3], &[0.0; 6]));
    let out = g.lstm_cell(gates, c).unwrap();
    assert_eq!(g.value(out), &[0.0; 12]);
}

#[test]
fn attention_uniform_when_scores_tie() {
    let mut g = Graph::new();
    let q = g.leaf(&t(&[1, 2], &[0.0, 0.0]));
    let k = g.leaf(&t(&[4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
    let ctx = g.attention(q, k, k, 1, 1.0).unwrap();
    assert_eq!(g.attention_probs(ctx).unwrap(), &[0.25; 4]);
    assert_eq!(g.value(ctx), &[4.0, 5.0]);
    assert!(g.attention(q, k, k, 3, 1.0).is_err());
}

#[test]
fn rng_streams_reproduce_a_million_draws() {
    let mut a = Rng::new(20240501);
    let mut b = Rng::new(20240501);
    for _ in 0..1_000_000 {
        assert_eq!(a.next_u64(), b.next_u64());
    }
}

#[test]
fn rng_xoshiro_reference_value() {
    // xoshiro256** seeded through splitmix64 with seed 42.
    assert_eq!(Rng::new(42).next_u64(), 1546998764402558742);
}
