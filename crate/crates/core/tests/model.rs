//! Encoder, decoder, attention and head behaviour, including gradient checks
//! through the recurrences.

use spt_autograd::{grad_check_many, Graph, Rng, Tensor, Var};
use spt_core::{
    Bound, CrossAttention, CurvePair, Dropout, GridSpec, LayerState, LstmStack, MaterialSpec, Mode, ModelConfig,
    NormStats, ParamStore, PreparedSample, Seq2Seq,
};

const H: f64 = 1e-6;

fn rand_vec(n: usize, bound: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(-bound, bound)).collect()
}

fn weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i as f64) * 0.37).sin() + 0.2).collect()
}

/// Weighted sum so that index mix-ups cannot cancel out.
fn weigh(g: &mut Graph, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let w = g.constant(&shape, weights(shape.iter().product())).unwrap();
    let y = g.mul(x, w).unwrap();
    g.sum(y)
}

fn zero_params(store: &mut ParamStore) {
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

fn toy_samples(n: usize, l_in: usize, l_out: usize) -> (Vec<PreparedSample>, NormStats) {
    let grid = GridSpec::with_lengths(l_in, l_out);
    let pairs: Vec<CurvePair> = (0..n)
        .map(|i| {
            let spec = MaterialSpec::new(200.0 + 300.0 * i as f64, 0.1 + 0.05 * i as f64, 1.0 + 0.5 * i as f64);
            CurvePair::simulate(i, spec, &grid).unwrap()
        })
        .collect();
    let norm = NormStats::from_samples(&pairs);
    let prepared = pairs
        .iter()
        .map(|p| PreparedSample::new(p, &norm, true).unwrap())
        .collect();
    (prepared, norm)
}

// ---------------------------------------------------------------- encoder

#[test]
fn encoder_with_zero_parameters_and_input_stays_at_zero() {
    let mut store = ParamStore::new();
    let enc = LstmStack::new(&mut store, &mut Rng::new(1), "enc", 5, 6, 2).unwrap();
    zero_params(&mut store);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(&[3 * 7, 5], vec![0.0; 105]).unwrap();
    let out = enc
        .forward_sequence(&mut g, &p, x, 3, 7, &mut Dropout::disabled())
        .unwrap();
    assert!(g.value(out.h_seq).iter().all(|&v| v == 0.0));
    for s in &out.final_state {
        assert!(g.value(s.c).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn encoder_hidden_states_are_strictly_bounded() {
    let mut rng = Rng::new(2);
    let mut store = ParamStore::new();
    let enc = LstmStack::new(&mut store, &mut rng, "enc", 4, 8, 3).unwrap();
    for t in store.tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&rand_vec(n, 3.0, &mut rng));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(&[2 * 10, 4], rand_vec(80, 5.0, &mut rng)).unwrap();
    let out = enc
        .forward_sequence(&mut g, &p, x, 2, 10, &mut Dropout::disabled())
        .unwrap();
    assert_eq!(g.shape(out.h_seq), [20, 8]);
    assert!(g.value(out.h_seq).iter().all(|v| v.abs() < 1.0));
}

#[test]
fn encoder_rejects_wrong_channel_count() {
    let mut store = ParamStore::new();
    let enc = LstmStack::new(&mut store, &mut Rng::new(3), "enc", 4, 8, 1).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(&[4, 5], vec![0.0; 20]).unwrap();
    assert!(enc
        .forward_sequence(&mut g, &p, x, 1, 4, &mut Dropout::disabled())
        .is_err());
}

#[test]
fn encoder_gradients_through_four_steps_and_two_layers() {
    let mut rng = Rng::new(4);
    let mut store = ParamStore::new();
    let enc = LstmStack::new(&mut store, &mut rng, "enc", 3, 5, 2).unwrap();
    let x = Tensor::new(&[2 * 4, 3], rand_vec(24, 1.0, &mut rng)).unwrap();
    let mut inputs = store.tensors().to_vec();
    inputs.push(x);
    let errs = grad_check_many(
        |g, vs| {
            let p = Bound::from_vars(vs[..vs.len() - 1].to_vec());
            let out = enc
                .forward_sequence(g, &p, vs[vs.len() - 1], 2, 4, &mut Dropout::disabled())
                .unwrap();
            let a = weigh(g, out.h_seq);
            let b = weigh(g, out.final_state[1].c);
            g.add(a, b)
        },
        &inputs,
        H,
    )
    .unwrap();
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < 1e-4, "input {i}: {e}");
    }
}

// ---------------------------------------------------------------- decoder

fn decoder_model(seed: u64) -> Seq2Seq {
    let cfg = ModelConfig {
        l_in: 6,
        l_out: 3,
        hidden_size: 8,
        num_layers: 2,
        num_heads: 2,
        dropout: 0.0,
        paper_exact: false,
        gaf_enabled: false,
    };
    Seq2Seq::new(cfg, &mut Rng::new(seed)).unwrap()
}

#[test]
fn decoder_with_zero_parameters_outputs_zero() {
    let mut model = decoder_model(5);
    zero_params(model.params_mut());
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let mut state: Vec<LayerState> = (0..2).map(|_| LayerState::zeros(&mut g, 2, 8).unwrap()).collect();
    let prev = g.constant(&[2, 1], vec![0.3, -0.7]).unwrap();
    for _ in 0..3 {
        let (o, next) = model
            .decoder_step(&mut g, &p, prev, &state, &mut Dropout::disabled())
            .unwrap();
        assert!(g.value(o).iter().all(|&v| v == 0.0));
        for s in &next {
            assert!(g.value(s.c).iter().all(|&v| v == 0.0));
            assert!(g.value(s.h.unwrap()).iter().all(|&v| v == 0.0));
        }
        state = next;
    }
}

#[test]
fn decoder_step_is_pure() {
    let model = decoder_model(6);
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let mut rng = Rng::new(7);
    let state: Vec<LayerState> = (0..2)
        .map(|_| LayerState {
            h: Some(g.constant(&[1, 8], rand_vec(8, 0.9, &mut rng)).unwrap()),
            c: g.constant(&[1, 8], rand_vec(8, 2.0, &mut rng)).unwrap(),
        })
        .collect();
    let prev = g.constant(&[1, 1], vec![0.4]).unwrap();
    let (a, sa) = model
        .decoder_step(&mut g, &p, prev, &state, &mut Dropout::disabled())
        .unwrap();
    let (b, sb) = model
        .decoder_step(&mut g, &p, prev, &state, &mut Dropout::disabled())
        .unwrap();
    assert_eq!(g.value(a), g.value(b));
    assert_eq!(g.value(sa[1].c), g.value(sb[1].c));
}

#[test]
fn decoder_rejects_state_mismatch() {
    let model = decoder_model(8);
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let prev = g.constant(&[1, 1], vec![0.0]).unwrap();
    let one = vec![LayerState::zeros(&mut g, 1, 8).unwrap()];
    assert!(model
        .decoder_step(&mut g, &p, prev, &one, &mut Dropout::disabled())
        .is_err());
    let wide: Vec<LayerState> = (0..2).map(|_| LayerState::zeros(&mut g, 1, 9).unwrap()).collect();
    assert!(model
        .decoder_step(&mut g, &p, prev, &wide, &mut Dropout::disabled())
        .is_err());
}

#[test]
fn decoder_gradients_through_three_steps() {
    let model = decoder_model(9);
    let mut rng = Rng::new(10);
    let h0 = Tensor::new(&[2, 8], rand_vec(16, 0.9, &mut rng)).unwrap();
    let c0 = Tensor::new(&[2, 8], rand_vec(16, 1.5, &mut rng)).unwrap();
    let mut inputs = model.params().tensors().to_vec();
    let np = inputs.len();
    inputs.extend([h0, c0]);
    let errs = grad_check_many(
        |g, vs| {
            let p = Bound::from_vars(vs[..np].to_vec());
            let mut state = vec![
                LayerState {
                    h: Some(vs[np]),
                    c: vs[np + 1]
                };
                2
            ];
            let mut prev = g.constant(&[2, 1], vec![0.0, 0.5]).unwrap();
            let mut total = g.scalar(0.0);
            for _ in 0..3 {
                let (o, next) = model
                    .decoder_step(g, &p, prev, &state, &mut Dropout::disabled())
                    .unwrap();
                state = next;
                let w = weigh(g, o);
                total = g.add(total, w)?;
                prev = g.slice(o, 1, 0, 1)?;
            }
            Ok(total)
        },
        &inputs,
        H,
    )
    .unwrap();
    for (i, e) in errs.iter().enumerate() {
        // The attention and head parameters are unused here and read as 0.
        assert!(*e < 1e-4, "input {i}: {e}");
    }
}

// ---------------------------------------------------------------- attention

fn paper_attention() -> CrossAttention {
    CrossAttention::new(&mut ParamStore::new(), &mut Rng::new(0), 4, 1, true).unwrap()
}

/// Softmax of raw dot products and the weighted sum, written out directly.
fn direct_attention(o: &[f64], h: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let scores: Vec<f64> = h.iter().map(|r| r.iter().zip(o).map(|(a, b)| a * b).sum()).collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let alpha: Vec<f64> = e.iter().map(|v| v / z).collect();
    let mut ctx = vec![0.0; o.len()];
    for (a, r) in alpha.iter().zip(h) {
        for (c, v) in ctx.iter_mut().zip(r) {
            *c += a * v;
        }
    }
    (ctx, alpha)
}

fn run_attention(att: &CrossAttention, store: &ParamStore, o: &[f64], h: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let d = o.len() / n;
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let ov = g.constant(&[n, d], o.to_vec()).unwrap();
    let hv = g.constant(&[h.len() / d, d], h.to_vec()).unwrap();
    let mem = att.memory(&mut g, &p, hv).unwrap();
    let (ctx, alpha) = att.attend(&mut g, &p, ov, mem).unwrap();
    (g.value(ctx).to_vec(), alpha)
}

#[test]
fn equal_scores_give_uniform_weights() {
    let att = paper_attention();
    // o is orthogonal to every row of h.
    let o = [0.0, 0.0, 1.0, 0.0];
    let h = [0.3, 0.1, 0.0, 0.0, -0.4, 0.2, 0.0, 0.0, 0.9, -0.5, 0.0, 0.0];
    let (_, alpha) = run_attention(&att, &ParamStore::new(), &o, &h, 1);
    for a in alpha {
        assert!((a - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn single_state_gets_all_the_weight() {
    let att = paper_attention();
    let (ctx, alpha) = run_attention(
        &att,
        &ParamStore::new(),
        &[0.2, -0.3, 0.5, 0.1],
        &[0.7, 0.1, -0.2, 0.4],
        1,
    );
    assert_eq!(alpha, vec![1.0]);
    assert_eq!(ctx, vec![0.7, 0.1, -0.2, 0.4]);
}

#[test]
fn empty_memory_is_rejected() {
    let att = paper_attention();
    let mut g = Graph::new();
    let p = ParamStore::new().bind(&mut g, false);
    let o = g.constant(&[1, 4], vec![0.0; 4]).unwrap();
    // An empty memory is refused either when built or when attended to.
    let rejected = match g.constant(&[0, 4], vec![]) {
        Err(_) => true,
        Ok(h) => {
            let mem = att.memory(&mut g, &p, h).unwrap();
            att.attend(&mut g, &p, o, mem).is_err()
        }
    };
    assert!(rejected);
}

#[test]
fn paper_exact_attention_matches_direct_formula() {
    let mut rng = Rng::new(11);
    let att = paper_attention();
    let store = ParamStore::new();
    for _ in 0..1000 {
        let len = 1 + rng.below(12);
        let o = rand_vec(4, 2.0, &mut rng);
        let h = rand_vec(4 * len, 1.0, &mut rng);
        let rows: Vec<Vec<f64>> = h.chunks(4).map(<[f64]>::to_vec).collect();
        let (ctx, alpha) = run_attention(&att, &store, &o, &h, 1);
        let (want_ctx, want_alpha) = direct_attention(&o, &rows);
        for (a, b) in ctx.iter().zip(&want_ctx).chain(alpha.iter().zip(&want_alpha)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(alpha.iter().all(|&a| a >= 0.0));
        for k in 0..4 {
            let lo = rows.iter().map(|r| r[k]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max);
            assert!(ctx[k] >= lo - 1e-12 && ctx[k] <= hi + 1e-12);
        }
    }
}

#[test]
fn multi_head_weights_form_a_simplex() {
    let mut rng = Rng::new(12);
    let mut store = ParamStore::new();
    let att = CrossAttention::new(&mut store, &mut rng, 8, 4, false).unwrap();
    assert_eq!(att.heads(), 4);
    for _ in 0..1000 {
        let n = 1 + rng.below(3);
        let len = 1 + rng.below(10);
        let o = rand_vec(8 * n, 3.0, &mut rng);
        let h = rand_vec(8 * n * len, 1.0, &mut rng);
        let (_, alpha) = run_attention(&att, &store, &o, &h, n);
        for row in alpha.chunks(len) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&a| a >= 0.0));
        }
    }
}

#[test]
fn multi_head_requires_divisible_width() {
    assert!(CrossAttention::new(&mut ParamStore::new(), &mut Rng::new(0), 10, 4, false).is_err());
}

// ---------------------------------------------------------------- head

#[test]
fn head_with_zero_weights_returns_its_bias() {
    let mut model = decoder_model(13);
    let names: Vec<String> = model.params().names().to_vec();
    for (name, t) in names.iter().zip(model.params_mut().tensors_mut()) {
        if name == "head.weight" {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        if name == "head.bias" {
            t.data_mut()[0] = 0.625;
        }
    }
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let o = g.constant(&[2, 8], weights(16)).unwrap();
    let c = g.constant(&[2, 8], weights(16)).unwrap();
    let y = model.predict_head(&mut g, &p, o, c).unwrap();
    assert_eq!(g.value(y), [0.625, 0.625]);
}

#[test]
fn head_is_linear_without_bias() {
    let model = decoder_model(14);
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let mut rng = Rng::new(15);
    let (o, c) = (rand_vec(8, 1.0, &mut rng), rand_vec(8, 1.0, &mut rng));
    let mut eval = |scale: f64| {
        let ov = g.constant(&[1, 8], o.iter().map(|v| v * scale).collect()).unwrap();
        let cv = g.constant(&[1, 8], c.iter().map(|v| v * scale).collect()).unwrap();
        let y = model.predict_head(&mut g, &p, ov, cv).unwrap();
        g.value(y)[0]
    };
    let (y0, y1, y2) = (eval(0.0), eval(1.0), eval(2.0));
    assert!(((y2 - y1) - (y1 - y0)).abs() < 1e-12);
}

#[test]
fn head_gradients() {
    let model = decoder_model(16);
    let mut rng = Rng::new(17);
    let mut inputs = model.params().tensors().to_vec();
    let np = inputs.len();
    inputs.push(Tensor::new(&[3, 8], rand_vec(24, 1.0, &mut rng)).unwrap());
    inputs.push(Tensor::new(&[3, 8], rand_vec(24, 1.0, &mut rng)).unwrap());
    let errs = grad_check_many(
        |g, vs| {
            let p = Bound::from_vars(vs[..np].to_vec());
            let y = model.predict_head(g, &p, vs[np], vs[np + 1]).unwrap();
            Ok(weigh(g, y))
        },
        &inputs,
        H,
    )
    .unwrap();
    assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
}

// ---------------------------------------------------------------- full model

fn small_config(l_in: usize, l_out: usize) -> ModelConfig {
    ModelConfig {
        l_in,
        l_out,
        hidden_size: 8,
        num_layers: 1,
        num_heads: 2,
        dropout: 0.0,
        paper_exact: false,
        gaf_enabled: true,
    }
}

fn forward_values(model: &Seq2Seq, samples: &[&PreparedSample], mode: Mode) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let out = model.forward(&mut g, &p, samples, mode).unwrap();
    (g.value(out.predictions).to_vec(), out.decoder_inputs)
}

#[test]
fn teacher_forcing_ratio_must_be_a_probability() {
    let (samples, _) = toy_samples(1, 8, 6);
    let model = Seq2Seq::new(small_config(8, 6), &mut Rng::new(18)).unwrap();
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    for r in [-0.1, 1.5, f64::NAN] {
        let mode = Mode::Training {
            rng: &mut Rng::new(0),
            teacher_forcing_ratio: r,
        };
        assert!(model.forward(&mut g, &p, &[&samples[0]], mode).is_err());
    }
}

#[test]
fn full_teacher_forcing_feeds_shifted_ground_truth() {
    let (samples, _) = toy_samples(3, 8, 6);
    let refs: Vec<&PreparedSample> = samples.iter().collect();
    let model = Seq2Seq::new(small_config(8, 6), &mut Rng::new(19)).unwrap();
    let mode = Mode::Training {
        rng: &mut Rng::new(1),
        teacher_forcing_ratio: 1.0,
    };
    let (_, inputs) = forward_values(&model, &refs, mode);
    assert_eq!(inputs[0], vec![0.0; 3]);
    for (t, input) in inputs.iter().enumerate().take(6).skip(1) {
        let want: Vec<f64> = samples.iter().map(|s| s.target[t - 1]).collect();
        assert_eq!(*input, want);
    }
}

#[test]
fn without_teacher_forcing_targets_are_ignored() {
    let (samples, _) = toy_samples(2, 8, 6);
    let mut altered = samples.clone();
    for s in &mut altered {
        s.target.iter_mut().for_each(|v| *v = 1.0 - *v);
    }
    let model = Seq2Seq::new(small_config(8, 6), &mut Rng::new(20)).unwrap();
    let run = |ss: &[PreparedSample]| {
        let refs: Vec<&PreparedSample> = ss.iter().collect();
        let mode = Mode::Training {
            rng: &mut Rng::new(2),
            teacher_forcing_ratio: 0.0,
        };
        forward_values(&model, &refs, mode).0
    };
    assert_eq!(run(&samples), run(&altered));
    let inference = forward_values(&model, &samples.iter().collect::<Vec<_>>(), Mode::Inference).0;
    assert_eq!(run(&samples), inference);
}

#[test]
fn seeded_model_predicts_bitwise_identically() {
    let (samples, _) = toy_samples(4, 8, 6);
    let a = Seq2Seq::new(small_config(8, 6), &mut Rng::new(21)).unwrap();
    let b = Seq2Seq::new(small_config(8, 6), &mut Rng::new(21)).unwrap();
    let pa = a.predict(&samples).unwrap();
    let pb = b.predict(&samples).unwrap();
    assert_eq!(pa, pb);
    let ma = Mode::Training {
        rng: &mut Rng::new(3),
        teacher_forcing_ratio: 0.5,
    };
    let mb = Mode::Training {
        rng: &mut Rng::new(3),
        teacher_forcing_ratio: 0.5,
    };
    let refs: Vec<&PreparedSample> = samples.iter().collect();
    assert_eq!(forward_values(&a, &refs, ma), forward_values(&b, &refs, mb));
}

#[test]
fn batched_and_single_inference_agree() {
    let (samples, _) = toy_samples(5, 8, 6);
    let model = Seq2Seq::new(small_config(8, 6), &mut Rng::new(22)).unwrap();
    let batched = model.predict(&samples).unwrap();
    for (s, row) in samples.iter().zip(&batched) {
        let single = model.predict(std::slice::from_ref(s)).unwrap();
        for (a, b) in single[0].iter().zip(row) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn paper_exact_model_has_no_attention_parameters() {
    let cfg = ModelConfig {
        paper_exact: true,
        num_heads: 3,
        ..small_config(8, 6)
    };
    let model = Seq2Seq::new(cfg, &mut Rng::new(23)).unwrap();
    assert!(model.params().names().iter().all(|n| !n.starts_with("attn.")));
    assert!(model.attention().is_paper_exact());
    let (samples, _) = toy_samples(2, 8, 6);
    let out = model.predict(&samples).unwrap();
    assert!(out.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn attention_weights_are_reported_per_step() {
    let (samples, _) = toy_samples(2, 8, 6);
    let model = Seq2Seq::new(small_config(8, 6), &mut Rng::new(24)).unwrap();
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let refs: Vec<&PreparedSample> = samples.iter().collect();
    let out = model.forward(&mut g, &p, &refs, Mode::Inference).unwrap();
    assert_eq!(out.alpha.len(), 6);
    for step in &out.alpha {
        for row in step.chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
