//! Feature extractor layout, passthrough and gradients.

use spt_autograd::{grad_check_many, Graph, Rng, Tensor, Var};
use spt_core::features::{F1D_CHANNELS, F2D_CHANNELS, RAW_CHANNELS};
use spt_core::{
    build_feature_matrix, gaf_transform, CurvePair, FeatureExtractor, GafMode, GridSpec, MaterialSpec, NormStats,
    ParamStore,
};

fn pair(l: usize) -> (CurvePair, NormStats) {
    let p = CurvePair::simulate(0, MaterialSpec::new(640.0, 0.21, 2.4), &GridSpec::with_lengths(l, l)).unwrap();
    let norm = NormStats::from_samples(std::slice::from_ref(&p));
    (p, norm)
}

fn extractor(gaf: bool, seed: u64) -> (FeatureExtractor, ParamStore) {
    let mut store = ParamStore::new();
    let fx = FeatureExtractor::new(&mut store, &mut Rng::new(seed), gaf).unwrap();
    (fx, store)
}

fn weigh(g: &mut Graph, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = g
        .constant(&shape, (0..n).map(|i| ((i as f64) * 0.61).cos()).collect())
        .unwrap();
    let y = g.mul(x, w).unwrap();
    g.sum(y)
}

#[test]
fn channel_layout() {
    assert_eq!(RAW_CHANNELS + F1D_CHANNELS + F2D_CHANNELS, 34);
    let (fx, _) = extractor(true, 1);
    assert_eq!(fx.channels(), 34);
    let (fx, _) = extractor(false, 1);
    assert_eq!(fx.channels(), 26);
}

#[test]
fn raw_channels_pass_through_untouched() {
    for l in [8, 17, 64] {
        let (p, norm) = pair(l);
        let img = gaf_transform(&p.load, GafMode::Strict).unwrap();
        let (fx, store) = extractor(true, 2);
        let m = build_feature_matrix(&fx, &store, &p, &img, &norm).unwrap();
        assert_eq!((m.len, m.channels), (l, 34));
        let want: Vec<f64> = p.load.iter().map(|&v| norm.normalize_load(v)).collect();
        assert_eq!(m.column(0), want);
        assert!(m.column(1).iter().all(|&v| v == 2.4 / 4.0));
        assert_eq!(m.row(3).len(), 34);
    }
}

#[test]
fn baseline_matrix_is_a_prefix_of_the_full_one() {
    let (p, norm) = pair(16);
    let img = gaf_transform(&p.load, GafMode::Strict).unwrap();
    let (full, s_full) = extractor(true, 3);
    let (base, s_base) = extractor(false, 3);
    let m = build_feature_matrix(&full, &s_full, &p, &img, &norm).unwrap();
    let b = build_feature_matrix(&base, &s_base, &p, &img, &norm).unwrap();
    assert_eq!(b.channels, 26);
    for i in 0..16 {
        assert_eq!(&m.row(i)[..26], b.row(i));
    }
}

#[test]
fn zero_input_gives_zero_features() {
    let (fx, store) = extractor(true, 4);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let load = g.constant(&[2, 12, 1], vec![0.0; 24]).unwrap();
    let f1 = fx.extract_1d(&mut g, &p, load).unwrap();
    assert_eq!(g.shape(f1), [2, 12, 24]);
    assert!(g.value(f1).iter().all(|&v| v == 0.0));
    let img = g.constant(&[1, 12, 12, 1], vec![0.0; 144]).unwrap();
    let f2 = fx.extract_2d(&mut g, &p, img).unwrap();
    assert_eq!(g.shape(f2), [1, 12, 8]);
    assert!(g.value(f2).iter().all(|&v| v == 0.0));
}

#[test]
fn constant_image_rows_agree_away_from_the_border() {
    let (fx, store) = extractor(true, 5);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let img = g.constant(&[1, 10, 10, 1], vec![0.3; 100]).unwrap();
    let f2 = fx.extract_2d(&mut g, &p, img).unwrap();
    let v = g.value(f2);
    assert_eq!(g.shape(f2), [1, 10, 8]);
    // Zero padding only reaches two rows deep through two 3x3 layers.
    for i in 2..8 {
        assert_eq!(&v[i * 8..(i + 1) * 8], &v[2 * 8..3 * 8]);
    }
    assert_ne!(&v[..8], &v[2 * 8..3 * 8]);
}

#[test]
fn non_square_image_is_rejected() {
    let (fx, store) = extractor(true, 6);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let img = g.constant(&[1, 8, 6, 1], vec![0.1; 48]).unwrap();
    assert!(fx.extract_2d(&mut g, &p, img).is_err());
}

#[test]
fn length_mismatch_is_rejected() {
    let (p, norm) = pair(16);
    let other = gaf_transform(&p.load[..12], GafMode::Strict).unwrap();
    let (fx, store) = extractor(true, 7);
    assert!(build_feature_matrix(&fx, &store, &p, &other, &norm).is_err());
}

#[test]
fn channel_order_is_part_of_the_layout() {
    let (p, norm) = pair(16);
    let img = gaf_transform(&p.load, GafMode::Strict).unwrap();
    let (fx, store) = extractor(true, 8);
    let m = build_feature_matrix(&fx, &store, &p, &img, &norm).unwrap();
    let f1d_first = m.column(2);
    let f2d_first = m.column(2 + F1D_CHANNELS);
    assert_ne!(f1d_first, f2d_first);
}

#[test]
fn raw_channels_have_no_parameter_gradient() {
    let (p, norm) = pair(12);
    let (fx, store) = extractor(true, 9);
    let prepared = spt_core::PreparedSample::new(&p, &norm, true).unwrap();
    let mut g = Graph::new();
    let bound = store.bind(&mut g, true);
    let raw: Vec<f64> = prepared.load.iter().flat_map(|&v| [v, prepared.thickness]).collect();
    let raw = g.constant(&[1, 12, 2], raw).unwrap();
    let load = g.constant(&[1, 12, 1], prepared.load.clone()).unwrap();
    let img = g.constant(&[1, 12, 12, 1], prepared.gaf.clone().unwrap()).unwrap();
    let m = fx.feature_matrix(&mut g, &bound, raw, load, Some(img)).unwrap();
    let first = g.slice(m, 2, 0, 2).unwrap();
    let loss = g.sum(first);
    g.backward(loss).unwrap();
    for &v in bound.vars() {
        assert!(g.grad(v).is_none_or(|d| d.iter().all(|&x| x == 0.0)));
    }
}

#[test]
fn conv_branch_gradients() {
    let (fx, store) = extractor(true, 10);
    let mut rng = Rng::new(11);
    let load = Tensor::uniform(&[2, 9, 1], 1.0, &mut rng).unwrap();
    let img = Tensor::uniform(&[2, 9, 9, 1], 1.0, &mut rng).unwrap();
    let np = store.len();
    let mut inputs = store.tensors().to_vec();
    inputs.extend([load, img]);
    let errs = grad_check_many(
        |g, vs| {
            let p = spt_core::Bound::from_vars(vs[..np].to_vec());
            let a = fx.extract_1d(g, &p, vs[np]).unwrap();
            let b = fx.extract_2d(g, &p, vs[np + 1]).unwrap();
            let (a, b) = (weigh(g, a), weigh(g, b));
            g.add(a, b)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < 1e-4, "input {i}: {e}");
    }
}
