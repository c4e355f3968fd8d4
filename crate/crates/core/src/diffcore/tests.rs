use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::UbrError;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn conv_all_ones() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::filled(vec![1, 1, 3, 3], 1.0).unwrap());
    let k = g.constant(Tensor::filled(vec![1, 1, 2, 2], 1.0).unwrap());
    let b = g.constant(Tensor::zeros(vec![1]).unwrap());
    let y = g.conv2d(x, k, b, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), &[4.0; 4]);
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = random(&[2, 1, 5, 4], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
    let b = g.constant(t(&[1], &[0.0]));
    let y = g.conv2d(x, k, b, 1, 0).unwrap();
    assert_eq!(g.value(y), &input);
}

#[test]
fn conv_zero_input_gives_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4]).unwrap());
    let k = g.constant(random(&[3, 2, 3, 3], &mut rng));
    let b = g.constant(t(&[3], &[0.5, -1.0, 2.0]));
    let y = g.conv2d(x, k, b, 1, 1).unwrap();
    let v = g.value(y);
    assert_eq!(v.shape(), &[1, 3, 4, 4]);
    for (c, plane) in v.data().chunks(16).enumerate() {
        assert!(plane.iter().all(|&p| p == [0.5, -1.0, 2.0][c]));
    }
}

#[test]
fn conv_output_extent_and_no_flip() {
    // 1×5 row [1..5] against kernel [1, 0, -1]: cross-correlation gives x[i] - x[i+2] = -2.
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 1, 5], &[1.0, 2.0, 3.0, 4.0, 5.0]));
    let k = g.constant(t(&[1, 1, 1, 3], &[1.0, 0.0, -1.0]));
    let b = g.constant(t(&[1], &[0.0]));
    let y = g.conv2d(x, k, b, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[-2.0, -2.0, -2.0]);

    // H' = floor((7 + 2 - 3) / 2) + 1 = 4
    let x = g.constant(Tensor::zeros(vec![1, 1, 7, 7]).unwrap());
    let k = g.constant(Tensor::zeros(vec![2, 1, 3, 3]).unwrap());
    let b = g.constant(Tensor::zeros(vec![2]).unwrap());
    let y = g.conv2d(x, k, b, 2, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 4, 4]);
}

#[test]
fn conv_shape_errors_name_axis() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4]).unwrap());
    let k = g.constant(Tensor::zeros(vec![1, 3, 3, 3]).unwrap());
    let b = g.constant(Tensor::zeros(vec![1]).unwrap());
    match g.conv2d(x, k, b, 1, 0) {
        Err(UbrError::ShapeMismatch { axis, .. }) => assert_eq!(axis, "in_channels"),
        other => panic!("unexpected {other:?}"),
    }
    let k = g.constant(Tensor::zeros(vec![1, 2, 5, 3]).unwrap());
    match g.conv2d(x, k, b, 1, 0) {
        Err(UbrError::ShapeMismatch { axis, .. }) => assert_eq!(axis, "height"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn relu_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let x = g.constant(t(&[2], &[-3.0, -0.5]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    let x = g.constant(t(&[2], &[3.0, 0.5]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[3.0, 0.5]);
}

#[test]
fn relu_gradient_is_zero_at_zero() {
    let mut g = Graph::new();
    let x = g.parameter(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn maxpool_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    let x = g.constant(t(&[1, 1, 2, 4], &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]));
    let y = g.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 2]);
    assert_eq!(g.value(y).data(), &[4.0, 8.0]);

    let x = g.constant(Tensor::filled(vec![1, 2, 4, 6], 1.5).unwrap());
    let y = g.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 2, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 1.5));

    assert!(g.maxpool2d(x, 5, 1).is_err());
}

#[test]
fn maxpool_ties_route_to_first_maximum() {
    let mut g = Graph::new();
    let x = g.parameter(Tensor::filled(vec![1, 1, 2, 2], 7.0).unwrap());
    let y = g.maxpool2d(x, 2, 2).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn global_avg_pool_examples() {
    let mut g = Graph::new();
    let x = g.parameter(t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 5.0]));
    let y = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2]);
    assert_eq!(g.value(y).data(), &[2.5, 5.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.25));

    let x = g.constant(t(&[2, 1, 1, 1], &[-3.0, 9.0]));
    let y = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(y).data(), &[-3.0, 9.0]);
}

#[test]
fn fully_connected_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = g.constant(t(&[2, 1], &[1.0, 3.0]));
    let b = g.constant(t(&[1], &[0.5]));
    let y = g.fully_connected(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[7.5]);

    let x = g.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.25, 9.0]));
    let w = g.constant(Tensor::zeros(vec![3, 2]).unwrap());
    let b = g.constant(t(&[2], &[4.0, -1.0]));
    let y = g.fully_connected(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, -1.0, 4.0, -1.0]);

    let eye = g.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let zero = g.constant(Tensor::zeros(vec![3]).unwrap());
    let y = g.fully_connected(x, eye, zero).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let bad = g.constant(Tensor::zeros(vec![2, 1]).unwrap());
    assert!(g.fully_connected(x, bad, b).is_err());
}

#[test]
fn sigmoid_examples() {
    let mut g = Graph::new();
    let x = g.parameter(t(&[1], &[0.0]));
    let y = g.sigmoid(x);
    assert_eq!(g.value(y).data(), &[0.5]);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.25]);
    assert!((sigmoid(1.0) - 0.731_058_578_6).abs() < 1e-10);
}

#[test]
fn sum_backward_gives_ones() {
    let mut g = Graph::new();
    let x = g.parameter(Tensor::filled(vec![2, 3], 0.3).unwrap());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.parameter(Tensor::zeros(vec![2]).unwrap());
    let y = g.relu(x);
    assert!(matches!(g.backward(y), Err(UbrError::NonScalarOutput(_))));
}

#[test]
fn repeated_backward_resets_gradients() {
    let mut g = Graph::new();
    let x = g.parameter(t(&[2], &[1.0, -2.0]));
    let y = g.smooth_l1(x);
    let s = g.sum(y);
    g.backward(s).unwrap();
    let first = g.grad(x).unwrap().clone();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &first);
}

#[test]
fn diff_values() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 3], &[0.0, 1.0, 3.0, 5.0, 5.0, 4.0]));
    let d = g.diff(x).unwrap();
    assert_eq!(g.value(d).shape(), &[2, 2]);
    assert_eq!(g.value(d).data(), &[1.0, 2.0, 0.0, -1.0]);
    let one = g.constant(t(&[3, 1], &[0.0; 3]));
    assert!(g.diff(one).is_err());
}

// --- finite-difference checks, one per operation ---

fn checker() -> GradChecker {
    GradChecker::new(1e-5, 1e-4)
}

fn assert_passes(report: &GradCheckReport) {
    assert!(report.passed(), "{report:#?}");
}

fn conv_case(seed: u64, stride: usize, padding: usize) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = vec![
        ("input".to_string(), random(&[2, 2, 5, 6], &mut rng)),
        ("kernels".to_string(), random(&[3, 2, 3, 2], &mut rng)),
        ("bias".to_string(), random(&[3], &mut rng)),
    ];
    checker()
        .check(&params, |g, p| {
            let y = g.conv2d(p[0], p[1], p[2], stride, padding)?;
            let s = g.sigmoid(y);
            Ok(g.sum(s))
        })
        .unwrap()
}

#[test]
fn conv2d_matches_finite_differences() {
    for (seed, stride, padding) in [(1, 1, 0), (2, 1, 1), (3, 2, 1), (4, 2, 0)] {
        assert_passes(&conv_case(seed, stride, padding));
    }
}

#[test]
fn pointwise_conv_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = vec![
        ("input".to_string(), random(&[2, 3, 3, 3], &mut rng)),
        ("kernels".to_string(), random(&[4, 3, 1, 1], &mut rng)),
        ("bias".to_string(), random(&[4], &mut rng)),
    ];
    let report = checker()
        .check(&params, |g, p| {
            let y = g.conv2d(p[0], p[1], p[2], 1, 0)?;
            let s = g.sigmoid(y);
            Ok(g.sum(s))
        })
        .unwrap();
    assert_passes(&report);
}

#[test]
fn relu_pool_gap_fc_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = vec![
        ("input".to_string(), random(&[2, 3, 4, 4], &mut rng)),
        ("weights".to_string(), random(&[3, 2], &mut rng)),
        ("bias".to_string(), random(&[2], &mut rng)),
    ];
    let report = checker()
        .check(&params, |g, p| {
            let r = g.relu(p[0]);
            let m = g.maxpool2d(r, 2, 2)?;
            let a = g.global_avg_pool(m)?;
            let f = g.fully_connected(a, p[1], p[2])?;
            let s = g.sigmoid(f);
            Ok(g.sum(s))
        })
        .unwrap();
    assert_passes(&report);
}

#[test]
fn loss_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = vec![("scores".to_string(), random(&[3, 6], &mut rng).map(|v| 3.0 * v))];
    let report = checker()
        .check(&params, |g, p| {
            let d = g.diff(p[0])?;
            let ls = g.log_sigmoid(d);
            let order = g.scale(ls, -1.0);
            let dd = g.diff(d)?;
            let sl = g.smooth_l1(dd);
            let r = g.reshape(sl, vec![12])?;
            let (a, b) = (g.sum(order), g.sum(r));
            g.add(a, b)
        })
        .unwrap();
    assert_passes(&report);
}

#[test]
fn linear_graph_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let params = vec![
        ("x".to_string(), random(&[4, 3], &mut rng)),
        ("w".to_string(), random(&[3, 2], &mut rng)),
        ("b".to_string(), random(&[2], &mut rng)),
    ];
    let report = GradChecker::new(1e-5, 1e-8)
        .check(&params, |g, p| {
            let y = g.fully_connected(p[0], p[1], p[2])?;
            let z = g.scale(y, 2.5);
            Ok(g.sum(z))
        })
        .unwrap();
    // The weights enter bilinearly, so central differences are exact up to round-off.
    assert_passes(&report);
}

#[test]
fn corrupted_gradient_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let params = vec![("x".to_string(), random(&[5], &mut rng))];
    let build = |g: &mut Graph, p: &[NodeId]| {
        let s = g.sigmoid(p[0]);
        Ok(g.sum(s))
    };
    let mut analytic = params[0].1.map(|v| sigmoid(v) * (1.0 - sigmoid(v)));
    let honest = checker().compare(&params, std::slice::from_ref(&analytic), build).unwrap();
    assert_passes(&honest);
    analytic.data_mut()[2] *= 1.01;
    let corrupted = checker().compare(&params, &[analytic], build).unwrap();
    assert!(!corrupted.passed());
    assert!(corrupted.max_rel_error() > 1e-3);
}

#[test]
fn kink_crossings_are_skipped() {
    // A ReLU input sitting exactly at the kink must not count as a checked element.
    let params = vec![("x".to_string(), t(&[3], &[0.0, 0.5, -0.5]))];
    let report = checker()
        .check(&params, |g, p| {
            let r = g.relu(p[0]);
            Ok(g.sum(r))
        })
        .unwrap();
    assert_eq!(report.tensors[0].skipped, 1);
    assert_eq!(report.tensors[0].checked, 2);
    assert_passes(&report);
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut g = Graph::new();
        let x = g.constant(random(&[3, 1, 8, 8], &mut rng));
        let k = g.parameter(random(&[4, 1, 3, 3], &mut rng));
        let b = g.parameter(random(&[4], &mut rng));
        let c = g.conv2d(x, k, b, 1, 1).unwrap();
        let r = g.relu(c);
        let m = g.maxpool2d(r, 2, 2).unwrap();
        let a = g.global_avg_pool(m).unwrap();
        let s = g.sigmoid(a);
        let o = g.sum(s);
        g.backward(o).unwrap();
        (g.grad(k).unwrap().clone(), g.grad(b).unwrap().clone())
    };
    let (k1, b1) = run();
    let (k2, b2) = run();
    assert!(k1.data().iter().zip(k2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(b1.data().iter().zip(b2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

proptest! {
    #[test]
    fn sigmoid_is_symmetric(x in -30.0f64..30.0) {
        prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn smooth_l1_is_continuous_at_transition(eps in 1e-12f64..1e-6) {
        for s in [1.0, -1.0] {
            let inside = s * (1.0 - eps);
            let outside = s * (1.0 + eps);
            prop_assert!((smooth_l1(inside) - smooth_l1(outside)).abs() < 3.0 * eps);
            prop_assert!((smooth_l1_grad(inside) - smooth_l1_grad(outside)).abs() < 3.0 * eps);
        }
    }

    #[test]
    fn gap_of_constant_map_is_constant(c in -100.0f64..100.0, h in 1usize..6, w in 1usize..6) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(vec![1, 1, h, w], c).unwrap());
        let y = g.global_avg_pool(x).unwrap();
        prop_assert!((g.value(y).data()[0] - c).abs() <= 1e-12 * c.abs().max(1.0));
    }
}

#[test]
fn nan_inputs_propagate() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.5, f64::NAN, -1.0, 0.0]).unwrap());
    let r = g.relu(x);
    assert!(g.value(r).data()[1].is_nan());
    let p = g.maxpool2d(r, 2, 2).unwrap();
    assert!(g.value(p).data()[0].is_nan());
}
