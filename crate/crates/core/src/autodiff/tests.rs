use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar probe `sum(y * w)` with fixed random weights so that every output
/// element contributes a distinct cotangent.
fn probe(g: &Graph<f64>, y: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_t(&mut rng, y.shape());
    g.sum_all(&g.mul(y, &w).unwrap()).unwrap()
}

#[test]
fn matmul_by_hand() {
    let g = Graph::inference();
    let c = g
        .matmul(&t(&[2, 2], &[1., 2., 3., 4.]), &t(&[2, 1], &[1., 1.]))
        .unwrap();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let g = Graph::<f64>::inference();
    let err = g.matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, Error::ShapeMismatch { .. }));
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let g = Graph::inference();
    let s = g.softmax(&t(&[3], &[0., 0., 0.])).unwrap();
    for v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn layernorm_of_constant_row_is_beta() {
    let g = Graph::inference();
    let x = t(&[1, 4], &[2.5; 4]);
    let gamma = t(&[4], &[3.0; 4]);
    let beta = t(&[4], &[0.1, 0.2, 0.3, 0.4]);
    let y = g.layernorm(&x, &gamma, &beta).unwrap();
    assert_eq!(y.data(), beta.data());
}

#[test]
fn square_derivative() {
    let g = Graph::recording();
    let x = g.leaf(&Tensor::scalar(3.0));
    let y = g.mul(&x, &x).unwrap();
    let grads = g.backward(&y).unwrap();
    assert_eq!(grads.wrt(&x).unwrap().item().unwrap(), 6.0);
}

#[test]
fn softmax_sum_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Graph::recording();
    let x = g.leaf(&rand_t(&mut rng, &[7]));
    let s = g.sum_all(&g.softmax(&x).unwrap()).unwrap();
    let dx = g.backward(&s).unwrap().wrt(&x).unwrap();
    assert!(dx.data().iter().all(|v| v.abs() < 1e-15), "{dx:?}");
}

#[test]
fn mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = vec![
        rand_t(&mut rng, &[4, 6]),
        rand_t(&mut rng, &[6]),
        rand_t(&mut rng, &[6, 3]),
        rand_t(&mut rng, &[3]),
    ];
    let x = rand_t(&mut rng, &[5, 4]);
    let err = grad_check(&params, 1e-4, |g, p| {
        let h = g.gelu(&g.add(&g.matmul(&x, &p[0])?, &p[1])?)?;
        let y = g.add(&g.matmul(&h, &p[2])?, &p[3])?;
        g.mean_all(&g.mul(&y, &y)?)
    })
    .unwrap();
    assert!(err < 1e-3, "max rel err {err}");
}

#[test]
fn grad_check_on_linear_function_is_exact() {
    let x = t(&[4], &[0.3, -1.2, 2.0, 0.7]);
    let w = t(&[4], &[1.0, 2.0, -0.5, 0.25]);
    let err = grad_check(&[w], 1e-3, |g, p| g.sum_all(&g.mul(&p[0], &x)?)).unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn grad_check_rejects_zero_step() {
    let w = t(&[1], &[1.0]);
    let r = grad_check(&[w], 0.0, |g, p| g.sum_all(&p[0]));
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
}

#[test]
fn seeded_backward_of_doubling() {
    let g = Graph::recording();
    let x = g.leaf(&t(&[3], &[1., 2., 3.]));
    let y = g.scale(&x, 2.0).unwrap();
    let dx = g.backward_with_seed(&y, &Tensor::ones(&[3])).unwrap().wrt(&x).unwrap();
    assert_eq!(dx.data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn zero_seed_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Graph::recording();
    let x = g.leaf(&rand_t(&mut rng, &[3, 4]));
    let w = g.leaf(&rand_t(&mut rng, &[4, 2]));
    let y = g.tanh(&g.matmul(&x, &w).unwrap()).unwrap();
    let grads = g.backward_with_seed(&y, &Tensor::zeros(&[3, 2])).unwrap();
    assert!(grads.wrt(&x).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(grads.wrt(&w).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn seeded_backward_of_linear_map_is_transpose_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (rows, cols) = (5, 3);
    let w = rand_t(&mut rng, &[rows, cols]);
    let x0 = rand_t(&mut rng, &[cols, 1]);
    let seed = rand_t(&mut rng, &[rows, 1]);
    let g = Graph::recording();
    let x = g.leaf(&x0);
    let y = g.matmul(&w, &x).unwrap();
    let dx = g.backward_with_seed(&y, &seed).unwrap().wrt(&x).unwrap();
    // W^T g written out directly
    for c in 0..cols {
        let expected: f64 = (0..rows).map(|r| w.at(r, c) * seed.data()[r]).sum();
        assert!((dx.data()[c] - expected).abs() < 1e-14);
    }
}

#[test]
fn seeded_backward_equals_backward_of_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w0 = rand_t(&mut rng, &[4, 4]);
    let x0 = rand_t(&mut rng, &[3, 4]);
    let seed = rand_t(&mut rng, &[3, 4]);
    let build = |g: &Graph<f64>, w: &Tensor<f64>| {
        let y = g.matmul(&x0, w).unwrap();
        g.softmax(&g.gelu(&y).unwrap()).unwrap()
    };
    let g1 = Graph::recording();
    let w1 = g1.leaf(&w0);
    let y1 = build(&g1, &w1);
    let a = g1.backward_with_seed(&y1, &seed).unwrap().wrt(&w1).unwrap();

    let g2 = Graph::recording();
    let w2 = g2.leaf(&w0);
    let y2 = build(&g2, &w2);
    let loss = g2.sum_all(&g2.mul(&y2, &seed).unwrap()).unwrap();
    let b = g2.backward(&loss).unwrap().wrt(&w2).unwrap();
    assert!(a.max_rel_diff(&b) < 1e-12);
}

#[test]
fn seed_shape_must_match() {
    let g = Graph::recording();
    let x = g.leaf(&Tensor::<f64>::ones(&[3]));
    let y = g.scale(&x, 2.0).unwrap();
    assert!(matches!(
        g.backward_with_seed(&y, &Tensor::ones(&[4])),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn backward_errors() {
    let g = Graph::recording();
    let x = g.leaf(&Tensor::<f64>::ones(&[2]));
    let y = g.scale(&x, 2.0).unwrap();
    assert!(matches!(g.backward(&y), Err(Error::NotScalar(_))));
    let s = g.sum_all(&y).unwrap();
    g.backward(&s).unwrap();
    assert!(matches!(g.backward(&s), Err(Error::GraphConsumed)));

    let gi = Graph::inference();
    let xi = gi.leaf(&Tensor::<f64>::ones(&[2]));
    let si = gi.sum_all(&xi).unwrap();
    assert!(matches!(gi.backward(&si), Err(Error::InferenceMode)));
}

#[test]
fn foreign_tensor_is_rejected() {
    let g1 = Graph::<f64>::recording();
    let g2 = Graph::<f64>::recording();
    let x = g1.leaf(&Tensor::ones(&[2]));
    assert!(matches!(g2.scale(&x, 1.0), Err(Error::ForeignTensor)));
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let g = Graph::recording();
    let x = g.leaf(&Tensor::<f64>::ones(&[2]));
    let unused = g.leaf(&Tensor::<f64>::ones(&[3, 2]));
    let s = g.sum_all(&x).unwrap();
    let grads = g.backward(&s).unwrap();
    assert_eq!(grads.wrt(&unused).unwrap(), Tensor::zeros(&[3, 2]));
    assert_eq!(grads.num_leaves(), 2);
}

#[test]
fn inference_mode_records_and_saves_nothing() {
    let meter = Arc::new(MemMeter::new());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = Graph::inference().with_meter(meter.clone());
    let x = g.leaf(&rand_t(&mut rng, &[8, 8]));
    let y = g.softmax(&g.matmul(&x, &x).unwrap()).unwrap();
    let _ = g.gelu(&y).unwrap();
    assert_eq!(g.num_nodes(), 0);
    assert_eq!(g.saved_elems(), 0);
    assert_eq!(meter.peak_activation_elems(), 0);
    assert!(!y.requires_grad());
}

#[test]
fn saved_activations_are_charged_and_released() {
    let meter = Arc::new(MemMeter::new());
    let g = Graph::recording().with_meter(meter.clone());
    let w = g.leaf(&Tensor::<f64>::ones(&[4, 4]).into_persistent());
    let x = Tensor::<f64>::ones(&[2, 4]);
    // matmul saves x (8 elems) for dW; softmax saves its output (8 elems);
    // w is a parameter and never charged.
    let y = g.matmul(&x, &w).unwrap();
    let s = g.softmax(&y).unwrap();
    assert_eq!(g.saved_elems(), 16);
    let loss = g.sum_all(&s).unwrap();
    g.backward(&loss).unwrap();
    assert_eq!(g.saved_elems(), 0);
    assert_eq!(meter.live_activation_elems(), 0);
    assert_eq!(meter.peak_activation_elems(), 16);
}

#[test]
fn shared_buffer_is_charged_once() {
    let g = Graph::recording();
    let x = g.leaf(&Tensor::<f64>::ones(&[3]));
    let e = g.exp(&x).unwrap(); // saves e
    let _ = g.mul(&e, &e).unwrap(); // saves e twice more
    assert_eq!(g.saved_elems(), 3);
    drop(g);
}

#[test]
fn constant_only_ops_are_not_recorded() {
    let g = Graph::<f64>::recording();
    let a = Tensor::ones(&[2, 2]);
    let b = g.matmul(&a, &a).unwrap();
    assert!(!b.requires_grad());
    assert_eq!(g.num_nodes(), 0);
}

#[test]
fn recording_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let w0 = rand_t(&mut rng, &[6, 6]);
        let x = rand_t(&mut rng, &[4, 6]);
        let g = Graph::recording();
        let w = g.leaf(&w0);
        let y = g.softmax(&g.gelu(&g.matmul(&x, &w).unwrap()).unwrap()).unwrap();
        let loss = probe(&g, &y, 3);
        let grad = g.backward(&loss).unwrap().wrt(&w).unwrap();
        (loss.item().unwrap().to_bits(), grad.to_vec())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1, l2);
    assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn max_axis_routes_gradient_to_argmax() {
    let g = Graph::recording();
    let x = g.leaf(&t(&[3, 2], &[1., 5., 4., 2., 4., 9.]));
    let (m, arg) = g.max_axis(&x, 0).unwrap();
    assert_eq!(m.data(), &[4.0, 9.0]);
    assert_eq!(arg, vec![1, 2]);
    let s = g.sum_all(&m).unwrap();
    let dx = g.backward(&s).unwrap().wrt(&x).unwrap();
    assert_eq!(dx.data(), &[0., 0., 1., 0., 0., 1.]);
}

#[test]
fn broadcasting_rules() {
    let g = Graph::<f64>::inference();
    let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
    let b = t(&[3], &[10., 20., 30.]);
    assert_eq!(g.add(&a, &b).unwrap().data(), &[11., 22., 33., 14., 25., 36.]);
    let c = t(&[2, 1], &[2., 3.]);
    assert_eq!(g.mul(&a, &c).unwrap().data(), &[2., 4., 6., 12., 15., 18.]);
    assert!(g.add(&a, &t(&[2], &[1., 1.])).is_err());
    let bt = g.broadcast_to(&b, &[2, 3]).unwrap();
    assert_eq!(bt.data(), &[10., 20., 30., 10., 20., 30.]);
}

#[test]
fn concat_slice_gather() {
    let g = Graph::<f64>::inference();
    let a = t(&[2, 2], &[1., 2., 3., 4.]);
    let b = t(&[2, 1], &[9., 8.]);
    let c = g.concat(&[&a, &b], 1).unwrap();
    assert_eq!(c.data(), &[1., 2., 9., 3., 4., 8.]);
    let r = g.concat(&[&a, &a], 0).unwrap();
    assert_eq!(r.shape(), &[4, 2]);
    let s = g.slice(&c, 1, 1, 2).unwrap();
    assert_eq!(s.data(), &[2., 9., 4., 8.]);
    let gr = g.gather_rows(&r, &[3, 0]).unwrap();
    assert_eq!(gr.data(), &[3., 4., 1., 2.]);
    assert!(g.concat(&[&a, &b], 0).is_err());
    assert!(g.slice(&a, 0, 1, 2).is_err());
}

// Every primitive against central differences on randomized shapes.
fn check_unary(
    op: impl Fn(&Graph<f64>, &Tensor<f64>) -> crate::Result<Tensor<f64>>,
    shape: &[usize],
    seed: u64,
    positive: bool,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = rand_t(&mut rng, shape);
    if positive {
        x = x.map(|v| v.abs() + 0.5);
    }
    let err = grad_check(&[x], 1e-4, |g, p| {
        let y = op(g, &p[0])?;
        Ok(probe(g, &y, seed + 1))
    })
    .unwrap();
    assert!(err < 1e-3, "rel err {err} for shape {shape:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_vjps(rows in 1usize..5, cols in 1usize..6, seed in 0u64..1000) {
        let shape = [rows, cols];
        check_unary(|g, x| g.exp(x), &shape, seed, false);
        check_unary(|g, x| g.log(x), &shape, seed, true);
        check_unary(|g, x| g.tanh(x), &shape, seed, false);
        check_unary(|g, x| g.sigmoid(x), &shape, seed, false);
        check_unary(|g, x| g.gelu(x), &shape, seed, false);
        check_unary(|g, x| g.softplus(x), &shape, seed, false);
        check_unary(|g, x| g.scale(x, -1.7), &shape, seed, false);
        check_unary(|g, x| g.softmax(x), &shape, seed, false);
        check_unary(|g, x| g.log_softmax(x), &shape, seed, false);
        check_unary(|g, x| g.transpose(x), &shape, seed, false);
        check_unary(|g, x| g.reshape(x, &[cols, rows]), &shape, seed, false);
        check_unary(|g, x| g.mean_axis(x, 0), &shape, seed, false);
        check_unary(|g, x| g.sum_axis(x, 1), &shape, seed, false);
        check_unary(|g, x| g.mean_all(x), &shape, seed, false);
        check_unary(|g, x| Ok(g.max_axis(x, 0)?.0), &shape, seed, false);
        check_unary(|g, x| g.slice(x, 1, cols / 2, cols - cols / 2), &shape, seed, false);
        check_unary(|g, x| g.gather_rows(x, &[rows - 1, 0, rows - 1]), &shape, seed, false);
        check_unary(|g, x| g.broadcast_to(&g.sum_axis(x, 0)?, &[3, cols]), &shape, seed, false);
    }

    #[test]
    fn binary_and_structured_vjps(m in 1usize..4, k in 1usize..5, n in 1usize..4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_t(&mut rng, &[m, k]);
        let b = rand_t(&mut rng, &[k, n]);
        let bias = rand_t(&mut rng, &[k]);
        let col = rand_t(&mut rng, &[m, 1]);
        let gamma = rand_t(&mut rng, &[k]);
        let beta = rand_t(&mut rng, &[k]);
        let err = grad_check(&[a, b, bias, col, gamma, beta], 1e-4, |g, p| {
            let mm = g.matmul(&p[0], &p[1])?;
            let ab = g.add(&p[0], &p[2])?;
            let sb = g.sub(&p[3], &ab)?;
            let mb = g.mul(&sb, &p[2])?;
            let ln = g.layernorm(&mb, &p[4], &p[5])?;
            let cat = g.concat(&[&ln, &mm], 1)?;
            Ok(probe(g, &cat, seed))
        }).unwrap();
        prop_assert!(err < 1e-3, "rel err {}", err);
    }
}
