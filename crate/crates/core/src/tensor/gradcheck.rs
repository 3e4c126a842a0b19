//! Finite-difference checks of every recorded backward rule.

use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};

const H: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

/// Loss = Σ w ⊙ f(inputs) with fixed random weights `w`, so every output
/// element carries a distinct upstream gradient.
fn weighted_loss<'t>(
    tape: &'t Tape<f64>,
    out: Var<'t, f64>,
    weights: &mut Option<Tensor<f64>>,
    rng: &mut ChaCha8Rng,
) -> Var<'t, f64> {
    let shape = out.shape();
    let w = weights.get_or_insert_with(|| random(&shape, rng)).clone();
    out.mul(tape.constant(w)).unwrap().sum().unwrap()
}

/// Compares tape gradients against central differences, element-wise
/// relative error below `tol` with an absolute floor of 1e-8.
fn check<F>(inputs: Vec<Tensor<f64>>, tol: f64, f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut weights = None;

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars);
    let loss = weighted_loss(&tape, out, &mut weights, &mut rng);
    let grads = tape.backward(loss).unwrap();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars);
        let w = weights.clone().unwrap();
        out.mul(tape.constant(w))
            .unwrap()
            .sum()
            .unwrap()
            .value()
            .item()
    };

    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[j];
            let err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            assert!(
                err < 1e-8 || err / scale < tol,
                "input {i} elem {j}: tape {a} vs finite difference {numeric}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn matmul_gradients() {
    let mut r = rng();
    check(
        vec![random(&[3, 4], &mut r), random(&[4, 2], &mut r)],
        1e-4,
        |_, v| v[0].matmul(v[1]).unwrap(),
    );
}

#[test]
fn elementwise_gradients() {
    let mut r = rng();
    let inputs = vec![random(&[2, 3], &mut r), random(&[2, 3], &mut r)];
    check(inputs.clone(), 1e-4, |_, v| v[0].add(v[1]).unwrap());
    check(inputs.clone(), 1e-4, |_, v| v[0].sub(v[1]).unwrap());
    check(inputs.clone(), 1e-4, |_, v| v[0].mul(v[1]).unwrap());
    check(inputs.clone(), 1e-4, |_, v| {
        v[0].scale(-1.7).unwrap().add_scalar(0.3).unwrap()
    });
    check(inputs, 1e-4, |_, v| v[0].neg().unwrap());
}

#[test]
fn bias_and_shape_gradients() {
    let mut r = rng();
    check(
        vec![random(&[2, 3, 4], &mut r), random(&[4], &mut r)],
        1e-4,
        |_, v| v[0].add_bias(v[1]).unwrap(),
    );
    check(vec![random(&[3, 5], &mut r)], 1e-4, |_, v| {
        v[0].t().unwrap()
    });
    check(vec![random(&[3, 4], &mut r)], 1e-4, |_, v| {
        v[0].reshape(&[2, 6]).unwrap()
    });
    check(vec![random(&[3, 4, 2], &mut r)], 1e-4, |_, v| {
        v[0].slice(1, 1, 2).unwrap()
    });
}

#[test]
fn concat_gradients_on_each_axis() {
    let mut r = rng();
    let a = random(&[2, 3], &mut r);
    let b = random(&[2, 1], &mut r);
    check(vec![a.clone(), b], 1e-4, |t, v| t.concat(v, 1).unwrap());
    let c = random(&[4, 3], &mut r);
    check(vec![a, c], 1e-4, |t, v| t.concat(v, 0).unwrap());
}

#[test]
fn reduction_and_gather_gradients() {
    let mut r = rng();
    check(vec![random(&[3, 4], &mut r)], 1e-4, |_, v| {
        v[0].sum().unwrap()
    });
    check(vec![random(&[3, 4], &mut r)], 1e-4, |_, v| {
        v[0].mean().unwrap()
    });
    check(vec![random(&[5, 3], &mut r)], 1e-4, |_, v| {
        v[0].gather_rows(&[4, 0, 4, 2]).unwrap()
    });
}

#[test]
fn select_gradients() {
    let mut r = rng();
    let keep: Rc<[bool]> = vec![true, false, false, true, true, false].into();
    check(
        vec![random(&[2, 3], &mut r), random(&[2, 3], &mut r)],
        1e-4,
        move |_, v| v[0].select(keep.clone(), v[1]).unwrap(),
    );
}

#[test]
fn softmax_gradients() {
    let mut r = rng();
    check(vec![random(&[3, 4], &mut r)], 1e-4, |_, v| {
        v[0].softmax_rows().unwrap()
    });
    let allowed: Rc<[bool]> = (0..12).map(|i| i % 4 <= i / 4).collect::<Vec<_>>().into();
    check(vec![random(&[3, 4], &mut r)], 1e-4, move |_, v| {
        v[0].softmax_rows_masked(allowed.clone()).unwrap()
    });
}

#[test]
fn layer_norm_gradients() {
    let mut r = rng();
    check(
        vec![
            random(&[3, 5], &mut r),
            random(&[5], &mut r),
            random(&[5], &mut r),
        ],
        1e-4,
        |_, v| v[0].layer_norm(v[1], v[2], 1e-5).unwrap(),
    );
}

#[test]
fn nonlinearity_gradients() {
    let mut r = rng();
    check(vec![random(&[4, 3], &mut r)], 1e-4, |_, v| {
        v[0].gelu().unwrap()
    });
    check(vec![random(&[4, 3], &mut r)], 1e-4, |_, v| {
        v[0].sin().unwrap()
    });
    // keep residuals away from the Huber kink at |r| = 1
    let x = Tensor::from_fn(&[2, 4], |i| [-1.8, -0.6, 0.2, 0.9, 1.4, -1.3, 0.5, 1.9][i]);
    check(vec![x], 1e-4, |_, v| v[0].huber(1.0).unwrap());
}

#[test]
fn rope_gradients() {
    let mut r = rng();
    check(vec![random(&[3, 6], &mut r)], 1e-4, |_, v| {
        v[0].rope(&[0, 5, 2], 10_000.0).unwrap()
    });
}

#[test]
fn composed_attention_like_graph() {
    let mut r = rng();
    let inputs = vec![
        random(&[4, 3], &mut r),
        random(&[3, 3], &mut r),
        random(&[3, 3], &mut r),
    ];
    check(inputs, 1e-4, |_, v| {
        let q = v[0].matmul(v[1]).unwrap();
        let k = v[0].matmul(v[2]).unwrap();
        let s = q.matmul(k.t().unwrap()).unwrap().scale(0.5).unwrap();
        s.softmax_rows()
            .unwrap()
            .matmul(v[0])
            .unwrap()
            .gelu()
            .unwrap()
    });
}

#[test]
fn backward_seeds_one() {
    let tape = Tape::new();
    let x = tape.param(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
    let g = tape.backward(x.sum().unwrap()).unwrap();
    assert!(g.wrt(x).data().iter().all(|&v| v == 1.0));

    let tape = Tape::new();
    let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let loss = x.mul(x).unwrap().sum().unwrap();
    assert_eq!(tape.backward(loss).unwrap().wrt(x).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.param(Tensor::<f64>::zeros(&[2]));
    assert!(matches!(
        tape.backward(x),
        Err(TensorError::NonScalarLoss(_))
    ));
}

#[test]
fn shared_input_accumulates() {
    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = x.add(x).unwrap().mul(x).unwrap(); // 2x²
    assert_eq!(tape.backward(y).unwrap().wrt(x).item(), 12.0);
}

#[test]
fn constants_get_no_gradient() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::scalar(2.0));
    let x = tape.param(Tensor::scalar(5.0));
    let g = tape.backward(c.mul(x).unwrap()).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.wrt(x).item(), 2.0);
}

#[test]
fn softmax_sums_and_shift_invariance() {
    let mut r = rng();
    for _ in 0..50 {
        let x = random(&[4, 7], &mut r);
        let c: f64 = r.random_range(-50.0..50.0);
        let tape = Tape::new();
        let p = tape.constant(x.clone()).softmax_rows().unwrap().value();
        let q = tape
            .constant(x.map(|v| v + c))
            .softmax_rows()
            .unwrap()
            .value();
        for row in p.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(p.max_abs_diff(&q) < 1e-12);
    }
}

#[test]
fn softmax_large_logits_do_not_overflow() {
    let tape = Tape::new();
    let p = tape
        .constant(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap())
        .softmax_rows()
        .unwrap()
        .value();
    // exp(-1000) underflows to 0 in double precision; the exact value is ~5e-435
    assert_eq!(p.data(), &[1.0, 0.0]);
    assert!(p.is_finite());
}

#[test]
fn layer_norm_statistics() {
    let tape = Tape::new();
    let ones = tape.constant(Tensor::ones(&[3]));
    let zeros = tape.constant(Tensor::zeros(&[3]));
    let y = tape
        .constant(Tensor::ones(&[1, 3]))
        .layer_norm(ones, zeros, 1e-5)
        .unwrap();
    assert_eq!(y.value().data(), &[0.0, 0.0, 0.0]);

    // var = 1, so each side is ±1/sqrt(1 + eps)
    let g2 = tape.constant(Tensor::ones(&[2]));
    let b2 = tape.constant(Tensor::zeros(&[2]));
    let y = tape
        .constant(Tensor::new(vec![1, 2], vec![-1.0, 1.0]).unwrap())
        .layer_norm(g2, b2, 1e-5)
        .unwrap()
        .value();
    let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((y.data()[1] - expected).abs() < 1e-15);
    assert!((y.data()[0] + expected).abs() < 1e-15);

    let mut r = rng();
    let x = random(&[6, 8], &mut r);
    let g = tape.constant(Tensor::ones(&[8]));
    let b = tape.constant(Tensor::zeros(&[8]));
    let y = tape
        .constant(x.clone())
        .layer_norm(g, b, 1e-5)
        .unwrap()
        .value();
    for (xr, yr) in x.data().chunks(8).zip(y.data().chunks(8)) {
        let mean = yr.iter().sum::<f64>() / 8.0;
        let var = yr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        let xm = xr.iter().sum::<f64>() / 8.0;
        let xv = xr.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - xv / (xv + 1e-5)).abs() < 1e-9);
    }
}

#[test]
fn shape_errors_are_reported() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(
        a.add(b),
        Err(TensorError::ShapeMismatch { op: "add", .. })
    ));
    assert!(a.add_bias(tape.constant(Tensor::zeros(&[2]))).is_err());
    assert!(a.slice(1, 2, 2).is_err());
    assert!(a.slice(2, 0, 1).is_err());
    assert!(a.rope(&[0, 1], 10_000.0).is_err());
    assert!(tape.concat(&[a, b], 1).is_err());
    assert!(a.gather_rows(&[2]).is_err());
}

proptest! {
    #[test]
    fn output_shapes_follow_input_shapes(m in 1usize..6, k in 1usize..6, n in 1usize..6, cut in 0usize..5) {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::ones(&[m, k]));
        let b = tape.constant(Tensor::ones(&[k, n]));
        let c = a.matmul(b).unwrap();
        prop_assert_eq!(c.shape(), vec![m, n]);
        prop_assert_eq!(c.t().unwrap().shape(), vec![n, m]);
        prop_assert_eq!(tape.concat(&[a, a], 1).unwrap().shape(), vec![m, 2 * k]);
        prop_assert_eq!(tape.concat(&[a, c], 1).unwrap().shape(), vec![m, k + n]);
        let start = cut % k;
        prop_assert_eq!(a.slice(1, start, k - start).unwrap().shape(), vec![m, k - start]);
        prop_assert_eq!(c.softmax_rows().unwrap().shape(), vec![m, n]);
        prop_assert_eq!(c.sum().unwrap().shape(), Vec::<usize>::new());
        prop_assert_eq!(a.reshape(&[k * m]).unwrap().shape(), vec![m * k]);
    }

    #[test]
    fn rope_is_an_isometry(seed in 0u64..1000, pos in 0usize..512) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, 8], &mut r);
        let tape = Tape::new();
        let y = tape.constant(x.clone()).rope(&[pos], 10_000.0).unwrap().value();
        prop_assert!((x.norm() - y.norm()).abs() < 1e-12);
    }
}
