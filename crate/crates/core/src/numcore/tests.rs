use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::rng::rng_from;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                s += a.at(i, l) * b.at(l, j);
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Checks the gradient of `sum(w ⊙ build(x))` for random `x` and fixed
/// random `w` against central differences.
fn check_unary_op(shape: &[usize], seed: u64, build: impl Fn(&mut Graph, Var) -> Var) {
    let x0 = random(shape, seed);
    let eval = |data: &[f64], grad: bool| {
        let mut g = Graph::new();
        let mut t = Tensor::new(shape, data.to_vec()).unwrap();
        t.set_requires_grad(grad);
        let x = g.leaf(&t);
        let y = build(&mut g, x);
        let w = random(g.shape(y), seed ^ 0xabc);
        let wv = g.constant(&w);
        let p = g.mul(y, wv).unwrap();
        let loss = g.sum(p);
        let grads = grad.then(|| g.backward(loss).unwrap().get(x).unwrap().to_vec());
        (g.scalar(loss), grads)
    };
    let analytic = eval(x0.data(), true).1.unwrap();
    let numeric = central_difference(|d| eval(d, false).0, x0.data(), 1e-5);
    let err = max_relative_error(&analytic, &numeric, 1e-6);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn matmul_identity_and_hand_case() {
    let a = random(&[3, 3], 1);
    let mut g = Graph::new();
    let (av, iv) = (g.constant(&a), g.constant(&Tensor::eye(3)));
    let p = g.matmul(av, iv).unwrap();
    assert_eq!(g.value(p), a.data());

    let l = g.constant(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let r = g.constant(&Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap());
    let p = g.matmul(l, r).unwrap();
    assert_eq!(g.value(p), &[2.0, 4.0]);
    assert_eq!(g.shape(p), &[2, 1]);
}

#[test]
fn matmul_matches_triple_loop() {
    let (a, b) = (random(&[4, 5], 2), random(&[5, 2], 3));
    let mut g = Graph::new();
    let (av, bv) = (g.constant(&a), g.constant(&b));
    let p = g.matmul(av, bv).unwrap();
    let oracle = naive_matmul(&a, &b);
    for (x, y) in g.value(p).iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(&Tensor::zeros(&[2, 3]));
    let b = g.constant(&Tensor::zeros(&[4, 2]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

/// Maclaurin series of erf, summed until terms vanish.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term.abs() > 1e-18 {
        n += 1.0;
        term *= -x * x / n;
        sum += term / (2.0 * n + 1.0);
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

#[test]
fn gelu_values() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
    let y = g.elementwise(Elementwise::Gelu, &[x]).unwrap();
    assert_eq!(g.value(y)[0], 0.0);
    let oracle = 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
    assert!((g.value(y)[1] - oracle).abs() < 1e-14);
}

#[test]
fn additive_inverse() {
    let mut g = Graph::new();
    let x = g.constant(&random(&[3, 4], 4));
    let n = g.elementwise(Elementwise::Negate, &[x]).unwrap();
    let z = g.elementwise(Elementwise::Add, &[x, n]).unwrap();
    assert!(g.value(z).iter().all(|&v| v == 0.0));
}

#[test]
fn incompatible_broadcast_is_a_dimension_error() {
    let mut g = Graph::new();
    let a = g.constant(&Tensor::zeros(&[2, 3]));
    let b = g.constant(&Tensor::zeros(&[3]));
    assert!(matches!(g.add(a, b), Err(crate::Error::Dimension { .. })));
    let s = g.constant(&Tensor::scalar(2.0));
    assert!(g.mul(a, s).is_ok());
}

#[test]
fn softmax_cases() {
    let mut g = Graph::new();
    let u = g.constant(&Tensor::new(&[1, 4], vec![0.7; 4]).unwrap());
    let su = g.softmax(u, 1).unwrap();
    assert!(g.value(su).iter().all(|v| (v - 0.25).abs() < 1e-15));

    let x = g.constant(&Tensor::new(&[1, 2], vec![0.0, 3f64.ln()]).unwrap());
    let sx = g.softmax(x, 1).unwrap();
    assert!((g.value(sx)[0] - 0.25).abs() < 1e-15);
    assert!((g.value(sx)[1] - 0.75).abs() < 1e-15);

    let r = random(&[3, 5], 5);
    let rv = g.constant(&r);
    let shifted = g.add_scalar(rv, 123.0);
    let (a, b) = (g.softmax(rv, 1).unwrap(), g.softmax(shifted, 1).unwrap());
    for (p, q) in g.value(a).iter().zip(g.value(b)) {
        assert!((p - q).abs() < 1e-12);
    }
    assert!(g.softmax(rv, 2).is_err());
}

#[test]
fn softmax_over_leading_axis() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::new(&[2, 1], vec![0.0, 3f64.ln()]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    assert!((g.value(s)[1] - 0.75).abs() < 1e-15);
}

#[test]
fn layernorm_cases() {
    let mut g = Graph::new();
    let ones = Tensor::new(&[1, 5], vec![1.0; 5]).unwrap();
    let zeros = Tensor::zeros(&[1, 5]);
    let (gain, bias) = (g.constant(&ones), g.constant(&zeros));
    let c = g.constant(&Tensor::new(&[1, 5], vec![3.3; 5]).unwrap());
    let y = g.layernorm(c, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).iter().all(|v| v.abs() < 1e-12));

    let b = Tensor::new(&[1, 5], vec![0.5; 5]).unwrap();
    let bv = g.constant(&b);
    let x = g.constant(&random(&[4, 5], 6));
    let y = g.layernorm(x, gain, bv, 1e-5).unwrap();
    for r in 0..4 {
        let m: f64 = g.value(y)[r * 5..r * 5 + 5].iter().sum::<f64>() / 5.0;
        assert!((m - 0.5).abs() < 1e-9);
    }
}

#[test]
fn cosine_cases() {
    let mut g = Graph::new();
    let v = g.constant(&Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let s = g.cosine_sim(v, v).unwrap();
    assert!((g.scalar(s) - 1.0).abs() < 1e-15);

    let a = g.constant(&Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
    let b = g.constant(&Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
    let s = g.cosine_sim(a, b).unwrap();
    assert_eq!(g.scalar(s), 0.0);

    let a = g.constant(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let b = g.constant(&Tensor::new(&[3], vec![4.0, 5.0, 6.0]).unwrap());
    let s = g.cosine_sim(a, b).unwrap();
    let oracle = 32.0 / (14f64.sqrt() * 77f64.sqrt());
    assert!((g.scalar(s) - oracle).abs() < 1e-15);

    let z = g.constant(&Tensor::zeros(&[3]));
    assert!(matches!(g.cosine_sim(a, z), Err(crate::Error::Degenerate(_))));
}

#[test]
fn backward_polynomial() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::new(&[1], vec![3.0]).unwrap().into_param());
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::zeros(&[2]).into_param());
    assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn stop_gradient_semantics() {
    let data = vec![1.5, -0.25, 2.0];
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::new(&[3], data.clone()).unwrap().into_param());
    let s = g.stop_gradient(x);
    assert_eq!(g.value(s), data.as_slice());
    let total = g.sum(s);
    let grads = g.backward(total).unwrap();
    assert!(grads.get(x).is_none());

    let prod = g.mul(x, s).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), data.as_slice());
}

#[test]
fn repeated_backward_accumulates_and_is_deterministic() {
    let mut p = random(&[2, 3], 7).into_param();
    let mut g = Graph::new();
    let x = g.leaf(&p);
    let y = g.gelu(x);
    let loss = g.sum(y);
    let first = g.backward(loss).unwrap();
    let second = g.backward(loss).unwrap();
    assert_eq!(first.get(x), second.get(x));
    first.accumulate_into(x, &mut p);
    second.accumulate_into(x, &mut p);
    let doubled: Vec<f64> = first.get(x).unwrap().iter().map(|v| 2.0 * v).collect();
    assert_eq!(p.grad().unwrap(), doubled.as_slice());
}

#[test]
fn constants_get_no_gradient() {
    let w = random(&[3, 3], 8);
    let mut g = Graph::new();
    let x = g.leaf(&random(&[2, 3], 9).into_param());
    let wv = g.constant(&w);
    let y = g.matmul(x, wv).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(wv).is_none());
    assert!(grads.get(x).is_some());
}

#[test]
fn finite_difference_per_op() {
    for seed in 0..3 {
        check_unary_op(&[3, 4], seed, |g, x| {
            let w = g.constant(&random(&[4, 2], 99));
            g.matmul(x, w).unwrap()
        });
        check_unary_op(&[3, 4], seed, |g, x| g.transpose(x).unwrap());
        check_unary_op(&[3, 4], seed, |g, x| g.gelu(x));
        check_unary_op(&[3, 4], seed, |g, x| g.sigmoid(x));
        check_unary_op(&[3, 4], seed, |g, x| g.exp(x));
        check_unary_op(&[3, 4], seed, |g, x| {
            let sq = g.mul(x, x).unwrap();
            let pos = g.add_scalar(sq, 0.5);
            let l = g.log(pos);
            let s = g.sqrt(pos);
            let p = g.powf(pos, 1.7);
            let a = g.add(l, s).unwrap();
            g.sub(a, p).unwrap()
        });
        check_unary_op(&[3, 4], seed, |g, x| {
            let d = g.constant(&random(&[3, 4], 5));
            let den = g.add_scalar(d, 3.0);
            let q = g.div(x, den).unwrap();
            let shifted = g_abs_shift(g, x);
            let r = g.div(den, shifted).unwrap();
            g.add(q, r).unwrap()
        });
        check_unary_op(&[3, 4], seed, |g, x| g.softmax(x, 1).unwrap());
        check_unary_op(&[3, 4], seed, |g, x| g.softmax(x, 0).unwrap());
        check_unary_op(&[3, 4], seed, |g, x| g.log_softmax(x, 1).unwrap());
        check_unary_op(&[3, 4], seed, |g, x| g.normalize_rows(x).unwrap());
        check_unary_op(&[3, 4], seed, |g, x| g.mean_rows(x).unwrap());
        check_unary_op(&[3, 4], seed, |g, x| {
            let m = g.mean(x);
            g.mul(x, m).unwrap()
        });
        check_unary_op(&[4, 3], seed, |g, x| {
            let a = g.slice_rows(x, 1, 3).unwrap();
            let b = g.slice_cols(x, 0, 2).unwrap();
            let bt = g.transpose(b).unwrap();
            let c = g.concat_cols(&[a, a]).unwrap();
            let d = g.concat_rows(&[bt, bt]).unwrap();
            let d = g.reshape(d, &[2, 8]).unwrap();
            let c = g.reshape(c, &[2, 6]).unwrap();
            let cs = g.slice_cols(c, 0, 6).unwrap();
            let ds = g.slice_cols(d, 2, 8).unwrap();
            g.mul(cs, ds).unwrap()
        });
        check_unary_op(&[4, 3], seed, |g, x| g.select_rows(x, &[3, 0, 3]).unwrap());
        check_unary_op(&[4, 3], seed, |g, x| {
            let row = g.constant(&random(&[1, 3], 17));
            let a = g.add_row(x, row).unwrap();
            let m = g.mul_row(a, row).unwrap();
            let xr = g.slice_rows(x, 0, 1).unwrap();
            g.mul_row(m, xr).unwrap()
        });
        check_unary_op(&[4, 3], seed, |g, x| {
            let other = g.constant(&random(&[4, 3], 23));
            let a = g.maximum(x, other).unwrap();
            let b = g.minimum(x, other).unwrap();
            let c = g.clamp(x, -0.7, 0.9);
            let ab = g.add(a, b).unwrap();
            g.mul(ab, c).unwrap()
        });
        check_unary_op(&[6, 3], seed, |g, x| {
            let gain = g.constant(&random(&[1, 3], 31));
            let bias = g.constant(&random(&[1, 3], 32));
            g.layernorm(x, gain, bias, 1e-5).unwrap()
        });
        check_unary_op(&[1, 3], seed, |g, x| {
            let base = g.constant(&random(&[6, 3], 33));
            let bias = g.constant(&random(&[1, 3], 34));
            g.layernorm(base, x, bias, 1e-5).unwrap()
        });
        check_unary_op(&[6, 3], seed, |g, x| g.batchnorm(x, 1e-5).unwrap().0);
        check_unary_op(&[2 * 3 * 4, 2], seed, |g, x| g.im2col3x3(x, 2, 3, 4).unwrap());
        check_unary_op(&[1, 5], seed, |g, x| {
            let other = g.constant(&random(&[1, 5], 41));
            g.cosine_sim(x, other).unwrap()
        });
        check_unary_op(&[1], seed, |g, x| {
            let other = g.constant(&random(&[3, 2], 42));
            g.mul(other, x).unwrap()
        });
    }
}

fn g_abs_shift(g: &mut Graph, x: Var) -> Var {
    let sq = g.mul(x, x).unwrap();
    g.add_scalar(sq, 1.0)
}

#[test]
fn im2col_center_tap_is_identity() {
    let x = random(&[9, 2], 50);
    let mut g = Graph::new();
    let xv = g.constant(&x);
    let cols = g.im2col3x3(xv, 1, 3, 3).unwrap();
    let v = g.value(cols);
    for cell in 0..9 {
        assert_eq!(&v[cell * 18 + 8..cell * 18 + 10], x.row(cell));
    }
    // top-left cell has zero padding above and to the left
    assert!(v[0..6].iter().all(|&z| z == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_oracle_up_to_32(m in 1usize..=32, k in 1usize..=32, n in 1usize..=32, seed in 0u64..1000) {
        let (a, b) = (random(&[m, k], seed), random(&[k, n], seed + 1));
        let mut g = Graph::new();
        let (av, bv) = (g.constant(&a), g.constant(&b));
        let p = g.matmul(av, bv).unwrap();
        let oracle = naive_matmul(&a, &b);
        for (x, y) in g.value(p).iter().zip(&oracle) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(r in 1usize..6, c in 1usize..9, seed in 0u64..1000) {
        let x = random(&[r, c], seed);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let scaled = g.scale(xv, 30.0);
        let s = g.softmax(scaled, 1).unwrap();
        for row in g.value(s).chunks(c) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
