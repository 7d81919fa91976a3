//! Kernel checks against independent brute-force evaluations.

use mfish_core::nn::{
    batch_norm, batch_norm_backward, bilinear_upsample, bilinear_upsample_backward, conv2d, conv2d_backward,
    grad_check, masked_cross_entropy, masked_cross_entropy_backward, max_pool, max_pool_backward, relu,
    relu_backward, softmax_channels, softmax_channels_backward, BatchNormState, ConvParams, Mode, Padding,
    Tensor4,
};
use ndarray::{Array, Array1, Array4, ArrayD, Ix4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random4(rng: &mut ChaCha8Rng, dims: (usize, usize, usize, usize)) -> Array4<f64> {
    Array::from_shape_simple_fn(dims, || rng.random_range(-1.0..1.0))
}

/// Direct evaluation of the dilated convolution as a sum over all
/// (signal position m, kernel tap t) pairs with m + l·t = x.
fn dilated_conv_oracle(input: &Array4<f64>, weights: &Array4<f64>, bias: &Array1<f64>, dilation: usize) -> Array4<f64> {
    let (n, c_in, h, w) = input.dim();
    let (c_out, _, kh, kw) = weights.dim();
    let (rh, rw) = ((kh / 2) as isize, (kw / 2) as isize);
    let l = dilation as isize;
    let mut out = Array4::zeros((n, c_out, h, w));
    for b in 0..n {
        for o in 0..c_out {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = bias[o];
                    for c in 0..c_in {
                        for my in 0..h as isize {
                            for mx in 0..w as isize {
                                for ty in -rh..=rh {
                                    for tx in -rw..=rw {
                                        if my + l * ty == y && mx + l * tx == x {
                                            acc += input[[b, c, my as usize, mx as usize]]
                                                * weights[[o, c, (ty + rh) as usize, (tx + rw) as usize]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    out[[b, o, y as usize, x as usize]] = acc;
                }
            }
        }
    }
    out
}

/// Textbook 2-D discrete convolution (f * k)(x) = Σ_m f(m) k(x − m) with a
/// centred kernel and zero extension.
fn standard_conv_oracle(input: &Array4<f64>, weights: &Array4<f64>) -> Array4<f64> {
    let (n, c_in, h, w) = input.dim();
    let (c_out, _, kh, kw) = weights.dim();
    let (rh, rw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = Array4::zeros((n, c_out, h, w));
    for ((b, o, y, x), v) in out.indexed_iter_mut() {
        let mut acc = 0.0;
        for c in 0..c_in {
            for my in 0..h as isize {
                for mx in 0..w as isize {
                    let (ky, kx) = (y as isize - my + rh, x as isize - mx + rw);
                    if (0..kh as isize).contains(&ky) && (0..kw as isize).contains(&kx) {
                        acc += input[[b, c, my as usize, mx as usize]] * weights[[o, c, ky as usize, kx as usize]];
                    }
                }
            }
        }
        *v = acc;
    }
    out
}

#[test]
fn dilation_one_is_standard_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random4(&mut rng, (2, 3, 8, 8));
    let k = random4(&mut rng, (4, 3, 3, 3));
    let params = ConvParams::new(k.clone(), Array1::zeros(4), 1, 1, Padding::Same).unwrap();
    let got = conv2d(&Tensor4::new(x.clone()).unwrap(), &params).unwrap();
    let want = standard_conv_oracle(&x, &k);
    for (a, b) in got.values().iter().zip(want.iter()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn delta_response_stays_inside_dilated_window() {
    for l in 1..=4usize {
        let mut x = Array4::<f64>::zeros((1, 1, 15, 15));
        x[[0, 0, 7, 7]] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(l as u64);
        let k = random4(&mut rng, (1, 1, 3, 3)).mapv(|v| v + 2.0);
        let params = ConvParams::new(k, Array1::zeros(1), l, 1, Padding::Same).unwrap();
        let y = conv2d(&Tensor4::new(x).unwrap(), &params).unwrap();
        for ((_, _, r, c), &v) in y.values().indexed_iter() {
            let inside = r.abs_diff(7) <= l && c.abs_diff(7) <= l;
            if !inside {
                assert_eq!(v, 0.0, "dilation {l} leaked to ({r},{c})");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_matches_direct_dilated_sum(
        seed in any::<u64>(),
        h in 3usize..=16,
        w in 3usize..=16,
        dilation in 1usize..=5,
        kernel in prop::sample::select(vec![1usize, 3, 5]),
        c_in in 1usize..=2,
        c_out in 1usize..=2,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random4(&mut rng, (1, c_in, h, w));
        let k = random4(&mut rng, (c_out, c_in, kernel, kernel));
        let b = Array1::from_shape_simple_fn(c_out, || rng.random_range(-1.0..1.0));
        let params = ConvParams::new(k.clone(), b.clone(), dilation, 1, Padding::Same).unwrap();
        let got = conv2d(&Tensor4::new(x.clone()).unwrap(), &params).unwrap();
        let want = dilated_conv_oracle(&x, &k, &b, dilation);
        prop_assert_eq!(got.dims(), want.dim());
        for (a, e) in got.values().iter().zip(want.iter()) {
            prop_assert!((a - e).abs() <= 1e-12, "{} vs {}", a, e);
        }
    }
}

// --- gradient checks -------------------------------------------------------

const TOL: f64 = 1e-4;

fn projection(rng: &mut ChaCha8Rng, dims: (usize, usize, usize, usize)) -> Array4<f64> {
    random4(rng, dims)
}

fn dot(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn as4(a: &ArrayD<f64>) -> Array4<f64> {
    a.clone().into_dimensionality::<Ix4>().unwrap()
}

#[test]
fn conv2d_gradients() {
    for dilation in [1, 2, 6] {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + dilation as u64);
        let x = random4(&mut rng, (1, 2, 8, 8));
        let k = random4(&mut rng, (3, 2, 3, 3));
        let b = Array1::from_shape_simple_fn(3, || rng.random_range(-1.0..1.0));
        let r = projection(&mut rng, (1, 3, 8, 8));
        let mut params = ConvParams::new(k.clone(), b.clone(), dilation, 1, Padding::Same).unwrap();
        let gx = conv2d_backward(&Tensor4::new(x.clone()).unwrap(), &mut params, &r).unwrap();
        let analytic = vec![gx.into_dyn(), params.weights.grad.clone(), params.bias.grad.clone()];
        let inputs = vec![x.into_dyn(), k.into_dyn(), b.into_dyn()];
        let report = grad_check(
            &inputs,
            &analytic,
            |v| {
                let p = ConvParams::new(as4(&v[1]), v[2].clone().into_dimensionality().unwrap(), dilation, 1, Padding::Same)
                    .unwrap();
                dot(conv2d(&Tensor4::new(as4(&v[0])).unwrap(), &p).unwrap().values(), &r)
            },
            TOL,
        );
        assert!(report.passed, "dilation {dilation}: {report:?}");
    }
}

#[test]
fn conv2d_gradient_on_small_input_dilation_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random4(&mut rng, (1, 1, 4, 4));
    let k = random4(&mut rng, (1, 1, 3, 3));
    let r = projection(&mut rng, (1, 1, 4, 4));
    let mut params = ConvParams::new(k.clone(), Array1::zeros(1), 2, 1, Padding::Same).unwrap();
    let gx = conv2d_backward(&Tensor4::new(x.clone()).unwrap(), &mut params, &r).unwrap();
    let report = grad_check(
        &[x.into_dyn(), k.into_dyn()],
        &[gx.into_dyn(), params.weights.grad.clone()],
        |v| {
            let p = ConvParams::new(as4(&v[1]), Array1::zeros(1), 2, 1, Padding::Same).unwrap();
            dot(conv2d(&Tensor4::new(as4(&v[0])).unwrap(), &p).unwrap().values(), &r)
        },
        TOL,
    );
    assert!(report.passed, "{report:?}");
}

#[test]
fn max_pool_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random4(&mut rng, (1, 4, 8, 8));
    let r = projection(&mut rng, (1, 4, 4, 4));
    let gx = max_pool_backward(&Tensor4::new(x.clone()).unwrap(), 2, 2, &r).unwrap();
    let report = grad_check(
        &[x.into_dyn()],
        &[gx.into_dyn()],
        |v| dot(max_pool(&Tensor4::new(as4(&v[0])).unwrap(), 2, 2).unwrap().values(), &r),
        TOL,
    );
    assert!(report.passed, "{report:?}");
}

#[test]
fn batch_norm_train_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random4(&mut rng, (1, 4, 8, 8)).mapv(|v| 3.0 * v + 1.0);
    let r = projection(&mut rng, (1, 4, 8, 8));
    let mut state = BatchNormState::<f64>::new(4, 0.9, 1e-5).unwrap();
    state.gamma.value = Array::from_shape_simple_fn(4, || rng.random_range(0.5..1.5)).into_dyn();
    state.beta.value = Array::from_shape_simple_fn(4, || rng.random_range(-0.5..0.5)).into_dyn();
    let (_, cache) = batch_norm(&Tensor4::new(x.clone()).unwrap(), &mut state, Mode::Train).unwrap();
    let gx = batch_norm_backward(&cache, &mut state, &r).unwrap();
    let analytic = vec![gx.into_dyn(), state.gamma.grad.clone(), state.beta.grad.clone()];
    let inputs = vec![x.into_dyn(), state.gamma.value.clone(), state.beta.value.clone()];
    let report = grad_check(
        &inputs,
        &analytic,
        |v| {
            let mut st = BatchNormState::<f64>::new(4, 0.9, 1e-5).unwrap();
            st.gamma.value = v[1].clone();
            st.beta.value = v[2].clone();
            let (y, _) = batch_norm(&Tensor4::new(as4(&v[0])).unwrap(), &mut st, Mode::Train).unwrap();
            dot(y.values(), &r)
        },
        TOL,
    );
    assert!(report.passed, "{report:?}");
}

#[test]
fn relu_gradient_is_positive_indicator() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random4(&mut rng, (1, 2, 8, 8));
    let r = projection(&mut rng, (1, 2, 8, 8));
    let gx = relu_backward(&x, &r);
    let report = grad_check(
        &[x.clone().into_dyn()],
        &[gx.clone().into_dyn()],
        |v| dot(relu(&Tensor4::new(as4(&v[0])).unwrap()).values(), &r),
        TOL,
    );
    assert!(report.passed, "{report:?}");
    let ones = Array4::ones(x.raw_dim());
    let mask = relu_backward(&x, &ones);
    for (m, v) in mask.iter().zip(x.iter()) {
        assert_eq!(*m, if *v > 0.0 { 1.0 } else { 0.0 });
    }
}

#[test]
fn bilinear_upsample_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random4(&mut rng, (1, 3, 2, 2));
    let r = projection(&mut rng, (1, 3, 8, 8));
    let gx = bilinear_upsample_backward(&r, 2, 2).unwrap();
    let report = grad_check(
        &[x.into_dyn()],
        &[gx.into_dyn()],
        |v| dot(bilinear_upsample(&Tensor4::new(as4(&v[0])).unwrap(), 8, 8).unwrap().values(), &r),
        TOL,
    );
    assert!(report.passed, "{report:?}");
}

fn one_hot_and_mask(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> (Array4<f64>, Array4<f64>) {
    let mut t = Array4::zeros((1, c, h, w));
    let mut m = Array4::zeros((1, 1, h, w));
    for y in 0..h {
        for x in 0..w {
            if rng.random_bool(0.7) {
                t[[0, rng.random_range(0..c), y, x]] = 1.0;
                m[[0, 0, y, x]] = 1.0;
            }
        }
    }
    (t, m)
}

#[test]
fn softmax_cross_entropy_gradient_and_masking() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let logits = random4(&mut rng, (1, 4, 8, 8)).mapv(|v| 2.0 * v);
    let (t, m) = one_hot_and_mask(&mut rng, 4, 8, 8);
    let (tt, mm) = (Tensor4::new(t.clone()).unwrap(), Tensor4::new(m.clone()).unwrap());
    let probs = softmax_channels(&Tensor4::new(logits.clone()).unwrap());
    let dp = masked_cross_entropy_backward(&probs, &tt, &mm).unwrap();
    let dl = softmax_channels_backward(probs.values(), &dp);
    let report = grad_check(
        &[logits.clone().into_dyn()],
        &[dl.clone().into_dyn()],
        |v| {
            let p = softmax_channels(&Tensor4::new(as4(&v[0])).unwrap());
            masked_cross_entropy(&p, &tt, &mm).unwrap()
        },
        TOL,
    );
    assert!(report.passed, "{report:?}");

    // probability-space gradient on its own
    let report = grad_check(
        &[probs.values().clone().into_dyn()],
        &[dp.clone().into_dyn()],
        |v| masked_cross_entropy(&Tensor4::new(as4(&v[0])).unwrap(), &tt, &mm).unwrap(),
        TOL,
    );
    assert!(report.passed, "{report:?}");

    for ((i, c, y, x), g) in dl.indexed_iter() {
        if m[[i, 0, y, x]] == 0.0 {
            assert_eq!(*g, 0.0);
            assert_eq!(dp[[i, c, y, x]], 0.0);
        }
    }
}
