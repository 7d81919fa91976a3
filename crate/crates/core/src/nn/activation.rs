use ndarray::{Array4, Axis, Zip};
use rand::Rng;

use super::{Float, Mode, NnError, Tensor4};

pub fn relu<F: Float>(input: &Tensor4<F>) -> Tensor4<F> {
    Tensor4::wrap(input.values().mapv(|v| if v > F::zero() { v } else { F::zero() }))
}

/// Subgradient of ReLU; zero at the kink.
pub fn relu_backward<F: Float>(input: &Array4<F>, grad_out: &Array4<F>) -> Array4<F> {
    let mut g = grad_out.clone();
    Zip::from(&mut g).and(input).for_each(|g, &x| {
        if x <= F::zero() {
            *g = F::zero();
        }
    });
    g
}

/// Inverted dropout. Returns the output and, in train mode, the per-unit
/// multiplier (0 or 1/(1 − rate)) needed by [`dropout_backward`].
pub fn dropout<F: Float, R: Rng + ?Sized>(
    input: &Tensor4<F>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor4<F>, Option<Array4<F>>), NnError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NnError::InvalidParameter(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = F::of(1.0 / (1.0 - rate));
    let mask = Array4::from_shape_simple_fn(input.values().raw_dim(), || {
        if rng.random::<f64>() < rate {
            F::zero()
        } else {
            keep
        }
    });
    let out = input.values() * &mask;
    Ok((Tensor4::wrap(out), Some(mask)))
}

pub fn dropout_backward<F: Float>(mask: Option<&Array4<F>>, grad_out: &Array4<F>) -> Array4<F> {
    match mask {
        Some(m) => grad_out * m,
        None => grad_out.clone(),
    }
}

/// Softmax over the channel axis at every pixel, evaluated in
/// max-subtracted form.
pub fn softmax_channels<F: Float>(logits: &Tensor4<F>) -> Tensor4<F> {
    let mut out = logits.values().to_owned();
    for mut img in out.outer_iter_mut() {
        for mut lane in img.lanes_mut(Axis(0)) {
            let max = lane.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            lane.mapv_inplace(|v| (v - max).exp());
            let sum: F = lane.sum();
            lane.mapv_inplace(|v| v / sum);
        }
    }
    Tensor4::wrap(out)
}

/// Given softmax output `probs` and dL/dprobs, returns dL/dlogits:
/// `p_c (g_c − Σ_k p_k g_k)`.
pub fn softmax_channels_backward<F: Float>(probs: &Array4<F>, grad_out: &Array4<F>) -> Array4<F> {
    let mut g = Array4::zeros(probs.raw_dim());
    for ((p, go), mut gi) in probs.outer_iter().zip(grad_out.outer_iter()).zip(g.outer_iter_mut()) {
        for ((pl, gl), mut il) in p
            .lanes(Axis(0))
            .into_iter()
            .zip(go.lanes(Axis(0)))
            .zip(gi.lanes_mut(Axis(0)))
        {
            let dot: F = pl.iter().zip(gl.iter()).map(|(&a, &b)| a * b).sum();
            Zip::from(&mut il).and(&pl).and(&gl).for_each(|o, &p, &g| *o = p * (g - dot));
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_examples() {
        let x = Tensor4::new(array![[[[-1.0, 0.0, 2.0]]]]).unwrap();
        assert_eq!(relu(&x).values(), &array![[[[0.0, 0.0, 2.0]]]]);
        let pos = Tensor4::new(array![[[[0.5, 3.0]]]]).unwrap();
        assert_eq!(relu(&pos).values(), pos.values());
        let g = relu_backward(x.values(), &Array4::ones((1, 1, 1, 3)));
        assert_eq!(g, array![[[[0.0, 0.0, 1.0]]]]);
    }

    #[test]
    fn dropout_identities_and_invalid_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor4::new(Array4::from_elem((1, 2, 3, 3), 1.5f64)).unwrap();
        assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap().0, x);
        assert_eq!(dropout(&x, 0.7, Mode::Infer, &mut rng).unwrap().0, x);
        assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_mean_in_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor4::new(Array4::from_elem((4, 8, 64, 64), 1.0f64)).unwrap();
        let (y, mask) = dropout(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = y.values().mean().unwrap();
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        let zeros = mask.unwrap().iter().filter(|&&m| m == 0.0).count();
        let frac = zeros as f64 / (4.0 * 8.0 * 64.0 * 64.0);
        assert!((frac - 0.5).abs() < 0.01);
    }

    #[test]
    fn softmax_examples() {
        let zeros = Tensor4::<f64>::zeros((1, 24, 2, 2));
        assert!(softmax_channels(&zeros).values().iter().all(|&p| (p - 1.0 / 24.0).abs() < 1e-15));

        let x = Tensor4::new(array![[[[1.0]], [[0.0]]]]).unwrap();
        let p = softmax_channels(&x);
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(p.values()[[0, 0, 0, 0]], e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p.values()[[0, 0, 0, 0]], 0.7311, epsilon = 1e-4);
        assert_abs_diff_eq!(p.values()[[0, 1, 0, 0]], 1.0 / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p.values()[[0, 1, 0, 0]], 0.2689, epsilon = 1e-4);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array::from_shape_simple_fn((2, 5, 3, 3), || rng.random_range(-4.0..4.0f64));
        let a = softmax_channels(&Tensor4::new(x.clone()).unwrap());
        let b = softmax_channels(&Tensor4::new(x + 10.0).unwrap());
        for (p, q) in a.values().iter().zip(b.values()) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-12);
        }
    }
}
