use ndarray::{Array1, Array4, Axis};

use super::{Float, Mode, NnError, Param, Tensor4};

/// Per-channel batch normalisation parameters and running statistics.
///
/// Running statistics are updated as `r ← momentum·r + (1 − momentum)·batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub momentum: F,
    pub epsilon: F,
}

impl<F: Float> BatchNormState<F> {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Result<Self, NnError> {
        if !(epsilon > 0.0) {
            return Err(NnError::InvalidParameter("batch norm epsilon must be positive".into()));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(NnError::InvalidParameter("batch norm momentum must lie in [0, 1]".into()));
        }
        Ok(Self {
            gamma: Param::new(Array1::ones(channels).into_dyn()),
            beta: Param::zeros(&[channels]),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: F::of(momentum),
            epsilon: F::of(epsilon),
        })
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Values saved by a train-mode forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<F> {
    normalized: Array4<F>,
    inv_std: Array1<F>,
    mode: Mode,
}

pub fn batch_norm<F: Float>(
    input: &Tensor4<F>,
    state: &mut BatchNormState<F>,
    mode: Mode,
) -> Result<(Tensor4<F>, BatchNormCache<F>), NnError> {
    let (n, c, h, w) = input.dims();
    if c != state.channels() {
        return Err(NnError::ChannelMismatch {
            expected: state.channels(),
            got: c,
        });
    }
    let count = n * h * w;
    let x = input.values();
    let (mean, var) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(NnError::DegenerateBatch(count));
            }
            let inv_count = F::one() / F::of(count as f64);
            let mean = x.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1)) * inv_count;
            let mut var = Array1::<F>::zeros(c);
            for img in x.outer_iter() {
                for (ch, plane) in img.outer_iter().enumerate() {
                    let m = mean[ch];
                    var[ch] += plane.iter().map(|&v| (v - m) * (v - m)).sum::<F>();
                }
            }
            var *= inv_count;
            let keep = state.momentum;
            let unbiased = F::of(count as f64 / (count - 1) as f64);
            state.running_mean = &state.running_mean * keep + &(&mean * (F::one() - keep));
            state.running_var = &state.running_var * keep + &(&var * ((F::one() - keep) * unbiased));
            (mean, var)
        }
        Mode::Infer => (state.running_mean.clone(), state.running_var.clone()),
    };
    let inv_std = var.mapv(|v| F::one() / (v + state.epsilon).sqrt());
    let gamma = state.gamma.value.view().into_dimensionality::<ndarray::Ix1>().expect("rank 1");
    let beta = state.beta.value.view().into_dimensionality::<ndarray::Ix1>().expect("rank 1");
    let mut normalized = x.to_owned();
    let mut out = Array4::zeros(x.raw_dim());
    for (mut img, mut o) in normalized.outer_iter_mut().zip(out.outer_iter_mut()) {
        for (ch, (mut plane, mut op)) in img.outer_iter_mut().zip(o.outer_iter_mut()).enumerate() {
            let (m, s, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            plane.mapv_inplace(|v| (v - m) * s);
            op.zip_mut_with(&plane, |o, &xh| *o = g * xh + b);
        }
    }
    Ok((Tensor4::wrap(out), BatchNormCache { normalized, inv_std, mode }))
}

/// Gradient through [`batch_norm`]; gamma/beta gradients are accumulated
/// into `state`. In train mode the batch statistics are differentiated
/// through, in infer mode they are constants.
pub fn batch_norm_backward<F: Float>(
    cache: &BatchNormCache<F>,
    state: &mut BatchNormState<F>,
    grad_out: &Array4<F>,
) -> Result<Array4<F>, NnError> {
    if grad_out.dim() != cache.normalized.dim() {
        return Err(NnError::Shape(format!(
            "batch norm gradient {:?} does not match {:?}",
            grad_out.shape(),
            cache.normalized.shape()
        )));
    }
    let (n, c, h, w) = grad_out.dim();
    let count = F::of((n * h * w) as f64);
    let mut sum_dy = Array1::<F>::zeros(c);
    let mut sum_dy_xh = Array1::<F>::zeros(c);
    for (g, xh) in grad_out.outer_iter().zip(cache.normalized.outer_iter()) {
        for (ch, (gp, xp)) in g.outer_iter().zip(xh.outer_iter()).enumerate() {
            let mut s = F::zero();
            let mut sx = F::zero();
            ndarray::Zip::from(&gp).and(&xp).for_each(|&dy, &x| {
                s += dy;
                sx += dy * x;
            });
            sum_dy[ch] += s;
            sum_dy_xh[ch] += sx;
        }
    }
    let gamma = state
        .gamma
        .value
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("rank 1")
        .to_owned();
    let mut grad_in = Array4::zeros(grad_out.raw_dim());
    for ((g, xh), mut gi) in grad_out
        .outer_iter()
        .zip(cache.normalized.outer_iter())
        .zip(grad_in.outer_iter_mut())
    {
        for (ch, ((gp, xp), mut dp)) in g
            .outer_iter()
            .zip(xh.outer_iter())
            .zip(gi.outer_iter_mut())
            .enumerate()
        {
            let scale = gamma[ch] * cache.inv_std[ch];
            match cache.mode {
                Mode::Train => {
                    let mean_dy = sum_dy[ch] / count;
                    let mean_dy_xh = sum_dy_xh[ch] / count;
                    ndarray::Zip::from(&mut dp).and(&gp).and(&xp).for_each(|d, &dy, &x| {
                        *d = scale * (dy - mean_dy - x * mean_dy_xh);
                    });
                }
                Mode::Infer => dp.zip_mut_with(&gp, |d, &dy| *d = scale * dy),
            }
        }
    }
    state.gamma.grad += &sum_dy_xh.into_dyn();
    state.beta.grad += &sum_dy.into_dyn();
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: (usize, usize, usize, usize), seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::new(Array::from_shape_simple_fn(dims, || rng.random_range(-3.0..5.0))).unwrap()
    }

    #[test]
    fn train_mode_standardises_each_channel() {
        let x = random((4, 3, 5, 5), 1);
        let mut st = BatchNormState::new(3, 0.9, 1e-5).unwrap();
        let (y, _) = batch_norm(&x, &mut st, Mode::Train).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = y.values().index_axis(Axis(1), ch).iter().copied().collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6);
            let xv: Vec<f64> = x.values().index_axis(Axis(1), ch).iter().copied().collect();
            let xm = xv.iter().sum::<f64>() / xv.len() as f64;
            let sigma2 = xv.iter().map(|a| (a - xm) * (a - xm)).sum::<f64>() / xv.len() as f64;
            let expected = sigma2 / (sigma2 + 1e-5);
            assert!((v / expected - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn constant_input_normalises_to_zero() {
        let x = Tensor4::new(Array4::from_elem((2, 2, 3, 3), 4.2f64)).unwrap();
        let mut st = BatchNormState::new(2, 0.9, 1e-5).unwrap();
        let (y, _) = batch_norm(&x, &mut st, Mode::Train).unwrap();
        assert!(y.values().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn infer_mode_uses_running_statistics() {
        let x = random((2, 1, 3, 3), 2);
        let mut st = BatchNormState::new(1, 0.9, 1e-5).unwrap();
        st.gamma.value.fill(2.0);
        st.beta.value.fill(1.0);
        let (y, _) = batch_norm(&x, &mut st, Mode::Infer).unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in x.values().iter().zip(y.values()) {
            assert_abs_diff_eq!(*b, 2.0 * a * s + 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn running_statistics_follow_momentum() {
        let x = Tensor4::new(Array::from_shape_vec((1, 1, 1, 2), vec![1.0, 3.0]).unwrap()).unwrap();
        let mut st = BatchNormState::<f64>::new(1, 0.9, 1e-5).unwrap();
        batch_norm(&x, &mut st, Mode::Train).unwrap();
        assert_abs_diff_eq!(st.running_mean[0], 0.2, epsilon = 1e-12);
        // unbiased batch variance 2
        assert_abs_diff_eq!(st.running_var[0], 0.9 + 0.1 * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_train_batch_is_an_error() {
        let x = Tensor4::new(Array4::<f64>::ones((1, 2, 1, 1))).unwrap();
        let mut st = BatchNormState::new(2, 0.9, 1e-5).unwrap();
        assert_eq!(batch_norm(&x, &mut st, Mode::Train).unwrap_err(), NnError::DegenerateBatch(1));
        assert!(batch_norm(&x, &mut st, Mode::Infer).is_ok());
    }
}
