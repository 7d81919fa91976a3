use ndarray::{Array4, Axis};

use super::{Float, NnError, Tensor4};

fn pooled_len(len: usize, size: usize, stride: usize) -> usize {
    (len - size) / stride + 1
}

fn check_pool(h: usize, w: usize, size: usize, stride: usize) -> Result<(), NnError> {
    if size == 0 || stride == 0 {
        return Err(NnError::InvalidParameter("pool size and stride must be positive".into()));
    }
    if h < size || w < size {
        return Err(NnError::Shape(format!("input {h}×{w} smaller than pool size {size}")));
    }
    Ok(())
}

/// Index (dy, dx) of the first maximal element of one window, row-major.
#[inline]
fn window_argmax<F: Float>(plane: &ndarray::ArrayView2<F>, y0: usize, x0: usize, size: usize) -> (usize, usize) {
    let mut best = (y0, x0);
    let mut best_v = plane[[y0, x0]];
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            let v = plane[[y, x]];
            if v > best_v {
                best_v = v;
                best = (y, x);
            }
        }
    }
    best
}

pub fn max_pool<F: Float>(input: &Tensor4<F>, size: usize, stride: usize) -> Result<Tensor4<F>, NnError> {
    let (n, c, h, w) = input.dims();
    check_pool(h, w, size, stride)?;
    let (oh, ow) = (pooled_len(h, size, stride), pooled_len(w, size, stride));
    let mut out = Array4::zeros((n, c, oh, ow));
    for (src, mut dst) in input.values().outer_iter().zip(out.outer_iter_mut()) {
        for (plane, mut o) in src.outer_iter().zip(dst.outer_iter_mut()) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, x) = window_argmax(&plane, oy * stride, ox * stride, size);
                    o[[oy, ox]] = plane[[y, x]];
                }
            }
        }
    }
    Ok(Tensor4::wrap(out))
}

/// Routes each output gradient to the first maximal input of its window.
pub fn max_pool_backward<F: Float>(
    input: &Tensor4<F>,
    size: usize,
    stride: usize,
    grad_out: &Array4<F>,
) -> Result<Array4<F>, NnError> {
    let (n, c, h, w) = input.dims();
    check_pool(h, w, size, stride)?;
    let (oh, ow) = (pooled_len(h, size, stride), pooled_len(w, size, stride));
    if grad_out.dim() != (n, c, oh, ow) {
        return Err(NnError::Shape(format!(
            "pool gradient {:?} does not match output {:?}",
            grad_out.shape(),
            (n, c, oh, ow)
        )));
    }
    let mut grad_in = Array4::zeros((n, c, h, w));
    for ((src, g), mut dst) in input
        .values()
        .outer_iter()
        .zip(grad_out.outer_iter())
        .zip(grad_in.outer_iter_mut())
    {
        for ((plane, gp), mut dp) in src.outer_iter().zip(g.outer_iter()).zip(dst.outer_iter_mut()) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, x) = window_argmax(&plane, oy * stride, ox * stride, size);
                    dp[[y, x]] += gp[[oy, ox]];
                }
            }
        }
    }
    Ok(grad_in)
}

/// Mean over H×W, producing N×C×1×1.
pub fn global_avg_pool<F: Float>(input: &Tensor4<F>) -> Tensor4<F> {
    let (n, c, h, w) = input.dims();
    let scale = F::one() / F::of((h * w) as f64);
    let sums = input.values().sum_axis(Axis(3)).sum_axis(Axis(2));
    let out = sums.mapv(|v| v * scale).into_shape_with_order((n, c, 1, 1)).expect("contiguous");
    Tensor4::wrap(out)
}

pub fn global_avg_pool_backward<F: Float>(grad_out: &Array4<F>, h: usize, w: usize) -> Array4<F> {
    let (n, c, _, _) = grad_out.dim();
    let scale = F::one() / F::of((h * w) as f64);
    Array4::from_shape_fn((n, c, h, w), |(i, j, _, _)| grad_out[[i, j, 0, 0]] * scale)
}

/// Copies an N×C×1×1 tensor to every spatial position of an H×W map.
pub fn broadcast_spatial<F: Float>(input: &Tensor4<F>, h: usize, w: usize) -> Result<Tensor4<F>, NnError> {
    let (n, c, ih, iw) = input.dims();
    if (ih, iw) != (1, 1) {
        return Err(NnError::Shape(format!("broadcast expects 1×1 maps, got {ih}×{iw}")));
    }
    let v = input.values();
    Ok(Tensor4::wrap(Array4::from_shape_fn((n, c, h, w), |(i, j, _, _)| v[[i, j, 0, 0]])))
}

pub fn broadcast_backward<F: Float>(grad_out: &Array4<F>) -> Array4<F> {
    let (n, c, _, _) = grad_out.dim();
    grad_out
        .sum_axis(Axis(3))
        .sum_axis(Axis(2))
        .into_shape_with_order((n, c, 1, 1))
        .expect("contiguous")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two_window() {
        let x = Tensor4::new(array![[[[1.0, 2.0], [3.0, 4.0]]]]).unwrap();
        let y = max_pool(&x, 2, 2).unwrap();
        assert_eq!(y.values(), &array![[[[4.0]]]]);
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let x = Tensor4::new(Array4::from_elem((2, 3, 8, 6), 0.25f64)).unwrap();
        let y = max_pool(&x, 2, 2).unwrap();
        assert_eq!(y.dims(), (2, 3, 4, 3));
        assert!(y.values().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn random_input_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array::from_shape_simple_fn((1, 1, 8, 8), || rng.random_range(-1.0..1.0f64));
        let y = max_pool(&Tensor4::new(x.clone()).unwrap(), 2, 2).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x[[0, 0, 2 * oy + dy, 2 * ox + dx]]);
                    }
                }
                assert_eq!(y.values()[[0, 0, oy, ox]], m);
            }
        }
    }

    #[test]
    fn tie_gradient_goes_to_first_maximum() {
        let x = Tensor4::new(array![[[[5.0, 5.0], [5.0, 1.0]]]]).unwrap();
        let g = max_pool_backward(&x, 2, 2, &array![[[[1.0]]]]).unwrap();
        assert_eq!(g, array![[[[1.0, 0.0], [0.0, 0.0]]]]);
    }

    #[test]
    fn broadcast_round_trip_shapes() {
        let x = Tensor4::new(Array4::from_shape_fn((2, 3, 4, 5), |(n, c, y, x)| (n + c + y * x) as f64))
            .unwrap();
        let p = global_avg_pool(&x);
        assert_eq!(p.dims(), (2, 3, 1, 1));
        let b = broadcast_spatial(&p, 4, 5).unwrap();
        assert_eq!(b.dims(), (2, 3, 4, 5));
        let g = broadcast_backward(&Array4::<f64>::ones((2, 3, 4, 5)));
        assert!(g.iter().all(|&v| v == 20.0));
    }
}
