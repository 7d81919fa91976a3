use ndarray::{Array2, Array4};

use super::{Float, NnError, Tensor4};

/// Interpolation taps for one axis under the align-corners convention:
/// output index `o` samples input coordinate `o·(in − 1)/(out − 1)`.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            let src = if output > 1 && input > 1 {
                o as f64 * (input - 1) as f64 / (output - 1) as f64
            } else {
                0.0
            };
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Dense (out × in) interpolation matrix for one axis.
fn axis_matrix<F: Float>(input: usize, output: usize) -> Array2<F> {
    let mut m = Array2::zeros((output, input));
    for (o, (i0, i1, t)) in taps(input, output).into_iter().enumerate() {
        m[[o, i0]] += F::of(1.0 - t);
        m[[o, i1]] += F::of(t);
    }
    m
}

fn check(h: usize, w: usize, out_h: usize, out_w: usize) -> Result<(), NnError> {
    if out_h < h || out_w < w {
        return Err(NnError::Shape(format!(
            "upsampling target {out_h}×{out_w} smaller than input {h}×{w}"
        )));
    }
    Ok(())
}

/// Separable bilinear interpolation with aligned corners.
pub fn bilinear_upsample<F: Float>(
    input: &Tensor4<F>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor4<F>, NnError> {
    let (n, c, h, w) = input.dims();
    check(h, w, out_h, out_w)?;
    if (h, w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let rows = axis_matrix::<F>(h, out_h);
    let cols_t = axis_matrix::<F>(w, out_w).reversed_axes();
    let mut out = Array4::zeros((n, c, out_h, out_w));
    for (img, mut dst) in input.values().outer_iter().zip(out.outer_iter_mut()) {
        for (plane, mut o) in img.outer_iter().zip(dst.outer_iter_mut()) {
            o.assign(&rows.dot(&plane).dot(&cols_t));
        }
    }
    Ok(Tensor4::wrap(out))
}

/// Transpose of the interpolation operator applied to `grad_out`.
pub fn bilinear_upsample_backward<F: Float>(
    grad_out: &Array4<F>,
    in_h: usize,
    in_w: usize,
) -> Result<Array4<F>, NnError> {
    let (n, c, out_h, out_w) = grad_out.dim();
    check(in_h, in_w, out_h, out_w)?;
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(grad_out.clone());
    }
    let rows_t = axis_matrix::<F>(in_h, out_h).reversed_axes();
    let cols = axis_matrix::<F>(in_w, out_w);
    let mut grad_in = Array4::zeros((n, c, in_h, in_w));
    for (img, mut dst) in grad_out.outer_iter().zip(grad_in.outer_iter_mut()) {
        for (plane, mut o) in img.outer_iter().zip(dst.outer_iter_mut()) {
            o.assign(&rows_t.dot(&plane).dot(&cols));
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn row_one_three_to_length_three() {
        let x = Tensor4::new(array![[[[1.0, 3.0]]]]).unwrap();
        let y = bilinear_upsample(&x, 1, 3).unwrap();
        assert_eq!(y.values(), &array![[[[1.0, 2.0, 3.0]]]]);
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor4::new(Array4::from_elem((1, 2, 3, 4), 0.75f64)).unwrap();
        let y = bilinear_upsample(&x, 12, 16).unwrap();
        assert!(y.values().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor4::new(Array4::from_shape_fn((1, 1, 3, 3), |(_, _, y, x)| (y * 3 + x) as f64)).unwrap();
        assert_eq!(bilinear_upsample(&x, 3, 3).unwrap(), x);
    }

    #[test]
    fn one_by_one_broadcasts() {
        let x = Tensor4::new(array![[[[2.5]]]]).unwrap();
        let y = bilinear_upsample(&x, 4, 5).unwrap();
        assert!(y.values().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn shrinking_is_rejected() {
        let x = Tensor4::<f64>::zeros((1, 1, 4, 4));
        assert!(bilinear_upsample(&x, 2, 4).is_err());
    }

    #[test]
    fn corners_map_to_corners() {
        let x = Tensor4::new(array![[[[1.0, 2.0], [3.0, 4.0]]]]).unwrap();
        let y = bilinear_upsample(&x, 5, 7).unwrap();
        let v = y.values();
        assert_eq!([v[[0, 0, 0, 0]], v[[0, 0, 0, 6]], v[[0, 0, 4, 0]], v[[0, 0, 4, 6]]], [1.0, 2.0, 3.0, 4.0]);
    }
}
