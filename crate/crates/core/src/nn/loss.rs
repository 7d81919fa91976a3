use ndarray::{Array4, Axis};

use super::{Float, NnError, Tensor4};

fn check_shapes<F: Float>(pred: &Tensor4<F>, target: &Tensor4<F>, mask: &Tensor4<F>) -> Result<(), NnError> {
    let (n, _, h, w) = pred.dims();
    if pred.dims() != target.dims() {
        return Err(NnError::Shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.dims(),
            target.dims()
        )));
    }
    if mask.dims() != (n, 1, h, w) {
        return Err(NnError::Shape(format!("mask {:?} is not {:?}", mask.dims(), (n, 1, h, w))));
    }
    Ok(())
}

fn masked_count<F: Float>(mask: &Tensor4<F>) -> Result<usize, NnError> {
    match mask.values().iter().filter(|&&m| m > F::zero()).count() {
        0 => Err(NnError::EmptyMask),
        c => Ok(c),
    }
}

/// Cross entropy `−Σ_c t_c ln p_c` averaged over pixels whose mask is set.
/// Pixels outside the mask are never read.
pub fn masked_cross_entropy<F: Float>(
    pred: &Tensor4<F>,
    target: &Tensor4<F>,
    mask: &Tensor4<F>,
) -> Result<F, NnError> {
    check_shapes(pred, target, mask)?;
    let count = masked_count(mask)?;
    let (n, c, h, w) = pred.dims();
    let (p, t, m) = (pred.values(), target.values(), mask.values());
    let tiny = F::min_positive_value();
    let mut total = 0.0f64;
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                if m[[i, 0, y, x]] <= F::zero() {
                    continue;
                }
                for ch in 0..c {
                    let tv = t[[i, ch, y, x]];
                    if tv != F::zero() {
                        total -= (tv * p[[i, ch, y, x]].max(tiny).ln()).to_f64().unwrap_or(f64::NAN);
                    }
                }
            }
        }
    }
    Ok(F::of(total / count as f64))
}

/// dL/dpred of [`masked_cross_entropy`]; exactly zero outside the mask.
pub fn masked_cross_entropy_backward<F: Float>(
    pred: &Tensor4<F>,
    target: &Tensor4<F>,
    mask: &Tensor4<F>,
) -> Result<Array4<F>, NnError> {
    check_shapes(pred, target, mask)?;
    let scale = F::one() / F::of(masked_count(mask)? as f64);
    let tiny = F::min_positive_value();
    let mut grad = Array4::zeros(pred.values().raw_dim());
    let (p, t, m) = (pred.values(), target.values(), mask.values());
    for ((i, ch, y, x), g) in grad.indexed_iter_mut() {
        if m[[i, 0, y, x]] > F::zero() {
            *g = -t[[i, ch, y, x]] / p[[i, ch, y, x]].max(tiny) * scale;
        }
    }
    Ok(grad)
}

/// Loss value together with its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct LossOutput<F> {
    pub loss: F,
    pub grad_logits: Array4<F>,
    /// Number of pixels that entered the mean.
    pub pixels: usize,
}

/// Fused softmax + masked cross entropy on logits, computed through
/// log-sum-exp. Equal to `masked_cross_entropy(softmax_channels(logits))`
/// but without underflow when a probability rounds to zero.
pub fn softmax_cross_entropy<F: Float>(
    logits: &Tensor4<F>,
    target: &Tensor4<F>,
    mask: &Tensor4<F>,
) -> Result<LossOutput<F>, NnError> {
    check_shapes(logits, target, mask)?;
    let count = masked_count(mask)?;
    let scale = F::one() / F::of(count as f64);
    let (n, _, h, w) = logits.dims();
    let mut grad = Array4::zeros(logits.values().raw_dim());
    let mut total = 0.0f64;
    for i in 0..n {
        let li = logits.values().index_axis(Axis(0), i);
        let ti = target.values().index_axis(Axis(0), i);
        let mut gi = grad.index_axis_mut(Axis(0), i);
        for y in 0..h {
            for x in 0..w {
                if mask.values()[[i, 0, y, x]] <= F::zero() {
                    continue;
                }
                let l = li.slice(ndarray::s![.., y, x]);
                let t = ti.slice(ndarray::s![.., y, x]);
                let max = l.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
                let sum: F = l.iter().map(|&v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                let t_sum: F = t.sum();
                let mut px = F::zero();
                let mut g = gi.slice_mut(ndarray::s![.., y, x]);
                for ((gc, &lc), &tc) in g.iter_mut().zip(l.iter()).zip(t.iter()) {
                    if tc != F::zero() {
                        px += tc * (lse - lc);
                    }
                    let p = (lc - max).exp() / sum;
                    *gc = (p * t_sum - tc) * scale;
                }
                total += px.to_f64().unwrap_or(f64::NAN);
            }
        }
    }
    Ok(LossOutput {
        loss: F::of(total / count as f64),
        grad_logits: grad,
        pixels: count,
    })
}
