use ndarray::ArrayD;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively, so
/// that finite-difference round-off on near-zero gradients is not reported as
/// a relative error.
const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares `analytic` gradients of a scalar function against central
/// finite differences of `loss`, element by element over every input.
pub fn grad_check<L>(inputs: &[ArrayD<f64>], analytic: &[ArrayD<f64>], mut loss: L, tolerance: f64) -> GradCheckReport
where
    L: FnMut(&[ArrayD<f64>]) -> f64,
{
    assert_eq!(inputs.len(), analytic.len(), "one analytic gradient per input");
    let mut probe: Vec<ArrayD<f64>> = inputs.to_vec();
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut checked = 0;
    for (k, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), inputs[k].shape(), "gradient shape of input {k}");
        for (idx, &a) in grad.indexed_iter() {
            let orig = inputs[k][&idx];
            probe[k][&idx] = orig + FD_STEP;
            let up = loss(&probe);
            probe[k][&idx] = orig - FD_STEP;
            let down = loss(&probe);
            probe[k][&idx] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        checked,
        tolerance,
        passed: max_rel < tolerance && max_rel.is_finite(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, ArrayD};

    #[test]
    fn detects_a_wrong_gradient() {
        let x = arr1(&[1.0, -2.0, 0.5]).into_dyn();
        let f = |v: &[ArrayD<f64>]| v[0].iter().map(|a| a * a * a).sum::<f64>();
        let good = x.mapv(|a| 3.0 * a * a);
        assert!(grad_check(&[x.clone()], &[good], f, 1e-6).passed);
        let bad = x.mapv(|a| 3.0 * a * a + 1e-2);
        assert!(!grad_check(&[x], &[bad], f, 1e-4).passed);
    }
}
