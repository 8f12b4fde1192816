//! Central-difference gradient verification.
//!
//! `finite_diff` evaluates a scalar-valued function at x +/- h per element;
//! `max_rel_err` compares an analytic gradient against it. Relative error
//! uses max(|a|, |n|, 1e-6) as the denominator so near-zero pairs compare
//! absolutely at 1e-6 resolution instead of blowing up.

use crate::tensor::Tensor4;

pub const DEFAULT_STEP: f64 = 1e-5;

pub fn finite_diff(f: &mut dyn FnMut(&Tensor4) -> f64, x: &Tensor4, h: f64) -> Tensor4 {
    let mut grad = Tensor4::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

pub fn max_rel_err(analytic: &Tensor4, numeric: &Tensor4) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradcheck shape mismatch");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Convenience: finite differences against an analytic gradient in one call.
pub fn check(f: &mut dyn FnMut(&Tensor4) -> f64, x: &Tensor4, analytic: &Tensor4, h: f64) -> f64 {
    let numeric = finite_diff(f, x, h);
    max_rel_err(analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        let x = Tensor4::from_vec([1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut f = |t: &Tensor4| t.data().iter().map(|v| v * v).sum::<f64>();
        let analytic = x.map(|v| 2.0 * v);
        assert!(check(&mut f, &x, &analytic, DEFAULT_STEP) < 1e-9);
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor4::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let mut f = |t: &Tensor4| t.data().iter().sum::<f64>();
        let wrong = x.map(|_| 2.0);
        assert!(check(&mut f, &x, &wrong, DEFAULT_STEP) > 0.4);
    }
}
