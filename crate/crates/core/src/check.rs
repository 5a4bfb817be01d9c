//! Finite-difference gradient checking.
//!
//! All checks run in `f64`: central differences lose roughly half the
//! mantissa, which leaves ~7 significant digits in double precision but
//! nothing usable in single.

use ndarray::ArrayD;

/// Central-difference gradient of a scalar function at `x`.
pub fn numeric_grad<F: FnMut(&ArrayD<f64>) -> f64>(
    mut f: F,
    x: &ArrayD<f64>,
    eps: f64,
) -> ArrayD<f64> {
    let mut g = ArrayD::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = x.as_slice().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + eps;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - eps;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Compare an analytic gradient against central differences.
///
/// Each checked entry must satisfy `|a - n| <= atol + rtol * max(|a|, |n|)`.
/// With `max_entries = Some(k)` only `k` evenly spaced entries are perturbed,
/// which keeps checks on conv-sized tensors affordable; `None` checks all.
/// Panics with the first offending entry on failure.
pub fn check_grad<F: FnMut(&ArrayD<f64>) -> f64>(
    mut f: F,
    x: &ArrayD<f64>,
    analytic: &ArrayD<f64>,
    eps: f64,
    rtol: f64,
    atol: f64,
    max_entries: Option<usize>,
) {
    assert_eq!(x.shape(), analytic.shape(), "check_grad: shape mismatch");
    let n = x.len();
    let picks: Vec<usize> = match max_entries {
        Some(k) if k < n => {
            let k = k.max(1);
            (0..k).map(|i| i * n / k).collect()
        }
        _ => (0..n).collect(),
    };
    let mut xp = x.clone();
    let a_flat = analytic.as_slice().expect("analytic grad is contiguous");
    for &idx in &picks {
        let orig = x.as_slice().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + eps;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - eps;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        let num = (fp - fm) / (2.0 * eps);
        let ana = a_flat[idx];
        let tol = atol + rtol * ana.abs().max(num.abs());
        assert!(
            (ana - num).abs() <= tol,
            "gradient mismatch at flat index {idx}: analytic {ana:.9e}, numeric {num:.9e}, tol {tol:.3e}"
        );
    }
}

/// Relative-error summary between two gradients (max over entries of
/// `|a-b| / (atol + max(|a|,|b|))`). Useful for reporting.
pub fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>, atol: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / (atol + x.abs().max(y.abs())))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn numeric_grad_of_quadratic() {
        let x = arr1(&[1.0, -2.0, 0.5]).into_dyn();
        let g = numeric_grad(|v| v.iter().map(|e| e * e).sum(), &x, 1e-6);
        let expect = arr1(&[2.0, -4.0, 1.0]).into_dyn();
        for (a, b) in g.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    #[should_panic(expected = "gradient mismatch")]
    fn detects_wrong_gradient() {
        let x = arr1(&[1.0, 2.0]).into_dyn();
        let wrong = arr1(&[2.0, 5.0]).into_dyn(); // true grad is [2, 4]
        check_grad(
            |v| v.iter().map(|e| e * e).sum(),
            &x,
            &wrong,
            1e-6,
            1e-4,
            1e-8,
            None,
        );
    }
}
