use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Central finite-difference gradient of a scalar function.
///
/// Evaluates `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate.
pub fn finite_diff_grad<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::Config(format!("finite-difference step {h} must be positive")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite function value around coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (fp - fm) / (h + h);
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, floor: T) -> Result<T> {
    let diff = a.sub(b)?.norm();
    Ok(diff / a.norm().max(b.norm()).max(floor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quadratic_at_three() {
        let x = Tensor::<f64>::vector(vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_and_linear() {
        let x = Tensor::vector(vec![0.5, -2.0, 7.0]).unwrap();
        let g = finite_diff_grad(|_| Ok(4.2f64), &x, 1e-4).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        let c = Tensor::vector(vec![1.5, -3.0, 0.25]).unwrap();
        let g = finite_diff_grad(|t| c.dot(t), &x, 1e-4).unwrap();
        assert!(g.max_abs_diff(&c).unwrap() < 1e-9);
    }

    #[test]
    fn rejects_bad_step_and_nan() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert!(matches!(finite_diff_grad(|_| Ok(0.0), &x, 0.0), Err(Error::Config(_))));
        assert!(matches!(
            finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-4),
            Err(Error::Evaluation(_))
        ));
    }

    proptest! {
        #[test]
        fn exact_on_quadratics(
            a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0,
            x0 in -10.0f64..10.0, x1 in -10.0f64..10.0,
        ) {
            // f(x) = a x0² + b x0 x1 + c x1
            let f = |t: &Tensor<f64>| {
                let d = t.data();
                Ok(a * d[0] * d[0] + b * d[0] * d[1] + c * d[1])
            };
            let x = Tensor::vector(vec![x0, x1]).unwrap();
            let g = finite_diff_grad(f, &x, DEFAULT_STEP).unwrap();
            prop_assert!((g.data()[0] - (2.0 * a * x0 + b * x1)).abs() < 1e-6);
            prop_assert!((g.data()[1] - (b * x0 + c)).abs() < 1e-6);
        }
    }
}
