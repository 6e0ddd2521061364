use super::Tensor;
use crate::error::{RammError, Result};

/// Central-difference gradient of a scalar function at `x`, coordinate by
/// coordinate, in 64-bit.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(RammError::Config(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(RammError::NonFinite(format!(
                "finite difference at coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let g = finite_difference_gradient(|t| Ok(t.sum()), &x, 1e-4).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn half_square_norm_gives_x() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let g = finite_difference_gradient(
            |t| Ok(0.5 * t.data().iter().map(|v| v * v).sum::<f64>()),
            &x,
            1e-4,
        )
        .unwrap();
        assert!(relative_error(&g, &x) < 1e-9);
    }

    #[test]
    fn non_finite_is_an_error() {
        let x = Tensor::vector(vec![0.0]);
        let r = finite_difference_gradient(|t| Ok(1.0 / (t.data()[0] + 1e-3)), &x, 1e-3);
        assert!(matches!(r, Err(RammError::NonFinite(_))));
        assert!(finite_difference_gradient(|t| Ok(t.sum()), &x, 0.0).is_err());
    }
}
