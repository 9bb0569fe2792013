use super::{Result, Tensor, TensorError};

/// Central finite differences of a scalar function, one coordinate at a time:
/// `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps)`.
///
/// The divisor uses the step actually representable in f32 around `xᵢ`, and
/// the difference is taken in f64. `f` may return f32 or f64; an f64 result
/// avoids rounding the objective itself to f32.
pub fn finite_difference_grad<F, R>(mut f: F, x: &Tensor, eps: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> R,
    R: Into<f64>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Contract(format!("eps must be > 0, got {eps}")));
    }
    let mut probe = x.clone();
    probe.zero_grad();
    let mut out = vec![0.0f32; x.len()];
    for i in 0..x.len() {
        let orig = x.data()[i];
        let (hi, lo) = (orig + eps, orig - eps);
        probe.data_mut()[i] = hi;
        let f_hi: f64 = f(&probe).into();
        probe.data_mut()[i] = lo;
        let f_lo: f64 = f(&probe).into();
        probe.data_mut()[i] = orig;
        out[i] = ((f_hi - f_lo) / (hi as f64 - lo as f64)) as f32;
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Norm-wise relative error `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both
/// vectors are zero.
pub fn relative_error(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch");
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let diff = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_rows(&[&[0.3, -1.2], &[4.0, 2.5]]);
        let g = finite_difference_grad(|t| t.data().iter().sum::<f32>(), &x, 1e-2).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_difference_grad(|t| t.item() * t.item(), &x, 1e-2).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-4, "{}", g.item());
    }

    #[test]
    fn rejects_non_positive_eps() {
        assert!(finite_difference_grad(|t| t.item(), &Tensor::scalar(1.0), 0.0).is_err());
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[1.1, 0.0]) - 0.1 / 1.1).abs() < 1e-6);
    }
}
