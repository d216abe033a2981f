//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the crate.

use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `x`:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
pub fn finite_difference_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *o = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), out).expect("finite differences of a finite function")
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)` with a small absolute floor so that
/// vanishing gradients compare as equal.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}
