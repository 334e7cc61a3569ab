//! Dense f64 tensors and a tape-based reverse-mode differentiation engine.
//!
//! Everything the trainer differentiates flows through [`Graph`]: each
//! primitive op is recorded during the forward pass and replayed in reverse
//! to accumulate adjoints. [`gradcheck`] provides the finite-difference
//! harness used to verify every adjoint rule.

mod graph;
pub mod gradcheck;

pub use graph::{Graph, Var};

/// Dense numeric array, row-major, rank 0..=2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(vec![], vec![value])
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on tensor of rank {}", self.shape.len());
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on tensor of rank {}", self.shape.len());
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Smoothed square-root-of-absolute-value: `(t^2 + eps)^(1/4)`.
///
/// At `eps = 0` this equals `|t|^(1/2)`; a positive `eps` removes the
/// infinite derivative at `t = 0`.
pub fn half_power(t: f64, eps: f64) -> f64 {
    debug_assert!(eps >= 0.0);
    (t * t + eps).powf(0.25)
}

/// Derivative of [`half_power`] with respect to `t`: `t / (2 (t^2+eps)^(3/4))`.
///
/// Defined as 0 at the `t = 0, eps = 0` singularity.
pub fn half_power_deriv(t: f64, eps: f64) -> f64 {
    let base = t * t + eps;
    if base == 0.0 {
        return 0.0;
    }
    t / (2.0 * base.powf(0.75))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn half_power_known_values() {
        assert_relative_eq!(half_power(4.0, 0.0), 2.0, max_relative = 1e-12);
        assert_relative_eq!(half_power(0.0, 1e-12), 1e-3, max_relative = 1e-12);
        assert_relative_eq!(half_power_deriv(1.0, 0.0), 0.5, max_relative = 1e-12);
        assert_eq!(half_power_deriv(0.0, 0.0), 0.0);
    }

    #[test]
    fn half_power_deriv_matches_central_differences() {
        let eps = 1e-12;
        let step = 1e-6;
        for i in 0..20 {
            let t = -2.0 + 0.21 * i as f64 + 0.013; // avoid the origin
            let numeric = (half_power(t + step, eps) - half_power(t - step, eps)) / (2.0 * step);
            assert_relative_eq!(half_power_deriv(t, eps), numeric, max_relative = 1e-5);
        }
    }

    proptest! {
        #[test]
        fn half_power_even_and_monotone(t in -50.0f64..50.0, s in 0.0f64..10.0) {
            let eps = 1e-12;
            prop_assert_eq!(half_power(t, eps), half_power(-t, eps));
            // monotone in |t|
            let bigger = t.abs() + s;
            prop_assert!(half_power(bigger, eps) >= half_power(t, eps));
        }

        #[test]
        fn half_power_deriv_bounded(t in -50.0f64..50.0) {
            let eps = 1e-8f64;
            let bound = 0.5 * eps.powf(-0.25);
            prop_assert!(half_power_deriv(t, eps).abs() <= bound);
        }
    }

    #[test]
    #[should_panic]
    fn shape_mismatch_panics() {
        let _ = Tensor::from_vec(vec![2, 3], vec![0.0; 5]);
    }
}
