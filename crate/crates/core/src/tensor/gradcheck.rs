use super::{Real, Tensor};

/// Magnitude below which gradient discrepancies are measured in absolute terms.
///
/// Sized for a double-precision forward pass with a step near 1e-6.
pub const GRAD_REL_FLOOR: f64 = 1e-6;

/// `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Central-difference estimate of `d f / d params[t][i]` for each `(t, i)` in `coords`.
///
/// The divisor is the perturbation actually representable in `T`, not the nominal `2h`.
pub fn finite_difference_grad<T, F>(params: &mut [Tensor<T>], coords: &[(usize, usize)], h: T, mut f: F) -> Vec<f64>
where
    T: Real,
    F: FnMut(&[Tensor<T>]) -> f64,
{
    assert!(h > T::zero(), "finite difference step must be positive");
    coords
        .iter()
        .map(|&(t, i)| {
            let orig = params[t].data()[i];
            let (up, down) = (orig + h, orig - h);
            params[t].data_mut()[i] = up;
            let f_up = f(params);
            params[t].data_mut()[i] = down;
            let f_down = f(params);
            params[t].data_mut()[i] = orig;
            (f_up - f_down) / (up.f64() - down.f64())
        })
        .collect()
}

/// Outcome of comparing analytic and numeric gradients for one primitive or model.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn from_pairs(name: impl Into<String>, analytic: &[f64], numeric: &[f64], tolerance: f64) -> Self {
        assert_eq!(analytic.len(), numeric.len());
        let max_rel_error = analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max);
        Self {
            name: name.into(),
            checked: analytic.len(),
            max_rel_error,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance && self.max_rel_error.is_finite()
    }
}
