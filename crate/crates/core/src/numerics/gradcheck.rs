use rayon::prelude::*;

use crate::error::{Error, Result};

/// A scalar function together with its analytic gradient.
pub trait Differentiable: Sync {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// Adapter pairing a value closure with a gradient closure.
pub struct Objective<V, G> {
    value: V,
    gradient: G,
}

impl<V, G> Objective<V, G>
where
    V: Fn(&[f64]) -> Result<f64> + Sync,
    G: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    pub fn new(value: V, gradient: G) -> Self {
        Objective { value, gradient }
    }
}

impl<V, G> Differentiable for Objective<V, G>
where
    V: Fn(&[f64]) -> Result<f64> + Sync,
    G: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    fn value(&self, x: &[f64]) -> Result<f64> {
        (self.value)(x)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        (self.gradient)(x)
    }
}

/// Compares the analytic gradient with central differences.
///
/// Returns `max_i |gₐ−g_fd| / max(1e-8, |gₐ|+|g_fd|)`.
pub fn grad_check(f: &impl Differentiable, x: &[f64], eps: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::argument(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let analytic = f.gradient(x)?;
    if analytic.len() != x.len() {
        return Err(Error::argument(format!(
            "gradient has {} entries for {} inputs",
            analytic.len(),
            x.len()
        )));
    }
    let errors: Vec<f64> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut probe = x.to_vec();
            probe[i] = x[i] + eps;
            let plus = f.value(&probe)?;
            probe[i] = x[i] - eps;
            let minus = f.value(&probe)?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::numeric(format!("non-finite function value probing coordinate {i}")));
            }
            let fd = (plus - minus) / (2.0 * eps);
            let ga = analytic[i];
            Ok((ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8))
        })
        .collect::<Result<_>>()?;
    Ok(errors.into_iter().fold(0.0, f64::max))
}
