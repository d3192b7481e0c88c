use super::params::{GradientMap, ParamSet};
use crate::error::{Error, Result};

/// Compares analytic gradients against central differences for every scalar
/// parameter and returns the largest relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
///
/// `loss_fn` returns the loss value together with its analytic gradient.
pub fn finite_difference_check<F>(loss_fn: F, params: &ParamSet, epsilon: f64) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<(f64, GradientMap)>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::invalid(format!("epsilon must be in (0, 1e-2], got {epsilon}")));
    }
    let (first, analytic) = loss_fn(params)?;
    let (second, _) = loss_fn(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let mut probe = params.clone();
    max_relative_error(&analytic, params, |name, i| {
        let original = params.get(name).expect("layout checked").data()[i];
        probe.get_mut(name).unwrap().data_mut()[i] = original + epsilon;
        let (plus, _) = loss_fn(&probe)?;
        probe.get_mut(name).unwrap().data_mut()[i] = original - epsilon;
        let (minus, _) = loss_fn(&probe)?;
        probe.get_mut(name).unwrap().data_mut()[i] = original;
        Ok((plus - minus) / (2.0 * epsilon))
    })
}

/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Largest [`relative_error`] between `analytic` and a caller-supplied
/// numeric derivative for every scalar of `params`. `numeric(name, i)`
/// returns the derivative with respect to element `i` of tensor `name`.
pub fn max_relative_error<F>(analytic: &GradientMap, params: &ParamSet, mut numeric: F) -> Result<f64>
where
    F: FnMut(&str, usize) -> Result<f64>,
{
    analytic.check_matches(params)?;
    let mut worst: f64 = 0.0;
    for (name, t) in params.iter() {
        let grad = analytic.get(name).expect("layout checked");
        for i in 0..t.numel() {
            let n = numeric(name, i)?;
            worst = worst.max(relative_error(grad.data()[i], n));
        }
    }
    Ok(worst)
}
