use super::ParameterSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Absolute floor in the relative-error denominator, so entries whose true
/// gradient is zero are judged by absolute agreement instead.
const TINY: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `value` at `point`.
///
/// Returns the max over all entries of
/// `|analytic − numeric| / (|analytic| + |numeric| + tiny)`.
pub fn finite_difference_check<F, V>(
    value: V,
    analytic: &ParameterSet<F>,
    point: &ParameterSet<F>,
    h: F,
) -> Result<GradCheckReport>
where
    F: Scalar,
    V: Fn(&ParameterSet<F>) -> Result<F>,
{
    if h.is_nan() || h <= F::zero() {
        return Err(Error::Numeric(format!(
            "finite-difference step {h} must be positive"
        )));
    }
    if !analytic.same_layout(point) {
        return Err(Error::dim(
            "analytic gradient layout differs from the point",
        ));
    }
    let mut probe = point.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for id in 0..point.len() {
        for k in 0..point.by_index(id).len() {
            let w = point.by_index(id).values()[k];
            probe.by_index_mut(id).values_mut()[k] = w + h;
            let up = value(&probe)?;
            probe.by_index_mut(id).values_mut()[k] = w - h;
            let down = value(&probe)?;
            probe.by_index_mut(id).values_mut()[k] = w;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite objective near {}[{k}]",
                    point.name(id)
                )));
            }
            let numeric = ((up - down) / (h + h)).as_f64();
            let exact = analytic.by_index(id).values()[k].as_f64();
            let err = (exact - numeric).abs() / (exact.abs() + numeric.abs() + TINY);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((point.name(id).to_string(), k));
            }
        }
    }
    Ok(report)
}
