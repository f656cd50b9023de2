//! Group lasso over offset tensors and the post-training clipping step.

use std::collections::BTreeSet;

use super::offsets::{OffsetEntry, OffsetSet, SparseRows};
use crate::error::{Error, Result};
use crate::model::{OUTPUT_PROJECTION, SRC_EMBEDDING, TGT_EMBEDDING};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupLassoConfig {
    /// Penalty weight λ.
    pub lambda: f64,
    /// Tensors whose mean absolute offset is below this are dropped at export.
    pub theta: f64,
    /// Lower bound on the norm in the subgradient denominator.
    pub norm_floor: f64,
    /// Tensors never clipped.
    pub clip_exempt: BTreeSet<String>,
}

impl Default for GroupLassoConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-6,
            theta: 1e-4,
            norm_floor: 1e-12,
            clip_exempt: [SRC_EMBEDDING, TGT_EMBEDDING, OUTPUT_PROJECTION]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl GroupLassoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda)
            || !ok(self.theta)
            || !(self.norm_floor.is_finite() && self.norm_floor > 0.0)
        {
            return Err(Error::Config(format!(
                "lasso needs finite λ ≥ 0, θ ≥ 0, floor > 0 (got {}, {}, {})",
                self.lambda, self.theta, self.norm_floor
            )));
        }
        Ok(())
    }
}

/// `Σ_T sqrt(|T|)·‖ΔT‖₂` with `|T|` the full element count of each tensor.
pub fn group_lasso_penalty<F: Scalar>(offsets: &OffsetSet<F>) -> F {
    (0..offsets.len())
        .map(|id| F::of_usize(offsets.size_of(id)).sqrt() * offsets.entry(id).l2_norm())
        .sum()
}

/// Adds `λ·sqrt(|T|)·Δ/max(‖Δ‖, floor)` to `grad` for one tensor.
pub(crate) fn add_subgradient<F: Scalar>(
    grad: &mut [F],
    delta: &[F],
    size: usize,
    lambda: f64,
    floor: f64,
) {
    let norm = delta.iter().map(|&v| v * v).sum::<F>().sqrt();
    let coef = F::of(lambda) * F::of_usize(size).sqrt() / norm.max(F::of(floor));
    for (g, &d) in grad.iter_mut().zip(delta) {
        *g = *g + coef * d;
    }
}

/// Subgradient of `λ·penalty` with the same structure as `offsets`.
pub fn group_lasso_subgradient<F: Scalar>(
    offsets: &OffsetSet<F>,
    cfg: &GroupLassoConfig,
) -> Result<OffsetSet<F>> {
    cfg.validate()?;
    let mut out = offsets.clone();
    for id in 0..offsets.len() {
        let size = offsets.size_of(id);
        let entry = match offsets.entry(id) {
            OffsetEntry::Zero => OffsetEntry::Zero,
            OffsetEntry::Dense(t) => {
                let mut g = vec![F::zero(); t.len()];
                add_subgradient(&mut g, t.values(), size, cfg.lambda, cfg.norm_floor);
                OffsetEntry::Dense(Tensor::new(t.shape().to_vec(), g)?)
            }
            OffsetEntry::SparseRows(s) => {
                let mut g = vec![F::zero(); s.values().len()];
                add_subgradient(&mut g, s.values(), size, cfg.lambda, cfg.norm_floor);
                OffsetEntry::SparseRows(SparseRows::new(s.row_ids().to_vec(), s.width(), g)?)
            }
        };
        out.set(offsets.name(id), entry)?;
    }
    Ok(out)
}

/// Replaces offsets whose mean absolute value is below θ with Zero, except exempt tensors.
pub fn clip_offsets<F: Scalar>(
    offsets: &OffsetSet<F>,
    cfg: &GroupLassoConfig,
) -> Result<OffsetSet<F>> {
    cfg.validate()?;
    let mut out = offsets.clone();
    let theta = F::of(cfg.theta);
    for id in 0..offsets.len() {
        let name = offsets.name(id);
        let entry = offsets.entry(id);
        if entry.is_zero() || cfg.clip_exempt.contains(name) {
            continue;
        }
        if entry.mean_abs(offsets.size_of(id)) < theta {
            out.set(name, OffsetEntry::Zero)?;
        }
    }
    Ok(out)
}
