use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `param ← param − lr·grad`, then clears the gradient.
pub fn sgd_step<F: Scalar>(param: &mut Tensor<F>, lr: F) -> Result<()> {
    let grad = param
        .take_grad()
        .ok_or_else(|| Error::State("sgd_step on a tensor without a gradient".into()))?;
    for (w, g) in param.values_mut().iter_mut().zip(grad) {
        *w = *w - lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
}

impl<F: Scalar> Default for AdamConfig<F> {
    fn default() -> Self {
        Self {
            lr: F::of(1e-3),
            beta1: F::of(0.9),
            beta2: F::of(0.999),
            eps: F::of(1e-8),
        }
    }
}

/// First and second moment estimates for one tensor.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    m: Vec<F>,
    v: Vec<F>,
    step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn for_tensor(param: &Tensor<F>) -> Self {
        Self::zeros(param.len())
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![F::zero(); len],
            v: vec![F::zero(); len],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam update; consumes the gradient held by `param`.
pub fn adam_step<F: Scalar>(
    param: &mut Tensor<F>,
    state: &mut AdamState<F>,
    cfg: &AdamConfig<F>,
) -> Result<()> {
    if state.m.len() != param.len() {
        return Err(Error::dim(format!(
            "adam moments of length {} for tensor of {} values",
            state.m.len(),
            param.len()
        )));
    }
    let grad = param
        .take_grad()
        .ok_or_else(|| Error::State("adam_step on a tensor without a gradient".into()))?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = F::one() - cfg.beta1.powi(t);
    let c2 = F::one() - cfg.beta2.powi(t);
    for (i, (w, g)) in param.values_mut().iter_mut().zip(grad).enumerate() {
        let m = cfg.beta1 * state.m[i] + (F::one() - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (F::one() - cfg.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m / c1;
        let v_hat = v / c2;
        *w = *w - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_with_grad(w: f64, g: f64) -> Tensor<f64> {
        let mut t = Tensor::scalar(w);
        t.set_grad(vec![g]).unwrap();
        t
    }

    #[test]
    fn sgd_examples() {
        let mut t = scalar_with_grad(1.0, 0.5);
        sgd_step(&mut t, 0.1).unwrap();
        assert_relative_eq!(t.values()[0], 0.95, epsilon = 1e-15);
        assert!(t.grad().is_none());

        let mut t = scalar_with_grad(1.0, 0.5);
        sgd_step(&mut t, 0.0).unwrap();
        assert_eq!(t.values()[0], 1.0);

        let mut t = scalar_with_grad(1.0, 0.0);
        sgd_step(&mut t, 0.1).unwrap();
        assert_eq!(t.values()[0], 1.0);

        let mut t = Tensor::scalar(1.0f64);
        assert!(matches!(sgd_step(&mut t, 0.1), Err(Error::State(_))));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = AdamConfig::default();
        let mut t = scalar_with_grad(1.0, 1.0);
        let mut s = AdamState::for_tensor(&t);
        adam_step(&mut t, &mut s, &cfg).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        assert_relative_eq!(t.values()[0], 1.0 - 1e-3 / (1.0 + 1e-8), epsilon = 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let cfg = AdamConfig::default();
        let mut t = scalar_with_grad(0.7, 0.0);
        let mut s = AdamState::for_tensor(&t);
        adam_step(&mut t, &mut s, &cfg).unwrap();
        assert_eq!(t.values()[0], 0.7);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let cfg = AdamConfig::default();
        let mut t = scalar_with_grad(0.0, 2.0);
        let mut s = AdamState::for_tensor(&t);
        adam_step(&mut t, &mut s, &cfg).unwrap();
        let after_one = t.values()[0];
        t.set_grad(vec![2.0]).unwrap();
        adam_step(&mut t, &mut s, &cfg).unwrap();
        assert!(after_one < 0.0);
        assert!(t.values()[0] < after_one);
    }

    #[test]
    fn adam_rejects_mismatched_state() {
        let cfg = AdamConfig::default();
        let mut t = scalar_with_grad(0.0, 1.0);
        let mut s = AdamState::zeros(3);
        assert!(matches!(
            adam_step(&mut t, &mut s, &cfg),
            Err(Error::Dimension(_))
        ));
    }
}
