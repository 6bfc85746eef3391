use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::Param;
use crate::error::{Error, Result};

fn check_grads(params: &[&mut Param]) -> Result<()> {
    for p in params {
        match &p.grad {
            None => {
                return Err(Error::State(format!("parameter {} has no gradient", p.name)));
            }
            Some(g) if !g.iter().all(|v| v.is_finite()) => {
                return Err(Error::Numeric(format!("non-finite gradient for {}", p.name)));
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// `param <- param - alpha * grad`, then clears every gradient.
///
/// Fails without touching any parameter if one of them has no gradient.
pub fn sgd_step(params: &mut [&mut Param], alpha: f64) -> Result<()> {
    check_grads(params)?;
    for p in params.iter_mut() {
        let g = p.grad.take().expect("checked");
        for (w, gi) in p.value.data_mut().iter_mut().zip(&g) {
            *w -= alpha * gi;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with bias correction. Step counts are tracked per parameter, since
/// each task head only sees the updates of its own task.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param], alpha: f64) -> Result<()> {
        check_grads(params)?;
        let AdamConfig { beta1, beta2, eps } = self.config;
        for p in params.iter_mut() {
            let g = p.grad.take().expect("checked");
            let st = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                step: 0,
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            if st.m.len() != g.len() {
                return Err(Error::State(format!("optimizer state for {} has wrong length", p.name)));
            }
            st.step += 1;
            let bc1 = 1.0 - beta1.powi(st.step as i32);
            let bc2 = 1.0 - beta2.powi(st.step as i32);
            for (((w, gi), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= alpha * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut [&mut Param], alpha: f64) -> Result<()> {
        match self {
            Optimizer::Sgd => sgd_step(params, alpha),
            Optimizer::Adam(adam) => adam.step(params, alpha),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};

    fn scalar_param(v: f64) -> Param {
        Param::new("theta", Tensor::scalar(v))
    }

    #[test]
    fn sgd_applies_update_and_clears_grads() {
        let mut p = scalar_param(1.0);
        p.grad = Some(vec![2.0]);
        sgd_step(&mut [&mut p], 0.1).unwrap();
        assert!((p.value.data()[0] - 0.8).abs() < 1e-15);
        assert!(p.grad.is_none());
    }

    #[test]
    fn sgd_with_zero_rate_is_identity() {
        let mut p = scalar_param(1.25);
        p.grad = Some(vec![-3.0]);
        sgd_step(&mut [&mut p], 0.0).unwrap();
        assert_eq!(p.value.data()[0], 1.25);
    }

    #[test]
    fn sgd_missing_gradient_is_state_error() {
        let mut a = scalar_param(1.0);
        let mut b = Param::new("other", Tensor::scalar(2.0));
        a.grad = Some(vec![1.0]);
        let err = sgd_step(&mut [&mut a, &mut b], 0.1).unwrap_err();
        assert!(matches!(err, Error::State(_)));
        // nothing moved
        assert_eq!(a.value.data()[0], 1.0);
    }

    #[test]
    fn two_sgd_steps_on_square() {
        // loss = theta^2, theta0 = 1, alpha = 0.1: 1 -> 0.8 -> 0.64
        let mut p = scalar_param(1.0);
        let mut seen = Vec::new();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.param(&p);
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap();
            tape.accumulate_param_grads(&mut [&mut p]).unwrap();
            sgd_step(&mut [&mut p], 0.1).unwrap();
            seen.push(p.value.data()[0]);
        }
        assert!((seen[0] - 0.8).abs() < 1e-15);
        assert!((seen[1] - 0.64).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_alpha() {
        // bias-corrected first step is alpha * g / (|g| + eps) ~ alpha * sign(g)
        let mut p = scalar_param(0.5);
        p.grad = Some(vec![3.0]);
        let mut opt = Optimizer::Adam(Adam::new(AdamConfig::default()));
        opt.step(&mut [&mut p], 0.01).unwrap();
        assert!((p.value.data()[0] - 0.49).abs() < 1e-9);
    }
}
