//! Central finite-difference verification of tape gradients.

use crate::autodiff::tape::{OpKind, Tape, Var};
use crate::autodiff::tensor::{Param, Tensor};
use crate::error::{Error, Result};

/// Step used by every check in this crate.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error floor: `|a - c| / max(|a|, |c|, FLOOR)`.
pub const REL_FLOOR: f64 = 1e-8;

/// Settings for a gradient check. `fault` is forwarded to the analytic
/// tape (see [`Tape::with_fault`]).
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub fault: Option<OpKind>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: DEFAULT_STEP,
            fault: None,
        }
    }
}

impl GradCheck {
    fn evaluate<F>(&self, f: &F, inputs: &[Tensor]) -> Result<f64>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    }

    /// Max relative error between the analytic gradient of `f` with respect
    /// to every component of every input and its central difference.
    pub fn max_rel_error<F>(&self, f: F, inputs: &[Tensor]) -> Result<f64>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "finite-difference step must be positive, got {}",
                self.step
            )));
        }
        let mut tape = match self.fault {
            Some(kind) => Tape::with_fault(kind),
            None => Tape::new(),
        };
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let base = tape.value(out).item()?;
        tape.backward(out)?;

        let probe = self.evaluate(&f, inputs)?;
        if probe.to_bits() != base.to_bits() {
            return Err(Error::Oracle(format!(
                "function is not deterministic: {base} vs {probe}"
            )));
        }

        let mut worst = 0.0f64;
        let mut shifted = inputs.to_vec();
        for (slot, var) in vars.iter().enumerate() {
            let analytic = tape
                .grad(*var)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; inputs[slot].len()]);
            for (i, &a) in analytic.iter().enumerate() {
                let x0 = inputs[slot].data()[i];
                shifted[slot].data_mut()[i] = x0 + self.step;
                let plus = self.evaluate(&f, &shifted)?;
                shifted[slot].data_mut()[i] = x0 - self.step;
                let minus = self.evaluate(&f, &shifted)?;
                shifted[slot].data_mut()[i] = x0;
                let central = (plus - minus) / (2.0 * self.step);
                let denom = a.abs().max(central.abs()).max(REL_FLOOR);
                let err = (a - central).abs() / denom;
                if !err.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient comparison at input {slot}[{i}]"
                    )));
                }
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }
}

impl GradCheck {
    /// Checks the gradient of `f` with respect to each of `params`, which
    /// `f` picks up through [`Tape::param`].
    pub fn check_params<F>(&self, f: F, params: &[&Param]) -> Result<f64>
    where
        F: Fn(&mut Tape) -> Result<Var>,
    {
        let names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
        let inputs: Vec<Tensor> = params.iter().map(|p| p.value.clone()).collect();
        self.max_rel_error(
            |tape, vars| {
                for (name, var) in names.iter().zip(vars) {
                    tape.bind_param(name, *var);
                }
                f(tape)
            },
            &inputs,
        )
    }
}

/// Single-input form of [`GradCheck::max_rel_error`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    GradCheck { step, fault: None }.max_rel_error(|t, v| f(t, v[0]), std::slice::from_ref(x))
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.5, 0.0, 7.0, -0.01]).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn zero_step_is_rejected() {
        let x = Tensor::scalar(1.0);
        let err = finite_diff_check(|t, v| Ok(t.sum(v)), &x, 0.0).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn nondeterministic_function_is_detected() {
        let calls = Cell::new(0u32);
        let x = Tensor::scalar(1.0);
        let err = finite_diff_check(
            |t, v| {
                calls.set(calls.get() + 1);
                let s = t.scale(v, calls.get() as f64);
                Ok(t.sum(s))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Oracle(_)));
    }

    #[test]
    fn injected_fault_is_caught() {
        let x = Tensor::from_vec(vec![0.4, -0.7, 1.1]);
        let check = GradCheck {
            fault: Some(OpKind::Gelu),
            ..GradCheck::default()
        };
        let err = check
            .max_rel_error(
                |t, v| {
                    let g = t.gelu(v[0]);
                    Ok(t.sum(g))
                },
                &[x],
            )
            .unwrap();
        assert!(err > 0.1, "fault not visible: {err}");
    }
}
