//! Finite-difference verification of the backward rules.

use crate::error::{KgtError, Result};
use crate::numerics::tensor::Tensor;
use crate::numerics::var::Var;

/// Compare the reverse-mode gradient of a scalar-valued `f` against central
/// differences at step `h`, returning the worst relative error
/// `|analytic - numeric| / max(1, |analytic|)` over all coordinates.
///
/// Runs in 64-bit; `h` should sit in `[1e-7, 1e-4]`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&Var<f64>) -> Result<Var<f64>>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(KgtError::Config(format!(
            "grad_check step h={h} outside [1e-7, 1e-4]"
        )));
    }

    let leaf = Var::param(x.clone());
    let y = f(&leaf)?;
    if y.value().numel() != 1 {
        return Err(KgtError::Dim {
            context: "grad_check",
            detail: format!("f must be scalar-valued, got {:?}", y.shape()),
        });
    }
    if !y.value().data()[0].is_finite() {
        return Err(KgtError::NonFinite {
            context: "grad_check evaluation",
        });
    }
    y.backward()?;
    let analytic = leaf
        .grad()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let v = f(&Var::constant(t.clone()))?;
        let s = v.value().data()[0];
        if !s.is_finite() {
            return Err(KgtError::NonFinite {
                context: "grad_check evaluation",
            });
        }
        Ok(s)
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1.0f64.max(a.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
