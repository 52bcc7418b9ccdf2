//! Central-difference gradient checking against the tape's analytic
//! gradients.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compare analytic and central-difference gradients of a scalar readout.
///
/// `f` maps a tape and the input variable to a scalar loss variable. The
/// returned value is the maximum over coordinates of
/// `|analytic − finite_difference| / max(1, |analytic|)`.
///
/// Errors if any probed evaluation is non-finite.
pub fn grad_check<T, F>(mut f: F, x: &Tensor<T>, step: T) -> Result<f64>
where
    T: Real,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    use crate::runner::Runner;

    let eval_at = |f: &mut F, probe: &Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let vx = tape.param(probe.clone());
        let loss = f(&mut tape, vx)?;
        let value = tape.value(loss);
        if value.numel() != 1 {
            return Err(Error::Shape {
                op: "grad_check",
                detail: format!("readout must be scalar, got {:?}", value.shape()),
            });
        }
        let v = value.item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v.to_f64().unwrap())
    };

    // analytic gradient
    let mut tape = Tape::new();
    let vx = tape.param(x.clone());
    let loss = f(&mut tape, vx)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Shape {
            op: "grad_check",
            detail: format!("readout must be scalar, got {:?}", tape.value(loss).shape()),
        });
    }
    if !tape.value(loss).item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(loss)?;
    let analytic = grads.get_or_zeros(vx, x.shape());

    let h = step.to_f64().unwrap();
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval_at(&mut f, &plus)? - eval_at(&mut f, &minus)?) / (2.0 * h);
        let ga = analytic.data()[i].to_f64().unwrap();
        let rel = (ga - fd).abs() / ga.abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
