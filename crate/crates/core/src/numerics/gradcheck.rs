//! Central finite-difference checks of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Floor of the relative-error denominator per unit of output magnitude.
/// Central differences resolve gradients only down to the round-off of the
/// whole computation divided by `h`, which for sums with cancellation is
/// well above `ulp(f) / h`. Coordinates below `REL_ERR_FLOOR * max(1, |f|)`
/// are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub coordinates: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar produced by `f` against central
/// differences with step `h`, perturbing every coordinate of every input.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let floor = REL_ERR_FLOOR * tape.value(out).item().abs().max(1.0);
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();

    let mut worst = 0.0f64;
    let mut coordinates = 0;
    let mut probe = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..probe[t].numel() {
            let orig = probe[t].data()[i];
            probe[t].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[t].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[i], numeric, floor));
            coordinates += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        coordinates,
    })
}
