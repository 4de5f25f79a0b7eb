use super::{Tape, Tensor, Var};
use crate::error::{contract, Result};

/// Compares tape gradients of a scalar function against central finite
/// differences and returns the worst relative error over all coordinates.
///
/// `f` receives a fresh tape and one leaf per entry of `params`. The
/// relative error of a coordinate is `|analytic - numeric| / max(|analytic|,
/// |numeric|, 1e-6)`; the floor keeps coordinates with a vanishing gradient
/// from dividing by zero.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(contract(format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out)
            .item()
            .ok_or_else(|| contract("grad_check function is not scalar-valued"))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(contract(format!(
            "grad_check function returned shape {:?}, expected a scalar",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, (param, &var)) in params.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(var, param.numel());
        for (j, &a) in analytic.iter().enumerate() {
            let orig = param.data()[j];
            probe[pi].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[pi].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
