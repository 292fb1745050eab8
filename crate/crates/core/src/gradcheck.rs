//! Finite-difference validation of reverse-mode gradients (64-bit).

use crate::autograd::{Tape, Var};
use crate::error::{CaimError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates probed per input tensor (spread evenly); `usize::MAX` probes all.
    pub max_coords: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, max_coords: 48 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-2·g_max, 1e-10)` over
    /// probed coordinates, `g_max` being the largest probed gradient magnitude of any input.
    /// Inputs the objective ignores (e.g. a bias cancelled by normalisation) thus compare
    /// their rounding noise to the objective's gradient scale, not to itself.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
}

/// Fixed projection turning a tensor output into a scalar objective.
fn projection(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 + ((i as f64 + 1.0) * 0.7548776662).fract()).collect()
}

fn scalar_objective<Op>(tape: &mut Tape<f64>, vars: &[Var], op: &Op) -> Result<Var>
where
    Op: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let out = op(tape, vars)?;
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(Tensor::from_vec(&shape, projection(shape.iter().product()))?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn evaluate<Op>(inputs: &[Tensor<f64>], op: &Op) -> Result<f64>
where
    Op: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = scalar_objective(&mut tape, &vars, op)?;
    Ok(tape.value(out).item())
}

/// Compares the tape gradient of `op` (reduced to a scalar by a fixed projection when it
/// returns a tensor) against central differences at `inputs`.
pub fn grad_check<Op>(inputs: &[Tensor<f64>], op: Op, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    Op: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = scalar_objective(&mut tape, &vars, &op)?;
    let grads = tape.backward(out)?;
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, coords_checked: 0 };
    let mut probe = inputs.to_vec();
    let mut pairs = Vec::new();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = match grads.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(inputs[k].shape()),
        };
        if !analytic.all_finite() {
            return Err(CaimError::GradCheck(format!("non-finite analytic gradient for input {k}")));
        }
        let n = inputs[k].numel();
        let stride = if opts.max_coords >= n { 1 } else { n.div_ceil(opts.max_coords) };
        for i in (0..n).step_by(stride) {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + opts.step;
            let up = evaluate(&probe, &op)?;
            probe[k].data_mut()[i] = orig - opts.step;
            let down = evaluate(&probe, &op)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            if !numeric.is_finite() {
                return Err(CaimError::GradCheck(format!("non-finite numeric gradient for input {k}[{i}]")));
            }
            pairs.push((analytic.data()[i], numeric));
        }
    }
    let g_max = pairs.iter().map(|&(a, b): &(f64, f64)| a.abs().max(b.abs())).fold(0.0, f64::max);
    for (a, b) in pairs {
        let abs = (a - b).abs();
        let rel = abs / a.abs().max(b.abs()).max(1e-2 * g_max).max(1e-10);
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.coords_checked += 1;
    }
    Ok(report)
}
