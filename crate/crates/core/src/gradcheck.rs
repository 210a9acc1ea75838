//! Central finite-difference validation of tape gradients.

use crate::array::Array;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Below this magnitude a coordinate's error is measured absolutely rather
/// than relative to the gradient size.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
    /// False when two evaluations at the same point disagreed; the
    /// comparison is then meaningless and the check fails.
    pub deterministic: bool,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.deterministic && self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares analytic gradients of `loss_fn` at `params` with central
/// differences of width `2 * step`.
///
/// `loss_fn` receives a fresh tape and one differentiable leaf per block, and
/// must return a scalar.
pub fn finite_diff_check<S, F>(
    loss_fn: F,
    params: &[(String, Array<S>)],
    step: S,
    tolerance: S,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: for<'t> Fn(&'t Tape<S>, &[Var<'t, S>]) -> Result<Var<'t, S>>,
{
    if step <= S::zero() {
        return Err(Error::Invalid("finite difference step must be positive".into()));
    }
    if let Some((name, _)) = params.iter().find(|(_, a)| !a.is_finite()) {
        return Err(Error::NonFinite(name.clone()));
    }

    let values: Vec<Array<S>> = params.iter().map(|(_, a)| a.clone()).collect();
    let evaluate = |vals: &[Array<S>]| -> Result<S> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_, S>> = vals.iter().map(|a| tape.param(a.clone())).collect();
        let out = loss_fn(&tape, &leaves)?;
        Ok(out.item())
    };

    let analytic: Vec<Array<S>> = {
        let tape = Tape::new();
        let leaves: Vec<Var<'_, S>> = values.iter().map(|a| tape.param(a.clone())).collect();
        let out = loss_fn(&tape, &leaves)?;
        let grads = tape.backward(out)?;
        leaves.iter().map(|&v| grads.wrt(v)).collect()
    };

    let first = evaluate(&values)?;
    let second = evaluate(&values)?;
    let deterministic = first.as_f64().to_bits() == second.as_f64().to_bits();

    let two_h = step + step;
    let mut blocks = Vec::with_capacity(params.len());
    let mut probe = values.clone();
    for (b, (name, block)) in params.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..block.len() {
            let orig = block.data()[i];
            probe[b].data_mut()[i] = orig + step;
            let up = evaluate(&probe)?;
            probe[b].data_mut()[i] = orig - step;
            let down = evaluate(&probe)?;
            probe[b].data_mut()[i] = orig;

            let numeric = ((up - down) / two_h).as_f64();
            let exact = analytic[b].data()[i].as_f64();
            let denom = numeric.abs().max(exact.abs()).max(RELATIVE_FLOOR);
            worst = worst.max((numeric - exact).abs() / denom);
        }
        blocks.push(BlockReport {
            name: name.clone(),
            max_rel_error: worst,
            passed: worst <= tolerance.as_f64(),
        });
    }

    Ok(GradCheckReport {
        blocks,
        tolerance: tolerance.as_f64(),
        deterministic,
    })
}
