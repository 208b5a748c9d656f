//! Central finite-difference gradient checking.
//!
//! Used by the unit and acceptance suites to validate every differentiable
//! operation against an independent numeric oracle. The checker is written
//! against the public tape API only, so it stays independent of the
//! backward rules it verifies.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Relative tolerance between analytic and numeric gradients.
    pub rel_tol: f64,
    /// Absolute floor below which both gradients count as matching; keeps
    /// the relative test meaningful near zero.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

/// Checks analytic gradients of a scalar-valued graph against central
/// finite differences, for every element of every input.
///
/// `build` receives leaf node ids for `inputs` in order and must return a
/// scalar loss node. It is invoked repeatedly on fresh tapes and must be a
/// pure function of the input values.
pub fn check_gradients<F>(inputs: &[Tensor], build: F, cfg: &GradCheckConfig) -> Result<()>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    // analytic pass
    let mut tracked: Vec<Tensor> = inputs.to_vec();
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = tracked
        .iter_mut()
        .map(|t| {
            t.set_requires_grad(true);
            t.clear_grad();
            tape.leaf(t)
        })
        .collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    for t in tracked.iter_mut() {
        tape.sync_grad(t)?;
    }

    // numeric pass
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let mut owned: Vec<Tensor> = values.to_vec();
        let ids: Vec<NodeId> = owned
            .iter_mut()
            .map(|t| {
                t.set_requires_grad(false);
                tape.leaf(t)
            })
            .collect();
        let loss = build(&mut tape, &ids)?;
        tape.scalar(loss)
    };

    let mut probe: Vec<Tensor> = inputs.to_vec();
    for i in 0..probe.len() {
        let analytic = tracked[i]
            .grad
            .clone()
            .ok_or_else(|| Error::contract(format!("input {i} received no gradient")))?;
        for j in 0..probe[i].numel() {
            let original = probe[i].data()[j];
            probe[i].data_mut()[j] = original + cfg.step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = original - cfg.step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[j];
            let tol = cfg.rel_tol * a.abs().max(numeric.abs()) + cfg.abs_floor;
            if (a - numeric).abs() > tol {
                return Err(Error::numeric(format!(
                    "gradient mismatch at input {i} element {j}: analytic {a:.9e}, numeric {numeric:.9e}, tolerance {tol:.3e}"
                )));
            }
        }
    }
    Ok(())
}
