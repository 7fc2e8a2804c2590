//! Central finite-difference verification of tape gradients.

use crate::error::{NumericsError, Result};
use crate::param::{Module, Parameter};
use crate::tape::{Tape, Var};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per parameter, in visit order.
    pub per_param: Vec<(String, f64)>,
    pub entries_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn with_entry<M: Module>(module: &mut M, param: usize, entry: usize, f: impl FnOnce(&mut f64)) {
    let mut idx = 0;
    let mut f = Some(f);
    module.visit_mut(&mut |p: &mut Parameter| {
        if idx == param {
            if let Some(f) = f.take() {
                f(&mut p.value.data_mut()[entry]);
            }
        }
        idx += 1;
    });
}

fn loss_value<M: Module>(module: &M, forward: &impl Fn(&mut Tape, &M) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = forward(&mut tape, module)?;
    tape.item(loss)
}

/// Compares tape gradients of `forward`'s scalar output against central
/// differences for every entry of every parameter in `module`.
///
/// `forward` must bind the module's parameters with [`Tape::param`]; it is
/// re-run twice per entry. Fails with the offending parameter names when
/// any relative error exceeds `tolerance`.
pub fn grad_check<M: Module>(
    module: &mut M,
    forward: impl Fn(&mut Tape, &M) -> Result<Var>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    module.zero_grads();
    let mut tape = Tape::new();
    let loss = forward(&mut tape, module)?;
    tape.grad_eval(loss, &mut [module])?;
    drop(tape);

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    module.visit(&mut |p| analytic.push((p.name().to_string(), p.grad().data().to_vec())));
    module.zero_grads();

    let mut per_param = Vec::with_capacity(analytic.len());
    let mut entries_checked = 0;
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (ei, &a) in grads.iter().enumerate() {
            let mut orig = 0.0;
            with_entry(module, pi, ei, |v| {
                orig = *v;
                *v = orig + FD_STEP;
            });
            let plus = loss_value(module, &forward)?;
            with_entry(module, pi, ei, |v| *v = orig - FD_STEP);
            let minus = loss_value(module, &forward)?;
            with_entry(module, pi, ei, |v| *v = orig);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(a, numeric));
            entries_checked += 1;
        }
        per_param.push((name.clone(), worst));
    }
    let max_rel_error = per_param.iter().map(|p| p.1).fold(0.0, f64::max);
    let offenders: Vec<String> = per_param
        .iter()
        .filter(|(_, e)| *e > tolerance)
        .map(|(n, _)| n.clone())
        .collect();
    if !offenders.is_empty() {
        return Err(NumericsError::GradCheck {
            max_rel_error,
            offenders,
        });
    }
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
        entries_checked,
    })
}
