//! Finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest elementwise error, relative to max(|analytic|, |numeric|, 1).
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

const STEP: f64 = 1e-5;

/// Compare analytic gradients of a scalar-valued builder against central
/// finite differences over every element of every input.
///
/// The builder receives a fresh tape plus leaves for each input (gradients
/// enabled) and must return a scalar node.
pub fn grad_check<F>(build: F, inputs: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss))
    };

    // Analytic pass.
    let tracked: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = tracked.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    // Central differences.
    let mut max_rel_err: f64 = 0.0;
    for (ti, tensor) in inputs.iter().enumerate() {
        for ei in 0..tensor.numel() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            plus[ti].data_mut()[ei] += STEP;
            let mut minus: Vec<Tensor> = inputs.to_vec();
            minus[ti].data_mut()[ei] -= STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * STEP);
            let a = analytic[ti][ei];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            max_rel_err = max_rel_err.max((a - numeric).abs() / denom);
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        tolerance,
        pass: max_rel_err <= tolerance,
    })
}

/// Finite-difference check of a scalar loss against every model parameter.
///
/// The builder sees freshly registered parameter handles each evaluation, so
/// it can run full forward passes (and anything deterministic around them).
pub fn grad_check_model<F>(
    params: &crate::model::ModelParams,
    build: &F,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &crate::model::ModelVars) -> Result<Var>,
{
    let eval = |p: &crate::model::ModelParams| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss))
    };

    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .entry_vars()
        .iter()
        .zip(params.entries())
        .map(|(v, (_, t))| {
            tape.grad(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut work = params.clone();
    let mut max_rel_err: f64 = 0.0;
    let entry_count = params.entries().len();
    for ti in 0..entry_count {
        let len = params.entries()[ti].1.numel();
        for ei in 0..len {
            let original = work.entries()[ti].1.data()[ei];
            work.entries_mut()[ti].1.data_mut()[ei] = original + STEP;
            let plus = eval(&work)?;
            work.entries_mut()[ti].1.data_mut()[ei] = original - STEP;
            let minus = eval(&work)?;
            work.entries_mut()[ti].1.data_mut()[ei] = original;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[ti][ei];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            max_rel_err = max_rel_err.max((a - numeric).abs() / denom);
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        tolerance,
        pass: max_rel_err <= tolerance,
    })
}
