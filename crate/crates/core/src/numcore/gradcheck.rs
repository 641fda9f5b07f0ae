//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so that near-zero gradients are
/// compared in absolute terms instead of amplifying round-off.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Elements whose mismatch disappeared at the smaller step.
    pub kinks: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Elements worse than this are re-checked with a step [`RETRY_SHRINK`]
/// times smaller.
pub const RETRY_ABOVE: f64 = 1e-6;
pub const RETRY_SHRINK: f64 = 100.0;
/// A coarse-step error this large that the fine step removes is a kink.
pub const KINK_ABOVE: f64 = 1e-3;

/// Compare the analytic gradient of the scalar `f(inputs)` against central
/// differences with step [`FD_STEP`] for every element of every input.
///
/// A piecewise-smooth function can have a kink within one step of the point.
/// Such elements are re-evaluated with a smaller step; if that resolves the
/// mismatch they are counted in [`GradCheck::kinks`].
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vars)?.item())
    };

    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| v.grad().map(Tensor::into_data).unwrap_or_else(|| vec![0.0; v.numel()]))
        .collect();

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        kinks: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            let mut central = |h: f64| -> Result<f64> {
                work[i].data_mut()[j] = orig + h;
                let plus = eval(&work)?;
                work[i].data_mut()[j] = orig - h;
                let minus = eval(&work)?;
                work[i].data_mut()[j] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let mut numeric = central(FD_STEP)?;
            let mut err = rel_err(analytic[i][j], numeric);
            if err > RETRY_ABOVE {
                let fine = central(FD_STEP / RETRY_SHRINK)?;
                let fine_err = rel_err(analytic[i][j], fine);
                if fine_err < err {
                    if err > KINK_ABOVE && fine_err < KINK_ABOVE {
                        report.kinks += 1;
                    }
                    numeric = fine;
                    err = fine_err;
                }
            }
            report.checked += 1;
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = (i, j);
                report.analytic = analytic[i][j];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
