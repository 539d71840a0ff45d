//! Finite-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Gradients smaller than this are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error of every checked element, grouped by input.
    pub rel_errors: Vec<Vec<f64>>,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// `(input index, flat element index)` of the worst element.
    pub worst: (usize, usize),
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare the analytic gradient of a scalar-valued graph against central
/// differences with step `h` for every element of every input.
///
/// `build` records the computation on a fresh graph given one variable per
/// input and returns the scalar output. It is re-run for every perturbation,
/// so it must be deterministic.
pub fn grad_check<F>(build: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad_data(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut work = inputs.to_vec();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let (mut max, mut sum, mut count, mut worst) = (0.0f64, 0.0, 0usize, (0, 0));
    for (i, input) in inputs.iter().enumerate() {
        let mut errs = Vec::with_capacity(input.numel());
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i][e];
            let err = if a.is_finite() { relative_error(a, numeric) } else { f64::INFINITY };
            if err > max || (err.is_nan() && !max.is_nan()) {
                max = err;
                worst = (i, e);
            }
            sum += err;
            count += 1;
            errs.push(err);
        }
        rel_errors.push(errs);
    }
    Ok(GradCheckReport {
        rel_errors,
        max_rel_error: max,
        mean_rel_error: if count == 0 { 0.0 } else { sum / count as f64 },
        worst,
        tol,
    })
}
