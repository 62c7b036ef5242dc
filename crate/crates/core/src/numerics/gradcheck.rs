//! Central finite-difference oracle for analytic gradients.

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Absolute floor on the relative-error denominator, so entries whose true
/// gradient is zero are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat position of the worst entry.
    pub worst_entry: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Parameter(format!("finite-difference step {h:e} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

fn eval_finite(f: &mut impl FnMut(&[Tensor]) -> Result<f64>, params: &[Tensor]) -> Result<f64> {
    let v = f(params)?;
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("objective returned non-finite value {v}")));
    }
    Ok(v)
}

/// Compares supplied analytic gradients against central differences of `f`.
pub fn compare_gradients(
    params: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    tol: f64,
    mut f: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<GradCheckReport> {
    check_step(h)?;
    if params.len() != analytic.len() {
        return Err(Error::dim(format!(
            "{} params but {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    eval_finite(&mut f, params)?;
    let mut work = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(Error::dim(format!(
                "gradient {pi} has shape {:?}, param has {:?}",
                grad.shape(),
                params[pi].shape()
            )));
        }
        let mut check = ParamCheck {
            index: pi,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_entry: 0,
        };
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let plus = eval_finite(&mut f, &work)?;
            work[pi].data_mut()[e] = orig - h;
            let minus = eval_finite(&mut f, &work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            check.max_abs_error = check.max_abs_error.max(abs);
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_entry = e;
            }
        }
        checks.push(check);
    }
    let passed = checks.iter().all(|c| c.max_rel_error <= tol);
    Ok(GradCheckReport {
        params: checks,
        tol,
        passed,
    })
}

/// Builds `build` on a fresh tape with `params` as gradient leaves, runs the
/// reverse pass, and checks the result against central differences.
pub fn finite_diff_check(
    params: &[Tensor],
    h: f64,
    tol: f64,
    build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
) -> Result<GradCheckReport> {
    check_step(h)?;
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| grads.get(id).cloned().expect("param leaf has a gradient"))
        .collect();
    compare_gradients(params, &analytic, h, tol, |ps| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.scalar(loss))
    })
}
