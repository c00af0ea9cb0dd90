//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Result of one check: worst relative error and where it occurred.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Checks the gradient of a scalar loss built by `build` on a fresh graph.
///
/// `build` receives the graph and one trainable node per entry of `params`
/// and returns the loss node. The relative error of a coordinate is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_diff_check<F>(build: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(
        |ps, want_grad| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().map(|p| g.param(p.detach())).collect();
            let loss = build(&mut g, &vars)?;
            let value = g.value(loss).item()?;
            if !want_grad {
                return Ok((value, None));
            }
            g.backward(loss)?;
            let grads = vars
                .iter()
                .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
                .collect();
            Ok((value, Some(grads)))
        },
        params,
        eps,
    )
}

/// Lower-level form: `eval(params, want_grad)` returns the loss and, when
/// asked, the analytic gradient of every parameter.
pub fn finite_diff_check_with<F>(eval: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor], bool) -> Result<(f64, Option<Vec<Vec<f64>>>)>,
{
    if !(eps > 0.0) {
        return Err(Error::Usage(format!("finite-difference step {eps} must be positive")));
    }
    let (base, analytic) = eval(params, true)?;
    let analytic = analytic
        .ok_or_else(|| Error::Verification("objective returned no gradient".into()))?;
    let (again, _) = eval(params, false)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Verification(format!(
            "objective is not deterministic: {base} vs {again}"
        )));
    }
    if analytic.len() != params.len()
        || analytic.iter().zip(params).any(|(g, p)| g.len() != p.numel())
    {
        return Err(Error::Verification("gradient shapes do not match parameters".into()));
    }

    let mut work: Vec<Tensor> = params.iter().map(Tensor::detach).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_index: 0,
        coordinates: 0,
    };
    for p in 0..work.len() {
        for i in 0..work[p].numel() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let (plus, _) = eval(&work, false)?;
            work[p].data_mut()[i] = orig - eps;
            let (minus, _) = eval(&work, false)?;
            work[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[p][i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst_param = p;
                report.worst_index = i;
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
