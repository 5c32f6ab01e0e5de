use super::{Graph, Result, Tensor, TensorError, Var};

/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (parameter index, element index) of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares reverse-mode gradients of a scalar program against central
/// differences with step `step`.
///
/// `f` receives a fresh graph and one differentiable leaf per parameter
/// and must return a scalar. A non-finite intermediate aborts the check
/// with the offending op.
pub fn grad_check<F>(params: &mut [Tensor], step: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut eval = |params: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        if let Some(err) = g.first_non_finite() {
            return Err(err);
        }
        if g.value(out).numel() != 1 {
            return Err(TensorError::Contract(
                "grad_check needs a scalar program".into(),
            ));
        }
        let value = g.value(out).item();
        let grads = if want_grad {
            g.backward(out)?;
            vars.iter()
                .map(|&v| {
                    g.grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(g.shape(v)))
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(params, true)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for p in 0..params.len() {
        for e in 0..params[p].numel() {
            let orig = params[p].data()[e];
            params[p].data_mut()[e] = orig + step;
            let plus = eval(params, false);
            params[p].data_mut()[e] = orig - step;
            let minus = eval(params, false);
            params[p].data_mut()[e] = orig;
            let numeric = (plus?.0 - minus?.0) / (2.0 * step);
            let err = relative_error(analytic[p].data()[e], numeric);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (p, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
