use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Check `f` w.r.t. a single input. See [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x), h).map(|r| r.max_rel_error)
}

/// Compare the tape gradient of scalar `f` against `(f(x+h) - f(x-h)) / 2h`
/// for every element of every input.
///
/// Relative error uses the denominator `max(|a|, |n|, 1e-8)`.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor], record: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| if record { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let out = f(&mut g, &vars)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok((g, vars, out))
    };

    let (mut g, vars, out) = eval(xs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = xs.to_vec();
    for (ti, t) in xs.iter().enumerate() {
        for e in 0..t.len() {
            let orig = t.data()[e];
            work[ti].data_mut()[e] = orig + h;
            let (gp, _, op) = eval(&work, false)?;
            work[ti].data_mut()[e] = orig - h;
            let (gm, _, om) = eval(&work, false)?;
            work[ti].data_mut()[e] = orig;
            let numeric = (gp.scalar(op) - gm.scalar(om)) / (2.0 * h);
            let a = analytic[ti][e];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: rel,
                    worst: (ti, e),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
