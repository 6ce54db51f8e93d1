//! Central finite-difference check of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Location and size of the largest gradient discrepancy.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub param: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the analytic gradient of the scalar built by `f` against
/// `(f(x + eps) - f(x - eps)) / 2 eps` for every entry of every parameter.
///
/// The error for one entry is `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], with_grad: bool| -> Result<(f64, Option<Vec<Tensor>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.ensure_finite()?;
        let value = tape.value(out);
        if value.len() != 1 {
            return Err(Error::precondition("grad_check", "function must return a scalar"));
        }
        let y = value.data()[0];
        if !with_grad {
            return Ok((y, None));
        }
        let mut grads = tape.backward(out)?;
        let g = vars
            .iter()
            .zip(values)
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((y, Some(g)))
    };

    let (_, analytic) = eval(params, true)?;
    let analytic = analytic.expect("requested gradients");
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        param: 0,
        entry: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for e in 0..param.len() {
            let orig = param.data()[e];
            work[pi].data_mut()[e] = orig + eps;
            let (plus, _) = eval(&work, false)?;
            work[pi].data_mut()[e] = orig - eps;
            let (minus, _) = eval(&work, false)?;
            work[pi].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[e];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > worst.max_rel_error {
                worst = GradCheck {
                    max_rel_error: rel,
                    param: pi,
                    entry: e,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}
