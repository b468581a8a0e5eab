//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::tensor::{NumericError, NumericResult, Tensor};

/// Named parameter set, ordered by name.
pub type NamedTensors = BTreeMap<String, Tensor>;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("function returned a non-finite value at perturbed coordinate {param}[{coord}]")]
    NonFiniteEval { param: String, coord: usize },
    #[error("gradient check requires a scalar-valued function, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },
    #[error("eps must be positive, got {0}")]
    BadEps(f64),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat coordinate of the worst mismatch.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Compare tape gradients of a scalar function against central differences
/// `(f(x + eps e) - f(x - eps e)) / (2 eps)` for every coordinate of every
/// parameter. The relative error for one coordinate is
/// `|g_a - g_n| / max(1e-8, |g_a| + |g_n|)`.
pub fn grad_check<F>(
    f: F,
    params: &NamedTensors,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: for<'t> Fn(&'t Tape, &BTreeMap<String, Var<'t>>) -> NumericResult<Var<'t>>,
{
    if eps <= 0.0 {
        return Err(GradCheckError::BadEps(eps));
    }

    // Analytic pass.
    let tape = Tape::new();
    let vars: BTreeMap<String, Var<'_>> = params
        .iter()
        .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
        .collect();
    let out = f(&tape, &vars)?;
    if out.value().numel() != 1 {
        return Err(GradCheckError::NonScalar {
            shape: out.shape(),
        });
    }
    let grads = tape.backward(out)?;
    let analytic: BTreeMap<String, Tensor> = vars
        .iter()
        .map(|(name, var)| (name.clone(), grads.wrt(*var)))
        .collect();

    // Numeric pass: perturb one coordinate at a time in a scratch copy.
    let mut scratch = params.clone();
    let mut max_rel_err = 0.0;
    let mut worst = None;
    let mut coords_checked = 0;
    let names: Vec<String> = params.keys().cloned().collect();
    for name in &names {
        let n = params[name].numel();
        for coord in 0..n {
            let orig = params[name].data()[coord];
            let plus = eval_at(&f, &mut scratch, name, coord, orig + eps)?;
            let minus = eval_at(&f, &mut scratch, name, coord, orig - eps)?;
            scratch.get_mut(name).unwrap().data_mut()[coord] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(GradCheckError::NonFiniteEval {
                    param: name.clone(),
                    coord,
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let ga = analytic[name].data()[coord];
            let rel = (ga - numeric).abs() / (1e-8f64).max(ga.abs() + numeric.abs());
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((name.clone(), coord));
            }
            coords_checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        coords_checked,
        tol,
    })
}

fn eval_at<F>(
    f: &F,
    scratch: &mut NamedTensors,
    name: &str,
    coord: usize,
    value: f64,
) -> Result<f64, GradCheckError>
where
    F: for<'t> Fn(&'t Tape, &BTreeMap<String, Var<'t>>) -> NumericResult<Var<'t>>,
{
    scratch.get_mut(name).unwrap().data_mut()[coord] = value;
    let tape = Tape::new();
    let vars: BTreeMap<String, Var<'_>> = scratch
        .iter()
        .map(|(n, t)| (n.clone(), tape.leaf(t.clone())))
        .collect();
    let out = f(&tape, &vars).map_err(|e| match e {
        // Overflow at a perturbed point is a check failure, not a crash.
        NumericError::NonFinite { .. } => GradCheckError::NonFiniteEval {
            param: name.to_string(),
            coord,
        },
        other => GradCheckError::Numeric(other),
    })?;
    Ok(out.item()?)
}
