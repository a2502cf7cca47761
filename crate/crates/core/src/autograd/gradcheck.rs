//! Central-difference gradient checking.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many coordinates per tensor (sampled by `seed`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub passed: bool,
    pub step_size: f64,
    pub coords_checked: usize,
    pub diagnostic: Option<String>,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<36} {} max_rel_error={:.3e} step={:e} coords={}",
            self.op_name,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.step_size,
            self.coords_checked
        )?;
        if let Some(d) = &self.diagnostic {
            write!(f, " ({d})")?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Builds `f` on a fresh graph with every tensor as a differentiable leaf,
/// backpropagates, and compares against central differences.
pub fn grad_check<F>(op_name: &str, params: &[Tensor], opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(params, &f)?;
    check_gradients(op_name, params, &analytic, opts, |ts| eval_scalar(ts, &f))
}

pub fn analytic_gradients<F>(params: &[Tensor], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|t| g.leaf(&t.clone().with_grad()))
        .collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(v, t)| grads.get(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect())
}

fn eval_scalar<F>(params: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    Ok(g.value(out)[0])
}

/// Compares supplied analytic gradients against central differences of
/// `eval`, perturbing one coordinate at a time.
pub fn check_gradients(
    op_name: &str,
    params: &[Tensor],
    analytic: &[Vec<f64>],
    opts: GradCheckOptions,
    mut eval: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<GradCheckReport> {
    if analytic.len() != params.len() {
        return Err(Error::dim("grad_check", &[params.len()], &[analytic.len()]));
    }
    let mut work = params.to_vec();
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut diagnostic = None;
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.len() != params[pi].len() {
            return Err(Error::dim("grad_check", params[pi].shape(), &[grad.len()]));
        }
        for j in coordinates(params[pi].len(), opts, pi) {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + opts.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - opts.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            checked += 1;
            if !numeric.is_finite() || !grad[j].is_finite() {
                diagnostic = Some(format!(
                    "non-finite gradient at tensor {pi} coord {j}: analytic={} numeric={numeric}",
                    grad[j]
                ));
                max_rel = f64::INFINITY;
                continue;
            }
            let rel = relative_error(grad[j], numeric);
            if rel > max_rel {
                max_rel = rel;
                if rel > opts.tol {
                    diagnostic = Some(format!(
                        "worst at tensor {pi} coord {j}: analytic={:.6e} numeric={numeric:.6e}",
                        grad[j]
                    ));
                }
            }
        }
    }
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error: max_rel,
        passed: max_rel <= opts.tol,
        step_size: opts.step,
        coords_checked: checked,
        diagnostic,
    })
}

fn coordinates(len: usize, opts: GradCheckOptions, tensor_index: usize) -> Vec<usize> {
    match opts.max_coords {
        Some(k) if k < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (tensor_index as u64).wrapping_mul(0x9e37_79b9));
            let mut idx = rand::seq::index::sample(&mut rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}
