//! Finite-difference verification of tape gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index into `x` where the worst error occurred.
    pub worst_index: usize,
    pub checked: Vec<usize>,
    pub analytic: Vec<f64>,
    /// Finite-difference estimates; NaN at `kinked` coordinates.
    pub numeric: Vec<f64>,
    /// Coordinates where only one side of the ±eps interval stays on the
    /// base point's linear piece; a one-sided difference was used instead.
    pub one_sided: Vec<usize>,
    /// Coordinates where both sides cross a ReLU or max-pool branch point.
    /// Finite differences are not an oracle there, so these are excluded
    /// from `max_rel_error`.
    pub kinked: Vec<usize>,
}

fn evaluate<F>(f: &F, x: &Tensor) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.constant(x);
    let out = f(&mut g, v)?;
    Ok((g.value(out).item()? as f64, g.branch_signature()))
}

/// Compares tape gradients of scalar `f` at `x` against central differences
/// on every coordinate of `x`. The reported error is
/// `max_i |a_i - n_i| / max_i max(|a_i|, |n_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, eps, &coords)
}

/// As [`grad_check`], restricted to the listed flat coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor, eps: f32, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("grad_check eps must be positive".into()));
    }
    if let Some(&bad) = coords.iter().find(|&&i| i >= x.numel()) {
        return Err(Error::InvalidArgument(format!("coordinate {bad} out of range")));
    }
    let mut g = Graph::new();
    let v = g.param(x);
    let y = f(&mut g, v)?;
    g.backward(y)?;
    let grad = g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);

    let (base, base_sig) = evaluate(&f, x)?;
    let (again, again_sig) = evaluate(&f, x)?;
    if again.to_bits() != base.to_bits() || again_sig != base_sig {
        return Err(Error::NonDeterministic);
    }

    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut kinked = Vec::new();
    let mut one_sided = Vec::new();
    let mut skip = Vec::with_capacity(coords.len());
    let mut probe = x.detached();
    for &i in coords {
        let orig = x.data()[i];
        let plus = orig + eps;
        let minus = orig - eps;
        probe.data_mut()[i] = plus;
        let (fp, sp) = evaluate(&f, &probe)?;
        probe.data_mut()[i] = minus;
        let (fm, sm) = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        // the representable steps, not the nominal ones
        let estimate = match (sp == base_sig, sm == base_sig) {
            (true, true) => Some((fp - fm) / (plus as f64 - minus as f64)),
            (true, false) => Some((fp - base) / (plus as f64 - orig as f64)),
            (false, true) => Some((base - fm) / (orig as f64 - minus as f64)),
            (false, false) => None,
        };
        if (sp == base_sig) != (sm == base_sig) {
            one_sided.push(i);
        }
        match estimate {
            Some(d) => {
                numeric.push(d);
                skip.push(false);
            }
            None => {
                numeric.push(f64::NAN);
                kinked.push(i);
                skip.push(true);
            }
        }
        analytic.push(grad[i] as f64);
    }

    // Each coordinate's error is relative to the gradient's max-norm, so
    // components that vanish up to f32 rounding cannot dominate the report.
    let scale = analytic
        .iter()
        .chain(numeric.iter().filter(|v| v.is_finite()))
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let mut max_rel_error = 0.0;
    let mut worst_index = coords.first().copied().unwrap_or(0);
    for (k, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        if skip[k] {
            continue;
        }
        let rel = (a - n).abs() / scale;
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = coords[k];
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        checked: coords.to_vec(),
        analytic,
        numeric,
        one_sided,
        kinked,
    })
}
