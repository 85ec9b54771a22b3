use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing autodiff gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinate with the largest relative error.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Coordinates whose gradient magnitude exceeds [`ABS_FLOOR`]; these
    /// are held to the relative tolerance.
    pub judged: usize,
    /// Largest relative error among the judged coordinates.
    pub max_judged_rel_err: f64,
    pub pass: bool,
}

/// Gradients at or below this magnitude are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-7;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_difference<F>(mut f: F, x: &mut [f64], i: usize, h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x)?;
    x[i] = orig - h;
    let minus = f(x)?;
    x[i] = orig;
    Ok((plus - minus) / (2.0 * h))
}

/// Coordinate-wise comparison. A coordinate whose larger gradient magnitude
/// exceeds [`ABS_FLOOR`] must be within `tol` relative error; smaller ones
/// must agree within [`ABS_FLOOR`].
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], tol: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        checked: analytic.len(),
        judged: 0,
        max_judged_rel_err: 0.0,
        pass: true,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let abs = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let rel = if scale > 0.0 { abs / scale } else { 0.0 };
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some(i);
        }
        report.max_abs_err = report.max_abs_err.max(abs);
        if scale > ABS_FLOOR {
            report.judged += 1;
            report.max_judged_rel_err = report.max_judged_rel_err.max(rel);
            if rel > tol {
                report.pass = false;
            }
        } else if abs > ABS_FLOOR {
            report.pass = false;
        }
    }
    report
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    g.value(out).item()
}

/// Checks the tape gradient of the scalar function `f` at `x`.
///
/// `f` builds its computation on the supplied graph from the input handle.
/// It is evaluated twice at `x` first; differing results are reported as an
/// oracle error since the finite differences would be meaningless.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let first = eval_scalar(&f, x)?;
    let second = eval_scalar(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {first} vs {second}"
        )));
    }

    let mut g = Graph::new();
    let leaf = g.leaf(x.clone());
    let out = f(&mut g, leaf)?;
    g.backward(out)?;
    let analytic = g
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let shape = x.shape().to_vec();
    let mut coords = x.data().to_vec();
    let mut numeric = Vec::with_capacity(coords.len());
    for i in 0..coords.len() {
        let d = central_difference(
            |c| eval_scalar(&f, &Tensor::new(shape.clone(), c.to_vec())?),
            &mut coords,
            i,
            h,
        )?;
        numeric.push(d);
    }
    Ok(compare_gradients(&analytic, &numeric, tol))
}
