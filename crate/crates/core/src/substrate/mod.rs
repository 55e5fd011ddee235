//! Differentiable tensor substrate: values, the op tape, and finite-difference checks.

mod graph;
mod tensor;

pub use graph::{Gradients, Graph, OpKind, Var};
pub use tensor::Tensor;

use crate::error::{contract_err, Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Element index where the maximum was attained.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Denominator floor of the relative error. Gradients that are exactly zero
/// (key biases under softmax, unused embedding rows) still show central
/// difference round-off near 1e-11, which must not count as disagreement.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `eval` around `x0`.
///
/// `eval` maps a full parameter vector to the scalar objective. Only the listed
/// `indices` are perturbed (all of them when `None`).
pub fn compare_central_differences(
    analytic: &[f64],
    x0: &[f64],
    h: f64,
    indices: Option<&[usize]>,
    mut eval: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(contract_err!("finite-difference step must be positive, got {h}"));
    }
    if analytic.len() != x0.len() {
        return Err(contract_err!(
            "analytic gradient has {} entries for {} inputs",
            analytic.len(),
            x0.len()
        ));
    }
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..x0.len()).collect();
            &all
        }
    };
    let mut x = x0.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &i in idx {
        let orig = x[i];
        x[i] = orig + h;
        let fp = eval(&x)?;
        x[i] = orig - h;
        let fm = eval(&x)?;
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!("objective not finite at element {i}")));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = rel_error(analytic[i], numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences with step `h`, all evaluated in 64-bit.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(contract_err!("finite-difference step must be positive, got {h}"));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let loss = f(&mut g, xv)?;
    let lv = g.value(loss).item()?;
    if !lv.is_finite() {
        return Err(Error::Numeric("objective not finite".into()));
    }
    let analytic = g.backward(loss)?.get(xv).into_data();
    let shape = x.shape().to_vec();
    let report = compare_central_differences(&analytic, x.data(), h, None, |p| {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(shape.clone(), p.to_vec())?);
        let loss = f(&mut g, xv)?;
        g.value(loss).item()
    })?;
    Ok(report.max_rel_error)
}
