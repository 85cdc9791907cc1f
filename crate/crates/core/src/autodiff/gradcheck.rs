//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so that components whose true gradient is zero are judged on absolute
/// error instead of amplifying finite-difference round-off.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the autodiff gradient of scalar `f` at `x` with central differences.
///
/// `f` receives a fresh graph and the variable holding `x`, and must return a
/// single-element node.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Numerical(format!("finite-difference step {eps} must be positive")));
    }
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let y = f(&mut g, xv)?;
    check_scalar(g.value(y), "f(x)")?;
    g.backward(y)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(t);
        let y = f(&mut g, v)?;
        check_scalar(g.value(y), "f(x ± eps)")?;
        Ok(g.value(y).data()[0])
    };

    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }

    summarize(analytic, numeric)
}

/// Like [`grad_check`], but differentiates with respect to every trainable
/// parameter of `store` that `f` binds. Components are concatenated in
/// parameter order.
pub fn grad_check_params<F>(store: &ParamStore, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Numerical(format!("finite-difference step {eps} must be positive")));
    }
    let (ids, analytic) = {
        let mut g = Graph::with_params(store);
        let y = f(&mut g)?;
        check_scalar(g.value(y), "f(θ)")?;
        g.backward(y)?;
        let grads = g.param_grads();
        let ids: Vec<_> = grads.iter().map(|(id, _)| *id).collect();
        let analytic: Vec<f64> = grads.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        (ids, analytic)
    };

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let y = f(&mut g)?;
        check_scalar(g.value(y), "f(θ ± eps)")?;
        Ok(g.value(y).data()[0])
    };

    let mut work = store.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for &id in &ids {
        for i in 0..work.value(id).numel() {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * eps));
        }
    }
    summarize(analytic, numeric)
}

fn summarize(analytic: Vec<f64>, numeric: Vec<f64>) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst_index: 0,
        analytic,
        numeric,
    };
    for (i, (&a, &n)) in report.analytic.iter().zip(&report.numeric).enumerate() {
        if !a.is_finite() || !n.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient at component {i}")));
        }
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(RELATIVE_ERROR_FLOOR);
        report.max_absolute_error = report.max_absolute_error.max(abs);
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}

fn check_scalar(t: &Tensor, what: &str) -> Result<()> {
    if t.numel() != 1 {
        return Err(Error::shape(format!("{what} must be scalar, got {:?}", t.shape())));
    }
    if !t.data()[0].is_finite() {
        return Err(Error::Numerical(format!("{what} is not finite")));
    }
    Ok(())
}

/// Projects any node onto a scalar with fixed pseudo-random weights, so that
/// vector-valued ops can be checked through [`grad_check`] with non-trivial
/// upstream gradients.
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let weights = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    let w = g.input(Tensor::new(shape, weights)?);
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}
