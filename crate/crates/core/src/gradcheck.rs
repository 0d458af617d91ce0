//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Comparison for a single parameter entry.
#[derive(Clone, Debug)]
pub struct GradEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.rel_error <= self.tol)
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::no_grad();
    let vars: Vec<Var> = params.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Checks every entry of every tensor in `params`.
///
/// `f` builds a scalar from the supplied leaves. It must be a pure
/// function of the parameter values; it is evaluated twice up front and
/// rejected if the results differ.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let first = evaluate(&f, params)?;
    let second = evaluate(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut entries = Vec::new();
    let mut work = params.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = g
            .grad(*var)
            .unwrap_or_else(|| Tensor::zeros(params[p].shape()));
        for i in 0..params[p].len() {
            let base = params[p].data()[i];
            work[p].data_mut()[i] = base + h;
            let plus = evaluate(&f, &work)?;
            work[p].data_mut()[i] = base - h;
            let minus = evaluate(&f, &work)?;
            work[p].data_mut()[i] = base;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            entries.push(GradEntry {
                param: p,
                index: i,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }
    Ok(GradCheckReport { entries, tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn square_at_three() {
        let report = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[Tensor::scalar(3.0)],
            1e-5,
            1e-9,
        )
        .unwrap();
        let e = &report.entries[0];
        assert!((e.analytic - 6.0).abs() < 1e-15);
        assert!(e.rel_error < 1e-9, "{e:?}");
        assert!(report.passed());
    }

    #[test]
    fn detects_non_determinism() {
        let calls = Cell::new(0.0);
        let err = grad_check(
            |g, v| {
                calls.set(calls.get() + 1.0);
                let s = g.scale(v[0], calls.get());
                Ok(g.sum(s))
            },
            &[Tensor::scalar(1.0)],
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}
