//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Denominator floor: errors are relative to `max(|analytic|, |numeric|, abs_floor)`.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen elements (all when `None`).
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElementCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub elements: Vec<ElementCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn from_elements(elements: Vec<ElementCheck>, tol: f64) -> Self {
        let max_rel_error = elements.iter().fold(0.0_f64, |m, e| m.max(e.rel_error));
        Self {
            passed: max_rel_error <= tol,
            elements,
            max_rel_error,
            tol,
        }
    }

    pub fn merge(reports: impl IntoIterator<Item = GradCheckReport>, tol: f64) -> Self {
        let elements = reports.into_iter().flat_map(|r| r.elements).collect();
        Self::from_elements(elements, tol)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(abs_floor)
}

fn pick_indices(n: usize, opts: &FdOptions) -> Vec<usize> {
    match opts.max_elements {
        Some(m) if m < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

fn eval_scalar<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.constant(point.clone());
    let out = f(&mut g, v)?;
    let t = g.value(out);
    if !t.is_scalar() {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Compares the analytic gradient of `f` at `point` against central differences
/// `(f(θ+eps) - f(θ-eps)) / (2 eps)` element by element.
pub fn finite_difference_check<F>(f: F, point: &Tensor, opts: &FdOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(point.clone());
    let loss = f(&mut g, v)?;
    let analytic = g.backward(loss)?.wrt(v);

    let first = eval_scalar(&f, point)?;
    let second = eval_scalar(&f, point)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut elements = Vec::new();
    for index in pick_indices(point.numel(), opts) {
        let mut plus = point.clone();
        plus.data_mut()[index] += opts.eps;
        let mut minus = point.clone();
        minus.data_mut()[index] -= opts.eps;
        let numeric = (eval_scalar(&f, &plus)? - eval_scalar(&f, &minus)?) / (2.0 * opts.eps);
        let a = analytic.data()[index];
        elements.push(ElementCheck {
            index,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric, opts.abs_floor),
        });
    }
    Ok(GradCheckReport::from_elements(elements, opts.tol))
}

/// Finite-difference check of a loss over named parameters in a store.
///
/// `build` must bind parameters through [`Graph::param`]. Each `(name, index)`
/// in `samples` is perturbed in turn.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    build: F,
    samples: &[(String, usize)],
    opts: &FdOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = build(&mut g, s)?;
        Ok(g.value(out).item())
    };
    let first = eval(store)?;
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut work = store.clone();
    let mut elements = Vec::new();
    for (k, (name, index)) in samples.iter().enumerate() {
        let base = work
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?
            .data()[*index];
        work.get_mut(name).unwrap().data_mut()[*index] = base + opts.eps;
        let fp = eval(&work)?;
        work.get_mut(name).unwrap().data_mut()[*index] = base - opts.eps;
        let fm = eval(&work)?;
        work.get_mut(name).unwrap().data_mut()[*index] = base;
        let numeric = (fp - fm) / (2.0 * opts.eps);
        let analytic = grads
            .param(name)
            .map(|t| t.data()[*index])
            .unwrap_or(0.0);
        elements.push(ElementCheck {
            index: k,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric, opts.abs_floor),
        });
    }
    Ok(GradCheckReport::from_elements(elements, opts.tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let rep = finite_difference_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &Tensor::scalar(3.0),
            &FdOptions::default(),
        )
        .unwrap();
        assert!(rep.passed);
        assert!((rep.elements[0].analytic - 6.0).abs() < 1e-12);
        assert!((rep.elements[0].numeric - 6.0).abs() < 1e-6);
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let counter = Cell::new(0.0);
        let err = finite_difference_check(
            |g, x| {
                counter.set(counter.get() + 1.0);
                let y = g.add_scalar(x, counter.get())?;
                g.sum(y)
            },
            &Tensor::scalar(1.0),
            &FdOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn wrong_backward_fails() {
        let rep = finite_difference_check(
            |g, x| {
                let v = g.value(x).map(|a| a * a);
                let y = g.custom("bad_square", &[x], v, Box::new(|gr, i, _| Ok(vec![gr.zip_map(i[0], "bad", |g, a| g * a)?])))?;
                g.sum(y)
            },
            &Tensor::from_slice(&[1.0, 2.0]),
            &FdOptions::default(),
        )
        .unwrap();
        assert!(!rep.passed);
    }
}
