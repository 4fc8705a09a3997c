//! Central finite differences, used as the oracle for every analytic gradient.

use super::params::ParameterSet;
use crate::error::{Error, Result};

/// Estimates `∂f/∂p` for every coordinate of every parameter with the
/// fourth-order central stencil
/// `(−f(p+2ε) + 8f(p+ε) − 8f(p−ε) + f(p−2ε)) / 12ε`.
///
/// `f` is evaluated twice at `params` first; unequal results are reported as an
/// error because the estimate would be meaningless.
pub fn finite_difference_gradient<F>(f: F, params: &ParameterSet, epsilon: f64) -> Result<ParameterSet>
where
    F: Fn(&ParameterSet) -> f64,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!(
            "finite-difference step {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let first = f(params);
    let second = f(params);
    if first.to_bits() != second.to_bits() {
        return Err(Error::Domain(format!(
            "function is not deterministic: {first} != {second}"
        )));
    }

    let mut work = params.clone();
    let mut out = params.zeros_like();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.expect(name).len();
        for i in 0..n {
            let orig = params.expect(name).data()[i];
            let mut at = |offset: f64| {
                work.get_mut(name).unwrap().data_mut()[i] = orig + offset;
                f(&work)
            };
            let (p2, p1, m1, m2) = (at(2.0 * epsilon), at(epsilon), at(-epsilon), at(-2.0 * epsilon));
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            out.get_mut(name).unwrap().data_mut()[i] =
                ((m2 - p2) + 8.0 * (p1 - m1)) / (12.0 * epsilon);
        }
    }
    Ok(out)
}

/// Largest coordinate-wise relative error, each denominated by
/// `max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &ParameterSet, b: &ParameterSet, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, ta) in a.iter() {
        let tb = b.expect(name);
        for (x, y) in ta.data().iter().zip(tb.data()) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;

    fn single(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("p", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn quadratic() {
        let p = single(3.0);
        let g = finite_difference_gradient(|q| q.expect("p").data()[0].powi(2), &p, 1e-5).unwrap();
        assert!((g.expect("p").data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut p = single(1.0);
        p.insert("w", Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
        let g = finite_difference_gradient(|_| 4.2, &p, 1e-5).unwrap();
        assert!(g.iter().all(|(_, t)| t.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn detects_nondeterminism() {
        let counter = std::cell::Cell::new(0.0);
        let p = single(1.0);
        let r = finite_difference_gradient(
            |_| {
                counter.set(counter.get() + 1.0);
                counter.get()
            },
            &p,
            1e-5,
        );
        assert!(r.is_err());
    }

    #[test]
    fn rejects_step_out_of_range() {
        assert!(finite_difference_gradient(|_| 0.0, &single(0.0), 1e-2).is_err());
        assert!(finite_difference_gradient(|_| 0.0, &single(0.0), 1e-9).is_err());
    }
}
