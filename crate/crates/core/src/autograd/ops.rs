//! Value-level numeric primitives shared by the tape and the analytic paths.

use super::tensor::{dot, norm, Tensor};
use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`cosine`].
pub const EPSILON_NORM: f64 = 1e-12;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("softmax input {i} is not finite: {}", v[i])));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Which argument of [`cosine`] had a vanishing norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CosineArg {
    First,
    Second,
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu < EPSILON_NORM {
        return Err(zero_norm(CosineArg::First));
    }
    if nv < EPSILON_NORM {
        return Err(zero_norm(CosineArg::Second));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

fn zero_norm(which: CosineArg) -> Error {
    let arg = match which {
        CosineArg::First => "first",
        CosineArg::Second => "second",
    };
    Error::Domain(format!("cosine: {arg} argument has zero norm"))
}

pub(crate) fn mean_rows(x: &Tensor) -> Tensor {
    let (r, c) = x.dims();
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(x.row_slice(i)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= r as f64;
    }
    Tensor::matrix(1, c, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1.0, 0.0]).unwrap();
        assert!((p[0] - 0.73106).abs() < 1e-5);
        assert!((p[1] - 0.26894).abs() < 1e-5);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[1.0, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn cosine_names_zero_argument() {
        let e = cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err().to_string();
        assert!(e.contains("first"), "{e}");
        let e = cosine(&[1.0, 0.0], &[0.0, 0.0]).unwrap_err().to_string();
        assert!(e.contains("second"), "{e}");
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let p = softmax(&v).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|x| *x > 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_is_permutation_equivariant(v in proptest::collection::vec(-10.0f64..10.0, 2..10)) {
            let p = softmax(&v).unwrap();
            let rev: Vec<f64> = v.iter().rev().copied().collect();
            let q = softmax(&rev).unwrap();
            for (a, b) in p.iter().zip(q.iter().rev()) {
                prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1e-300));
            }
        }

        #[test]
        fn cosine_is_scale_invariant(
            u in proptest::collection::vec(-5.0f64..5.0, 4),
            v in proptest::collection::vec(-5.0f64..5.0, 4),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&u) > 1e-3 && norm(&v) > 1e-3);
            let base = cosine(&u, &v).unwrap();
            let su: Vec<f64> = u.iter().map(|x| x * a).collect();
            let sv: Vec<f64> = v.iter().map(|x| x * b).collect();
            prop_assert!((cosine(&su, &sv).unwrap() - base).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&base));
        }
    }
}
