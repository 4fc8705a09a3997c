//! Label-dependent token-level attention matching.
//!
//! A skill vector attends over the sentence's token vectors with weights
//! `softmax(z_j · s)`; the match score is the attention-weighted mean of the
//! per-token cosines. Template positions take part in both the softmax and
//! the sum. [`mean_pool_match`] is the pooled-cosine baseline.

use crate::autograd::{dot, norm, softmax_unchecked, Graph, Tensor, Var, EPSILON_NORM};
use crate::encoder::TokenEmbeddings;
use crate::error::{Error, Result};

/// Score and per-token diagnostics for one (sentence, skill) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub score: f64,
    pub alpha: Vec<f64>,
    pub token_cosines: Vec<f64>,
    pub token_dots: Vec<f64>,
    pub template: Vec<bool>,
}

impl MatchResult {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

fn check_inputs(sentence: &TokenEmbeddings, skill: &[f64]) -> Result<f64> {
    if sentence.is_empty() {
        return Err(Error::Domain("empty sentence".into()));
    }
    if sentence.dim() != skill.len() {
        return Err(Error::Shape(format!(
            "sentence dim {} vs skill dim {}",
            sentence.dim(),
            skill.len()
        )));
    }
    let skill_norm = norm(skill);
    if skill_norm < EPSILON_NORM {
        return Err(Error::Domain("skill vector has zero norm".into()));
    }
    Ok(skill_norm)
}

/// Attention-weighted mean of `cosines` with weights `softmax(sharpness · dots)`.
pub fn attention_score(dots: &[f64], cosines: &[f64], sharpness: f64) -> f64 {
    let scaled: Vec<f64> = dots.iter().map(|d| d * sharpness).collect();
    let alpha = softmax_unchecked(&scaled);
    dot(&alpha, cosines)
}

pub fn context_match(sentence: &TokenEmbeddings, skill: &[f64]) -> Result<MatchResult> {
    let skill_norm = check_inputs(sentence, skill)?;
    let n = sentence.len();
    let mut token_dots = Vec::with_capacity(n);
    let mut token_cosines = Vec::with_capacity(n);
    for j in 0..n {
        let row = sentence.row(j);
        let row_norm = norm(row);
        if row_norm < EPSILON_NORM {
            return Err(Error::Domain(format!("token {j} has zero norm")));
        }
        let d = dot(row, skill);
        token_dots.push(d);
        token_cosines.push((d / (row_norm * skill_norm)).clamp(-1.0, 1.0));
    }
    if token_dots.iter().any(|d| !d.is_finite()) {
        return Err(Error::Domain("non-finite token dot product".into()));
    }
    let alpha = softmax_unchecked(&token_dots);
    let score = dot(&alpha, &token_cosines);
    Ok(MatchResult {
        score,
        alpha,
        token_cosines,
        token_dots,
        template: sentence.template.clone(),
    })
}

/// Cosine between the unweighted mean of the sentence rows and the skill.
pub fn mean_pool_match(sentence: &TokenEmbeddings, skill: &[f64]) -> Result<f64> {
    let skill_norm = check_inputs(sentence, skill)?;
    let mean = sentence.mean();
    let mean_norm = norm(&mean);
    if mean_norm < EPSILON_NORM {
        return Err(Error::Domain("mean sentence vector has zero norm".into()));
    }
    Ok((dot(&mean, skill) / (mean_norm * skill_norm)).clamp(-1.0, 1.0))
}

/// Reverse-mode product of [`context_match`]: given `∂L/∂score`, returns
/// `(∂L/∂rows, ∂L/∂skill)`.
pub(crate) fn context_match_vjp(rows: &Tensor, skill: &[f64], d_score: f64) -> (Tensor, Vec<f64>) {
    let (n, d) = rows.dims();
    let s_norm = norm(skill);
    let mut dots = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    let mut cosines = Vec::with_capacity(n);
    for j in 0..n {
        let row = rows.row_slice(j);
        let dj = dot(row, skill);
        let nj = norm(row);
        dots.push(dj);
        norms.push(nj);
        cosines.push(dj / (nj * s_norm));
    }
    let alpha = softmax_unchecked(&dots);
    let score = dot(&alpha, &cosines);

    let mut d_rows = vec![0.0; n * d];
    let mut d_skill = vec![0.0; d];
    for j in 0..n {
        let row = rows.row_slice(j);
        // through the attention weights, then through the cosine
        let via_dot = d_score * alpha[j] * (cosines[j] - score);
        let via_cos = d_score * alpha[j];
        let inv = 1.0 / (norms[j] * s_norm);
        let row_sq = norms[j] * norms[j];
        let skill_sq = s_norm * s_norm;
        let out = &mut d_rows[j * d..(j + 1) * d];
        for k in 0..d {
            out[k] = via_dot * skill[k]
                + via_cos * (skill[k] * inv - cosines[j] * row[k] / row_sq);
            d_skill[k] += via_dot * row[k]
                + via_cos * (row[k] * inv - cosines[j] * skill[k] / skill_sq);
        }
    }
    (Tensor::matrix(n, d, d_rows), d_skill)
}

/// Reverse-mode product of the cosine between two vectors.
pub(crate) fn cosine_vjp(u: &[f64], v: &[f64], d_cos: f64) -> (Vec<f64>, Vec<f64>) {
    let (nu, nv) = (norm(u), norm(v));
    let c = dot(u, v) / (nu * nv);
    let inv = 1.0 / (nu * nv);
    let du = u
        .iter()
        .zip(v)
        .map(|(a, b)| d_cos * (b * inv - c * a / (nu * nu)))
        .collect();
    let dv = u
        .iter()
        .zip(v)
        .map(|(a, b)| d_cos * (a * inv - c * b / (nv * nv)))
        .collect();
    (du, dv)
}

/// Tape version of [`context_match`]'s score: `rows` is `n×d`, `skill` is `1×d`.
pub fn context_match_on(g: &mut Graph, rows: Var, skill: Var) -> Var {
    let dots = g.matmul_bt(rows, skill);
    let row_norms = g.row_norms(rows);
    let skill_norm = g.row_norms(skill);
    let denom = g.scale_by(row_norms, skill_norm);
    let cosines = g.div(dots, denom);
    let dots_t = g.transpose(dots);
    let alpha = g.softmax_rows(dots_t);
    g.matmul(alpha, cosines)
}

/// Tape cosine between two `1×d` rows.
pub fn cosine_on(g: &mut Graph, u: Var, v: Var) -> Var {
    let d = g.matmul_bt(u, v);
    let nu = g.row_norms(u);
    let nv = g.row_norms(v);
    let denom = g.scale_by(nu, nv);
    g.div(d, denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{finite_difference_gradient, max_relative_error, ParameterSet};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn emb(rows: &[&[f64]]) -> TokenEmbeddings {
        TokenEmbeddings::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_parallel_token() {
        let m = context_match(&emb(&[&[2.0, 1.0]]), &[4.0, 2.0]).unwrap();
        assert_eq!(m.alpha, vec![1.0]);
        assert!((m.score - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_token_hand_example() {
        let m = context_match(&emb(&[&[1.0, 0.0], &[0.0, 1.0]]), &[1.0, 0.0]).unwrap();
        assert_eq!(m.token_dots, vec![1.0, 0.0]);
        assert_eq!(m.token_cosines, vec![1.0, 0.0]);
        assert!((m.alpha[0] - 0.73106).abs() < 1e-5);
        assert!((m.alpha[1] - 0.26894).abs() < 1e-5);
        assert!((m.score - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn scaling_skill_sharpens_attention() {
        let sent = emb(&[&[1.0, 0.2], &[0.1, 1.0], &[-0.5, 0.5]]);
        let s = [1.0, 0.3];
        let base = context_match(&sent, &s).unwrap();
        let big = context_match(&sent, &[10.0, 3.0]).unwrap();
        for (a, b) in base.token_cosines.iter().zip(&big.token_cosines) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(big.alpha[0] > base.alpha[0]);
        let target = base.token_cosines[0];
        assert!((big.score - target).abs() < (base.score - target).abs());
    }

    #[test]
    fn errors() {
        let sent = emb(&[&[1.0, 0.0]]);
        assert!(context_match(&sent, &[1.0, 0.0, 0.0]).is_err());
        assert!(context_match(&sent, &[0.0, 0.0]).is_err());
        assert!(mean_pool_match(&emb(&[&[1.0, 0.0], &[-1.0, 0.0]]), &[1.0, 0.0]).is_err());
    }

    #[test]
    fn mean_pool_examples() {
        assert!((mean_pool_match(&emb(&[&[1.0, 2.0], &[1.0, 2.0]]), &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        let v = mean_pool_match(&emb(&[&[1.0, 0.0], &[0.0, 1.0]]), &[1.0, 0.0]).unwrap();
        assert!((v - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn sharpness_limits() {
        let sent = emb(&[&[1.0, 0.2], &[0.1, 1.0], &[-0.5, 0.5]]);
        let m = context_match(&sent, &[1.0, 0.3]).unwrap();
        let flat = attention_score(&m.token_dots, &m.token_cosines, 0.0);
        let mean = m.token_cosines.iter().sum::<f64>() / 3.0;
        assert!((flat - mean).abs() < 1e-15);
        let sharp = attention_score(&m.token_dots, &m.token_cosines, 1e4);
        assert!((sharp - m.token_cosines[0]).abs() < 1e-12);
    }

    fn random_case(seed: u64, n: usize, d: usize) -> (Tensor, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = Tensor::uniform(&[n, d], 1.0, &mut rng);
        let skill = Tensor::uniform(&[d], 1.0, &mut rng).into_data();
        (rows, skill)
    }

    #[test]
    fn vjp_and_tape_match_finite_differences() {
        for seed in 0..5 {
            let (rows, skill) = random_case(seed, 5, 4);
            let mut p = ParameterSet::new();
            p.insert("rows", rows.clone()).unwrap();
            p.insert("skill", Tensor::row(skill.clone())).unwrap();
            let f = |q: &ParameterSet| {
                let e = TokenEmbeddings::new(q.expect("rows").clone(), vec![false; 5]).unwrap();
                let m = context_match(&e, q.expect("skill").data()).unwrap();
                m.score
            };
            let numeric = finite_difference_gradient(f, &p, 1e-4).unwrap();

            let (dr, ds) = context_match_vjp(&rows, &skill, 1.0);
            let mut analytic = ParameterSet::new();
            analytic.insert("rows", dr).unwrap();
            analytic.insert("skill", Tensor::row(ds)).unwrap();
            assert!(max_relative_error(&analytic, &numeric, 1e-8) < 1e-4);

            let mut g = Graph::new();
            let r = g.param(&p, "rows");
            let s = g.param(&p, "skill");
            let score = context_match_on(&mut g, r, s);
            let tape = g.param_grads(&g.backward(score), &p);
            assert!(max_relative_error(&tape, &numeric, 1e-8) < 1e-4);
            assert!((g.value(score).data()[0] - f(&p)).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_vjp_matches_tape() {
        let (rows, _) = random_case(3, 2, 6);
        let mut p = ParameterSet::new();
        p.insert("u", Tensor::row(rows.row_slice(0).to_vec())).unwrap();
        p.insert("v", Tensor::row(rows.row_slice(1).to_vec())).unwrap();
        let mut g = Graph::new();
        let u = g.param(&p, "u");
        let v = g.param(&p, "v");
        let c = cosine_on(&mut g, u, v);
        let tape = g.param_grads(&g.backward(c), &p);
        let (du, dv) = cosine_vjp(rows.row_slice(0), rows.row_slice(1), 1.0);
        for (a, b) in tape.expect("u").data().iter().zip(&du) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.expect("v").data().iter().zip(&dv) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn match_invariants(seed in 0u64..10_000, n in 1usize..9, scale in 0.01f64..50.0) {
            let (rows, skill) = random_case(seed, n, 4);
            let e = TokenEmbeddings::new(rows, vec![false; n]).unwrap();
            let m = context_match(&e, &skill).unwrap();
            prop_assert!((m.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(m.alpha.iter().all(|a| *a > 0.0 && *a <= 1.0));
            prop_assert!(m.score >= -1.0 - 1e-9 && m.score <= 1.0 + 1e-9);
            prop_assert_eq!(m.token_dots.len(), n);
            prop_assert_eq!(m.token_cosines.len(), n);

            let scaled: Vec<f64> = skill.iter().map(|v| v * scale).collect();
            let ms = context_match(&e, &scaled).unwrap();
            for (a, b) in m.token_cosines.iter().zip(&ms.token_cosines) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            prop_assert_eq!(argmax(&m.token_dots), argmax(&ms.token_dots));

            if n == 1 {
                let mp = mean_pool_match(&e, &skill).unwrap();
                prop_assert!((mp - m.score).abs() < 1e-15);
            }
        }
    }
}
