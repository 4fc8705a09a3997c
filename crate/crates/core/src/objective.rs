//! Symmetric in-batch InfoNCE, task sampling and the gradient-caching step.
//!
//! A [`ContrastiveBatch`] pairs B left sequences with B right sequences; entry
//! `(i, k)` of the score matrix compares left `i` with right `k`, and the
//! diagonal holds the true pairs. Left sequences kept as token rows are scored
//! with [`context_match`]; pooled ones with plain cosine.
//!
//! [`cached_gradient_step`] first encodes every micro-batch without keeping a
//! tape, differentiates the loss with respect to those representations in
//! closed form, and then re-encodes one micro-batch at a time to push the
//! cached representation gradients into the parameters.

use rand::Rng;

use crate::autograd::{Graph, ParameterSet, Tensor, Var};
use crate::encoder::{forward, EncoderConfig, TokenEmbeddings, TokenEncoder};
use crate::error::{Error, Result};
use crate::matching::{context_match, context_match_vjp, cosine_vjp};
use crate::text::TokenSequence;

pub const DEFAULT_SCALE: f64 = 20.0;
pub const DEFAULT_MICRO_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    SentenceSkill,
    DescriptionSkill,
    SkillSynonym,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::SentenceSkill,
        TaskKind::DescriptionSkill,
        TaskKind::SkillSynonym,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SentenceSkill => "sentence-skill",
            TaskKind::DescriptionSkill => "description-skill",
            TaskKind::SkillSynonym => "skill-synonym",
        }
    }
}

/// Square matrix of similarities, each within [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    size: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if size == 0 || data.len() != size * size {
            return Err(Error::Shape(format!(
                "score matrix of {} entries is not {size}×{size}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite score {v}")));
        }
        if let Some(v) = data.iter().find(|v| v.abs() > 1.0 + 1e-9) {
            return Err(Error::Domain(format!("score {v} outside [-1, 1]")));
        }
        Ok(Self { size, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.iter().any(|r| r.len() != rows.len()) {
            return Err(Error::Shape("score matrix is not square".into()));
        }
        Self::new(rows.len(), rows.concat())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.size + k]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub scale: f64,
    /// Keep only the row-wise (sentence → skill) term.
    pub asymmetric: bool,
    /// Drop off-diagonal entries whose right-hand labels equal the diagonal's.
    pub mask_duplicates: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            scale: DEFAULT_SCALE,
            asymmetric: false,
            mask_duplicates: false,
        }
    }
}

impl LossOptions {
    fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }
}

/// Loss value with its gradient with respect to the scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub forward: Vec<f64>,
    pub backward: Vec<f64>,
    pub grad: Tensor,
}

fn duplicate_mask(labels: Option<&[usize]>, b: usize, enabled: bool) -> Result<Option<Vec<bool>>> {
    if !enabled {
        return Ok(None);
    }
    let labels = labels.ok_or_else(|| Error::Config("duplicate masking needs labels".into()))?;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for batch of {b}", labels.len())));
    }
    let mut mask = vec![false; b * b];
    for i in 0..b {
        for k in 0..b {
            mask[i * b + k] = i != k && labels[i] == labels[k];
        }
    }
    Ok(Some(mask))
}

/// Cross-entropy of each line of `logits` against its diagonal entry, with
/// the softmax probabilities. `row_major` picks rows or columns.
fn line_cross_entropy(logits: &[f64], b: usize, mask: Option<&[bool]>, row_major: bool) -> (Vec<f64>, Vec<f64>) {
    let at = |i: usize, k: usize| if row_major { i * b + k } else { k * b + i };
    let mut losses = Vec::with_capacity(b);
    let mut probs = vec![0.0; b * b];
    for i in 0..b {
        let live = |k: usize| mask.map_or(true, |m| !m[at(i, k)]);
        let top = (0..b)
            .filter(|&k| live(k))
            .max_by(|&x, &y| logits[at(i, x)].total_cmp(&logits[at(i, y)]))
            .expect("diagonal is never masked");
        let max = logits[at(i, top)];
        // log-sum-exp as max + ln(1 + rest), keeping digits when rest is tiny
        let rest: f64 = (0..b)
            .filter(|&k| live(k) && k != top)
            .map(|k| (logits[at(i, k)] - max).exp())
            .sum();
        losses.push((max - logits[at(i, i)]) + rest.ln_1p());
        for k in (0..b).filter(|&k| live(k)) {
            probs[at(i, k)] = (logits[at(i, k)] - max).exp() / (1.0 + rest);
        }
    }
    (losses, probs)
}

/// InfoNCE over `scores` with gradient. `labels` identify right-hand items and
/// are only consulted when duplicate masking is on.
pub fn infonce(scores: &ScoreMatrix, opts: &LossOptions, labels: Option<&[usize]>) -> Result<LossValue> {
    opts.validate()?;
    let b = scores.size();
    let mask = duplicate_mask(labels, b, opts.mask_duplicates)?;
    let logits: Vec<f64> = scores.data().iter().map(|s| s * opts.scale).collect();
    let (forward, p_row) = line_cross_entropy(&logits, b, mask.as_deref(), true);
    let (backward, p_col) = line_cross_entropy(&logits, b, mask.as_deref(), false);

    let bf = b as f64;
    let mut grad = vec![0.0; b * b];
    let loss = if opts.asymmetric {
        for i in 0..b {
            for k in 0..b {
                let target = if i == k { 1.0 } else { 0.0 };
                grad[i * b + k] = opts.scale / bf * (p_row[i * b + k] - target);
            }
        }
        forward.iter().sum::<f64>() / bf
    } else {
        for i in 0..b {
            for k in 0..b {
                let target = if i == k { 1.0 } else { 0.0 };
                let idx = i * b + k;
                grad[idx] = opts.scale / bf * 0.5 * ((p_row[idx] - target) + (p_col[idx] - target));
            }
        }
        forward.iter().zip(&backward).map(|(f, k)| (f + k) / 2.0).sum::<f64>() / bf
    };
    Ok(LossValue {
        loss,
        forward,
        backward,
        grad: Tensor::matrix(b, b, grad),
    })
}

/// Mean over the batch of the averaged row and column cross-entropies.
pub fn symmetric_infonce(scores: &ScoreMatrix, scale: f64) -> Result<f64> {
    let opts = LossOptions {
        scale,
        ..LossOptions::default()
    };
    Ok(infonce(scores, &opts, None)?.loss)
}

/// Tape version of [`infonce`] over a `B×B` score node.
pub fn infonce_on(g: &mut Graph, scores: Var, opts: &LossOptions, labels: Option<&[usize]>) -> Result<Var> {
    opts.validate()?;
    let b = g.value(scores).rows();
    let mask = duplicate_mask(labels, b, opts.mask_duplicates)?;
    let logits = g.mul_scalar(scores, opts.scale);
    let rows = g.log_softmax_rows(logits, mask.clone());
    let fwd = g.diag(rows);
    let fwd = g.mean_all(fwd);
    if opts.asymmetric {
        return Ok(g.mul_scalar(fwd, -1.0));
    }
    // the mask is symmetric, so it also applies to the transpose
    let cols_in = g.transpose(logits);
    let cols = g.log_softmax_rows(cols_in, mask);
    let bwd = g.diag(cols);
    let bwd = g.mean_all(bwd);
    let both = g.add(fwd, bwd);
    Ok(g.mul_scalar(both, -0.5))
}

/// Draws a task with probability proportional to its size.
pub fn sample_task<R: Rng + ?Sized>(sizes: &[(TaskKind, usize)], rng: &mut R) -> Result<TaskKind> {
    let total: usize = sizes.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Invalid("every task dataset is empty".into()));
    }
    let mut draw = rng.gen_range(0..total);
    for &(task, n) in sizes {
        if draw < n {
            return Ok(task);
        }
        draw -= n;
    }
    unreachable!("draw below total")
}

/// Cosine between mean skill and mean description vectors for every pairing.
pub fn description_task_scores<E: TokenEncoder + ?Sized>(
    pairs: &[(&str, &str)],
    encoder: &E,
) -> Result<ScoreMatrix> {
    if pairs.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut left = Vec::with_capacity(pairs.len());
    let mut right = Vec::with_capacity(pairs.len());
    for (skill, description) in pairs {
        left.push(encoder.encode_text(skill)?.mean());
        right.push(encoder.encode_text(description)?.mean());
    }
    let b = pairs.len();
    let mut data = Vec::with_capacity(b * b);
    for l in &left {
        for r in &right {
            data.push(crate::autograd::cosine(l, r)?);
        }
    }
    ScoreMatrix::new(b, data)
}

/// How a side of the batch is represented.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Side {
    /// Contextual token rows (`n×d`); only meaningful on the left.
    Tokens,
    /// Mean of the token rows (`1×d`).
    Mean,
    /// Mean of the token rows times the named `d×d'` parameter.
    Projected(String),
}

/// B aligned pairs from a single task.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub left: Vec<TokenSequence>,
    pub right: Vec<TokenSequence>,
    pub left_side: Side,
    pub right_side: Side,
    /// Identity of each right-hand item, for duplicate masking.
    pub labels: Vec<usize>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.left.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        if self.right.len() != self.left.len() || self.labels.len() != self.left.len() {
            return Err(Error::Shape(format!(
                "batch sides disagree: {} left, {} right, {} labels",
                self.left.len(),
                self.right.len(),
                self.labels.len()
            )));
        }
        if self.right_side == Side::Tokens {
            return Err(Error::Config("right side must be pooled".into()));
        }
        Ok(())
    }

    fn token_level(&self) -> bool {
        self.left_side == Side::Tokens
    }
}

/// Records the representation of `seq` on `g`.
pub fn represent_on(
    g: &mut Graph,
    params: &ParameterSet,
    config: &EncoderConfig,
    seq: &TokenSequence,
    side: &Side,
) -> Result<Var> {
    let rows = forward(g, params, config, seq)?;
    Ok(match side {
        Side::Tokens => rows,
        Side::Mean => g.mean_rows(rows),
        Side::Projected(name) => {
            if params.get(name).is_none() {
                return Err(Error::Config(format!("missing projection parameter {name}")));
            }
            let mean = g.mean_rows(rows);
            let w = g.param(params, name);
            g.matmul(mean, w)
        }
    })
}

/// Result of one gradient computation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: ParameterSet,
    /// Largest number of tape nodes alive at any point.
    pub peak_nodes: usize,
}

/// Representations of both sides, computed without keeping any tape.
struct CachedReps {
    left: Vec<Tensor>,
    right: Vec<Tensor>,
    peak_nodes: usize,
}

fn encode_untracked(
    params: &ParameterSet,
    config: &EncoderConfig,
    batch: &ContrastiveBatch,
    micro: usize,
) -> Result<CachedReps> {
    let b = batch.len();
    let mut left = Vec::with_capacity(b);
    let mut right = Vec::with_capacity(b);
    let mut peak_nodes = 0;
    for start in (0..b).step_by(micro) {
        let end = (start + micro).min(b);
        let mut g = Graph::new();
        for i in start..end {
            let l = represent_on(&mut g, params, config, &batch.left[i], &batch.left_side)?;
            left.push(g.value(l).clone());
            let r = represent_on(&mut g, params, config, &batch.right[i], &batch.right_side)?;
            right.push(g.value(r).clone());
        }
        peak_nodes = peak_nodes.max(g.len());
    }
    Ok(CachedReps {
        left,
        right,
        peak_nodes,
    })
}

fn pooled_score(left: &Tensor, right: &Tensor) -> Result<f64> {
    crate::autograd::cosine(left.data(), right.data())
}

/// Score matrix from precomputed representations.
fn score_cached(reps: &CachedReps, token_level: bool) -> Result<ScoreMatrix> {
    let b = reps.left.len();
    let mut data = Vec::with_capacity(b * b);
    if token_level {
        for l in &reps.left {
            let rows = TokenEmbeddings::new(l.clone(), vec![false; l.rows()])?;
            for r in &reps.right {
                data.push(context_match(&rows, r.data())?.score);
            }
        }
    } else {
        for l in &reps.left {
            for r in &reps.right {
                data.push(pooled_score(l, r)?);
            }
        }
    }
    ScoreMatrix::new(b, data)
}

/// Pulls `∂L/∂S` back onto every cached representation.
fn representation_grads(reps: &CachedReps, token_level: bool, d_scores: &Tensor) -> (Vec<Tensor>, Vec<Tensor>) {
    let b = reps.left.len();
    let mut d_left: Vec<Tensor> = reps
        .left
        .iter()
        .map(|l| Tensor::matrix(l.rows(), l.cols(), vec![0.0; l.len()]))
        .collect();
    let mut d_right: Vec<Tensor> = reps
        .right
        .iter()
        .map(|r| Tensor::matrix(r.rows(), r.cols(), vec![0.0; r.len()]))
        .collect();
    for i in 0..b {
        for k in 0..b {
            let upstream = d_scores.get(i, k);
            if upstream == 0.0 {
                continue;
            }
            let (dl, dr) = if token_level {
                let (dl, dr) = context_match_vjp(&reps.left[i], reps.right[k].data(), upstream);
                (dl.into_data(), dr)
            } else {
                cosine_vjp(reps.left[i].data(), reps.right[k].data(), upstream)
            };
            for (acc, v) in d_left[i].data_mut().iter_mut().zip(&dl) {
                *acc += v;
            }
            for (acc, v) in d_right[k].data_mut().iter_mut().zip(&dr) {
                *acc += v;
            }
        }
    }
    (d_left, d_right)
}

/// Scores and loss of `batch` evaluated without gradients.
pub fn batch_scores(params: &ParameterSet, config: &EncoderConfig, batch: &ContrastiveBatch) -> Result<ScoreMatrix> {
    batch.validate()?;
    let reps = encode_untracked(params, config, batch, batch.len())?;
    score_cached(&reps, batch.token_level())
}

/// Full-batch gradient recorded on a single tape.
pub fn direct_gradient_step(
    params: &ParameterSet,
    config: &EncoderConfig,
    batch: &ContrastiveBatch,
    opts: &LossOptions,
) -> Result<StepOutput> {
    batch.validate()?;
    let b = batch.len();
    let mut g = Graph::new();
    let mut left = Vec::with_capacity(b);
    let mut right = Vec::with_capacity(b);
    for i in 0..b {
        left.push(represent_on(&mut g, params, config, &batch.left[i], &batch.left_side)?);
        right.push(represent_on(&mut g, params, config, &batch.right[i], &batch.right_side)?);
    }
    let right_all = g.concat_rows(&right);
    let right_unit = g.l2_normalize_rows(right_all);
    let scores = if batch.token_level() {
        let mut rows = Vec::with_capacity(b);
        for &l in &left {
            let n = g.value(l).rows();
            let dots = g.matmul_bt(l, right_all);
            let l_unit = g.l2_normalize_rows(l);
            let cos = g.matmul_bt(l_unit, right_unit);
            let dots_t = g.transpose(dots);
            let alpha = g.softmax_rows(dots_t);
            let cos_t = g.transpose(cos);
            let weighted = g.mul(alpha, cos_t);
            let ones = g.constant(Tensor::matrix(n, 1, vec![1.0; n]));
            let col = g.matmul(weighted, ones);
            rows.push(g.transpose(col));
        }
        g.concat_rows(&rows)
    } else {
        let left_all = g.concat_rows(&left);
        let left_unit = g.l2_normalize_rows(left_all);
        g.matmul_bt(left_unit, right_unit)
    };
    ScoreMatrix::new(b, g.value(scores).data().to_vec())?;
    let loss = infonce_on(&mut g, scores, opts, Some(&batch.labels))?;
    let loss_value = g.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::Domain(format!("non-finite loss {loss_value}")));
    }
    let grads = g.backward(loss);
    Ok(StepOutput {
        loss: loss_value,
        grads: g.param_grads(&grads, params),
        peak_nodes: g.len(),
    })
}

/// Full-batch gradient computed with bounded tape size.
///
/// With `micro >= B` this is exactly [`direct_gradient_step`].
pub fn cached_gradient_step(
    params: &ParameterSet,
    config: &EncoderConfig,
    batch: &ContrastiveBatch,
    micro: usize,
    opts: &LossOptions,
) -> Result<StepOutput> {
    if micro == 0 {
        return Err(Error::Config("micro-batch size must be at least 1".into()));
    }
    batch.validate()?;
    let b = batch.len();
    if micro >= b {
        return direct_gradient_step(params, config, batch, opts);
    }

    let reps = encode_untracked(params, config, batch, micro)?;
    let scores = score_cached(&reps, batch.token_level())?;
    let loss = infonce(&scores, opts, Some(&batch.labels))?;
    if !loss.loss.is_finite() {
        return Err(Error::Domain(format!("non-finite loss {}", loss.loss)));
    }
    let (d_left, d_right) = representation_grads(&reps, batch.token_level(), &loss.grad);

    let mut total = params.zeros_like();
    let mut peak_nodes = reps.peak_nodes;
    for start in (0..b).step_by(micro) {
        let end = (start + micro).min(b);
        let mut g = Graph::new();
        let mut surrogate: Option<Var> = None;
        for i in start..end {
            let l = represent_on(&mut g, params, config, &batch.left[i], &batch.left_side)?;
            let sl = g.dot_const(l, d_left[i].clone());
            let r = represent_on(&mut g, params, config, &batch.right[i], &batch.right_side)?;
            let sr = g.dot_const(r, d_right[i].clone());
            let pair = g.add(sl, sr);
            surrogate = Some(match surrogate {
                Some(acc) => g.add(acc, pair),
                None => pair,
            });
        }
        let root = surrogate.expect("micro-batch is non-empty");
        let grads = g.backward(root);
        total.accumulate(&g.param_grads(&grads, params));
        peak_nodes = peak_nodes.max(g.len());
    }
    Ok(StepOutput {
        loss: loss.loss,
        grads: total,
        peak_nodes,
    })
}
