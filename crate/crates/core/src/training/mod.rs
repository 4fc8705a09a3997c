//! Multi-task contrastive training of the encoder.
//!
//! Each step draws one task with probability proportional to the pairs it
//! still has left in the epoch, takes that task's next batch, and applies one
//! AdamW update from [`cached_gradient_step`]. Development RP@5 is measured
//! at fixed fractions of the run; training halts after `patience`
//! consecutive evaluations without a strict improvement and returns the best
//! parameters seen.

pub mod checkpoint;
pub mod sweep;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::ParameterSet;
use crate::data::TrainingPair;
use crate::encoder::{is_no_decay, Encoder};
use crate::error::{Error, Result};
use crate::evaluation::{rp_at_k, AnnotatedAd};
use crate::extraction::{rank_skills_with, Scorer, SkillIndex, Taxonomy};
use crate::objective::{
    cached_gradient_step, sample_task, ContrastiveBatch, LossOptions, Side, TaskKind, DEFAULT_MICRO_BATCH,
    DEFAULT_SCALE,
};
use crate::text::Vocabulary;

pub use checkpoint::{Checkpoint, ModelKind, CHECKPOINT_VERSION};

/// Switches for the ablation study; all off reproduces the default model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    /// Score sentence/skill pairs by cosine of mean vectors.
    pub no_context: bool,
    pub no_augmentation: bool,
    /// Keep only the sentence → skill term of the loss.
    pub asymmetric_loss: bool,
    pub no_descriptions: bool,
    /// Add a skill ↔ synonym task.
    pub with_synonyms: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub micro_batch: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub scale: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub ablations: Ablations,
    pub eval_every: f64,
    pub patience: usize,
    pub weight_decay: f64,
    pub mask_duplicates: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            micro_batch: DEFAULT_MICRO_BATCH,
            learning_rate: 5e-4,
            warmup_fraction: 0.1,
            scale: DEFAULT_SCALE,
            max_epochs: 1,
            seed: 0,
            ablations: Ablations::default(),
            eval_every: 0.1,
            patience: 2,
            weight_decay: 0.01,
            mask_duplicates: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.micro_batch == 0 {
            return fail("batch and micro-batch sizes must be positive".into());
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return fail(format!("warmup fraction {} outside (0, 1)", self.warmup_fraction));
        }
        if !(self.eval_every > 0.0 && self.eval_every <= 1.0) {
            return fail(format!("eval fraction {} outside (0, 1]", self.eval_every));
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return fail("patience and epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.scale > 0.0) {
            return fail("learning rate and scale must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight decay must be non-negative".into());
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            scale: self.scale,
            asymmetric: self.ablations.asymmetric_loss,
            mask_duplicates: self.mask_duplicates,
        }
    }

    pub fn scorer(&self) -> Scorer {
        if self.ablations.no_context {
            Scorer::MeanPool
        } else {
            Scorer::ContextMatch
        }
    }
}

/// Joins `sentence` and `donor` with a space, donor first when `prepend`.
pub fn augment_with(sentence: &str, donor: &str, prepend: bool) -> String {
    if prepend {
        format!("{donor} {sentence}")
    } else {
        format!("{sentence} {donor}")
    }
}

/// Concatenates `pool[index]` with a uniformly drawn other sentence of the
/// pool, on either side with equal probability.
pub fn augment<R: Rng + ?Sized>(pool: &[String], index: usize, rng: &mut R) -> String {
    let sentence = &pool[index];
    if pool.len() < 2 {
        return sentence.clone();
    }
    let mut donor = rng.gen_range(0..pool.len() - 1);
    if donor >= index {
        donor += 1;
    }
    let prepend = rng.gen_bool(0.5);
    augment_with(sentence, &pool[donor], prepend)
}

/// Linear warmup to `peak` over `warmup` steps, then linear decay to zero at
/// `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LinearSchedule {
    pub fn with_fraction(peak: f64, fraction: f64, total: usize) -> Self {
        Self {
            peak,
            warmup: (fraction * total as f64).floor() as usize,
            total,
        }
    }

    /// Learning rate for 0-based step `t`.
    pub fn at(&self, t: usize) -> f64 {
        if t < self.warmup {
            self.peak * t as f64 / self.warmup as f64
        } else if t >= self.total {
            0.0
        } else {
            self.peak * (self.total - t) as f64 / (self.total - self.warmup) as f64
        }
    }
}

/// Tracks the best development score and the run of evaluations without a
/// strict improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best: Option<f64>,
    pub stale: usize,
    pub patience: usize,
    pub evaluated_at: Vec<usize>,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        Self {
            best: None,
            stale: 0,
            patience,
            evaluated_at: Vec::new(),
        }
    }

    /// Records a score; returns `(improved, halt)`.
    pub fn observe(&mut self, step: usize, score: f64) -> (bool, bool) {
        self.evaluated_at.push(step);
        match self.best {
            Some(best) if score <= best => {
                self.stale += 1;
                (false, self.stale >= self.patience)
            }
            _ => {
                self.best = Some(score);
                self.stale = 0;
                (true, false)
            }
        }
    }
}

/// 1-based steps after which to evaluate: `round(k · fraction · total)`,
/// de-duplicated, within `1..=total`.
pub fn evaluation_steps(total: usize, fraction: f64) -> Vec<usize> {
    let count = (1.0 / fraction - 1e-9).ceil() as usize;
    let mut steps: Vec<usize> = (1..=count)
        .map(|k| ((k as f64 * fraction * total as f64).round() as usize).clamp(1, total))
        .collect();
    steps.dedup();
    steps
}

/// AdamW with decoupled weight decay, skipping biases and norm parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u32,
    m: ParameterSet,
    v: ParameterSet,
}

impl AdamW {
    pub fn new(params: &ParameterSet, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ParameterSet, grads: &ParameterSet, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.expect(name).data();
            let m = self.m.get_mut(name).expect("moment exists").data_mut();
            let v = self.v.get_mut(name).expect("moment exists").data_mut();
            let decay = if is_no_decay(name) { 0.0 } else { self.weight_decay };
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                *w -= lr * decay * *w;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One development measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevPoint {
    pub step: usize,
    pub rp_at_5: f64,
}

/// Inputs to [`train`].
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub taxonomy: &'a Taxonomy,
    pub pairs: &'a [TrainingPair],
    pub dev: &'a [AnnotatedAd],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub encoder: Encoder,
    pub config: TrainingConfig,
    pub steps_taken: usize,
    pub best_step: usize,
    pub history: Vec<DevPoint>,
    pub halted_early: bool,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(
            ModelKind::Extraction,
            &self.encoder,
            serde_json::to_value(&self.config)?,
            self.best_step,
            self.history.clone(),
        )
    }
}

/// RP@K of `encoder` over every labelled development sentence.
pub fn dev_rp(encoder: &Encoder, taxonomy: &Taxonomy, dev: &[AnnotatedAd], scorer: Scorer, k: usize) -> Result<f64> {
    let index = SkillIndex::build(encoder, taxonomy)?;
    let mut ranked = Vec::new();
    let mut gold = Vec::new();
    for ad in dev {
        for s in &ad.sentences {
            let labels: BTreeSet<String> = s.gold_labels();
            if labels.is_empty() {
                continue;
            }
            let order = rank_skills_with(&s.text, encoder, &index, scorer)?;
            ranked.push(order.into_iter().map(|p| p.skill_id).collect::<Vec<_>>());
            gold.push(labels);
        }
    }
    rp_at_k(&ranked, &gold, k)
}

/// Aligned pairs of one task; `label` indexes the taxonomy.
struct TaskData {
    kind: TaskKind,
    left: Vec<String>,
    right: Vec<String>,
    label: Vec<usize>,
}

fn task_datasets(config: &TrainingConfig, data: &TrainingData) -> Result<Vec<TaskData>> {
    let tax = data.taxonomy;
    let mut sentence = TaskData {
        kind: TaskKind::SentenceSkill,
        left: Vec::new(),
        right: Vec::new(),
        label: Vec::new(),
    };
    for p in data.pairs {
        let pos = tax
            .position(&p.skill_id)
            .ok_or_else(|| Error::Invalid(format!("unknown skill id {}", p.skill_id)))?;
        sentence.left.push(p.sentence.clone());
        sentence.right.push(tax.skills()[pos].name.clone());
        sentence.label.push(pos);
    }
    let mut tasks = vec![sentence];
    if !config.ablations.no_descriptions {
        let mut desc = TaskData {
            kind: TaskKind::DescriptionSkill,
            left: Vec::new(),
            right: Vec::new(),
            label: Vec::new(),
        };
        for (pos, s) in tax.skills().iter().enumerate() {
            if let Some(d) = s.description.as_ref().filter(|d| !d.trim().is_empty()) {
                desc.left.push(s.name.clone());
                desc.right.push(d.clone());
                desc.label.push(pos);
            }
        }
        tasks.push(desc);
    }
    if config.ablations.with_synonyms {
        if !tax.has_synonyms() {
            return Err(Error::Invalid("synonym task requested but the taxonomy has no synonyms".into()));
        }
        let mut syn = TaskData {
            kind: TaskKind::SkillSynonym,
            left: Vec::new(),
            right: Vec::new(),
            label: Vec::new(),
        };
        for (pos, s) in tax.skills().iter().enumerate() {
            for alt in &s.synonyms {
                syn.left.push(s.name.clone());
                syn.right.push(alt.clone());
                syn.label.push(pos);
            }
        }
        tasks.push(syn);
    }
    Ok(tasks)
}

/// Batches of one epoch, in the order they will be used.
fn plan_epoch(tasks: &[TaskData], batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, Vec<usize>)>> {
    let mut queues: Vec<std::collections::VecDeque<Vec<usize>>> = tasks
        .iter()
        .map(|t| {
            let mut order: Vec<usize> = (0..t.left.len()).collect();
            order.shuffle(rng);
            order.chunks(batch).map(<[usize]>::to_vec).collect()
        })
        .collect();
    let mut plan = Vec::new();
    loop {
        let sizes: Vec<(TaskKind, usize)> = tasks
            .iter()
            .zip(&queues)
            .map(|(t, q)| (t.kind, q.iter().map(Vec::len).sum()))
            .collect();
        if sizes.iter().all(|(_, n)| *n == 0) {
            break;
        }
        let kind = sample_task(&sizes, rng)?;
        let t = tasks.iter().position(|t| t.kind == kind).expect("sampled task exists");
        plan.push((t, queues[t].pop_front().expect("task has batches left")));
    }
    Ok(plan)
}

fn assemble_batch(
    encoder: &Encoder,
    task: &TaskData,
    members: &[usize],
    config: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ContrastiveBatch> {
    let sentence_task = task.kind == TaskKind::SentenceSkill;
    let mut left = Vec::with_capacity(members.len());
    let mut right = Vec::with_capacity(members.len());
    for &i in members {
        let text = if sentence_task && !config.ablations.no_augmentation {
            augment(&task.left, i, rng)
        } else {
            task.left[i].clone()
        };
        left.push(encoder.tokenize(&text)?);
        right.push(encoder.tokenize(&task.right[i])?);
    }
    let left_side = if sentence_task && !config.ablations.no_context {
        Side::Tokens
    } else {
        Side::Mean
    };
    Ok(ContrastiveBatch {
        left,
        right,
        left_side,
        right_side: Side::Mean,
        labels: members.iter().map(|&i| task.label[i]).collect(),
    })
}

/// Vocabulary over every text the model will see during training and
/// development evaluation.
pub fn corpus_vocabulary(data: &TrainingData) -> Vocabulary {
    let mut texts: Vec<&str> = Vec::new();
    for s in data.taxonomy.skills() {
        texts.push(&s.name);
        if let Some(d) = &s.description {
            texts.push(d);
        }
        texts.extend(s.synonyms.iter().map(String::as_str));
    }
    texts.extend(data.pairs.iter().map(|p| p.sentence.as_str()));
    Vocabulary::build(texts, 1)
}

/// Trains `encoder` in place of a fresh copy and returns the best snapshot.
pub fn train(encoder: Encoder, config: &TrainingConfig, data: &TrainingData) -> Result<TrainOutcome> {
    config.validate()?;
    if data.pairs.is_empty() {
        return Err(Error::Invalid("no sentence-skill pairs".into()));
    }
    if !data.dev.iter().any(|ad| ad.sentences.iter().any(|s| !s.clusters.is_empty())) {
        return Err(Error::Invalid("development set has no labelled sentences".into()));
    }
    let tasks = task_datasets(config, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut encoder = encoder;
    let mut optimizer = AdamW::new(&encoder.params, config.weight_decay);
    let opts = config.loss_options();
    let scorer = config.scorer();

    let mut best_params = encoder.params.clone();
    let mut best_step = 0;
    let mut history = Vec::new();
    let mut stop = EarlyStopState::new(config.patience);
    let mut global = 0usize;
    let mut halted_early = false;

    'epochs: for _ in 0..config.max_epochs {
        let plan = plan_epoch(&tasks, config.batch_size, &mut rng)?;
        let total = plan.len();
        let schedule = LinearSchedule::with_fraction(config.learning_rate, config.warmup_fraction, total);
        let evals = evaluation_steps(total, config.eval_every);
        for (t, (task, members)) in plan.iter().enumerate() {
            let batch = assemble_batch(&encoder, &tasks[*task], members, config, &mut rng)?;
            let step = cached_gradient_step(&encoder.params, &encoder.config, &batch, config.micro_batch, &opts)?;
            global += 1;
            if !step.loss.is_finite() || !step.grads.is_finite() {
                return Err(Error::Diverged {
                    step: global,
                    loss: step.loss,
                });
            }
            optimizer.update(&mut encoder.params, &step.grads, schedule.at(t));
            if !encoder.params.is_finite() {
                return Err(Error::Diverged {
                    step: global,
                    loss: step.loss,
                });
            }
            if evals.contains(&(t + 1)) {
                let rp5 = dev_rp(&encoder, data.taxonomy, data.dev, scorer, 5)?;
                history.push(DevPoint { step: global, rp_at_5: rp5 });
                let (improved, halt) = stop.observe(global, rp5);
                if improved {
                    best_params = encoder.params.clone();
                    best_step = global;
                }
                if halt {
                    halted_early = true;
                    break 'epochs;
                }
            }
        }
    }
    encoder.params = best_params;
    Ok(TrainOutcome {
        encoder,
        config: config.clone(),
        steps_taken: global,
        best_step,
        history,
        halted_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use crate::encoder::EncoderConfig;
    use crate::data::synthetic::{generate_synthetic_corpus, SyntheticSpec};
    use rand::rngs::mock::StepRng;

    #[test]
    fn augmentation_rule() {
        assert_eq!(augment_with("a b", "c d", true), "c d a b");
        assert_eq!(augment_with("a b", "c d", false), "a b c d");
        let pool: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut prepends = 0;
        for _ in 0..10_000 {
            let out = augment(&pool, 3, &mut rng);
            let parts: Vec<&str> = out.split(' ').collect();
            assert_eq!(parts.len(), 2);
            assert!(parts.contains(&"s3"));
            assert_ne!(parts[0], parts[1]);
            if parts[1] == "s3" {
                prepends += 1;
            }
        }
        assert!((4_700..=5_300).contains(&prepends), "{prepends}");
        assert_eq!(augment(&pool[..1], 0, &mut StepRng::new(0, 1)), "s0");
    }

    #[test]
    fn schedule_knots() {
        let s = LinearSchedule::with_fraction(1e-3, 0.1, 100);
        assert_eq!(s.at(0), 0.0);
        assert_eq!(s.at(10), 1e-3);
        assert_eq!(s.at(100), 0.0);
        assert!((s.at(5) - 5e-4).abs() < 1e-18);
        assert!(s.at(99) > 0.0 && s.at(99) < 1e-4);
        let no_warmup = LinearSchedule { peak: 2.0, warmup: 0, total: 4 };
        assert_eq!(no_warmup.at(0), 2.0);
        assert_eq!(no_warmup.at(2), 1.0);
    }

    fn replay(trace: &[f64]) -> Option<usize> {
        let mut s = EarlyStopState::new(2);
        for (i, v) in trace.iter().enumerate() {
            if s.observe(i + 1, *v).1 {
                return Some(i + 1);
            }
        }
        None
    }

    #[test]
    fn early_stopping_traces() {
        assert_eq!(replay(&[0.2, 0.3, 0.3, 0.3]), Some(4));
        assert_eq!(replay(&[0.2, 0.3, 0.25, 0.4]), None);
        assert_eq!(replay(&[0.5, 0.4, 0.6, 0.6, 0.5]), Some(5));
        let mut s = EarlyStopState::new(2);
        for (i, v) in [0.2, 0.3, 0.3, 0.3].iter().enumerate() {
            s.observe(i, *v);
        }
        assert_eq!(s.best, Some(0.3));
    }

    #[test]
    fn evaluation_step_schedule() {
        assert_eq!(evaluation_steps(100, 0.1), vec![10, 20, 30, 40, 50, 60, 70, 80, 90, 100]);
        assert_eq!(evaluation_steps(3, 0.1), vec![1, 2, 3]);
        assert!(evaluation_steps(7, 0.3).len() <= 4);
        assert_eq!(*evaluation_steps(7, 0.3).last().unwrap(), 7);
    }

    #[test]
    fn adamw_first_step_and_decay_exemption() {
        let mut p = ParameterSet::new();
        p.insert("w.weight", Tensor::row(vec![1.0, -2.0])).unwrap();
        p.insert("w.bias", Tensor::row(vec![1.0])).unwrap();
        let mut g = p.zeros_like();
        g.get_mut("w.weight").unwrap().data_mut().copy_from_slice(&[0.5, -0.1]);
        let mut opt = AdamW::new(&p, 0.1);
        opt.update(&mut p, &g, 0.01);
        // first step moves each coordinate by ≈ lr against the gradient sign
        let w = p.expect("w.weight").data();
        assert!((w[0] - (1.0 - 0.001 - 0.01)).abs() < 1e-6);
        assert!((w[1] - (-2.0 + 0.002 + 0.01)).abs() < 1e-6);
        assert_eq!(p.expect("w.bias").data(), &[1.0]);
    }

    fn small_run(config: &TrainingConfig) -> TrainOutcome {
        let mut spec = SyntheticSpec::new(6, 8, 0.2, 2);
        spec.dev_ads = 3;
        spec.test_ads = 1;
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        let data = TrainingData {
            taxonomy: &corpus.taxonomy,
            pairs: &corpus.pairs,
            dev: &corpus.dev,
        };
        let vocab = corpus_vocabulary(&data);
        let mut enc_config = EncoderConfig::new(vocab.len(), 1);
        enc_config.dim = 16;
        enc_config.ff_dim = 32;
        enc_config.max_seq_len = 32;
        train(Encoder::init(enc_config, vocab).unwrap(), config, &data).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_bounded() {
        let config = TrainingConfig {
            batch_size: 8,
            micro_batch: 3,
            learning_rate: 1e-3,
            seed: 4,
            ..TrainingConfig::default()
        };
        let a = small_run(&config);
        let b = small_run(&config);
        assert_eq!(a, b);
        assert!(a.history.len() <= 10);
        assert!(a.steps_taken <= 7);
        assert_eq!(a.checkpoint().unwrap().to_bytes().unwrap(), b.checkpoint().unwrap().to_bytes().unwrap());
        let best = a.history.iter().map(|p| p.rp_at_5).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.history.iter().find(|p| p.step == a.best_step).unwrap().rp_at_5, best);
    }

    #[test]
    fn ablation_switches_are_validated() {
        let mut spec = SyntheticSpec::new(3, 2, 0.0, 1);
        spec.dev_ads = 1;
        let mut corpus = generate_synthetic_corpus(&spec).unwrap();
        let stripped: Vec<_> = corpus
            .taxonomy
            .skills()
            .iter()
            .cloned()
            .map(|mut s| {
                s.synonyms.clear();
                s
            })
            .collect();
        corpus.taxonomy = Taxonomy::new(stripped).unwrap();
        let data = TrainingData {
            taxonomy: &corpus.taxonomy,
            pairs: &corpus.pairs,
            dev: &corpus.dev,
        };
        let config = TrainingConfig {
            ablations: Ablations {
                with_synonyms: true,
                ..Ablations::default()
            },
            ..TrainingConfig::default()
        };
        let vocab = corpus_vocabulary(&data);
        let enc = Encoder::init(EncoderConfig::new(vocab.len(), 0), vocab).unwrap();
        assert!(train(enc, &config, &data).is_err());
        let bad = TrainingConfig {
            warmup_fraction: 0.0,
            ..TrainingConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
