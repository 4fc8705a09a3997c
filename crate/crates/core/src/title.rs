//! Job-title normalization with an asymmetric bi-encoder.
//!
//! Titles and the comma-joined skill lists of their ads share the base
//! encoder; each side then has its own linear projection of the mean-pooled
//! token vectors. Training contrasts titles with skill sets. At query time
//! both the query and the reference titles go through the title projection.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{cosine, Tensor};
use crate::data::TitlePairRecord;
use crate::encoder::{Encoder, TokenEncoder, INIT_BOUND};
use crate::error::{Error, Result};
use crate::evaluation::{mrr, recall_at_k};
use crate::objective::{cached_gradient_step, ContrastiveBatch, LossOptions, Side, DEFAULT_MICRO_BATCH, DEFAULT_SCALE};
use crate::text::Vocabulary;
use crate::training::{AdamW, Checkpoint, DevPoint, LinearSchedule, ModelKind};

pub const DEFAULT_SKILL_CAP: usize = 25;
/// Ads with fewer unique skills are dropped from training.
pub const MIN_UNIQUE_SKILLS: usize = 5;
pub const TITLE_PROJECTION: &str = "title_proj.weight";
pub const SKILLSET_PROJECTION: &str = "skillset_proj.weight";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TitleSkillPair {
    pub title: String,
    pub skills: Vec<String>,
    pub text: String,
}

/// Deduplicates, shuffles and caps `skills`, then joins them with ", ".
pub fn build_pair(title: &str, skills: &[String], cap: usize, rng: &mut ChaCha8Rng) -> Result<TitleSkillPair> {
    let mut seen = HashSet::new();
    let mut unique: Vec<String> = skills
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty() && seen.insert(*s))
        .map(str::to_string)
        .collect();
    if unique.len() < MIN_UNIQUE_SKILLS {
        return Err(Error::Invalid(format!(
            "title {title:?} has {} unique skills, need {MIN_UNIQUE_SKILLS}",
            unique.len()
        )));
    }
    unique.shuffle(rng);
    unique.truncate(cap);
    Ok(TitleSkillPair {
        title: title.to_string(),
        text: unique.join(", "),
        skills: unique,
    })
}

/// Whether the two sides have their own projections or share one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    #[default]
    Asymmetric,
    Tied,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TitleModel {
    pub encoder: Encoder,
    pub projection: Projection,
}

/// `v · W` for a `d×d'` matrix.
fn project(v: &[f64], w: &Tensor) -> Vec<f64> {
    let (d, out) = w.dims();
    debug_assert_eq!(v.len(), d);
    let mut y = vec![0.0; out];
    for (i, &vi) in v.iter().enumerate() {
        for (yj, wij) in y.iter_mut().zip(w.row_slice(i)) {
            *yj += vi * wij;
        }
    }
    y
}

impl TitleModel {
    /// Adds projection heads of width `d_out` to `encoder`, drawn from `seed`.
    pub fn init(mut encoder: Encoder, d_out: usize, projection: Projection, seed: u64) -> Result<Self> {
        if d_out == 0 {
            return Err(Error::Config("projection width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = encoder.config.dim;
        encoder
            .params
            .insert(TITLE_PROJECTION, Tensor::uniform(&[d, d_out], INIT_BOUND, &mut rng))?;
        if projection == Projection::Asymmetric {
            encoder
                .params
                .insert(SKILLSET_PROJECTION, Tensor::uniform(&[d, d_out], INIT_BOUND, &mut rng))?;
        }
        Ok(Self { encoder, projection })
    }

    pub fn skillset_param(&self) -> &'static str {
        match self.projection {
            Projection::Asymmetric => SKILLSET_PROJECTION,
            Projection::Tied => TITLE_PROJECTION,
        }
    }

    pub fn d_out(&self) -> usize {
        self.encoder.params.expect(TITLE_PROJECTION).cols()
    }

    fn encode_side(&self, text: &str, param: &str) -> Result<Vec<f64>> {
        let mean = self.encoder.encode_text(text)?.mean();
        Ok(project(&mean, self.encoder.params.expect(param)))
    }

    pub fn encode_title(&self, title: &str) -> Result<Vec<f64>> {
        self.encode_side(title, TITLE_PROJECTION)
    }

    pub fn encode_skillset(&self, text: &str) -> Result<Vec<f64>> {
        self.encode_side(text, self.skillset_param())
    }

    pub fn checkpoint(&self, config: &TitleTrainingConfig, step: usize) -> Result<Checkpoint> {
        Checkpoint::new(ModelKind::Title, &self.encoder, serde_json::to_value(config)?, step, Vec::<DevPoint>::new())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::Title)?;
        let config: TitleTrainingConfig = serde_json::from_value(ck.manifest.training.clone())?;
        let encoder = ck.encoder();
        let model = Self {
            encoder,
            projection: config.projection,
        };
        for name in [TITLE_PROJECTION, model.skillset_param()] {
            if model.encoder.params.get(name).is_none() {
                return Err(Error::Checkpoint(format!("title checkpoint lacks {name}")));
            }
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TitleTrainingConfig {
    pub batch_size: usize,
    pub micro_batch: usize,
    pub learning_rate: f64,
    pub scale: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub projection: Projection,
    /// Projection width; 1.5 × the encoder width when absent.
    pub d_out: Option<usize>,
    pub skill_cap: usize,
}

impl Default for TitleTrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            micro_batch: DEFAULT_MICRO_BATCH,
            learning_rate: 5e-4,
            scale: DEFAULT_SCALE,
            weight_decay: 0.01,
            seed: 0,
            projection: Projection::Asymmetric,
            d_out: None,
            skill_cap: DEFAULT_SKILL_CAP,
        }
    }
}

impl TitleTrainingConfig {
    pub fn d_out_for(&self, dim: usize) -> usize {
        self.d_out.unwrap_or(dim * 3 / 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TitleTrainOutcome {
    pub model: TitleModel,
    pub steps: usize,
    /// Loss of each step, in order.
    pub losses: Vec<f64>,
    /// Ads dropped for having too few unique skills.
    pub dropped: usize,
}

/// Vocabulary over titles and skill names, plus the list separator.
pub fn title_vocabulary(records: &[TitlePairRecord]) -> Vocabulary {
    let mut texts: Vec<&str> = vec![","];
    for r in records {
        texts.push(&r.title);
        texts.extend(r.skills.iter().map(String::as_str));
    }
    Vocabulary::build(texts, 1)
}

/// One epoch of symmetric InfoNCE between title and skill-set vectors with
/// linear decay and no warmup.
pub fn train_title_model(
    records: &[TitlePairRecord],
    encoder: Encoder,
    config: &TitleTrainingConfig,
) -> Result<TitleTrainOutcome> {
    if config.batch_size == 0 || config.micro_batch == 0 || config.skill_cap == 0 {
        return Err(Error::Config("batch size, micro-batch and skill cap must be positive".into()));
    }
    if !(config.learning_rate > 0.0) || !(config.scale > 0.0) || !(config.weight_decay >= 0.0) {
        return Err(Error::Config("learning rate and scale must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d_out = config.d_out_for(encoder.config.dim);
    let mut model = TitleModel::init(encoder, d_out, config.projection, config.seed)?;

    let mut pairs = Vec::with_capacity(records.len());
    let mut dropped = 0;
    for r in records {
        match build_pair(&r.title, &r.skills, config.skill_cap, &mut rng) {
            Ok(p) => pairs.push(p),
            Err(_) => dropped += 1,
        }
    }
    if pairs.is_empty() {
        return Err(Error::Invalid("no title pair has enough unique skills".into()));
    }
    pairs.shuffle(&mut rng);
    let batches: Vec<&[TitleSkillPair]> = pairs.chunks(config.batch_size).collect();
    let schedule = LinearSchedule {
        peak: config.learning_rate,
        warmup: 0,
        total: batches.len(),
    };
    let opts = LossOptions {
        scale: config.scale,
        asymmetric: false,
        mask_duplicates: false,
    };
    let mut optimizer = AdamW::new(&model.encoder.params, config.weight_decay);
    let mut losses = Vec::with_capacity(batches.len());
    for (t, chunk) in batches.iter().enumerate() {
        let batch = ContrastiveBatch {
            left: chunk
                .iter()
                .map(|p| model.encoder.tokenize(&p.title))
                .collect::<Result<_>>()?,
            right: chunk
                .iter()
                .map(|p| model.encoder.tokenize(&p.text))
                .collect::<Result<_>>()?,
            left_side: Side::Projected(TITLE_PROJECTION.into()),
            right_side: Side::Projected(model.skillset_param().into()),
            labels: (0..chunk.len()).collect(),
        };
        let step = cached_gradient_step(&model.encoder.params, &model.encoder.config, &batch, config.micro_batch, &opts)?;
        if !step.loss.is_finite() || !step.grads.is_finite() {
            return Err(Error::Diverged {
                step: t + 1,
                loss: step.loss,
            });
        }
        optimizer.update(&mut model.encoder.params, &step.grads, schedule.at(t));
        if !model.encoder.params.is_finite() {
            return Err(Error::Diverged {
                step: t + 1,
                loss: step.loss,
            });
        }
        losses.push(step.loss);
    }
    Ok(TitleTrainOutcome {
        model,
        steps: batches.len(),
        losses,
        dropped,
    })
}

/// Reference titles with their title-side vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceIndex {
    titles: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl ReferenceIndex {
    pub fn build(model: &TitleModel, references: &[String]) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Invalid("no reference titles".into()));
        }
        Ok(Self {
            titles: references.to_vec(),
            vectors: references
                .iter()
                .map(|r| model.encode_title(r))
                .collect::<Result<_>>()?,
        })
    }

    pub fn titles(&self) -> &[String] {
        &self.titles
    }

    /// `(reference index, cosine)` by decreasing cosine; ties go to the
    /// smaller title string, then the smaller index.
    pub fn rank(&self, model: &TitleModel, query: &str) -> Result<Vec<(usize, f64)>> {
        let q = model.encode_title(query)?;
        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| Ok((i, cosine(&q, v)?)))
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.titles[a.0].cmp(&self.titles[b.0]))
                .then_with(|| a.0.cmp(&b.0))
        });
        Ok(scored)
    }
}

/// Ranks `references` for `query`.
pub fn normalize(query: &str, references: &[String], model: &TitleModel) -> Result<Vec<(String, f64)>> {
    let index = ReferenceIndex::build(model, references)?;
    Ok(index
        .rank(model, query)?
        .into_iter()
        .map(|(i, c)| (references[i].clone(), c))
        .collect())
}

/// Held-out title queries with the index of their normalized reference title.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TitleBenchmark {
    pub references: Vec<String>,
    /// `(query, index into references)`.
    pub queries: Vec<(String, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TitleMetrics {
    pub mrr: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
}

pub fn title_eval(benchmark: &TitleBenchmark, model: &TitleModel) -> Result<TitleMetrics> {
    if let Some((q, g)) = benchmark.queries.iter().find(|(_, g)| *g >= benchmark.references.len()) {
        return Err(Error::Invalid(format!("query {q:?} has gold index {g} outside the references")));
    }
    let index = ReferenceIndex::build(model, &benchmark.references)?;
    let mut ranked = Vec::with_capacity(benchmark.queries.len());
    let mut gold = Vec::with_capacity(benchmark.queries.len());
    for (q, g) in &benchmark.queries {
        let order = index.rank(model, q)?;
        ranked.push(order.into_iter().map(|(i, _)| i.to_string()).collect::<Vec<_>>());
        gold.push(BTreeSet::from([g.to_string()]));
    }
    Ok(TitleMetrics {
        mrr: mrr(&ranked, &gold)?,
        recall_at_5: recall_at_k(&ranked, &gold, 5)?,
        recall_at_10: recall_at_k(&ranked, &gold, 10)?,
    })
}

/// Orders two ranked references the way [`ReferenceIndex::rank`] does.
pub fn reference_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_title_corpus, TitleCorpusSpec};
    use crate::encoder::EncoderConfig;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("skill{i}")).collect()
    }

    #[test]
    fn pair_building() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let five = build_pair("t", &names(5), 25, &mut rng).unwrap();
        let mut got = five.skills.clone();
        got.sort();
        let mut want = names(5);
        want.sort();
        assert_eq!(got, want);
        assert_eq!(five.text, five.skills.join(", "));

        let thirty = build_pair("t", &names(30), 25, &mut rng).unwrap();
        assert_eq!(thirty.skills.len(), 25);
        assert!(thirty.skills.iter().all(|s| names(30).contains(s)));

        let mut dup = names(4);
        dup.push("skill0".into());
        assert!(build_pair("t", &dup, 25, &mut rng).is_err());

        let a = build_pair("t", &names(12), 25, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_pair("t", &names(12), 25, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    fn small_model(projection: Projection) -> TitleModel {
        let records = vec![TitlePairRecord {
            title: "data engineer".into(),
            skills: names(6),
        }];
        let vocab = title_vocabulary(&records);
        let mut cfg = EncoderConfig::new(vocab.len(), 3);
        cfg.dim = 8;
        cfg.ff_dim = 16;
        cfg.max_seq_len = 32;
        let enc = Encoder::init(cfg, vocab).unwrap();
        TitleModel::init(enc, 12, projection, 4).unwrap()
    }

    #[test]
    fn projections_shape_and_asymmetry() {
        let m = small_model(Projection::Asymmetric);
        assert_eq!(m.d_out(), 12);
        for text in ["data", "data engineer skill1 skill2 skill3"] {
            assert_eq!(m.encode_title(text).unwrap().len(), 12);
        }
        assert_ne!(m.encode_title("data engineer").unwrap(), m.encode_skillset("data engineer").unwrap());
        let tied = small_model(Projection::Tied);
        assert_eq!(tied.encode_title("data engineer").unwrap(), tied.encode_skillset("data engineer").unwrap());
    }

    #[test]
    fn identity_extended_projections_agree() {
        let mut m = small_model(Projection::Asymmetric);
        let eye = Tensor::new(vec![8, 12], (0..96).map(|k| f64::from(u8::from(k / 12 == k % 12))).collect()).unwrap();
        *m.encoder.params.get_mut(TITLE_PROJECTION).unwrap() = eye.clone();
        *m.encoder.params.get_mut(SKILLSET_PROJECTION).unwrap() = eye;
        let t = m.encode_title("engineer skill3").unwrap();
        assert_eq!(t, m.encode_skillset("engineer skill3").unwrap());
        assert_eq!(&t[8..], &[0.0; 4]);
    }

    #[test]
    fn ranking_rules() {
        let m = small_model(Projection::Asymmetric);
        let refs: Vec<String> = vec!["data engineer".into(), "skill1 skill2".into(), "engineer".into()];
        let ranked = normalize("engineer", &refs, &m).unwrap();
        assert_eq!(ranked[0].0, "engineer");
        assert!((ranked[0].1 - 1.0).abs() < 1e-12);
        let mut reversed = refs.clone();
        reversed.reverse();
        assert_eq!(normalize("engineer", &reversed, &m).unwrap(), ranked);
        assert!(ranked.windows(2).all(|w| reference_order(&w[0], &w[1]) != Ordering::Greater));
        assert!(normalize("engineer", &[], &m).is_err());
    }

    #[test]
    fn recall_boundary_at_rank_six() {
        let ranked = vec![(0..10).map(|i| i.to_string()).collect::<Vec<_>>()];
        let gold = vec![BTreeSet::from(["5".to_string()])];
        assert_eq!(recall_at_k(&ranked, &gold, 5).unwrap(), 0.0);
        assert_eq!(recall_at_k(&ranked, &gold, 10).unwrap(), 1.0);
    }

    fn corpus_model(config: &TitleTrainingConfig, records: &[TitlePairRecord]) -> TitleTrainOutcome {
        let vocab = title_vocabulary(records);
        let mut enc = EncoderConfig::new(vocab.len(), config.seed);
        enc.dim = 16;
        enc.ff_dim = 32;
        enc.max_seq_len = 40;
        train_title_model(records, Encoder::init(enc, vocab).unwrap(), config).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_reloads() {
        let corpus = generate_title_corpus(&TitleCorpusSpec::new(4, 10, 1)).unwrap();
        let config = TitleTrainingConfig {
            batch_size: 16,
            micro_batch: 5,
            seed: 2,
            ..TitleTrainingConfig::default()
        };
        let a = corpus_model(&config, &corpus.train);
        let b = corpus_model(&config, &corpus.train);
        assert_eq!(a, b);
        let bytes = |o: &TitleTrainOutcome| o.model.checkpoint(&config, o.steps).unwrap().to_bytes().unwrap();
        assert_eq!(bytes(&a), bytes(&b));
        let back = TitleModel::from_checkpoint(&Checkpoint::from_bytes(&bytes(&a)).unwrap()).unwrap();
        assert_eq!(back, a.model);
    }

    #[test]
    fn singleton_batches_only_decay() {
        let corpus = generate_title_corpus(&TitleCorpusSpec::new(2, 4, 5)).unwrap();
        let records = &corpus.train[..2];
        let config = TitleTrainingConfig {
            batch_size: 1,
            ..TitleTrainingConfig::default()
        };
        let out = corpus_model(&config, records);
        assert!(out.losses.iter().all(|&l| l == 0.0));
        let vocab = title_vocabulary(records);
        let mut enc = EncoderConfig::new(vocab.len(), 0);
        enc.dim = 16;
        enc.ff_dim = 32;
        enc.max_seq_len = 40;
        let fresh = TitleModel::init(Encoder::init(enc, vocab).unwrap(), 24, Projection::Asymmetric, 0).unwrap();
        // lr schedule 5e-4 then 2.5e-4, each shrinking decayed weights by lr·wd
        let factor = (1.0 - 5e-4 * 0.01) * (1.0 - 2.5e-4 * 0.01);
        for (name, before) in fresh.encoder.params.iter() {
            let after = out.model.encoder.params.expect(name);
            let expected = if crate::encoder::is_no_decay(name) { 1.0 } else { factor };
            for (a, b) in after.data().iter().zip(before.data()) {
                assert!((a - b * expected).abs() <= 1e-15 * b.abs().max(1.0), "{name}");
            }
        }
    }

    /// Desk-scale first-batch loss at initialization: close to ln B, within
    /// 15% above it because token identity survives the √d embedding scale.
    #[test]
    fn initial_loss_is_near_uniform() {
        use crate::objective::{batch_scores, symmetric_infonce};
        for seed in 0..3 {
            let corpus = generate_title_corpus(&TitleCorpusSpec::new(20, 50, seed + 11)).unwrap();
            let vocab = title_vocabulary(&corpus.train);
            let enc = Encoder::init(EncoderConfig::new(vocab.len(), seed), vocab).unwrap();
            let model = TitleModel::init(enc, 96, Projection::Asymmetric, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs: Vec<TitleSkillPair> = corpus.train[..128]
                .iter()
                .map(|r| build_pair(&r.title, &r.skills, DEFAULT_SKILL_CAP, &mut rng).unwrap())
                .collect();
            let tok = |t: &str| model.encoder.tokenize(t).unwrap();
            let batch = ContrastiveBatch {
                left: pairs.iter().map(|p| tok(&p.title)).collect(),
                right: pairs.iter().map(|p| tok(&p.text)).collect(),
                left_side: Side::Projected(TITLE_PROJECTION.into()),
                right_side: Side::Projected(SKILLSET_PROJECTION.into()),
                labels: (0..128).collect(),
            };
            let scores = batch_scores(&model.encoder.params, &model.encoder.config, &batch).unwrap();
            let loss = symmetric_infonce(&scores, DEFAULT_SCALE).unwrap();
            let ln_b = 128f64.ln();
            assert!(loss >= 0.95 * ln_b && loss < 1.15 * ln_b, "seed {seed}: {loss} vs {ln_b}");
        }
    }
}
