//! Ranking a taxonomy against a sentence, thresholding, redundancy filtering
//! and threshold calibration.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::encoder::{TokenEmbeddings, TokenEncoder};
use crate::error::{Error, Result};
use crate::evaluation::{cluster_counts, pool_prf, redundancy_counts, AnnotatedAd, Cluster, Pooling, RedundancyCounts};
use crate::matching::{context_match, mean_pool_match, MatchResult};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skill {
    pub id: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub synonyms: Vec<String>,
}

/// Closed label universe with an id index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    skills: Vec<Skill>,
    index: HashMap<String, usize>,
}

impl Taxonomy {
    pub fn new(skills: Vec<Skill>) -> Result<Self> {
        let mut index = HashMap::with_capacity(skills.len());
        for (i, s) in skills.iter().enumerate() {
            if s.id.is_empty() {
                return Err(Error::Invalid("skill with empty id".into()));
            }
            if s.name.trim().is_empty() {
                return Err(Error::Invalid(format!("skill {} has an empty name", s.id)));
            }
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate skill id {}", s.id)));
            }
        }
        Ok(Self { skills, index })
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Skill> {
        self.index.get(id).map(|&i| &self.skills[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn skills(&self) -> &[Skill] {
        &self.skills
    }

    pub fn has_synonyms(&self) -> bool {
        self.skills.iter().any(|s| !s.synonyms.is_empty())
    }
}

/// Skill vectors computed once per model and reused across sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillIndex {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl SkillIndex {
    pub fn build<E: TokenEncoder + ?Sized>(encoder: &E, taxonomy: &Taxonomy) -> Result<Self> {
        if taxonomy.is_empty() {
            return Err(Error::Invalid("empty taxonomy".into()));
        }
        let names: Vec<&str> = taxonomy.skills().iter().map(|s| s.name.as_str()).collect();
        let vectors = encoder
            .encode_texts(&names)?
            .into_iter()
            .map(|e| e.mean())
            .collect();
        Ok(Self {
            ids: taxonomy.skills().iter().map(|s| s.id.clone()).collect(),
            vectors,
        })
    }

    /// Index over explicit vectors, mainly for tests and stubs.
    pub fn from_vectors(entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Invalid("empty skill index".into()));
        }
        let (ids, vectors) = entries.into_iter().unzip();
        Ok(Self { ids, vectors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, id: &str) -> Option<&[f64]> {
        self.ids.iter().position(|i| i == id).map(|p| self.vectors[p].as_slice())
    }
}

/// One scored skill with the match details kept for filtering and display.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedPrediction {
    pub skill_id: String,
    pub score: f64,
    pub detail: MatchResult,
}

/// Score descending, then skill id ascending.
pub fn prediction_order(a: &RankedPrediction, b: &RankedPrediction) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.skill_id.cmp(&b.skill_id))
}

/// How a sentence is compared with a skill vector when ranking.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    #[default]
    ContextMatch,
    /// Cosine with the mean sentence vector. Match details (token dots,
    /// attention) are still filled in for filtering and display.
    MeanPool,
}

pub fn rank_embeddings_with(
    sentence: &TokenEmbeddings,
    index: &SkillIndex,
    scorer: Scorer,
) -> Result<Vec<RankedPrediction>> {
    let mut out = Vec::with_capacity(index.len());
    for (id, v) in index.ids.iter().zip(&index.vectors) {
        let detail = context_match(sentence, v)?;
        let score = match scorer {
            Scorer::ContextMatch => detail.score,
            Scorer::MeanPool => mean_pool_match(sentence, v)?,
        };
        out.push(RankedPrediction {
            skill_id: id.clone(),
            score,
            detail,
        });
    }
    out.sort_by(prediction_order);
    Ok(out)
}

pub fn rank_embeddings(sentence: &TokenEmbeddings, index: &SkillIndex) -> Result<Vec<RankedPrediction>> {
    rank_embeddings_with(sentence, index, Scorer::ContextMatch)
}

/// Every skill in the index, best match first.
pub fn rank_skills<E: TokenEncoder + ?Sized>(
    sentence: &str,
    encoder: &E,
    index: &SkillIndex,
) -> Result<Vec<RankedPrediction>> {
    rank_embeddings(&encoder.encode_text(sentence)?, index)
}

pub fn rank_skills_with<E: TokenEncoder + ?Sized>(
    sentence: &str,
    encoder: &E,
    index: &SkillIndex,
    scorer: Scorer,
) -> Result<Vec<RankedPrediction>> {
    rank_embeddings_with(&encoder.encode_text(sentence)?, index, scorer)
}

/// Keeps the candidates that hold the largest token dot product at one or
/// more non-template positions; exact ties go to the smaller skill id.
pub fn redundancy_filter(candidates: &[RankedPrediction]) -> Result<Vec<RankedPrediction>> {
    let Some(first) = candidates.first() else {
        return Ok(Vec::new());
    };
    let n = first.detail.token_dots.len();
    let template = &first.detail.template;
    if candidates
        .iter()
        .any(|c| c.detail.token_dots.len() != n || c.detail.template.len() != n)
    {
        return Err(Error::Shape("candidates disagree on token count".into()));
    }
    let content: Vec<usize> = (0..n).filter(|&j| !template[j]).collect();
    if content.is_empty() {
        return Err(Error::Invalid("sentence has no non-template tokens".into()));
    }
    let mut winners = vec![false; candidates.len()];
    for &j in &content {
        let mut best = 0;
        for (c, cand) in candidates.iter().enumerate().skip(1) {
            let (d, top) = (cand.detail.token_dots[j], candidates[best].detail.token_dots[j]);
            if d > top || (d == top && cand.skill_id < candidates[best].skill_id) {
                best = c;
            }
        }
        winners[best] = true;
    }
    Ok(candidates
        .iter()
        .zip(winners)
        .filter(|(_, w)| *w)
        .map(|(c, _)| c.clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub tau: f64,
    pub filter: bool,
}

/// Applies the threshold and, when enabled, the redundancy filter to an
/// already sorted ranking.
pub fn select(ranked: &[RankedPrediction], config: &ExtractionConfig) -> Result<Vec<RankedPrediction>> {
    if !config.tau.is_finite() {
        return Err(Error::Config(format!("threshold {} is not finite", config.tau)));
    }
    let above: Vec<RankedPrediction> = ranked.iter().filter(|p| p.score >= config.tau).cloned().collect();
    if config.filter {
        redundancy_filter(&above)
    } else {
        Ok(above)
    }
}

/// Skill ids (with scores) extracted from one sentence.
pub fn extract<E: TokenEncoder + ?Sized>(
    sentence: &str,
    encoder: &E,
    index: &SkillIndex,
    config: &ExtractionConfig,
) -> Result<Vec<(String, f64)>> {
    let ranked = rank_skills(sentence, encoder, index)?;
    Ok(select(&ranked, config)?
        .into_iter()
        .map(|p| (p.skill_id, p.score))
        .collect())
}

/// Evenly spaced thresholds `start + (end − start)·k/steps`, `k = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self {
            start: 0.0,
            end: 1.0,
            steps: 100,
        }
    }
}

impl ThresholdGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        if self.steps == 0 || !(self.start.is_finite() && self.end.is_finite()) || self.end < self.start {
            return Err(Error::Config(format!("invalid threshold grid {self:?}")));
        }
        Ok((0..=self.steps)
            .map(|k| self.start + (self.end - self.start) * k as f64 / self.steps as f64)
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub redundancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tau: f64,
    pub f1: f64,
    pub redundancy: f64,
    pub grid: Vec<CalibrationRow>,
}

/// A ranked sentence with its gold clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSample {
    pub ranked: Vec<RankedPrediction>,
    pub clusters: Vec<Cluster>,
}

/// Grid search for the threshold with the best corpus cluster F1; ties go to
/// the larger threshold.
pub fn calibrate_from_rankings(
    samples: &[CalibrationSample],
    filter: bool,
    grid: &ThresholdGrid,
    pooling: Pooling,
) -> Result<Calibration> {
    if samples.iter().all(|s| s.clusters.is_empty()) {
        return Err(Error::Invalid("development set has no gold clusters".into()));
    }
    let mut rows = Vec::new();
    for tau in grid.values()? {
        let config = ExtractionConfig { tau, filter };
        let mut per_sentence = Vec::with_capacity(samples.len());
        let mut redundancy = RedundancyCounts::default();
        for s in samples {
            let chosen: BTreeSet<String> = select(&s.ranked, &config)?.into_iter().map(|p| p.skill_id).collect();
            redundancy.add(redundancy_counts(&chosen, &s.clusters));
            per_sentence.push(cluster_counts(&chosen, &s.clusters));
        }
        let prf = pool_prf(&per_sentence, pooling);
        rows.push(CalibrationRow {
            tau,
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            redundancy: redundancy.fraction(),
        });
    }
    let mut best = rows[0];
    for row in &rows[1..] {
        if row.f1 >= best.f1 {
            best = *row;
        }
    }
    Ok(Calibration {
        tau: best.tau,
        f1: best.f1,
        redundancy: best.redundancy,
        grid: rows,
    })
}

/// Ranks every sentence of the annotated ads.
pub fn calibration_samples<E: TokenEncoder + ?Sized>(
    ads: &[AnnotatedAd],
    encoder: &E,
    index: &SkillIndex,
    scorer: Scorer,
) -> Result<Vec<CalibrationSample>> {
    let mut out = Vec::new();
    for ad in ads {
        for s in &ad.sentences {
            out.push(CalibrationSample {
                ranked: rank_skills_with(&s.text, encoder, index, scorer)?,
                clusters: s.clusters.clone(),
            });
        }
    }
    Ok(out)
}

/// Threshold calibration on development annotations.
pub fn calibrate_threshold<E: TokenEncoder + ?Sized>(
    dev: &[AnnotatedAd],
    encoder: &E,
    index: &SkillIndex,
    scorer: Scorer,
    filter: bool,
) -> Result<Calibration> {
    if dev.is_empty() {
        return Err(Error::Invalid("empty development set".into()));
    }
    let samples = calibration_samples(dev, encoder, index, scorer)?;
    calibrate_from_rankings(&samples, filter, &ThresholdGrid::default(), Pooling::Micro)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::evaluation::{corpus_prf, corpus_redundancy};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Candidate with the given score and token dots; the first and last
    /// positions are template markers.
    pub(crate) fn candidate(id: &str, score: f64, content_dots: &[f64]) -> RankedPrediction {
        let mut dots = vec![100.0];
        dots.extend_from_slice(content_dots);
        dots.push(100.0);
        let n = dots.len();
        let mut template = vec![false; n];
        template[0] = true;
        template[n - 1] = true;
        RankedPrediction {
            skill_id: id.into(),
            score,
            detail: MatchResult {
                score,
                alpha: vec![1.0 / n as f64; n],
                token_cosines: vec![score; n],
                token_dots: dots,
                template,
            },
        }
    }

    fn ids(p: &[RankedPrediction]) -> Vec<&str> {
        p.iter().map(|c| c.skill_id.as_str()).collect()
    }

    #[test]
    fn filter_examples() {
        let a = candidate("A", 0.9, &[5.0, 1.0]);
        let b = candidate("B", 0.8, &[1.0, 5.0]);
        let c = candidate("C", 0.7, &[4.0, 4.0]);
        assert_eq!(ids(&redundancy_filter(&[a.clone(), b, c]).unwrap()), ["A", "B"]);
        assert_eq!(ids(&redundancy_filter(std::slice::from_ref(&a)).unwrap()), ["A"]);

        let x = candidate("x2", 0.5, &[2.0, 3.0]);
        let y = candidate("x1", 0.5, &[2.0, 3.0]);
        assert_eq!(ids(&redundancy_filter(&[x, y]).unwrap()), ["x1"]);
        assert!(redundancy_filter(&[]).unwrap().is_empty());
    }

    #[test]
    fn filter_needs_content_tokens() {
        let mut c = candidate("A", 0.5, &[]);
        c.detail.template = vec![true, true];
        assert!(redundancy_filter(&[c]).is_err());
        let short = candidate("B", 0.5, &[1.0]);
        let long = candidate("C", 0.5, &[1.0, 2.0]);
        assert!(redundancy_filter(&[short, long]).is_err());
    }

    struct Stub;

    impl TokenEncoder for Stub {
        fn dim(&self) -> usize {
            2
        }

        fn encode_text(&self, text: &str) -> Result<TokenEmbeddings> {
            let row = match text {
                "orthogonal" => vec![0.0, 1.0],
                _ => vec![1.0, 0.0],
            };
            let n = text.split_whitespace().count().max(1);
            TokenEmbeddings::from_rows(&vec![row; n])
        }
    }

    fn taxonomy(entries: &[(&str, &str)]) -> Taxonomy {
        Taxonomy::new(
            entries
                .iter()
                .map(|(id, name)| Skill {
                    id: id.to_string(),
                    name: name.to_string(),
                    description: None,
                    synonyms: vec![],
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn ranking_with_stub() {
        let tax = taxonomy(&[("B", "orthogonal"), ("A", "parallel")]);
        let index = SkillIndex::build(&Stub, &tax).unwrap();
        let ranked = rank_skills("some words here", &Stub, &index).unwrap();
        assert_eq!(ids(&ranked), ["A", "B"]);
        assert_eq!(ranked[0].score, 1.0);
        assert_eq!(ranked[1].score, 0.0);

        let single = SkillIndex::build(&Stub, &taxonomy(&[("A", "parallel")])).unwrap();
        assert_eq!(rank_skills("x", &Stub, &single).unwrap().len(), 1);

        let tied = SkillIndex::build(&Stub, &taxonomy(&[("b", "same"), ("a", "same")])).unwrap();
        assert_eq!(ids(&rank_skills("x", &Stub, &tied).unwrap()), ["a", "b"]);
    }

    #[test]
    fn ranking_ignores_taxonomy_order() {
        let forward = taxonomy(&[("A", "parallel"), ("B", "orthogonal"), ("C", "other")]);
        let backward = taxonomy(&[("C", "other"), ("B", "orthogonal"), ("A", "parallel")]);
        let f = rank_skills("w", &Stub, &SkillIndex::build(&Stub, &forward).unwrap()).unwrap();
        let b = rank_skills("w", &Stub, &SkillIndex::build(&Stub, &backward).unwrap()).unwrap();
        assert_eq!(f, b);
    }

    #[test]
    fn extreme_thresholds() {
        let tax = taxonomy(&[("A", "parallel"), ("B", "orthogonal")]);
        let index = SkillIndex::build(&Stub, &tax).unwrap();
        let high = ExtractionConfig { tau: 1.01, filter: true };
        assert!(extract("w", &Stub, &index, &high).unwrap().is_empty());
        let low = ExtractionConfig { tau: -1.01, filter: false };
        assert_eq!(extract("w", &Stub, &index, &low).unwrap().len(), 2);
        assert!(select(&[], &ExtractionConfig { tau: f64::NAN, filter: false }).is_err());
    }

    #[test]
    fn taxonomy_validation() {
        let dup = vec![
            Skill { id: "a".into(), name: "x".into(), description: None, synonyms: vec![] },
            Skill { id: "a".into(), name: "y".into(), description: None, synonyms: vec![] },
        ];
        assert!(Taxonomy::new(dup).is_err());
        let blank = vec![Skill { id: "a".into(), name: " ".into(), description: None, synonyms: vec![] }];
        assert!(Taxonomy::new(blank).is_err());
    }

    fn set(ids: &[&str]) -> Cluster {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn calibration_separable_fixture() {
        let samples = vec![
            CalibrationSample {
                ranked: vec![candidate("a", 0.8, &[3.0]), candidate("x", 0.3, &[1.0])],
                clusters: vec![set(&["a"])],
            },
            CalibrationSample {
                ranked: vec![candidate("b", 0.6, &[2.0]), candidate("y", 0.45, &[1.0])],
                clusters: vec![set(&["b"])],
            },
        ];
        let cal = calibrate_from_rankings(&samples, false, &ThresholdGrid::default(), Pooling::Micro).unwrap();
        assert_eq!(cal.f1, 1.0);
        assert_eq!(cal.tau, 0.6);
        assert!(cal.tau > 0.45);
        assert_eq!(cal.grid.len(), 101);
    }

    #[test]
    fn calibration_without_predictions_prefers_largest_tau() {
        let samples = vec![CalibrationSample {
            ranked: vec![candidate("x", -0.5, &[1.0])],
            clusters: vec![set(&["a"])],
        }];
        let cal = calibrate_from_rankings(&samples, true, &ThresholdGrid::default(), Pooling::Micro).unwrap();
        assert_eq!(cal.f1, 0.0);
        assert_eq!(cal.tau, 1.0);
        let none = vec![CalibrationSample { ranked: vec![], clusters: vec![] }];
        assert!(calibrate_from_rankings(&none, true, &ThresholdGrid::default(), Pooling::Micro).is_err());
    }

    pub(crate) fn random_samples(rng: &mut ChaCha8Rng, n: usize) -> Vec<CalibrationSample> {
        let labels: Vec<String> = (0..8).map(|i| format!("s{i}")).collect();
        (0..n)
            .map(|_| {
                let tokens = rng.gen_range(1..6);
                let mut ranked: Vec<RankedPrediction> = labels
                    .iter()
                    .map(|id| {
                        let dots: Vec<f64> = (0..tokens).map(|_| rng.gen_range(0..4) as f64).collect();
                        candidate(id, rng.gen_range(0..100) as f64 / 100.0, &dots)
                    })
                    .collect();
                ranked.sort_by(prediction_order);
                let mut pool = labels.clone();
                let mut clusters = Vec::new();
                for _ in 0..rng.gen_range(0..3) {
                    let size = rng.gen_range(1..3).min(pool.len());
                    let c: Cluster = (0..size).map(|_| pool.remove(rng.gen_range(0..pool.len()))).collect();
                    clusters.push(c);
                }
                CalibrationSample { ranked, clusters }
            })
            .collect()
    }

    #[test]
    fn calibration_matches_metric_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let samples = random_samples(&mut rng, 6);
            if samples.iter().all(|s| s.clusters.is_empty()) {
                continue;
            }
            for filter in [false, true] {
                let cal = calibrate_from_rankings(&samples, filter, &ThresholdGrid::default(), Pooling::Micro).unwrap();
                for row in &cal.grid {
                    let chosen: Vec<(BTreeSet<String>, Vec<Cluster>)> = samples
                        .iter()
                        .map(|s| {
                            let sel = select(&s.ranked, &ExtractionConfig { tau: row.tau, filter }).unwrap();
                            (sel.into_iter().map(|p| p.skill_id).collect(), s.clusters.clone())
                        })
                        .collect();
                    assert_eq!(corpus_prf(&chosen, Pooling::Micro).f1, row.f1);
                    assert_eq!(corpus_redundancy(&chosen), row.redundancy);
                }
            }
        }
    }

    #[test]
    fn calibration_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut samples = random_samples(&mut rng, 8);
        samples[0].clusters = vec![set(&["s1"])];
        let a = calibrate_from_rankings(&samples, true, &ThresholdGrid::default(), Pooling::Micro).unwrap();
        samples.reverse();
        let b = calibrate_from_rankings(&samples, true, &ThresholdGrid::default(), Pooling::Micro).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn filter_output_is_nonempty_subset(seed in 0u64..10_000, count in 1usize..8, tokens in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cands: Vec<RankedPrediction> = (0..count)
                .map(|i| {
                    let dots: Vec<f64> = (0..tokens).map(|_| rng.gen_range(-3..4) as f64).collect();
                    candidate(&format!("k{i}"), rng.gen_range(0..10) as f64 / 10.0, &dots)
                })
                .collect();
            cands.sort_by(prediction_order);
            let kept = redundancy_filter(&cands).unwrap();
            prop_assert!(!kept.is_empty());
            prop_assert!(kept.len() <= tokens);
            let mut pos = 0;
            for k in &kept {
                let found = cands[pos..].iter().position(|c| c.skill_id == k.skill_id);
                prop_assert!(found.is_some());
                pos += found.unwrap() + 1;
            }
        }
    }
}
