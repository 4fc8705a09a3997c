//! Ranking metrics, cluster-based precision/recall, prediction redundancy,
//! annotator agreement and attention/rationale rank correlation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Labels judged equally informative for one sentence.
pub type Cluster = BTreeSet<String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Dev,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Random,
    Unique,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub text: String,
    pub relevant: bool,
    #[serde(default)]
    pub clusters: Vec<Cluster>,
}

impl AnnotatedSentence {
    /// Clusters must be non-empty and pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.clusters {
            if c.is_empty() {
                return Err(Error::Invalid(format!("empty cluster in {:?}", self.text)));
            }
            for id in c {
                if !seen.insert(id) {
                    return Err(Error::Invalid(format!(
                        "label {id} appears in two clusters of {:?}",
                        self.text
                    )));
                }
            }
        }
        Ok(())
    }

    /// Union of all clusters.
    pub fn gold_labels(&self) -> BTreeSet<String> {
        self.clusters.iter().flatten().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedAd {
    pub ad_id: String,
    pub split: Part,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Subset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub sentences: Vec<AnnotatedSentence>,
}

fn check_samples<T>(ranked: &[T], gold: &[BTreeSet<String>]) -> Result<()> {
    if ranked.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} rankings for {} gold sets",
            ranked.len(),
            gold.len()
        )));
    }
    if ranked.is_empty() {
        return Err(Error::Invalid("no samples".into()));
    }
    if let Some(n) = gold.iter().position(BTreeSet::is_empty) {
        return Err(Error::Invalid(format!("sample {n} has no gold labels")));
    }
    Ok(())
}

/// Macro-averaged R-precision at `k`: correct labels among the top `k`
/// divided by `min(k, |gold|)`, averaged over samples.
pub fn rp_at_k<S: AsRef<str>>(ranked: &[Vec<S>], gold: &[BTreeSet<String>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    check_samples(ranked, gold)?;
    let mut total = 0.0;
    for (preds, g) in ranked.iter().zip(gold) {
        let hits = preds.iter().take(k).filter(|p| g.contains(p.as_ref())).count();
        total += hits as f64 / k.min(g.len()) as f64;
    }
    Ok(total / ranked.len() as f64)
}

/// Mean reciprocal rank of the first correct label; zero when none appears.
pub fn mrr<S: AsRef<str>>(ranked: &[Vec<S>], gold: &[BTreeSet<String>]) -> Result<f64> {
    check_samples(ranked, gold)?;
    let mut total = 0.0;
    for (preds, g) in ranked.iter().zip(gold) {
        if let Some(pos) = preds.iter().position(|p| g.contains(p.as_ref())) {
            total += 1.0 / (pos + 1) as f64;
        }
    }
    Ok(total / ranked.len() as f64)
}

/// Fraction of samples with at least one correct label in the top `k`.
pub fn recall_at_k<S: AsRef<str>>(ranked: &[Vec<S>], gold: &[BTreeSet<String>], k: usize) -> Result<f64> {
    check_samples(ranked, gold)?;
    let hits = ranked
        .iter()
        .zip(gold)
        .filter(|(preds, g)| preds.iter().take(k).any(|p| g.contains(p.as_ref())))
        .count();
    Ok(hits as f64 / ranked.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_ratios(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

/// Raw counts behind cluster precision and recall.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PrfCounts {
    pub predicted: usize,
    pub correct: usize,
    pub clusters: usize,
    pub hit: usize,
}

impl PrfCounts {
    pub fn add(&mut self, other: PrfCounts) {
        self.predicted += other.predicted;
        self.correct += other.correct;
        self.clusters += other.clusters;
        self.hit += other.hit;
    }

    /// Sentences with neither predictions nor clusters are left out of
    /// corpus averages.
    pub fn is_vacuous(&self) -> bool {
        self.predicted == 0 && self.clusters == 0
    }

    pub fn prf(&self) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Prf::from_ratios(ratio(self.correct, self.predicted), ratio(self.hit, self.clusters))
    }
}

pub fn cluster_counts(predicted: &BTreeSet<String>, clusters: &[Cluster]) -> PrfCounts {
    PrfCounts {
        predicted: predicted.len(),
        correct: predicted
            .iter()
            .filter(|p| clusters.iter().any(|c| c.contains(*p)))
            .count(),
        clusters: clusters.len(),
        hit: clusters
            .iter()
            .filter(|c| c.iter().any(|id| predicted.contains(id)))
            .count(),
    }
}

/// Precision over predicted labels, recall over gold clusters.
pub fn cluster_prf(predicted: &BTreeSet<String>, clusters: &[Cluster]) -> Prf {
    cluster_counts(predicted, clusters).prf()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Pool counts over all sentences, then take ratios.
    #[default]
    Micro,
    /// Average per-sentence precision, recall and F1.
    Macro,
}

/// Corpus-level cluster metrics over `(predictions, clusters)` samples.
pub fn corpus_prf(samples: &[(BTreeSet<String>, Vec<Cluster>)], pooling: Pooling) -> Prf {
    let counts: Vec<PrfCounts> = samples.iter().map(|(p, c)| cluster_counts(p, c)).collect();
    pool_prf(&counts, pooling)
}

/// Aggregates per-sentence counts, skipping vacuous sentences.
pub fn pool_prf(counts: &[PrfCounts], pooling: Pooling) -> Prf {
    let live = counts.iter().filter(|c| !c.is_vacuous());
    match pooling {
        Pooling::Micro => {
            let mut total = PrfCounts::default();
            for c in live {
                total.add(*c);
            }
            total.prf()
        }
        Pooling::Macro => {
            let mut n = 0usize;
            let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
            for c in live {
                let m = c.prf();
                p += m.precision;
                r += m.recall;
                f += m.f1;
                n += 1;
            }
            if n == 0 {
                return Prf::from_ratios(0.0, 0.0);
            }
            let n = n as f64;
            Prf {
                precision: p / n,
                recall: r / n,
                f1: f / n,
            }
        }
    }
}

/// True positives and the clusters they represent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RedundancyCounts {
    pub true_positives: usize,
    pub represented: usize,
}

impl RedundancyCounts {
    pub fn add(&mut self, other: RedundancyCounts) {
        self.true_positives += other.true_positives;
        self.represented += other.represented;
    }

    pub fn fraction(&self) -> f64 {
        if self.true_positives == 0 {
            0.0
        } else {
            (self.true_positives - self.represented) as f64 / self.true_positives as f64
        }
    }
}

pub fn redundancy_counts(predicted: &BTreeSet<String>, clusters: &[Cluster]) -> RedundancyCounts {
    let mut represented = 0;
    let mut true_positives = 0;
    for c in clusters {
        let inside = c.iter().filter(|id| predicted.contains(*id)).count();
        true_positives += inside;
        if inside > 0 {
            represented += 1;
        }
    }
    RedundancyCounts {
        true_positives,
        represented,
    }
}

/// Largest fraction of true positives that can be dropped while every
/// represented cluster keeps at least one label.
pub fn prediction_redundancy(predicted: &BTreeSet<String>, clusters: &[Cluster]) -> f64 {
    redundancy_counts(predicted, clusters).fraction()
}

/// Pooled redundancy over a corpus.
pub fn corpus_redundancy(samples: &[(BTreeSet<String>, Vec<Cluster>)]) -> f64 {
    let mut total = RedundancyCounts::default();
    for (p, c) in samples {
        total.add(redundancy_counts(p, c));
    }
    total.fraction()
}

fn ad_f1(pred: &AnnotatedAd, reference: &AnnotatedAd) -> Result<f64> {
    if pred.sentences.len() != reference.sentences.len() {
        return Err(Error::Invalid(format!(
            "ad {} has {} vs {} sentences",
            pred.ad_id,
            pred.sentences.len(),
            reference.sentences.len()
        )));
    }
    let samples: Vec<(BTreeSet<String>, Vec<Cluster>)> = pred
        .sentences
        .iter()
        .zip(&reference.sentences)
        .map(|(p, r)| (p.gold_labels(), r.clusters.clone()))
        .collect();
    Ok(corpus_prf(&samples, Pooling::Micro).f1)
}

/// Mean over shared ads of the F1 obtained with each annotator in turn as
/// the reference.
pub fn annotator_agreement(a: &[AnnotatedAd], b: &[AnnotatedAd]) -> Result<f64> {
    let by_id: BTreeMap<&str, &AnnotatedAd> = b.iter().map(|ad| (ad.ad_id.as_str(), ad)).collect();
    let mut total = 0.0;
    let mut shared = 0usize;
    for ad in a {
        let Some(other) = by_id.get(ad.ad_id.as_str()) else {
            continue;
        };
        total += (ad_f1(ad, other)? + ad_f1(other, ad)?) / 2.0;
        shared += 1;
    }
    if shared == 0 {
        return Err(Error::Invalid("annotators share no ads".into()));
    }
    Ok(total / shared as f64)
}

/// Twice the 1-based rank of each value, ties sharing their average. Doubling
/// keeps tied ranks integral.
fn doubled_ranks(values: &[f64]) -> Vec<i64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        for &idx in &order[start..end] {
            ranks[idx] = (start + 1 + end) as i64;
        }
        start = end;
    }
    ranks
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    doubled_ranks(values).into_iter().map(|r| r as f64 / 2.0).collect()
}

/// Pearson correlation of integer sequences from exact integer sums, so only
/// the final division and square root round. `None` when either side is
/// constant.
fn integer_pearson(x: &[i64], y: &[i64]) -> Option<f64> {
    let n = x.len() as i64;
    let sx: i64 = x.iter().sum();
    let sy: i64 = y.iter().sum();
    let sxy = n * x.iter().zip(y).map(|(a, b)| a * b).sum::<i64>() - sx * sy;
    let sxx = n * x.iter().map(|a| a * a).sum::<i64>() - sx * sx;
    let syy = n * y.iter().map(|b| b * b).sum::<i64>() - sy * sy;
    if sxx == 0 || syy == 0 {
        return None;
    }
    Some(sxy as f64 / (sxx as f64 * syy as f64).sqrt())
}

/// Spearman correlation between attention weights and a binary rationale,
/// both over the non-template tokens. `None` marks a skipped sentence.
pub fn attention_alignment(alpha: &[f64], rationale: &[bool]) -> Result<Option<f64>> {
    if alpha.len() != rationale.len() {
        return Err(Error::Shape(format!(
            "{} attention weights vs {} rationale flags",
            alpha.len(),
            rationale.len()
        )));
    }
    if alpha.len() < 2 {
        return Err(Error::Invalid("rank correlation needs at least two tokens".into()));
    }
    if !rationale.iter().any(|h| *h) {
        return Ok(None);
    }
    let h: Vec<f64> = rationale.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(integer_pearson(&doubled_ranks(alpha), &doubled_ranks(&h)))
}

/// Mean over non-skipped sentences; `None` when all were skipped.
pub fn mean_alignment(values: &[Option<f64>]) -> Option<f64> {
    let kept: Vec<f64> = values.iter().flatten().copied().collect();
    if kept.is_empty() {
        None
    } else {
        Some(kept.iter().sum::<f64>() / kept.len() as f64)
    }
}
