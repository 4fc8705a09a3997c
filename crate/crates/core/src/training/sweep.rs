//! Batch-size sweep: train once per (batch size, seed) and report the mean
//! and sample standard deviation of development RP@5 per batch size.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{dev_rp, train, TrainingConfig, TrainingData};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::text::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub batch_size: usize,
    pub rp5_mean: f64,
    pub rp5_std: f64,
    pub runs: Vec<f64>,
}

/// Mean and sample (n − 1) standard deviation; the deviation of a single
/// value is zero.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs the sweep. Run `s` uses `seeds[s]` for both encoder initialization
/// and training, so every batch size sees the same starting points.
pub fn batch_sweep(
    encoder_config: &EncoderConfig,
    vocab: &Vocabulary,
    base: &TrainingConfig,
    data: &TrainingData,
    sizes: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if sizes.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one batch size and one seed".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &batch_size in sizes {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut enc_config = encoder_config.clone();
            enc_config.seed = seed;
            let config = TrainingConfig {
                batch_size,
                seed,
                ..base.clone()
            };
            let encoder = Encoder::init(enc_config, vocab.clone())?;
            let outcome = train(encoder, &config, data)?;
            runs.push(dev_rp(&outcome.encoder, data.taxonomy, data.dev, config.scorer(), 5)?);
        }
        let (rp5_mean, rp5_std) = mean_std(&runs);
        rows.push(SweepRow {
            batch_size,
            rp5_mean,
            rp5_std,
            runs,
        });
    }
    Ok(rows)
}

/// Tab-separated table with a header line.
pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from("batch_size\trp5_mean\trp5_std\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{:.6}\t{:.6}", r.batch_size, r.rp5_mean, r.rp5_std);
    }
    out
}
