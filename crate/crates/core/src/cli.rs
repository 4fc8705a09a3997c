//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 data error.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::synthetic::{generate_synthetic_corpus, generate_title_corpus, SyntheticSpec, TitleCorpusSpec};
use crate::data::{
    gold_sets, load_annotations, load_pairs, load_predictions, load_taxonomy, load_title_pairs, read_jsonl,
    save_taxonomy, to_jsonl, write_jsonl, write_text, CorpusManifest, PredictionRecord, ScoredSkill,
    CORPUS_FORMAT_VERSION, MANIFEST_FILE,
};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    mrr, pool_prf, redundancy_counts, rp_at_k, cluster_counts, AnnotatedAd, Cluster, Pooling, RedundancyCounts,
};
use crate::explain::{explain, Format};
use crate::extraction::{calibrate_threshold, rank_skills_with, select, ExtractionConfig, Scorer, SkillIndex, Taxonomy};
use crate::title::{title_vocabulary, train_title_model, Projection, ReferenceIndex, TitleModel, TitleTrainingConfig};
use crate::training::sweep::{batch_sweep, sweep_tsv};
use crate::training::{corpus_vocabulary, train, Ablations, Checkpoint, ModelKind, TrainingConfig, TrainingData, CHECKPOINT_VERSION};

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (checkpoint format 1, corpus format 1)");

#[derive(Debug, Parser)]
#[command(name = "ctxmatch", version = VERSION, about = "Token-level contrastive skill extraction")]
struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the extraction encoder.
    Train(TrainCmd),
    /// Grid-search the decision threshold on development annotations.
    Calibrate(CalibrateCmd),
    /// Rank or extract skills for sentences.
    Extract(ExtractCmd),
    /// Score predictions against gold annotations.
    Evaluate(EvaluateCmd),
    /// Render a skill's attention over a sentence.
    Explain(ExplainCmd),
    /// Train the title normalizer.
    TitleTrain(TitleTrainCmd),
    /// Rank reference titles for a query title.
    TitleRank(TitleRankCmd),
    /// Write a synthetic corpus.
    GenCorpus(GenCorpusCmd),
    /// Train at several batch sizes and report development RP@5.
    BatchSweep(BatchSweepCmd),
}

#[derive(Debug, Args)]
struct EncoderArgs {
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    ff_dim: usize,
    #[arg(long, default_value_t = 128)]
    max_seq_len: usize,
}

impl EncoderArgs {
    fn config(&self, vocab_size: usize, seed: u64) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
            max_seq_len: self.max_seq_len,
            vocab_size,
            seed,
        }
    }
}

#[derive(Debug, Args)]
struct TrainingArgs {
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    micro_batch: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.1)]
    warmup: f64,
    #[arg(long, default_value_t = 20.0)]
    scale: f64,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    eval_every: f64,
    #[arg(long, default_value_t = 2)]
    patience: usize,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    /// Mask in-batch entries that share the diagonal's skill.
    #[arg(long)]
    mask_duplicates: bool,
    #[arg(long)]
    no_context: bool,
    #[arg(long)]
    no_augmentation: bool,
    #[arg(long)]
    asymmetric_loss: bool,
    #[arg(long)]
    no_descriptions: bool,
    #[arg(long)]
    with_synonyms: bool,
}

impl TrainingArgs {
    fn config(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            batch_size: self.batch_size,
            micro_batch: self.micro_batch,
            learning_rate: self.lr,
            warmup_fraction: self.warmup,
            scale: self.scale,
            max_epochs: self.epochs,
            seed,
            ablations: Ablations {
                no_context: self.no_context,
                no_augmentation: self.no_augmentation,
                asymmetric_loss: self.asymmetric_loss,
                no_descriptions: self.no_descriptions,
                with_synonyms: self.with_synonyms,
            },
            eval_every: self.eval_every,
            patience: self.patience,
            weight_decay: self.weight_decay,
            mask_duplicates: self.mask_duplicates,
        }
    }
}

#[derive(Debug, Args)]
struct CorpusArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    dev: PathBuf,
}

#[derive(Debug, Args)]
struct TrainCmd {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    encoder: EncoderArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PoolingArg {
    Micro,
    Macro,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Micro => Pooling::Micro,
            PoolingArg::Macro => Pooling::Macro,
        }
    }
}

#[derive(Debug, Args)]
struct CalibrateCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    no_filter: bool,
    /// Also write the calibration as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("mode").required(true).args(["tau", "top"]))]
struct ExtractCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    taxonomy: PathBuf,
    /// Annotated ads or `{"sentence": …}` records, one per line.
    #[arg(long)]
    input: PathBuf,
    /// Keep skills scoring at least this threshold.
    #[arg(long)]
    tau: Option<f64>,
    /// Emit the K best-ranked skills instead of thresholding.
    #[arg(long)]
    top: Option<usize>,
    #[arg(long)]
    no_filter: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateCmd {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "rp@1,rp@5,rp@10,mrr,prf,redundancy")]
    metrics: Vec<String>,
    #[arg(long, value_enum, default_value = "micro")]
    pooling: PoolingArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExplainCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    sentence: String,
    /// Skill id from the taxonomy.
    #[arg(long)]
    skill: String,
    #[arg(long, default_value = "html")]
    format: String,
    /// Write to a file instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TitleTrainCmd {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    micro_batch: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 20.0)]
    scale: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    /// Projection width (default 1.5 × dim).
    #[arg(long)]
    d_out: Option<usize>,
    /// Share one projection between titles and skill sets.
    #[arg(long)]
    tied: bool,
    #[arg(long, default_value_t = 25)]
    skill_cap: usize,
    #[command(flatten)]
    encoder: EncoderArgs,
}

#[derive(Debug, Args)]
struct TitleRankCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    query: String,
    /// Reference titles, one per line.
    #[arg(long)]
    references: PathBuf,
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CorpusKind {
    Skills,
    Titles,
}

#[derive(Debug, Args)]
struct GenCorpusCmd {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "skills")]
    kind: CorpusKind,
    #[arg(long, default_value_t = 50)]
    skills: usize,
    #[arg(long, default_value_t = 10)]
    sentences_per_skill: usize,
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    name_mention_rate: f64,
    #[arg(long, default_value_t = 20)]
    dev_ads: usize,
    #[arg(long, default_value_t = 20)]
    test_ads: usize,
    #[arg(long, default_value_t = 20)]
    clusters: usize,
    #[arg(long, default_value_t = 50)]
    titles_per_cluster: usize,
}

#[derive(Debug, Args)]
struct BatchSweepCmd {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
    sizes: Vec<usize>,
    /// Runs per batch size; run i uses seed `--seed + i`.
    #[arg(long, default_value_t = 3)]
    runs: u64,
    /// Write the table here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    encoder: EncoderArgs,
}

/// Runs the CLI on `args` (including the program name) with process stdio.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

/// Like [`run`], writing to the given streams.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    1
                }
            };
        }
    };
    match dispatch(cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Config(_) => 1,
                _ => 2,
            }
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Train(c) => cmd_train(c, seed, out, err),
        Command::Calibrate(c) => cmd_calibrate(c, out),
        Command::Extract(c) => cmd_extract(c, err),
        Command::Evaluate(c) => cmd_evaluate(c, out),
        Command::Explain(c) => cmd_explain(c, out),
        Command::TitleTrain(c) => cmd_title_train(c, seed, err),
        Command::TitleRank(c) => cmd_title_rank(c, out),
        Command::GenCorpus(c) => cmd_gen_corpus(c, seed, err),
        Command::BatchSweep(c) => cmd_batch_sweep(c, seed, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io(Path::new("<stdout>"), e))
}

struct LoadedCorpus {
    taxonomy: Taxonomy,
    pairs: Vec<crate::data::TrainingPair>,
    dev: Vec<AnnotatedAd>,
}

impl CorpusArgs {
    fn load(&self) -> Result<LoadedCorpus> {
        let taxonomy = load_taxonomy(&self.taxonomy)?;
        let pairs = load_pairs(&self.pairs, &taxonomy)?;
        let dev = load_annotations(&self.dev, Some(&taxonomy))?;
        Ok(LoadedCorpus { taxonomy, pairs, dev })
    }
}

fn cmd_train(c: TrainCmd, seed: u64, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let corpus = c.corpus.load()?;
    let data = TrainingData {
        taxonomy: &corpus.taxonomy,
        pairs: &corpus.pairs,
        dev: &corpus.dev,
    };
    let config = c.training.config(seed);
    config.validate()?;
    let vocab = corpus_vocabulary(&data);
    let encoder = Encoder::init(c.encoder.config(vocab.len(), seed), vocab)?;
    let outcome = train(encoder, &config, &data)?;
    outcome.checkpoint()?.save(&c.out)?;
    let mut text = String::from("step\tdev_rp@5\n");
    for p in &outcome.history {
        let _ = writeln!(text, "{}\t{:.6}", p.step, p.rp_at_5);
    }
    emit(out, &text)?;
    let _ = writeln!(
        err,
        "trained {} steps, best step {}{}",
        outcome.steps_taken,
        outcome.best_step,
        if outcome.halted_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

/// Extraction encoder and the scorer it was trained for.
fn load_extraction(path: &Path) -> Result<(Encoder, Scorer)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(ModelKind::Extraction)?;
    let training: TrainingConfig = serde_json::from_value(ck.manifest.training.clone())
        .map_err(|e| Error::Checkpoint(format!("training configuration: {e}")))?;
    Ok((ck.encoder(), training.scorer()))
}

fn cmd_calibrate(c: CalibrateCmd, out: &mut dyn Write) -> Result<()> {
    let taxonomy = load_taxonomy(&c.taxonomy)?;
    let dev = load_annotations(&c.dev, Some(&taxonomy))?;
    let (encoder, scorer) = load_extraction(&c.checkpoint)?;
    let index = SkillIndex::build(&encoder, &taxonomy)?;
    let cal = calibrate_threshold(&dev, &encoder, &index, scorer, !c.no_filter)?;
    let mut text = String::from("tau\tprecision\trecall\tf1\tredundancy\n");
    for r in &cal.grid {
        let _ = writeln!(
            text,
            "{:.2}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.tau, r.precision, r.recall, r.f1, r.redundancy
        );
    }
    let _ = writeln!(
        text,
        "# selected tau={:.2} f1={:.6} redundancy={:.6}",
        cal.tau, cal.f1, cal.redundancy
    );
    emit(out, &text)?;
    if let Some(path) = &c.out {
        let mut json = serde_json::to_string_pretty(&cal)?;
        json.push('\n');
        write_text(path, &json)?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ExtractInput {
    Ad(AnnotatedAd),
    Sentence {
        #[serde(default)]
        ad_id: Option<String>,
        #[serde(default)]
        sentence_index: Option<usize>,
        sentence: String,
    },
}

fn cmd_extract(c: ExtractCmd, err: &mut dyn Write) -> Result<()> {
    let taxonomy = load_taxonomy(&c.taxonomy)?;
    let (encoder, scorer) = load_extraction(&c.checkpoint)?;
    let index = SkillIndex::build(&encoder, &taxonomy)?;
    let mut sentences: Vec<(Option<String>, Option<usize>, String)> = Vec::new();
    for (line, record) in read_jsonl::<ExtractInput>(&c.input)? {
        match record {
            ExtractInput::Ad(ad) => {
                ad.sentences
                    .iter()
                    .try_for_each(|s| s.validate())
                    .map_err(|e| Error::data(c.input.display(), line, e.to_string()))?;
                for (i, s) in ad.sentences.into_iter().enumerate() {
                    sentences.push((Some(ad.ad_id.clone()), Some(i), s.text));
                }
            }
            ExtractInput::Sentence {
                ad_id,
                sentence_index,
                sentence,
            } => sentences.push((ad_id, sentence_index, sentence)),
        }
    }
    let mut records = Vec::with_capacity(sentences.len());
    for (ad_id, sentence_index, text) in sentences {
        let ranked = rank_skills_with(&text, &encoder, &index, scorer)?;
        let chosen = match (c.tau, c.top) {
            (Some(tau), _) => select(&ranked, &ExtractionConfig { tau, filter: !c.no_filter })?,
            (None, Some(k)) => ranked.into_iter().take(k).collect(),
            (None, None) => unreachable!("clap requires --tau or --top"),
        };
        records.push(PredictionRecord {
            ad_id,
            sentence_index,
            sentence: Some(text),
            predictions: chosen
                .into_iter()
                .map(|p| ScoredSkill {
                    skill_id: p.skill_id,
                    score: p.score,
                })
                .collect(),
        });
    }
    write_jsonl(&c.out, &records)?;
    let _ = writeln!(err, "wrote {} prediction records", records.len());
    Ok(())
}

/// Report written by `evaluate`: metric name → value plus sample counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    #[serde(flatten)]
    pub metrics: BTreeMap<String, f64>,
    pub counts: ReportCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub samples: usize,
    pub skipped: usize,
}

enum Metric {
    Rp(usize),
    Mrr,
    Prf,
    Redundancy,
}

fn parse_metric(name: &str) -> Result<Metric> {
    let lower = name.trim().to_ascii_lowercase();
    if let Some(k) = lower.strip_prefix("rp@") {
        return match k.parse::<usize>() {
            Ok(k) if k > 0 => Ok(Metric::Rp(k)),
            _ => Err(Error::Config(format!("bad metric {name:?}"))),
        };
    }
    match lower.as_str() {
        "mrr" => Ok(Metric::Mrr),
        "prf" => Ok(Metric::Prf),
        "redundancy" => Ok(Metric::Redundancy),
        _ => Err(Error::Config(format!("unknown metric {name:?}"))),
    }
}

/// Pairs each gold sentence with its prediction record.
fn align_predictions(
    gold: &[AnnotatedAd],
    preds: Vec<PredictionRecord>,
    pred_path: &Path,
) -> Result<Vec<(BTreeSet<String>, Vec<Cluster>, Vec<String>)>> {
    let mut by_key: HashMap<(String, usize), PredictionRecord> = HashMap::new();
    for (i, p) in preds.into_iter().enumerate() {
        let (Some(ad), Some(idx)) = (p.ad_id.clone(), p.sentence_index) else {
            return Err(Error::data(pred_path.display(), i + 1, "prediction lacks ad_id or sentence_index"));
        };
        if by_key.insert((ad.clone(), idx), p).is_some() {
            return Err(Error::data(
                pred_path.display(),
                i + 1,
                format!("duplicate prediction for {ad} sentence {idx}"),
            ));
        }
    }
    let mut out = Vec::new();
    for (ad_id, idx, _) in gold_sets(gold) {
        let sentence = &gold.iter().find(|a| a.ad_id == ad_id).expect("ad exists").sentences[idx];
        let Some(mut p) = by_key.remove(&(ad_id.clone(), idx)) else {
            return Err(Error::Invalid(format!("no prediction for {ad_id} sentence {idx}")));
        };
        p.predictions
            .sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.skill_id.cmp(&b.skill_id)));
        let ranked: Vec<String> = p.predictions.into_iter().map(|s| s.skill_id).collect();
        out.push((ranked.iter().cloned().collect(), sentence.clusters.clone(), ranked));
    }
    if let Some(((ad, idx), _)) = by_key.into_iter().min_by(|a, b| a.0.cmp(&b.0)) {
        return Err(Error::Invalid(format!("prediction for unknown sentence {ad} {idx}")));
    }
    Ok(out)
}

pub fn evaluate_predictions(
    gold: &[AnnotatedAd],
    preds: Vec<PredictionRecord>,
    pred_path: &Path,
    metrics: &[String],
    pooling: Pooling,
) -> Result<Report> {
    let metrics: Vec<Metric> = metrics.iter().map(|m| parse_metric(m)).collect::<Result<_>>()?;
    let aligned = align_predictions(gold, preds, pred_path)?;
    let labelled: Vec<&(BTreeSet<String>, Vec<Cluster>, Vec<String>)> =
        aligned.iter().filter(|(_, clusters, _)| !clusters.is_empty()).collect();
    let ranked: Vec<Vec<String>> = labelled.iter().map(|(_, _, r)| r.clone()).collect();
    let gold_labels: Vec<BTreeSet<String>> = labelled
        .iter()
        .map(|(_, clusters, _)| clusters.iter().flatten().cloned().collect())
        .collect();
    let mut values = BTreeMap::new();
    for m in metrics {
        match m {
            Metric::Rp(k) => {
                values.insert(format!("rp@{k}"), rp_at_k(&ranked, &gold_labels, k)?);
            }
            Metric::Mrr => {
                values.insert("mrr".into(), mrr(&ranked, &gold_labels)?);
            }
            Metric::Prf => {
                let counts: Vec<_> = aligned.iter().map(|(p, c, _)| cluster_counts(p, c)).collect();
                let prf = pool_prf(&counts, pooling);
                values.insert("precision".into(), prf.precision);
                values.insert("recall".into(), prf.recall);
                values.insert("f1".into(), prf.f1);
            }
            Metric::Redundancy => {
                let mut total = RedundancyCounts::default();
                for (p, c, _) in &aligned {
                    total.add(redundancy_counts(p, c));
                }
                values.insert("redundancy".into(), total.fraction());
            }
        }
    }
    Ok(Report {
        metrics: values,
        counts: ReportCounts {
            samples: labelled.len(),
            skipped: aligned.len() - labelled.len(),
        },
    })
}

fn cmd_evaluate(c: EvaluateCmd, out: &mut dyn Write) -> Result<()> {
    let gold = load_annotations(&c.gold, None)?;
    let preds = load_predictions(&c.pred)?;
    let report = evaluate_predictions(&gold, preds, &c.pred, &c.metrics, c.pooling.into())?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_text(&c.out, &json)?;
    emit(out, &json)
}

fn cmd_explain(c: ExplainCmd, out: &mut dyn Write) -> Result<()> {
    let format: Format = c.format.parse()?;
    let taxonomy = load_taxonomy(&c.taxonomy)?;
    let skill = taxonomy
        .get(&c.skill)
        .ok_or_else(|| Error::Invalid(format!("unknown skill id {}", c.skill)))?;
    let (encoder, _) = load_extraction(&c.checkpoint)?;
    let rendered = explain(&c.sentence, &skill.name, &encoder, format)?;
    match &c.out {
        Some(path) => write_text(path, &rendered),
        None => emit(out, &rendered),
    }
}

fn cmd_title_train(c: TitleTrainCmd, seed: u64, err: &mut dyn Write) -> Result<()> {
    let records = load_title_pairs(&c.pairs)?;
    let config = TitleTrainingConfig {
        batch_size: c.batch_size,
        micro_batch: c.micro_batch,
        learning_rate: c.lr,
        scale: c.scale,
        weight_decay: c.weight_decay,
        seed,
        projection: if c.tied { Projection::Tied } else { Projection::Asymmetric },
        d_out: c.d_out,
        skill_cap: c.skill_cap,
    };
    let vocab = title_vocabulary(&records);
    let encoder = Encoder::init(c.encoder.config(vocab.len(), seed), vocab)?;
    let outcome = train_title_model(&records, encoder, &config)?;
    outcome.model.checkpoint(&config, outcome.steps)?.save(&c.out)?;
    let _ = writeln!(
        err,
        "trained {} steps on {} ads ({} dropped with fewer than five skills)",
        outcome.steps,
        records.len() - outcome.dropped,
        outcome.dropped
    );
    Ok(())
}

fn cmd_title_rank(c: TitleRankCmd, out: &mut dyn Write) -> Result<()> {
    let model = TitleModel::from_checkpoint(&Checkpoint::load(&c.checkpoint)?)?;
    let text = std::fs::read_to_string(&c.references).map_err(|e| Error::io(&c.references, e))?;
    let references: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    let index = ReferenceIndex::build(&model, &references)?;
    let mut table = String::from("rank\ttitle\tcosine\n");
    for (r, (i, cos)) in index.rank(&model, &c.query)?.into_iter().take(c.top).enumerate() {
        let _ = writeln!(table, "{}\t{}\t{:.6}", r + 1, references[i], cos);
    }
    emit(out, &table)
}

#[derive(Serialize)]
struct QueryRecord<'a> {
    query: &'a str,
    reference: &'a str,
}

fn cmd_gen_corpus(c: GenCorpusCmd, seed: u64, err: &mut dyn Write) -> Result<()> {
    std::fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
    let names: Vec<&str> = match c.kind {
        CorpusKind::Skills => {
            let mut spec = SyntheticSpec::new(c.skills, c.sentences_per_skill, c.noise, seed);
            spec.name_mention_rate = c.name_mention_rate;
            spec.dev_ads = c.dev_ads;
            spec.test_ads = c.test_ads;
            let corpus = generate_synthetic_corpus(&spec)?;
            save_taxonomy(&c.out.join("taxonomy.jsonl"), &corpus.taxonomy)?;
            write_jsonl(&c.out.join("pairs.jsonl"), &corpus.pairs)?;
            write_jsonl(&c.out.join("dev.jsonl"), &corpus.dev)?;
            write_jsonl(&c.out.join("test.jsonl"), &corpus.test)?;
            vec!["taxonomy.jsonl", "pairs.jsonl", "dev.jsonl", "test.jsonl"]
        }
        CorpusKind::Titles => {
            let corpus = generate_title_corpus(&TitleCorpusSpec::new(c.clusters, c.titles_per_cluster, seed))?;
            write_jsonl(&c.out.join("title_pairs.jsonl"), &corpus.train)?;
            let mut refs = corpus.benchmark.references.join("\n");
            refs.push('\n');
            write_text(&c.out.join("references.txt"), &refs)?;
            let queries: Vec<QueryRecord> = corpus
                .benchmark
                .queries
                .iter()
                .map(|(q, g)| QueryRecord {
                    query: q,
                    reference: &corpus.benchmark.references[*g],
                })
                .collect();
            write_text(&c.out.join("queries.jsonl"), &to_jsonl(&queries)?)?;
            vec!["title_pairs.jsonl", "references.txt", "queries.jsonl"]
        }
    };
    let manifest = CorpusManifest::describe(&c.out, &names)?;
    manifest.write(&c.out)?;
    let _ = writeln!(
        err,
        "wrote {} files and {MANIFEST_FILE} (format {CORPUS_FORMAT_VERSION}) to {}",
        names.len(),
        c.out.display()
    );
    Ok(())
}

fn cmd_batch_sweep(c: BatchSweepCmd, seed: u64, out: &mut dyn Write) -> Result<()> {
    if c.runs == 0 || c.sizes.is_empty() {
        return Err(Error::Config("batch-sweep needs at least one size and one run".into()));
    }
    let corpus = c.corpus.load()?;
    let data = TrainingData {
        taxonomy: &corpus.taxonomy,
        pairs: &corpus.pairs,
        dev: &corpus.dev,
    };
    let base = c.training.config(seed);
    base.validate()?;
    let vocab = corpus_vocabulary(&data);
    let encoder = c.encoder.config(vocab.len(), seed);
    let seeds: Vec<u64> = (0..c.runs).map(|i| seed + i).collect();
    let rows = batch_sweep(&encoder, &vocab, &base, &data, &c.sizes, &seeds)?;
    let table = sweep_tsv(&rows);
    match &c.out {
        Some(path) => write_text(path, &table),
        None => emit(out, &table),
    }
}

/// Format versions reported by `--version`.
pub fn format_versions() -> (u32, u32) {
    (CHECKPOINT_VERSION, CORPUS_FORMAT_VERSION)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with(std::iter::once("ctxmatch").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn version_names_formats() {
        let (code, out, _) = run_capture(&["--version"]);
        assert_eq!(code, 0);
        let (ck, corpus) = format_versions();
        assert!(out.contains(&format!("checkpoint format {ck}")));
        assert!(out.contains(&format!("corpus format {corpus}")));
    }

    #[test]
    fn usage_errors_exit_one() {
        let (code, _, err) = run_capture(&["frobnicate"]);
        assert_eq!(code, 1);
        assert!(!err.is_empty());
        assert_eq!(run_capture(&[]).0, 1);
        assert_eq!(run_capture(&["evaluate", "--gold", "x"]).0, 1);
    }

    #[test]
    fn metric_names() {
        assert!(matches!(parse_metric("RP@5").unwrap(), Metric::Rp(5)));
        assert!(parse_metric("rp@0").is_err());
        assert!(parse_metric("ndcg").is_err());
    }
}
