//! Small weight-shared transformer encoder producing contextual token vectors.
//!
//! Learned token embeddings (scaled by √d) plus learned position embeddings
//! feed `layers` pre-norm blocks (multi-head self-attention, whose key
//! projection has no bias, then a GELU feed-forward), followed by a final
//! layer norm. The same parameters encode sentences, skill names, descriptions
//! and job titles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{mean_rows, Graph, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::text::{tokenize, TokenSequence, Vocabulary};

/// Half-width of the uniform initialization range.
pub const INIT_BOUND: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Desk-scale defaults for a given vocabulary size.
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 2,
            ff_dim: 128,
            max_seq_len: 128,
            vocab_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.max_seq_len < 4 {
            return Err(Error::Config(format!(
                "max_seq_len {} < 4",
                self.max_seq_len
            )));
        }
        Ok(())
    }
}

/// Contextual vectors for one tokenized text, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    pub rows: Tensor,
    pub template: Vec<bool>,
}

impl TokenEmbeddings {
    pub fn new(rows: Tensor, template: Vec<bool>) -> Result<Self> {
        if rows.rows() != template.len() {
            return Err(Error::Shape(format!(
                "{} rows but {} template flags",
                rows.rows(),
                template.len()
            )));
        }
        if !rows.is_finite() {
            return Err(Error::Domain("non-finite token embedding".into()));
        }
        Ok(Self { rows, template })
    }

    /// Builds from plain rows with every position marked as content.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged or empty token rows".into()));
        }
        let data = rows.concat();
        Self::new(Tensor::matrix(rows.len(), d, data), vec![false; rows.len()])
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row_slice(i)
    }

    /// Unweighted mean over all rows, template positions included.
    pub fn mean(&self) -> Vec<f64> {
        mean_rows(&self.rows).into_data()
    }
}

/// Anything that maps text to contextual token vectors.
pub trait TokenEncoder {
    fn dim(&self) -> usize;
    fn encode_text(&self, text: &str) -> Result<TokenEmbeddings>;

    fn encode_texts(&self, texts: &[&str]) -> Result<Vec<TokenEmbeddings>> {
        texts.iter().map(|t| self.encode_text(t)).collect()
    }
}

/// Skill vector: the mean of all of the skill text's token vectors.
pub fn embed_skill<E: TokenEncoder + ?Sized>(encoder: &E, skill: &str) -> Result<Vec<f64>> {
    Ok(encoder.encode_text(skill)?.mean())
}

/// Encoder parameters plus the vocabulary they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub vocab: Vocabulary,
    pub params: ParameterSet,
}

impl Encoder {
    /// Fresh parameters drawn from `config.seed`. Layer-norm gains start at
    /// one and their biases at zero; everything else is uniform(±0.05).
    pub fn init(config: EncoderConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries, config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = init_params(&config, &mut rng)?;
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        tokenize(text, &self.vocab, self.config.max_seq_len)
    }

    /// Encodes a tokenized sequence with the stored parameters.
    pub fn encode(&self, seq: &TokenSequence) -> Result<TokenEmbeddings> {
        Ok(self.encode_batch(std::slice::from_ref(seq))?.remove(0))
    }

    /// Encodes several sequences on one tape.
    pub fn encode_batch(&self, seqs: &[TokenSequence]) -> Result<Vec<TokenEmbeddings>> {
        let mut g = Graph::new();
        let mut out = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let v = forward(&mut g, &self.params, &self.config, seq)?;
            out.push(TokenEmbeddings::new(g.value(v).clone(), seq.template.clone())?);
        }
        Ok(out)
    }
}

impl TokenEncoder for Encoder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn encode_text(&self, text: &str) -> Result<TokenEmbeddings> {
        self.encode(&self.tokenize(text)?)
    }

    fn encode_texts(&self, texts: &[&str]) -> Result<Vec<TokenEmbeddings>> {
        let seqs: Vec<TokenSequence> = texts
            .iter()
            .map(|t| self.tokenize(t))
            .collect::<Result<_>>()?;
        self.encode_batch(&seqs)
    }
}

fn init_params(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<ParameterSet> {
    let d = config.dim;
    let mut p = ParameterSet::new();
    let mut uniform = |p: &mut ParameterSet, name: String, shape: &[usize]| {
        p.insert(name, Tensor::uniform(shape, INIT_BOUND, rng))
    };
    uniform(&mut p, "embed.tokens".into(), &[config.vocab_size, d])?;
    uniform(&mut p, "embed.positions".into(), &[config.max_seq_len, d])?;
    for l in 0..config.layers {
        let pre = format!("layers.{l}");
        p.insert(format!("{pre}.attn_norm.gain"), Tensor::filled(&[d], 1.0))?;
        p.insert(format!("{pre}.attn_norm.bias"), Tensor::zeros(&[d]))?;
        for proj in ["query", "key", "value", "output"] {
            uniform(&mut p, format!("{pre}.attn.{proj}.weight"), &[d, d])?;
            // a key bias shifts every logit in a softmax row equally, so it
            // would be a parameter with an identically zero gradient
            if proj != "key" {
                uniform(&mut p, format!("{pre}.attn.{proj}.bias"), &[d])?;
            }
        }
        p.insert(format!("{pre}.ffn_norm.gain"), Tensor::filled(&[d], 1.0))?;
        p.insert(format!("{pre}.ffn_norm.bias"), Tensor::zeros(&[d]))?;
        uniform(&mut p, format!("{pre}.ffn.up.weight"), &[d, config.ff_dim])?;
        uniform(&mut p, format!("{pre}.ffn.up.bias"), &[config.ff_dim])?;
        uniform(&mut p, format!("{pre}.ffn.down.weight"), &[config.ff_dim, d])?;
        uniform(&mut p, format!("{pre}.ffn.down.bias"), &[d])?;
    }
    p.insert("final_norm.gain", Tensor::filled(&[d], 1.0))?;
    p.insert("final_norm.bias", Tensor::zeros(&[d]))?;
    Ok(p)
}

/// True for parameters that are exempt from weight decay (biases, norms).
pub fn is_no_decay(name: &str) -> bool {
    name.ends_with(".bias") || name.contains("norm.")
}

/// Records the encoder forward pass for `seq` on `g`, returning the `n×d`
/// output node. `params` may differ from any stored encoder (gradient checks
/// perturb them).
pub fn forward(
    g: &mut Graph,
    params: &ParameterSet,
    config: &EncoderConfig,
    seq: &TokenSequence,
) -> Result<Var> {
    let n = seq.len();
    if n == 0 {
        return Err(Error::Tokenize("empty token sequence".into()));
    }
    if n > config.max_seq_len {
        return Err(Error::Config(format!(
            "sequence of {n} tokens exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    if let Some(&bad) = seq.ids.iter().find(|&&i| i as usize >= config.vocab_size) {
        return Err(Error::Tokenize(format!("token id {bad} outside vocabulary")));
    }
    let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..n).collect();

    let tok_table = g.param(params, "embed.tokens");
    let pos_table = g.param(params, "embed.positions");
    let tok = g.gather_rows(tok_table, &ids);
    // token embeddings enter at √d so that token identity is not swamped by
    // the block outputs at initialization
    let tok = g.mul_scalar(tok, (config.dim as f64).sqrt());
    let pos = g.gather_rows(pos_table, &positions);
    let mut h = g.add(tok, pos);

    let head_dim = config.dim / config.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    for l in 0..config.layers {
        let pre = format!("layers.{l}");
        let a = layer_norm(g, params, h, &format!("{pre}.attn_norm"));
        let q = linear(g, params, a, &format!("{pre}.attn.query"));
        let k = g.param(params, &format!("{pre}.attn.key.weight"));
        let k = g.matmul(a, k);
        let v = linear(g, params, a, &format!("{pre}.attn.value"));
        let mut heads = Vec::with_capacity(config.heads);
        for hd in 0..config.heads {
            let start = hd * head_dim;
            let qh = g.slice_cols(q, start, head_dim);
            let kh = g.slice_cols(k, start, head_dim);
            let vh = g.slice_cols(v, start, head_dim);
            let logits = g.matmul_bt(qh, kh);
            let logits = g.mul_scalar(logits, scale);
            let weights = g.softmax_rows(logits);
            heads.push(g.matmul(weights, vh));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        let attn = linear(g, params, merged, &format!("{pre}.attn.output"));
        h = g.add(h, attn);

        let a = layer_norm(g, params, h, &format!("{pre}.ffn_norm"));
        let up = linear(g, params, a, &format!("{pre}.ffn.up"));
        let act = g.gelu(up);
        let down = linear(g, params, act, &format!("{pre}.ffn.down"));
        h = g.add(h, down);
    }
    Ok(layer_norm(g, params, h, "final_norm"))
}

fn linear(g: &mut Graph, params: &ParameterSet, x: Var, prefix: &str) -> Var {
    let w = g.param(params, &format!("{prefix}.weight"));
    let b = g.param(params, &format!("{prefix}.bias"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

fn layer_norm(g: &mut Graph, params: &ParameterSet, x: Var, prefix: &str) -> Var {
    let gain = g.param(params, &format!("{prefix}.gain"));
    let bias = g.param(params, &format!("{prefix}.bias"));
    let y = g.normalize_rows(x);
    let y = g.mul_row(y, gain);
    g.add_row(y, bias)
}
