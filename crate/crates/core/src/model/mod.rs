//! Labrador and the decile-token BERT baseline on a shared post-norm
//! transformer backbone without positional terms.

mod checkpoint;
mod forward;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Batch;
use crate::ecdf::{Vocab, VocabMode};
use crate::error::{Error, Result};
use crate::numerics::{glorot_uniform, normal_table, ParamStore, Tape, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_BLOB, CHECKPOINT_MANIFEST};
pub use forward::{
    backbone_forward, bert_forward, categorical_embed, categorical_head, continuous_embed, continuous_head, encode,
    forward, labrador_forward, Output,
};

/// Standard deviation of embedding-table initialisation.
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Labrador,
    Bert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    /// Per-head attention width. Labrador requires `d_model`; the baseline
    /// defaults to `d_model / num_heads`.
    #[serde(default)]
    pub key_dim: Option<usize>,
    pub dropout: f64,
    /// Number of lab codes (Labrador) or of decile-vocabulary tokens
    /// including the mask (baseline).
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn labrador(vocab_size: usize) -> Self {
        Self {
            kind: ModelKind::Labrador,
            d_model: 64,
            num_layers: 4,
            num_heads: 2,
            ff_dim: 128,
            key_dim: None,
            dropout: 0.1,
            vocab_size,
        }
    }

    pub fn bert(vocab_size: usize) -> Self {
        Self {
            kind: ModelKind::Bert,
            ..Self::labrador(vocab_size)
        }
    }

    /// Layout of the published full-scale instance.
    pub fn full_scale(kind: ModelKind, vocab_size: usize) -> Self {
        Self {
            kind,
            d_model: 1024,
            num_layers: 10,
            num_heads: 4,
            ff_dim: 1024,
            key_dim: None,
            dropout: 0.1,
            vocab_size,
        }
    }

    pub fn resolved_key_dim(&self) -> Result<usize> {
        match (self.kind, self.key_dim) {
            (ModelKind::Labrador, None) => Ok(self.d_model),
            (ModelKind::Labrador, Some(k)) if k == self.d_model => Ok(k),
            (ModelKind::Labrador, Some(k)) => Err(Error::config(format!(
                "Labrador uses key_dim = d_model = {}, got {k}",
                self.d_model
            ))),
            (ModelKind::Bert, Some(k)) => Ok(k),
            (ModelKind::Bert, None) => Ok(self.d_model / self.num_heads.max(1)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.ff_dim == 0 || self.vocab_size == 0 {
            return Err(Error::config("d_model, ff_dim and vocab_size must be positive"));
        }
        if self.num_heads == 0 {
            return Err(Error::config("num_heads must be at least 1"));
        }
        if self.resolved_key_dim()? == 0 {
            return Err(Error::config(format!(
                "key_dim resolves to 0 for d_model {} and {} heads",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Rows of the categorical embedding table. Labrador appends the mask
    /// and null tokens to its codes.
    pub fn embedding_rows(&self) -> usize {
        match self.kind {
            ModelKind::Labrador => self.vocab_size + 2,
            ModelKind::Bert => self.vocab_size,
        }
    }

    /// Width of the categorical head; its class `c` is token `c + 1`.
    pub fn head_classes(&self) -> usize {
        self.vocab_size
    }

    pub fn mask_token(&self) -> u32 {
        match self.kind {
            ModelKind::Labrador => self.vocab_size as u32 + 1,
            ModelKind::Bert => self.vocab_size as u32,
        }
    }

    pub fn null_token(&self) -> Option<u32> {
        match self.kind {
            ModelKind::Labrador => Some(self.vocab_size as u32 + 2),
            ModelKind::Bert => None,
        }
    }

    /// Model vocabulary size implied by `vocab`: its codes for Labrador,
    /// every token including the mask for the baseline.
    pub fn vocab_size_for(kind: ModelKind, vocab: &Vocab) -> usize {
        match kind {
            ModelKind::Labrador => vocab.num_codes(),
            ModelKind::Bert => vocab.size(),
        }
    }

    /// Rejects a vocabulary whose mode or size differs from this model's.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        let kind = ModelKind::for_mode(vocab.mode());
        let size = Self::vocab_size_for(self.kind, vocab);
        if kind != self.kind || size != self.vocab_size || vocab.mask_token() != self.mask_token() {
            return Err(Error::config(format!(
                "{:?} model with vocab_size {} does not match a {:?} vocabulary of {} tokens",
                self.kind,
                self.vocab_size,
                vocab.mode(),
                vocab.size()
            )));
        }
        Ok(())
    }
}

impl ModelKind {
    /// Architecture consuming a vocabulary of the given mode.
    pub fn for_mode(mode: VocabMode) -> Self {
        match mode {
            VocabMode::Continuous => ModelKind::Labrador,
            VocabMode::Decile => ModelKind::Bert,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Glorot,
    Embedding,
    Zeros,
    Ones,
}

/// Every parameter's name, shape and initialiser, in store order.
fn layout(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>, Init)>> {
    cfg.validate()?;
    let d = cfg.d_model;
    let width = cfg.num_heads * cfg.resolved_key_dim()?;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let dense = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, i: usize, o: usize| {
        out.push((format!("{name}.w"), vec![i, o], Init::Glorot));
        out.push((format!("{name}.b"), vec![o], Init::Zeros));
    };
    let norm = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str| {
        out.push((format!("{name}.g"), vec![d], Init::Ones));
        out.push((format!("{name}.b"), vec![d], Init::Zeros));
    };
    out.push(("embed.table".into(), vec![cfg.embedding_rows(), d], Init::Embedding));
    if cfg.kind == ModelKind::Labrador {
        dense(&mut out, "cont.value", 1, d);
        dense(&mut out, "cont.mix", d, d);
        norm(&mut out, "cont.ln");
    }
    for i in 0..cfg.num_layers {
        let p = format!("block{i}");
        dense(&mut out, &format!("{p}.attn.q"), d, width);
        dense(&mut out, &format!("{p}.attn.k"), d, width);
        dense(&mut out, &format!("{p}.attn.v"), d, width);
        dense(&mut out, &format!("{p}.attn.o"), width, d);
        norm(&mut out, &format!("{p}.ln1"));
        dense(&mut out, &format!("{p}.ff1"), d, cfg.ff_dim);
        dense(&mut out, &format!("{p}.ff2"), cfg.ff_dim, d);
        norm(&mut out, &format!("{p}.ln2"));
    }
    dense(&mut out, "head.cat.hidden", d, d);
    dense(&mut out, "head.cat.out", d, cfg.head_classes());
    if cfg.kind == ModelKind::Labrador {
        dense(&mut out, "head.cont.hidden", d + cfg.head_classes(), d);
        dense(&mut out, "head.cont.out", d, 1);
    }
    Ok(out)
}

/// Configuration plus every learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl ModelParams {
    /// Glorot-uniform dense weights, N(0, 0.02^2) embeddings, zero biases,
    /// unit LayerNorm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape, init) in layout(&config)? {
            let t = match init {
                Init::Glorot => glorot_uniform(shape[0], shape[1], &mut rng),
                Init::Embedding => normal_table(shape[0], shape[1], EMBED_INIT_STD, &mut rng),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, 1.0),
            };
            store.insert(name, t)?;
        }
        Ok(Self { config, store })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    /// Names of the tensors belonging to the shared backbone and embeddings
    /// (everything except the pre-training heads).
    pub fn is_head(name: &str) -> bool {
        name.starts_with("head.")
    }

    /// Inference-mode forward pass on a fresh tape.
    pub fn predict(&self, batch: &Batch) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward(&mut tape, &bound, &self.config, batch, &mut rng, false)?;
        Ok(Prediction {
            hidden: tape.value(out.hidden).clone(),
            probs: tape.value(out.probs).clone(),
            values: out.values.map(|v| tape.value(v).clone()),
        })
    }

    pub(crate) fn check_layout(&self) -> Result<()> {
        let expected = layout(&self.config)?;
        if expected.len() != self.store.len() {
            return Err(Error::config(format!(
                "parameter set has {} tensors but the configuration implies {}",
                self.store.len(),
                expected.len()
            )));
        }
        for ((name, shape, _), (have, t)) in expected.iter().zip(self.store.iter()) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(Error::config(format!(
                    "parameter {have} {:?} does not match configuration entry {name} {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Numeric(format!("parameter {name} holds non-finite values")));
            }
        }
        Ok(())
    }
}

/// Values of one inference pass, shaped `[batch, len, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub hidden: Tensor,
    pub probs: Tensor,
    pub values: Option<Tensor>,
}

/// Trainable-parameter total with a per-component breakdown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub breakdown: BTreeMap<String, usize>,
}

/// Counts every trainable scalar implied by `config`, embeddings and biases
/// included, without allocating the tensors.
pub fn count_params(config: &ModelConfig) -> Result<ParamCount> {
    let mut breakdown: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0;
    for (name, shape, _) in layout(config)? {
        let n: usize = shape.iter().product();
        let group = if name.starts_with("block") {
            let sub = name.split('.').nth(1).unwrap_or("");
            match sub {
                "attn" => "blocks.attention",
                "ff1" | "ff2" => "blocks.feedforward",
                _ => "blocks.layernorm",
            }
            .to_string()
        } else {
            name.rsplit_once('.').map(|x| x.0).unwrap_or(&name).split('.').take(2).collect::<Vec<_>>().join(".")
        };
        *breakdown.entry(group).or_default() += n;
        total += n;
    }
    Ok(ParamCount { total, breakdown })
}
