use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decode::{argmax_decode, weighted_quantile_decode};
use super::metrics::{mse, pearson_r};
use crate::corpus::{mask_positions, pad_batch, LabBag};
use crate::ecdf::{TokenSlot, Vocab};
use crate::error::{Error, Result};
use crate::model::{ModelKind, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMethod {
    /// Output of the continuous value head.
    Continuous,
    WeightedQuantile,
    Argmax,
}

impl std::str::FromStr for DecodeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(Self::Continuous),
            "weighted-quantile" => Ok(Self::WeightedQuantile),
            "argmax" => Ok(Self::Argmax),
            other => Err(Error::config(format!("unknown decode method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeImputation {
    pub code: String,
    pub n: usize,
    pub r: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationReport {
    pub method: DecodeMethod,
    pub ablation: bool,
    pub n: usize,
    pub r: f64,
    pub r2: f64,
    pub mse: f64,
    /// Codes with at least two evaluated pairs and defined correlation,
    /// sorted by `r` descending.
    pub per_code: Vec<CodeImputation>,
}

impl ImputationReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// One imputed value.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedPair {
    pub code: String,
    pub truth: f64,
    pub prediction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationConfig {
    pub method: DecodeMethod,
    /// Evaluates freshly initialised weights drawn with `seed` instead of
    /// the given parameters.
    pub ablation: bool,
    pub seed: u64,
    pub batch_size: usize,
}

/// Masks one uniformly chosen valued position per bag and predicts it.
///
/// Bags without a valued position are skipped. Under the decile vocabulary
/// only positions holding a decile token are eligible.
pub fn impute_values(params: &ModelParams, bags: &[LabBag], vocab: &Vocab, cfg: &ImputationConfig) -> Result<Vec<ImputedPair>> {
    let expected = match cfg.method {
        DecodeMethod::Continuous => ModelKind::Labrador,
        DecodeMethod::WeightedQuantile | DecodeMethod::Argmax => ModelKind::Bert,
    };
    if params.config.kind != expected {
        return Err(Error::config(format!(
            "{:?} decoding needs a {expected:?} model, got {:?}",
            cfg.method, params.config.kind
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let ablated;
    let params = if cfg.ablation {
        ablated = ModelParams::init(params.config.clone(), cfg.seed)?;
        &ablated
    } else {
        params
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mask = params.config.mask_token();
    let mut masked = Vec::new();
    for bag in bags {
        let bag = bag.unmasked();
        let mut eligible = Vec::new();
        for i in 0..bag.len() {
            if bag.nulls[i] {
                continue;
            }
            if expected == ModelKind::Bert && !matches!(vocab.slot(bag.tokens[i])?, TokenSlot::Decile { .. }) {
                continue;
            }
            eligible.push(i);
        }
        if eligible.is_empty() {
            continue;
        }
        let pos = eligible[rng.random_range(0..eligible.len())];
        masked.push(mask_positions(&bag, &[pos], mask)?);
    }
    if masked.is_empty() {
        return Err(Error::contract("no bag has a value to impute"));
    }
    let mut pairs = Vec::with_capacity(masked.len());
    for chunk in masked.chunks(cfg.batch_size) {
        let refs: Vec<&LabBag> = chunk.iter().collect();
        let batch = pad_batch(&refs)?;
        let pred = params.predict(&batch)?;
        for t in &batch.targets {
            let code = vocab
                .code_of(t.token)
                .ok_or_else(|| Error::Vocab(format!("masked token {} has no code", t.token)))?
                .to_string();
            let prediction = match cfg.method {
                DecodeMethod::Continuous => pred.values.as_ref().map(|v| v.data()[t.row]).ok_or_else(|| Error::config("model has no value head"))?,
                DecodeMethod::WeightedQuantile => weighted_quantile_decode(pred.probs.row(t.row), &code, vocab)?,
                DecodeMethod::Argmax => argmax_decode(pred.probs.row(t.row), &code, vocab)?,
            };
            pairs.push(ImputedPair {
                code,
                truth: t.value,
                prediction,
            });
        }
    }
    Ok(pairs)
}

/// Global and per-code agreement between imputations and truths.
pub fn summarize_imputation(pairs: &[ImputedPair], method: DecodeMethod, ablation: bool) -> Result<ImputationReport> {
    if pairs.is_empty() {
        return Err(Error::contract("no imputed values to summarize"));
    }
    let truths: Vec<f64> = pairs.iter().map(|p| p.truth).collect();
    let preds: Vec<f64> = pairs.iter().map(|p| p.prediction).collect();
    let r = pearson_r(&preds, &truths)?;
    let mut by_code: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for p in pairs {
        let e = by_code.entry(&p.code).or_default();
        e.0.push(p.prediction);
        e.1.push(p.truth);
    }
    let mut per_code = Vec::new();
    for (code, (ps, ts)) in by_code {
        if ps.len() < 2 {
            continue;
        }
        match pearson_r(&ps, &ts) {
            Ok(r) => per_code.push(CodeImputation {
                code: code.to_string(),
                n: ps.len(),
                r,
                r2: r * r,
            }),
            Err(Error::UndefinedCorrelation(msg)) => log::warn!("code {code}: {msg}"),
            Err(e) => return Err(e),
        }
    }
    per_code.sort_by(|a, b| b.r.total_cmp(&a.r).then_with(|| a.code.cmp(&b.code)));
    Ok(ImputationReport {
        method,
        ablation,
        n: pairs.len(),
        r,
        r2: r * r,
        mse: mse(&preds, &truths),
        per_code,
    })
}

/// Masks one value per bag, imputes it, and reports correlation with the
/// truth globally and per code.
pub fn evaluate_imputation(params: &ModelParams, bags: &[LabBag], vocab: &Vocab, cfg: &ImputationConfig) -> Result<ImputationReport> {
    if bags.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    let pairs = impute_values(params, bags, vocab, cfg)?;
    summarize_imputation(&pairs, cfg.method, cfg.ablation)
}
