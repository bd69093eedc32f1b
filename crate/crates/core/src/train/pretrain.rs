use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::pretraining_loss;
use super::metrics::perplexity;
use crate::corpus::{mask_bag, pad_batch, Batch, LabBag};
use crate::error::{Error, Result};
use crate::model::{forward, save_checkpoint, ModelParams};
use crate::numerics::{AdamConfig, AdamState, ExactSum, Tape};

/// Header of the metrics log.
pub const METRICS_HEADER: &str = "step,split,ce,mse,perplexity";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Steps between validation passes and checkpoints.
    pub checkpoint_interval: usize,
    /// Masks drawn per training bag.
    pub mask_count: usize,
    /// Redraws training masks every time a bag is sampled; otherwise the
    /// masks stored with the bags are used.
    pub online_masking: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 256,
            learning_rate: 1e-5,
            dropout: 0.1,
            seed: 0,
            checkpoint_interval: 14_000,
            mask_count: 1,
            online_masking: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.batch_size == 0 || self.checkpoint_interval == 0 || self.mask_count == 0 {
            return Err(Error::config("batch_size, checkpoint_interval and mask_count must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be finite and nonnegative", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub split: LogSplit,
    pub ce: f64,
    pub mse: Option<f64>,
    pub perplexity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogSplit {
    Train,
    Val,
}

impl LogRow {
    pub fn csv_line(&self) -> String {
        let split = match self.split {
            LogSplit::Train => "train",
            LogSplit::Val => "val",
        };
        let mse = self.mse.map(|m| m.to_string()).unwrap_or_default();
        format!("{},{split},{},{mse},{}", self.step, self.ce, self.perplexity)
    }
}

/// Position-weighted losses over a whole evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub ce: f64,
    pub mse: Option<f64>,
    pub perplexity: f64,
    pub masked: usize,
    pub valued: usize,
}

/// Inference-mode losses of pre-masked `bags`, weighting every masked
/// position equally.
pub fn evaluate_loss(params: &ModelParams, bags: &[LabBag], batch_size: usize) -> Result<LossSummary> {
    if bags.is_empty() || batch_size == 0 {
        return Err(Error::contract("loss evaluation needs bags and a positive batch size"));
    }
    let mut ce = ExactSum::new();
    let mut se = ExactSum::new();
    let (mut masked, mut valued) = (0, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in bags.chunks(batch_size) {
        let refs: Vec<&LabBag> = chunk.iter().collect();
        let batch = pad_batch(&refs)?;
        let mut tape = Tape::new();
        let p = params.store.bind(&mut tape, false);
        let out = forward(&mut tape, &p, &params.config, &batch, &mut rng, false)?;
        let parts = pretraining_loss(&mut tape, &out, &batch)?;
        ce.add(tape.value(parts.ce).item() * parts.masked as f64);
        masked += parts.masked;
        if let Some(m) = parts.mse {
            se.add(tape.value(m).item() * parts.valued as f64);
            valued += parts.valued;
        }
    }
    let ce = ce.value() / masked as f64;
    Ok(LossSummary {
        ce,
        mse: (valued > 0).then(|| se.value() / valued as f64),
        perplexity: perplexity(ce),
        masked,
        valued,
    })
}

/// Artifacts written under the run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub metrics: PathBuf,
    pub checkpoints: PathBuf,
}

impl RunPaths {
    pub fn under(out: &Path) -> Self {
        Self {
            metrics: out.join("metrics.csv"),
            checkpoints: out.join("checkpoints"),
        }
    }
}

struct Logger {
    rows: Vec<LogRow>,
    file: Option<File>,
}

impl Logger {
    fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", row.csv_line())?;
        }
        self.rows.push(row);
        Ok(())
    }
}

/// Adam pre-training on masked bags.
///
/// Logs the training loss of every step and the validation loss at step 0,
/// every `checkpoint_interval` steps and at the last step. When `out` is
/// given the log goes to `metrics.csv` and checkpoints to
/// `checkpoints/step-NNNNNNN` plus `checkpoints/final`.
pub fn pretrain(
    params: &mut ModelParams,
    train: &[LabBag],
    val: &[LabBag],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract("pre-training needs nonempty training and validation sets"));
    }
    let paths = out.map(RunPaths::under);
    let mut log = Logger {
        rows: Vec::new(),
        file: None,
    };
    if let Some(p) = &paths {
        std::fs::create_dir_all(&p.checkpoints)?;
        let mut f = File::create(&p.metrics)?;
        writeln!(f, "{METRICS_HEADER}")?;
        log.file = Some(f);
    }
    let mut run_cfg = params.config.clone();
    run_cfg.dropout = cfg.dropout;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.learning_rate), &params.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mask = params.config.mask_token();
    let base: Vec<LabBag> = if cfg.online_masking {
        train.iter().map(LabBag::unmasked).collect()
    } else {
        train.to_vec()
    };
    let mut order: Vec<usize> = Vec::new();

    validate_into(&mut log, params, val, cfg, 0)?;
    for step in 1..=cfg.steps {
        let mut bags = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..base.len()).collect();
                order.shuffle(&mut rng);
            }
            let bag = &base[order.pop().expect("refilled above")];
            bags.push(if cfg.online_masking {
                mask_bag(bag, &mut rng, cfg.mask_count.min(bag.len()), mask)?
            } else {
                bag.clone()
            });
        }
        let refs: Vec<&LabBag> = bags.iter().collect();
        let batch = pad_batch(&refs)?;
        let mut tape = Tape::new();
        let bound = params.store.bind(&mut tape, true);
        let parts = match forward(&mut tape, &bound, &run_cfg, &batch, &mut rng, true)
            .and_then(|out| pretraining_loss(&mut tape, &out, &batch))
        {
            Ok(parts) => parts,
            Err(Error::Numeric(why)) => {
                log::error!("{why}");
                return Err(non_finite(step, f64::NAN, &bags, &batch, paths.as_ref()));
            }
            Err(e) => return Err(e),
        };
        let loss = tape.value(parts.total).item();
        let ce = tape.value(parts.ce).item();
        if !loss.is_finite() {
            return Err(non_finite(step, loss, &bags, &batch, paths.as_ref()));
        }
        tape.backward(parts.total)?;
        let grads = bound.grads(&tape);
        if let Some(bad) = grads.iter().position(|g| !g.all_finite()) {
            log::error!("non-finite gradient for {}", params.store.names()[bad]);
            return Err(non_finite(step, loss, &bags, &batch, paths.as_ref()));
        }
        adam.step(&mut params.store, &grads)?;
        log.push(LogRow {
            step,
            split: LogSplit::Train,
            ce,
            mse: parts.mse.map(|m| tape.value(m).item()),
            perplexity: perplexity(ce),
        })?;
        if step % cfg.checkpoint_interval == 0 || step == cfg.steps {
            validate_into(&mut log, params, val, cfg, step)?;
            if let Some(p) = &paths {
                save_checkpoint(params, step as u64, &p.checkpoints.join(format!("step-{step:07}")))?;
            }
        }
    }
    if let Some(p) = &paths {
        save_checkpoint(params, cfg.steps as u64, &p.checkpoints.join("final"))?;
    }
    Ok(log.rows)
}

fn validate_into(log: &mut Logger, params: &ModelParams, val: &[LabBag], cfg: &TrainConfig, step: usize) -> Result<()> {
    let s = evaluate_loss(params, val, cfg.batch_size)?;
    log::info!("step {step}: val ce {:.5} mse {:?} perplexity {:.4}", s.ce, s.mse, s.perplexity);
    log.push(LogRow {
        step,
        split: LogSplit::Val,
        ce: s.ce,
        mse: s.mse,
        perplexity: s.perplexity,
    })
}

/// Builds the abort error, writing the offending bags beside the log.
fn non_finite(step: usize, loss: f64, bags: &[LabBag], batch: &Batch, paths: Option<&RunPaths>) -> Error {
    let mut msg = format!(
        "non-finite training loss {loss} at step {step} (batch of {} bags, padded length {}, {} masked positions)",
        batch.batch,
        batch.len,
        batch.targets.len()
    );
    if let Some(p) = paths {
        let dump = p.metrics.with_file_name(format!("nonfinite-step-{step}.json"));
        match serde_json::to_string(bags).map_err(Error::from).and_then(|s| Ok(std::fs::write(&dump, s)?)) {
            Ok(()) => msg.push_str(&format!("; batch written to {}", dump.display())),
            Err(e) => msg.push_str(&format!("; batch dump failed: {e}")),
        }
    } else {
        msg.push_str(&format!("; bags: {}", serde_json::to_string(bags).unwrap_or_default()));
    }
    Error::Numeric(msg)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::model::ModelConfig;

    fn bags(seed: u64, n: usize, codes: u32, masked: bool) -> Vec<LabBag> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let l = rng.random_range(3..7);
                let tokens: Vec<u32> = (0..l).map(|_| rng.random_range(1..=codes)).collect();
                let values = tokens.iter().map(|&t| (t as f64 / codes as f64 + rng.random::<f64>() * 0.1).min(1.0)).collect();
                let bag = LabBag::new(tokens, values, vec![false; l]).unwrap();
                if masked {
                    mask_bag(&bag, &mut rng, 1, codes + 1).unwrap()
                } else {
                    bag
                }
            })
            .collect()
    }

    fn tiny() -> ModelParams {
        let cfg = ModelConfig {
            d_model: 8,
            num_layers: 1,
            num_heads: 2,
            ff_dim: 8,
            ..ModelConfig::labrador(5)
        };
        ModelParams::init(cfg, 0).unwrap()
    }

    fn train_cfg(steps: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 8,
            learning_rate: lr,
            checkpoint_interval: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut p = tiny();
        let before = p.clone();
        let rows = pretrain(&mut p, &bags(1, 40, 5, true), &bags(2, 20, 5, true), &train_cfg(6, 0.0), None).unwrap();
        assert_eq!(p, before);
        let val: Vec<f64> = rows.iter().filter(|r| r.split == LogSplit::Val).map(|r| r.ce).collect();
        assert_eq!(val.len(), 3);
        assert!(val.iter().all(|&c| c == val[0]));
    }

    #[test]
    fn training_is_deterministic_and_logs_to_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (train, val) = (bags(1, 40, 5, true), bags(2, 20, 5, true));
        let mut a = tiny();
        let rows = pretrain(&mut a, &train, &val, &train_cfg(10, 1e-2), Some(dir.path())).unwrap();
        let mut b = tiny();
        let again = pretrain(&mut b, &train, &val, &train_cfg(10, 1e-2), None).unwrap();
        assert_eq!(rows, again);
        assert_eq!(a, b);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 1 + 10 + 3);
        let (back, step) = crate::model::load_checkpoint(&dir.path().join("checkpoints/final")).unwrap();
        assert_eq!(step, 10);
        assert_eq!(back, a);
        assert!(dir.path().join("checkpoints/step-0000005").exists());
    }

    #[test]
    fn offline_masks_are_used_verbatim() {
        let train = bags(1, 10, 5, true);
        let mut p = tiny();
        let cfg = TrainConfig {
            online_masking: false,
            ..train_cfg(3, 1e-3)
        };
        pretrain(&mut p, &train, &bags(2, 5, 5, true), &cfg, None).unwrap();
        let unmasked = bags(1, 10, 5, false);
        assert!(matches!(
            pretrain(&mut p, &unmasked, &bags(2, 5, 5, true), &cfg, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn loss_decreases_on_learnable_data() {
        let (train, val) = (bags(1, 200, 5, true), bags(2, 50, 5, true));
        let mut p = tiny();
        let rows = pretrain(&mut p, &train, &val, &train_cfg(150, 3e-3), None).unwrap();
        let val: Vec<&LogRow> = rows.iter().filter(|r| r.split == LogSplit::Val).collect();
        let (first, last) = (val[0], val[val.len() - 1]);
        assert!(last.ce < first.ce, "{first:?} -> {last:?}");
        assert!(last.mse.unwrap() < first.mse.unwrap());
    }

    #[test]
    fn non_finite_loss_aborts_with_dump() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = tiny();
        let err = pretrain(&mut p, &bags(1, 10, 5, true), &bags(2, 5, 5, true), &train_cfg(3, 1e300), Some(dir.path()));
        let Err(Error::Numeric(msg)) = err else { panic!("{err:?}") };
        assert!(msg.contains("step 2"), "{msg}");
        let dump = std::fs::read_to_string(dir.path().join("nonfinite-step-2.json")).unwrap();
        let dumped: Vec<LabBag> = serde_json::from_str(&dump).unwrap();
        assert_eq!(dumped.len(), 8);
    }

    #[test]
    fn config_errors() {
        let mut p = tiny();
        let b = bags(1, 10, 5, true);
        for cfg in [train_cfg(0, 1e-3), train_cfg(3, -1.0), TrainConfig { dropout: 1.0, ..train_cfg(3, 1e-3) }] {
            assert!(matches!(pretrain(&mut p, &b, &b, &cfg, None), Err(Error::Config(_))));
        }
    }
}
