use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{pad_batch, tokenize, Batch, FinetuneDataset, LabBag, LabEvent, TaskKind};
use crate::ecdf::{EcdfSet, Vocab};
use crate::error::{Error, Result};
use crate::model::{encode, ModelParams};
use crate::numerics::{glorot_uniform, AdamConfig, AdamState, Bound, ParamStore, Tape, Tensor, Var};

/// `mean (min, max)` of a metric across replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("cannot summarize zero values"));
        }
        Ok(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ({:.4}, {:.4})", self.mean, self.min, self.max)
    }
}

/// Held-out metric of a task: cross-entropy for classification, squared
/// error for regression.
pub fn metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Binary | TaskKind::Multiclass => "ce",
        TaskKind::Regression => "mse",
    }
}

/// Width of the final layer for a task.
pub fn task_outputs(task: TaskKind, classes: usize) -> usize {
    match task {
        TaskKind::Multiclass => classes,
        TaskKind::Binary | TaskKind::Regression => 1,
    }
}

/// Dimensions of a fine-tuning head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub pooled: usize,
    pub extras: usize,
    pub outputs: usize,
    pub task: TaskKind,
}

/// Glorot-initialised head: optional `ft.extra` (extras to extras),
/// `ft.hidden` (concatenation to itself) and `ft.out`.
pub fn init_head(shape: HeadShape, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let width = shape.pooled + shape.extras;
    let mut dense = |store: &mut ParamStore, name: &str, i: usize, o: usize| -> Result<()> {
        store.insert(format!("{name}.w"), glorot_uniform(i, o, &mut rng))?;
        store.insert(format!("{name}.b"), Tensor::zeros(&[o]))?;
        Ok(())
    };
    if shape.extras > 0 {
        dense(&mut store, "ft.extra", shape.extras, shape.extras)?;
    }
    dense(&mut store, "ft.hidden", width, width)?;
    dense(&mut store, "ft.out", width, shape.outputs)?;
    Ok(store)
}

fn dense(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.var(&format!("{name}.w")))?;
    tape.add_bias(y, p.var(&format!("{name}.b")))
}

/// Head on pooled embeddings `[b, d]` and standardized extras `[b, E]`;
/// returns pre-activation outputs `[b, K]`.
pub fn head_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    head: &Bound,
    pooled: Var,
    extras: Option<Var>,
    dropout: f64,
    rng: &mut R,
    training: bool,
) -> Result<Var> {
    let hidden_in = tape.value(head.var("ft.hidden.w")).shape()[0];
    let d = tape.value(pooled).cols();
    let e = extras.map_or(0, |x| tape.value(x).cols());
    if hidden_in != d + e {
        return Err(Error::config(format!(
            "head expects {hidden_in} input features but got {d} pooled plus {e} extra"
        )));
    }
    let x = match extras {
        Some(x) if e > 0 => {
            let z = dense(tape, head, "ft.extra", x)?;
            let z = tape.relu(z);
            tape.concat(pooled, z)?
        }
        _ => pooled,
    };
    let h = dense(tape, head, "ft.hidden", x)?;
    let h = tape.relu(h);
    let h = tape.dropout(h, dropout, rng, training)?;
    dense(tape, head, "ft.out", h)
}

/// Task activation: sigmoid, softmax or identity.
pub fn task_activation(tape: &mut Tape, logits: Var, task: TaskKind) -> Result<Var> {
    Ok(match task {
        TaskKind::Binary => tape.sigmoid(logits),
        TaskKind::Multiclass => tape.softmax(logits, 1)?,
        TaskKind::Regression => logits,
    })
}

/// Mean task loss of pre-activation outputs against labels.
pub fn task_loss(tape: &mut Tape, logits: Var, labels: &[f64], task: TaskKind) -> Result<Var> {
    let n = tape.value(logits).rows();
    if labels.len() != n {
        return Err(Error::dim(format!("{n} predictions for {} labels", labels.len())));
    }
    match task {
        TaskKind::Binary => tape.bce_with_logits(logits, labels),
        TaskKind::Multiclass => {
            let classes = tape.value(logits).cols();
            let cols: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
            if let Some(bad) = cols.iter().find(|&&c| c >= classes) {
                return Err(Error::config(format!("label {bad} outside the {classes}-class head")));
            }
            let logp = tape.log_softmax(logits)?;
            let picked = tape.pick(logp, &cols)?;
            let mean = tape.mean(picked);
            Ok(tape.scale(mean, -1.0))
        }
        TaskKind::Regression => {
            let y = tape.constant(Tensor::new(vec![n, 1], labels.to_vec())?);
            let diff = tape.sub(logits, y)?;
            let sq = tape.mul(diff, diff)?;
            Ok(tape.mean(sq))
        }
    }
}

/// Handles of a full fine-tuning pass.
#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub pooled: Var,
    pub logits: Var,
    pub prediction: Var,
    /// Base-model parameters on the tape, recorded as constants.
    pub base_vars: Vec<Var>,
}

/// Frozen base model, mean pooling over non-pad positions, then the head.
/// `extras` is row-major `[batch, E]`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    base: &ModelParams,
    head: &Bound,
    batch: &Batch,
    extras: &[f64],
    task: TaskKind,
    dropout: f64,
    rng: &mut R,
    training: bool,
) -> Result<FinetuneOutput> {
    let frozen = base.store.bind(tape, false);
    let hidden = encode(tape, &frozen, &base.config, batch, rng, false)?;
    let pooled = tape.mean_pool(hidden, batch.len, &batch.pad)?;
    let extras = if extras.is_empty() {
        None
    } else {
        if !extras.len().is_multiple_of(batch.batch) {
            return Err(Error::dim(format!("{} extra values for {} samples", extras.len(), batch.batch)));
        }
        let e = extras.len() / batch.batch;
        Some(tape.constant(Tensor::new(vec![batch.batch, e], extras.to_vec())?))
    };
    let logits = head_forward(tape, head, pooled, extras, dropout, rng, training)?;
    let prediction = task_activation(tape, logits, task)?;
    Ok(FinetuneOutput {
        pooled,
        logits,
        prediction,
        base_vars: frozen.vars().to_vec(),
    })
}

/// One bag per sample from its measured in-vocabulary labs.
pub fn dataset_bags(ds: &FinetuneDataset, vocab: &Vocab, ecdfs: &EcdfSet) -> Result<Vec<LabBag>> {
    let mut skipped = 0usize;
    let mut out = Vec::with_capacity(ds.len());
    for (i, row) in ds.labs.iter().enumerate() {
        let (mut tokens, mut values, mut nulls) = (Vec::new(), Vec::new(), Vec::new());
        for (code, value) in ds.lab_codes.iter().zip(row) {
            let Some(value) = value else { continue };
            if !vocab.contains(code) {
                skipped += 1;
                continue;
            }
            let e = LabEvent {
                patient_id: String::new(),
                chart_time: 0,
                code: code.clone(),
                value: Some(*value),
            };
            let (t, v, n) = tokenize(&e, vocab, ecdfs)?;
            tokens.push(t);
            values.push(v);
            nulls.push(n);
        }
        if tokens.is_empty() {
            return Err(Error::data(format!("sample {i} has no measured in-vocabulary lab")));
        }
        out.push(LabBag::new(tokens, values, nulls)?);
    }
    if skipped > 0 {
        log::warn!("{skipped} lab values with out-of-vocabulary codes ignored");
    }
    Ok(out)
}

/// Mean-pooled final embeddings `[n, d]` of the frozen base model.
pub fn pool_embeddings(base: &ModelParams, bags: &[LabBag], batch_size: usize) -> Result<Tensor> {
    if bags.is_empty() || batch_size == 0 {
        return Err(Error::contract("pooling needs bags and a positive batch size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut data = Vec::with_capacity(bags.len() * base.config.d_model);
    for chunk in bags.chunks(batch_size) {
        let refs: Vec<&LabBag> = chunk.iter().collect();
        let batch = pad_batch(&refs)?;
        let mut tape = Tape::new();
        let p = base.store.bind(&mut tape, false);
        let hidden = encode(&mut tape, &p, &base.config, &batch, &mut rng, false)?;
        let pooled = tape.mean_pool(hidden, batch.len, &batch.pad)?;
        data.extend_from_slice(tape.value(pooled).data());
    }
    Tensor::new(vec![bags.len(), base.config.d_model], data)
}

/// Fine-tuning inputs with the frozen base already applied.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneFeatures {
    pub pooled: Tensor,
    /// `[sample][extra column]`, missing entries unimputed.
    pub extras: Vec<Vec<Option<f64>>>,
    pub labels: Vec<f64>,
    pub task: TaskKind,
    pub outputs: usize,
}

impl FinetuneFeatures {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn shape(&self) -> HeadShape {
        HeadShape {
            pooled: self.pooled.cols(),
            extras: self.extras.first().map_or(0, Vec::len),
            outputs: self.outputs,
            task: self.task,
        }
    }
}

/// Pools every sample of `ds` through the frozen base model.
pub fn prepare_finetune(base: &ModelParams, ds: &FinetuneDataset, vocab: &Vocab, ecdfs: &EcdfSet) -> Result<FinetuneFeatures> {
    let bags = dataset_bags(ds, vocab, ecdfs)?;
    Ok(FinetuneFeatures {
        pooled: pool_embeddings(base, &bags, 64)?,
        extras: ds.extras.clone(),
        labels: ds.labels.clone(),
        task: ds.spec.task,
        outputs: task_outputs(ds.spec.task, ds.num_classes()),
    })
}

/// Held-out index sets of a shuffled k-fold partition.
pub fn kfold_assignments(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(Error::config(format!("cannot split {n} samples into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, idx) in order.into_iter().enumerate() {
        folds[i % k].push(idx);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Complement of a held-out fold.
pub fn training_indices(n: usize, held_out: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    held_out.iter().for_each(|&i| mask[i] = false);
    (0..n).filter(|&i| mask[i]).collect()
}

/// Per-column mean and standard deviation fitted on a training fold;
/// missing entries map to the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<Option<f64>>], idx: &[usize]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; cols];
        let mut std = vec![1.0; cols];
        for c in 0..cols {
            let vals: Vec<f64> = idx.iter().filter_map(|&i| rows[i][c]).collect();
            if vals.is_empty() {
                continue;
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
            mean[c] = m;
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn transform(&self, row: &[Option<f64>]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(c, v)| v.map_or(0.0, |v| (v - self.mean[c]) / self.std[c]))
            .collect()
    }

    fn rows(&self, rows: &[Vec<Option<f64>>], idx: &[usize]) -> Vec<f64> {
        idx.iter().flat_map(|&i| self.transform(&rows[i])).collect()
    }
}

/// One point of the fine-tuning grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
}

/// A trained head plus the extras standardization of its training fold.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    pub params: ParamStore,
    pub standardizer: Standardizer,
    pub shape: HeadShape,
}

fn pooled_rows(pooled: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let d = pooled.cols();
    Tensor::new(vec![idx.len(), d], idx.iter().flat_map(|&i| pooled.row(i).iter().copied()).collect())
}

fn head_inputs(tape: &mut Tape, f: &FinetuneFeatures, std: &Standardizer, idx: &[usize]) -> Result<(Var, Option<Var>)> {
    let pooled = tape.constant(pooled_rows(&f.pooled, idx)?);
    let e = std.mean.len();
    let extras = if e > 0 {
        Some(tape.constant(Tensor::new(vec![idx.len(), e], std.rows(&f.extras, idx))?))
    } else {
        None
    };
    Ok((pooled, extras))
}

/// Adam on the head only, minibatches reshuffled every epoch.
pub fn train_head(f: &FinetuneFeatures, train: &[usize], hyper: &HeadHyper, seed: u64) -> Result<TrainedHead> {
    if train.is_empty() || hyper.batch_size == 0 || hyper.epochs == 0 {
        return Err(Error::config("head training needs samples, epochs and a positive batch size"));
    }
    let shape = f.shape();
    let standardizer = Standardizer::fit(&f.extras, train);
    let mut params = init_head(shape, seed)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(hyper.learning_rate), &params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut order = train.to_vec();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(hyper.batch_size) {
            let mut tape = Tape::new();
            let head = params.bind(&mut tape, true);
            let (pooled, extras) = head_inputs(&mut tape, f, &standardizer, idx)?;
            let logits = head_forward(&mut tape, &head, pooled, extras, hyper.dropout, &mut rng, true)?;
            let labels: Vec<f64> = idx.iter().map(|&i| f.labels[i]).collect();
            let loss = task_loss(&mut tape, logits, &labels, f.task)?;
            if !tape.value(loss).item().is_finite() {
                return Err(Error::Numeric(format!("non-finite fine-tuning loss on samples {idx:?}")));
            }
            tape.backward(loss)?;
            let grads = head.grads(&tape);
            adam.step(&mut params, &grads)?;
        }
    }
    Ok(TrainedHead {
        params,
        standardizer,
        shape,
    })
}

/// Task metric of a trained head on `idx`.
pub fn evaluate_head(f: &FinetuneFeatures, head: &TrainedHead, idx: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = head.params.bind(&mut tape, false);
    let (pooled, extras) = head_inputs(&mut tape, f, &head.standardizer, idx)?;
    let logits = head_forward(&mut tape, &p, pooled, extras, 0.0, &mut ChaCha8Rng::seed_from_u64(0), false)?;
    let labels: Vec<f64> = idx.iter().map(|&i| f.labels[i]).collect();
    let loss = task_loss(&mut tape, logits, &labels, f.task)?;
    Ok(tape.value(loss).item())
}

/// Head seed for one fold of one replicate.
fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64)
}

/// Mean held-out metric over the folds of one replicate.
pub fn cross_validate(f: &FinetuneFeatures, hyper: &HeadHyper, folds: &[Vec<usize>], seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (k, held) in folds.iter().enumerate() {
        let train = training_indices(f.len(), held);
        let head = train_head(f, &train, hyper, fold_seed(seed, k))?;
        total += evaluate_head(f, &head, held)?;
    }
    Ok(total / folds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneGrid {
    pub epochs: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub dropouts: Vec<f64>,
}

impl Default for FinetuneGrid {
    fn default() -> Self {
        Self {
            epochs: vec![30, 60, 90],
            batch_sizes: vec![16, 32, 64],
            learning_rates: vec![1e-4, 3e-4, 5e-4, 1e-3],
            dropouts: vec![0.1, 0.3, 0.5, 0.7],
        }
    }
}

impl FinetuneGrid {
    pub fn single(hyper: HeadHyper) -> Self {
        Self {
            epochs: vec![hyper.epochs],
            batch_sizes: vec![hyper.batch_size],
            learning_rates: vec![hyper.learning_rate],
            dropouts: vec![hyper.dropout],
        }
    }

    pub fn cells(&self) -> Vec<HeadHyper> {
        let mut out = Vec::new();
        for &epochs in &self.epochs {
            for &batch_size in &self.batch_sizes {
                for &learning_rate in &self.learning_rates {
                    for &dropout in &self.dropouts {
                        out.push(HeadHyper {
                            epochs,
                            batch_size,
                            learning_rate,
                            dropout,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Cross-validation plan shared by every method compared on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvPlan {
    pub k_folds: usize,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self {
            k_folds: 5,
            replicates: 5,
            seed: 0,
        }
    }
}

impl CvPlan {
    /// Fold assignment of replicate `r`.
    pub fn folds(&self, n: usize, r: usize) -> Result<Vec<Vec<usize>>> {
        kfold_assignments(n, self.k_folds, self.replicate_seed(r))
    }

    pub fn replicate_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add(r as u64)
    }

    /// Fold assignments of every replicate.
    pub fn all_folds(&self, n: usize) -> Result<Vec<Vec<Vec<usize>>>> {
        if self.replicates == 0 {
            return Err(Error::config("replicates must be at least 1"));
        }
        (0..self.replicates).map(|r| self.folds(n, r)).collect()
    }

    /// Size of the smallest training fold.
    pub fn smallest_training_fold(&self, n: usize) -> Result<usize> {
        let folds = kfold_assignments(n, self.k_folds, self.seed)?;
        Ok(n - folds.iter().map(Vec::len).max().unwrap_or(0))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub grid: FinetuneGrid,
    #[serde(flatten)]
    pub cv: CvPlan,
}

impl FinetuneConfig {
    /// Rejects empty grids and training folds smaller than a batch.
    pub fn check(&self, n: usize) -> Result<()> {
        if self.cv.replicates == 0 {
            return Err(Error::config("replicates must be at least 1"));
        }
        let cells = self.grid.cells();
        if cells.is_empty() {
            return Err(Error::config("fine-tuning grid is empty"));
        }
        let smallest = self.cv.smallest_training_fold(n)?;
        if let Some(c) = cells.iter().find(|c| c.batch_size > smallest) {
            return Err(Error::config(format!(
                "training fold of {smallest} samples is smaller than batch size {}",
                c.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub hyper: HeadHyper,
    /// Mean held-out metric of each replicate.
    pub replicates: Vec<f64>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub metric: String,
    pub cells: Vec<CellReport>,
    pub best: usize,
}

impl GridReport {
    pub fn best_cell(&self) -> &CellReport {
        &self.cells[self.best]
    }

    /// `epochs,batch_size,learning_rate,dropout,mean,min,max` per cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epochs,batch_size,learning_rate,dropout,mean,min,max\n");
        for c in &self.cells {
            let h = c.hyper;
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                h.epochs, h.batch_size, h.learning_rate, h.dropout, c.summary.mean, c.summary.min, c.summary.max
            ));
        }
        s
    }
}

/// Index of the lowest mean metric; ties go to fewer epochs, then a smaller
/// learning rate, then grid order.
pub fn select_best(cells: &[CellReport]) -> Option<usize> {
    (0..cells.len()).min_by(|&a, &b| {
        let (x, y) = (&cells[a], &cells[b]);
        x.summary
            .mean
            .total_cmp(&y.summary.mean)
            .then(x.hyper.epochs.cmp(&y.hyper.epochs))
            .then(x.hyper.learning_rate.total_cmp(&y.hyper.learning_rate))
            .then(a.cmp(&b))
    })
}

/// Exhaustive grid with k-fold cross-validation per cell, repeated over
/// replicate seeds. Cells run in parallel.
pub fn grid_search_finetune(f: &FinetuneFeatures, cfg: &FinetuneConfig) -> Result<GridReport> {
    cfg.check(f.len())?;
    let folds = cfg.cv.all_folds(f.len())?;
    let cells = cfg
        .grid
        .cells()
        .into_par_iter()
        .map(|hyper| {
            let replicates = folds
                .iter()
                .enumerate()
                .map(|(r, folds)| cross_validate(f, &hyper, folds, cfg.cv.replicate_seed(r)))
                .collect::<Result<Vec<_>>>()?;
            Ok(CellReport {
                hyper,
                summary: Summary::of(&replicates)?,
                replicates,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = select_best(&cells).ok_or_else(|| Error::config("fine-tuning grid is empty"))?;
    Ok(GridReport {
        metric: metric_name(f.task).to_string(),
        cells,
        best,
    })
}

/// One row per method: `method,metric,mean,min,max,formatted`.
pub fn comparison_table(metric: &str, rows: &[(&str, Summary)]) -> String {
    let mut s = String::from("method,metric,mean,min,max,mean (min, max)\n");
    for (name, sm) in rows {
        s.push_str(&format!("{name},{metric},{},{},{},\"{sm}\"\n", sm.mean, sm.min, sm.max));
    }
    s
}
