//! Batch command-line frontend: synthetic corpora, preprocessing,
//! pre-training, imputation, fine-tuning and embedding dumps.
//!
//! Every command resolves a [`RunConfig`] from an optional JSON file plus
//! flag overrides (flags win), builds its artifacts in a staging directory
//! next to `--out`, echoes the resolved configuration as `config.json`, and
//! moves everything into `--out` only once all outputs are written.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::corpus::synth::{generate_finetune_task, generate_synthetic_corpus, SynthConfig, TaskConfig};
use crate::corpus::{
    pad_batch, preprocess, read_events, read_shards, write_events, write_preprocessed, DatasetSpec, FinetuneDataset,
    LabBag, PreprocessConfig, Split, TaskKind,
};
use crate::ecdf::{EcdfSet, Vocab, VocabMode};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, ModelConfig, ModelKind, ModelParams, CHECKPOINT_MANIFEST};
use crate::train::{
    comparison_table, fit_linear_baseline, grid_search_finetune, impute_values, metric_name, prepare_finetune, pretrain,
    summarize_imputation, DecodeMethod, FinetuneConfig, FinetuneGrid, ImputationConfig, LinearBaselineConfig, LogRow,
    LogSplit, Summary, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "labrador", version, about = "Continuous masked-language modelling of lab-test bags")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic event corpus, its ground truth and a labelled task.
    Synth(SynthArgs),
    /// Build eCDFs, the vocabulary and masked bag shards from an event CSV.
    Preprocess(PreprocessArgs),
    /// Pre-train a model on preprocessed shards.
    Pretrain(PretrainArgs),
    /// Mask one value per bag and report imputation accuracy.
    Impute(ImputeArgs),
    /// Grid-search a head on a frozen base and compare with a linear model.
    Finetune(FinetuneArgs),
    /// Write per-position output embeddings as CSV.
    DumpEmbeddings(DumpArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// Continuous values with one token per code.
    Labrador,
    /// Decile tokens.
    Bert,
}

impl From<ModeArg> for VocabMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Labrador => VocabMode::Continuous,
            ModeArg::Bert => VocabMode::Decile,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON run configuration; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub patients: Option<usize>,
    #[arg(long)]
    pub codes: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Seed of both the corpus and the labelled task.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Samples in the labelled task.
    #[arg(long)]
    pub task_samples: Option<usize>,
    #[arg(long)]
    pub task: Option<TaskKind>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub min_count: Option<u64>,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub splits: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub shard_size: Option<usize>,
    /// Offline masks per bag.
    #[arg(long)]
    pub n_mask: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory of `preprocess`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub ff_dim: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint directory, or a pre-training run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// continuous, weighted-quantile or argmax; defaults to the model's native decode.
    #[arg(long)]
    pub decode: Option<DecodeMethod>,
    /// Evaluate freshly initialised weights instead of the checkpoint.
    #[arg(long)]
    pub ablation: bool,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Preprocessed directory holding the vocabulary and eCDFs of the base.
    #[arg(long)]
    pub data: PathBuf,
    /// Labelled CSV.
    #[arg(long)]
    pub dataset: PathBuf,
    /// JSON sidecar of the CSV; defaults to the CSV path with a `.json` extension.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Overrides the task kind declared in the sidecar.
    #[arg(long)]
    pub task: Option<TaskKind>,
    /// JSON hyperparameter grid with `epochs`, `batch_sizes`, `learning_rates` and `dropouts`.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip the linear baseline.
    #[arg(long)]
    pub no_baseline: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Dump at most this many bags.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Architecture sizes; the kind and vocabulary size come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub key_dim: Option<usize>,
    pub dropout: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let c = ModelConfig::labrador(1);
        Self {
            d_model: c.d_model,
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            ff_dim: c.ff_dim,
            key_dim: c.key_dim,
            dropout: c.dropout,
        }
    }
}

impl ModelSettings {
    pub fn resolve(&self, kind: ModelKind, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            kind,
            d_model: self.d_model,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ff_dim: self.ff_dim,
            key_dim: self.key_dim,
            dropout: self.dropout,
            vocab_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputeSettings {
    pub decode: Option<DecodeMethod>,
    pub ablation: bool,
    pub split: Split,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for ImputeSettings {
    fn default() -> Self {
        Self {
            decode: None,
            ablation: false,
            split: Split::Test,
            seed: 0,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DumpSettings {
    pub split: Split,
    pub limit: Option<usize>,
    pub batch_size: usize,
}

impl Default for DumpSettings {
    fn default() -> Self {
        Self {
            split: Split::Test,
            limit: None,
            batch_size: 256,
        }
    }
}

/// Parameters of every command; each command reads its own sections.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub task: TaskConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub impute: ImputeSettings,
    pub finetune: FinetuneConfig,
    pub baseline: LinearBaselineConfig,
    pub dump: DumpSettings,
}

impl RunConfig {
    /// Defaults, overlaid with the JSON file when one is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", p.display())))
            }
        }
    }
}

/// The `config.json` echoed into every run directory.
#[derive(Debug, Serialize)]
struct Resolved<'a> {
    command: &'a str,
    inputs: BTreeMap<&'a str, String>,
    config: &'a RunConfig,
}

/// Directory where a command assembles its outputs before they are moved
/// into place. Dropping it uncommitted removes everything except
/// non-finite-loss dumps, which are kept in the destination.
struct Staging {
    out: PathBuf,
    tmp: PathBuf,
    committed: bool,
}

impl Staging {
    fn begin(out: &Path) -> Result<Self> {
        let name = out
            .file_name()
            .ok_or_else(|| Error::config(format!("output path {} has no final component", out.display())))?;
        let parent = match out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| with_path(e, &parent))?;
        let tmp = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir(&tmp)?;
        Ok(Self {
            out: out.to_path_buf(),
            tmp,
            committed: false,
        })
    }

    fn path(&self) -> &Path {
        &self.tmp
    }

    fn join(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    fn write_resolved(&self, command: &str, inputs: &[(&'static str, &Path)], config: &RunConfig) -> Result<()> {
        let resolved = Resolved {
            command,
            inputs: inputs.iter().map(|(k, p)| (*k, p.display().to_string())).collect(),
            config,
        };
        fs::write(self.join("config.json"), serde_json::to_string_pretty(&resolved)?)?;
        Ok(())
    }

    fn commit(mut self) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        let mut entries: Vec<_> = fs::read_dir(&self.tmp)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let dest = self.out.join(entry.file_name());
            remove_path(&dest)?;
            fs::rename(entry.path(), &dest)?;
        }
        fs::remove_dir(&self.tmp)?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        if let Ok(entries) = fs::read_dir(&self.tmp) {
            for entry in entries.flatten() {
                let name = entry.file_name();
                if name.to_string_lossy().starts_with("nonfinite-") && fs::create_dir_all(&self.out).is_ok() {
                    let dest = self.out.join(&name);
                    if fs::rename(entry.path(), &dest).is_ok() {
                        log::warn!("kept diagnostic dump {}", dest.display());
                    }
                }
            }
        }
        if let Err(e) = fs::remove_dir_all(&self.tmp) {
            log::warn!("could not remove partial outputs in {}: {e}", self.tmp.display());
        }
    }
}

fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn remove_path(p: &Path) -> Result<()> {
    match fs::symlink_metadata(p) {
        Ok(m) if m.is_dir() => fs::remove_dir_all(p)?,
        Ok(_) => fs::remove_file(p)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

/// Output directory of `preprocess`.
pub struct DataDir {
    pub root: PathBuf,
    pub vocab: Vocab,
    pub ecdfs: EcdfSet,
}

impl DataDir {
    pub fn load(root: &Path) -> Result<Self> {
        Ok(Self {
            root: root.to_path_buf(),
            vocab: Vocab::load(&root.join("vocab.json"))?,
            ecdfs: EcdfSet::load(&root.join("ecdfs.json"))?,
        })
    }

    pub fn bags(&self, split: Split) -> Result<Vec<LabBag>> {
        read_shards(&self.root.join(split.name()))
    }
}

/// Accepts a checkpoint directory or a run directory holding
/// `checkpoints/final`.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join(CHECKPOINT_MANIFEST).is_file() {
        return Ok(path.to_path_buf());
    }
    let nested = path.join("checkpoints").join("final");
    if nested.join(CHECKPOINT_MANIFEST).is_file() {
        return Ok(nested);
    }
    Err(Error::config(format!("no checkpoint found at {}", path.display())))
}

/// Loads a checkpoint and checks it against the preprocessed data.
pub fn load_base(checkpoint: &Path, data: &DataDir) -> Result<ModelParams> {
    let dir = resolve_checkpoint(checkpoint)?;
    let (params, _) = load_checkpoint(&dir)?;
    params.config.check_vocab(&data.vocab).map_err(|e| {
        let detail = match e {
            Error::Config(m) => m,
            other => other.to_string(),
        };
        Error::Config(format!(
            "checkpoint {} does not fit data {}: {detail}",
            dir.display(),
            data.root.display()
        ))
    })?;
    Ok(params)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Impute(a) => cmd_impute(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::DumpEmbeddings(a) => cmd_dump_embeddings(a),
    }
}

pub fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(v) = a.patients {
        cfg.synth.patients = v;
    }
    if let Some(v) = a.codes {
        cfg.synth.codes = v;
    }
    if let Some(v) = a.latent_dim {
        cfg.synth.latent_dim = v;
    }
    if let Some(v) = a.seed {
        cfg.synth.seed = v;
        cfg.task.seed = v;
    }
    if let Some(v) = a.task_samples {
        cfg.task.samples = v;
    }
    if let Some(v) = a.task {
        cfg.task.task = v;
    }
    let corpus = generate_synthetic_corpus(&cfg.synth)?;
    let task = generate_finetune_task(&corpus.truth, &cfg.task)?;
    let stage = Staging::begin(&a.out)?;
    write_events(&stage.join("events.csv"), &corpus.events)?;
    corpus.truth.save(&stage.join("truth.json"))?;
    task.save(&stage.join("task.csv"), &stage.join("task.json"))?;
    stage.write_resolved("synth", &[], &cfg)?;
    stage.commit()?;
    println!(
        "{} events from {} patients over {} codes; {} task samples; written to {}",
        corpus.events.len(),
        cfg.synth.patients,
        cfg.synth.codes,
        task.len(),
        a.out.display()
    );
    Ok(())
}

pub fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let p = &mut cfg.preprocess;
    if let Some(v) = a.min_count {
        p.min_count = v;
    }
    if let Some(v) = &a.splits {
        p.splits = [v[0], v[1], v[2]];
    }
    if let Some(v) = a.mode {
        p.mode = v.into();
    }
    if let Some(v) = a.seed {
        p.seed = v;
    }
    if let Some(v) = a.shard_size {
        p.shard_size = v;
    }
    if let Some(v) = a.n_mask {
        p.n_mask = v;
    }
    let events = read_events(&a.events)?;
    let pre = preprocess(events, &cfg.preprocess)?;
    let stage = Staging::begin(&a.out)?;
    write_preprocessed(&pre, stage.path(), cfg.preprocess.shard_size)?;
    stage.write_resolved("preprocess", &[("events", &a.events)], &cfg)?;
    stage.commit()?;
    let s = &pre.summary;
    println!(
        "codes kept {} of {} ({} dropped, {} binary); vocab size {}",
        s.codes_kept, s.codes_in, s.codes_dropped, s.binary_codes, s.vocab_size
    );
    for (name, split) in &s.splits {
        println!(
            "{name}: {} patients, bags kept {}, dropped {}, out-of-vocabulary events {}",
            split.patients, split.bags_kept, split.bags_dropped, split.oov_events
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct PretrainReport {
    kind: ModelKind,
    num_params: usize,
    steps: usize,
    initial_val: Option<LogRow>,
    final_val: Option<LogRow>,
    final_train: Option<LogRow>,
}

pub fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let t = &mut cfg.train;
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = a.dropout {
        t.dropout = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.checkpoint_interval {
        t.checkpoint_interval = v;
    }
    let m = &mut cfg.model;
    if let Some(v) = a.d_model {
        m.d_model = v;
    }
    if let Some(v) = a.num_layers {
        m.num_layers = v;
    }
    if let Some(v) = a.num_heads {
        m.num_heads = v;
    }
    if let Some(v) = a.ff_dim {
        m.ff_dim = v;
    }
    cfg.train.validate()?;
    let data = DataDir::load(&a.data)?;
    let kind = ModelKind::for_mode(data.vocab.mode());
    let model = cfg.model.resolve(kind, ModelConfig::vocab_size_for(kind, &data.vocab));
    let mut params = ModelParams::init(model, cfg.train.seed)?;
    let train = data.bags(Split::Train)?;
    let val = data.bags(Split::Val)?;
    log::info!(
        "pre-training a {kind:?} model of {} parameters on {} training and {} validation bags",
        params.num_params(),
        train.len(),
        val.len()
    );
    let stage = Staging::begin(&a.out)?;
    stage.write_resolved("pretrain", &[("data", &a.data)], &cfg)?;
    let rows = pretrain(&mut params, &train, &val, &cfg.train, Some(stage.path()))?;
    let vals: Vec<&LogRow> = rows.iter().filter(|r| r.split == LogSplit::Val).collect();
    let report = PretrainReport {
        kind,
        num_params: params.num_params(),
        steps: cfg.train.steps,
        initial_val: vals.first().map(|r| **r),
        final_val: vals.last().map(|r| **r),
        final_train: rows.iter().rev().find(|r| r.split == LogSplit::Train).copied(),
    };
    fs::write(stage.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    stage.commit()?;
    if let (Some(first), Some(last)) = (report.initial_val, report.final_val) {
        println!(
            "validation perplexity {:.4} -> {:.4}, mse {} -> {}",
            first.perplexity,
            last.perplexity,
            fmt_opt(first.mse),
            fmt_opt(last.mse)
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

pub fn cmd_impute(a: ImputeArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let s = &mut cfg.impute;
    if let Some(v) = a.decode {
        s.decode = Some(v);
    }
    if a.ablation {
        s.ablation = true;
    }
    if let Some(v) = a.split {
        s.split = v.into();
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.batch_size {
        s.batch_size = v;
    }
    let data = DataDir::load(&a.data)?;
    let params = load_base(&a.checkpoint, &data)?;
    let method = cfg.impute.decode.unwrap_or(match params.config.kind {
        ModelKind::Labrador => DecodeMethod::Continuous,
        ModelKind::Bert => DecodeMethod::WeightedQuantile,
    });
    cfg.impute.decode = Some(method);
    let icfg = ImputationConfig {
        method,
        ablation: cfg.impute.ablation,
        seed: cfg.impute.seed,
        batch_size: cfg.impute.batch_size,
    };
    let bags = data.bags(cfg.impute.split)?;
    if bags.is_empty() {
        return Err(Error::contract(format!("split {} holds no bags", cfg.impute.split.name())));
    }
    let pairs = impute_values(&params, &bags, &data.vocab, &icfg)?;
    let report = summarize_imputation(&pairs, method, icfg.ablation)?;
    let stage = Staging::begin(&a.out)?;
    stage.write_resolved("impute", &[("checkpoint", &a.checkpoint), ("data", &a.data)], &cfg)?;
    report.save(&stage.join("report.json"))?;
    let mut w = csv::Writer::from_path(stage.join("imputations.csv")).map_err(csv_err)?;
    w.write_record(["code", "truth", "prediction"]).map_err(csv_err)?;
    for p in &pairs {
        w.write_record([p.code.clone(), p.truth.to_string(), p.prediction.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    drop(w);
    stage.commit()?;
    println!(
        "{} imputations ({}{}): r = {:.4}, r2 = {:.4}, mse = {:.5}",
        report.n,
        serde_json::to_value(method)?.as_str().unwrap_or_default(),
        if report.ablation { ", ablation" } else { "" },
        report.r,
        report.r2,
        report.mse
    );
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv {
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    }
}

#[derive(Debug, Serialize)]
struct FinetuneRunReport<'a> {
    task: TaskKind,
    metric: &'a str,
    samples: usize,
    base: ModelKind,
    grid: &'a crate::train::GridReport,
    baseline: Option<&'a crate::train::BaselineReport>,
}

pub fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(path) = &a.grid {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read grid {}: {e}", path.display())))?;
        cfg.finetune.grid = serde_json::from_str::<FinetuneGrid>(&text)
            .map_err(|e| Error::Config(format!("grid {}: {e}", path.display())))?;
    }
    if let Some(v) = a.folds {
        cfg.finetune.cv.k_folds = v;
    }
    if let Some(v) = a.replicates {
        cfg.finetune.cv.replicates = v;
    }
    if let Some(v) = a.seed {
        cfg.finetune.cv.seed = v;
    }
    let spec_path = a.spec.clone().unwrap_or_else(|| a.dataset.with_extension("json"));
    let mut spec: DatasetSpec = serde_json::from_str(&fs::read_to_string(&spec_path)?)?;
    if let Some(t) = a.task {
        spec.task = t;
    }
    let ds = FinetuneDataset::read_from(fs::File::open(&a.dataset)?, spec)?;
    let data = DataDir::load(&a.data)?;
    let base = load_base(&a.checkpoint, &data)?;
    cfg.finetune.check(ds.len())?;
    let features = prepare_finetune(&base, &ds, &data.vocab, &data.ecdfs)?;
    log::info!(
        "searching {} grid cells x {} replicates x {} folds on {} samples",
        cfg.finetune.grid.cells().len(),
        cfg.finetune.cv.replicates,
        cfg.finetune.cv.k_folds,
        ds.len()
    );
    let grid = grid_search_finetune(&features, &cfg.finetune)?;
    let baseline = if a.no_baseline {
        None
    } else {
        Some(fit_linear_baseline(&ds, &cfg.baseline, &cfg.finetune.cv)?)
    };
    let metric = metric_name(ds.spec.task);
    let base_name = match base.config.kind {
        ModelKind::Labrador => "labrador",
        ModelKind::Bert => "bert",
    };
    let mut rows: Vec<(&str, Summary)> = vec![(base_name, grid.best_cell().summary)];
    if let Some(b) = &baseline {
        rows.push((b.method.as_str(), b.best_cell().summary));
    }
    let table = comparison_table(metric, &rows);
    let report = FinetuneRunReport {
        task: ds.spec.task,
        metric,
        samples: ds.len(),
        base: base.config.kind,
        grid: &grid,
        baseline: baseline.as_ref(),
    };
    let stage = Staging::begin(&a.out)?;
    stage.write_resolved(
        "finetune",
        &[
            ("checkpoint", &a.checkpoint),
            ("data", &a.data),
            ("dataset", &a.dataset),
            ("spec", &spec_path),
        ],
        &cfg,
    )?;
    fs::write(stage.join("grid.csv"), grid.to_csv())?;
    fs::write(stage.join("comparison.csv"), &table)?;
    fs::write(stage.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    stage.commit()?;
    print!("{table}");
    Ok(())
}

pub fn cmd_dump_embeddings(a: DumpArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let s = &mut cfg.dump;
    if let Some(v) = a.split {
        s.split = v.into();
    }
    if let Some(v) = a.limit {
        s.limit = Some(v);
    }
    if let Some(v) = a.batch_size {
        s.batch_size = v;
    }
    if cfg.dump.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let data = DataDir::load(&a.data)?;
    let params = load_base(&a.checkpoint, &data)?;
    let mut bags: Vec<LabBag> = data.bags(cfg.dump.split)?.iter().map(LabBag::unmasked).collect();
    if let Some(n) = cfg.dump.limit {
        bags.truncate(n);
    }
    let d = params.config.d_model;
    let stage = Staging::begin(&a.out)?;
    stage.write_resolved("dump-embeddings", &[("checkpoint", &a.checkpoint), ("data", &a.data)], &cfg)?;
    let mut w = csv::Writer::from_path(stage.join("embeddings.csv")).map_err(csv_err)?;
    let mut header = vec!["bag".to_string(), "position".into(), "code".into(), "token".into(), "value".into()];
    header.extend((0..d).map(|k| format!("e{k}")));
    w.write_record(&header).map_err(csv_err)?;
    let mut bag_id = 0usize;
    for chunk in bags.chunks(cfg.dump.batch_size) {
        let refs: Vec<&LabBag> = chunk.iter().collect();
        let batch = pad_batch(&refs)?;
        let hidden = params.predict(&batch)?.hidden;
        let h = hidden.data();
        for (b, bag) in chunk.iter().enumerate() {
            for i in 0..bag.len() {
                let token = bag.tokens[i];
                let code = data
                    .vocab
                    .code_of(token)
                    .ok_or_else(|| Error::Vocab(format!("token {token} has no code")))?;
                let value = if bag.nulls[i] || params.config.kind == ModelKind::Bert {
                    String::new()
                } else {
                    bag.values[i].to_string()
                };
                let mut rec = vec![bag_id.to_string(), i.to_string(), code.to_string(), token.to_string(), value];
                let off = (b * batch.len + i) * d;
                rec.extend(h[off..off + d].iter().map(f64::to_string));
                w.write_record(&rec).map_err(csv_err)?;
            }
            bag_id += 1;
        }
    }
    w.flush()?;
    drop(w);
    stage.commit()?;
    println!("embeddings of {bag_id} bags written to {}", a.out.display());
    Ok(())
}
