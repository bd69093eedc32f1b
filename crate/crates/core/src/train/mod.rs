//! Pre-training, intrinsic imputation evaluation, frozen-base fine-tuning
//! and linear baselines.

mod baseline;
mod decode;
mod finetune;
mod imputation;
mod loss;
mod metrics;
mod pretrain;

pub use baseline::{
    baseline_design, fit_linear_baseline, fit_logistic, fit_ols, BaselineCell, BaselineReport, LinearBaselineConfig,
    LinearModel, LogisticModel, OlsModel, DEFAULT_C_GRID,
};
pub use decode::{argmax_decode, weighted_quantile_decode};
pub use finetune::{
    comparison_table, cross_validate, dataset_bags, evaluate_head, finetune_forward, grid_search_finetune, head_forward,
    init_head, kfold_assignments, metric_name, pool_embeddings, prepare_finetune, select_best, task_activation, task_loss,
    task_outputs, train_head, training_indices, CellReport, CvPlan, FinetuneConfig, FinetuneFeatures, FinetuneGrid, FinetuneOutput,
    GridReport, HeadHyper, HeadShape, Standardizer, Summary, TrainedHead,
};
pub use imputation::{
    evaluate_imputation, impute_values, summarize_imputation, CodeImputation, DecodeMethod, ImputationConfig,
    ImputationReport, ImputedPair,
};
pub use loss::{bert_mlm_loss, multitask_loss, pretraining_loss, LossParts};
pub use metrics::{mse, pearson_r, perplexity};
pub use pretrain::{evaluate_loss, pretrain, LogRow, LogSplit, LossSummary, RunPaths, TrainConfig, METRICS_HEADER};
