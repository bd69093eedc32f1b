use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::finetune::{metric_name, task_outputs, training_indices, CvPlan, Standardizer, Summary};
use crate::corpus::{FinetuneDataset, TaskKind};
use crate::error::{Error, Result};

/// Inverse L2 strengths tried for logistic regression.
pub const DEFAULT_C_GRID: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearBaselineConfig {
    pub c_grid: Vec<f64>,
    pub max_iters: u64,
}

impl Default for LinearBaselineConfig {
    fn default() -> Self {
        Self {
            c_grid: DEFAULT_C_GRID.to_vec(),
            max_iters: 200,
        }
    }
}

/// Logistic regression with `outputs` logits (one for binary tasks).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub features: usize,
    pub outputs: usize,
    /// `[features][outputs]`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LogisticModel {
    fn from_theta(theta: &[f64], features: usize, outputs: usize) -> Self {
        Self {
            features,
            outputs,
            weights: theta[..features * outputs].to_vec(),
            bias: theta[features * outputs..].to_vec(),
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|k| self.bias[k] + (0..self.features).map(|j| x[j] * self.weights[j * self.outputs + k]).sum::<f64>())
            .collect()
    }

    /// Mean cross-entropy on labelled rows.
    pub fn cross_entropy(&self, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        xs.iter()
            .zip(ys)
            .map(|(x, &y)| sample_loss(&self.logits(x), y).0)
            .sum::<f64>()
            / xs.len().max(1) as f64
    }
}

/// `(loss, d loss / d logits)` of one sample.
fn sample_loss(z: &[f64], y: f64) -> (f64, Vec<f64>) {
    if z.len() == 1 {
        let z = z[0];
        let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        let p = 1.0 / (1.0 + (-z).exp());
        (loss, vec![p - y])
    } else {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let c = y as usize;
        let grad = z
            .iter()
            .enumerate()
            .map(|(k, v)| (v - lse).exp() - f64::from(k == c))
            .collect();
        (lse - z[c], grad)
    }
}

/// `mean_i loss_i + ||W||^2 / (2 C n)`, intercepts unpenalised. This has the
/// same minimiser as `0.5 * ||W||^2 + C * sum_i loss_i`.
struct LogisticProblem<'a> {
    xs: &'a [Vec<f64>],
    ys: &'a [f64],
    features: usize,
    outputs: usize,
    c: f64,
}

impl LogisticProblem<'_> {
    fn evaluate(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let (p, k) = (self.features, self.outputs);
        let model = LogisticModel::from_theta(theta, p, k);
        let n = self.xs.len() as f64;
        let ridge = 1.0 / (self.c * n);
        let mut cost = 0.5 * ridge * model.weights.iter().map(|w| w * w).sum::<f64>();
        let mut grad = vec![0.0; theta.len()];
        for (g, w) in grad.iter_mut().zip(&model.weights) {
            *g = ridge * w;
        }
        for (x, &y) in self.xs.iter().zip(self.ys) {
            let (loss, dz) = sample_loss(&model.logits(x), y);
            cost += loss / n;
            for (o, g) in dz.iter().enumerate() {
                let g = g / n;
                for j in 0..p {
                    grad[j * k + o] += g * x[j];
                }
                grad[p * k + o] += g;
            }
        }
        (cost, grad)
    }
}

impl CostFunction for LogisticProblem<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, theta: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let cost = self.evaluate(theta).0;
        if !cost.is_finite() {
            return Err(argmin::core::Error::msg(format!("non-finite logistic objective {cost}")));
        }
        Ok(cost)
    }
}

impl Gradient for LogisticProblem<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, theta: &Self::Param) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        Ok(self.evaluate(theta).1)
    }
}

/// L-BFGS fit of L2-regularised logistic regression; labels are `0/1` for
/// one output or class indices otherwise.
pub fn fit_logistic(xs: &[Vec<f64>], ys: &[f64], outputs: usize, c: f64, max_iters: u64) -> Result<LogisticModel> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::dim(format!("{} rows for {} labels", xs.len(), ys.len())));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::config(format!("inverse regularisation {c} must be positive")));
    }
    let features = xs[0].len();
    let problem = LogisticProblem {
        xs,
        ys,
        features,
        outputs,
        c,
    };
    let linesearch = MoreThuenteLineSearch::new()
        .with_bounds(1e-20, 1e20)
        .map_err(|e| Error::Numeric(e.to_string()))?;
    let solver = LBFGS::new(linesearch, 10)
        .with_tolerance_grad(1e-10)
        .and_then(|s| s.with_tolerance_cost(0.0))
        .map_err(|e| Error::Numeric(e.to_string()))?;
    let init = vec![0.0; (features + 1) * outputs];
    let res = Executor::new(problem, solver)
        .configure(|s| s.param(init).max_iters(max_iters))
        .run()
        .map_err(|e| Error::Numeric(format!("logistic fit failed: {e}")))?;
    let theta = res
        .state()
        .get_best_param()
        .ok_or_else(|| Error::Numeric("logistic fit produced no parameters".into()))?;
    Ok(LogisticModel::from_theta(theta, features, outputs))
}

/// Least-squares fit with an intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl OlsModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Ordinary least squares through the SVD; a rank-deficient design yields
/// the minimum-norm solution and a warning.
pub fn fit_ols(xs: &[Vec<f64>], ys: &[f64]) -> Result<OlsModel> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::dim(format!("{} rows for {} labels", xs.len(), ys.len())));
    }
    let p = xs[0].len();
    let design = DMatrix::from_fn(xs.len(), p + 1, |i, j| if j < p { xs[i][j] } else { 1.0 });
    let y = DVector::from_column_slice(ys);
    let svd = design.svd(true, true);
    let eps = 1e-10 * svd.singular_values.max().max(1.0);
    let rank = svd.rank(eps);
    if rank < p + 1 {
        log::warn!("design matrix has rank {rank} < {}; using the minimum-norm solution", p + 1);
    }
    let beta = svd.solve(&y, eps).map_err(|e| Error::Numeric(format!("least squares failed: {e}")))?;
    Ok(OlsModel {
        weights: beta.iter().take(p).copied().collect(),
        intercept: beta[p],
    })
}

/// Raw lab values followed by extra features, per sample.
pub fn baseline_design(ds: &FinetuneDataset) -> Vec<Vec<Option<f64>>> {
    ds.labs
        .iter()
        .zip(&ds.extras)
        .map(|(l, e)| l.iter().chain(e).copied().collect())
        .collect()
}

/// A fitted linear baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LinearModel {
    Logistic(LogisticModel),
    Ols(OlsModel),
}

/// Cross-validated results of one regularisation setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineCell {
    /// `None` for unregularised least squares.
    pub c: Option<f64>,
    pub replicates: Vec<f64>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub method: String,
    pub metric: String,
    pub cells: Vec<BaselineCell>,
    pub best: usize,
    /// Refit of the best setting on every sample, standardized with the
    /// statistics of the full dataset.
    pub model: LinearModel,
}

impl BaselineReport {
    pub fn best_cell(&self) -> &BaselineCell {
        &self.cells[self.best]
    }
}

/// Lowest mean metric; ties go to the smaller `C`.
fn select_best_cell(cells: &[BaselineCell]) -> usize {
    (0..cells.len())
        .min_by(|&a, &b| {
            let (x, y) = (&cells[a], &cells[b]);
            x.summary
                .mean
                .total_cmp(&y.summary.mean)
                .then(x.c.unwrap_or(0.0).total_cmp(&y.c.unwrap_or(0.0)))
        })
        .unwrap_or(0)
}

#[allow(clippy::too_many_arguments)]
fn fit_and_score(
    task: TaskKind,
    outputs: usize,
    c: Option<f64>,
    max_iters: u64,
    rows: &[Vec<Option<f64>>],
    labels: &[f64],
    train: &[usize],
    test: &[usize],
) -> Result<(LinearModel, f64)> {
    let std = Standardizer::fit(rows, train);
    let take = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        (idx.iter().map(|&i| std.transform(&rows[i])).collect(), idx.iter().map(|&i| labels[i]).collect())
    };
    let (xtr, ytr) = take(train);
    let (xte, yte) = take(test);
    match task {
        TaskKind::Regression => {
            let m = fit_ols(&xtr, &ytr)?;
            let mse = xte.iter().zip(&yte).map(|(x, y)| (m.predict(x) - y).powi(2)).sum::<f64>() / xte.len().max(1) as f64;
            Ok((LinearModel::Ols(m), mse))
        }
        TaskKind::Binary | TaskKind::Multiclass => {
            let c = c.ok_or_else(|| Error::config("logistic regression needs an inverse regularisation strength"))?;
            let m = fit_logistic(&xtr, &ytr, outputs, c, max_iters)?;
            let ce = m.cross_entropy(&xte, &yte);
            Ok((LinearModel::Logistic(m), ce))
        }
    }
}

/// Logistic regression over the `C` grid for classification tasks, or
/// ordinary least squares for regression, cross-validated on the folds of
/// `plan`. Features are standardized with the statistics of each training
/// fold; missing values take the fold mean.
pub fn fit_linear_baseline(ds: &FinetuneDataset, cfg: &LinearBaselineConfig, plan: &CvPlan) -> Result<BaselineReport> {
    let task = ds.spec.task;
    let outputs = task_outputs(task, ds.num_classes());
    let settings: Vec<Option<f64>> = match task {
        TaskKind::Regression => vec![None],
        _ => cfg.c_grid.iter().map(|&c| Some(c)).collect(),
    };
    if settings.is_empty() {
        return Err(Error::config("regularisation grid is empty"));
    }
    let rows = baseline_design(ds);
    let folds = plan.all_folds(ds.len())?;
    let mut cells = Vec::with_capacity(settings.len());
    for &c in &settings {
        let mut replicates = Vec::with_capacity(folds.len());
        for rep in &folds {
            let mut total = 0.0;
            for held in rep {
                let train = training_indices(ds.len(), held);
                total += fit_and_score(task, outputs, c, cfg.max_iters, &rows, &ds.labels, &train, held)?.1;
            }
            replicates.push(total / rep.len() as f64);
        }
        cells.push(BaselineCell {
            c,
            summary: Summary::of(&replicates)?,
            replicates,
        });
    }
    let best = select_best_cell(&cells);
    let all: Vec<usize> = (0..ds.len()).collect();
    let (model, _) = fit_and_score(task, outputs, cells[best].c, cfg.max_iters, &rows, &ds.labels, &all, &[])?;
    Ok(BaselineReport {
        method: match task {
            TaskKind::Regression => "ols",
            _ => "logistic",
        }
        .to_string(),
        metric: metric_name(task).to_string(),
        cells,
        best,
        model,
    })
}
