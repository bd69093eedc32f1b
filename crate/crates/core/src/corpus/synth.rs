//! Synthetic lab corpora driven by a linear-Gaussian latent factor model.
//!
//! Each bag draws `z ~ N(0, I)`; code `j` reads `a_j . z + sigma_j * eps`.
//! Codes are grouped into panels and an order set requests one or two
//! panels, so co-ordered codes share information through `z`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use super::dataset::{DatasetSpec, FinetuneDataset, TaskKind};
use super::LabEvent;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Loadings {
    /// Independent random directions scaled to `loading_scale`.
    Random,
    /// Every coefficient equals `loading_scale`.
    Constant,
    /// Codes split into `groups` contiguous groups; group `g` loads only on
    /// latent axis `g`, so distinct groups are uncorrelated.
    Grouped { groups: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub patients: usize,
    pub codes: usize,
    pub latent_dim: usize,
    /// Mean number of order sets per patient.
    pub bags_per_patient: usize,
    pub panel_size: usize,
    /// Probability that a code of a requested panel is present.
    pub inclusion: f64,
    /// Probability that a present code has no value.
    pub null_rate: f64,
    pub sigma: f64,
    pub loading_scale: f64,
    pub loadings: Loadings,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            patients: 2000,
            codes: 20,
            latent_dim: 2,
            bags_per_patient: 5,
            panel_size: 5,
            inclusion: 0.85,
            null_rate: 0.05,
            sigma: 0.25,
            loading_scale: 1.0,
            loadings: Loadings::Random,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeTruth {
    pub id: String,
    pub loadings: Vec<f64>,
    pub sigma: f64,
}

/// Generator parameters needed by oracle computations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub codes: Vec<CodeTruth>,
}

impl GroundTruth {
    pub fn latent_dim(&self) -> usize {
        self.codes.first().map_or(0, |c| c.loadings.len())
    }

    pub fn code(&self, id: &str) -> Option<&CodeTruth> {
        self.codes.iter().find(|c| c.id == id)
    }

    /// Raw value of `code` given latent `z` and noise draw `eps`.
    pub fn value(&self, code: usize, z: &[f64], eps: f64) -> f64 {
        let c = &self.codes[code];
        c.loadings.iter().zip(z).map(|(a, z)| a * z).sum::<f64>() + c.sigma * eps
    }

    /// Population correlation between the raw values of two codes.
    pub fn correlation(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (&self.codes[i], &self.codes[j]);
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        let var = |c: &CodeTruth| dot(&c.loadings, &c.loadings) + c.sigma * c.sigma;
        let cov = dot(&a.loadings, &b.loadings) + if i == j { a.sigma * a.sigma } else { 0.0 };
        cov / (var(a) * var(b)).sqrt()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub events: Vec<LabEvent>,
    pub truth: GroundTruth,
    /// Latent factor of each emitted order set, keyed by `(patient, time)`.
    pub latents: BTreeMap<(String, i64), Vec<f64>>,
}

/// Code ids are integers from this base, like hospital item ids.
pub const CODE_ID_BASE: usize = 50_001;

pub fn code_id(j: usize) -> String {
    (CODE_ID_BASE + j).to_string()
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn make_loadings<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let (n, k, s) = (cfg.codes, cfg.latent_dim, cfg.loading_scale);
    Ok(match cfg.loadings {
        Loadings::Random => (0..n)
            .map(|_| {
                let mut a: Vec<f64> = (0..k).map(|_| normal(rng)).collect();
                let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                a.iter_mut().for_each(|x| *x *= s / norm);
                a
            })
            .collect(),
        Loadings::Constant => vec![vec![s; k]; n],
        Loadings::Grouped { groups } => {
            if groups == 0 || groups > k {
                return Err(Error::config(format!(
                    "grouped loadings need 1..={k} groups for latent dimension {k}, got {groups}"
                )));
            }
            (0..n)
                .map(|j| {
                    let mut a = vec![0.0; k];
                    a[j * groups / n] = s;
                    a
                })
                .collect()
        }
    })
}

pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.codes < 3 {
        return Err(Error::config(format!("synthetic corpus needs at least 3 codes, got {}", cfg.codes)));
    }
    if cfg.latent_dim < 1 || cfg.panel_size < 1 || cfg.bags_per_patient < 1 {
        return Err(Error::config("latent_dim, panel_size and bags_per_patient must be at least 1"));
    }
    if !(0.0..=1.0).contains(&cfg.inclusion) || !(0.0..=1.0).contains(&cfg.null_rate) || cfg.sigma < 0.0 {
        return Err(Error::config("inclusion and null_rate must be probabilities and sigma non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let truth = GroundTruth {
        codes: make_loadings(cfg, &mut rng)?
            .into_iter()
            .enumerate()
            .map(|(j, loadings)| CodeTruth {
                id: code_id(j),
                loadings,
                sigma: cfg.sigma,
            })
            .collect(),
    };
    let panels: Vec<Vec<usize>> = (0..cfg.codes)
        .collect::<Vec<_>>()
        .chunks(cfg.panel_size)
        .map(<[usize]>::to_vec)
        .collect();
    let width = (cfg.patients.max(1) - 1).to_string().len().max(5);
    let mut events = Vec::new();
    let mut latents = BTreeMap::new();
    for p in 0..cfg.patients {
        let patient = format!("p{p:0width$}");
        let n_bags = rng.random_range(1..=2 * cfg.bags_per_patient - 1);
        let start: i64 = rng.random_range(0..1_000_000) * 60;
        for b in 0..n_bags {
            let time = start + b as i64 * 3600;
            let z: Vec<f64> = (0..cfg.latent_dim).map(|_| normal(&mut rng)).collect();
            let n_panels = if panels.len() > 1 { rng.random_range(1..=2) } else { 1 };
            let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, panels.len(), n_panels)
                .into_iter()
                .flat_map(|i| panels[i].iter().copied())
                .filter(|_| rng.random::<f64>() < cfg.inclusion)
                .collect();
            chosen.shuffle(&mut rng);
            for j in chosen {
                let eps = normal(&mut rng);
                let value = if rng.random::<f64>() < cfg.null_rate {
                    None
                } else {
                    Some(truth.value(j, &z, eps))
                };
                events.push(LabEvent {
                    patient_id: patient.clone(),
                    chart_time: time,
                    code: code_id(j),
                    value,
                });
            }
            latents.insert((patient.clone(), time), z);
        }
    }
    Ok(SynthCorpus { events, truth, latents })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub samples: usize,
    pub task: TaskKind,
    /// Probability that each lab column is observed.
    pub inclusion: f64,
    /// Standard deviation of noise added to the latent score.
    pub label_noise: f64,
    /// Uninformative extra (non-lab) features.
    pub extra_features: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            samples: 400,
            task: TaskKind::Binary,
            inclusion: 0.6,
            label_noise: 0.3,
            extra_features: 1,
            classes: 3,
            seed: 0,
        }
    }
}

/// A labelled task whose target is a noisy function of the latent factor
/// behind the lab values.
pub fn generate_finetune_task(truth: &GroundTruth, cfg: &TaskConfig) -> Result<FinetuneDataset> {
    let k = truth.latent_dim();
    if k == 0 || truth.codes.len() < 3 {
        return Err(Error::config("task generation needs at least 3 codes with loadings"));
    }
    if cfg.task == TaskKind::Multiclass && cfg.classes < 2 {
        return Err(Error::config("multiclass tasks need at least 2 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let direction: Vec<f64> = {
        let w: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        w.into_iter().map(|x| x / norm).collect()
    };
    let n_codes = truth.codes.len();
    let lab_columns: BTreeMap<String, String> = truth.codes.iter().map(|c| (format!("lab_{}", c.id), c.id.clone())).collect();
    let column_code: Vec<usize> = lab_columns
        .values()
        .map(|id| truth.codes.iter().position(|c| &c.id == id).unwrap())
        .collect();
    let extra_names: Vec<String> = (0..cfg.extra_features).map(|i| format!("extra_{i}")).collect();
    let mut ds = FinetuneDataset {
        spec: DatasetSpec {
            label: "label".into(),
            task: cfg.task,
            lab_columns,
            extra_columns: extra_names.clone(),
        },
        labels: Vec::with_capacity(cfg.samples),
        lab_codes: Vec::new(),
        labs: Vec::with_capacity(cfg.samples),
        extra_names,
        extras: Vec::with_capacity(cfg.samples),
    };
    ds.lab_codes = ds.spec.lab_columns.values().cloned().collect();
    for _ in 0..cfg.samples {
        let z: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
        let mut present: Vec<bool> = (0..n_codes).map(|_| rng.random::<f64>() < cfg.inclusion).collect();
        while present.iter().filter(|&&p| p).count() < 3 {
            present[rng.random_range(0..n_codes)] = true;
        }
        let row = column_code
            .iter()
            .map(|&j| {
                let eps = normal(&mut rng);
                present[j].then(|| truth.value(j, &z, eps))
            })
            .collect();
        let score = direction.iter().zip(&z).map(|(w, z)| w * z).sum::<f64>() + cfg.label_noise * normal(&mut rng);
        let label = match cfg.task {
            TaskKind::Binary => f64::from(u8::from(score > 0.0)),
            TaskKind::Regression => score,
            TaskKind::Multiclass => {
                let c = cfg.classes as f64;
                // equiprobable bins of the standard normal score
                let u = 0.5 * (1.0 + erf(score / (1.0 + cfg.label_noise.powi(2)).sqrt() / std::f64::consts::SQRT_2));
                (u * c).floor().min(c - 1.0)
            }
        };
        ds.labels.push(label);
        ds.labs.push(row);
        ds.extras.push((0..cfg.extra_features).map(|_| Some(normal(&mut rng))).collect());
    }
    Ok(ds)
}
