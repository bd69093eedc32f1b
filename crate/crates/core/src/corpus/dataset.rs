use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Binary,
    Multiclass,
    Regression,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(TaskKind::Binary),
            "multiclass" => Ok(TaskKind::Multiclass),
            "regression" => Ok(TaskKind::Regression),
            other => Err(Error::config(format!("unknown task kind {other:?}"))),
        }
    }
}

/// JSON sidecar describing a fine-tune CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub label: String,
    pub task: TaskKind,
    /// CSV column name -> lab code id.
    pub lab_columns: BTreeMap<String, String>,
    #[serde(default)]
    pub extra_columns: Vec<String>,
}

/// A labelled table of raw lab values and extra features.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneDataset {
    pub spec: DatasetSpec,
    pub labels: Vec<f64>,
    /// Lab code id per lab column, in `spec.lab_columns` order.
    pub lab_codes: Vec<String>,
    /// `[sample][lab column]` raw values.
    pub labs: Vec<Vec<Option<f64>>>,
    pub extra_names: Vec<String>,
    /// `[sample][extra column]`.
    pub extras: Vec<Vec<Option<f64>>>,
}

impl FinetuneDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of classes for classification tasks.
    pub fn num_classes(&self) -> usize {
        match self.spec.task {
            TaskKind::Binary => 2,
            TaskKind::Multiclass => self.labels.iter().fold(0.0f64, |m, &y| m.max(y)) as usize + 1,
            TaskKind::Regression => 1,
        }
    }

    pub fn load(csv_path: &Path, spec_path: &Path) -> Result<Self> {
        let spec: DatasetSpec = serde_json::from_str(&std::fs::read_to_string(spec_path)?)?;
        Self::read_from(File::open(csv_path)?, spec)
    }

    pub fn read_from<R: Read>(reader: R, spec: DatasetSpec) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Csv {
                line: 1,
                message: e.to_string(),
            })?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let col = |name: &str| {
            header.iter().position(|h| h == name).ok_or_else(|| Error::Csv {
                line: 1,
                message: format!("column {name:?} declared in the sidecar is missing"),
            })
        };
        let label_col = col(&spec.label)?;
        let lab_cols = spec.lab_columns.keys().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
        let extra_cols = spec.extra_columns.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
        let mut ds = FinetuneDataset {
            lab_codes: spec.lab_columns.values().cloned().collect(),
            extra_names: spec.extra_columns.clone(),
            spec,
            labels: Vec::new(),
            labs: Vec::new(),
            extras: Vec::new(),
        };
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Csv {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let cell = |i: usize| -> Result<Option<f64>> {
                let raw = rec.get(i).unwrap_or("").trim();
                if raw.is_empty() {
                    return Ok(None);
                }
                match raw.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(Some(v)),
                    _ => Err(Error::Csv {
                        line,
                        message: format!("{:?} is not a finite number", raw),
                    }),
                }
            };
            let label = cell(label_col)?.ok_or(Error::Csv {
                line,
                message: "missing label".into(),
            })?;
            match ds.spec.task {
                TaskKind::Binary if label != 0.0 && label != 1.0 => {
                    return Err(Error::Csv {
                        line,
                        message: format!("binary label {label} is not 0 or 1"),
                    })
                }
                TaskKind::Multiclass if label < 0.0 || label.fract() != 0.0 => {
                    return Err(Error::Csv {
                        line,
                        message: format!("class label {label} is not a non-negative integer"),
                    })
                }
                _ => {}
            }
            ds.labels.push(label);
            ds.labs.push(lab_cols.iter().map(|&c| cell(c)).collect::<Result<_>>()?);
            ds.extras.push(extra_cols.iter().map(|&c| cell(c)).collect::<Result<_>>()?);
        }
        Ok(ds)
    }

    pub fn save(&self, csv_path: &Path, spec_path: &Path) -> Result<()> {
        std::fs::write(spec_path, serde_json::to_string_pretty(&self.spec)?)?;
        self.write_to(std::io::BufWriter::new(File::create(csv_path)?))
    }

    pub fn write_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        let mut header = vec![self.spec.label.clone()];
        header.extend(self.spec.lab_columns.keys().cloned());
        header.extend(self.extra_names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        let fmt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for i in 0..self.len() {
            let mut row = vec![self.labels[i].to_string()];
            row.extend(self.labs[i].iter().map(fmt));
            row.extend(self.extras[i].iter().map(fmt));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> FinetuneDataset {
        FinetuneDataset {
            spec: self.spec.clone(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            lab_codes: self.lab_codes.clone(),
            labs: idx.iter().map(|&i| self.labs[i].clone()).collect(),
            extra_names: self.extra_names.clone(),
            extras: idx.iter().map(|&i| self.extras[i].clone()).collect(),
        }
    }
}
