use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EVENTS_HEADER: [&str; 4] = ["patient_id", "chart_time", "code_id", "value"];

/// One row of the lab-event stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabEvent {
    pub patient_id: String,
    pub chart_time: i64,
    pub code: String,
    pub value: Option<f64>,
}

pub fn read_events(path: &Path) -> Result<Vec<LabEvent>> {
    read_events_from(File::open(path)?)
}

/// Parses `patient_id,chart_time,code_id,value` CSV; an empty value field
/// means the test has no result.
pub fn read_events_from<R: Read>(reader: R) -> Result<Vec<LabEvent>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Csv {
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().map(str::trim).ne(EVENTS_HEADER) {
        return Err(Error::Csv {
            line: 1,
            message: format!("expected header {}, got {}", EVENTS_HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Csv { line, message };
        if rec.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", rec.len())));
        }
        let patient_id = rec[0].trim().to_string();
        let code = rec[2].trim().to_string();
        if patient_id.is_empty() {
            return Err(bad("empty patient_id".into()));
        }
        if code.is_empty() {
            return Err(bad("empty code_id".into()));
        }
        let chart_time: i64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("chart_time {:?} is not an integer", &rec[1])))?;
        if chart_time < 0 {
            return Err(bad(format!("negative chart_time {chart_time}")));
        }
        let raw = rec[3].trim();
        let value = if raw.is_empty() {
            None
        } else {
            let v: f64 = raw.parse().map_err(|_| bad(format!("value {raw:?} is not a number")))?;
            if !v.is_finite() {
                return Err(bad(format!("value {raw:?} is not finite")));
            }
            Some(v)
        };
        out.push(LabEvent {
            patient_id,
            chart_time,
            code,
            value,
        });
    }
    Ok(out)
}

pub fn write_events(path: &Path, events: &[LabEvent]) -> Result<()> {
    let file = std::io::BufWriter::new(File::create(path)?);
    write_events_to(file, events)
}

pub fn write_events_to<W: Write>(writer: W, events: &[LabEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(EVENTS_HEADER).map_err(csv_err)?;
    for e in events {
        let time = e.chart_time.to_string();
        let value = e.value.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([e.patient_id.as_str(), &time, &e.code, &value]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
