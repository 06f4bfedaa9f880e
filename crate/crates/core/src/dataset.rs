//! Cohort records, delimited-text ingestion and validation.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("column `{0}` is missing from the header")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("{record}: {reason}")]
    InvariantViolation { record: String, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// One subject of the phase-one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRecord {
    pub id: String,
    pub entry_time: f64,
    pub exit_time: f64,
    pub status: bool,
    /// One-based stratum index.
    pub stratum: usize,
    pub x_phase1: Vec<f64>,
    pub x_phase2: Option<Vec<f64>>,
    pub proxies: Option<Vec<f64>>,
}

impl CohortRecord {
    pub fn is_case(&self) -> bool {
        self.status
    }
}

/// `I(exit >= t > entry)`.
pub fn at_risk(record: &CohortRecord, t: f64) -> bool {
    record.exit_time >= t && t > record.entry_time
}

/// Column names of a delimited cohort file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub id: String,
    pub entry: String,
    pub exit: String,
    pub status: String,
    pub stratum: String,
    pub phase1: Vec<String>,
    pub phase2: Vec<String>,
    pub proxies: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            id: "id".into(),
            entry: "entry".into(),
            exit: "exit".into(),
            status: "status".into(),
            stratum: "stratum".into(),
            phase1: Vec::new(),
            phase2: Vec::new(),
            proxies: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateNames {
    pub phase1: Vec<String>,
    pub phase2: Vec<String>,
    pub proxies: Vec<String>,
}

impl CovariateNames {
    /// Names in model order: phase-one covariates first, then phase-two covariates.
    pub fn model_order(&self) -> Vec<String> {
        self.phase1.iter().chain(self.phase2.iter()).cloned().collect()
    }
}

/// Validated, immutable phase-one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortDataset {
    records: Vec<CohortRecord>,
    n_per_stratum: Vec<usize>,
    tau: f64,
    covariate_names: CovariateNames,
}

impl CohortDataset {
    pub fn new(
        records: Vec<CohortRecord>,
        covariate_names: CovariateNames,
    ) -> Result<Self, DatasetError> {
        let n_strata = records.iter().map(|r| r.stratum).max().unwrap_or(0);
        let mut n_per_stratum = vec![0usize; n_strata];
        let mut tau = 0.0f64;
        for (row, record) in records.iter().enumerate() {
            let label = || format!("row {}", row + 1);
            let violation = |reason: &str| DatasetError::InvariantViolation {
                record: label(),
                reason: reason.to_string(),
            };
            if !record.entry_time.is_finite() || !record.exit_time.is_finite() {
                return Err(violation("non-finite time"));
            }
            if record.entry_time < 0.0 {
                return Err(violation("entry < 0"));
            }
            if record.exit_time <= record.entry_time {
                return Err(violation("exit ≤ entry"));
            }
            if record.stratum == 0 {
                return Err(violation("stratum must be ≥ 1"));
            }
            if record.x_phase1.len() != covariate_names.phase1.len() {
                return Err(violation("phase-one covariate count mismatch"));
            }
            if let Some(x) = &record.x_phase2 {
                if x.len() != covariate_names.phase2.len() {
                    return Err(violation("phase-two covariate count mismatch"));
                }
            }
            if let Some(x) = &record.proxies {
                if x.len() != covariate_names.proxies.len() {
                    return Err(violation("proxy count mismatch"));
                }
            }
            let all_values = record
                .x_phase1
                .iter()
                .chain(record.x_phase2.iter().flatten())
                .chain(record.proxies.iter().flatten());
            if all_values.clone().any(|v| !v.is_finite()) {
                return Err(violation("non-finite covariate"));
            }
            n_per_stratum[record.stratum - 1] += 1;
            tau = tau.max(record.exit_time);
        }
        if let Some(empty) = n_per_stratum.iter().position(|&c| c == 0) {
            return Err(DatasetError::InvariantViolation {
                record: format!("stratum {}", empty + 1),
                reason: "stratum is empty".into(),
            });
        }
        Ok(Self {
            records,
            n_per_stratum,
            tau,
            covariate_names,
        })
    }

    pub fn records(&self) -> &[CohortRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_per_stratum(&self) -> &[usize] {
        &self.n_per_stratum
    }

    pub fn n_strata(&self) -> usize {
        self.n_per_stratum.len()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn covariate_names(&self) -> &CovariateNames {
        &self.covariate_names
    }

    /// Number of model covariates (phase one plus phase two).
    pub fn n_covariates(&self) -> usize {
        self.covariate_names.phase1.len() + self.covariate_names.phase2.len()
    }

    pub fn n_events(&self) -> usize {
        self.records.iter().filter(|r| r.status).count()
    }

    /// Model covariates of subject `i`, or `None` when phase-two values are absent.
    pub fn covariates(&self, i: usize) -> Option<Vec<f64>> {
        let record = &self.records[i];
        if self.covariate_names.phase2.is_empty() {
            return Some(record.x_phase1.clone());
        }
        record.x_phase2.as_ref().map(|x2| {
            let mut x = record.x_phase1.clone();
            x.extend_from_slice(x2);
            x
        })
    }

    /// Copy of the dataset with new records sharing the same covariate layout.
    pub fn with_records(&self, records: Vec<CohortRecord>) -> Result<Self, DatasetError> {
        Self::new(records, self.covariate_names.clone())
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize, DatasetError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
}

fn parse_f64(row: usize, column: &str, raw: &str) -> Result<f64, DatasetError> {
    raw.trim().parse::<f64>().map_err(|_| DatasetError::Parse {
        row,
        column: column.to_string(),
        value: raw.to_string(),
    })
}

fn parse_optional_block(
    row: usize,
    record: &csv::StringRecord,
    columns: &[(usize, &String)],
) -> Result<Option<Vec<f64>>, DatasetError> {
    if columns.is_empty() {
        return Ok(None);
    }
    let cells: Vec<&str> = columns.iter().map(|(i, _)| record.get(*i).unwrap_or("").trim()).collect();
    let n_empty = cells.iter().filter(|c| c.is_empty()).count();
    if n_empty == cells.len() {
        return Ok(None);
    }
    if n_empty > 0 {
        return Err(DatasetError::InvariantViolation {
            record: format!("row {row}"),
            reason: "partially observed covariate block".into(),
        });
    }
    cells
        .iter()
        .zip(columns)
        .map(|(cell, (_, name))| parse_f64(row, name, cell))
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

/// Parses a cohort from any reader of comma-separated text with a header row.
pub fn read_cohort<R: Read>(reader: R, schema: &Schema) -> Result<CohortDataset, DatasetError> {
    let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv_reader.headers()?.clone();
    let id_col = column_index(&headers, &schema.id)?;
    let entry_col = column_index(&headers, &schema.entry)?;
    let exit_col = column_index(&headers, &schema.exit)?;
    let status_col = column_index(&headers, &schema.status)?;
    let stratum_col = column_index(&headers, &schema.stratum)?;
    let lookup = |names: &[String]| -> Result<Vec<(usize, String)>, DatasetError> {
        names
            .iter()
            .map(|n| column_index(&headers, n).map(|i| (i, n.clone())))
            .collect()
    };
    let phase1 = lookup(&schema.phase1)?;
    let phase2 = lookup(&schema.phase2)?;
    let proxies = lookup(&schema.proxies)?;
    let phase2_refs: Vec<(usize, &String)> = phase2.iter().map(|(i, n)| (*i, n)).collect();
    let proxy_refs: Vec<(usize, &String)> = proxies.iter().map(|(i, n)| (*i, n)).collect();

    let mut records = Vec::new();
    for (index, result) in csv_reader.records().enumerate() {
        let row = index + 1;
        let record = result?;
        let cell = |i: usize| record.get(i).unwrap_or("");
        let status_raw = cell(status_col).trim();
        let status = match status_raw {
            "1" => true,
            "0" => false,
            other => {
                return Err(DatasetError::Parse {
                    row,
                    column: schema.status.clone(),
                    value: other.to_string(),
                })
            }
        };
        let stratum = cell(stratum_col)
            .trim()
            .parse::<usize>()
            .map_err(|_| DatasetError::Parse {
                row,
                column: schema.stratum.clone(),
                value: cell(stratum_col).to_string(),
            })?;
        let x_phase1 = phase1
            .iter()
            .map(|(i, n)| parse_f64(row, n, cell(*i)))
            .collect::<Result<Vec<_>, _>>()?;
        records.push(CohortRecord {
            id: cell(id_col).trim().to_string(),
            entry_time: parse_f64(row, &schema.entry, cell(entry_col))?,
            exit_time: parse_f64(row, &schema.exit, cell(exit_col))?,
            status,
            stratum,
            x_phase1,
            x_phase2: parse_optional_block(row, &record, &phase2_refs)?,
            proxies: parse_optional_block(row, &record, &proxy_refs)?,
        });
    }
    CohortDataset::new(
        records,
        CovariateNames {
            phase1: schema.phase1.clone(),
            phase2: schema.phase2.clone(),
            proxies: schema.proxies.clone(),
        },
    )
}

pub fn load_cohort(path: &Path, schema: &Schema) -> Result<CohortDataset, DatasetError> {
    let file = std::fs::File::open(path)?;
    read_cohort(file, schema)
}

/// Writes the dataset with the column names of `schema`; `read_cohort` inverts it.
pub fn write_cohort<W: Write>(
    dataset: &CohortDataset,
    writer: W,
    schema: &Schema,
) -> Result<(), DatasetError> {
    let mut out = csv::Writer::from_writer(writer);
    let mut header = vec![
        schema.id.clone(),
        schema.entry.clone(),
        schema.exit.clone(),
        schema.status.clone(),
        schema.stratum.clone(),
    ];
    header.extend(schema.phase1.iter().cloned());
    header.extend(schema.phase2.iter().cloned());
    header.extend(schema.proxies.iter().cloned());
    out.write_record(&header)?;
    let names = dataset.covariate_names();
    for r in dataset.records() {
        let mut row = vec![
            r.id.clone(),
            r.entry_time.to_string(),
            r.exit_time.to_string(),
            if r.status { "1".into() } else { "0".into() },
            r.stratum.to_string(),
        ];
        row.extend(r.x_phase1.iter().map(|v| v.to_string()));
        match &r.x_phase2 {
            Some(x) => row.extend(x.iter().map(|v| v.to_string())),
            None => row.extend(names.phase2.iter().map(|_| String::new())),
        }
        match &r.proxies {
            Some(x) => row.extend(x.iter().map(|v| v.to_string())),
            None => row.extend(names.proxies.iter().map(|_| String::new())),
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_cohort(dataset: &CohortDataset, path: &Path, schema: &Schema) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path)?;
    write_cohort(dataset, file, schema)
}

/// Reads named numeric columns; empty cells become `None`.
pub fn read_columns<R: Read>(
    reader: R,
    names: &[String],
) -> Result<HashMap<String, Vec<Option<f64>>>, DatasetError> {
    let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv_reader.headers()?.clone();
    let indices = names
        .iter()
        .map(|n| column_index(&headers, n))
        .collect::<Result<Vec<_>, _>>()?;
    let mut columns: HashMap<String, Vec<Option<f64>>> =
        names.iter().map(|n| (n.clone(), Vec::new())).collect();
    for (index, result) in csv_reader.records().enumerate() {
        let record = result?;
        for (name, &col) in names.iter().zip(&indices) {
            let raw = record.get(col).unwrap_or("").trim();
            let value = if raw.is_empty() {
                None
            } else {
                Some(parse_f64(index + 1, name, raw)?)
            };
            columns.get_mut(name).expect("column registered").push(value);
        }
    }
    Ok(columns)
}
