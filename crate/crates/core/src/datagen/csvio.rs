//! CSV ingestion and export.
//!
//! Schema (header row required):
//!
//! ```text
//! <covariate columns...>, treatment, y_factual[, y_potential_0, ..., y_potential_{k-1}]
//! ```
//!
//! Every column before `treatment` is a covariate. The potential-outcome
//! columns are optional but must be all present or all absent.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{ObservationalDataset, Standardizer};
use crate::error::{Error, Result};
use crate::nets::TaskKind;
use crate::numkit::Matrix;

/// How to interpret a CSV file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub kind: TaskKind,
    /// Treatment count; inferred from the potential-outcome columns or the
    /// largest treatment index when absent.
    pub k: Option<usize>,
    /// Standardise covariates with statistics of all loaded rows.
    pub standardize: bool,
}

impl CsvSchema {
    pub fn raw(kind: TaskKind) -> Self {
        Self {
            kind,
            k: None,
            standardize: false,
        }
    }
}

fn parse_f64(s: &str, line: usize, col: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Malformed {
        line,
        message: format!("column {col}: cannot parse {s:?} as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Malformed {
            line,
            message: format!("column {col}: non-finite value"),
        });
    }
    Ok(v)
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<ObservationalDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<ObservationalDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let t_col = headers.iter().position(|h| h == "treatment").ok_or(Error::Malformed {
        line: 1,
        message: "missing `treatment` column".into(),
    })?;
    if headers.get(t_col + 1).map(String::as_str) != Some("y_factual") {
        return Err(Error::Malformed {
            line: 1,
            message: "`y_factual` must follow `treatment`".into(),
        });
    }
    let potential = &headers[t_col + 2..];
    for (j, h) in potential.iter().enumerate() {
        if *h != format!("y_potential_{j}") {
            return Err(Error::Malformed {
                line: 1,
                message: format!("expected column y_potential_{j}, found {h:?}"),
            });
        }
    }
    let p = t_col;
    let n_pot = potential.len();

    let mut xs = Vec::new();
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    let mut pots = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| Error::Malformed {
            line,
            message: e.to_string(),
        })?;
        for c in 0..p {
            xs.push(parse_f64(&rec[c], line, &headers[c])?);
        }
        let tv = rec[t_col].trim();
        let t: usize = tv.parse().map_err(|_| Error::Malformed {
            line,
            message: format!("treatment {tv:?} is not a non-negative integer"),
        })?;
        ts.push(t);
        ys.push(parse_f64(&rec[t_col + 1], line, "y_factual")?);
        for j in 0..n_pot {
            pots.push(parse_f64(&rec[t_col + 2 + j], line, &headers[t_col + 2 + j])?);
        }
    }
    let n = ts.len();
    let k = match (schema.k, n_pot) {
        (Some(k), 0) => k,
        (Some(k), m) if m == k => k,
        (Some(k), m) => {
            return Err(Error::Malformed {
                line: 1,
                message: format!("{m} potential-outcome columns but k = {k}"),
            })
        }
        (None, 0) => ts.iter().max().map_or(1, |m| m + 1),
        (None, m) => m,
    };
    if let Some((i, t)) = ts.iter().enumerate().find(|(_, &t)| t >= k) {
        return Err(Error::Malformed {
            line: i + 2,
            message: format!("treatment {t} out of range for k = {k}"),
        });
    }
    let mut x = Matrix::from_vec(n, p, xs)?;
    if schema.standardize {
        x = Standardizer::fit(&x).apply(&x)?;
    }
    let y_all = if n_pot > 0 {
        Some(Matrix::from_vec(n, n_pot, pots)?)
    } else {
        None
    };
    ObservationalDataset::new(x, ts, ys, y_all, schema.kind, k)
}

/// Writes the dataset in the schema read by [`load_csv`]; covariates are
/// named `x0..x{p-1}`. Numbers use the shortest round-tripping form.
pub fn write_csv<W: std::io::Write>(data: &ObservationalDataset, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    let mut header: Vec<String> = (0..data.p()).map(|j| format!("x{j}")).collect();
    header.push("treatment".into());
    header.push("y_factual".into());
    if data.y_all.is_some() {
        header.extend((0..data.k).map(|j| format!("y_potential_{j}")));
    }
    w.write_record(&header)?;
    let mut rec: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..data.n() {
        rec.clear();
        rec.extend(data.x.row(i).iter().map(|v| v.to_string()));
        rec.push(data.t[i].to_string());
        rec.push(data.y[i].to_string());
        if let Some(ya) = &data.y_all {
            rec.extend(ya.row(i).iter().map(|v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(data: &ObservationalDataset, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path.as_ref())?;
    write_csv(data, std::io::BufWriter::new(f))
}
