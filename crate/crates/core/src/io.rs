//! Dataset ingestion and serialized model output.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knots::{KnotGrid, SplineModel};

/// Number of evaluation points in plot output.
pub const PLOT_POINTS: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub standardized: bool,
    pub x_range: (f64, f64),
    /// Mean and standard deviation removed from `ys` when standardized.
    pub y_shift: (f64, f64),
}

impl Dataset {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, standardize: bool) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::Dimension(format!(
                "{} x values but {} responses",
                xs.len(),
                ys.len()
            )));
        }
        if xs.is_empty() {
            return Err(Error::DegenerateData("dataset has no rows".into()));
        }
        if let Some(i) = xs.iter().chain(&ys).position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                row: i % xs.len() + 1,
                message: "non-finite value".into(),
            });
        }
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut ys = ys;
        let mut y_shift = (0.0, 1.0);
        if standardize {
            let n = ys.len() as f64;
            if ys.len() < 2 {
                return Err(Error::DegenerateData(
                    "standardization needs at least 2 responses".into(),
                ));
            }
            let mean = ys.iter().sum::<f64>() / n;
            let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            if !(sd > 0.0) {
                return Err(Error::DegenerateData("responses are constant".into()));
            }
            for y in &mut ys {
                *y = (*y - mean) / sd;
            }
            y_shift = (mean, sd);
        }
        Ok(Self {
            xs,
            ys,
            standardized: standardize,
            x_range: (lo, hi),
            y_shift,
        })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

fn column_index(headers: &csv::StringRecord, col: &str) -> Result<usize> {
    if let Some(i) = headers.iter().position(|h| h.trim() == col) {
        return Ok(i);
    }
    Err(Error::Parse {
        row: 0,
        message: format!(
            "column {col:?} not found (columns: {})",
            headers.iter().collect::<Vec<_>>().join(", ")
        ),
    })
}

/// Reads columns `x_col` and `y_col` from CSV text with a header row.
/// Row numbers in errors count data rows from 1.
pub fn parse_csv<R: Read>(reader: R, x_col: &str, y_col: &str, standardize: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let xi = column_index(&headers, x_col)?;
    let yi = column_index(&headers, y_col)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let field = |j: usize, name: &str| -> Result<f64> {
            let raw = record.get(j).ok_or_else(|| Error::Parse {
                row,
                message: format!("missing column {name:?}"),
            })?;
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                message: format!("{name} value {raw:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("{name} value {raw:?} is not finite"),
                });
            }
            Ok(v)
        };
        xs.push(field(xi, x_col)?);
        ys.push(field(yi, y_col)?);
    }
    if xs.is_empty() {
        return Err(Error::DegenerateData("CSV has no data rows".into()));
    }
    Dataset::new(xs, ys, standardize)
}

/// [`parse_csv`] on a file, or on standard input when `path` is `-`.
pub fn load_csv(path: &str, x_col: &str, y_col: &str, standardize: bool) -> Result<Dataset> {
    if path == "-" {
        let stdin = io::stdin();
        return parse_csv(stdin.lock(), x_col, y_col, standardize);
    }
    let file = File::open(path).map_err(|e| Error::Io {
        path: path.into(),
        message: e.to_string(),
    })?;
    parse_csv(io::BufReader::new(file), x_col, y_col, standardize)
}

/// Data interval for the knot grid: the x range widened by `1e-3` of its
/// length on both sides, or `(0, 1)` for synthetic data.
pub fn knot_range(data: &Dataset, synthetic: bool) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::DegenerateData("dataset has no rows".into()));
    }
    if synthetic {
        return Ok((0.0, 1.0));
    }
    let (lo, hi) = data.x_range;
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::DegenerateData(format!("all x values equal {lo}")));
    }
    Ok((lo - 1e-3 * range, hi + 1e-3 * range))
}

/// Serialized fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelJson {
    pub p: usize,
    /// Full knot vector `t_{-p}..t_{l+p}`.
    pub knots: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Locations of the knots in use.
    pub active_knots: Vec<f64>,
    #[serde(rename = "K")]
    pub k: usize,
    pub c: f64,
    pub gamma: f64,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl ModelJson {
    pub fn model(&self) -> Result<SplineModel> {
        SplineModel::new(KnotGrid::new(self.knots.clone(), self.p)?, self.alpha.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io {
            path: "<json>".into(),
            message: e.to_string(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            row: e.line(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }
}

/// `PLOT_POINTS` equally spaced points of `[t_0, t_l)`.
pub fn plot_grid(model: &SplineModel) -> Vec<f64> {
    let (a, b) = model.grid().domain();
    let h = (b - a) / PLOT_POINTS as f64;
    (0..PLOT_POINTS).map(|i| a + i as f64 * h).collect()
}

fn io_err(path: &str, e: impl ToString) -> Error {
    Error::Io {
        path: path.into(),
        message: e.to_string(),
    }
}

/// Writes a CSV with the given header and rows to `out`.
pub fn write_rows<W: Write>(out: W, header: &[&str], rows: &[Vec<f64>], label: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(|e| io_err(label, e))?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| io_err(label, e))?;
    }
    w.flush().map_err(|e| io_err(label, e))
}

/// Creates `path` and writes a CSV to it.
pub fn write_csv_file(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let label = path.display().to_string();
    let file = File::create(path).map_err(|e| io_err(&label, e))?;
    write_rows(io::BufWriter::new(file), header, rows, &label)
}

/// Serializes records with `serde` to a CSV file.
pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let label = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(&label, e))?;
    for r in records {
        w.serialize(r).map_err(|e| io_err(&label, e))?;
    }
    w.flush().map_err(|e| io_err(&label, e))
}
