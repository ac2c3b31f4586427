//! File formats: dataset CSV, query CSV, results CSV, and JSON configs.
//!
//! Dataset files are rectangular CSVs with a header of `x_<name>` covariate
//! columns (numeric or categorical), `z_<name>` numeric instrument columns,
//! a numeric `p` treatment column and a numeric `y` outcome column. Floats
//! are written with 17 significant digits so values round-trip exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::data::{ColumnKind, Dataset, InputLayout};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::sim::{ResultsTable, SweepConfig};
use crate::treatment::FirstStageConfig;

/// 17-significant-digit float formatting (exact `f64` round trip).
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

enum ColumnRole {
    Covariate(String),
    Instrument(String),
    Treatment,
    Outcome,
}

fn classify_header(name: &str) -> Result<ColumnRole> {
    if let Some(rest) = name.strip_prefix("x_") {
        Ok(ColumnRole::Covariate(rest.to_string()))
    } else if let Some(rest) = name.strip_prefix("z_") {
        Ok(ColumnRole::Instrument(rest.to_string()))
    } else if name == "p" {
        Ok(ColumnRole::Treatment)
    } else if name == "y" {
        Ok(ColumnRole::Outcome)
    } else {
        Err(Error::Schema(format!(
            "unknown column {name:?}: expected x_<name>, z_<name>, p, or y"
        )))
    }
}

/// Load a dataset CSV. Covariate columns whose cells all parse as numbers
/// are numeric; any other covariate column is categorical, with integer
/// codes assigned by first appearance and the level strings kept in the
/// dataset metadata. Instrument, treatment, and outcome cells must be
/// numeric.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let roles: Vec<ColumnRole> = headers
        .iter()
        .map(classify_header)
        .collect::<Result<Vec<_>>>()?;

    let mut x_cols: Vec<(usize, String)> = Vec::new();
    let mut z_cols: Vec<(usize, String)> = Vec::new();
    let mut p_col: Option<usize> = None;
    let mut y_col: Option<usize> = None;
    for (idx, role) in roles.iter().enumerate() {
        match role {
            ColumnRole::Covariate(name) => x_cols.push((idx, name.clone())),
            ColumnRole::Instrument(name) => z_cols.push((idx, name.clone())),
            ColumnRole::Treatment => {
                if p_col.replace(idx).is_some() {
                    return Err(Error::Schema("duplicate p column".into()));
                }
            }
            ColumnRole::Outcome => {
                if y_col.replace(idx).is_some() {
                    return Err(Error::Schema("duplicate y column".into()));
                }
            }
        }
    }
    if z_cols.is_empty() {
        return Err(Error::Schema("dataset needs at least one z_ column".into()));
    }
    let p_col = p_col.ok_or_else(|| Error::Schema("missing p column".into()))?;
    let y_col = y_col.ok_or_else(|| Error::Schema("missing y column".into()))?;

    let mut cells: Vec<Vec<String>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Schema(format!(
                "ragged row with {} cells, header has {}",
                record.len(),
                headers.len()
            )));
        }
        cells.push(record.iter().map(|s| s.to_string()).collect());
    }
    let n = cells.len();

    let parse_numeric = |idx: usize, label: &str| -> Result<Vec<f64>> {
        cells
            .iter()
            .enumerate()
            .map(|(row, rec)| {
                rec[idx].trim().parse::<f64>().map_err(|_| {
                    Error::Schema(format!(
                        "non-numeric cell {:?} in column {label} at data row {row}",
                        rec[idx]
                    ))
                })
            })
            .collect()
    };

    let mut x = Mat::zeros(n, x_cols.len());
    let mut x_kinds = Vec::with_capacity(x_cols.len());
    for (slot, (idx, name)) in x_cols.iter().enumerate() {
        let all_numeric = cells
            .iter()
            .all(|rec| rec[*idx].trim().parse::<f64>().is_ok());
        if all_numeric {
            for (row, value) in parse_numeric(*idx, &format!("x_{name}"))?.iter().enumerate() {
                x.row_mut(row)[slot] = *value;
            }
            x_kinds.push(ColumnKind::Numeric);
        } else {
            // stable codes: sorted distinct level strings
            let mut levels: Vec<String> = Vec::new();
            for (row, rec) in cells.iter().enumerate() {
                let cell = rec[*idx].trim();
                if cell.is_empty() {
                    return Err(Error::Schema(format!(
                        "empty cell in column x_{name} at data row {row}"
                    )));
                }
                if !levels.iter().any(|l| l == cell) {
                    levels.push(cell.to_string());
                }
            }
            levels.sort();
            for (row, rec) in cells.iter().enumerate() {
                let cell = rec[*idx].trim();
                let code = levels.iter().position(|l| l == cell).unwrap();
                x.row_mut(row)[slot] = code as f64;
            }
            x_kinds.push(ColumnKind::Categorical { levels });
        }
    }

    let mut z = Mat::zeros(n, z_cols.len());
    for (slot, (idx, name)) in z_cols.iter().enumerate() {
        for (row, value) in parse_numeric(*idx, &format!("z_{name}"))?.iter().enumerate() {
            z.row_mut(row)[slot] = *value;
        }
    }
    let p = parse_numeric(p_col, "p")?;
    let y = parse_numeric(y_col, "y")?;

    Dataset::new(
        x_cols.into_iter().map(|(_, name)| name).collect(),
        x_kinds,
        x,
        z_cols.into_iter().map(|(_, name)| name).collect(),
        z,
        p,
        y,
    )
}

/// Write a dataset CSV in canonical column order: covariates, instruments,
/// `p`, `y`. Categorical cells are written as their level strings.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = Vec::new();
    for name in &ds.x_names {
        header.push(format!("x_{name}"));
    }
    for name in &ds.z_names {
        header.push(format!("z_{name}"));
    }
    header.push("p".into());
    header.push("y".into());
    writer.write_record(&header)?;

    for i in 0..ds.n() {
        let mut record = Vec::with_capacity(header.len());
        for (j, kind) in ds.x_kinds.iter().enumerate() {
            let value = ds.x_row(i)[j];
            match kind {
                ColumnKind::Numeric => record.push(format_float(value)),
                ColumnKind::Categorical { levels } => {
                    record.push(levels[value as usize].clone())
                }
            }
        }
        for j in 0..ds.z_names.len() {
            record.push(format_float(ds.z_row(i)[j]));
        }
        record.push(format_float(ds.p[i]));
        record.push(format_float(ds.y[i]));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Load counterfactual query points: a CSV with a `p` column plus one
/// `x_<name>` column per model covariate. Categorical cells are mapped
/// through the model's stored level tables.
pub fn load_queries(path: &Path, layout: &InputLayout) -> Result<Vec<(f64, Vec<f64>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut p_col = None;
    let mut x_idx: Vec<Option<usize>> = vec![None; layout.x_names.len()];
    for (idx, name) in headers.iter().enumerate() {
        if name == "p" {
            p_col = Some(idx);
        } else if let Some(rest) = name.strip_prefix("x_") {
            match layout.x_names.iter().position(|n| n == rest) {
                Some(slot) => x_idx[slot] = Some(idx),
                None => {
                    return Err(Error::Schema(format!(
                        "query column x_{rest} is not a model covariate"
                    )))
                }
            }
        } else {
            return Err(Error::Schema(format!(
                "unknown query column {name:?}: expected p or x_<name>"
            )));
        }
    }
    let p_col = p_col.ok_or_else(|| Error::Schema("missing p column in queries".into()))?;
    let missing: Vec<&String> = layout
        .x_names
        .iter()
        .zip(&x_idx)
        .filter(|(_, idx)| idx.is_none())
        .map(|(name, _)| name)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Schema(format!(
            "queries are missing covariate columns: {missing:?}"
        )));
    }

    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let p: f64 = record[p_col]
            .trim()
            .parse()
            .map_err(|_| Error::Schema(format!("non-numeric p cell {:?}", &record[p_col])))?;
        let mut raw_x = Vec::with_capacity(layout.x_names.len());
        for (slot, idx) in x_idx.iter().enumerate() {
            let cell = record[idx.unwrap()].trim();
            match &layout.x_kinds[slot] {
                ColumnKind::Numeric => raw_x.push(cell.parse::<f64>().map_err(|_| {
                    Error::Schema(format!(
                        "non-numeric cell {cell:?} for covariate {}",
                        layout.x_names[slot]
                    ))
                })?),
                ColumnKind::Categorical { .. } => raw_x.push(layout.level_code(slot, cell)?),
            }
        }
        out.push((p, raw_x));
    }
    Ok(out)
}

/// One inference output row: query point, estimate, band, method tag.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRow {
    pub p: f64,
    pub x: Vec<f64>,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub method: String,
}

/// Write inference intervals as CSV: `p, x_..., estimate, lower, upper,
/// method`.
pub fn save_intervals(rows: &[IntervalRow], layout: &InputLayout, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["p".to_string()];
    for name in &layout.x_names {
        header.push(format!("x_{name}"));
    }
    header.extend(["estimate".into(), "lower".into(), "upper".into(), "method".into()]);
    writer.write_record(&header)?;
    for row in rows {
        let mut record = vec![format_float(row.p)];
        for (j, kind) in layout.x_kinds.iter().enumerate() {
            match kind {
                ColumnKind::Numeric => record.push(format_float(row.x[j])),
                ColumnKind::Categorical { levels } => {
                    record.push(levels[row.x[j] as usize].clone())
                }
            }
        }
        record.push(format_float(row.estimate));
        record.push(format_float(row.lower));
        record.push(format_float(row.upper));
        record.push(row.method.clone());
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Write a sweep results table as CSV with the header
/// `rho,n,method,seed,structural_mse,oos_deviance,oos_causal_loss,wall_ms,status`.
pub fn save_results_table(table: &ResultsTable, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([
        "rho",
        "n",
        "method",
        "seed",
        "structural_mse",
        "oos_deviance",
        "oos_causal_loss",
        "wall_ms",
        "status",
    ])?;
    let opt = |v: Option<f64>| v.map(format_float).unwrap_or_default();
    for row in &table.rows {
        writer.write_record(&[
            format_float(row.rho),
            row.n.to_string(),
            row.method.to_string(),
            row.seed_index.to_string(),
            opt(row.structural_mse),
            opt(row.oos_deviance),
            opt(row.oos_causal_loss),
            row.wall_ms.to_string(),
            row.status.clone(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Parse and validate a JSON config file. Unknown keys are rejected by the
/// config types themselves.
pub fn parse_config<T>(path: &Path) -> Result<T>
where
    T: DeserializeOwned + ValidatedConfig,
{
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let value: T = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    value.validate()?;
    Ok(value)
}

/// Canonical JSON form of a config (defaults filled in).
pub fn normalized_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

pub trait ValidatedConfig {
    fn validate(&self) -> Result<()>;
}

impl ValidatedConfig for FirstStageConfig {
    fn validate(&self) -> Result<()> {
        FirstStageConfig::validate(self)
    }
}

impl ValidatedConfig for crate::outcome::SecondStageConfig {
    fn validate(&self) -> Result<()> {
        crate::outcome::SecondStageConfig::validate(self)
    }
}

impl ValidatedConfig for SweepConfig {
    fn validate(&self) -> Result<()> {
        SweepConfig::validate(self)
    }
}

impl ValidatedConfig for crate::sim::SimConfig {
    fn validate(&self) -> Result<()> {
        crate::sim::SimConfig::validate(self)
    }
}

/// Write bytes then flush; small helper for full-file artifacts.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
