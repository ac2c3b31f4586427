//! In-memory observational datasets and the encoding used to feed them to
//! networks.
//!
//! A dataset holds covariates `x` (numeric or categorical), numeric
//! instruments `z`, a treatment column `p`, and an outcome column `y`.
//! Categorical covariates are stored as integer level codes alongside their
//! level table; encoding expands them to one-hot indicators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical { levels: Vec<String> },
}

impl ColumnKind {
    pub fn encoded_width(&self) -> usize {
        match self {
            ColumnKind::Numeric => 1,
            ColumnKind::Categorical { levels } => levels.len(),
        }
    }
}

/// Rows of `(x, z, p, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x_names: Vec<String>,
    pub x_kinds: Vec<ColumnKind>,
    pub x: Mat,
    pub z_names: Vec<String>,
    pub z: Mat,
    pub p: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(
        x_names: Vec<String>,
        x_kinds: Vec<ColumnKind>,
        x: Mat,
        z_names: Vec<String>,
        z: Mat,
        p: Vec<f64>,
        y: Vec<f64>,
    ) -> Result<Self> {
        let n = p.len();
        if x_names.len() != x_kinds.len() || x.cols != x_names.len() {
            return Err(Error::Schema("covariate metadata out of step".into()));
        }
        if z_names.is_empty() {
            return Err(Error::Schema("dataset needs at least one instrument column".into()));
        }
        if z.cols != z_names.len() {
            return Err(Error::Schema("instrument metadata out of step".into()));
        }
        if x.rows != n || z.rows != n || y.len() != n {
            return Err(Error::Schema(format!(
                "column lengths disagree: x {} z {} p {n} y {}",
                x.rows,
                z.rows,
                y.len()
            )));
        }
        let ds = Dataset {
            x_names,
            x_kinds,
            x,
            z_names,
            z,
            p,
            y,
        };
        ds.check_finite()?;
        Ok(ds)
    }

    fn check_finite(&self) -> Result<()> {
        let all_finite = self.x.data.iter().all(|v| v.is_finite())
            && self.z.data.iter().all(|v| v.is_finite())
            && self.p.iter().all(|v| v.is_finite())
            && self.y.iter().all(|v| v.is_finite());
        if all_finite {
            Ok(())
        } else {
            Err(Error::Numeric("dataset contains non-finite cells".into()))
        }
    }

    pub fn n(&self) -> usize {
        self.p.len()
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        self.x.row(i)
    }

    pub fn z_row(&self, i: usize) -> &[f64] {
        self.z.row(i)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut x = Mat::zeros(indices.len(), self.x.cols);
        let mut z = Mat::zeros(indices.len(), self.z.cols);
        let mut p = Vec::with_capacity(indices.len());
        let mut y = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.x.row(i));
            z.row_mut(r).copy_from_slice(self.z.row(i));
            p.push(self.p[i]);
            y.push(self.y[i]);
        }
        Dataset {
            x_names: self.x_names.clone(),
            x_kinds: self.x_kinds.clone(),
            x,
            z_names: self.z_names.clone(),
            z,
            p,
            y,
        }
    }

    /// Deterministic head/tail split at `n_first` rows.
    pub fn split_at(&self, n_first: usize) -> (Dataset, Dataset) {
        let head: Vec<usize> = (0..n_first.min(self.n())).collect();
        let tail: Vec<usize> = (n_first.min(self.n())..self.n()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// Seeded row shuffle.
    pub fn shuffled(&self, stream: &mut RngStream) -> Dataset {
        let perm = stream.permutation(self.n());
        self.subset(&perm)
    }

    /// Copy with the instrument block's rows rearranged by `perm`
    /// (all z columns move together).
    pub fn with_permuted_z(&self, perm: &[usize]) -> Dataset {
        let mut out = self.clone();
        for (r, &src) in perm.iter().enumerate() {
            let row = self.z.row(src).to_vec();
            out.z.row_mut(r).copy_from_slice(&row);
        }
        out
    }
}

/// Per-column affine standardization to zero mean, unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit from row-major data. Near-constant columns get scale 1 so the
    /// transform stays invertible.
    pub fn fit(rows: &Mat) -> Standardizer {
        let n = rows.rows.max(1) as f64;
        let cols = rows.cols;
        let mut mean = vec![0.0; cols];
        for i in 0..rows.rows {
            for (m, v) in mean.iter_mut().zip(rows.row(i)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; cols];
        for i in 0..rows.rows {
            for (j, v) in rows.row(i).iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s < 1e-12 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn identity(width: usize) -> Standardizer {
        Standardizer {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, row: &mut [f64]) {
        debug_assert_eq!(row.len(), self.mean.len());
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }
}

/// Affine standardization for a single column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarStandardizer {
    pub mean: f64,
    pub std: f64,
}

impl ScalarStandardizer {
    pub fn fit(values: &[f64]) -> ScalarStandardizer {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        ScalarStandardizer {
            mean,
            std: if std < 1e-12 { 1.0 } else { std },
        }
    }

    pub fn identity() -> ScalarStandardizer {
        ScalarStandardizer { mean: 0.0, std: 1.0 }
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn inverse(&self, v: f64) -> f64 {
        self.mean + self.std * v
    }
}

/// Description of which raw columns feed a model and how they expand to
/// network inputs. Stored inside trained models so persisted networks can
/// encode fresh rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputLayout {
    pub x_names: Vec<String>,
    pub x_kinds: Vec<ColumnKind>,
    pub z_names: Vec<String>,
}

impl InputLayout {
    pub fn from_dataset(ds: &Dataset) -> InputLayout {
        InputLayout {
            x_names: ds.x_names.clone(),
            x_kinds: ds.x_kinds.clone(),
            z_names: ds.z_names.clone(),
        }
    }

    pub fn encoded_x_width(&self) -> usize {
        self.x_kinds.iter().map(|k| k.encoded_width()).sum()
    }

    pub fn encoded_xz_width(&self) -> usize {
        self.encoded_x_width() + self.z_names.len()
    }

    /// Expand a raw covariate row (level codes for categorical columns)
    /// into numeric features: numeric columns pass through, categoricals
    /// become one-hot blocks.
    pub fn encode_x(&self, raw_x: &[f64], out: &mut Vec<f64>) -> Result<()> {
        if raw_x.len() != self.x_kinds.len() {
            return Err(Error::Dimension(format!(
                "expected {} covariates, got {}",
                self.x_kinds.len(),
                raw_x.len()
            )));
        }
        for (value, kind) in raw_x.iter().zip(&self.x_kinds) {
            match kind {
                ColumnKind::Numeric => out.push(*value),
                ColumnKind::Categorical { levels } => {
                    let code = *value;
                    if code.fract() != 0.0 || code < 0.0 || code >= levels.len() as f64 {
                        return Err(Error::Domain(format!(
                            "categorical code {code} outside 0..{}",
                            levels.len()
                        )));
                    }
                    let code = code as usize;
                    for k in 0..levels.len() {
                        out.push(if k == code { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn encode_xz(&self, raw_x: &[f64], z: &[f64], out: &mut Vec<f64>) -> Result<()> {
        self.encode_x(raw_x, out)?;
        if z.len() != self.z_names.len() {
            return Err(Error::Dimension(format!(
                "expected {} instruments, got {}",
                self.z_names.len(),
                z.len()
            )));
        }
        out.extend_from_slice(z);
        Ok(())
    }

    /// Map a categorical level string to its code for column `col`.
    pub fn level_code(&self, col: usize, level: &str) -> Result<f64> {
        match &self.x_kinds[col] {
            ColumnKind::Numeric => Err(Error::Domain(format!(
                "column {} is numeric, no levels",
                self.x_names[col]
            ))),
            ColumnKind::Categorical { levels } => levels
                .iter()
                .position(|l| l == level)
                .map(|i| i as f64)
                .ok_or_else(|| {
                    Error::Domain(format!(
                        "unknown level {level:?} for column {}",
                        self.x_names[col]
                    ))
                }),
        }
    }
}

/// Encode and standardize every row of a dataset for first-stage training:
/// features are `[enc(x), z]`.
pub fn encode_xz_matrix(ds: &Dataset, layout: &InputLayout) -> Result<Mat> {
    let width = layout.encoded_xz_width();
    let mut m = Mat::zeros(ds.n(), width);
    let mut buf = Vec::with_capacity(width);
    for i in 0..ds.n() {
        buf.clear();
        layout.encode_xz(ds.x_row(i), ds.z_row(i), &mut buf)?;
        m.row_mut(i).copy_from_slice(&buf);
    }
    Ok(m)
}

/// Encoded covariate block only: `enc(x)` per row.
pub fn encode_x_matrix(ds: &Dataset, layout: &InputLayout) -> Result<Mat> {
    let width = layout.encoded_x_width();
    let mut m = Mat::zeros(ds.n(), width);
    let mut buf = Vec::with_capacity(width);
    for i in 0..ds.n() {
        buf.clear();
        layout.encode_x(ds.x_row(i), &mut buf)?;
        m.row_mut(i).copy_from_slice(&buf);
    }
    Ok(m)
}
