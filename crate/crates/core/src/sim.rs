//! A simulated pricing economy for benchmarking: customers with
//! time-varying price sensitivity, strategically set prices, and a tunable
//! endogeneity knob, plus the fixed-grid structural evaluation and the
//! sweep harness that compares estimators across it.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_2sls, fit_ffnet, predict_2sls, predict_ffnet};
use crate::data::{ColumnKind, Dataset};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::outcome::{oos_causal_loss, train_second_stage, SecondStageConfig};
use crate::rng::RngStream;
use crate::treatment::{oos_deviance, train_first_stage, FirstStageConfig, HeadSpec};

/// Number of customer segments.
pub const SEGMENTS: u8 = 7;

/// Base sales level of the outcome equation. Fitted models absorb this
/// intercept, so grid evaluations against the structural curve subtract it
/// from model predictions.
pub const BASE_SALES: f64 = 100.0;

/// Time-varying sensitivity curve on `t in [0, 10]`.
pub fn psi(t: f64) -> f64 {
    let d = t - 5.0;
    2.0 * (d.powi(4) / 600.0 + (-4.0 * d * d).exp() + t / 10.0 - 2.0)
}

/// Structural counterfactual: expected sales at price `p` for segment `s`
/// at time `t`.
pub fn true_h(t: f64, s: u8, p: f64) -> f64 {
    let psi_t = psi(t);
    s as f64 * psi_t + (psi_t - 2.0) * p
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub rho: f64,
    pub seed: u64,
    #[serde(default)]
    pub holdout_fraction: Option<f64>,
}

impl SimConfig {
    pub fn new(n: usize, rho: f64, seed: u64) -> Self {
        SimConfig {
            n,
            rho,
            seed,
            holdout_fraction: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n: must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!(
                "rho: must lie in [0, 1], got {}",
                self.rho
            )));
        }
        if let Some(f) = self.holdout_fraction {
            if !(0.0..=0.9).contains(&f) {
                return Err(Error::Config(format!(
                    "holdout_fraction: must lie in [0, 0.9], got {f}"
                )));
            }
        }
        Ok(())
    }
}

/// One simulated observation with its latent shocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimRow {
    pub t: f64,
    pub s: u8,
    pub z: f64,
    pub v: f64,
    pub e: f64,
    pub p: f64,
    pub y: f64,
}

/// Draw the economy: `t` uniform on [0, 10], segments uniform over 1..=7,
/// `z, v` standard normal, `e = rho v + sqrt(1 - rho^2) eps`, price
/// `p = 25 + (z + 3) psi_t + v`, sales
/// `y = 100 + s psi_t + (psi_t - 2) p + e`.
pub fn simulate_rows(config: &SimConfig) -> Result<Vec<SimRow>> {
    config.validate()?;
    let mut stream = RngStream::root(config.seed).derive(&[0x51D0]);
    let rho = config.rho;
    let noise_scale = (1.0 - rho * rho).sqrt();
    let mut rows = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let t = stream.uniform_in(0.0, 10.0);
        let s = 1 + stream.index(SEGMENTS as usize) as u8;
        let z = stream.normal();
        let v = stream.normal();
        let eps = stream.normal();
        let e = rho * v + noise_scale * eps;
        let psi_t = psi(t);
        let p = 25.0 + (z + 3.0) * psi_t + v;
        let y = BASE_SALES + s as f64 * psi_t + (psi_t - 2.0) * p + e;
        rows.push(SimRow {
            t,
            s,
            z,
            v,
            e,
            p,
            y,
        });
    }
    Ok(rows)
}

/// Segment level labels used in datasets and CSV files.
pub fn segment_levels() -> Vec<String> {
    (1..=SEGMENTS).map(|s| format!("s{s}")).collect()
}

/// The observational dataset `(x = [t, s], z, p, y)` for the economy.
pub fn simulate(config: &SimConfig) -> Result<Dataset> {
    let rows = simulate_rows(config)?;
    dataset_from_rows(&rows)
}

pub fn dataset_from_rows(rows: &[SimRow]) -> Result<Dataset> {
    let n = rows.len();
    let mut x = Mat::zeros(n, 2);
    let mut z = Mat::zeros(n, 1);
    let mut p = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for (i, row) in rows.iter().enumerate() {
        x.row_mut(i)[0] = row.t;
        x.row_mut(i)[1] = (row.s - 1) as f64;
        z.row_mut(i)[0] = row.z;
        p.push(row.p);
        y.push(row.y);
    }
    Dataset::new(
        vec!["t".into(), "s".into()],
        vec![
            ColumnKind::Numeric,
            ColumnKind::Categorical {
                levels: segment_levels(),
            },
        ],
        x,
        vec!["cost".into()],
        z,
        p,
        y,
    )
}

/// Homogeneous linear IV design for calibration studies:
/// `y = gamma p + x + e`, `p = z + v`, `e = rho v + sqrt(1-rho^2) eps`.
pub fn simulate_linear_iv(n: usize, gamma: f64, rho: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("rho: must lie in [0, 1], got {rho}")));
    }
    let mut stream = RngStream::root(seed).derive(&[0x11EA]);
    let noise = (1.0 - rho * rho).sqrt();
    let mut x = Mat::zeros(n, 1);
    let mut z = Mat::zeros(n, 1);
    let mut p = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let xi = stream.normal();
        let zi = stream.normal();
        let vi = stream.normal();
        let ei = rho * vi + noise * stream.normal();
        let pi = zi + vi;
        x.row_mut(i)[0] = xi;
        z.row_mut(i)[0] = zi;
        p.push(pi);
        y.push(gamma * pi + xi + ei);
    }
    Dataset::new(
        vec!["x".into()],
        vec![ColumnKind::Numeric],
        x,
        vec!["z".into()],
        z,
        p,
        y,
    )
}

/// Fixed evaluation grid: a shared price ladder crossed with freshly drawn
/// `(t, s)` contexts. Evaluating on fixed prices breaks the endogeneity of
/// the training sample's price process.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralGrid {
    pub prices: Vec<f64>,
    pub contexts: Vec<(f64, u8)>,
    pub truth: Vec<f64>,
}

impl StructuralGrid {
    /// Prices span the 1st-99th percentile of the training prices with
    /// `n_prices` equal steps; contexts are drawn from the covariate law.
    pub fn build(
        train_prices: &[f64],
        n_prices: usize,
        n_contexts: usize,
        stream: &mut RngStream,
    ) -> Result<StructuralGrid> {
        if train_prices.is_empty() || n_prices == 0 || n_contexts == 0 {
            return Err(Error::Parameter("structural grid axes must be non-empty".into()));
        }
        let lo = crate::stats::quantile(train_prices, 0.01);
        let hi = crate::stats::quantile(train_prices, 0.99);
        let prices: Vec<f64> = if n_prices == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..n_prices)
                .map(|i| lo + (hi - lo) * i as f64 / (n_prices - 1) as f64)
                .collect()
        };
        let contexts: Vec<(f64, u8)> = (0..n_contexts)
            .map(|_| {
                let t = stream.uniform_in(0.0, 10.0);
                let s = 1 + stream.index(SEGMENTS as usize) as u8;
                (t, s)
            })
            .collect();
        let mut truth = Vec::with_capacity(prices.len() * contexts.len());
        for (t, s) in &contexts {
            for p in &prices {
                truth.push(true_h(*t, *s, *p));
            }
        }
        Ok(StructuralGrid {
            prices,
            contexts,
            truth,
        })
    }

    pub fn len(&self) -> usize {
        self.prices.len() * self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean squared error of a counterfactual predictor against the structural
/// truth over the whole grid.
pub fn structural_mse<F>(mut predict: F, grid: &StructuralGrid) -> Result<f64>
where
    F: FnMut(f64, u8, f64) -> Result<f64>,
{
    let mut total = 0.0;
    let mut idx = 0;
    for (t, s) in &grid.contexts {
        for p in &grid.prices {
            let err = predict(*t, *s, *p)? - grid.truth[idx];
            total += err * err;
            idx += 1;
        }
    }
    Ok(total / grid.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    DeepIv,
    #[serde(rename = "2sls")]
    TwoSls,
    FfNet,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Method::DeepIv => "deepiv",
            Method::TwoSls => "2sls",
            Method::FfNet => "ffnet",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deepiv" => Ok(Method::DeepIv),
            "2sls" => Ok(Method::TwoSls),
            "ffnet" => Ok(Method::FfNet),
            other => Err(Error::Config(format!(
                "methods: unknown method {other:?} (expected deepiv, 2sls, ffnet)"
            ))),
        }
    }
}

/// Axes and per-stage settings for a benchmark sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub rhos: Vec<f64>,
    pub ns: Vec<usize>,
    pub methods: Vec<Method>,
    pub n_seeds: usize,
    pub master_seed: u64,
    pub holdout_fraction: f64,
    pub b_eval: usize,
    pub grid_prices: usize,
    pub grid_contexts: usize,
    pub first_stage: FirstStageConfig,
    pub second_stage: SecondStageConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            rhos: vec![0.0, 0.25, 0.5, 0.75, 0.9],
            ns: vec![1000, 5000, 10_000, 50_000],
            methods: vec![Method::DeepIv, Method::TwoSls, Method::FfNet],
            n_seeds: 5,
            master_seed: 0,
            holdout_fraction: 0.25,
            b_eval: 500,
            grid_prices: 20,
            grid_contexts: 1000,
            first_stage: figure2_first_stage(),
            second_stage: figure2_second_stage(),
        }
    }
}

/// Single hidden layer of 50 nodes with keep probability 0.5 for the
/// treatment network.
pub fn figure2_first_stage() -> FirstStageConfig {
    FirstStageConfig {
        head: HeadSpec::Mixture { components: 10 },
        hidden: vec![50],
        keep_prob: Some(0.5),
        epochs: 60,
        ..FirstStageConfig::default()
    }
}

/// Single hidden layer of 50 nodes with keep probability 0.5 for the
/// outcome network.
pub fn figure2_second_stage() -> SecondStageConfig {
    SecondStageConfig {
        hidden: vec![50],
        keep_prob: Some(0.5),
        epochs: 60,
        ..SecondStageConfig::default()
    }
}

/// The deeper configuration used for the inference slice study: widths
/// 256, 128, 64, 32 with keep probability 0.99.
pub fn figure3_stage_configs() -> (FirstStageConfig, SecondStageConfig) {
    (
        FirstStageConfig {
            head: HeadSpec::Mixture { components: 10 },
            hidden: vec![256, 128, 64, 32],
            keep_prob: Some(0.99),
            ..FirstStageConfig::default()
        },
        SecondStageConfig {
            hidden: vec![256, 128, 64, 32],
            keep_prob: Some(0.99),
            ..SecondStageConfig::default()
        },
    )
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rhos.is_empty() || self.ns.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("sweep axes must be non-empty".into()));
        }
        if self.rhos.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("rhos: every value must lie in [0, 1]".into()));
        }
        if self.ns.iter().any(|&n| n < 10) {
            return Err(Error::Config("ns: every sample size must be >= 10".into()));
        }
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds: must be >= 1".into()));
        }
        if !(0.0 < self.holdout_fraction && self.holdout_fraction <= 0.5) {
            return Err(Error::Config(format!(
                "holdout_fraction: must lie in (0, 0.5], got {}",
                self.holdout_fraction
            )));
        }
        if self.b_eval < 100 {
            return Err(Error::Config("b_eval: must be >= 100".into()));
        }
        if self.grid_prices == 0 || self.grid_contexts == 0 {
            return Err(Error::Config("grid axes must be >= 1".into()));
        }
        self.first_stage.validate()?;
        self.second_stage.validate()
    }
}

/// One sweep result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    pub n: usize,
    pub method: Method,
    pub seed_index: usize,
    pub structural_mse: Option<f64>,
    pub oos_deviance: Option<f64>,
    pub oos_causal_loss: Option<f64>,
    pub wall_ms: u64,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<SweepRow>,
}

impl ResultsTable {
    /// Rows matching a cell, in sweep order.
    pub fn cell(&self, rho: f64, n: usize, method: Method) -> Vec<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.rho == rho && r.n == n && r.method == method)
            .collect()
    }

    /// Median structural MSE across seeds for a cell (ignores failed rows).
    pub fn median_mse(&self, rho: f64, n: usize, method: Method) -> Option<f64> {
        let values: Vec<f64> = self
            .cell(rho, n, method)
            .iter()
            .filter_map(|r| r.structural_mse)
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(crate::stats::median(&values))
        }
    }
}

/// Run one `(rho, n, seed, method)` cell: simulate, split, train, and score.
/// Data and grid derive from `(rho_idx, n_idx, seed_idx)` only, so all
/// methods inside a cell see identical data and identical grids.
pub fn evaluate_cell(
    config: &SweepConfig,
    rho_idx: usize,
    n_idx: usize,
    seed_idx: usize,
    method: Method,
) -> SweepRow {
    let rho = config.rhos[rho_idx];
    let n = config.ns[n_idx];
    let started = Instant::now();
    let result = run_cell_inner(config, rho_idx, n_idx, seed_idx, method);
    let wall_ms = started.elapsed().as_millis() as u64;
    match result {
        Ok((mse, dev, closs)) => SweepRow {
            rho,
            n,
            method,
            seed_index: seed_idx,
            structural_mse: Some(mse),
            oos_deviance: dev,
            oos_causal_loss: closs,
            wall_ms,
            status: "ok".into(),
        },
        Err(e) => SweepRow {
            rho,
            n,
            method,
            seed_index: seed_idx,
            structural_mse: None,
            oos_deviance: None,
            oos_causal_loss: None,
            wall_ms,
            status: format!("error: {e}"),
        },
    }
}

type CellMetrics = (f64, Option<f64>, Option<f64>);

fn run_cell_inner(
    config: &SweepConfig,
    rho_idx: usize,
    n_idx: usize,
    seed_idx: usize,
    method: Method,
) -> Result<CellMetrics> {
    let rho = config.rhos[rho_idx];
    let n = config.ns[n_idx];
    let cell_stream = RngStream::root(config.master_seed).derive(&[
        0x5EE9,
        rho_idx as u64,
        n_idx as u64,
        seed_idx as u64,
    ]);
    let sim_seed = cell_stream.derive(&[0]).next_u64();
    let data = simulate(&SimConfig::new(n, rho, sim_seed))?;
    let holdout_n = ((n as f64) * config.holdout_fraction).round() as usize;
    let (train, holdout) = data.split_at(n - holdout_n);

    let mut grid_stream = cell_stream.derive(&[1]);
    let grid = StructuralGrid::build(
        &train.p,
        config.grid_prices,
        config.grid_contexts,
        &mut grid_stream,
    )?;
    let seg_code = |s: u8| (s - 1) as f64;

    // every method fits sales including the base level; the grid holds the
    // structural curve without it
    match method {
        Method::DeepIv => {
            let mut fs = config.first_stage.clone();
            fs.seed = Some(cell_stream.derive(&[2]).next_u64());
            let tmodel = train_first_stage(&train, &fs)?;
            let mut ss = config.second_stage.clone();
            ss.seed = Some(cell_stream.derive(&[3]).next_u64());
            let omodel = train_second_stage(&train, &tmodel, &ss)?;
            let mse = structural_mse(
                |t, s, p| Ok(omodel.predict(p, &[t, seg_code(s)])? - BASE_SALES),
                &grid,
            )?;
            let dev = oos_deviance(&tmodel, &holdout)?;
            let closs = oos_causal_loss(&omodel, &tmodel, &holdout, config.b_eval)?;
            Ok((mse, Some(dev), Some(closs)))
        }
        Method::TwoSls => {
            let model = fit_2sls(&train)?;
            let mse = structural_mse(
                |t, s, p| Ok(predict_2sls(&model, p, &[t, seg_code(s)])? - BASE_SALES),
                &grid,
            )?;
            Ok((mse, None, None))
        }
        Method::FfNet => {
            let mut ss = config.second_stage.clone();
            ss.seed = Some(cell_stream.derive(&[4]).next_u64());
            // the naive baseline trains without dropout
            ss.keep_prob = None;
            ss.vb_mode = false;
            let model = fit_ffnet(&train, &ss)?;
            let mse = structural_mse(
                |t, s, p| Ok(predict_ffnet(&model, p, &[t, seg_code(s)])? - BASE_SALES),
                &grid,
            )?;
            Ok((mse, None, None))
        }
    }
}

/// Run the full sweep. Cells are independent and run in parallel; per-cell
/// failures land in the status column without aborting the sweep.
pub fn run_sweep(config: &SweepConfig) -> Result<ResultsTable> {
    config.validate()?;
    let mut cells = Vec::new();
    for rho_idx in 0..config.rhos.len() {
        for n_idx in 0..config.ns.len() {
            for (m_idx, method) in config.methods.iter().enumerate() {
                for seed_idx in 0..config.n_seeds {
                    cells.push((rho_idx, n_idx, m_idx, *method, seed_idx));
                }
            }
        }
    }
    let mut rows: Vec<((usize, usize, usize, usize), SweepRow)> = cells
        .into_par_iter()
        .map(|(rho_idx, n_idx, m_idx, method, seed_idx)| {
            (
                (rho_idx, n_idx, m_idx, seed_idx),
                evaluate_cell(config, rho_idx, n_idx, seed_idx, method),
            )
        })
        .collect();
    rows.sort_by_key(|(key, _)| *key);
    Ok(ResultsTable {
        rows: rows.into_iter().map(|(_, row)| row).collect(),
    })
}
