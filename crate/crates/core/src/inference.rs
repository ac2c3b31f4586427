//! Uncertainty quantification for the fitted counterfactual function.
//!
//! Frequentist route: hold out data, treat the outcome network's final-layer
//! features at observed treatments as endogenous regressors and their
//! conditional expectations under the fitted treatment distribution as
//! instruments, and run just-identified linear IV with a
//! heteroskedasticity-robust covariance. The sandwiched residual diagonal is
//! computed from the treatment-side features, not the instruments.
//!
//! Bayesian route: read a dropout-trained network as a variational
//! posterior over weights; predictive bands come from resampling masks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{condition_number, inverse, solve, Mat};
use crate::net::sample_dropout_masks;
use crate::outcome::OutcomeModel;
use crate::rng::RngStream;
use crate::stats::normal_quantile;
use crate::treatment::{StdConditional, TreatmentModel};

/// Condition-number threshold beyond which the cross-moment matrix gets a
/// ridge correction before solving.
pub const CONDITION_LIMIT: f64 = 1e10;

/// Coefficients and covariance from the split-sample linear IV fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInferenceResult {
    pub beta_hat: Vec<f64>,
    /// Covariance of `beta_hat`, row-major (K+1) x (K+1), symmetric PSD.
    pub v_beta: Vec<Vec<f64>>,
    /// Left-out sample size.
    pub t_lo: usize,
    /// 1-norm condition estimate of the instrument/treatment cross-moment
    /// matrix (before any ridge correction).
    pub condition_number: f64,
    /// Whether a ridge correction was applied to reach a solvable system.
    pub ridged: bool,
}

impl SplitInferenceResult {
    pub fn dim(&self) -> usize {
        self.beta_hat.len()
    }

    fn v_mat(&self) -> Mat {
        Mat::from_rows(&self.v_beta).expect("rectangular by construction")
    }
}

/// Conditional expectation of the feature vector under the fitted treatment
/// distribution: exact for categorical heads, a `b_eval`-draw Monte-Carlo
/// average otherwise. The leading intercept feature stays exactly 1.
pub fn compute_eta_bar(
    omodel: &OutcomeModel,
    tmodel: &TreatmentModel,
    x: &[f64],
    z: &[f64],
    b_eval: usize,
    stream: &mut RngStream,
) -> Result<Vec<f64>> {
    if b_eval == 0 {
        return Err(Error::Parameter("b_eval must be >= 1".into()));
    }
    check_shared_scale(omodel, tmodel)?;
    let cond = tmodel.conditional_std(x, z, tmodel.point_mode())?;
    let x_std = omodel.encode_x_std(x)?;
    match &cond {
        StdConditional::Categorical { levels, probs } => {
            let mut acc = vec![0.0; omodel.final_width() + 1];
            for (lvl, pi) in levels.iter().zip(probs) {
                let feats =
                    omodel.features_std(omodel.treatment_standardizer.forward(*lvl), &x_std)?;
                for (a, f) in acc.iter_mut().zip(&feats) {
                    *a += pi * f;
                }
            }
            Ok(acc)
        }
        StdConditional::Mixture(_) => {
            let mut acc = vec![0.0; omodel.final_width() + 1];
            for _ in 0..b_eval {
                let p_std = cond.sample_std(stream);
                let feats = omodel.features_std(p_std, &x_std)?;
                for (a, f) in acc.iter_mut().zip(&feats) {
                    *a += f;
                }
            }
            for a in acc.iter_mut() {
                *a /= b_eval as f64;
            }
            Ok(acc)
        }
    }
}

fn check_shared_scale(model: &OutcomeModel, tmodel: &TreatmentModel) -> Result<()> {
    let a = &model.treatment_standardizer;
    let b = &tmodel.treatment_standardizer;
    if a.mean != b.mean || a.std != b.std {
        return Err(Error::Parameter(
            "outcome and treatment models disagree on the treatment scale".into(),
        ));
    }
    Ok(())
}

/// Split-sample IV on the left-out data: regress outcomes on treatment-side
/// features `H` using instrument-side features `H_bar`.
pub fn split_two_stage(
    omodel: &OutcomeModel,
    tmodel: &TreatmentModel,
    leftout: &Dataset,
    b_eval: usize,
    stream: &mut RngStream,
) -> Result<SplitInferenceResult> {
    let k_dim = omodel.final_width() + 1;
    if leftout.n() <= k_dim {
        return Err(Error::Parameter(format!(
            "left-out sample of {} cannot identify {k_dim} coefficients",
            leftout.n()
        )));
    }
    let rows: Result<Vec<(Vec<f64>, Vec<f64>)>> = (0..leftout.n())
        .into_par_iter()
        .map(|i| {
            let mut row_stream = stream.derive(&[0xE7A, i as u64]);
            let eta = omodel.features(leftout.p[i], leftout.x_row(i))?;
            let eta_bar = compute_eta_bar(
                omodel,
                tmodel,
                leftout.x_row(i),
                leftout.z_row(i),
                b_eval,
                &mut row_stream,
            )?;
            Ok((eta, eta_bar))
        })
        .collect();
    let rows = rows?;

    let mut h = Mat::zeros(leftout.n(), k_dim);
    let mut h_bar = Mat::zeros(leftout.n(), k_dim);
    for (i, (eta, eta_bar)) in rows.iter().enumerate() {
        h.row_mut(i).copy_from_slice(eta);
        h_bar.row_mut(i).copy_from_slice(eta_bar);
    }
    split_from_matrices(&h_bar, &h, &leftout.y)
}

/// Core estimator on prepared matrices: `beta = (H_bar' H)^-1 H_bar' Y` with
/// the robust covariance
/// `(H_bar' H_bar)^-1 H_bar' diag[(H beta - Y)^2] H_bar (H_bar' H_bar)^-1`.
pub fn split_from_matrices(h_bar: &Mat, h: &Mat, y: &[f64]) -> Result<SplitInferenceResult> {
    let n = h.rows;
    let k_dim = h.cols;
    if h_bar.rows != n || h_bar.cols != k_dim || y.len() != n {
        return Err(Error::Dimension("feature matrices disagree in shape".into()));
    }

    let mut cross = h_bar.transpose().matmul(h); // H_bar' H
    let mut gram = h_bar.gram(); // H_bar' H_bar
    let cond = condition_number(&cross);
    let mut ridged = false;
    if !(cond.is_finite() && cond <= CONDITION_LIMIT) {
        // near-collinear final-layer features: nudge both moment matrices.
        // The nudge scales with the instrument energy; identically zero
        // instruments cannot be repaired.
        let gram_trace: f64 = (0..k_dim).map(|i| gram.at(i, i)).sum();
        if !(gram_trace.is_finite() && gram_trace > 0.0) {
            return Err(Error::Conditioning {
                context: "instrument/treatment cross-moment matrix".into(),
                cond,
            });
        }
        let ridge = 1e-8 * gram_trace / k_dim as f64;
        for i in 0..k_dim {
            let c = cross.at(i, i);
            cross.set(i, i, c + ridge);
            let g = gram.at(i, i);
            gram.set(i, i, g + ridge);
        }
        ridged = true;
        let cond2 = condition_number(&cross);
        if !(cond2.is_finite() && cond2 <= CONDITION_LIMIT) {
            return Err(Error::Conditioning {
                context: "instrument/treatment cross-moment matrix".into(),
                cond: cond2,
            });
        }
    }

    let hbar_t_y: Vec<f64> = (0..k_dim)
        .map(|j| (0..n).map(|i| h_bar.at(i, j) * y[i]).sum())
        .collect();
    let beta = solve(&cross, &hbar_t_y)?;

    // residuals from the treatment-side features
    let mut meat = Mat::zeros(k_dim, k_dim);
    for i in 0..n {
        let fit: f64 = h.row(i).iter().zip(&beta).map(|(a, b)| a * b).sum();
        let r2 = (fit - y[i]) * (fit - y[i]);
        let hb = h_bar.row(i);
        for a in 0..k_dim {
            let w = r2 * hb[a];
            for b in 0..k_dim {
                meat.data[a * k_dim + b] += w * hb[b];
            }
        }
    }

    let gram_inv = inverse(&gram)?;
    let mut v = gram_inv.matmul(&meat).matmul(&gram_inv);
    // kill round-off asymmetry
    for a in 0..k_dim {
        for b in (a + 1)..k_dim {
            let s = 0.5 * (v.at(a, b) + v.at(b, a));
            v.set(a, b, s);
            v.set(b, a, s);
        }
    }

    let v_beta = (0..k_dim).map(|i| v.row(i).to_vec()).collect();
    Ok(SplitInferenceResult {
        beta_hat: beta,
        v_beta,
        t_lo: n,
        condition_number: cond,
        ridged,
    })
}

/// Robust covariance with an explicit residual vector (the paired oracle
/// route for the estimator above).
pub fn sandwich_covariance(h_bar: &Mat, residuals: &[f64]) -> Result<Mat> {
    let k_dim = h_bar.cols;
    let mut meat = Mat::zeros(k_dim, k_dim);
    for i in 0..h_bar.rows {
        let r2 = residuals[i] * residuals[i];
        let hb = h_bar.row(i);
        for a in 0..k_dim {
            for b in 0..k_dim {
                meat.data[a * k_dim + b] += r2 * hb[a] * hb[b];
            }
        }
    }
    let gram_inv = inverse(&h_bar.gram())?;
    Ok(gram_inv.matmul(&meat).matmul(&gram_inv))
}

/// Point estimate and CI half-width for the counterfactual prediction at
/// `(p, x)`: `h = beta . eta(x, p)` with variance `eta' V eta`.
pub fn counterfactual_ci(
    result: &SplitInferenceResult,
    omodel: &OutcomeModel,
    p: f64,
    x: &[f64],
    level: f64,
) -> Result<(f64, f64)> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Parameter(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    let eta = omodel.features(p, x)?;
    ci_from_features(result, &eta, level)
}

/// CI for an arbitrary feature vector (coordinates of `beta` included).
pub fn ci_from_features(
    result: &SplitInferenceResult,
    eta: &[f64],
    level: f64,
) -> Result<(f64, f64)> {
    if eta.len() != result.dim() {
        return Err(Error::Dimension(format!(
            "feature vector has length {}, fit has {}",
            eta.len(),
            result.dim()
        )));
    }
    let est: f64 = result.beta_hat.iter().zip(eta).map(|(b, e)| b * e).sum();
    let v = result.v_mat();
    let ve = v.matvec(eta);
    let var: f64 = eta.iter().zip(&ve).map(|(a, b)| a * b).sum();
    if var < -1e-10 {
        return Err(Error::Numeric(format!(
            "negative counterfactual variance {var}"
        )));
    }
    let z = normal_quantile(0.5 + level / 2.0)?;
    Ok((est, z * var.max(0.0).sqrt()))
}

/// Pointwise posterior-predictive band over a set of `(p, x)` queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorBand {
    pub queries: Vec<(f64, Vec<f64>)>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub n_draws: usize,
    pub keep_prob: f64,
    pub level: f64,
}

/// Posterior-predictive band from dropout resampling of the outcome
/// network's weights. Both stages must have been trained with the same keep
/// probability; the draws themselves only involve the outcome network since
/// the prediction at a fixed `(p, x)` never consults the treatment model.
pub fn dropout_posterior_predict(
    omodel: &OutcomeModel,
    tmodel: &TreatmentModel,
    queries: &[(f64, Vec<f64>)],
    n_draws: usize,
    level: f64,
    stream: &mut RngStream,
) -> Result<PosteriorBand> {
    let c = omodel.keep_prob.ok_or_else(|| {
        Error::Parameter("posterior bands need a dropout-trained outcome network".into())
    })?;
    match tmodel.keep_prob {
        Some(tc) if tc == c => {}
        other => {
            return Err(Error::Parameter(format!(
                "both stages must share one keep probability (first stage {other:?}, second {c})"
            )))
        }
    }
    posterior_band_at_c(omodel, c, queries, n_draws, level, stream)
}

/// Band under mask draws at an explicit keep probability (used for
/// sensitivity comparisons on fixed weights).
pub fn posterior_band_at_c(
    omodel: &OutcomeModel,
    keep_prob: f64,
    queries: &[(f64, Vec<f64>)],
    n_draws: usize,
    level: f64,
    stream: &mut RngStream,
) -> Result<PosteriorBand> {
    if n_draws < 2 {
        return Err(Error::Parameter("need at least 2 posterior draws".into()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Parameter(format!(
            "band level must lie in (0, 1), got {level}"
        )));
    }
    let hidden = omodel.network.hidden_widths();
    let mut draws: Vec<Vec<f64>> = vec![Vec::with_capacity(n_draws); queries.len()];
    for _ in 0..n_draws {
        // one weight realization evaluated across the whole query grid
        let masks = sample_dropout_masks(&hidden, keep_prob, stream)?;
        for (q, (p, x)) in queries.iter().enumerate() {
            draws[q].push(omodel.predict_masked(*p, x, &masks)?);
        }
    }
    let lo_q = (1.0 - level) / 2.0;
    let hi_q = 1.0 - lo_q;
    let mut mean = Vec::with_capacity(queries.len());
    let mut lower = Vec::with_capacity(queries.len());
    let mut upper = Vec::with_capacity(queries.len());
    for d in draws.iter_mut() {
        let m = crate::stats::mean(d);
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // quantiles widened to contain the mean so lower <= mean <= upper
        // holds even when the draw distribution is a near point mass
        lower.push(crate::stats::quantile_sorted(d, lo_q).min(m));
        upper.push(crate::stats::quantile_sorted(d, hi_q).max(m));
        mean.push(m);
    }
    Ok(PosteriorBand {
        queries: queries.to_vec(),
        mean,
        lower,
        upper,
        n_draws,
        keep_prob,
        level,
    })
}

/// Mean posterior-predictive standard deviation over a query grid at a
/// given keep probability (fixed weights).
pub fn posterior_sd_at_c(
    omodel: &OutcomeModel,
    keep_prob: f64,
    queries: &[(f64, Vec<f64>)],
    n_draws: usize,
    stream: &mut RngStream,
) -> Result<f64> {
    let hidden = omodel.network.hidden_widths();
    let mut draws: Vec<Vec<f64>> = vec![Vec::with_capacity(n_draws); queries.len()];
    for _ in 0..n_draws {
        let masks = sample_dropout_masks(&hidden, keep_prob, stream)?;
        for (q, (p, x)) in queries.iter().enumerate() {
            draws[q].push(omodel.predict_masked(*p, x, &masks)?);
        }
    }
    let sds: Vec<f64> = draws
        .iter()
        .map(|d| crate::stats::variance(d).sqrt())
        .collect();
    Ok(crate::stats::mean(&sds))
}

/// Train both stages at each candidate keep probability and pick the one
/// with the lowest left-out integral loss. Returns the winner and the
/// per-candidate `(c, loss)` table.
pub fn tune_keep_prob(
    train: &Dataset,
    holdout: &Dataset,
    fs_config: &crate::treatment::FirstStageConfig,
    ss_config: &crate::outcome::SecondStageConfig,
    grid: &[f64],
    b_eval: usize,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::Parameter("keep-probability grid is empty".into()));
    }
    let mut table = Vec::with_capacity(grid.len());
    for &c in grid {
        crate::net::check_keep_prob(c)?;
        let mut fs = fs_config.clone();
        fs.keep_prob = Some(c);
        let mut ss = ss_config.clone();
        ss.keep_prob = Some(c);
        let tmodel = crate::treatment::train_first_stage(train, &fs)?;
        let omodel = crate::outcome::train_second_stage(train, &tmodel, &ss)?;
        let loss = crate::outcome::oos_causal_loss(&omodel, &tmodel, holdout, b_eval)?;
        table.push((c, loss));
    }
    let best = table
        .iter()
        .cloned()
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap()
        .0;
    Ok((best, table))
}

/// The default tuning grid for the keep probability.
pub const KEEP_PROB_GRID: [f64; 3] = [0.90, 0.95, 0.99];

/// Entropy of a Bernoulli(`c`) mask variable.
pub fn bernoulli_entropy(c: f64) -> f64 {
    -(c * c.ln() + (1.0 - c) * (1.0 - c).ln())
}

/// The three pieces of the dropout variational objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VbObjectiveTerms {
    /// Expected negative log likelihood (passed through).
    pub nll: f64,
    /// Ridge penalty `c * lambda * ||omega||^2`.
    pub ridge_penalty: f64,
    /// Mask-entropy credit `k_total * ent(c)`; enters the objective with a
    /// minus sign and depends only on `(c, k_total)`.
    pub entropy: f64,
}

impl VbObjectiveTerms {
    /// Full objective: `nll + ridge_penalty - entropy`.
    pub fn total(&self) -> f64 {
        self.nll + self.ridge_penalty - self.entropy
    }
}

/// Assemble the variational-objective terms for a dropout-trained network
/// with squared weight norm `omega_sq_norm`, mean negative log likelihood
/// `mean_nll`, and `k_total` maskable outputs across layers.
pub fn vb_objective_terms(
    c: f64,
    omega_sq_norm: f64,
    mean_nll: f64,
    k_total: usize,
    lambda: f64,
) -> Result<VbObjectiveTerms> {
    crate::net::check_keep_prob(c)?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Parameter(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    Ok(VbObjectiveTerms {
        nll: mean_nll,
        ridge_penalty: c * lambda * omega_sq_norm,
        entropy: k_total as f64 * bernoulli_entropy(c),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ColumnKind, InputLayout, ScalarStandardizer, Standardizer};
    use crate::net::{Activation, DenseLayer, ParameterSet};
    use crate::outcome::test_support::{constant_treatment, no_covariate_layout};
    use crate::tensor::Tensor;
    use crate::treatment::{TreatmentHead, SIGMA_FLOOR};

    /// Identity-feature model: one hidden identity layer so the features
    /// are [1, p, x...].
    fn identity_feature_model(x_dim: usize) -> OutcomeModel {
        let d = 1 + x_dim;
        let mut eye = vec![vec![0.0; d]; d];
        for (i, row) in eye.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let network = ParameterSet::new(vec![
            DenseLayer::new(
                Tensor::matrix(&eye).unwrap(),
                Tensor::zeros(vec![d]),
                Activation::Identity,
            )
            .unwrap(),
            DenseLayer::new(
                Tensor::matrix(&[vec![0.0; d]]).unwrap(),
                Tensor::zeros(vec![1]),
                Activation::Identity,
            )
            .unwrap(),
        ])
        .unwrap();
        let (x_names, x_kinds) = if x_dim == 1 {
            (vec!["x".to_string()], vec![ColumnKind::Numeric])
        } else {
            (vec![], vec![])
        };
        OutcomeModel::from_parts(
            network,
            InputLayout {
                x_names,
                x_kinds,
                z_names: vec!["z".into()],
            },
            ScalarStandardizer::identity(),
            Standardizer::identity(x_dim),
            ScalarStandardizer::identity(),
            None,
            0,
        )
        .unwrap()
    }

    #[test]
    fn eta_bar_point_mass_equals_features_at_the_mass() {
        let omodel = identity_feature_model(0);
        let tmodel = constant_treatment(1.7, SIGMA_FLOOR);
        let mut stream = RngStream::root(1);
        let eta_bar = compute_eta_bar(&omodel, &tmodel, &[], &[0.0], 400, &mut stream).unwrap();
        let eta = omodel.features(1.7, &[]).unwrap();
        assert!((eta_bar[0] - eta[0]).abs() < 1e-12);
        assert!((eta_bar[1] - eta[1]).abs() < 3.0 * SIGMA_FLOOR / (400f64).sqrt() * 3.0);
    }

    #[test]
    fn eta_bar_linear_feature_converges_to_feature_at_the_mean() {
        let omodel = identity_feature_model(0);
        let tmodel = constant_treatment(0.8, 1.0);
        let mut errors = Vec::new();
        for b_eval in [100usize, 10_000] {
            let mut stream = RngStream::root(2);
            let eta_bar =
                compute_eta_bar(&omodel, &tmodel, &[], &[0.0], b_eval, &mut stream).unwrap();
            errors.push((eta_bar[1] - 0.8).abs());
        }
        // MC error shrinks roughly like 1/sqrt(B)
        assert!(errors[1] < errors[0]);
        assert!(errors[1] < 3.0 / (10_000f64).sqrt());
    }

    #[test]
    fn eta_bar_constant_feature_is_exact() {
        // hidden layer ignores input and emits the constant 5
        let network = ParameterSet::new(vec![
            DenseLayer::new(
                Tensor::matrix(&[vec![0.0]]).unwrap(),
                Tensor::vector(vec![5.0]).unwrap(),
                Activation::Identity,
            )
            .unwrap(),
            DenseLayer::new(
                Tensor::matrix(&[vec![1.0]]).unwrap(),
                Tensor::zeros(vec![1]),
                Activation::Identity,
            )
            .unwrap(),
        ])
        .unwrap();
        let omodel = OutcomeModel::from_parts(
            network,
            no_covariate_layout(),
            ScalarStandardizer::identity(),
            Standardizer::identity(0),
            ScalarStandardizer::identity(),
            None,
            0,
        )
        .unwrap();
        let tmodel = constant_treatment(0.0, 1.0);
        let mut stream = RngStream::root(3);
        let eta_bar = compute_eta_bar(&omodel, &tmodel, &[], &[0.0], 50, &mut stream).unwrap();
        assert_eq!(eta_bar, vec![1.0, 5.0]);
    }

    #[test]
    fn intercept_only_split_fit_by_hand() {
        // features [1] per row; Y = (1, -1): beta = 0, V = 0.5
        let h = Mat::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let result = split_from_matrices(&h, &h, &[1.0, -1.0]).unwrap();
        assert!(result.beta_hat[0].abs() < 1e-12);
        assert!((result.v_beta[0][0] - 0.5).abs() < 1e-12);
        assert!(!result.ridged);

        // 95% half-width: 1.96 * sqrt(0.5)
        let (est, half) = ci_from_features(&result, &[1.0], 0.95).unwrap();
        assert!(est.abs() < 1e-12);
        assert!((half - 1.386).abs() < 2e-3, "half width {half}");
    }

    #[test]
    fn no_endogeneity_reduces_to_ols() {
        // H_bar == H: the IV fit equals the least-squares fit
        let h = Mat::from_rows(&[
            vec![1.0, 0.2],
            vec![1.0, -0.4],
            vec![1.0, 1.3],
            vec![1.0, 0.7],
            vec![1.0, -1.1],
        ])
        .unwrap();
        let y = [0.3, -0.2, 1.5, 0.9, -0.8];
        let result = split_from_matrices(&h, &h, &y).unwrap();
        let ols = crate::linalg::lstsq(&h, &y).unwrap();
        for (a, b) in result.beta_hat.iter().zip(&ols) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn sandwich_reduces_to_scaled_inverse_gram_under_constant_residuals() {
        let h = Mat::from_rows(&[
            vec![1.0, 0.5],
            vec![1.0, -0.5],
            vec![1.0, 1.5],
            vec![1.0, 2.5],
        ])
        .unwrap();
        let s = 0.7;
        let v = sandwich_covariance(&h, &[s, -s, s, -s]).unwrap();
        let expected = {
            let mut g = inverse(&h.gram()).unwrap();
            for val in g.data.iter_mut() {
                *val *= s * s;
            }
            g
        };
        for (a, b) in v.data.iter().zip(&expected.data) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn v_beta_is_symmetric_psd_and_ci_coordinates_read_the_diagonal() {
        let mut stream = RngStream::root(9);
        let n = 60;
        let mut h = Mat::zeros(n, 3);
        let mut h_bar = Mat::zeros(n, 3);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let zi = stream.normal();
            let pi = zi + 0.5 * stream.normal();
            h.row_mut(i).copy_from_slice(&[1.0, pi, stream.normal()]);
            h_bar.row_mut(i).copy_from_slice(&[1.0, zi, h.at(i, 2)]);
            y.push(2.0 * pi + stream.normal());
        }
        let result = split_from_matrices(&h_bar, &h, &y).unwrap();
        let v = result.v_mat();
        assert!(v.max_abs_asymmetry() < 1e-10);
        let eig = crate::linalg::sym_eigenvalues(&v);
        assert!(eig.iter().all(|&e| e > -1e-10), "{eig:?}");

        // basis-vector variance equals the diagonal entry
        let (_, half) = ci_from_features(&result, &[0.0, 1.0, 0.0], 0.95).unwrap();
        let z = crate::stats::normal_quantile(0.975).unwrap();
        assert!((half - z * result.v_beta[1][1].sqrt()).abs() < 1e-12);

        // a zero-covariance fit gives zero half-width
        let mut zeroed = result.clone();
        for row in zeroed.v_beta.iter_mut() {
            for v in row.iter_mut() {
                *v = 0.0;
            }
        }
        let (_, half) = ci_from_features(&zeroed, &[1.0, 2.0, 3.0], 0.95).unwrap();
        assert_eq!(half, 0.0);
    }

    #[test]
    fn degenerate_instruments_ridge_or_error() {
        // a duplicated column is singular; the ridge fallback kicks in and
        // the repair is reported
        let h = Mat::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let result = split_from_matrices(&h, &h, &[0.0, 1.0, 2.0]).unwrap();
        assert!(result.ridged);
        assert!(!result.condition_number.is_finite());

        // an all-zero feature matrix is beyond repair
        let zeros = Mat::zeros(3, 2);
        match split_from_matrices(&zeros, &zeros, &[0.0, 1.0, 2.0]) {
            Err(Error::Conditioning { cond, .. }) => assert!(!(cond <= CONDITION_LIMIT)),
            other => panic!("expected conditioning error, got {other:?}"),
        }
    }

    fn dropout_model(seed: u64, c: f64) -> OutcomeModel {
        let mut stream = RngStream::root(seed);
        let network = ParameterSet::init(
            &[1, 12, 1],
            Activation::Tanh,
            Activation::Identity,
            &mut stream,
        )
        .unwrap();
        OutcomeModel::from_parts(
            network,
            no_covariate_layout(),
            ScalarStandardizer::identity(),
            Standardizer::identity(0),
            ScalarStandardizer::identity(),
            Some(c),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn band_shrinks_as_keep_probability_approaches_one() {
        let model = dropout_model(11, 0.999);
        let t = {
            let mut t = constant_treatment(0.0, 1.0);
            t.keep_prob = Some(0.999);
            t
        };
        let queries = vec![(0.5, vec![]), (-0.3, vec![])];
        let mut stream = RngStream::root(12);
        let band = dropout_posterior_predict(&model, &t, &queries, 400, 0.95, &mut stream).unwrap();
        for q in 0..queries.len() {
            let scale = band.mean[q].abs().max(1.0);
            let half = 0.5 * (band.upper[q] - band.lower[q]);
            assert!(half < 0.05 * scale, "half {half} vs scale {scale}");
            assert!(band.lower[q] <= band.mean[q] && band.mean[q] <= band.upper[q]);
        }
    }

    #[test]
    fn posterior_spread_is_monotone_in_keep_probability() {
        let model = dropout_model(13, 0.95);
        let queries = vec![(0.0, vec![]), (1.0, vec![]), (-1.0, vec![])];
        let mut sds = Vec::new();
        for c in [0.90, 0.95, 0.99] {
            let mut stream = RngStream::root(14);
            sds.push(posterior_sd_at_c(&model, c, &queries, 600, &mut stream).unwrap());
        }
        assert!(sds[0] > sds[1] && sds[1] > sds[2], "{sds:?}");
    }

    #[test]
    fn bands_are_deterministic_per_seed_and_reject_mixed_c() {
        let model = dropout_model(15, 0.9);
        let t = {
            let mut t = constant_treatment(0.0, 1.0);
            t.keep_prob = Some(0.9);
            t
        };
        let queries = vec![(0.2, vec![])];
        let a = dropout_posterior_predict(
            &model,
            &t,
            &queries,
            100,
            0.9,
            &mut RngStream::root(77),
        )
        .unwrap();
        let b = dropout_posterior_predict(
            &model,
            &t,
            &queries,
            100,
            0.9,
            &mut RngStream::root(77),
        )
        .unwrap();
        assert_eq!(a, b);

        let mut mixed = t.clone();
        mixed.keep_prob = Some(0.95);
        assert!(matches!(
            dropout_posterior_predict(&model, &mixed, &queries, 100, 0.9, &mut RngStream::root(1)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn vb_objective_closed_forms() {
        assert!((bernoulli_entropy(0.5) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bernoulli_entropy(0.999) - 0.007_907_255_112_232_087).abs() < 1e-9);

        let t = vb_objective_terms(0.5, 3.0, 1.25, 10, 0.0).unwrap();
        assert_eq!(t.ridge_penalty, 0.0);
        assert!((t.entropy - 10.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((t.total() - (1.25 - t.entropy)).abs() < 1e-12);

        // entropy ignores the weight norm entirely
        let a = vb_objective_terms(0.9, 1.0, 0.0, 7, 0.3).unwrap();
        let b = vb_objective_terms(0.9, 250.0, 0.0, 7, 0.3).unwrap();
        assert_eq!(a.entropy, b.entropy);
        assert!((a.ridge_penalty - 0.9 * 0.3).abs() < 1e-12);

        assert!(vb_objective_terms(1.2, 1.0, 0.0, 1, 0.0).is_err());
        assert!(vb_objective_terms(0.9, 1.0, 0.0, 1, -1.0).is_err());
    }
}
