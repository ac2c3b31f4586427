//! Second stage: the counterfactual response network `h(p, x)`.
//!
//! The network is trained against the squared residual between the outcome
//! and the integral of `h` over the fitted conditional treatment
//! distribution. For discrete treatments the integral (and its gradient) is
//! an exact probability-weighted sum; for continuous treatments the
//! gradient is estimated without bias by drawing two independent treatment
//! samples, one for the residual factor and one for the derivative factor.
//! Reusing a single sample for both factors couples them and biases the
//! gradient, so the two draw streams carry identities and are checked.

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::data::{encode_x_matrix, Dataset, InputLayout, ScalarStandardizer, Standardizer};
use crate::error::{Error, Result};
use crate::net::{
    backward, check_keep_prob, forward, sample_dropout_masks, Activation, DropoutMaskSet,
    Gradients, HiddenMode, ParameterSet, Tape,
};
use crate::optim::{adam_step, AdamConfig, OptimizerState, TrainingTrace};
use crate::rng::{content_tag, RngStream};
use crate::treatment::{
    apply_weight_decay, validate_common, CategoricalParams, StdConditional, TreatmentModel,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SecondStageConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-phase learning-rate multiplier; training runs three equal
    /// phases at lr, lr*decay, lr*decay^2. 1.0 disables the schedule.
    pub lr_decay: f64,
    /// Monte-Carlo draws per integral factor in each sampled gradient.
    pub b_draws: usize,
    pub keep_prob: Option<f64>,
    pub weight_decay: f64,
    /// When set, a fresh dropout realization of the first-stage network is
    /// drawn for every gradient (posterior sampling of the treatment
    /// distribution). Requires both stages to share one keep probability.
    pub vb_mode: bool,
    pub seed: Option<u64>,
}

impl Default for SecondStageConfig {
    fn default() -> Self {
        SecondStageConfig {
            hidden: vec![50],
            activation: Activation::Relu,
            epochs: 80,
            batch_size: 100,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            b_draws: 1,
            keep_prob: None,
            weight_decay: 0.0,
            vb_mode: false,
            seed: None,
        }
    }
}

impl SecondStageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden: widths must be positive".into()));
        }
        if self.b_draws == 0 {
            return Err(Error::Config("b_draws: must be >= 1".into()));
        }
        if self.vb_mode && self.keep_prob.is_none() {
            return Err(Error::Config("vb_mode: requires keep_prob to be set".into()));
        }
        crate::treatment::check_lr_decay(self.lr_decay)?;
        validate_common(
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.keep_prob,
            self.weight_decay,
        )
    }
}

/// A trained outcome network. Inputs are `[p, enc(x)]`; the treatment input
/// is standardized with the first-stage constants so sampled draws and
/// observed treatments share one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub network: ParameterSet,
    pub layout: InputLayout,
    pub treatment_standardizer: ScalarStandardizer,
    pub covariate_standardizer: Standardizer,
    pub outcome_standardizer: ScalarStandardizer,
    pub keep_prob: Option<f64>,
    pub seed: u64,
    pub training: TrainingTrace,
}

impl OutcomeModel {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        network: ParameterSet,
        layout: InputLayout,
        treatment_standardizer: ScalarStandardizer,
        covariate_standardizer: Standardizer,
        outcome_standardizer: ScalarStandardizer,
        keep_prob: Option<f64>,
        seed: u64,
    ) -> Result<Self> {
        if network.output_width() != 1 {
            return Err(Error::Dimension("outcome network must be scalar".into()));
        }
        let enc_x = layout.encoded_x_width();
        if network.input_width() != 1 + enc_x {
            return Err(Error::Dimension(format!(
                "outcome network expects input width {}, layout encodes to {}",
                network.input_width(),
                1 + enc_x
            )));
        }
        if covariate_standardizer.width() != enc_x {
            return Err(Error::Dimension(
                "covariate standardizer width mismatch".into(),
            ));
        }
        if let Some(c) = keep_prob {
            check_keep_prob(c)?;
        }
        Ok(OutcomeModel {
            network,
            layout,
            treatment_standardizer,
            covariate_standardizer,
            outcome_standardizer,
            keep_prob,
            seed,
            training: TrainingTrace::empty(),
        })
    }

    /// Width of the final hidden layer (0 for a single-layer network).
    pub fn final_width(&self) -> usize {
        self.network.hidden_widths().last().copied().unwrap_or(0)
    }

    pub(crate) fn point_mode(&self) -> HiddenMode<'_> {
        match self.keep_prob {
            Some(c) => HiddenMode::Scale(c),
            None => HiddenMode::Plain,
        }
    }

    /// Encode and standardize a raw covariate row.
    pub(crate) fn encode_x_std(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut buf = Vec::with_capacity(self.layout.encoded_x_width());
        self.layout.encode_x(x, &mut buf)?;
        self.covariate_standardizer.apply(&mut buf);
        Ok(buf)
    }

    pub(crate) fn forward_std(&self, p_std: f64, x_std: &[f64], mode: HiddenMode) -> Result<Tape> {
        let mut input = Vec::with_capacity(1 + x_std.len());
        input.push(p_std);
        input.extend_from_slice(x_std);
        forward(&self.network, &input, mode)
    }

    /// Counterfactual prediction at `(p, x)` in original units
    /// (point-estimate mode for dropout-trained networks).
    pub fn predict(&self, p: f64, x: &[f64]) -> Result<f64> {
        let x_std = self.encode_x_std(x)?;
        let tape = self.forward_std(
            self.treatment_standardizer.forward(p),
            &x_std,
            self.point_mode(),
        )?;
        Ok(self.outcome_standardizer.inverse(tape.scalar()))
    }

    /// Prediction under an explicit dropout realization.
    pub fn predict_masked(&self, p: f64, x: &[f64], masks: &DropoutMaskSet) -> Result<f64> {
        let x_std = self.encode_x_std(x)?;
        let tape = self.forward_std(
            self.treatment_standardizer.forward(p),
            &x_std,
            HiddenMode::Mask(masks),
        )?;
        Ok(self.outcome_standardizer.inverse(tape.scalar()))
    }

    /// Final-layer feature vector `[1, eta_1(x,p), ..., eta_K(x,p)]`,
    /// evaluated in point-estimate mode. For networks with at least one
    /// hidden layer, `predict == output_coefficients . features` exactly.
    pub fn features(&self, p: f64, x: &[f64]) -> Result<Vec<f64>> {
        let x_std = self.encode_x_std(x)?;
        self.features_std(self.treatment_standardizer.forward(p), &x_std)
    }

    pub(crate) fn features_std(&self, p_std: f64, x_std: &[f64]) -> Result<Vec<f64>> {
        let tape = self.forward_std(p_std, x_std, self.point_mode())?;
        let depth = self.network.depth();
        let mut feats = Vec::with_capacity(self.final_width() + 1);
        feats.push(1.0);
        if depth >= 2 {
            feats.extend(tape.hidden_output(depth - 2));
        }
        Ok(feats)
    }

    /// Output-layer coefficients in original outcome units, aligned with
    /// `features()`: `predict(p, x) = coeffs . features(p, x)`.
    pub fn output_coefficients(&self) -> Vec<f64> {
        let last = self.network.layers().last().unwrap();
        let y = &self.outcome_standardizer;
        let mut coeffs = Vec::with_capacity(last.fan_in() + 1);
        coeffs.push(y.mean + y.std * last.bias.values()[0]);
        coeffs.extend(last.weight.row(0).iter().map(|w| y.std * w));
        coeffs
    }
}

/// Counterfactual prediction at `(p, x)`; with `masks` the prediction is the
/// given dropout realization, otherwise point-estimate mode.
pub fn predict_h(
    model: &OutcomeModel,
    p: f64,
    x: &[f64],
    masks: Option<&DropoutMaskSet>,
) -> Result<f64> {
    match masks {
        Some(m) => model.predict_masked(p, x, m),
        None => model.predict(p, x),
    }
}

/// `[1, eta_1(x,p), ..., eta_K(x,p)]` at the point estimate.
pub fn final_layer_features(model: &OutcomeModel, p: f64, x: &[f64]) -> Result<Vec<f64>> {
    model.features(p, x)
}

/// Residuals and loss of one batch under the integral objective.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegralLossReport {
    /// Per-observation `y - integral estimate`, original outcome units.
    pub residuals: Vec<f64>,
    /// Mean squared residual.
    pub batch_loss: f64,
    /// Draws per integral (the support size for exact summation).
    pub draws: usize,
}

/// Exact integral loss and gradient for a discrete treatment.
///
/// `levels` are the treatment categories (original units), `probs[i]` the
/// conditional category probabilities for observation `i`, `xs[i]` its raw
/// covariates and `ys[i]` its outcome. The gradient is the derivative of
/// the mean squared residual, assembled by backpropagating each category's
/// tape with its probability-scaled residual weight.
pub fn exact_integral_loss(
    model: &OutcomeModel,
    levels: &[f64],
    probs: &[CategoricalParams],
    xs: &[Vec<f64>],
    ys: &[f64],
) -> Result<(IntegralLossReport, Gradients)> {
    if probs.len() != xs.len() || ys.len() != xs.len() {
        return Err(Error::Dimension("batch slices disagree in length".into()));
    }
    let levels_std: Vec<f64> = levels
        .iter()
        .map(|l| model.treatment_standardizer.forward(*l))
        .collect();
    let mut grads = Gradients::zeros_like(&model.network);
    let mut residuals = Vec::with_capacity(xs.len());
    let scale = 1.0 / xs.len().max(1) as f64;
    for ((x, cp), y) in xs.iter().zip(probs).zip(ys) {
        if cp.probs.len() != levels.len() {
            return Err(Error::Domain(format!(
                "observation carries {} category probabilities, head has {} levels",
                cp.probs.len(),
                levels.len()
            )));
        }
        let x_std = model.encode_x_std(x)?;
        let r = exact_grad_into(
            model,
            model.point_mode(),
            &x_std,
            &levels_std,
            &cp.probs,
            *y,
            scale,
            &mut grads,
        )?;
        residuals.push(r);
    }
    let batch_loss = residuals.iter().map(|r| r * r).sum::<f64>() * scale;
    Ok((
        IntegralLossReport {
            residuals,
            batch_loss,
            draws: levels.len(),
        },
        grads,
    ))
}

/// Inner worker for the exact gradient: accumulates
/// `scale * d/dtheta (y - sum_k pi_k h(p_k, x))^2` into `grads` and returns
/// the residual.
#[allow(clippy::too_many_arguments)]
fn exact_grad_into(
    model: &OutcomeModel,
    mode: HiddenMode,
    x_std: &[f64],
    levels_std: &[f64],
    probs: &[f64],
    y: f64,
    scale: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    let y_std = &model.outcome_standardizer;
    let mut tapes: Vec<Tape> = Vec::with_capacity(levels_std.len());
    let mut integral = 0.0;
    for (lvl, pi) in levels_std.iter().zip(probs) {
        let tape = model.forward_std(*lvl, x_std, mode)?;
        integral += pi * y_std.inverse(tape.scalar());
        tapes.push(tape);
    }
    let residual = y - integral;
    for (tape, pi) in tapes.iter().zip(probs) {
        if *pi == 0.0 {
            continue;
        }
        let upstream = [-2.0 * residual * pi * y_std.std * scale];
        let g = backward(&model.network, tape, &upstream)?;
        grads.add_scaled(&g, 1.0);
    }
    Ok(residual)
}

/// A pair of independent draw streams, one per integral factor.
#[derive(Debug, Clone)]
pub struct DrawStreams {
    pub residual: RngStream,
    pub derivative: RngStream,
}

impl DrawStreams {
    /// Streams for one observation's gradient, keyed by epoch and
    /// observation index so every gradient in a run is reproducible.
    pub fn for_observation(parent: &RngStream, epoch: u64, obs: u64) -> DrawStreams {
        DrawStreams {
            residual: parent.derive(&[0xD0A0, epoch, obs, 0]),
            derivative: parent.derive(&[0xD0A0, epoch, obs, 1]),
        }
    }
}

/// One observation for the Monte-Carlo gradient.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub x: &'a [f64],
    pub z: &'a [f64],
    pub y: f64,
}

/// Unbiased Monte-Carlo gradient of one observation's integral loss using
/// two independent draw sets of size `b`: one inside the residual factor,
/// one inside the derivative factor. Returns the gradient and the residual.
pub fn mc_two_sample_gradient(
    model: &OutcomeModel,
    tmodel: &TreatmentModel,
    obs: Observation,
    b: usize,
    streams: &mut DrawStreams,
) -> Result<(Gradients, f64)> {
    if b == 0 {
        return Err(Error::Parameter("draw count must be >= 1".into()));
    }
    check_shared_scale(model, tmodel)?;
    let cond = tmodel.conditional_std(obs.x, obs.z, tmodel.point_mode())?;
    let x_std = model.encode_x_std(obs.x)?;
    let mut grads = Gradients::zeros_like(&model.network);
    let residual = mc_grad_into(
        model,
        model.point_mode(),
        &x_std,
        &cond,
        obs.y,
        b,
        streams,
        1.0,
        &mut grads,
    )?;
    Ok((grads, residual))
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

/// Draw in the scale the outcome network consumes: mixture heads sample in
/// standardized units already; categorical draws are level values that get
/// standardized here.
fn draw_p_std(cond: &StdConditional, t_std: &ScalarStandardizer, stream: &mut RngStream) -> f64 {
    match cond {
        StdConditional::Mixture(_) => cond.sample_std(stream),
        StdConditional::Categorical { .. } => t_std.forward(cond.sample_std(stream)),
    }
}

/// Inner worker for the two-sample gradient; accumulates into `grads`.
#[allow(clippy::too_many_arguments)]
fn mc_grad_into(
    model: &OutcomeModel,
    mode: HiddenMode,
    x_std: &[f64],
    cond: &StdConditional,
    y: f64,
    b: usize,
    streams: &mut DrawStreams,
    scale: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    assert_ne!(
        streams.residual.id(),
        streams.derivative.id(),
        "the two integral factors must use distinct draw streams"
    );
    let y_std = &model.outcome_standardizer;
    let t_std = &model.treatment_standardizer;

    let mut h_mean = 0.0;
    for _ in 0..b {
        let p = draw_p_std(cond, t_std, &mut streams.residual);
        let tape = model.forward_std(p, x_std, mode)?;
        h_mean += y_std.inverse(tape.scalar());
    }
    h_mean /= b as f64;
    let residual = y - h_mean;

    let upstream = [-2.0 * residual * y_std.std * scale / b as f64];
    for _ in 0..b {
        let p = draw_p_std(cond, t_std, &mut streams.derivative);
        let tape = model.forward_std(p, x_std, mode)?;
        let g = backward(&model.network, &tape, &upstream)?;
        grads.add_scaled(&g, 1.0);
    }
    Ok(residual)
}

/// Fit the outcome network against the integral loss. The gradient is the
/// exact weighted sum for a categorical first stage, otherwise the
/// two-sample Monte-Carlo estimate.
pub fn train_second_stage(
    data: &Dataset,
    tmodel: &TreatmentModel,
    config: &SecondStageConfig,
) -> Result<OutcomeModel> {
    config.validate()?;
    if data.n() == 0 {
        return Err(Error::Parameter("training data is empty".into()));
    }
    if data.x_names != tmodel.layout.x_names || data.x_kinds != tmodel.layout.x_kinds {
        return Err(Error::Dimension(
            "dataset covariates do not match the first-stage layout".into(),
        ));
    }
    if config.vb_mode && tmodel.keep_prob != config.keep_prob {
        return Err(Error::Parameter(format!(
            "vb_mode requires both stages to share one keep probability (first stage {:?}, second {:?})",
            tmodel.keep_prob, config.keep_prob
        )));
    }

    let seed = config.seed.unwrap_or(0);
    let root = RngStream::root(seed).derive(&[0x0c2]);
    let layout = tmodel.layout.clone();

    // covariate scale: reuse the first-stage constants for the shared block
    let enc_x = layout.encoded_x_width();
    let covariate_standardizer = Standardizer {
        mean: tmodel.input_standardizer.mean[..enc_x].to_vec(),
        std: tmodel.input_standardizer.std[..enc_x].to_vec(),
    };
    let outcome_standardizer = ScalarStandardizer::fit(&data.y);

    let mut x_std = encode_x_matrix(data, &layout)?;
    for i in 0..x_std.rows {
        covariate_standardizer.apply(x_std.row_mut(i));
    }

    let mut widths = vec![1 + enc_x];
    widths.extend_from_slice(&config.hidden);
    widths.push(1);
    let mut init_stream = root.derive(&[1]);
    let network = ParameterSet::init(
        &widths,
        config.activation,
        Activation::Identity,
        &mut init_stream,
    )?;

    let mut model = OutcomeModel {
        network,
        layout,
        treatment_standardizer: tmodel.treatment_standardizer,
        covariate_standardizer,
        outcome_standardizer,
        keep_prob: config.keep_prob,
        seed,
        training: TrainingTrace::empty(),
    };

    // freeze the first stage per row unless posterior sampling is on
    let fixed_cond: Option<Vec<StdConditional>> = if config.vb_mode {
        None
    } else {
        let mut conds = Vec::with_capacity(data.n());
        for i in 0..data.n() {
            conds.push(tmodel.conditional_std(data.x_row(i), data.z_row(i), tmodel.point_mode())?);
        }
        Some(conds)
    };
    let exact_levels_std: Option<Vec<f64>> = match &tmodel.head {
        crate::treatment::TreatmentHead::Categorical { levels } => Some(
            levels
                .iter()
                .map(|l| model.treatment_standardizer.forward(*l))
                .collect(),
        ),
        crate::treatment::TreatmentHead::Mixture { .. } => None,
    };

    let mut opt = OptimizerState::new(
        &model.network,
        AdamConfig::with_learning_rate(config.learning_rate),
    );
    let hidden_widths = model.network.hidden_widths();
    let t_hidden_widths = tmodel.network.hidden_widths();
    let mut trace = TrainingTrace::empty();
    let mut order: Vec<usize> = (0..data.n()).collect();

    for epoch in 0..config.epochs {
        let mut epoch_stream = root.derive(&[2, epoch as u64]);
        epoch_stream.shuffle(&mut order);
        opt.config.learning_rate = crate::treatment::scheduled_lr(
            config.learning_rate,
            config.lr_decay,
            epoch,
            config.epochs,
        );

        let mut epoch_sq = 0.0;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads = Gradients::zeros_like(&model.network);
            let mut batch_sq = 0.0;
            let scale = 1.0 / batch.len() as f64;
            for &row in batch {
                let masks = match config.keep_prob {
                    Some(c) => Some(sample_dropout_masks(&hidden_widths, c, &mut epoch_stream)?),
                    None => None,
                };
                let mode = match &masks {
                    Some(m) => HiddenMode::Mask(m),
                    None => HiddenMode::Plain,
                };

                // one first-stage realization per gradient in vb mode
                let local_cond;
                let cond = match &fixed_cond {
                    Some(conds) => &conds[row],
                    None => {
                        let c = config.keep_prob.expect("validated: vb_mode needs keep_prob");
                        let t_masks = sample_dropout_masks(&t_hidden_widths, c, &mut epoch_stream)?;
                        local_cond = tmodel.conditional_std(
                            data.x_row(row),
                            data.z_row(row),
                            HiddenMode::Mask(&t_masks),
                        )?;
                        &local_cond
                    }
                };

                let residual = match (&exact_levels_std, cond) {
                    (Some(levels_std), StdConditional::Categorical { probs, .. }) => {
                        exact_grad_into(
                            &model,
                            mode,
                            x_std.row(row),
                            levels_std,
                            probs,
                            data.y[row],
                            scale,
                            &mut grads,
                        )?
                    }
                    _ => {
                        let mut streams =
                            DrawStreams::for_observation(&root, epoch as u64, row as u64);
                        mc_grad_into(
                            &model,
                            mode,
                            x_std.row(row),
                            cond,
                            data.y[row],
                            config.b_draws,
                            &mut streams,
                            scale,
                            &mut grads,
                        )?
                    }
                };
                batch_sq += residual * residual;
            }
            if !batch_sq.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, batch {batch_no}"
                )));
            }
            epoch_sq += batch_sq;
            apply_weight_decay(
                &mut grads,
                &model.network,
                config.weight_decay,
                config.keep_prob,
            );
            adam_step(&mut opt, &mut model.network, &grads)?;
        }
        trace.train_loss.push(epoch_sq / data.n() as f64);
        trace.epochs_run = epoch + 1;
    }
    trace.best_epoch = trace.epochs_run.saturating_sub(1);
    model.training = trace;
    Ok(model)
}

/// Left-out integral-loss criterion: mean over the holdout of
/// `(y - integral estimate)^2`, exact for categorical first stages and a
/// `b_eval`-draw Monte-Carlo average otherwise.
///
/// Draw streams are derived from each row's content, so duplicated rows and
/// row order cannot change the value.
pub fn oos_causal_loss(
    model: &OutcomeModel,
    tmodel: &TreatmentModel,
    holdout: &Dataset,
    b_eval: usize,
) -> Result<f64> {
    if holdout.n() == 0 {
        return Err(Error::Parameter("holdout is empty".into()));
    }
    check_shared_scale(model, tmodel)?;
    let mc_needed = matches!(tmodel.head, crate::treatment::TreatmentHead::Mixture { .. });
    if mc_needed && b_eval < 100 {
        return Err(Error::Parameter(format!(
            "evaluation needs b_eval >= 100, got {b_eval}"
        )));
    }

    let sq: Result<Vec<f64>> = (0..holdout.n())
        .into_par_iter()
        .map(|i| {
            let est = integral_estimate(
                model,
                tmodel,
                holdout.x_row(i),
                holdout.z_row(i),
                Some((holdout.p[i], holdout.y[i])),
                b_eval,
            )?;
            let r = holdout.y[i] - est;
            Ok(r * r)
        })
        .collect();
    Ok(sq?.iter().sum::<f64>() / holdout.n() as f64)
}

/// Estimate `integral h(p, x) dF(p | x, z)` in original outcome units.
/// `row_key` feeds the content-addressed draw stream; pass the observed
/// `(p, y)` when scoring dataset rows so identical rows get identical draws.
pub fn integral_estimate(
    model: &OutcomeModel,
    tmodel: &TreatmentModel,
    x: &[f64],
    z: &[f64],
    row_key: Option<(f64, f64)>,
    b_eval: usize,
) -> Result<f64> {
    let cond = tmodel.conditional_std(x, z, tmodel.point_mode())?;
    let x_std = model.encode_x_std(x)?;
    match &cond {
        StdConditional::Categorical { levels, probs } => {
            let mut est = 0.0;
            for (lvl, pi) in levels.iter().zip(probs) {
                let p_std = model.treatment_standardizer.forward(*lvl);
                let tape = model.forward_std(p_std, &x_std, model.point_mode())?;
                est += pi * model.outcome_standardizer.inverse(tape.scalar());
            }
            Ok(est)
        }
        StdConditional::Mixture(_) => {
            let mut key: Vec<f64> = Vec::with_capacity(x.len() + z.len() + 3);
            key.extend_from_slice(x);
            key.extend_from_slice(z);
            if let Some((p, y)) = row_key {
                key.push(p);
                key.push(y);
            }
            key.push(b_eval as f64);
            let mut stream = RngStream::root(model.seed).derive(&[0xEA7, content_tag(&key)]);
            let mut total = 0.0;
            for _ in 0..b_eval {
                let p = cond.sample_std(&mut stream);
                let tape = model.forward_std(p, &x_std, model.point_mode())?;
                total += model.outcome_standardizer.inverse(tape.scalar());
            }
            Ok(total / b_eval as f64)
        }
    }
}
