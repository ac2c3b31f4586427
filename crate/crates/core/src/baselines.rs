//! Reference estimators: classical linear two-stage least squares and a
//! naive feed-forward regression that ignores endogeneity.

use serde::{Deserialize, Serialize};

use crate::data::{encode_x_matrix, Dataset, InputLayout, ScalarStandardizer, Standardizer};
use crate::error::{Error, Result};
use crate::linalg::{lstsq, Mat};
use crate::net::{
    backward, forward, sample_dropout_masks, Activation, Gradients, HiddenMode, ParameterSet,
};
use crate::optim::{adam_step, AdamConfig, OptimizerState, TrainingTrace};
use crate::outcome::{OutcomeModel, SecondStageConfig};
use crate::rng::RngStream;
use crate::treatment::apply_weight_decay;

/// Linear two-stage least squares fit.
///
/// First stage regresses the treatment on `[1, enc(x), z]`; the second
/// regresses the outcome on `[1, p_hat, enc(x)]`. Categorical covariates are
/// one-hot encoded with the first level dropped to keep the design full
/// rank next to the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoSlsModel {
    pub layout: InputLayout,
    /// First stage: intercept, then covariate block, then instrument block.
    pub first_stage: Vec<f64>,
    /// Second stage: intercept, treatment coefficient, covariate block.
    pub second_stage: Vec<f64>,
}

impl TwoSlsModel {
    /// Treatment effect coefficient (gamma).
    pub fn gamma(&self) -> f64 {
        self.second_stage[1]
    }

    /// Instrument coefficients (tau), one per instrument column.
    pub fn tau(&self) -> &[f64] {
        let x_width = drop_first_width(&self.layout);
        &self.first_stage[1 + x_width..]
    }

    pub fn predict(&self, p: f64, x: &[f64]) -> Result<f64> {
        let enc = encode_drop_first(&self.layout, x)?;
        let mut value = self.second_stage[0] + self.second_stage[1] * p;
        for (b, v) in self.second_stage[2..].iter().zip(&enc) {
            value += b * v;
        }
        Ok(value)
    }
}

fn drop_first_width(layout: &InputLayout) -> usize {
    layout
        .x_kinds
        .iter()
        .map(|k| match k {
            crate::data::ColumnKind::Numeric => 1,
            crate::data::ColumnKind::Categorical { levels } => levels.len().saturating_sub(1),
        })
        .sum()
}

fn encode_drop_first(layout: &InputLayout, raw_x: &[f64]) -> Result<Vec<f64>> {
    let mut full = Vec::new();
    layout.encode_x(raw_x, &mut full)?;
    let mut out = Vec::with_capacity(drop_first_width(layout));
    let mut offset = 0;
    for kind in &layout.x_kinds {
        match kind {
            crate::data::ColumnKind::Numeric => {
                out.push(full[offset]);
                offset += 1;
            }
            crate::data::ColumnKind::Categorical { levels } => {
                out.extend_from_slice(&full[offset + 1..offset + levels.len()]);
                offset += levels.len();
            }
        }
    }
    Ok(out)
}

/// Fit linear two-stage least squares.
pub fn fit_2sls(data: &Dataset) -> Result<TwoSlsModel> {
    let layout = InputLayout::from_dataset(data);
    let n = data.n();
    let x_width = drop_first_width(&layout);
    let q = data.z_names.len();
    if n <= 1 + x_width + q {
        return Err(Error::Parameter(format!(
            "need more than {} rows to fit {} first-stage coefficients",
            n,
            1 + x_width + q
        )));
    }

    // first stage: p on [1, enc(x), z]
    let mut design1 = Mat::zeros(n, 1 + x_width + q);
    for i in 0..n {
        let enc = encode_drop_first(&layout, data.x_row(i))?;
        let row = design1.row_mut(i);
        row[0] = 1.0;
        row[1..1 + x_width].copy_from_slice(&enc);
        row[1 + x_width..].copy_from_slice(data.z_row(i));
    }
    let first = lstsq(&design1, &data.p).map_err(tag_conditioning("first-stage design"))?;
    let p_hat = design1.matvec(&first);

    // second stage: y on [1, p_hat, enc(x)]
    let mut design2 = Mat::zeros(n, 2 + x_width);
    for i in 0..n {
        let enc = encode_drop_first(&layout, data.x_row(i))?;
        let row = design2.row_mut(i);
        row[0] = 1.0;
        row[1] = p_hat[i];
        row[2..].copy_from_slice(&enc);
    }
    let second = lstsq(&design2, &data.y).map_err(tag_conditioning("second-stage design"))?;

    Ok(TwoSlsModel {
        layout,
        first_stage: first,
        second_stage: second,
    })
}

fn tag_conditioning(context: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Conditioning { cond, .. } => Error::Conditioning {
            context: context.into(),
            cond,
        },
        other => other,
    }
}

/// Counterfactual prediction from the linear fit.
pub fn predict_2sls(model: &TwoSlsModel, p: f64, x: &[f64]) -> Result<f64> {
    model.predict(p, x)
}

/// A feed-forward regression of `y` on `(p, x)` that ignores endogeneity.
/// Structurally an outcome network; it fits the observational conditional
/// expectation rather than the counterfactual function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfNetModel {
    pub model: OutcomeModel,
}

/// Fit the naive regression by plain squared-error SGD.
pub fn fit_ffnet(data: &Dataset, config: &SecondStageConfig) -> Result<FfNetModel> {
    config.validate()?;
    if data.n() == 0 {
        return Err(Error::Parameter("training data is empty".into()));
    }
    let seed = config.seed.unwrap_or(0);
    let root = RngStream::root(seed).derive(&[0xFF4E]);
    let layout = InputLayout::from_dataset(data);
    let enc_x_width = layout.encoded_x_width();

    let mut x_enc = encode_x_matrix(data, &layout)?;
    let covariate_standardizer = Standardizer::fit(&x_enc);
    for i in 0..x_enc.rows {
        covariate_standardizer.apply(x_enc.row_mut(i));
    }
    let treatment_standardizer = ScalarStandardizer::fit(&data.p);
    let outcome_standardizer = ScalarStandardizer::fit(&data.y);
    let p_std: Vec<f64> = data.p.iter().map(|p| treatment_standardizer.forward(*p)).collect();
    let y_std: Vec<f64> = data.y.iter().map(|y| outcome_standardizer.forward(*y)).collect();

    let mut widths = vec![1 + enc_x_width];
    widths.extend_from_slice(&config.hidden);
    widths.push(1);
    let mut init_stream = root.derive(&[1]);
    let mut network = ParameterSet::init(
        &widths,
        config.activation,
        Activation::Identity,
        &mut init_stream,
    )?;

    let mut opt = OptimizerState::new(&network, AdamConfig::with_learning_rate(config.learning_rate));
    let hidden_widths = network.hidden_widths();
    let mut trace = TrainingTrace::empty();
    let mut order: Vec<usize> = (0..data.n()).collect();
    let mut input = vec![0.0; 1 + enc_x_width];

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
            let mut grads = Gradients::zeros_like(&network);
            let scale = 1.0 / batch.len() as f64;
            let mut batch_sq = 0.0;
            for &row in batch {
                let masks = match config.keep_prob {
                    Some(c) => Some(sample_dropout_masks(&hidden_widths, c, &mut epoch_stream)?),
                    None => None,
                };
                let mode = match &masks {
                    Some(m) => HiddenMode::Mask(m),
                    None => HiddenMode::Plain,
                };
                input[0] = p_std[row];
                input[1..].copy_from_slice(x_enc.row(row));
                let tape = forward(&network, &input, mode)?;
                let residual = y_std[row] - tape.scalar();
                batch_sq += residual * residual;
                let g = backward(&network, &tape, &[-2.0 * residual * scale])?;
                grads.add_scaled(&g, 1.0);
            }
            if !batch_sq.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, batch {batch_no}"
                )));
            }
            epoch_sq += batch_sq;
            apply_weight_decay(&mut grads, &network, config.weight_decay, config.keep_prob);
            adam_step(&mut opt, &mut network, &grads)?;
        }
        // original-unit squared error
        let sd = outcome_standardizer.std;
        trace.train_loss.push(epoch_sq / data.n() as f64 * sd * sd);
        trace.epochs_run = epoch + 1;
    }
    trace.best_epoch = trace.epochs_run.saturating_sub(1);

    let mut model = OutcomeModel::from_parts(
        network,
        layout,
        treatment_standardizer,
        covariate_standardizer,
        outcome_standardizer,
        config.keep_prob,
        seed,
    )?;
    model.training = trace;
    Ok(FfNetModel { model })
}

/// Prediction from the naive fit.
pub fn predict_ffnet(model: &FfNetModel, p: f64, x: &[f64]) -> Result<f64> {
    model.model.predict(p, x)
}
