//! First stage: the conditional treatment distribution `F(p | x, z)`.
//!
//! Continuous treatments get a Gaussian mixture density head (stable softmax
//! weights, identity means, softplus-plus-floor scales); discrete treatments
//! get a softmax head over the observed categories. Both are trained by
//! maximum likelihood with adaptive-moment SGD, validated out of sample by
//! the holdout deviance, and scored for instrument relevance with a
//! permutation test.

use serde::{Deserialize, Serialize};

use crate::data::{encode_xz_matrix, Dataset, InputLayout, ScalarStandardizer, Standardizer};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::net::{
    backward, check_keep_prob, forward, sample_dropout_masks, Activation, Gradients, HiddenMode,
    ParameterSet,
};
use crate::optim::{adam_step, AdamConfig, OptimizerState, TrainingTrace};
use crate::rng::RngStream;
use crate::stats::{log_sum_exp, normal_cdf, normal_log_pdf, softmax, softplus};

/// Smallest mixture scale, in standardized treatment units.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Gaussian mixture parameters conditional on one `(x, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl MixtureParams {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn mean(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| w * m)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        let second: f64 = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(w, (m, s))| w * (s * s + m * m))
            .sum();
        second - mean * mean
    }

    /// CDF of the mixture at `p`.
    pub fn cdf(&self, p: f64) -> f64 {
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(w, (m, s))| w * normal_cdf((p - m) / s))
            .sum()
    }
}

/// Category probabilities conditional on one `(x, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalParams {
    pub probs: Vec<f64>,
}

/// Map raw network outputs `[pi logits | means | sd logits]` (length 3K) to
/// mixture parameters: softmax weights, identity means, softplus scales with
/// a positive floor.
pub fn mixture_head(raw: &[f64]) -> MixtureParams {
    debug_assert_eq!(raw.len() % 3, 0);
    let k = raw.len() / 3;
    MixtureParams {
        weights: softmax(&raw[..k]),
        means: raw[k..2 * k].to_vec(),
        stds: raw[2 * k..]
            .iter()
            .map(|s| softplus(*s) + SIGMA_FLOOR)
            .collect(),
    }
}

/// Map raw network outputs (length K) to category probabilities.
pub fn categorical_head(raw: &[f64]) -> CategoricalParams {
    CategoricalParams {
        probs: softmax(raw),
    }
}

/// Log density of the mixture at `p`, formed with log-sum-exp.
pub fn log_density_mixture(params: &MixtureParams, p: f64) -> f64 {
    let terms: Vec<f64> = params
        .weights
        .iter()
        .zip(params.means.iter().zip(&params.stds))
        .map(|(w, (m, s))| w.ln() + normal_log_pdf(p, *m, *s))
        .collect();
    log_sum_exp(&terms)
}

/// Log mass of category `p`; `p` must match one of `levels`.
pub fn log_density_categorical(params: &CategoricalParams, levels: &[f64], p: f64) -> Result<f64> {
    let idx = levels
        .iter()
        .position(|&l| l == p)
        .ok_or_else(|| Error::Domain(format!("unknown treatment category {p}")))?;
    Ok(params.probs[idx].ln())
}

/// Ancestral sampling from mixture parameters.
pub fn sample_mixture(params: &MixtureParams, n: usize, stream: &mut RngStream) -> Vec<f64> {
    (0..n).map(|_| sample_mixture_one(params, stream)).collect()
}

#[inline]
pub fn sample_mixture_one(params: &MixtureParams, stream: &mut RngStream) -> f64 {
    let u = stream.uniform();
    let mut cum = 0.0;
    let mut comp = params.weights.len() - 1;
    for (k, w) in params.weights.iter().enumerate() {
        cum += w;
        if u < cum {
            comp = k;
            break;
        }
    }
    params.means[comp] + params.stds[comp] * stream.normal()
}

fn sample_category(probs: &[f64], levels: &[f64], stream: &mut RngStream) -> f64 {
    let u = stream.uniform();
    let mut cum = 0.0;
    let mut pick = levels.len() - 1;
    for (k, w) in probs.iter().enumerate() {
        cum += w;
        if u < cum {
            pick = k;
            break;
        }
    }
    levels[pick]
}

/// Negative log likelihood of `p` under the mixture implied by `raw`, plus
/// its gradient with respect to the raw head outputs.
pub fn mixture_nll_grad(raw: &[f64], p: f64) -> (f64, Vec<f64>) {
    let k = raw.len() / 3;
    let params = mixture_head(raw);
    let ln_comp: Vec<f64> = params
        .weights
        .iter()
        .zip(params.means.iter().zip(&params.stds))
        .map(|(w, (m, s))| w.ln() + normal_log_pdf(p, *m, *s))
        .collect();
    let ll = log_sum_exp(&ln_comp);
    let mut grad = vec![0.0; raw.len()];
    for j in 0..k {
        let resp = (ln_comp[j] - ll).exp();
        let (m, s) = (params.means[j], params.stds[j]);
        let zed = (p - m) / s;
        grad[j] = params.weights[j] - resp;
        grad[k + j] = -resp * zed / s;
        // d sigma / d logit recovered from sigma itself:
        // softplus(t) = sigma - floor  =>  sigmoid(t) = 1 - e^{-(sigma - floor)}
        let dsig = 1.0 - (-(s - SIGMA_FLOOR)).exp();
        grad[2 * k + j] = -resp * (zed * zed - 1.0) / s * dsig;
    }
    (-ll, grad)
}

/// Negative log likelihood of category index `target` under softmax logits,
/// plus its gradient with respect to the logits.
pub fn categorical_nll_grad(raw: &[f64], target: usize) -> (f64, Vec<f64>) {
    let probs = softmax(raw);
    let nll = -probs[target].ln();
    let grad = probs
        .iter()
        .enumerate()
        .map(|(j, pi)| pi - if j == target { 1.0 } else { 0.0 })
        .collect();
    (nll, grad)
}

/// Head of a trained treatment model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TreatmentHead {
    Mixture { components: usize },
    Categorical { levels: Vec<f64> },
}

impl TreatmentHead {
    pub fn output_width(&self) -> usize {
        match self {
            TreatmentHead::Mixture { components } => 3 * components,
            TreatmentHead::Categorical { levels } => levels.len(),
        }
    }
}

/// The conditional treatment law at one `(x, z)`, in original treatment
/// units.
#[derive(Debug, Clone)]
pub enum ConditionalTreatment {
    Mixture(MixtureParams),
    Categorical { levels: Vec<f64>, probs: Vec<f64> },
}

/// Requested head for first-stage training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum HeadSpec {
    Mixture {
        #[serde(default = "default_components")]
        components: usize,
    },
    Categorical,
}

fn default_components() -> usize {
    10
}

impl Default for HeadSpec {
    fn default() -> Self {
        HeadSpec::Mixture {
            components: default_components(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FirstStageConfig {
    pub head: HeadSpec,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-phase learning-rate multiplier; training runs three equal
    /// phases at lr, lr*decay, lr*decay^2. 1.0 disables the schedule.
    pub lr_decay: f64,
    pub keep_prob: Option<f64>,
    pub weight_decay: f64,
    pub val_fraction: f64,
    pub patience: usize,
    pub seed: Option<u64>,
}

impl Default for FirstStageConfig {
    fn default() -> Self {
        FirstStageConfig {
            head: HeadSpec::default(),
            hidden: vec![50],
            activation: Activation::Relu,
            epochs: 100,
            batch_size: 100,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            keep_prob: None,
            weight_decay: 0.0,
            val_fraction: 0.2,
            patience: 10,
            seed: None,
        }
    }
}

impl FirstStageConfig {
    pub fn validate(&self) -> Result<()> {
        if let HeadSpec::Mixture { components } = self.head {
            if components == 0 {
                return Err(Error::Config("head.components: must be >= 1".into()));
            }
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden: widths must be positive".into()));
        }
        validate_common(
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.keep_prob,
            self.weight_decay,
        )?;
        check_lr_decay(self.lr_decay)?;
        if !(0.0..=0.5).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction: must lie in [0, 0.5], got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_lr_decay(d: f64) -> Result<()> {
    if !(d.is_finite() && 0.0 < d && d <= 1.0) {
        return Err(Error::Config(format!(
            "lr_decay: must lie in (0, 1], got {d}"
        )));
    }
    Ok(())
}

/// Learning rate for an epoch under the three-phase schedule.
pub(crate) fn scheduled_lr(base: f64, decay: f64, epoch: usize, epochs: usize) -> f64 {
    let phase = (3 * epoch / epochs.max(1)).min(2);
    base * decay.powi(phase as i32)
}

pub(crate) fn validate_common(
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    keep_prob: Option<f64>,
    weight_decay: f64,
) -> Result<()> {
    if epochs == 0 {
        return Err(Error::Config("epochs: must be >= 1".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size: must be >= 1".into()));
    }
    if !(learning_rate.is_finite() && learning_rate > 0.0) {
        return Err(Error::Config(format!(
            "learning_rate: must be positive, got {learning_rate}"
        )));
    }
    if let Some(c) = keep_prob {
        check_keep_prob(c)
            .map_err(|_| Error::Config(format!("keep_prob: must lie in [0.5, 1), got {c}")))?;
    }
    if !(weight_decay.is_finite() && weight_decay >= 0.0) {
        return Err(Error::Config(format!(
            "weight_decay: must be >= 0, got {weight_decay}"
        )));
    }
    Ok(())
}

/// A trained first-stage model for `F(p | x, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentModel {
    pub network: ParameterSet,
    pub head: TreatmentHead,
    pub layout: InputLayout,
    pub input_standardizer: Standardizer,
    pub treatment_standardizer: ScalarStandardizer,
    pub keep_prob: Option<f64>,
    pub seed: u64,
    pub training: TrainingTrace,
}

impl TreatmentModel {
    /// Assemble a model from explicit parts (used for hand-built and test
    /// models). Checks the head width against the network.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        network: ParameterSet,
        head: TreatmentHead,
        layout: InputLayout,
        input_standardizer: Standardizer,
        treatment_standardizer: ScalarStandardizer,
        keep_prob: Option<f64>,
        seed: u64,
    ) -> Result<Self> {
        if network.output_width() != head.output_width() {
            return Err(Error::Dimension(format!(
                "head needs output width {}, network has {}",
                head.output_width(),
                network.output_width()
            )));
        }
        if network.input_width() != layout.encoded_xz_width() {
            return Err(Error::Dimension(format!(
                "layout encodes to width {}, network expects {}",
                layout.encoded_xz_width(),
                network.input_width()
            )));
        }
        if input_standardizer.width() != layout.encoded_xz_width() {
            return Err(Error::Dimension("standardizer width mismatch".into()));
        }
        if let Some(c) = keep_prob {
            check_keep_prob(c)?;
        }
        Ok(TreatmentModel {
            network,
            head,
            layout,
            input_standardizer,
            treatment_standardizer,
            keep_prob,
            seed,
            training: TrainingTrace::empty(),
        })
    }

    fn encode_input(&self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let mut buf = Vec::with_capacity(self.layout.encoded_xz_width());
        self.layout.encode_xz(x, z, &mut buf)?;
        self.input_standardizer.apply(&mut buf);
        Ok(buf)
    }

    /// Point-estimate forward mode: dropout-trained networks scale hidden
    /// outputs by the keep probability, others run plain.
    pub(crate) fn point_mode(&self) -> HiddenMode<'_> {
        match self.keep_prob {
            Some(c) => HiddenMode::Scale(c),
            None => HiddenMode::Plain,
        }
    }

    fn raw_output(&self, x: &[f64], z: &[f64], mode: HiddenMode) -> Result<Vec<f64>> {
        let input = self.encode_input(x, z)?;
        Ok(forward(&self.network, &input, mode)?.output().to_vec())
    }

    /// Conditional law in standardized treatment units (mixture head) or
    /// category probabilities over original levels.
    pub(crate) fn conditional_std(
        &self,
        x: &[f64],
        z: &[f64],
        mode: HiddenMode,
    ) -> Result<StdConditional> {
        let raw = self.raw_output(x, z, mode)?;
        Ok(match &self.head {
            TreatmentHead::Mixture { .. } => StdConditional::Mixture(mixture_head(&raw)),
            TreatmentHead::Categorical { levels } => StdConditional::Categorical {
                levels: levels.clone(),
                probs: categorical_head(&raw).probs,
            },
        })
    }

    /// Conditional treatment law at `(x, z)` in original treatment units.
    pub fn conditional(&self, x: &[f64], z: &[f64]) -> Result<ConditionalTreatment> {
        Ok(match self.conditional_std(x, z, self.point_mode())? {
            StdConditional::Mixture(mp) => {
                let t = &self.treatment_standardizer;
                ConditionalTreatment::Mixture(MixtureParams {
                    weights: mp.weights,
                    means: mp.means.iter().map(|m| t.inverse(*m)).collect(),
                    stds: mp.stds.iter().map(|s| s * t.std).collect(),
                })
            }
            StdConditional::Categorical { levels, probs } => {
                ConditionalTreatment::Categorical { levels, probs }
            }
        })
    }

    /// Log density (or log mass) of treatment `p` at `(x, z)`, in original
    /// treatment units.
    pub fn log_density(&self, x: &[f64], z: &[f64], p: f64) -> Result<f64> {
        match self.conditional(x, z)? {
            ConditionalTreatment::Mixture(mp) => Ok(log_density_mixture(&mp, p)),
            ConditionalTreatment::Categorical { levels, probs } => {
                log_density_categorical(&CategoricalParams { probs }, &levels, p)
            }
        }
    }

    /// Draw `n` treatments from the fitted conditional law at `(x, z)`.
    pub fn sample(
        &self,
        x: &[f64],
        z: &[f64],
        n: usize,
        stream: &mut RngStream,
    ) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::Parameter("sample count must be >= 1".into()));
        }
        match self.conditional(x, z)? {
            ConditionalTreatment::Mixture(mp) => Ok(sample_mixture(&mp, n, stream)),
            ConditionalTreatment::Categorical { levels, probs } => {
                Ok((0..n).map(|_| sample_category(&probs, &levels, stream)).collect())
            }
        }
    }
}

/// Conditional law in the network's standardized treatment scale.
#[derive(Debug, Clone)]
pub(crate) enum StdConditional {
    Mixture(MixtureParams),
    Categorical { levels: Vec<f64>, probs: Vec<f64> },
}

impl StdConditional {
    /// One draw in the standardized treatment scale (categorical levels are
    /// returned as-is; discrete treatments are standardized by the caller).
    pub(crate) fn sample_std(&self, stream: &mut RngStream) -> f64 {
        match self {
            StdConditional::Mixture(mp) => sample_mixture_one(mp, stream),
            StdConditional::Categorical { levels, probs } => {
                sample_category(probs, levels, stream)
            }
        }
    }
}

/// Fit the first stage by maximum likelihood.
pub fn train_first_stage(data: &Dataset, config: &FirstStageConfig) -> Result<TreatmentModel> {
    config.validate()?;
    if data.n() == 0 {
        return Err(Error::Parameter("training data is empty".into()));
    }
    let seed = config.seed.unwrap_or(0);
    let root = RngStream::root(seed).derive(&[0x7161]);

    let layout = InputLayout::from_dataset(data);
    let mut inputs = encode_xz_matrix(data, &layout)?;
    let input_standardizer = Standardizer::fit(&inputs);
    for i in 0..inputs.rows {
        input_standardizer.apply(inputs.row_mut(i));
    }

    let (head, t_std, targets): (TreatmentHead, ScalarStandardizer, TrainTargets) = match config
        .head
    {
        HeadSpec::Mixture { components } => {
            let t_std = ScalarStandardizer::fit(&data.p);
            let std_p: Vec<f64> = data.p.iter().map(|p| t_std.forward(*p)).collect();
            (
                TreatmentHead::Mixture { components },
                t_std,
                TrainTargets::Continuous(std_p),
            )
        }
        HeadSpec::Categorical => {
            let mut levels: Vec<f64> = data.p.clone();
            levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
            levels.dedup();
            let idx: Vec<usize> = data
                .p
                .iter()
                .map(|p| levels.iter().position(|l| l == p).unwrap())
                .collect();
            (
                TreatmentHead::Categorical { levels },
                ScalarStandardizer::fit(&data.p),
                TrainTargets::Discrete(idx),
            )
        }
    };

    let mut widths = vec![layout.encoded_xz_width()];
    widths.extend_from_slice(&config.hidden);
    widths.push(head.output_width());
    let mut init_stream = root.derive(&[1]);
    let mut network = ParameterSet::init(
        &widths,
        config.activation,
        Activation::Identity,
        &mut init_stream,
    )?;

    let mut split_stream = root.derive(&[2]);
    let order = split_stream.permutation(data.n());
    let n_val = ((data.n() as f64) * config.val_fraction).round() as usize;
    let (train_idx, val_idx) = order.split_at(data.n() - n_val);
    let train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    // jacobian correction so traces are in original treatment units
    let log_jacobian = match head {
        TreatmentHead::Mixture { .. } => t_std.std.ln(),
        TreatmentHead::Categorical { .. } => 0.0,
    };

    let mut opt = OptimizerState::new(
        &network,
        AdamConfig::with_learning_rate(config.learning_rate),
    );
    let hidden_widths = network.hidden_widths();
    let mut trace = TrainingTrace::empty();
    let mut best: Option<(f64, ParameterSet, usize)> = None;
    let mut epochs_since_best = 0usize;

    let mut shuffled = train_idx.clone();
    for epoch in 0..config.epochs {
        let mut epoch_stream = root.derive(&[3, epoch as u64]);
        epoch_stream.shuffle(&mut shuffled);
        opt.config.learning_rate =
            scheduled_lr(config.learning_rate, config.lr_decay, epoch, config.epochs);

        let mut epoch_nll = 0.0;
        for (batch_no, batch) in shuffled.chunks(config.batch_size).enumerate() {
            let mut grads = Gradients::zeros_like(&network);
            let mut batch_nll = 0.0;
            for &row in batch {
                let masks = match config.keep_prob {
                    Some(c) => Some(sample_dropout_masks(&hidden_widths, c, &mut epoch_stream)?),
                    None => None,
                };
                let mode = match &masks {
                    Some(m) => HiddenMode::Mask(m),
                    None => HiddenMode::Plain,
                };
                let tape = forward(&network, inputs.row(row), mode)?;
                let (nll, head_grad) = match &targets {
                    TrainTargets::Continuous(p_std) => mixture_nll_grad(tape.output(), p_std[row]),
                    TrainTargets::Discrete(idx) => categorical_nll_grad(tape.output(), idx[row]),
                };
                batch_nll += nll;
                let sample_grads = backward(&network, &tape, &head_grad)?;
                grads.add_scaled(&sample_grads, 1.0 / batch.len() as f64);
            }
            if !batch_nll.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, batch {batch_no}"
                )));
            }
            epoch_nll += batch_nll;
            apply_weight_decay(&mut grads, &network, config.weight_decay, config.keep_prob);
            adam_step(&mut opt, &mut network, &grads)?;
        }
        trace
            .train_loss
            .push(epoch_nll / train_idx.len() as f64 + log_jacobian);
        trace.epochs_run = epoch + 1;

        if val_idx.is_empty() {
            continue;
        }
        let val = validation_deviance(
            &network,
            &inputs,
            &targets,
            &val_idx,
            log_jacobian,
            config.keep_prob,
        );
        trace.val_loss.push(val);
        let improved = best.as_ref().map_or(true, |(b, _, _)| val < *b);
        if improved {
            best = Some((val, network.clone(), epoch));
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= config.patience {
                break;
            }
        }
    }

    if let Some((_, params, epoch)) = best {
        network = params;
        trace.best_epoch = epoch;
    } else {
        trace.best_epoch = trace.epochs_run.saturating_sub(1);
    }

    Ok(TreatmentModel {
        network,
        head,
        layout,
        input_standardizer,
        treatment_standardizer: t_std,
        keep_prob: config.keep_prob,
        seed,
        training: trace,
    })
}

enum TrainTargets {
    Continuous(Vec<f64>),
    Discrete(Vec<usize>),
}

pub(crate) fn apply_weight_decay(
    grads: &mut Gradients,
    network: &ParameterSet,
    weight_decay: f64,
    keep_prob: Option<f64>,
) {
    if weight_decay == 0.0 {
        return;
    }
    // ridge gradient, scaled by the keep probability under dropout training
    let lambda = 2.0 * weight_decay * keep_prob.unwrap_or(1.0);
    for (g, layer) in grads.layers.iter_mut().zip(network.layers()) {
        for (gw, w) in g.weight.iter_mut().zip(layer.weight.values()) {
            *gw += lambda * w;
        }
    }
}

fn validation_deviance(
    network: &ParameterSet,
    inputs: &Mat,
    targets: &TrainTargets,
    idx: &[usize],
    log_jacobian: f64,
    keep_prob: Option<f64>,
) -> f64 {
    let mode = match keep_prob {
        Some(c) => HiddenMode::Scale(c),
        None => HiddenMode::Plain,
    };
    let total: f64 = idx
        .iter()
        .map(|&row| {
            let tape = forward(network, inputs.row(row), mode).expect("validated shapes");
            match targets {
                TrainTargets::Continuous(p_std) => {
                    let mp = mixture_head(tape.output());
                    -log_density_mixture(&mp, p_std[row])
                }
                TrainTargets::Discrete(cat) => {
                    let cp = categorical_head(tape.output());
                    -cp.probs[cat[row]].ln()
                }
            }
        })
        .sum();
    total / idx.len() as f64 + log_jacobian
}

/// Mean of `-log f(p | x, z)` over a holdout sample, in original treatment
/// units.
pub fn oos_deviance(model: &TreatmentModel, holdout: &Dataset) -> Result<f64> {
    if holdout.n() == 0 {
        return Err(Error::Parameter("holdout is empty".into()));
    }
    let mut total = 0.0;
    for i in 0..holdout.n() {
        total -= model.log_density(holdout.x_row(i), holdout.z_row(i), holdout.p[i])?;
    }
    Ok(total / holdout.n() as f64)
}

/// Permutation p-value for instrument relevance.
///
/// Compares the model's deviance on `data` against deviances on copies whose
/// instrument rows are permuted within the sample; a small value means the
/// instruments carry real information about the treatment. With constant
/// instruments every permutation reproduces the data exactly and the p-value
/// is 1.
pub fn relevance_diagnostic(
    model: &TreatmentModel,
    data: &Dataset,
    n_perm: usize,
    stream: &mut RngStream,
) -> Result<f64> {
    if n_perm < 20 {
        return Err(Error::Parameter(format!(
            "relevance diagnostic needs n_perm >= 20, got {n_perm}"
        )));
    }
    let observed = oos_deviance(model, data)?;
    let mut at_or_below = 0usize;
    for j in 0..n_perm {
        let mut perm_stream = stream.derive(&[j as u64]);
        let perm = perm_stream.permutation(data.n());
        let shuffled = data.with_permuted_z(&perm);
        if oos_deviance(model, &shuffled)? <= observed {
            at_or_below += 1;
        }
    }
    Ok((1 + at_or_below) as f64 / (n_perm + 1) as f64)
}


#[cfg(test)]
mod tests {
    use super::test_support::{gaussian_model, synthetic_dataset};
    use super::*;
    use crate::net::DenseLayer;
    use crate::optim::finite_difference_gradient;
    use crate::tensor::Tensor;

    const LN_HALF: f64 = -0.693_147_180_559_945_3;

    #[test]
    fn mixture_head_symmetry_and_links() {
        let raw = vec![
            0.7, 0.7, 0.7, 0.7, // pi logits all equal
            1.0, 2.0, 3.0, 4.0, // means
            0.0, 0.0, 0.0, 0.0, // sd logits
        ];
        let mp = mixture_head(&raw);
        for w in &mp.weights {
            assert!((w - 0.25).abs() < 1e-12);
        }
        assert_eq!(mp.means, vec![1.0, 2.0, 3.0, 4.0]);
        for s in &mp.stds {
            assert!((s - (2f64.ln() + SIGMA_FLOOR)).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_head_softmax_closed_form() {
        let raw = vec![1f64.ln(), 3f64.ln(), 0.0, 0.0, 0.0, 0.0];
        let mp = mixture_head(&raw);
        assert!((mp.weights[0] - 0.25).abs() < 1e-12);
        assert!((mp.weights[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn log_density_gaussian_closed_form() {
        let mp = MixtureParams {
            weights: vec![1.0],
            means: vec![0.0],
            stds: vec![1.0],
        };
        assert!((log_density_mixture(&mp, 0.0) + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn log_density_categorical_and_unknown_category() {
        let cp = CategoricalParams {
            probs: vec![0.5, 0.5],
        };
        let levels = [1.0, 2.0];
        assert!((log_density_categorical(&cp, &levels, 1.0).unwrap() - LN_HALF).abs() < 1e-12);
        assert!(matches!(
            log_density_categorical(&cp, &levels, 3.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn equal_components_collapse_to_single_gaussian() {
        let single = MixtureParams {
            weights: vec![1.0],
            means: vec![0.0],
            stds: vec![1.0],
        };
        let double = MixtureParams {
            weights: vec![0.5, 0.5],
            means: vec![0.0, 0.0],
            stds: vec![1.0, 1.0],
        };
        for p in [-3.0, -0.5, 0.0, 0.2, 4.0] {
            let d = (log_density_mixture(&single, p) - log_density_mixture(&double, p)).abs();
            assert!(d < 1e-12, "p={p} diff={d}");
        }
    }

    #[test]
    fn mixture_nll_grad_matches_finite_differences() {
        // differentiate through the head by wrapping the raw outputs in a
        // single identity layer driven by a fixed input of 1
        let raw0: Vec<f64> = vec![0.3, -0.2, 0.5, 0.1, -0.8, 0.4, 0.2, -0.1, 0.6];
        let p = 0.37;
        let (_, analytic_raw) = mixture_nll_grad(&raw0, p);

        let net = ParameterSet::new(vec![DenseLayer::new(
            Tensor::matrix(&raw0.iter().map(|v| vec![*v]).collect::<Vec<_>>()).unwrap(),
            Tensor::zeros(vec![raw0.len()]),
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let mut loss = |params: &ParameterSet| {
            let tape = forward(params, &[1.0], HiddenMode::Plain)?;
            Ok(mixture_nll_grad(tape.output(), p).0)
        };
        let fd = finite_difference_gradient(&mut loss, &net, 1e-6).unwrap();
        for (a, b) in analytic_raw.iter().zip(&fd.layers[0].weight) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn sampling_point_mass_limit() {
        let mp = MixtureParams {
            weights: vec![1.0, 0.0],
            means: vec![5.0, -20.0],
            stds: vec![SIGMA_FLOOR, SIGMA_FLOOR],
        };
        let mut stream = RngStream::root(4);
        let n = 4000;
        let draws = sample_mixture(&mp, n, &mut stream);
        let mean = crate::stats::mean(&draws);
        assert!((mean - 5.0).abs() < 3.0 * SIGMA_FLOOR / (n as f64).sqrt());
    }

    #[test]
    fn sampling_gaussian_moments() {
        let mp = MixtureParams {
            weights: vec![1.0],
            means: vec![2.0],
            stds: vec![1.0],
        };
        let mut stream = RngStream::root(14);
        let draws = sample_mixture(&mp, 10_000, &mut stream);
        assert!((crate::stats::mean(&draws) - 2.0).abs() < 0.03);
        assert!((crate::stats::variance(&draws) - 1.0).abs() < 0.05);
    }

    #[test]
    fn categorical_sampling_frequencies() {
        let model = {
            // logits giving pi = (0.2, 0.8)
            let network = ParameterSet::new(vec![DenseLayer::new(
                Tensor::matrix(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap(),
                Tensor::vector(vec![0.2f64.ln(), 0.8f64.ln()]).unwrap(),
                Activation::Identity,
            )
            .unwrap()])
            .unwrap();
            TreatmentModel::from_parts(
                network,
                TreatmentHead::Categorical {
                    levels: vec![1.0, 2.0],
                },
                InputLayout {
                    x_names: vec!["x".into()],
                    x_kinds: vec![crate::data::ColumnKind::Numeric],
                    z_names: vec!["z".into()],
                },
                Standardizer::identity(2),
                ScalarStandardizer::identity(),
                None,
                0,
            )
            .unwrap()
        };
        let mut stream = RngStream::root(15);
        let draws = model.sample(&[0.0], &[0.0], 10_000, &mut stream).unwrap();
        let freq2 = draws.iter().filter(|&&d| d == 2.0).count() as f64 / 10_000.0;
        assert!((freq2 - 0.8).abs() < 0.012, "{freq2}");
    }

    #[test]
    fn mixture_sampling_matches_cdf_kolmogorov_smirnov() {
        let mp = MixtureParams {
            weights: vec![0.3, 0.7],
            means: vec![-1.0, 2.0],
            stds: vec![0.5, 1.5],
        };
        let mut stream = RngStream::root(23);
        let n = 100_000;
        let mut draws = sample_mixture(&mp, n, &mut stream);
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (i, p) in draws.iter().enumerate() {
            let cdf = mp.cdf(*p);
            let emp_hi = (i + 1) as f64 / n as f64;
            let emp_lo = i as f64 / n as f64;
            ks = ks.max((cdf - emp_hi).abs()).max((cdf - emp_lo).abs());
        }
        assert!(ks < 0.02, "KS statistic {ks}");
    }

    #[test]
    fn learns_unconditional_gaussian_treatment() {
        // p ~ N(3, 1) independent of (x, z)
        let data = synthetic_dataset(3000, 100, |s| {
            (s.normal(), s.normal(), 3.0 + s.normal(), 0.0)
        });
        let config = FirstStageConfig {
            head: HeadSpec::Mixture { components: 2 },
            hidden: vec![16],
            epochs: 60,
            batch_size: 64,
            learning_rate: 5e-3,
            seed: Some(9),
            ..FirstStageConfig::default()
        };
        let model = train_first_stage(&data, &config).unwrap();
        for (x, z) in [(0.0, 0.0), (1.0, -1.0), (-2.0, 0.5)] {
            match model.conditional(&[x], &[z]).unwrap() {
                ConditionalTreatment::Mixture(mp) => {
                    assert!((mp.mean() - 3.0).abs() < 0.1, "mean {}", mp.mean());
                    assert!(
                        (mp.variance().sqrt() - 1.0).abs() < 0.1,
                        "std {}",
                        mp.variance().sqrt()
                    );
                }
                _ => panic!("expected mixture head"),
            }
        }
    }

    #[test]
    fn learns_constant_categorical_probabilities() {
        let data = synthetic_dataset(4000, 101, |s| {
            let p = if s.uniform() < 0.7 { 1.0 } else { 0.0 };
            (s.normal(), s.normal(), p, 0.0)
        });
        let config = FirstStageConfig {
            head: HeadSpec::Categorical,
            hidden: vec![8],
            epochs: 40,
            batch_size: 128,
            learning_rate: 5e-3,
            seed: Some(10),
            ..FirstStageConfig::default()
        };
        let model = train_first_stage(&data, &config).unwrap();
        match model.conditional(&[0.2], &[-0.4]).unwrap() {
            ConditionalTreatment::Categorical { levels, probs } => {
                assert_eq!(levels, vec![0.0, 1.0]);
                assert!((probs[0] - 0.3).abs() < 0.03, "probs {probs:?}");
                assert!((probs[1] - 0.7).abs() < 0.03);
            }
            _ => panic!("expected categorical head"),
        }
    }

    #[test]
    fn informative_instrument_beats_blind_model_out_of_sample() {
        // p = z exactly
        let data = synthetic_dataset(2500, 102, |s| {
            let z = s.normal();
            (s.normal(), z, z, 0.0)
        });
        let (train, holdout) = data.split_at(2000);
        let config = FirstStageConfig {
            head: HeadSpec::Mixture { components: 2 },
            hidden: vec![16],
            epochs: 80,
            batch_size: 64,
            learning_rate: 5e-3,
            seed: Some(11),
            ..FirstStageConfig::default()
        };
        let informed = train_first_stage(&train, &config).unwrap();

        // blind model: same rows, instruments shuffled away
        let mut perm_stream = RngStream::root(1000);
        let perm = perm_stream.permutation(train.n());
        let blind_train = train.with_permuted_z(&perm);
        let blind = train_first_stage(&blind_train, &config).unwrap();

        let dev_informed = oos_deviance(&informed, &holdout).unwrap();
        let dev_blind = oos_deviance(&blind, &holdout).unwrap();
        assert!(
            dev_informed < dev_blind,
            "informed {dev_informed} vs blind {dev_blind}"
        );
    }

    #[test]
    fn oos_deviance_of_true_model_is_differential_entropy() {
        // holdout drawn from N(0,1) independent of inputs; the true model's
        // deviance estimates 0.5 ln(2 pi e)
        let data = synthetic_dataset(10_000, 103, |s| (s.normal(), s.normal(), s.normal(), 0.0));
        let truth = gaussian_model(0.0, 0.0, 1.0);
        let dev = oos_deviance(&truth, &data).unwrap();
        assert!((dev - 1.418_938_533_204_672_7).abs() < 0.05, "{dev}");

        // duplicating rows leaves the mean untouched
        let doubled_idx: Vec<usize> = (0..data.n()).chain(0..data.n()).collect();
        let doubled = data.subset(&doubled_idx);
        let dev2 = oos_deviance(&truth, &doubled).unwrap();
        assert!((dev - dev2).abs() < 1e-12);

        // a model with doubled scale is strictly worse
        let wide = gaussian_model(0.0, 0.0, 2.0);
        assert!(oos_deviance(&wide, &data).unwrap() > dev);
    }

    #[test]
    fn relevance_detects_informative_instrument() {
        let data = synthetic_dataset(2000, 104, |s| {
            let z = s.normal();
            (s.normal(), z, z + 0.3 * s.normal(), 0.0)
        });
        let (train, holdout) = data.split_at(1400);
        let config = FirstStageConfig {
            head: HeadSpec::Mixture { components: 2 },
            hidden: vec![8],
            epochs: 40,
            batch_size: 64,
            learning_rate: 5e-3,
            seed: Some(12),
            ..FirstStageConfig::default()
        };
        let model = train_first_stage(&train, &config).unwrap();
        let mut stream = RngStream::root(500);
        let p = relevance_diagnostic(&model, &holdout, 100, &mut stream).unwrap();
        assert!(p < 0.05, "p-value {p}");
    }

    #[test]
    fn relevance_null_is_calibrated() {
        // independent p: the p-value should rarely be small
        let mut rejections = 0;
        let reps = 50;
        for rep in 0..reps {
            let data = synthetic_dataset(700, 200 + rep, |s| {
                (s.normal(), s.normal(), s.normal(), 0.0)
            });
            let (train, holdout) = data.split_at(400);
            let config = FirstStageConfig {
                head: HeadSpec::Mixture { components: 2 },
                hidden: vec![6],
                epochs: 10,
                batch_size: 100,
                learning_rate: 5e-3,
                val_fraction: 0.0,
                seed: Some(13),
                ..FirstStageConfig::default()
            };
            let model = train_first_stage(&train, &config).unwrap();
            let mut stream = RngStream::root(900 + rep);
            let p = relevance_diagnostic(&model, &holdout, 39, &mut stream).unwrap();
            if p <= 0.05 {
                rejections += 1;
            }
        }
        // at least 80% of null runs should stay above 0.05
        assert!(rejections <= reps / 5, "{rejections} rejections in {reps}");
    }

    #[test]
    fn relevance_constant_instrument_returns_one() {
        let data = synthetic_dataset(200, 105, |s| (s.normal(), 0.0, s.normal(), 0.0));
        let model = gaussian_model(0.0, 0.5, 1.0);
        let mut stream = RngStream::root(7);
        let p = relevance_diagnostic(&model, &data, 20, &mut stream).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn simplex_invariant_on_random_raw_outputs() {
        let mut stream = RngStream::root(31);
        for _ in 0..200 {
            let k = 1 + stream.index(6);
            let raw: Vec<f64> = (0..3 * k).map(|_| stream.uniform_in(-30.0, 30.0)).collect();
            let mp = mixture_head(&raw);
            let total: f64 = mp.weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-10);
            assert!(mp.weights.iter().all(|&w| w >= 0.0));
            assert!(mp.stds.iter().all(|&s| s >= SIGMA_FLOOR));
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let data = synthetic_dataset(400, 106, |s| {
            let z = s.normal();
            (s.normal(), z, z + s.normal(), 0.0)
        });
        let config = FirstStageConfig {
            head: HeadSpec::Mixture { components: 2 },
            hidden: vec![6],
            epochs: 5,
            seed: Some(21),
            ..FirstStageConfig::default()
        };
        let a = train_first_stage(&data, &config).unwrap();
        let b = train_first_stage(&data, &config).unwrap();
        assert_eq!(a.network, b.network);
        assert_eq!(a.training.train_loss, b.training.train_loss);
    }
}
