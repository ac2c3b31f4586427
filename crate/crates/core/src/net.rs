//! Feed-forward networks: parameters, forward passes with a computation
//! tape, reverse-mode gradients, and dropout masks.
//!
//! A network is a stack of dense layers `a_l = act(W_l a_{l-1} + b_l)`.
//! Hidden-layer outputs can additionally be multiplied elementwise by a
//! dropout mask (training), by the keep probability (point-estimate
//! prediction for a dropout-trained network), or left alone. The forward
//! pass records enough per-layer state for an exact reverse sweep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative given pre-activation `z` and output `a`.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// One dense layer. `weight` has shape `[out, in]`, `bias` shape `[out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::Dimension("layer weight must be a matrix".into()));
        }
        if bias.shape().len() != 1 || bias.len() != weight.rows() {
            return Err(Error::Dimension(format!(
                "bias length {} does not match weight rows {}",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(DenseLayer {
            weight,
            bias,
            activation,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }
}

/// An ordered stack of dense layers with chained widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    layers: Vec<DenseLayer>,
}

impl ParameterSet {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dimension("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[1].fan_in() != w[0].fan_out() {
                return Err(Error::Dimension(format!(
                    "layer widths do not chain: {} feeds {}",
                    w[0].fan_out(),
                    w[1].fan_in()
                )));
            }
        }
        Ok(ParameterSet { layers })
    }

    /// Random initialization: weights uniform on `±1/sqrt(fan_in)`, biases
    /// zero. `widths` runs input..output; hidden layers get `hidden_act`,
    /// the final layer `output_act`.
    pub fn init(
        widths: &[usize],
        hidden_act: Activation,
        output_act: Activation,
        stream: &mut RngStream,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Dimension(
                "need at least input and output widths".into(),
            ));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let values: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| stream.uniform_in(-scale, scale))
                .collect();
            let act = if l + 2 == widths.len() {
                output_act
            } else {
                hidden_act
            };
            layers.push(DenseLayer::new(
                Tensor::new(vec![fan_out, fan_in], values)?,
                Tensor::zeros(vec![fan_out]),
                act,
            )?);
        }
        ParameterSet::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().fan_out()
    }

    /// Widths of the hidden-layer outputs (empty for a single-layer net).
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.fan_out())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Sum of squared weights (biases excluded).
    pub fn weight_sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.values())
            .map(|w| w * w)
            .sum()
    }
}

/// Per-layer `{0,1}` multipliers for the hidden-layer outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutMaskSet {
    pub masks: Vec<Vec<f64>>,
    pub keep_prob: f64,
}

/// Independent Bernoulli(`keep_prob`) masks, one vector per hidden layer.
pub fn sample_dropout_masks(
    hidden_widths: &[usize],
    keep_prob: f64,
    stream: &mut RngStream,
) -> Result<DropoutMaskSet> {
    check_keep_prob(keep_prob)?;
    let masks = hidden_widths
        .iter()
        .map(|&w| (0..w).map(|_| stream.bernoulli(keep_prob)).collect())
        .collect();
    Ok(DropoutMaskSet { masks, keep_prob })
}

pub fn check_keep_prob(c: f64) -> Result<()> {
    if !(0.5..1.0).contains(&c) {
        return Err(Error::Parameter(format!(
            "keep_prob must lie in [0.5, 1), got {c}"
        )));
    }
    Ok(())
}

/// How hidden-layer outputs are treated during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum HiddenMode<'a> {
    /// No multiplier (networks trained without dropout).
    Plain,
    /// Multiply every hidden output by a constant; used for point-estimate
    /// prediction from a dropout-trained network.
    Scale(f64),
    /// Multiply by sampled masks.
    Mask(&'a DropoutMaskSet),
}

#[derive(Debug, Clone, PartialEq)]
enum Multiplier {
    Ones,
    Scale(f64),
    Mask(Vec<f64>),
}

impl Multiplier {
    #[inline]
    fn factor(&self, j: usize) -> f64 {
        match self {
            Multiplier::Ones => 1.0,
            Multiplier::Scale(c) => *c,
            Multiplier::Mask(m) => m[j],
        }
    }
}

#[derive(Debug, Clone)]
struct LayerRecord {
    /// Input consumed by this layer.
    input: Vec<f64>,
    /// Pre-activation `W x + b`.
    preact: Vec<f64>,
    /// Activation output before any multiplier.
    act: Vec<f64>,
    /// Multiplier applied to the activation output.
    mult: Multiplier,
}

/// Forward-pass record, sufficient for the reverse sweep and for bit-exact
/// replay.
#[derive(Debug, Clone)]
pub struct Tape {
    records: Vec<LayerRecord>,
    output: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Scalar network output; panics if the output width is not 1.
    pub fn scalar(&self) -> f64 {
        assert_eq!(self.output.len(), 1);
        self.output[0]
    }

    /// Pre-activation vector of layer `l`.
    pub fn preactivation(&self, l: usize) -> &[f64] {
        &self.records[l].preact
    }

    /// Smallest absolute pre-activation across layers; finite-difference
    /// probes of piecewise-linear activations are only trustworthy when
    /// this clears the probe step.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.records
            .iter()
            .flat_map(|r| r.preact.iter())
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }

    /// Post-multiplier output of hidden layer `l`.
    pub fn hidden_output(&self, l: usize) -> Vec<f64> {
        let rec = &self.records[l];
        rec.act
            .iter()
            .enumerate()
            .map(|(j, a)| a * rec.mult.factor(j))
            .collect()
    }

    /// Recompute the forward pass from the recorded input and multipliers.
    /// Under identical parameters this reproduces `output()` bit for bit.
    pub fn replay(&self, params: &ParameterSet) -> Result<Vec<f64>> {
        let mut x = self.records[0].input.clone();
        for (l, layer) in params.layers().iter().enumerate() {
            let rec = &self.records[l];
            x = affine_activate(layer, &x, &rec.mult, l + 1 < params.depth());
        }
        Ok(x)
    }
}

fn affine_activate(layer: &DenseLayer, x: &[f64], mult: &Multiplier, hidden: bool) -> Vec<f64> {
    let out = layer.fan_out();
    let mut result = Vec::with_capacity(out);
    for j in 0..out {
        let row = layer.weight.row(j);
        let mut z = layer.bias.values()[j];
        for (w, xi) in row.iter().zip(x) {
            z = w.mul_add(*xi, z);
        }
        let a = layer.activation.apply(z);
        result.push(if hidden { a * mult.factor(j) } else { a });
    }
    result
}

/// Forward pass recording a tape.
///
/// `masks`, if given, must carry one vector per hidden layer with matching
/// widths; each hidden layer's output is multiplied elementwise by its mask.
pub fn mlp_forward(
    params: &ParameterSet,
    input: &Tensor,
    masks: Option<&DropoutMaskSet>,
) -> Result<(Tensor, Tape)> {
    let mode = match masks {
        Some(m) => HiddenMode::Mask(m),
        None => HiddenMode::Plain,
    };
    let tape = forward(params, input.values(), mode)?;
    let out = Tensor::vector(tape.output().to_vec())?;
    Ok((out, tape))
}

/// Forward pass with an explicit hidden-output mode.
pub fn forward(params: &ParameterSet, input: &[f64], mode: HiddenMode) -> Result<Tape> {
    if input.len() != params.input_width() {
        return Err(Error::Dimension(format!(
            "input width {} does not match first layer fan-in {}",
            input.len(),
            params.input_width()
        )));
    }
    if let HiddenMode::Mask(m) = mode {
        let hidden = params.hidden_widths();
        if m.masks.len() != hidden.len()
            || m.masks.iter().zip(&hidden).any(|(mk, &w)| mk.len() != w)
        {
            return Err(Error::Dimension(
                "dropout masks do not match hidden layer widths".into(),
            ));
        }
    }

    let depth = params.depth();
    let mut records = Vec::with_capacity(depth);
    let mut x = input.to_vec();
    for (l, layer) in params.layers().iter().enumerate() {
        let is_hidden = l + 1 < depth;
        let mult = if is_hidden {
            match mode {
                HiddenMode::Plain => Multiplier::Ones,
                HiddenMode::Scale(c) => Multiplier::Scale(c),
                HiddenMode::Mask(m) => Multiplier::Mask(m.masks[l].clone()),
            }
        } else {
            Multiplier::Ones
        };

        let out_w = layer.fan_out();
        let mut preact = Vec::with_capacity(out_w);
        let mut act = Vec::with_capacity(out_w);
        let mut post = Vec::with_capacity(out_w);
        for j in 0..out_w {
            let row = layer.weight.row(j);
            let mut z = layer.bias.values()[j];
            for (w, xi) in row.iter().zip(&x) {
                z = w.mul_add(*xi, z);
            }
            let a = layer.activation.apply(z);
            preact.push(z);
            act.push(a);
            post.push(if is_hidden { a * mult.factor(j) } else { a });
        }
        records.push(LayerRecord {
            input: x,
            preact,
            act,
            mult,
        });
        x = post;
    }

    if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite network output at index {bad}"
        )));
    }
    Ok(Tape { records, output: x })
}

/// Gradients with the same layer shapes as a `ParameterSet`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Gradients {
            layers: params
                .layers()
                .iter()
                .map(|l| LayerGrads {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in self.layers.iter_mut() {
            for x in l.weight.iter_mut() {
                *x *= factor;
            }
            for x in l.bias.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn first_non_finite_layer(&self) -> Option<usize> {
        self.layers.iter().position(|l| {
            l.weight.iter().any(|v| !v.is_finite()) || l.bias.iter().any(|v| !v.is_finite())
        })
    }

    /// Flat copy of all entries (weights then bias, layer by layer).
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Gradients) -> f64 {
        self.flat()
            .iter()
            .zip(other.flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Reverse sweep: gradients of `output_grad . output` with respect to every
/// parameter recorded on the tape.
pub fn backward(params: &ParameterSet, tape: &Tape, output_grad: &[f64]) -> Result<Gradients> {
    if output_grad.len() != params.output_width() {
        return Err(Error::Dimension(format!(
            "output grad width {} does not match network output {}",
            output_grad.len(),
            params.output_width()
        )));
    }
    if tape.records.len() != params.depth() {
        return Err(Error::Dimension(
            "tape depth does not match parameter set".into(),
        ));
    }

    let mut grads = Gradients::zeros_like(params);
    let mut upstream = output_grad.to_vec();

    for l in (0..params.depth()).rev() {
        let layer = &params.layers()[l];
        let rec = &tape.records[l];
        let is_hidden = l + 1 < params.depth();
        let in_w = layer.fan_in();
        let out_w = layer.fan_out();

        let mut d_input = vec![0.0; in_w];
        let lg = &mut grads.layers[l];
        for j in 0..out_w {
            let through_mult = if is_hidden {
                upstream[j] * rec.mult.factor(j)
            } else {
                upstream[j]
            };
            let dz = through_mult * layer.activation.derivative(rec.preact[j], rec.act[j]);
            lg.bias[j] += dz;
            let wrow = layer.weight.row(j);
            let grow = &mut lg.weight[j * in_w..(j + 1) * in_w];
            for i in 0..in_w {
                grow[i] += dz * rec.input[i];
                d_input[i] = wrow[i].mul_add(dz, d_input[i]);
            }
        }
        upstream = d_input;
    }
    Ok(grads)
}
