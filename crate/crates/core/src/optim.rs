//! Stochastic optimization: bias-corrected adaptive-moment updates and a
//! central finite-difference gradient oracle.

use crate::error::{Error, Result};
use crate::net::{Gradients, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Per-parameter first and second moment accumulators plus the step count.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    first: Gradients,
    second: Gradients,
    step: u64,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet, config: AdamConfig) -> Self {
        OptimizerState {
            first: Gradients::zeros_like(params),
            second: Gradients::zeros_like(params),
            step: 0,
            config,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected adaptive-moment update. Rejects non-finite gradients,
/// naming the first offending layer.
pub fn adam_step(
    state: &mut OptimizerState,
    params: &mut ParameterSet,
    grads: &Gradients,
) -> Result<()> {
    if grads.layers.len() != params.depth() {
        return Err(Error::Dimension(
            "gradient layer count does not match parameters".into(),
        ));
    }
    if let Some(layer) = grads.first_non_finite_layer() {
        return Err(Error::Numeric(format!(
            "non-finite gradient entries in layer {layer}"
        )));
    }

    state.step += 1;
    let t = state.step as i32;
    let cfg = state.config;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for (l, layer) in params.layers_mut().iter_mut().enumerate() {
        let g = &grads.layers[l];
        let m = &mut state.first.layers[l];
        let v = &mut state.second.layers[l];

        let update = |param: &mut f64, grad: f64, m: &mut f64, v: &mut f64| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * grad;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * grad * grad;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *param -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        };

        for ((p, &grad), (mm, vv)) in layer
            .weight
            .values_mut()
            .iter_mut()
            .zip(&g.weight)
            .zip(m.weight.iter_mut().zip(v.weight.iter_mut()))
        {
            update(p, grad, mm, vv);
        }
        for ((p, &grad), (mm, vv)) in layer
            .bias
            .values_mut()
            .iter_mut()
            .zip(&g.bias)
            .zip(m.bias.iter_mut().zip(v.bias.iter_mut()))
        {
            update(p, grad, mm, vv);
        }
    }
    Ok(())
}

/// Per-epoch loss history from a training run. Losses are reported in
/// original (unstandardized) units so they are comparable to the
/// out-of-sample criteria.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainingTrace {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

impl TrainingTrace {
    pub fn empty() -> Self {
        TrainingTrace {
            train_loss: Vec::new(),
            val_loss: Vec::new(),
            epochs_run: 0,
            best_epoch: 0,
        }
    }
}

/// Central finite differences of a deterministic scalar loss with respect to
/// every parameter: `(f(p+h) - f(p-h)) / 2h` per coordinate.
pub fn finite_difference_gradient<F>(
    loss_fn: &mut F,
    params: &ParameterSet,
    step: f64,
) -> Result<Gradients>
where
    F: FnMut(&ParameterSet) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::Parameter(format!("step must be > 0, got {step}")));
    }
    let mut work = params.clone();
    let mut grads = Gradients::zeros_like(params);

    for l in 0..params.depth() {
        for part in 0..2 {
            let len = if part == 0 {
                params.layers()[l].weight.len()
            } else {
                params.layers()[l].bias.len()
            };
            for idx in 0..len {
                let read = |p: &ParameterSet| {
                    if part == 0 {
                        p.layers()[l].weight.values()[idx]
                    } else {
                        p.layers()[l].bias.values()[idx]
                    }
                };
                let write = |p: &mut ParameterSet, v: f64| {
                    if part == 0 {
                        p.layers_mut()[l].weight.values_mut()[idx] = v;
                    } else {
                        p.layers_mut()[l].bias.values_mut()[idx] = v;
                    }
                };

                let base = read(params);
                write(&mut work, base + step);
                let up = loss_fn(&work)?;
                write(&mut work, base - step);
                let down = loss_fn(&work)?;
                write(&mut work, base);
                if !up.is_finite() || !down.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss while differentiating layer {l}"
                    )));
                }
                let d = (up - down) / (2.0 * step);
                if part == 0 {
                    grads.layers[l].weight[idx] = d;
                } else {
                    grads.layers[l].bias[idx] = d;
                }
            }
        }
    }
    Ok(grads)
}

/// Largest relative disagreement between two gradient collections.
/// Denominator is `max(|a|, |b|, floor)` per coordinate.
pub fn max_relative_error(a: &Gradients, b: &Gradients, floor: f64) -> f64 {
    a.flat()
        .iter()
        .zip(b.flat())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
