//! SGD (with optional Nesterov momentum and per-iteration learning-rate
//! decay) and Adam, as pure state transitions over parameter lists.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            decay: 1e-6,
            momentum: 0.7,
            nesterov: true,
        }
    }
}

impl SgdConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "sgd needs lr > 0, decay >= 0, 0 <= momentum < 1; got {self:?}"
            )));
        }
        Ok(())
    }

    /// `lr / (1 + decay * t)`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.lr / (1.0 + self.decay * iteration as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..1.0;
        if !(self.lr > 0.0) || !unit.contains(&self.beta1) || !unit.contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::config(format!(
                "adam needs lr > 0, 0 <= beta < 1, epsilon > 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Velocity per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// First/second moments per parameter and the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

fn check_shapes(params: &[Tensor], grads: &[Tensor], state: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::ShapeMismatch {
            op: "optimizer",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.len()],
        });
    }
    for ((p, g), s) in params.iter().zip(grads).zip(state) {
        if p.shape() != g.shape() || p.shape() != s.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// One SGD step at global iteration `iteration` (0-based).
///
/// `v' = μ·v − lr_t·g`; classical momentum applies `θ' = θ + v'`, Nesterov
/// applies `θ' = θ + μ·v' − lr_t·g`.
pub fn sgd_step(
    params: &[Tensor],
    grads: &[Tensor],
    state: &SgdState,
    config: &SgdConfig,
    iteration: u64,
) -> Result<(Vec<Tensor>, SgdState)> {
    check_shapes(params, grads, &state.velocity)?;
    let lr = config.lr_at(iteration);
    let mu = config.momentum;
    let mut new_params = Vec::with_capacity(params.len());
    let mut new_vel = Vec::with_capacity(params.len());
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        let vel: Vec<f64> = v.data().iter().zip(g.data()).map(|(&v, &g)| mu * v - lr * g).collect();
        let theta: Vec<f64> = p
            .data()
            .iter()
            .zip(g.data())
            .zip(&vel)
            .map(
                |((&th, &g), &v)| {
                    if config.nesterov {
                        th + mu * v - lr * g
                    } else {
                        th + v
                    }
                },
            )
            .collect();
        new_params.push(Tensor::new(p.shape(), theta)?);
        new_vel.push(Tensor::new(p.shape(), vel)?);
    }
    Ok((new_params, SgdState { velocity: new_vel }))
}

/// One bias-corrected Adam step; epsilon is added outside the square root.
pub fn adam_step(
    params: &[Tensor],
    grads: &[Tensor],
    state: &AdamState,
    config: &AdamConfig,
) -> Result<(Vec<Tensor>, AdamState)> {
    check_shapes(params, grads, &state.m)?;
    check_shapes(params, grads, &state.v)?;
    let t = state.t + 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    let mut out = Vec::with_capacity(params.len());
    let mut ms = Vec::with_capacity(params.len());
    let mut vs = Vec::with_capacity(params.len());
    for (((p, g), m), v) in params.iter().zip(grads).zip(&state.m).zip(&state.v) {
        let n = p.numel();
        let (mut pm, mut mm, mut vm) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            pm.push(p.data()[i] - config.lr * m_hat / (v_hat.sqrt() + config.epsilon));
            mm.push(mi);
            vm.push(vi);
        }
        out.push(Tensor::new(p.shape(), pm)?);
        ms.push(Tensor::new(p.shape(), mm)?);
        vs.push(Tensor::new(p.shape(), vm)?);
    }
    Ok((out, AdamState { m: ms, v: vs, t }))
}

/// Either optimizer together with its running state, for use in training loops.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        config: SgdConfig,
        state: SgdState,
        iteration: u64,
    },
    Adam {
        config: AdamConfig,
        state: AdamState,
    },
}

impl Optimizer {
    pub fn sgd(config: SgdConfig, params: &[Tensor]) -> Result<Self> {
        config.validate()?;
        Ok(Self::Sgd {
            config,
            state: SgdState::new(params),
            iteration: 0,
        })
    }

    pub fn adam(config: AdamConfig, params: &[Tensor]) -> Result<Self> {
        config.validate()?;
        Ok(Self::Adam {
            config,
            state: AdamState::new(params),
        })
    }

    pub fn step(&mut self, params: &[Tensor], grads: &[Tensor]) -> Result<Vec<Tensor>> {
        match self {
            Optimizer::Sgd {
                config,
                state,
                iteration,
            } => {
                let (p, s) = sgd_step(params, grads, state, config, *iteration)?;
                *state = s;
                *iteration += 1;
                Ok(p)
            }
            Optimizer::Adam { config, state } => {
                let (p, s) = adam_step(params, grads, state, config)?;
                *state = s;
                Ok(p)
            }
        }
    }
}
