//! Diagonal Gaussian policies over the 2-d action space.

use m2curl_numerics::{Binding, Mlp, Module, Parameter, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};

pub const ACTION_DIM: usize = 2;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// How a Gaussian sample becomes an environment action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Squash {
    /// `a = tanh(u)`; log-probabilities include the tanh Jacobian.
    Tanh,
    /// `a = clip(u, −1, 1)`; log-probabilities are of `u`.
    Clip,
}

/// Mean (and, for [`Squash::Tanh`], log-std) from an MLP trunk. The clipped
/// variant keeps a state-independent log-std parameter.
#[derive(Debug, Clone)]
pub struct GaussianPolicy {
    pub trunk: Mlp,
    pub log_std: Option<Parameter>,
    squash: Squash,
}

/// Per-sample result of [`GaussianPolicy::act`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    /// What the environment receives, within `[−1, 1]`.
    pub env: [f64; 2],
    /// The Gaussian sample before squashing or clipping.
    pub raw: [f64; 2],
    pub log_prob: f64,
}

/// Differentiable sample of a batch of actions.
#[derive(Debug, Clone, Copy)]
pub struct PolicySample {
    pub action: Var,
    /// `[B]` log-densities of `action`.
    pub log_prob: Var,
}

fn sizes(input: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    std::iter::once(input).chain(hidden.iter().copied()).chain(std::iter::once(out)).collect()
}

impl GaussianPolicy {
    pub fn squashed(name: &str, input: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        Self {
            trunk: Mlp::new(name, &sizes(input, hidden, 2 * ACTION_DIM), rng),
            log_std: None,
            squash: Squash::Tanh,
        }
    }

    pub fn clipped(name: &str, input: usize, hidden: &[usize], init_log_std: f64, rng: &mut impl Rng) -> Self {
        Self {
            trunk: Mlp::new(name, &sizes(input, hidden, ACTION_DIM), rng),
            log_std: Some(Parameter::new(
                format!("{name}.log_std"),
                Tensor::from_vec(vec![init_log_std; ACTION_DIM]),
            )),
            squash: Squash::Clip,
        }
    }

    pub fn squash(&self) -> Squash {
        self.squash
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.layers[0].fan_in()
    }

    /// `[B, 2]` mean and log-std.
    pub fn distribution(&self, tape: &mut Tape, features: Var, binding: Binding) -> Result<(Var, Var)> {
        let out = self.trunk.forward(tape, features, binding)?;
        match (&self.log_std, self.squash) {
            (None, _) => {
                let mean = tape.slice_cols(out, 0, ACTION_DIM)?;
                let raw = tape.slice_cols(out, ACTION_DIM, 2 * ACTION_DIM)?;
                // Smoothly bounded log-std.
                let t = tape.tanh(raw)?;
                let t = tape.add_scalar(t, 1.0)?;
                let t = tape.scale(t, 0.5 * (LOG_STD_MAX - LOG_STD_MIN))?;
                let log_std = tape.add_scalar(t, LOG_STD_MIN)?;
                Ok((mean, log_std))
            }
            (Some(p), _) => {
                let rows = tape.value(out).shape()[0];
                let zeros = tape.constant(Tensor::zeros(&[rows, ACTION_DIM]))?;
                let ls = binding.bind(tape, p)?;
                let log_std = tape.add_row(zeros, ls)?;
                Ok((out, log_std))
            }
        }
    }

    /// Reparameterised sample `u = μ + σ·ε` for standard-normal `noise`.
    pub fn sample(&self, tape: &mut Tape, features: Var, noise: &Tensor, binding: Binding) -> Result<PolicySample> {
        let (mean, log_std) = self.distribution(tape, features, binding)?;
        if tape.value(mean).shape() != noise.shape() {
            return Err(CoreError::Contract(format!(
                "noise {:?} does not match actions {:?}",
                noise.shape(),
                tape.value(mean).shape()
            )));
        }
        let eps = tape.constant(noise.clone())?;
        let std = tape.exp(log_std)?;
        let shift = tape.mul(std, eps)?;
        let u = tape.add(mean, shift)?;
        // log N(u; μ, σ) = Σ −ε²/2 − log σ − ln(2π)/2
        let sq = tape.constant(Tensor::new(noise.shape(), noise.data().iter().map(|e| -0.5 * e * e).collect())?)?;
        let per_dim = tape.sub(sq, log_std)?;
        let gauss = tape.sum_cols(per_dim)?;
        let gauss = tape.add_scalar(gauss, -(ACTION_DIM as f64) * HALF_LN_2PI)?;
        match self.squash {
            Squash::Clip => Ok(PolicySample {
                action: u,
                log_prob: gauss,
            }),
            Squash::Tanh => {
                let a = tape.tanh(u)?;
                let jac = log_one_minus_tanh_sq(tape, u)?;
                let jac = tape.sum_cols(jac)?;
                let log_prob = tape.sub(gauss, jac)?;
                Ok(PolicySample { action: a, log_prob })
            }
        }
    }

    /// Log-density and entropy of given raw (pre-clip) actions under the
    /// clipped policy; both `[B]`.
    pub fn evaluate(&self, tape: &mut Tape, features: Var, raw_actions: &Tensor, binding: Binding) -> Result<(Var, Var)> {
        if self.squash != Squash::Clip {
            return Err(CoreError::Contract("evaluate is defined for the clipped policy".into()));
        }
        let (mean, log_std) = self.distribution(tape, features, binding)?;
        let u = tape.constant(raw_actions.clone())?;
        let diff = tape.sub(u, mean)?;
        let neg = tape.neg(log_std)?;
        let inv_std = tape.exp(neg)?;
        let z = tape.mul(diff, inv_std)?;
        let z2 = tape.square(z)?;
        let half = tape.scale(z2, -0.5)?;
        let per_dim = tape.sub(half, log_std)?;
        let lp = tape.sum_cols(per_dim)?;
        let lp = tape.add_scalar(lp, -(ACTION_DIM as f64) * HALF_LN_2PI)?;
        let ent = tape.sum_cols(log_std)?;
        let ent = tape.add_scalar(ent, ACTION_DIM as f64 * (0.5 + HALF_LN_2PI))?;
        Ok((lp, ent))
    }

    /// Actions for a batch of feature rows. Deterministic mode uses `ε = 0`,
    /// i.e. `tanh(μ)` or `μ`.
    pub fn act(&self, features: &Tensor, deterministic: bool, rng: &mut impl Rng) -> Result<Vec<Action>> {
        let rows = features.shape()[0];
        let noise = if deterministic {
            Tensor::zeros(&[rows, ACTION_DIM])
        } else {
            standard_normal(&[rows, ACTION_DIM], rng)
        };
        let mut tape = Tape::new();
        let f = tape.constant(features.clone())?;
        let (mean, log_std) = self.distribution(&mut tape, f, Binding::Frozen)?;
        let s = self.sample(&mut tape, f, &noise, Binding::Frozen)?;
        let (m, ls, a, lp) = (tape.value(mean), tape.value(log_std), tape.value(s.action), tape.value(s.log_prob));
        Ok((0..rows)
            .map(|i| {
                let raw = [
                    m.row(i)[0] + ls.row(i)[0].exp() * noise.row(i)[0],
                    m.row(i)[1] + ls.row(i)[1].exp() * noise.row(i)[1],
                ];
                let env = match self.squash {
                    Squash::Tanh => [a.row(i)[0], a.row(i)[1]],
                    Squash::Clip => [raw[0].clamp(-1.0, 1.0), raw[1].clamp(-1.0, 1.0)],
                };
                Action {
                    env,
                    raw,
                    log_prob: lp.data()[i],
                }
            })
            .collect())
    }
}

impl Module for GaussianPolicy {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.trunk.visit(f);
        self.log_std.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.trunk.visit_mut(f);
        self.log_std.visit_mut(f);
    }
}

/// `log(1 − tanh²u) = 2·(ln 2 − u − softplus(−2u))`, stable for large `|u|`.
fn log_one_minus_tanh_sq(tape: &mut Tape, u: Var) -> Result<Var> {
    let m2u = tape.scale(u, -2.0)?;
    let sp = tape.softplus(m2u)?;
    let s = tape.add(u, sp)?;
    let s = tape.neg(s)?;
    let s = tape.add_scalar(s, std::f64::consts::LN_2)?;
    Ok(tape.scale(s, 2.0)?)
}

pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}
