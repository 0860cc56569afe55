//! Layer-level API: ReLU, 3D batch normalization, linear, LSTM, softmax and
//! cross-entropy as plain functions, plus the weight initializers.
//!
//! The tape ([`crate::autodiff::Tape`]) records the same kernels for training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::kernels::{self, LOG_FLOOR};
use crate::{Error, Result, Scalar, Tensor};

pub use crate::kernels::{conv3d_forward, conv3d_shape, ConvGeometry};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;
pub const LSTM_FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// `weight·input + bias` for a single input vector.
pub fn linear_forward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() != 1 {
        return Err(Error::shape(format!(
            "linear_forward expects a vector, got {:?}",
            input.shape()
        )));
    }
    let row = input.clone().reshape(vec![1, input.len()])?;
    let y = kernels::linear_batch(&row, weight, bias)?;
    let n = y.len();
    y.reshape(vec![n])
}

// ── Batch normalization ─────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNormState {
            gamma: Tensor::ones(vec![channels])?,
            beta: Tensor::zeros(vec![channels])?,
            running_mean: Tensor::zeros(vec![channels])?,
            running_var: Tensor::ones(vec![channels])?,
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        })
    }

    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update_running(&mut self, stats: &kernels::BatchStats<T>) {
        update_running_stats(&mut self.running_mean, &mut self.running_var, stats, self.momentum);
    }
}

pub fn update_running_stats<T: Scalar>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    stats: &kernels::BatchStats<T>,
    momentum: f64,
) {
    let m = T::lit(momentum);
    let keep = T::one() - m;
    for (r, &b) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = keep * *r + m * b;
    }
    for (r, &b) in running_var.data_mut().iter_mut().zip(&stats.var_unbiased) {
        *r = (keep * *r + m * b).max(T::zero());
    }
}

/// Batch normalization of an N×C×T×H×W tensor. Train mode normalizes with
/// batch statistics and updates the running averages; eval mode reads only
/// the running averages.
pub fn batchnorm3d<T: Scalar>(x: &Tensor<T>, state: &mut BatchNormState<T>, mode: Mode) -> Result<Tensor<T>> {
    if x.rank() != 5 {
        return Err(Error::shape(format!(
            "batchnorm3d expects N×C×T×H×W, got {:?}",
            x.shape()
        )));
    }
    match mode {
        Mode::Train => {
            let (y, _, stats) = kernels::batch_norm_train(x, &state.gamma, &state.beta, state.epsilon)?;
            state.update_running(&stats);
            Ok(y)
        }
        Mode::Eval => Ok(kernels::batch_norm_eval(
            x,
            &state.gamma,
            &state.beta,
            &state.running_mean,
            &state.running_var,
            state.epsilon,
        )?
        .0),
    }
}

// ── LSTM ────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<T: Scalar = f32> {
    pub hidden: Tensor<T>,
    pub cell: Tensor<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(units: usize) -> Result<Self> {
        Ok(LstmState {
            hidden: Tensor::zeros(vec![units])?,
            cell: Tensor::zeros(vec![units])?,
        })
    }
}

/// Gate matrices in input, forget, candidate, output order.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmWeights<T: Scalar = f32> {
    /// 4H×I
    pub w_ih: Tensor<T>,
    /// 4H×H
    pub w_hh: Tensor<T>,
    /// 4H
    pub bias: Tensor<T>,
}

impl<T: Scalar> LstmWeights<T> {
    pub fn units(&self) -> usize {
        self.bias.len() / 4
    }
}

/// One LSTM step: returns the output (the new hidden vector) and the next state.
pub fn lstm_step<T: Scalar>(
    x: &Tensor<T>,
    state: &LstmState<T>,
    weights: &LstmWeights<T>,
) -> Result<(Tensor<T>, LstmState<T>)> {
    let h = weights.units();
    if x.rank() != 1 || state.hidden.shape() != [h] || state.cell.shape() != [h] {
        return Err(Error::shape(format!(
            "lstm_step expects vector input and {h}-unit state"
        )));
    }
    let xr = x.clone().reshape(vec![1, x.len()])?;
    let mut packed = state.hidden.data().to_vec();
    packed.extend_from_slice(state.cell.data());
    let packed = Tensor::new(vec![1, 2 * h], packed)?;
    let (next, _) = kernels::lstm_cell_forward(&xr, Some(&packed), &weights.w_ih, &weights.w_hh, &weights.bias)?;
    let hidden = Tensor::new(vec![h], next.data()[..h].to_vec())?;
    let cell = Tensor::new(vec![h], next.data()[h..].to_vec())?;
    Ok((hidden.clone(), LstmState { hidden, cell }))
}

/// Runs the cell over a sequence from the zero state; returns per-step outputs.
pub fn lstm_forward<T: Scalar>(xs: &[Tensor<T>], weights: &LstmWeights<T>) -> Result<(Vec<Tensor<T>>, LstmState<T>)> {
    let mut state = LstmState::zeros(weights.units())?;
    let mut outs = Vec::with_capacity(xs.len());
    for x in xs {
        let (o, next) = lstm_step(x, &state, weights)?;
        outs.push(o);
        state = next;
    }
    Ok((outs, state))
}

// ── Softmax / cross-entropy ─────────────────────────────────────────────

/// `exp(zᵢ) / Σⱼ exp(zⱼ)` with max subtraction.
pub fn softmax<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    Tensor::new(z.shape().to_vec(), kernels::softmax_row(z.data(), T::one())).expect("same shape")
}

/// Cross-entropy target: a class index or a probability distribution.
#[derive(Clone, Debug)]
pub enum Target<'a, T: Scalar = f32> {
    Class(usize),
    Distribution(&'a Tensor<T>),
}

/// `−Σ targetᵢ·ln(softmax(logits)ᵢ)` with the log floored at 1e−12.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, target: Target<'_, T>) -> Result<T> {
    let c = logits.len();
    let dist = match target {
        Target::Class(i) => {
            if i >= c {
                return Err(Error::invalid(format!("class index {i} out of range for {c} classes")));
            }
            let mut t = vec![T::zero(); c];
            t[i] = T::one();
            t
        }
        Target::Distribution(t) => {
            if t.len() != c {
                return Err(Error::shape(format!(
                    "target distribution has {} entries, logits {c}",
                    t.len()
                )));
            }
            let s = t.sum().as_f64();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("target distribution sums to {s}, expected 1")));
            }
            t.data().to_vec()
        }
    };
    let p = kernels::softmax_row(logits.data(), T::one());
    let floor = T::lit(LOG_FLOOR);
    Ok(p.iter()
        .zip(&dist)
        .fold(T::zero(), |acc, (&pi, &ti)| acc - ti * pi.max(floor).ln()))
}

// ── Initialization ──────────────────────────────────────────────────────

/// Uniform in `±sqrt(1/fan_in)`.
pub fn init_uniform<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Result<Tensor<f32>> {
    let bound = (1.0 / fan_in as f64).sqrt() as f32;
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data)
}

/// LSTM bias with the forget-gate block set to 1.
pub fn lstm_bias_init(units: usize) -> Result<Tensor<f32>> {
    Tensor::from_fn(vec![4 * units], |i| {
        if (units..2 * units).contains(&i) {
            LSTM_FORGET_BIAS as f32
        } else {
            0.0
        }
    })
}
