//! Pieces shared by the neural classifiers: initialization, softmax
//! cross-entropy, optimizers and early stopping.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::level::LEVELS;
use crate::scalar::Scalar;

/// Fill `out` with `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` draws.
pub fn init_uniform<T: Scalar>(out: &mut [T], fan_in: usize, rng: &mut ChaCha8Rng) {
    let limit = 1.0 / (fan_in.max(1) as f64).sqrt();
    for w in out {
        *w = T::of(rng.random_range(-limit..=limit));
    }
}

pub fn softmax<T: Scalar>(logits: &[T; LEVELS]) -> [T; LEVELS] {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e = logits.map(|z| (z - m).exp());
    let s: T = e.iter().copied().sum();
    e.map(|v| v / s)
}

/// Cross-entropy of `softmax(logits)` against `label`, and its gradient with
/// respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T; LEVELS], label: usize) -> (T, [T; LEVELS]) {
    let p = softmax(logits);
    let loss = -(p[label].max(T::min_positive_value())).ln();
    let mut g = p;
    g[label] -= T::one();
    (loss, g)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Mini-batches of indices after a seeded shuffle.
pub fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Gradient descent with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar> {
    pub learning_rate: T,
    pub momentum: T,
    velocity: Vec<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(len: usize, learning_rate: T, momentum: T) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: vec![T::zero(); len],
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v - self.learning_rate * g;
            *p += *v;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(len: usize, learning_rate: T) -> Self {
        Self {
            learning_rate,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            epsilon: T::of(1e-8),
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        self.t += 1;
        let c1 = T::one() - self.beta1.powi(self.t);
        let c2 = T::one() - self.beta2.powi(self.t);
        for (((p, m), v), &g) in params.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(grad) {
            *m = self.beta1 * *m + (T::one() - self.beta1) * g;
            *v = self.beta2 * *v + (T::one() - self.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Tracks validation loss; asks to stop once it has not improved for
/// `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: Option<usize>,
    pub stale_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: None,
            stale_epochs: 0,
        }
    }

    /// Record the validation loss of `epoch`. Returns whether it improved and
    /// whether training should stop.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, StopDecision) {
        let improved = loss < self.best_loss;
        if improved {
            self.best_loss = loss;
            self.best_epoch = Some(epoch);
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
        }
        let decision = if self.stale_epochs >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        };
        (improved, decision)
    }
}

/// Outcome of [`train_with_early_stopping`].
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// Run up to `max_epochs` epochs of `train_epoch`, scoring each with
/// `validate`. Stops after `patience` epochs without improvement and leaves
/// `state` at the best validated snapshot. A non-finite loss aborts with
/// [`Error::Divergence`].
pub fn train_with_early_stopping<P: Clone>(
    state: &mut P,
    max_epochs: usize,
    patience: usize,
    mut train_epoch: impl FnMut(&mut P, usize) -> f64,
    mut validate: impl FnMut(&P, usize) -> f64,
) -> Result<EpochLog> {
    let mut stopper = EarlyStopping::new(patience.max(1));
    let mut best = state.clone();
    let mut log = EpochLog {
        train_loss: Vec::new(),
        validation_loss: Vec::new(),
        best_epoch: None,
    };
    for epoch in 0..max_epochs {
        let tl = train_epoch(state, epoch);
        if !tl.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let vl = validate(state, epoch);
        if !vl.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        log.train_loss.push(tl);
        log.validation_loss.push(vl);
        let (improved, decision) = stopper.observe(epoch, vl);
        if improved {
            best = state.clone();
        }
        if decision == StopDecision::Stop {
            break;
        }
    }
    log.best_epoch = stopper.best_epoch;
    *state = best;
    Ok(log)
}
