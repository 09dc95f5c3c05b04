//! Single-hidden-layer perceptron (`d -> hidden -> 3`, rectified hidden
//! units) trained with mini-batch SGD and early stopping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::nn::{init_uniform, shuffled_batches, softmax, softmax_cross_entropy, train_with_early_stopping, Sgd};
use super::TrainingReport;
use crate::error::{Error, Result};
use crate::level::{EngagementLevel, LabelDistribution, LEVELS};
use crate::scalar::Scalar;

/// Parameters live in one flat vector laid out as
/// `[w1 (hidden x input), b1 (hidden), w2 (3 x hidden), b2 (3)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Mlp<T: Scalar> {
    pub input_dim: usize,
    pub hidden: usize,
    pub params: Vec<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn param_count(input_dim: usize, hidden: usize) -> usize {
        hidden * input_dim + hidden + LEVELS * hidden + LEVELS
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            input_dim,
            hidden,
            params: vec![T::zero(); Self::param_count(input_dim, hidden)],
        }
    }

    pub fn initialized(input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut m = Self::zeros(input_dim, hidden);
        let (w1, rest) = m.params.split_at_mut(hidden * input_dim);
        init_uniform(w1, input_dim, rng);
        let w2 = &mut rest[hidden..hidden + LEVELS * hidden];
        init_uniform(w2, hidden, rng);
        m
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input_dim;
        let w2 = b1 + self.hidden;
        let b2 = w2 + LEVELS * self.hidden;
        (b1, w2, b2)
    }

    fn forward(&self, x: &[T]) -> (Vec<T>, [T; LEVELS]) {
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let hidden: Vec<T> = (0..self.hidden)
            .map(|h| {
                let row = &p[h * self.input_dim..(h + 1) * self.input_dim];
                let z = row.iter().zip(x).map(|(&w, &v)| w * v).sum::<T>() + p[b1 + h];
                z.max(T::zero())
            })
            .collect();
        let mut logits = [T::zero(); LEVELS];
        for (k, l) in logits.iter_mut().enumerate() {
            let row = &p[w2 + k * self.hidden..w2 + (k + 1) * self.hidden];
            *l = row.iter().zip(&hidden).map(|(&w, &a)| w * a).sum::<T>() + p[b2 + k];
        }
        (hidden, logits)
    }

    pub fn predict_distribution(&self, x: &[T]) -> Result<LabelDistribution<T>> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(LabelDistribution(softmax(&self.forward(x).1)))
    }

    /// Mean cross-entropy over `batch` and its gradient.
    pub fn loss_and_gradient(&self, x: &[Vec<T>], y: &[usize], batch: &[usize]) -> (T, Vec<T>) {
        let (b1, w2, b2) = self.offsets();
        let mut grad = vec![T::zero(); self.params.len()];
        let mut loss = T::zero();
        let scale = T::one() / T::of_usize(batch.len().max(1));
        for &i in batch {
            let xi = &x[i];
            let (hidden, logits) = self.forward(xi);
            let (l, dlogits) = softmax_cross_entropy(&logits, y[i]);
            loss += l;
            let dlogits = dlogits.map(|g| g * scale);
            let mut dhidden = vec![T::zero(); self.hidden];
            for k in 0..LEVELS {
                grad[b2 + k] += dlogits[k];
                let row = w2 + k * self.hidden;
                for h in 0..self.hidden {
                    grad[row + h] += dlogits[k] * hidden[h];
                    dhidden[h] += dlogits[k] * self.params[row + h];
                }
            }
            for h in 0..self.hidden {
                if hidden[h] <= T::zero() {
                    continue;
                }
                let dz = dhidden[h];
                grad[b1 + h] += dz;
                let row = h * self.input_dim;
                for (g, &v) in grad[row..row + self.input_dim].iter_mut().zip(xi) {
                    *g += dz * v;
                }
            }
        }
        (loss * scale, grad)
    }

    pub fn loss(&self, x: &[Vec<T>], y: &[usize], batch: &[usize]) -> T {
        let total: T = batch
            .iter()
            .map(|&i| softmax_cross_entropy(&self.forward(&x[i]).1, y[i]).0)
            .sum();
        total / T::of_usize(batch.len().max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpParams {
    pub hidden: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for MlpParams {
    fn default() -> Self {
        Self {
            hidden: 128,
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 256,
            max_epochs: 200,
            patience: 5,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Minimum training-set size: the validation split must be non-empty.
pub const MLP_MIN_SAMPLES: usize = 10;

pub fn fit_mlp<T: Scalar>(x: &[Vec<T>], y: &[EngagementLevel], p: &MlpParams) -> Result<(Mlp<T>, TrainingReport)> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < MLP_MIN_SAMPLES {
        return Err(Error::Shape(format!(
            "MLP needs at least {MLP_MIN_SAMPLES} samples, got {}",
            x.len()
        )));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("MLP inputs must be non-empty rows of equal length".into()));
    }
    let labels: Vec<usize> = y.iter().map(|l| l.index()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((x.len() as f64 * p.validation_fraction).round() as usize).clamp(1, x.len() - 1);
    let (val, train) = order.split_at(n_val);
    let train: Vec<usize> = train.to_vec();
    let val: Vec<usize> = val.to_vec();

    let mut model = Mlp::initialized(d, p.hidden, &mut rng);
    let mut opt = Sgd::new(model.params.len(), T::of(p.learning_rate), T::of(p.momentum));
    let log = train_with_early_stopping(
        &mut model,
        p.max_epochs,
        p.patience,
        |m, _| {
            let batches = shuffled_batches(train.len(), p.batch_size, &mut rng);
            let mut total = 0.0;
            for b in &batches {
                let idx: Vec<usize> = b.iter().map(|&k| train[k]).collect();
                let (l, g) = m.loss_and_gradient(x, &labels, &idx);
                opt.step(&mut m.params, &g);
                total += l.as_f64() * idx.len() as f64;
            }
            total / train.len() as f64
        },
        |m, _| m.loss(x, &labels, &val).as_f64(),
    )?;
    let report = TrainingReport {
        seed: p.seed,
        epochs_run: log.train_loss.len(),
        loss_curve: log.train_loss,
        validation_trace: log.validation_loss,
        best_epoch: log.best_epoch,
    };
    Ok((model, report))
}
