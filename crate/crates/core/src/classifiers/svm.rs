//! Soft-margin support vector machines trained by sequential minimal
//! optimization, combined one-vs-rest with calibrated probabilities.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::platt::{platt_calibrate, PlattParams};
use crate::error::{Error, Result};
use crate::level::{EngagementLevel, LabelDistribution, LEVELS};
use crate::scalar::{dot, squared_distance, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Kernel<T: Scalar> {
    Linear,
    Rbf { gamma: T },
}

impl<T: Scalar> Kernel<T> {
    pub fn eval(&self, a: &[T], b: &[T]) -> T {
        match *self {
            Kernel::Linear => dot(a, b),
            Kernel::Rbf { gamma } => (-gamma * squared_distance(a, b)).exp(),
        }
    }

    pub fn gram(&self, x: &[Vec<T>]) -> Vec<Vec<T>> {
        let n = x.len();
        let mut k = vec![vec![T::zero(); n]; n];
        for i in 0..n {
            for j in i..n {
                let v = self.eval(&x[i], &x[j]);
                k[i][j] = v;
                k[j][i] = v;
            }
        }
        k
    }
}

/// Default RBF width: `1 / (d * mean per-feature variance)`, or 1 when the
/// features carry no variance.
pub fn default_gamma<T: Scalar>(x: &[Vec<T>]) -> T {
    let n = x.len();
    let d = x.first().map_or(0, Vec::len);
    if n < 2 || d == 0 {
        return T::one();
    }
    let nf = T::of_usize(n);
    let mut total = T::zero();
    for j in 0..d {
        let mean = x.iter().map(|r| r[j]).sum::<T>() / nf;
        total += x.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum::<T>() / nf;
    }
    let mean_var = total / T::of_usize(d);
    if mean_var > T::zero() {
        T::one() / (T::of_usize(d) * mean_var)
    } else {
        T::one()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution<T: Scalar> {
    pub alpha: Vec<T>,
    pub bias: T,
    pub iterations: usize,
}

/// `sum(alpha) - 1/2 * sum_ij alpha_i alpha_j y_i y_j K_ij`, to be maximized.
pub fn dual_objective<T: Scalar>(gram: &[Vec<T>], y: &[T], alpha: &[T]) -> T {
    let n = alpha.len();
    let mut quad = T::zero();
    for i in 0..n {
        if alpha[i] == T::zero() {
            continue;
        }
        for j in 0..n {
            quad += alpha[i] * alpha[j] * y[i] * y[j] * gram[i][j];
        }
    }
    alpha.iter().copied().sum::<T>() - T::half() * quad
}

/// Largest violation of the complementary-slackness conditions at
/// `(alpha, bias)`: margins of points with `alpha = 0` must be at least one,
/// free points exactly one, points at `C` at most one.
pub fn kkt_residual<T: Scalar>(gram: &[Vec<T>], y: &[T], alpha: &[T], bias: T, c: T) -> T {
    let n = alpha.len();
    let mut worst = T::zero();
    for i in 0..n {
        let f: T = (0..n).map(|j| alpha[j] * y[j] * gram[i][j]).sum::<T>() + bias;
        let m = y[i] * f;
        let r = if alpha[i] <= T::zero() {
            (T::one() - m).max(T::zero())
        } else if alpha[i] >= c {
            (m - T::one()).max(T::zero())
        } else {
            (m - T::one()).abs()
        };
        worst = worst.max(r);
    }
    worst
}

/// Solve the soft-margin dual with SMO and second-order working-set
/// selection. `y` holds +1/-1. Stops when the maximal KKT violation gap
/// drops below `tol`.
pub fn solve_dual<T: Scalar>(gram: &[Vec<T>], y: &[T], c: T, tol: T) -> Result<DualSolution<T>> {
    let n = y.len();
    if gram.len() != n || gram.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("Gram matrix does not match label count".into()));
    }
    if !(c > T::zero()) {
        return Err(Error::Config("SVM C must be positive".into()));
    }
    let tau = T::of(1e-12);
    let q = |i: usize, j: usize| y[i] * y[j] * gram[i][j];
    let mut alpha = vec![T::zero(); n];
    let mut grad = vec![-T::one(); n];
    let max_iter = 10_000_000usize.max(100 * n);
    let mut iterations = 0;

    let in_up = |a: T, yi: T| (yi > T::zero() && a < c) || (yi < T::zero() && a > T::zero());
    let in_low = |a: T, yi: T| (yi > T::zero() && a > T::zero()) || (yi < T::zero() && a < c);

    while iterations < max_iter {
        // i: maximal violator in the "up" set
        let mut gmax = T::neg_infinity();
        let mut i_sel = None;
        for t in 0..n {
            if in_up(alpha[t], y[t]) {
                let v = -y[t] * grad[t];
                if v >= gmax {
                    gmax = v;
                    i_sel = Some(t);
                }
            }
        }
        let Some(i) = i_sel else { break };
        let mut gmin = T::infinity();
        let mut j_sel = None;
        let mut best = T::infinity();
        for t in 0..n {
            if !in_low(alpha[t], y[t]) {
                continue;
            }
            let v = -y[t] * grad[t];
            gmin = gmin.min(v);
            let b = gmax - v;
            if b > T::zero() {
                let mut a = gram[i][i] + gram[t][t] - T::of(2.0) * gram[i][t];
                if a <= T::zero() {
                    a = tau;
                }
                let score = -(b * b) / a;
                if score <= best {
                    best = score;
                    j_sel = Some(t);
                }
            }
        }
        if gmax - gmin < tol {
            break;
        }
        let Some(j) = j_sel else { break };
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let mut quad = gram[i][i] + gram[j][j] + T::of(2.0) * q(i, j);
            if quad <= T::zero() {
                quad = tau;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > T::zero() {
                if alpha[j] < T::zero() {
                    alpha[j] = T::zero();
                    alpha[i] = diff;
                }
            } else if alpha[i] < T::zero() {
                alpha[i] = T::zero();
                alpha[j] = -diff;
            }
            if diff > T::zero() {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = gram[i][i] + gram[j][j] - T::of(2.0) * q(i, j);
            if quad <= T::zero() {
                quad = tau;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < T::zero() {
                alpha[j] = T::zero();
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < T::zero() {
                alpha[i] = T::zero();
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for (k, g) in grad.iter_mut().enumerate() {
            *g += q(i, k) * di + q(j, k) * dj;
        }
    }
    if iterations >= max_iter {
        log::warn!("SMO hit the iteration cap ({max_iter})");
    }

    // bias from free vectors, else the midpoint of the feasible interval
    let mut ub = T::infinity();
    let mut lb = T::neg_infinity();
    let mut free_sum = T::zero();
    let mut free = 0usize;
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < T::zero() {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= T::zero() {
            if y[t] > T::zero() {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            free_sum += yg;
        }
    }
    let rho = if free > 0 {
        free_sum / T::of_usize(free)
    } else if ub.is_finite() && lb.is_finite() {
        (ub + lb) * T::half()
    } else if ub.is_finite() {
        ub
    } else {
        lb
    };
    Ok(DualSolution {
        alpha,
        bias: -rho,
        iterations,
    })
}

/// A fitted binary SVM: `f(x) = sum_i coef_i K(sv_i, x) + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BinarySvm<T: Scalar> {
    pub kernel: Kernel<T>,
    pub support_vectors: Vec<Vec<T>>,
    /// `alpha_i * y_i` of each support vector.
    pub coefficients: Vec<T>,
    pub bias: T,
}

impl<T: Scalar> BinarySvm<T> {
    pub fn fit(x: &[Vec<T>], positive: &[bool], kernel: Kernel<T>, c: T, tol: T) -> Result<Self> {
        if x.len() != positive.len() {
            return Err(Error::Dimension {
                expected: x.len(),
                got: positive.len(),
            });
        }
        let y: Vec<T> = positive.iter().map(|&p| if p { T::one() } else { -T::one() }).collect();
        let gram = kernel.gram(x);
        let sol = solve_dual(&gram, &y, c, tol)?;
        let mut support_vectors = Vec::new();
        let mut coefficients = Vec::new();
        for (i, &a) in sol.alpha.iter().enumerate() {
            if a > T::zero() {
                support_vectors.push(x[i].clone());
                coefficients.push(a * y[i]);
            }
        }
        Ok(Self {
            kernel,
            support_vectors,
            coefficients,
            bias: sol.bias,
        })
    }

    pub fn decision(&self, x: &[T]) -> T {
        self.support_vectors
            .iter()
            .zip(&self.coefficients)
            .map(|(sv, &c)| c * self.kernel.eval(sv, x))
            .sum::<T>()
            + self.bias
    }
}

/// Binary scorer of one level against the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LevelScorer<T: Scalar> {
    pub svm: BinarySvm<T>,
    /// `None` when the level had too few samples to calibrate.
    pub platt: Option<PlattParams<T>>,
    /// Raw score used for uncalibrated levels: the level's training prevalence.
    pub prior: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct OneVsRestSvm<T: Scalar> {
    pub scorers: Vec<LevelScorer<T>>,
    pub input_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SvmParams<T: Scalar> {
    pub kernel: Kernel<T>,
    pub c: T,
    pub tol: T,
    pub folds: usize,
    pub seed: u64,
}

/// Out-of-fold decision values for Platt scaling. Folds whose training part
/// holds a single class emit +1 or -1 for that class.
fn cross_validated_decisions<T: Scalar>(x: &[Vec<T>], positive: &[bool], p: &SvmParams<T>) -> Result<Vec<T>> {
    let n = x.len();
    let folds = p.folds.clamp(2, n.max(2));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(p.seed));
    let mut out = vec![T::zero(); n];
    for f in 0..folds {
        let (lo, hi) = (f * n / folds, (f + 1) * n / folds);
        if lo == hi {
            continue;
        }
        let test = &order[lo..hi];
        let train: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
        let tx: Vec<Vec<T>> = train.iter().map(|&i| x[i].clone()).collect();
        let ty: Vec<bool> = train.iter().map(|&i| positive[i]).collect();
        let pos = ty.iter().filter(|&&b| b).count();
        if pos == 0 || pos == ty.len() {
            let v = if pos == 0 { -T::one() } else { T::one() };
            for &i in test {
                out[i] = v;
            }
            continue;
        }
        let svm = BinarySvm::fit(&tx, &ty, p.kernel, p.c, p.tol)?;
        for &i in test {
            out[i] = svm.decision(&x[i]);
        }
    }
    Ok(out)
}

/// One-vs-rest SVMs with per-level Platt calibration. Every level must occur
/// in `y`; levels with a single sample are scored by their prevalence.
pub fn fit_svm<T: Scalar>(x: &[Vec<T>], y: &[EngagementLevel], params: &SvmParams<T>) -> Result<OneVsRestSvm<T>> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    let d = x.first().map_or(0, Vec::len);
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("SVM inputs must be non-empty rows of equal length".into()));
    }
    let n = x.len();
    let mut scorers = Vec::with_capacity(LEVELS);
    for level in EngagementLevel::ALL {
        let positive: Vec<bool> = y.iter().map(|&l| l == level).collect();
        let count = positive.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::UnsupportedDistribution(format!("level {level} absent from SVM training data")));
        }
        if count == n {
            return Err(Error::UnsupportedDistribution("SVM training data holds a single level".into()));
        }
        let svm = BinarySvm::fit(x, &positive, params.kernel, params.c, params.tol)?;
        let platt = if count >= 2 {
            let seed = params.seed.wrapping_add(level.index() as u64);
            let dec = cross_validated_decisions(x, &positive, &SvmParams { seed, ..*params })?;
            Some(platt_calibrate(&dec, &positive)?)
        } else {
            None
        };
        scorers.push(LevelScorer {
            svm,
            platt,
            prior: T::of_usize(count) / T::of_usize(n),
        });
    }
    Ok(OneVsRestSvm { scorers, input_dim: d })
}

impl<T: Scalar> OneVsRestSvm<T> {
    /// Per-level calibrated scores before normalization.
    pub fn raw_scores(&self, x: &[T]) -> [T; LEVELS] {
        let mut s = [T::zero(); LEVELS];
        for (slot, sc) in s.iter_mut().zip(&self.scorers) {
            *slot = match &sc.platt {
                Some(p) => p.probability(sc.svm.decision(x)),
                None => sc.prior,
            };
        }
        s
    }

    pub fn predict_distribution(&self, x: &[T]) -> Result<LabelDistribution<T>> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(LabelDistribution::from_scores(self.raw_scores(x)))
    }
}
