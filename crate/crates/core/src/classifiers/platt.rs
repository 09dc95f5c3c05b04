//! Sigmoid calibration of decision values (Platt scaling), fitted with the
//! Newton method and backtracking line search on the regularized
//! cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `P(y = 1 | f) = 1 / (1 + exp(a * f + b))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PlattParams<T: Scalar> {
    pub a: T,
    pub b: T,
}

impl<T: Scalar> PlattParams<T> {
    /// Calibrated probability, kept strictly inside (0, 1).
    pub fn probability(&self, decision: T) -> T {
        let z = self.a * decision + self.b;
        let p = if z >= T::zero() {
            let e = (-z).exp();
            e / (T::one() + e)
        } else {
            T::one() / (T::one() + z.exp())
        };
        let eps = T::epsilon();
        p.max(eps).min(T::one() - eps)
    }
}

/// Smoothed training targets: `(N+ + 1) / (N+ + 2)` for positives and
/// `1 / (N- + 2)` for negatives.
pub fn platt_targets<T: Scalar>(labels: &[bool]) -> Vec<T> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    let hi = T::of_usize(pos + 1) / T::of_usize(pos + 2);
    let lo = T::one() / T::of_usize(neg + 2);
    labels.iter().map(|&l| if l { hi } else { lo }).collect()
}

/// Regularized cross-entropy minimized by [`platt_calibrate`].
pub fn platt_objective<T: Scalar>(decision_values: &[T], targets: &[T], a: T, b: T) -> T {
    decision_values
        .iter()
        .zip(targets)
        .map(|(&f, &t)| {
            let z = f * a + b;
            if z >= T::zero() {
                t * z + (T::one() + (-z).exp()).ln()
            } else {
                (t - T::one()) * z + (T::one() + z.exp()).ln()
            }
        })
        .sum()
}

/// Fit sigmoid parameters to decision values and binary labels.
pub fn platt_calibrate<T: Scalar>(decision_values: &[T], labels: &[bool]) -> Result<PlattParams<T>> {
    if decision_values.len() != labels.len() {
        return Err(Error::Dimension {
            expected: decision_values.len(),
            got: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UnsupportedDistribution(
            "Platt scaling needs both positive and negative labels".into(),
        ));
    }
    let targets = platt_targets::<T>(labels);
    let max_iter = 100;
    let min_step = T::of(1e-10);
    let sigma = T::of(1e-12);
    let eps = T::of(1e-5);

    let mut a = T::zero();
    let mut b = (T::of_usize(neg + 1) / T::of_usize(pos + 1)).ln();
    let mut fval = platt_objective(decision_values, &targets, a, b);

    for _ in 0..max_iter {
        let (mut h11, mut h22, mut h21) = (sigma, sigma, T::zero());
        let (mut g1, mut g2) = (T::zero(), T::zero());
        for (&f, &t) in decision_values.iter().zip(&targets) {
            let z = f * a + b;
            let (p, q) = if z >= T::zero() {
                let e = (-z).exp();
                (e / (T::one() + e), T::one() / (T::one() + e))
            } else {
                let e = z.exp();
                (T::one() / (T::one() + e), e / (T::one() + e))
            };
            let d2 = p * q;
            h11 += f * f * d2;
            h22 += d2;
            h21 += f * d2;
            let d1 = t - p;
            g1 += f * d1;
            g2 += d1;
        }
        if g1.abs() < eps && g2.abs() < eps {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;

        let mut step = T::one();
        while step >= min_step {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = platt_objective(decision_values, &targets, na, nb);
            if nf < fval + T::of(1e-4) * step * gd {
                a = na;
                b = nb;
                fval = nf;
                break;
            }
            step = step * T::half();
        }
        if step < min_step {
            log::debug!("Platt line search stalled");
            break;
        }
    }
    Ok(PlattParams { a, b })
}
