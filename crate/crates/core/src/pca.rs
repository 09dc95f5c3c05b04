//! Principal component analysis keeping the leading components that explain
//! a target fraction of the training variance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::scalar::Scalar;

pub const DEFAULT_RETAINED_VARIANCE: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PcaModel<T: Scalar> {
    pub mean: Vec<T>,
    /// Orthonormal principal axes, one per row, by decreasing variance.
    pub components: Vec<Vec<T>>,
    pub explained_variance: Vec<T>,
    /// Sum of all covariance eigenvalues (the total sample variance).
    pub total_variance: T,
    pub retained_fraction: T,
}

/// Sample covariance with the `1/(n-1)` estimator, and the column means.
pub fn covariance<T: Scalar>(x: &[Vec<T>]) -> Result<(Vec<T>, Vec<Vec<T>>)> {
    let n = x.len();
    if n < 2 {
        return Err(Error::Shape(format!("covariance needs at least 2 rows, got {n}")));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("rows differ in length or are empty".into()));
    }
    let nf = T::of_usize(n);
    let mut mean = vec![T::zero(); d];
    for row in x {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let centered: Vec<Vec<T>> = x
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(&v, &m)| v - m).collect())
        .collect();
    let denom = nf - T::one();
    let upper: Vec<Vec<T>> = (0..d)
        .into_par_iter()
        .map(|i| {
            (i..d)
                .map(|j| centered.iter().map(|r| r[i] * r[j]).sum::<T>() / denom)
                .collect()
        })
        .collect();
    let mut cov = vec![vec![T::zero(); d]; d];
    for i in 0..d {
        for (off, &c) in upper[i].iter().enumerate() {
            cov[i][i + off] = c;
            cov[i + off][i] = c;
        }
    }
    Ok((mean, cov))
}

/// Fit PCA on the rows of `x`, keeping the fewest leading components whose
/// cumulative variance ratio reaches `target_fraction`.
pub fn fit_pca<T: Scalar>(x: &[Vec<T>], target_fraction: f64) -> Result<PcaModel<T>> {
    if !(target_fraction > 0.0 && target_fraction <= 1.0) {
        return Err(Error::Config(format!("target fraction {target_fraction} outside (0, 1]")));
    }
    let (mean, cov) = covariance(x)?;
    let (values, vectors) = symmetric_eigen(&cov)?;
    let values: Vec<T> = values.into_iter().map(|v| v.max(T::zero())).collect();
    let total: T = values.iter().copied().sum();
    if !(total > T::zero()) {
        return Err(Error::Degenerate("training data has zero total variance".into()));
    }
    // absorb rounding in the cumulative sum
    let slack = T::epsilon() * T::of_usize(values.len() * 4) * total;
    let goal = T::of(target_fraction) * total - slack;
    let mut cum = T::zero();
    let mut k = values.len();
    for (i, &v) in values.iter().enumerate() {
        cum += v;
        if cum >= goal {
            k = i + 1;
            break;
        }
    }
    let components: Vec<Vec<T>> = vectors.into_iter().take(k).map(orient).collect();
    let explained: Vec<T> = values[..k].to_vec();
    let retained = explained.iter().copied().sum::<T>() / total;
    Ok(PcaModel {
        mean,
        components,
        explained_variance: explained,
        total_variance: total,
        retained_fraction: retained.min(T::one()),
    })
}

/// Flip sign so the largest-magnitude coordinate is positive.
fn orient<T: Scalar>(mut v: Vec<T>) -> Vec<T> {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < T::zero() {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

impl<T: Scalar> PcaModel<T> {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    pub fn transform(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.mean.len() {
            return Err(Error::Dimension {
                expected: self.mean.len(),
                got: x.len(),
            });
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((&w, &v), &m)| w * (v - m)).sum())
            .collect())
    }

    pub fn transform_all(&self, xs: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        xs.iter().map(|x| self.transform(x)).collect()
    }

    /// Map reduced coordinates back to the input space.
    pub fn inverse_transform(&self, z: &[T]) -> Result<Vec<T>> {
        if z.len() != self.components.len() {
            return Err(Error::Dimension {
                expected: self.components.len(),
                got: z.len(),
            });
        }
        let mut out = self.mean.clone();
        for (c, &zi) in self.components.iter().zip(z) {
            for (o, &w) in out.iter_mut().zip(c) {
                *o += w * zi;
            }
        }
        Ok(out)
    }
}

/// Free-function form of [`PcaModel::transform`].
pub fn pca_transform<T: Scalar>(model: &PcaModel<T>, x: &[T]) -> Result<Vec<T>> {
    model.transform(x)
}
