//! Random forests of Gini-split CART trees grown on bootstrap resamples.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::level::{EngagementLevel, LabelDistribution, LEVELS};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node<T: Scalar> {
    /// Class frequencies of the training samples that reached the leaf.
    Leaf { distribution: [T; LEVELS] },
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: T,
        left: usize,
        right: usize,
    },
}

/// Nodes stored in an arena; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DecisionTree<T: Scalar> {
    pub nodes: Vec<Node<T>>,
}

impl<T: Scalar> DecisionTree<T> {
    pub fn leaf(distribution: [T; LEVELS]) -> Self {
        Self {
            nodes: vec![Node::Leaf { distribution }],
        }
    }

    pub fn leaf_distribution(&self, x: &[T]) -> [T; LEVELS] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { distribution } => return *distribution,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go<T: Scalar>(t: &DecisionTree<T>, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RandomForest<T: Scalar> {
    pub trees: Vec<DecisionTree<T>>,
    pub input_dim: usize,
}

impl<T: Scalar> RandomForest<T> {
    pub fn from_trees(trees: Vec<DecisionTree<T>>, input_dim: usize) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::Config("forest needs at least one tree".into()));
        }
        Ok(Self { trees, input_dim })
    }

    /// Mean of the trees' leaf distributions.
    pub fn predict_distribution(&self, x: &[T]) -> Result<LabelDistribution<T>> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let mut acc = [T::zero(); LEVELS];
        for t in &self.trees {
            for (a, p) in acc.iter_mut().zip(t.leaf_distribution(x)) {
                *a += p;
            }
        }
        let n = T::of_usize(self.trees.len());
        Ok(LabelDistribution(acc.map(|a| a / n)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestParams {
    pub trees: usize,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Features examined per split; `None` means `sqrt(d)`.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            trees: 100,
            max_depth: None,
            min_leaf: 1,
            max_features: None,
            seed: 0,
        }
    }
}

fn gini(counts: &[usize; LEVELS], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / nf).powi(2)).sum::<f64>()
}

struct Grower<'a, T: Scalar> {
    x: &'a [Vec<T>],
    y: &'a [usize],
    params: &'a ForestParams,
    max_features: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node<T>>,
}

struct SplitChoice<T> {
    feature: usize,
    threshold: T,
    score: f64,
}

impl<T: Scalar> Grower<'_, T> {
    fn grow(&mut self, samples: Vec<usize>, depth: usize) -> usize {
        let mut counts = [0usize; LEVELS];
        for &i in &samples {
            counts[self.y[i]] += 1;
        }
        let n = samples.len();
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_capped = self.params.max_depth.is_some_and(|m| depth >= m);
        let slot = self.nodes.len();
        let leaf = Node::Leaf {
            distribution: counts.map(|c| T::of_usize(c) / T::of_usize(n.max(1))),
        };
        self.nodes.push(leaf);
        if pure || depth_capped || n < 2 * self.params.min_leaf {
            return slot;
        }
        let Some(best) = self.best_split(&samples) else {
            return slot;
        };
        let (left, right): (Vec<usize>, Vec<usize>) = samples
            .into_iter()
            .partition(|&i| self.x[i][best.feature] <= best.threshold);
        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        self.nodes[slot] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: l,
            right: r,
        };
        slot
    }

    /// Examines at least `max_features` randomly ordered features, and keeps
    /// going until one admits a valid split.
    fn best_split(&mut self, samples: &[usize]) -> Option<SplitChoice<T>> {
        let d = self.x[0].len();
        let mut features: Vec<usize> = (0..d).collect();
        features.shuffle(&mut self.rng);
        let n = samples.len();
        let min_leaf = self.params.min_leaf.max(1);
        let mut best: Option<SplitChoice<T>> = None;
        let mut sorted: Vec<(T, usize)> = Vec::with_capacity(n);
        for (examined, &f) in features.iter().enumerate() {
            if examined >= self.max_features && best.is_some() {
                break;
            }
            sorted.clear();
            sorted.extend(samples.iter().map(|&i| (self.x[i][f], self.y[i])));
            sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
            let mut total = [0usize; LEVELS];
            for &(_, c) in &sorted {
                total[c] += 1;
            }
            let mut left = [0usize; LEVELS];
            for k in 0..n - 1 {
                left[sorted[k].1] += 1;
                let nl = k + 1;
                if sorted[k].0 == sorted[k + 1].0 || nl < min_leaf || n - nl < min_leaf {
                    continue;
                }
                let right = [total[0] - left[0], total[1] - left[1], total[2] - left[2]];
                let score = (nl as f64 * gini(&left, nl) + (n - nl) as f64 * gini(&right, n - nl)) / n as f64;
                if best.as_ref().is_none_or(|b| score < b.score) {
                    let (a, b) = (sorted[k].0, sorted[k + 1].0);
                    let mut threshold = (a + b) * T::half();
                    if threshold >= b || threshold < a {
                        threshold = a;
                    }
                    best = Some(SplitChoice {
                        feature: f,
                        threshold,
                        score,
                    });
                }
            }
        }
        best
    }
}

/// Grow one CART tree on the given sample indices.
pub fn fit_tree<T: Scalar>(
    x: &[Vec<T>],
    y: &[usize],
    samples: Vec<usize>,
    params: &ForestParams,
    rng: ChaCha8Rng,
) -> DecisionTree<T> {
    let d = x[0].len();
    let max_features = params
        .max_features
        .unwrap_or_else(|| ((d as f64).sqrt().floor() as usize).max(1))
        .clamp(1, d);
    let mut g = Grower {
        x,
        y,
        params,
        max_features,
        rng,
        nodes: Vec::new(),
    };
    g.grow(samples, 0);
    DecisionTree { nodes: g.nodes }
}

/// Random generator of tree `index` in a forest seeded with `seed`.
pub fn tree_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn fit_random_forest<T: Scalar>(
    x: &[Vec<T>],
    y: &[EngagementLevel],
    params: &ForestParams,
) -> Result<RandomForest<T>> {
    if x.is_empty() {
        return Err(Error::Shape("random forest needs training samples".into()));
    }
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("forest inputs must be non-empty rows of equal length".into()));
    }
    if params.trees == 0 {
        return Err(Error::Config("forest needs at least one tree".into()));
    }
    let labels: Vec<usize> = y.iter().map(|l| l.index()).collect();
    let n = x.len();
    let trees = (0..params.trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(params.seed, t);
            let samples: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            fit_tree(x, &labels, samples, params, rng)
        })
        .collect();
    RandomForest::from_trees(trees, d)
}
