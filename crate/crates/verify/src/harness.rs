use engage_core::classifiers::forest::{DecisionTree, Node, RandomForest};
use engage_core::classifiers::lstm::Lstm;
use engage_core::classifiers::mlp::Mlp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracles::{finite_difference, relative_error};

pub const FD_STEP: f64 = 1e-5;

/// Relative error between the analytic MLP gradient and central differences
/// at a random parameter point.
pub fn mlp_gradient_error(seed: u64, n: usize, d: usize, hidden: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let mut m = Mlp::<f64>::zeros(d, hidden);
    for p in m.params.iter_mut() {
        *p = rng.random_range(-0.8..0.8);
    }
    let batch: Vec<usize> = (0..n).collect();
    let (_, grad) = m.loss_and_gradient(&x, &y, &batch);
    let probe = m.clone();
    let numeric = finite_difference(&m.params, FD_STEP, |p| {
        let mut q = probe.clone();
        q.params.copy_from_slice(p);
        q.loss(&x, &y, &batch)
    });
    relative_error(&grad, &numeric)
}

/// Same check for the LSTM over `steps`-long sequences.
pub fn lstm_gradient_error(seed: u64, n: usize, d: usize, steps: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|_| (0..steps).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
        .collect();
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let mut m = Lstm::<f64>::zeros(d, 4, 2, 3);
    for p in m.params.iter_mut() {
        *p = rng.random_range(-0.7..0.7);
    }
    let batch: Vec<usize> = (0..n).collect();
    let (_, grad) = m.loss_and_gradient(&x, &y, &batch);
    let probe = m.clone();
    let numeric = finite_difference(&m.params, FD_STEP, |p| {
        let mut q = probe.clone();
        q.params.copy_from_slice(p);
        q.loss_and_gradient(&x, &y, &batch).0
    });
    relative_error(&grad, &numeric)
}

fn random_distribution(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let w: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Any point of the probability simplex, including edges and vertices.
pub fn random_simplex_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    match rng.random_range(0..10) {
        0 => {
            let mut p = [0.0; 3];
            p[rng.random_range(0..3)] = 1.0;
            p
        }
        1 => {
            let a = rng.random_range(0..3);
            let t: f64 = rng.random();
            let mut p = [0.0; 3];
            p[a] = t;
            p[(a + 1) % 3] = 1.0 - t;
            p
        }
        2 => [1.0 / 3.0; 3],
        _ => random_distribution(rng),
    }
}

/// A hand-built tree over `d` features, up to `depth` levels of splits.
pub fn random_tree(rng: &mut ChaCha8Rng, d: usize, depth: usize) -> DecisionTree<f64> {
    fn grow(rng: &mut ChaCha8Rng, nodes: &mut Vec<Node<f64>>, d: usize, depth: usize) -> usize {
        let at = nodes.len();
        if depth == 0 || rng.random_bool(0.3) {
            nodes.push(Node::Leaf {
                distribution: random_distribution(rng),
            });
            return at;
        }
        nodes.push(Node::Leaf { distribution: [0.0; 3] });
        let feature = rng.random_range(0..d);
        let threshold = rng.random_range(-1.0..1.0);
        let left = grow(rng, nodes, d, depth - 1);
        let right = grow(rng, nodes, d, depth - 1);
        nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
    let mut nodes = Vec::new();
    grow(rng, &mut nodes, d, depth);
    DecisionTree { nodes }
}

pub fn random_forest(rng: &mut ChaCha8Rng, d: usize) -> RandomForest<f64> {
    let n = rng.random_range(1..8);
    let trees = (0..n).map(|_| random_tree(rng, d, 4)).collect();
    RandomForest::from_trees(trees, d).expect("trees are well formed")
}
