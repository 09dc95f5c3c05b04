//! Worked examples: the library against the oracles.

use crate::oracles::*;
use engage_core::classifiers::forest::{fit_random_forest, DecisionTree, ForestParams, RandomForest};
use engage_core::classifiers::lstm::Lstm;
use engage_core::classifiers::mlp::Mlp;
use engage_core::classifiers::platt::platt_calibrate;
use engage_core::classifiers::svm::{dual_objective, kkt_residual, solve_dual, BinarySvm, Kernel};
use engage_core::dataset::{icc_absolute_agreement, RaterSeries};
use engage_core::evaluation::{confusion_matrix, weighted_auroc};
use engage_core::fusion::{fuse_scores, majority_vote};
use engage_core::level::{EngagementLevel, LabelDistribution};
use engage_core::pca::fit_pca;
use engage_core::tracklets::{assign_identity, Detection, GalleryEntry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[test]
fn icc_matches_anova_table() {
    let a = [0.0, 1.0, 2.0, 3.0];
    let b = [0.5, 1.5, 2.5, 3.5];
    // 3.5 lies outside the rating scale, so build the series directly.
    let series = |id: &str, v: &[f64]| RaterSeries { rater_id: id.into(), values: v.iter().enumerate().map(|(i, &x)| (i as u32, x)).collect() };
    let ra = series("a", &a);
    let rb = series("b", &b);
    let got = icc_absolute_agreement(&ra, &rb).unwrap();
    assert!((got - icc_anova(&a, &b)).abs() < 1e-12);
    assert!((got - 80.0 / 83.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let a: Vec<f64> = (0..15).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = a.iter().map(|x: &f64| (x * 0.8 + rng.random_range(-0.3..0.3)).clamp(-2.0, 2.0)).collect();
        let got = icc_absolute_agreement(&RaterSeries::from_slice("a", &a).unwrap(), &RaterSeries::from_slice("b", &b).unwrap()).unwrap();
        assert!((got - icc_anova(&a, &b)).abs() < 1e-10);
    }
}

#[test]
fn identity_matches_pairwise_scan() {
    let gallery = vec![("s1".to_string(), vec![vec![1.0, 0.0, 0.0]]), ("s2".to_string(), vec![vec![0.0, 1.0, 0.0]])];
    let entries: Vec<GalleryEntry<f64>> = gallery.iter().map(|(id, v)| GalleryEntry::new(id.clone(), v.clone()).unwrap()).collect();
    // cos to s1 = 0.8, cos to s2 = 0.6
    let det = Detection {
        session_id: "x".into(),
        camera_id: "c".into(),
        frame_index: 0,
        identity_vector: vec![0.8, 0.6, 0.0],
        modality_vectors: BTreeMap::new(),
    };
    let got = assign_identity(&det, &entries, 0.3).unwrap().unwrap();
    let (id, sim) = best_cosine(&det.identity_vector, &gallery).unwrap();
    assert_eq!(got.student_id, "s1");
    assert_eq!(got.student_id, id);
    assert!((got.similarity - sim).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gallery: Vec<(String, Vec<Vec<f64>>)> = (0..6)
        .map(|i| (format!("s{i}"), (0..3).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()))
        .collect();
    let entries: Vec<GalleryEntry<f64>> = gallery.iter().map(|(id, v)| GalleryEntry::new(id.clone(), v.clone()).unwrap()).collect();
    for _ in 0..100 {
        let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let det = Detection { identity_vector: q.clone(), ..det.clone() };
        let got = assign_identity(&det, &entries, -1.0).unwrap().unwrap();
        let (id, sim) = best_cosine(&q, &gallery).unwrap();
        assert_eq!(got.student_id, id);
        assert!((got.similarity - sim).abs() < 1e-12);
    }
}

#[test]
fn pca_matches_jacobi_on_random_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<Vec<f64>> = (0..50)
        .map(|_| {
            let z: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            (0..8).map(|j| z[j] * (j + 1) as f64 + 0.3 * z[(j + 1) % 8]).collect()
        })
        .collect();
    let (vals, vecs) = jacobi_eigen(&covariance(&x));
    let model = fit_pca(&x, 1.0).unwrap();
    assert_eq!(model.output_dim(), 8);
    for k in 0..8 {
        assert!((model.explained_variance[k] - vals[k]).abs() < 1e-6, "eigenvalue {k}");
        let dot: f64 = model.components[k].iter().zip(&vecs[k]).map(|(a, b)| a * b).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-6, "eigenvector {k}");
    }
    let lib_cov = covariance(&x);
    let (_, core_cov) = engage_core::pca::covariance(&x).unwrap();
    for i in 0..8 {
        for j in 0..8 {
            assert!((lib_cov[i][j] - core_cov[i][j]).abs() < 1e-10);
        }
    }

    // Projected training data has diagonal covariance equal to the eigenvalues.
    let z = model.transform_all(&x).unwrap();
    let cz = covariance(&z);
    for i in 0..8 {
        for j in 0..8 {
            let want = if i == j { vals[i] } else { 0.0 };
            assert!((cz[i][j] - want).abs() < 1e-6);
        }
    }
}

fn battery() -> Vec<(Vec<Vec<f64>>, Vec<bool>, Kernel<f64>, f64)> {
    let xor = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]];
    vec![
        (xor, vec![false, false, true, true], Kernel::Rbf { gamma: 1.0 }, 10.0),
        (vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![3.0, 3.0], vec![4.0, 3.0]], vec![false, false, true, true], Kernel::Linear, 1.0),
        (vec![vec![0.0], vec![0.0], vec![1.0]], vec![true, false, true], Kernel::Linear, 1.0),
        (vec![vec![0.0, 1.0], vec![1.0, 2.0], vec![2.0, 0.5], vec![3.0, 3.0], vec![1.5, 1.5], vec![0.5, 2.5]], vec![true, false, true, false, true, false], Kernel::Rbf { gamma: 0.5 }, 2.0),
        (vec![vec![-1.0], vec![-0.5], vec![0.2], vec![0.4], vec![1.0]], vec![false, true, false, true, true], Kernel::Linear, 0.5),
    ]
}

#[test]
fn svm_dual_matches_enumeration() {
    for (x, labels, kernel, c) in battery() {
        let y: Vec<f64> = labels.iter().map(|&p| if p { 1.0 } else { -1.0 }).collect();
        let gram = kernel.gram(&x);
        let sol = solve_dual(&gram, &y, c, 1e-3).unwrap();
        let (best, _) = svm_dual_optimum(&gram, &y, c);
        let got = dual_objective(&gram, &y, &sol.alpha);
        assert!((got - best).abs() < 1e-3, "objective {got} vs {best}");
        assert!(kkt_residual(&gram, &y, &sol.alpha, sol.bias, c) <= 1e-3);
    }
}

#[test]
fn xor_is_separated() {
    let (x, labels, kernel, c) = battery().remove(0);
    let svm = BinarySvm::fit(&x, &labels, kernel, c, 1e-3).unwrap();
    for (xi, &l) in x.iter().zip(&labels) {
        assert_eq!(svm.decision(xi) > 0.0, l);
    }
}

#[test]
fn platt_matches_newton() {
    let f = [-2.0, -1.0, 1.0, 2.0];
    let labels = [false, false, true, true];
    let p = platt_calibrate(&f, &labels).unwrap();
    let (a, b) = platt_newton(&f, &labels);
    assert!(p.b.abs() < 1e-2);
    assert!((p.a - a).abs() < 1e-4 && (p.b - b).abs() < 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let n = rng.random_range(6..30);
        let labels: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
        let f: Vec<f64> = labels.iter().map(|&l| if l { 0.8 } else { -0.6 } + rng.random_range(-1.5..1.5)).collect();
        let p = platt_calibrate(&f, &labels).unwrap();
        let (a, b) = platt_newton(&f, &labels);
        assert!((p.a - a).abs() < 1e-4 && (p.b - b).abs() < 1e-4, "{p:?} vs {a} {b}");
    }
}

#[test]
fn forest_is_mean_of_trees() {
    let forest = RandomForest::from_trees(
        vec![
            DecisionTree::leaf([1.0, 0.0, 0.0]),
            DecisionTree::leaf([0.5, 0.5, 0.0]),
            DecisionTree::leaf([0.0, 1.0, 0.0]),
        ],
        2,
    )
    .unwrap();
    let got = forest.predict_distribution(&[0.0, 0.0]).unwrap();
    assert_eq!(got.0, [0.5, 0.5, 0.0]);
    assert_eq!(got.0, forest_mean(&forest, &[0.0, 0.0]));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let y: Vec<EngagementLevel> = x.iter().map(|r| EngagementLevel::ALL[usize::from(r[0] > 0.0) + usize::from(r[1] > 0.3)]).collect();
    let f = fit_random_forest(&x, &y, &ForestParams { trees: 7, seed: 4, ..Default::default() }).unwrap();
    for _ in 0..50 {
        let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let got = f.predict_distribution(&q).unwrap().0;
        let want = forest_mean(&f, &q);
        for k in 0..3 {
            assert!((got[k] - want[k]).abs() < 1e-15);
        }
    }
}

fn mlp_check(seed: u64, n: usize, d: usize, hidden: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let mut m = Mlp::<f64>::zeros(d, hidden);
    for p in m.params.iter_mut() {
        *p = rng.random_range(-0.8..0.8);
    }
    let batch: Vec<usize> = (0..n).collect();
    let (_, grad) = m.loss_and_gradient(&x, &y, &batch);
    let probe = m.clone();
    let numeric = finite_difference(&m.params, 1e-5, |p| {
        let mut q = probe.clone();
        q.params.copy_from_slice(p);
        q.loss(&x, &y, &batch)
    });
    relative_error(&grad, &numeric)
}

fn lstm_check(seed: u64, n: usize, d: usize, steps: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|_| (0..steps).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
        .collect();
    let y: Vec<usize> = (0..n).map(|i| (i + 1) % 3).collect();
    let mut m = Lstm::<f64>::zeros(d, 4, 2, 3);
    for p in m.params.iter_mut() {
        *p = rng.random_range(-0.7..0.7);
    }
    let batch: Vec<usize> = (0..n).collect();
    let (_, grad) = m.loss_and_gradient(&x, &y, &batch);
    let probe = m.clone();
    let numeric = finite_difference(&m.params, 1e-5, |p| {
        let mut q = probe.clone();
        q.params.copy_from_slice(p);
        q.loss_and_gradient(&x, &y, &batch).0
    });
    relative_error(&grad, &numeric)
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    assert!(mlp_check(1, 5, 4, 6) < 1e-4);
}

#[test]
fn lstm_gradient_matches_finite_differences() {
    assert!(lstm_check(1, 2, 3, 24) < 1e-4);
}

#[test]
fn auroc_matches_pair_counting() {
    let scores = [
        [0.7, 0.2, 0.1],
        [0.4, 0.4, 0.2],
        [0.2, 0.5, 0.3],
        [0.3, 0.3, 0.4],
        [0.1, 0.3, 0.6],
        [0.4, 0.2, 0.4],
    ];
    let actual = [0, 0, 1, 1, 2, 2];
    let d: Vec<LabelDistribution<f64>> = scores.iter().map(|s| LabelDistribution::new(*s).unwrap()).collect();
    let y: Vec<EngagementLevel> = actual.iter().map(|&i| EngagementLevel::ALL[i]).collect();
    let got = weighted_auroc(&d, &y).unwrap();
    assert!((got - weighted_auroc_pairs(&scores, &actual)).abs() < 1e-12);
}

#[test]
fn confusion_matches_tally() {
    use EngagementLevel::*;
    let actual = [Low, Low, Low, Low, Medium, Medium, Medium, High, High, High, High, High];
    let predicted = [Low, Medium, Low, High, Medium, Medium, Low, High, High, Medium, High, Low];
    // Tallied by hand:
    // low    -> low 2, medium 1, high 1
    // medium -> low 1, medium 2
    // high   -> low 1, medium 1, high 3
    let m = confusion_matrix(&predicted, &actual).unwrap();
    assert_eq!(m.counts, [[2, 1, 1], [1, 2, 0], [1, 1, 3]]);
    assert_eq!(m.rows[0], [0.5, 0.25, 0.25]);
    assert_eq!(m.priors, [4.0 / 12.0, 3.0 / 12.0, 5.0 / 12.0]);
}

#[test]
fn fused_mean_and_vote_rule() {
    let f = fuse_scores(
        &LabelDistribution::new([0.4, 0.6, 0.0]).unwrap(),
        &LabelDistribution::new([0.5, 0.1, 0.4]).unwrap(),
    );
    let hand = [(0.4 + 0.5) / 2.0, (0.6 + 0.1) / 2.0, (0.0 + 0.4) / 2.0];
    assert_eq!(f.0, hand);
    assert_eq!(f.argmax(), EngagementLevel::Low);

    // 12 low / 12 high with summed masses 13.1 vs 12.4. Those totals exceed 24 so no
    // set of 24 probability vectors produces them; the rule itself is checked on the raw
    // masses, and the library on a feasible instance with the same gap (12.1 vs 11.4).
    let mut levels = vec![0usize; 12];
    levels.extend([2usize; 12]);
    let raw: Vec<[f64; 3]> = (0..24).map(|_| [13.1 / 24.0, 0.0, 12.4 / 24.0]).collect();
    assert_eq!(vote_by_rule(&levels, &raw), 0);

    let dists: Vec<[f64; 3]> = (0..24).map(|_| [12.1 / 24.0, 0.5 / 24.0, 11.4 / 24.0]).collect();
    let want = vote_by_rule(&levels, &dists);
    assert_eq!(want, 0);
    let lv: Vec<EngagementLevel> = levels.iter().map(|&i| EngagementLevel::ALL[i]).collect();
    let ld: Vec<LabelDistribution<f64>> = dists.iter().map(|d| LabelDistribution::new(*d).unwrap()).collect();
    assert_eq!(majority_vote(&lv, &ld).unwrap().index(), want);

    // Flip the masses and the tie goes the other way.
    let flipped: Vec<LabelDistribution<f64>> = dists.iter().map(|d| LabelDistribution::new([d[2], d[1], d[0]]).unwrap()).collect();
    assert_eq!(majority_vote(&lv, &flipped).unwrap(), EngagementLevel::High);
}
