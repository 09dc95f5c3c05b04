//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use engage_verify::harness::*;
use engage_verify::oracles::*;
use engage_core::classifiers::forest::{fit_random_forest, ForestParams};
use engage_core::classifiers::svm::{dual_objective, kkt_residual, solve_dual, BinarySvm, Kernel};
use engage_core::evaluation::{loso_evaluate, student_hash, weighted_auroc};
use engage_core::fusion::{channel_samples, train_channel, LabeledSample};
use engage_core::level::{discretize_engagement, EngagementLevel, LabelDistribution, Thresholds};
use engage_core::personalization::{
    personal_split, run_personalization, select_batch, MarginQuery, PersonalizationConfig, SessionSetup, SimulatedOracle, Strategy,
};
use engage_core::synthetic::{generate_synthetic_dataset, SyntheticConfig};
use engage_core::{Channel, ClassifierSpec, Family};
use engage_service::{ApiError, BatchItem, CreateRequest, ErrorCode, Personalizer, SessionFactory, SessionManager, SessionStatus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome { ok, detail: detail.into() }
}

fn discretization() -> Outcome {
    let t = Thresholds::default();
    let mut wrong = Vec::new();
    for k in -2000i32..=2000 {
        let v = k as f64 / 1000.0;
        let want = if k <= 350 {
            EngagementLevel::Low
        } else if k <= 650 {
            EngagementLevel::Medium
        } else {
            EngagementLevel::High
        };
        if discretize_engagement(v, &t).ok() != Some(want) {
            wrong.push(v);
        }
    }
    let bounds = discretize_engagement(0.35, &t).ok() == Some(EngagementLevel::Low)
        && discretize_engagement(0.65, &t).ok() == Some(EngagementLevel::Medium)
        && discretize_engagement(2.001, &t).is_err()
        && discretize_engagement(-2.001, &t).is_err();
    outcome(wrong.is_empty() && bounds, format!("4001 grid points, {} wrong, boundaries ok: {bounds}", wrong.len()))
}

fn margin_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bad_margins = 0;
    for _ in 0..1000 {
        let p = random_simplex_point(&mut rng);
        let d = LabelDistribution::new(p).unwrap();
        if d.margin() != sorted_margin(&p) {
            bad_margins += 1;
        }
    }
    let mut bad_batches = 0;
    let mut pools = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=500);
        let k = rng.random_range(1..=n.min(20));
        // Coarse margins so ties are common.
        let raw: Vec<(u64, f64)> = (0..n)
            .map(|_| (rng.random_range(0..10_000u64), rng.random_range(0..50) as f64 / 50.0))
            .collect::<std::collections::BTreeMap<_, _>>()
            .into_iter()
            .collect();
        let queries: Vec<MarginQuery<f64>> = raw
            .iter()
            .map(|&(id, m)| MarginQuery {
                pool_id: id,
                margin: m,
                top: (EngagementLevel::Low, EngagementLevel::Medium),
            })
            .collect();
        if select_batch(&queries, k).unwrap() != smallest_margins(&raw, k) {
            bad_batches += 1;
        }
        pools += 1;
    }
    outcome(
        bad_margins == 0 && bad_batches == 0,
        format!("1000 distributions, {bad_margins} margin mismatches; {pools} pools, {bad_batches} batch mismatches"),
    )
}

fn gradients() -> Outcome {
    let mut worst_mlp: f64 = 0.0;
    let mut worst_lstm: f64 = 0.0;
    for seed in 0..20 {
        worst_mlp = worst_mlp.max(mlp_gradient_error(seed, 5, 4, 6));
        worst_lstm = worst_lstm.max(lstm_gradient_error(seed, 2, 3, 24));
    }
    outcome(
        worst_mlp < 1e-4 && worst_lstm < 1e-4,
        format!("20 points each, worst relative error mlp {worst_mlp:.2e}, lstm {worst_lstm:.2e}"),
    )
}

fn svm_battery() -> Vec<(Vec<Vec<f64>>, Vec<bool>, Kernel<f64>, f64)> {
    let xor = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]];
    let mut battery = vec![
        (xor.clone(), vec![false, false, true, true], Kernel::Rbf { gamma: 1.0 }, 10.0),
        (xor, vec![false, false, true, true], Kernel::Rbf { gamma: 0.5 }, 1.0),
        (vec![vec![0.0], vec![0.0], vec![1.0]], vec![true, false, true], Kernel::Linear, 1.0),
        (vec![vec![0.0, 0.0], vec![0.0, 0.0]], vec![true, false], Kernel::Linear, 1.0),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..24 {
        let n = 2 + i % 5;
        let d = 1 + i % 3;
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        y[0] = true;
        y[1] = false;
        let kernel = if i % 2 == 0 {
            Kernel::Linear
        } else {
            Kernel::Rbf { gamma: rng.random_range(0.2..2.0) }
        };
        battery.push((x, y, kernel, [0.1, 1.0, 10.0][i % 3]));
    }
    battery
}

fn svm_oracle() -> Outcome {
    let battery = svm_battery();
    let mut worst_gap: f64 = 0.0;
    let mut worst_kkt: f64 = 0.0;
    for (x, labels, kernel, c) in &battery {
        let y: Vec<f64> = labels.iter().map(|&p| if p { 1.0 } else { -1.0 }).collect();
        let gram = kernel.gram(x);
        let sol = solve_dual(&gram, &y, *c, 1e-3).unwrap();
        let (best, _) = svm_dual_optimum(&gram, &y, *c);
        worst_gap = worst_gap.max((dual_objective(&gram, &y, &sol.alpha) - best).abs());
        worst_kkt = worst_kkt.max(kkt_residual(&gram, &y, &sol.alpha, sol.bias, *c));
    }
    let (x, labels, kernel, c) = &battery[0];
    let svm = BinarySvm::fit(x, labels, *kernel, *c, 1e-3).unwrap();
    let xor_ok = x.iter().zip(labels).all(|(xi, &l)| (svm.decision(xi) > 0.0) == l);
    outcome(
        worst_gap <= 1e-3 && worst_kkt <= 1e-3 && xor_ok,
        format!("{} problems, worst objective gap {worst_gap:.2e}, worst KKT residual {worst_kkt:.2e}, XOR separated: {xor_ok}", battery.len()),
    )
}

fn auroc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut problems = 0;
    while problems < 200 {
        let n = rng.random_range(2..=30);
        let actual: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        if actual.iter().collect::<BTreeSet<_>>().len() < 2 {
            continue;
        }
        // Coarse scores so ties show up.
        let scores: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let w = [rng.random_range(1..6) as f64, rng.random_range(1..6) as f64, rng.random_range(1..6) as f64];
                let s: f64 = w.iter().sum();
                w.map(|v| v / s)
            })
            .collect();
        let d: Vec<LabelDistribution<f64>> = scores.iter().map(|s| LabelDistribution::new(*s).unwrap()).collect();
        let y: Vec<EngagementLevel> = actual.iter().map(|&i| EngagementLevel::ALL[i]).collect();
        worst = worst.max((weighted_auroc(&d, &y).unwrap() - weighted_auroc_pairs(&scores, &actual)).abs());
        problems += 1;
    }
    let y = [EngagementLevel::Low, EngagementLevel::Medium, EngagementLevel::High, EngagementLevel::Low];
    let perfect: Vec<LabelDistribution<f64>> = y.iter().map(|&l| LabelDistribution::point_mass(l)).collect();
    let constant = vec![LabelDistribution::<f64>::uniform(); 4];
    let p = weighted_auroc(&perfect, &y).unwrap();
    let c = weighted_auroc(&constant, &y).unwrap();
    outcome(
        worst <= 1e-12 && p == 1.0 && c == 0.5,
        format!("200 problems, worst difference {worst:.2e}; perfect {p}, constant {c}"),
    )
}

fn forest_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let d = rng.random_range(1..5);
        let forest = random_forest(&mut rng, d);
        for _ in 0..40 {
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
            let got = forest.predict_distribution(&q).unwrap().0;
            let want = forest_mean(&forest, &q);
            for k in 0..3 {
                worst = worst.max((got[k] - want[k]).abs());
            }
        }
    }
    let x: Vec<Vec<f64>> = (0..120).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let y: Vec<EngagementLevel> = x.iter().map(|r| EngagementLevel::ALL[usize::from(r[0] > 0.0) + usize::from(r[1] > 0.4)]).collect();
    let params = ForestParams {
        trees: 25,
        seed: 11,
        ..Default::default()
    };
    let a = fit_random_forest(&x, &y, &params).unwrap();
    let b = fit_random_forest(&x, &y, &params).unwrap();
    let identical = a == b && format!("{a:?}") == format!("{b:?}");
    let c = fit_random_forest(&x, &y, &ForestParams { seed: 12, ..params }).unwrap();
    outcome(
        worst <= 1e-12 && identical && a != c,
        format!("50 forests, worst difference {worst:.2e}; same seed identical: {identical}"),
    )
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn small_forest(seed: u64) -> ClassifierSpec {
    let mut spec = ClassifierSpec::new(Family::RandomForest).with_seed(seed);
    spec.hyperparameters.trees = Some(30);
    spec
}

fn protocol_guard() -> Outcome {
    let data = generate_synthetic_dataset::<f64>(&SyntheticConfig {
        students: 5,
        seconds: 60,
        seed: 21,
        ..Default::default()
    })
    .unwrap();
    let spec = small_forest(2);
    let report = loso_evaluate(&data.set, &spec, Channel::Attention, &Thresholds::default()).unwrap();
    let samples = channel_samples(&data.set, Channel::Attention);
    let everyone: BTreeSet<String> = samples.iter().map(|s| s.input.student_id().to_string()).collect();
    let mut leaks = 0;
    let mut fold_gap: f64 = 0.0;
    for fold in &report.folds {
        let others: BTreeSet<String> = everyone.iter().filter(|s| **s != fold.student_id).map(|s| student_hash(s)).collect();
        if fold.training_student_hashes.contains(&student_hash(&fold.student_id)) || fold.training_student_hashes != others {
            leaks += 1;
        }
        // Refit the fold independently and score it by pair counting.
        let train: Vec<LabeledSample<f64>> = samples.iter().filter(|s| s.input.student_id() != fold.student_id).cloned().collect();
        let test: Vec<&LabeledSample<f64>> = samples.iter().filter(|s| s.input.student_id() == fold.student_id).collect();
        let model = train_channel(&spec, Channel::Attention, &train).unwrap();
        let scores: Vec<[f64; 3]> = test.iter().map(|s| model.predict_sequence(&s.input).unwrap().aggregate.0).collect();
        let actual: Vec<usize> = test.iter().map(|s| s.level.index()).collect();
        fold_gap = fold_gap.max((weighted_auroc_pairs(&scores, &actual) - fold.auroc).abs());
    }
    let (mean, std) = mean_std(&report.folds.iter().map(|f| f.auroc).collect::<Vec<_>>());
    let agg_gap = (mean - report.mean_auroc).abs().max((std - report.std_auroc).abs());
    outcome(
        report.folds.len() == 5 && leaks == 0 && agg_gap <= 1e-12 && fold_gap <= 1e-12,
        format!(
            "{} folds, {leaks} leaking; fold AUROC gap {fold_gap:.1e}; mean/std gap {agg_gap:.1e} ({:.3} ± {:.3})",
            report.folds.len(),
            report.mean_auroc,
            report.std_auroc
        ),
    )
}

const SEEDS: u64 = 10;
const STUDENTS: usize = 8;

fn personalization_gain(seed: u64, strategy: Strategy) -> (f64, f64) {
    let data = generate_synthetic_dataset::<f64>(&SyntheticConfig {
        shift: 2.0,
        seed,
        ..Default::default()
    })
    .unwrap();
    let (mine, base): (Vec<_>, Vec<_>) = channel_samples(&data.set, Channel::Attention)
        .into_iter()
        .partition(|s| s.input.student_id() == format!("s{:02}", seed as usize % STUDENTS));
    let (pool, truth, test) = personal_split(mine, 0.5, seed).unwrap();
    let setup = SessionSetup {
        token: format!("seed{seed}"),
        spec: ClassifierSpec::new(Family::RandomForest).with_seed(seed),
        channel: Channel::Attention,
        base_training: base,
        pool,
        test,
        config: PersonalizationConfig {
            strategy,
            seed,
            ..Default::default()
        },
        base_predictor: None,
    };
    let out = run_personalization(setup, &mut SimulatedOracle::new(truth)).unwrap();
    assert_eq!(out.auroc_curve.len(), 7);
    assert_eq!(out.labels_used, 60);
    (out.auroc_curve[0], *out.auroc_curve.last().unwrap())
}

fn end_to_end() -> Outcome {
    let mut base = Vec::new();
    for seed in 0..SEEDS {
        let data = generate_synthetic_dataset::<f64>(&SyntheticConfig { seed, ..Default::default() }).unwrap();
        let spec = ClassifierSpec::new(Family::RandomForest).with_seed(seed);
        base.push(loso_evaluate(&data.set, &spec, Channel::Attention, &Thresholds::default()).unwrap().mean_auroc);
    }
    let base_mean = base.iter().sum::<f64>() / SEEDS as f64;
    let mut margin = Vec::new();
    let mut random = Vec::new();
    for seed in 0..SEEDS {
        let (first, last) = personalization_gain(seed, Strategy::Margin);
        margin.push(last - first);
        let (first, last) = personalization_gain(seed, Strategy::Random);
        random.push(last - first);
    }
    let gain = margin.iter().sum::<f64>() / SEEDS as f64;
    let random_gain = random.iter().sum::<f64>() / SEEDS as f64;
    outcome(
        base_mean >= 0.9 && gain >= 0.05,
        format!(
            "base LOSO AUROC {base_mean:.4} (need >= 0.9); mean gain after 60 labels {gain:+.4} (need >= 0.05); random queries {random_gain:+.4}; per-seed gains {:?}",
            margin.iter().map(|g| format!("{g:+.3}")).collect::<Vec<_>>()
        ),
    )
}

/// Service-side stand-in that counts refits.
struct Counting {
    episodes: usize,
    batch: usize,
    done: usize,
    pending: Vec<BatchItem>,
}

impl Counting {
    fn items(done: usize, batch: usize) -> Vec<BatchItem> {
        (0..batch as u64)
            .map(|i| {
                let id = (done * batch) as u64 + i;
                BatchItem {
                    pool_id: id,
                    clip_ref: format!("clip{id}"),
                    second: id as u32,
                }
            })
            .collect()
    }
}

impl Personalizer for Counting {
    fn pending(&self) -> &[BatchItem] {
        &self.pending
    }
    fn submit(&mut self, _: &[(u64, EngagementLevel)]) -> Result<(), ApiError> {
        self.done += 1;
        self.pending = if self.done < self.episodes { Self::items(self.done, self.batch) } else { Vec::new() };
        Ok(())
    }
    fn auroc_curve(&self) -> Vec<f64> {
        vec![0.5; self.done + 1]
    }
    fn labels_collected(&self) -> usize {
        self.done * self.batch
    }
    fn labels_target(&self) -> usize {
        self.episodes * self.batch
    }
    fn is_complete(&self) -> bool {
        self.done >= self.episodes
    }
}

struct CountingFactory;

impl SessionFactory for CountingFactory {
    fn create(&self, _: &str, r: &CreateRequest) -> Result<Box<dyn Personalizer>, ApiError> {
        let (episodes, batch) = (r.episodes.unwrap_or(6), r.batch.unwrap_or(10));
        Ok(Box::new(Counting {
            episodes,
            batch,
            done: 0,
            pending: Counting::items(0, batch),
        }))
    }
}

/// Every ordering of `k` clients' (begin, finish) steps.
fn interleavings(k: usize) -> Vec<Vec<usize>> {
    fn go(left: &mut [usize], acc: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left.iter().all(|&l| l == 0) {
            out.push(acc.clone());
            return;
        }
        for c in 0..left.len() {
            if left[c] > 0 {
                left[c] -= 1;
                acc.push(c);
                go(left, acc, out);
                acc.pop();
                left[c] += 1;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut vec![2; k], &mut Vec::new(), &mut out);
    out
}

#[derive(Clone, Copy)]
enum Labels {
    /// Each client submits the batch it saw at session start.
    Stale,
    /// Each client submits whatever is pending when it begins.
    Fresh,
}

/// Runs one schedule; returns (illegal transitions, refits, distinct batches trained).
fn run_schedule(order: &[usize], episodes: usize, labels: Labels, abort_at: Option<usize>) -> Result<(usize, usize, usize), String> {
    let m = SessionManager::new(CountingFactory);
    let created = m
        .create(&CreateRequest {
            student_id: "s".into(),
            model_id: "m".into(),
            episodes: Some(episodes),
            batch: Some(2),
        })
        .map_err(|e| e.to_string())?;
    let token = created.token.clone();
    let first: Vec<(u64, EngagementLevel)> = created.pending_batch.iter().map(|b| (b.pool_id, EngagementLevel::High)).collect();
    let clients = order.iter().max().map_or(0, |c| c + 1);
    let mut tickets: Vec<Option<engage_service::SubmitTicket>> = (0..clients).map(|_| None).collect();
    let mut begun = vec![false; clients];
    let mut trained_batches = BTreeSet::new();
    let mut successes = 0;
    for (step, &c) in order.iter().enumerate() {
        if abort_at == Some(step) {
            let _ = m.abort(&token);
        }
        if !begun[c] {
            begun[c] = true;
            let l = match labels {
                Labels::Stale => first.clone(),
                Labels::Fresh => m.status(&token).unwrap().pending_batch.iter().map(|b| (b.pool_id, EngagementLevel::Low)).collect(),
            };
            let before = m.status(&token).unwrap();
            match m.begin_submit(&token, l.clone()) {
                Ok(t) => {
                    tickets[c] = Some(t);
                    trained_batches.insert(l.iter().map(|p| p.0).collect::<Vec<_>>());
                }
                Err(e) => {
                    if !matches!(e.code, ErrorCode::Conflict | ErrorCode::Validation) {
                        return Err(format!("unexpected error {e}"));
                    }
                    if m.status(&token).unwrap() != before {
                        return Err("rejected submit changed the session".into());
                    }
                }
            }
        } else if let Some(t) = tickets[c].take() {
            m.finish_submit(t).map_err(|e| e.to_string())?;
            successes += 1;
        }
    }
    let transitions = m.transitions(&token).unwrap();
    let illegal = transitions.iter().filter(|(a, b)| !a.may_become(*b)).count();
    let state = m.status(&token).unwrap();
    let pending_ok = (state.status == SessionStatus::AwaitingLabels) == !state.pending_batch.is_empty();
    if !pending_ok {
        return Err(format!("pending batch inconsistent with status {:?}", state.status));
    }
    let trainings = m.trainings(&token).unwrap();
    if trainings != successes {
        return Err(format!("{trainings} refits for {successes} accepted submissions"));
    }
    Ok((illegal, trainings, trained_batches.len()))
}

fn service_interleavings() -> Outcome {
    let mut schedules = 0;
    let mut illegal = 0;
    let mut double = 0;
    let mut errors = Vec::new();
    for k in 1..=3 {
        for order in interleavings(k) {
            for labels in [Labels::Stale, Labels::Fresh] {
                for episodes in [1, 2, 6] {
                    for abort_at in std::iter::once(None).chain((0..order.len()).map(Some)) {
                        schedules += 1;
                        match run_schedule(&order, episodes, labels, abort_at) {
                            Ok((bad, trainings, batches)) => {
                                illegal += bad;
                                if trainings != batches {
                                    double += 1;
                                }
                                if matches!(labels, Labels::Stale) && trainings > 1 {
                                    double += 1;
                                }
                            }
                            Err(e) => errors.push(e),
                        }
                    }
                }
            }
        }
    }
    outcome(
        illegal == 0 && double == 0 && errors.is_empty(),
        format!(
            "{schedules} schedules of up to 3 concurrent submits, {illegal} illegal transitions, {double} batches trained more than once, {} other failures{}",
            errors.len(),
            errors.first().map(|e| format!(" (first: {e})")).unwrap_or_default()
        ),
    )
}

fn main() {
    let criteria: Vec<(&str, Duration, fn() -> Outcome)> = vec![
        ("discretization", Duration::from_secs(1), discretization),
        ("margin-fidelity", Duration::from_secs(5), margin_fidelity),
        ("gradient-oracles", Duration::from_secs(60), gradients),
        ("svm-oracle", Duration::from_secs(60), svm_oracle),
        ("auroc-oracle", Duration::from_secs(5), auroc_oracle),
        ("forest-contract", Duration::from_secs(30), forest_contract),
        ("protocol-guard", Duration::from_secs(60), protocol_guard),
        ("end-to-end-synthetic", Duration::from_secs(600), end_to_end),
        ("service-state-machine", Duration::from_secs(30), service_interleavings),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let ok = result.ok && elapsed <= budget;
        if !ok {
            failed += 1;
        }
        println!(
            "{} {name}: {} [{:.2}s of {}s]",
            if ok { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
