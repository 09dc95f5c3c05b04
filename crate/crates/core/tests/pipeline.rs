use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use engage_core::dataset::{ingest, write_embedding_table, write_ratings, DatasetManifest, RatingTable, SessionFiles};
use engage_core::evaluation::{comparison_table, loso_evaluate};
use engage_core::fusion::{channel_samples, train_channel, write_predictions, LabeledSample};
use engage_core::personalization::{
    personal_split, run_personalization, Oracle, PersonalizationConfig, PersonalizationSession, PoolEntry, SessionSetup, SimulatedOracle,
};
use engage_core::synthetic::{generate_synthetic_dataset, SyntheticConfig, SyntheticDataset};
use engage_core::tracklets::{assemble_sequences, build_tracklets};
use engage_core::{Channel, ClassifierSpec, EngagementLevel, Error, Family, Modality, SessionSnapshot, Thresholds};

fn small(seed: u64, students: usize, seconds: u32) -> SyntheticDataset<f64> {
    generate_synthetic_dataset(&SyntheticConfig {
        students,
        seconds,
        streams: true,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn forest(seed: u64, trees: usize) -> ClassifierSpec {
    let mut spec = ClassifierSpec::new(Family::RandomForest).with_seed(seed);
    spec.hyperparameters.trees = Some(trees);
    spec
}

fn per_rater(table: &RatingTable<f64>) -> BTreeMap<String, RatingTable<f64>> {
    let mut out: BTreeMap<String, RatingTable<f64>> = BTreeMap::new();
    for (key, raters) in table {
        for r in raters {
            out.entry(r.rater_id.clone()).or_default().insert(key.clone(), vec![r.clone()]);
        }
    }
    out
}

#[test]
fn files_round_trip_through_ingest() {
    let data = small(1, 3, 20);
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cam0.csv"), write_embedding_table(&data.embeddings).unwrap()).unwrap();
    let mut ratings = BTreeMap::new();
    for (rater, table) in per_rater(&data.ratings) {
        let name = format!("ratings_{rater}.csv");
        fs::write(dir.path().join(&name), write_ratings(&table).unwrap()).unwrap();
        ratings.insert(rater, PathBuf::from(name));
    }
    assert_eq!(ratings.len(), 2);
    let manifest = DatasetManifest {
        modality_dims: BTreeMap::from([(Modality::Attention, 4), (Modality::Affect, 4)]),
        identity_dim: None,
        sessions: vec![SessionFiles {
            session_id: "session1".into(),
            embeddings: BTreeMap::from([("cam0".to_string(), PathBuf::from("cam0.csv"))]),
            ratings,
        }],
        gallery: None,
        thresholds: Thresholds::default(),
        fps: 24,
    };
    let json = serde_json::to_string(&manifest).unwrap();
    let manifest = DatasetManifest::from_json(&json).unwrap();
    let (set, report) = ingest::<f64>(&manifest, dir.path()).unwrap();
    assert_eq!(report.dropped(), 0);
    assert_eq!(set, data.set);
}

#[test]
fn tracklets_recover_the_sequences() {
    let data = small(2, 3, 6);
    let tracklets = build_tracklets(&data.detections, &data.gallery, 0.5).unwrap();
    assert_eq!(tracklets.len(), 3);
    let mut got = assemble_sequences(&tracklets, "session1");
    let mut want: Vec<_> = data.set.items.iter().map(|i| i.sequence.clone()).collect();
    let key = |s: &engage_core::Sequence| (s.key(), s.modality);
    got.sort_by_key(key);
    want.sort_by_key(key);
    assert_eq!(got, want);
}

#[test]
fn loso_over_three_students() {
    let data = small(3, 3, 40);
    let spec = forest(0, 20);
    let a = loso_evaluate(&data.set, &spec, Channel::Attention, &Thresholds::default()).unwrap();
    let b = loso_evaluate(&data.set, &spec, Channel::ScoreFusion, &Thresholds::default()).unwrap();
    assert_eq!(a.folds.len(), 3);
    assert!(a.mean_auroc > 0.8, "{}", a.mean_auroc);
    assert_eq!(a.recompute(), (a.mean_auroc, a.std_auroc));
    assert_ne!(a.fingerprint, b.fingerprint);
    let table = comparison_table(&[a.clone(), b]);
    assert!(table.contains(&a.cell()));
    assert!(a.pooled_confusion().is_some());
}

#[test]
fn every_channel_trains_and_predicts() {
    let data = small(4, 2, 20);
    for channel in [Channel::Attention, Channel::Affect, Channel::FeatureFusion, Channel::ScoreFusion] {
        let samples = channel_samples(&data.set, channel);
        assert_eq!(samples.len(), 40);
        for family in [Family::RandomForest, Family::SvmLinear, Family::Mlp] {
            let mut spec = ClassifierSpec::new(family).with_seed(1);
            spec.hyperparameters.trees = Some(10);
            spec.hyperparameters.epochs = Some(3);
            let p = train_channel(&spec, channel, &samples).unwrap();
            let preds: Vec<_> = samples.iter().take(5).map(|s| p.predict_sequence(&s.input).unwrap()).collect();
            assert!(preds.iter().all(|x| x.frame_distributions.len() == 24 && x.aggregate.is_valid()));
            let mut csv = Vec::new();
            write_predictions(&mut csv, &preds).unwrap();
            assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 6);
            let back = engage_core::Predictor::from_json(&p.to_json().unwrap()).unwrap();
            assert_eq!(back.predict_sequence(&samples[0].input).unwrap(), preds[0]);
        }
    }
    let mut lstm = ClassifierSpec::new(Family::Lstm).with_seed(1);
    lstm.hyperparameters.hidden = Some(4);
    lstm.hyperparameters.dense = Some(4);
    lstm.hyperparameters.epochs = Some(1);
    let samples = channel_samples(&data.set, Channel::FeatureFusion);
    assert!(matches!(train_channel(&lstm, Channel::FeatureFusion, &samples), Err(Error::Mode(_))));
    let samples = channel_samples(&data.set, Channel::Attention);
    let p = train_channel(&lstm, Channel::Attention, &samples).unwrap();
    assert!(p.predict_sequence(&samples[0].input).unwrap().aggregate.is_valid());
}

struct Setup {
    base: Vec<LabeledSample<f64>>,
    pool: engage_core::personalization::UnlabeledPool<f64>,
    truth: BTreeMap<u64, EngagementLevel>,
    test: Vec<LabeledSample<f64>>,
}

fn split(seed: u64, seconds: u32, shift: f64) -> Setup {
    let data = generate_synthetic_dataset::<f64>(&SyntheticConfig {
        students: 4,
        seconds,
        shift,
        seed,
        ..Default::default()
    })
    .unwrap();
    let (mine, base): (Vec<_>, Vec<_>) = channel_samples(&data.set, Channel::Attention)
        .into_iter()
        .partition(|s| s.input.student_id() == "s00");
    let (pool, truth, test) = personal_split(mine, 0.5, seed).unwrap();
    Setup { base, pool, truth, test }
}

fn session_setup(s: &Setup, episodes: usize, batch: usize) -> SessionSetup<f64> {
    SessionSetup {
        token: "t".into(),
        spec: forest(5, 20),
        channel: Channel::Attention,
        base_training: s.base.clone(),
        pool: s.pool.clone(),
        test: s.test.clone(),
        config: PersonalizationConfig {
            episodes,
            batch,
            ..Default::default()
        },
        base_predictor: None,
    }
}

struct Failing;

impl Oracle<f64> for Failing {
    fn label(&mut self, _: &[&PoolEntry<f64>]) -> engage_core::Result<Vec<EngagementLevel>> {
        Err(Error::Oracle("annotator went home".into()))
    }
}

#[test]
fn oracle_failure_leaves_session_untouched() {
    let s = split(6, 60, 1.0);
    let mut session = PersonalizationSession::start(session_setup(&s, 2, 5)).unwrap();
    session.personalize_episode(&mut SimulatedOracle::new(s.truth.clone())).unwrap();
    let before = session.snapshot();
    let pool_before = session.pool().clone();
    assert!(matches!(session.personalize_episode(&mut Failing), Err(Error::Oracle(_))));
    assert_eq!(session.snapshot(), before);
    assert_eq!(session.pool(), &pool_before);
}

#[test]
fn snapshot_resume_matches_an_uninterrupted_run() {
    let s = split(7, 60, 1.0);
    let full = run_personalization(session_setup(&s, 3, 5), &mut SimulatedOracle::new(s.truth.clone())).unwrap();

    let mut session = PersonalizationSession::start(session_setup(&s, 3, 5)).unwrap();
    let mut oracle = SimulatedOracle::new(s.truth.clone());
    session.personalize_episode(&mut oracle).unwrap();
    let json = serde_json::to_string(&session.snapshot()).unwrap();
    drop(session);

    let snap: SessionSnapshot = serde_json::from_str(&json).unwrap();
    let mut resumed = PersonalizationSession::resume(&snap, s.base.clone(), s.pool.clone(), s.test.clone()).unwrap();
    while !resumed.is_complete() {
        resumed.personalize_episode(&mut oracle).unwrap();
    }
    assert_eq!(resumed.auroc_curve(), full.auroc_curve.as_slice());
    assert_eq!(oracle.queried, full.queried);

    let mut tampered = snap.clone();
    *tampered.auroc_curve.last_mut().unwrap() += 0.001;
    assert!(PersonalizationSession::resume(&tampered, s.base.clone(), s.pool.clone(), s.test.clone()).is_err());
}

#[test]
fn zero_episodes_and_small_pools() {
    let s = split(8, 30, 1.0);
    let out = run_personalization(session_setup(&s, 0, 10), &mut SimulatedOracle::new(s.truth.clone())).unwrap();
    assert_eq!(out.auroc_curve.len(), 1);
    assert_eq!(out.labels_used, 0);

    // 15 pooled seconds cannot feed 6 batches of 10.
    let mut oracle = SimulatedOracle::new(s.truth.clone());
    let err = run_personalization(session_setup(&s, 6, 10), &mut oracle).err().unwrap();
    assert!(matches!(err, Error::InsufficientPool { required: 60, available: 15 }));
    assert!(oracle.queried.is_empty());
}

#[test]
fn single_precision_pipeline() {
    let data = generate_synthetic_dataset::<f32>(&SyntheticConfig {
        students: 3,
        seconds: 30,
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    let report = loso_evaluate(&data.set, &forest(1, 15), Channel::FeatureFusion, &Thresholds::default()).unwrap();
    assert!(report.mean_auroc > 0.7, "{}", report.mean_auroc);
}

/// With the subject offset far larger than the noise the base model is
/// badly miscalibrated for the new student, and sixty labels fix most of it.
#[test]
fn labels_help_a_strongly_shifted_student() {
    let mut gains = Vec::new();
    for seed in 0..10 {
        let data = generate_synthetic_dataset::<f64>(&SyntheticConfig {
            shift: 6.0,
            seed,
            ..Default::default()
        })
        .unwrap();
        let (mine, base): (Vec<_>, Vec<_>) = channel_samples(&data.set, Channel::Attention)
            .into_iter()
            .partition(|s| s.input.student_id() == format!("s{:02}", seed % 8));
        let (pool, truth, test) = personal_split(mine, 0.5, seed).unwrap();
        let out = run_personalization(
            SessionSetup {
                token: "t".into(),
                spec: ClassifierSpec::new(Family::RandomForest).with_seed(seed),
                channel: Channel::Attention,
                base_training: base,
                pool,
                test,
                config: PersonalizationConfig::default(),
                base_predictor: None,
            },
            &mut SimulatedOracle::new(truth),
        )
        .unwrap();
        assert_eq!(out.auroc_curve.len(), 7);
        assert!(out.auroc_curve.windows(2).any(|w| w[0] != w[1]));
        gains.push(out.auroc_curve[6] - out.auroc_curve[0]);
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    assert!(mean >= 0.05, "mean gain {mean}, per seed {gains:?}");
}
