//! Pool-based active learning: rank unlabeled seconds by the margin between
//! their two most likely levels, ask an oracle for a batch of labels, refit,
//! and track AUROC on a frozen personal test split.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifiers::ClassifierSpec;
use crate::error::{Error, Result};
use crate::evaluation::weighted_auroc;
use crate::fusion::{train_channel, Channel, LabeledSample, Predictor, SampleInput};
use crate::level::{EngagementLevel, LabelDistribution};
use crate::scalar::Scalar;
use crate::sequence::SecondKey;

pub const DEFAULT_EPISODES: usize = 6;
pub const DEFAULT_BATCH: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct MarginQuery<T: Scalar> {
    pub pool_id: u64,
    pub margin: T,
    pub top: (EngagementLevel, EngagementLevel),
}

impl<T: Scalar> MarginQuery<T> {
    pub fn from_distribution(pool_id: u64, d: &LabelDistribution<T>) -> Self {
        Self {
            pool_id,
            margin: d.margin(),
            top: d.top_two(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PoolEntry<T: Scalar> {
    pub pool_id: u64,
    pub input: SampleInput<T>,
    pub clip_ref: String,
}

impl<T: Scalar> PoolEntry<T> {
    pub fn second(&self) -> u32 {
        self.input.key().second_index
    }
}

/// Unlabeled seconds of one student. Entries leave the pool once labeled and
/// are never offered again.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledPool<T: Scalar> {
    entries: Vec<PoolEntry<T>>,
    index: BTreeMap<u64, usize>,
    removed: BTreeSet<u64>,
}

impl<T: Scalar> UnlabeledPool<T> {
    pub fn new(entries: Vec<PoolEntry<T>>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.pool_id, i).is_some() {
                return Err(Error::Config(format!("duplicate pool_id {}", e.pool_id)));
            }
        }
        Ok(Self {
            entries,
            index,
            removed: BTreeSet::new(),
        })
    }

    pub fn remaining(&self) -> impl Iterator<Item = &PoolEntry<T>> {
        self.entries.iter().filter(|e| !self.removed.contains(&e.pool_id))
    }

    pub fn remaining_len(&self) -> usize {
        self.entries.len() - self.removed.len()
    }

    pub fn total_len(&self) -> usize {
        self.entries.len()
    }

    pub fn contains(&self, pool_id: u64) -> bool {
        self.index.contains_key(&pool_id) && !self.removed.contains(&pool_id)
    }

    pub fn get(&self, pool_id: u64) -> Option<&PoolEntry<T>> {
        self.index.get(&pool_id).map(|&i| &self.entries[i])
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.pool_id).collect()
    }

    pub fn removed(&self) -> &BTreeSet<u64> {
        &self.removed
    }

    /// Removes all of `ids` or none of them.
    pub fn remove(&mut self, ids: &[u64]) -> Result<()> {
        let bad: Vec<u64> = ids.iter().copied().filter(|&id| !self.contains(id)).collect();
        let unique: BTreeSet<u64> = ids.iter().copied().collect();
        if !bad.is_empty() || unique.len() != ids.len() {
            return Err(Error::Config(format!("cannot remove pool ids {bad:?} (unknown, removed or repeated)")));
        }
        self.removed.extend(unique);
        Ok(())
    }
}

/// Margins of every remaining pool entry under `predictor`.
pub fn margin_scores<T: Scalar>(predictor: &Predictor<T>, pool: &UnlabeledPool<T>) -> Result<Vec<MarginQuery<T>>> {
    let entries: Vec<&PoolEntry<T>> = pool.remaining().collect();
    if entries.is_empty() {
        return Err(Error::ExhaustedPool);
    }
    entries
        .par_iter()
        .map(|e| Ok(MarginQuery::from_distribution(e.pool_id, &predictor.query_distribution(&e.input)?)))
        .collect()
}

/// The `k` queries with the smallest margin, smaller pool_id first on ties.
pub fn select_batch<T: Scalar>(queries: &[MarginQuery<T>], k: usize) -> Result<Vec<u64>> {
    if k == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if queries.is_empty() {
        return Err(Error::ExhaustedPool);
    }
    let mut order: Vec<&MarginQuery<T>> = queries.iter().collect();
    order.sort_by(|a, b| {
        a.margin
            .partial_cmp(&b.margin)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.pool_id.cmp(&b.pool_id))
    });
    Ok(order.into_iter().take(k).map(|q| q.pool_id).collect())
}

/// Source of labels for queried pool entries.
pub trait Oracle<T: Scalar> {
    /// Labels for `entries`, in the same order.
    fn label(&mut self, entries: &[&PoolEntry<T>]) -> Result<Vec<EngagementLevel>>;
}

/// Answers from stored ground truth.
#[derive(Debug, Clone, Default)]
pub struct SimulatedOracle {
    truth: BTreeMap<u64, EngagementLevel>,
    pub queried: Vec<u64>,
}

impl SimulatedOracle {
    pub fn new(truth: BTreeMap<u64, EngagementLevel>) -> Self {
        Self {
            truth,
            queried: Vec::new(),
        }
    }
}

impl<T: Scalar> Oracle<T> for SimulatedOracle {
    fn label(&mut self, entries: &[&PoolEntry<T>]) -> Result<Vec<EngagementLevel>> {
        let labels = entries
            .iter()
            .map(|e| {
                self.truth
                    .get(&e.pool_id)
                    .copied()
                    .ok_or_else(|| Error::Oracle(format!("no label for pool_id {}", e.pool_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        self.queried.extend(entries.iter().map(|e| e.pool_id));
        Ok(labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Margin,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizationConfig {
    pub episodes: usize,
    pub batch: usize,
    pub strategy: Strategy,
    /// Seed for the random strategy.
    pub seed: u64,
}

impl Default for PersonalizationConfig {
    fn default() -> Self {
        Self {
            episodes: DEFAULT_EPISODES,
            batch: DEFAULT_BATCH,
            strategy: Strategy::Margin,
            seed: 0,
        }
    }
}

impl PersonalizationConfig {
    pub fn labels_needed(&self) -> usize {
        self.episodes * self.batch
    }
}

/// Everything a session needs at start.
#[derive(Debug, Clone)]
pub struct SessionSetup<T: Scalar> {
    pub token: String,
    pub spec: ClassifierSpec,
    pub channel: Channel,
    /// Person-independent training set.
    pub base_training: Vec<LabeledSample<T>>,
    pub pool: UnlabeledPool<T>,
    /// Frozen personal test split.
    pub test: Vec<LabeledSample<T>>,
    pub config: PersonalizationConfig,
    /// Model already fitted on `base_training` with `spec`; refit if absent.
    pub base_predictor: Option<Predictor<T>>,
}

#[derive(Debug, Clone)]
pub struct PersonalizationSession<T: Scalar> {
    pub token: String,
    pub student_id: String,
    pub spec: ClassifierSpec,
    pub channel: Channel,
    pub config: PersonalizationConfig,
    base_training: Vec<LabeledSample<T>>,
    test: Vec<LabeledSample<T>>,
    pool: UnlabeledPool<T>,
    labels: Vec<(u64, EngagementLevel)>,
    episode: usize,
    curve: Vec<f64>,
    predictor: Predictor<T>,
}

fn refit<T: Scalar>(
    spec: &ClassifierSpec,
    channel: Channel,
    base: &[LabeledSample<T>],
    pool: &UnlabeledPool<T>,
    labels: &[(u64, EngagementLevel)],
) -> Result<Predictor<T>> {
    let mut training = base.to_vec();
    for &(id, level) in labels {
        let entry = pool.get(id).ok_or_else(|| Error::Config(format!("unknown pool id {id}")))?;
        training.push(LabeledSample {
            input: entry.input.clone(),
            level,
        });
    }
    train_channel(spec, channel, &training)
}

fn test_auroc<T: Scalar>(predictor: &Predictor<T>, test: &[LabeledSample<T>]) -> Result<f64> {
    let dists = test
        .par_iter()
        .map(|s| predictor.predict_sequence(&s.input).map(|p| p.aggregate))
        .collect::<Result<Vec<_>>>()?;
    let actual: Vec<EngagementLevel> = test.iter().map(|s| s.level).collect();
    weighted_auroc(&dists, &actual)
}

impl<T: Scalar> PersonalizationSession<T> {
    /// Checks the pool can feed every episode, fits (or adopts) the base
    /// model and records its AUROC as the first curve point.
    pub fn start(setup: SessionSetup<T>) -> Result<Self> {
        let cfg = setup.config;
        if cfg.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if setup.pool.remaining_len() < cfg.labels_needed() {
            return Err(Error::InsufficientPool {
                required: cfg.labels_needed(),
                available: setup.pool.remaining_len(),
            });
        }
        let student_id = setup
            .pool
            .remaining()
            .next()
            .map(|e| e.input.student_id().to_string())
            .or_else(|| setup.test.first().map(|s| s.input.student_id().to_string()))
            .unwrap_or_default();
        let predictor = match setup.base_predictor {
            Some(p) => p,
            None => train_channel(&setup.spec, setup.channel, &setup.base_training)?,
        };
        let first = test_auroc(&predictor, &setup.test)?;
        Ok(Self {
            token: setup.token,
            student_id,
            spec: setup.spec,
            channel: setup.channel,
            config: cfg,
            base_training: setup.base_training,
            test: setup.test,
            pool: setup.pool,
            labels: Vec::new(),
            episode: 0,
            curve: vec![first],
            predictor,
        })
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn is_complete(&self) -> bool {
        self.episode >= self.config.episodes
    }

    pub fn auroc_curve(&self) -> &[f64] {
        &self.curve
    }

    pub fn labels(&self) -> &[(u64, EngagementLevel)] {
        &self.labels
    }

    pub fn pool(&self) -> &UnlabeledPool<T> {
        &self.pool
    }

    pub fn predictor(&self) -> &Predictor<T> {
        &self.predictor
    }

    /// Pool ids to label next; empty once every episode has run.
    pub fn prepare_batch(&self) -> Result<Vec<u64>> {
        if self.is_complete() {
            return Ok(Vec::new());
        }
        match self.config.strategy {
            Strategy::Margin => select_batch(&margin_scores(&self.predictor, &self.pool)?, self.config.batch),
            Strategy::Random => {
                let mut ids: Vec<u64> = self.pool.remaining().map(|e| e.pool_id).collect();
                if ids.is_empty() {
                    return Err(Error::ExhaustedPool);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                rng.set_stream(self.episode as u64);
                ids.shuffle(&mut rng);
                ids.truncate(self.config.batch);
                ids.sort_unstable();
                Ok(ids)
            }
        }
    }

    /// Ids in `labels` that do not match `batch` exactly once each.
    pub fn label_mismatch(batch: &[u64], labels: &[(u64, EngagementLevel)]) -> Vec<u64> {
        let wanted: BTreeSet<u64> = batch.iter().copied().collect();
        let mut seen = BTreeSet::new();
        let mut bad = BTreeSet::new();
        for &(id, _) in labels {
            if !wanted.contains(&id) || !seen.insert(id) {
                bad.insert(id);
            }
        }
        bad.extend(wanted.difference(&seen));
        bad.into_iter().collect()
    }

    /// Refit on the base set plus every personal label so far and `new`;
    /// nothing changes unless fitting and scoring both succeed.
    pub fn apply_labels(&mut self, batch: &[u64], new: &[(u64, EngagementLevel)]) -> Result<()> {
        if self.is_complete() {
            return Err(Error::Config("session is complete".into()));
        }
        let bad = Self::label_mismatch(batch, new);
        if !bad.is_empty() {
            return Err(Error::Config(format!("labels do not cover the pending batch exactly; offending pool ids {bad:?}")));
        }
        if let Some(id) = batch.iter().find(|&&id| !self.pool.contains(id)) {
            return Err(Error::Config(format!("pool id {id} is not in the pool")));
        }
        let mut labels = self.labels.clone();
        labels.extend_from_slice(new);
        let predictor = self.refit(&labels)?;
        let auroc = test_auroc(&predictor, &self.test)?;
        let mut pool = self.pool.clone();
        pool.remove(batch)?;
        self.pool = pool;
        self.labels = labels;
        self.predictor = predictor;
        self.curve.push(auroc);
        self.episode += 1;
        Ok(())
    }

    fn refit(&self, labels: &[(u64, EngagementLevel)]) -> Result<Predictor<T>> {
        refit(&self.spec, self.channel, &self.base_training, &self.pool, labels)
    }

    /// Select, query, refit. An oracle failure leaves the session untouched.
    pub fn personalize_episode(&mut self, oracle: &mut dyn Oracle<T>) -> Result<()> {
        let batch = self.prepare_batch()?;
        if batch.is_empty() {
            return Err(Error::Config("session is complete".into()));
        }
        let entries: Vec<&PoolEntry<T>> = batch
            .iter()
            .map(|id| self.pool.get(*id).expect("batch drawn from pool"))
            .collect();
        let levels = oracle.label(&entries)?;
        if levels.len() != batch.len() {
            return Err(Error::Oracle(format!(
                "oracle returned {} labels for {} queries",
                levels.len(),
                batch.len()
            )));
        }
        let labels: Vec<(u64, EngagementLevel)> = batch.iter().copied().zip(levels).collect();
        self.apply_labels(&batch, &labels)
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            token: self.token.clone(),
            student_id: self.student_id.clone(),
            spec: self.spec.clone(),
            channel: self.channel,
            config: self.config,
            episode: self.episode,
            labels: self.labels.clone(),
            auroc_curve: self.curve.clone(),
            pool_ids: self.pool.ids(),
            test_keys: self.test.iter().map(|s| s.input.key()).collect(),
        }
    }

    /// Rebuilds a session from a snapshot and the same data it was taken on.
    /// The refit model must reproduce the last recorded AUROC exactly.
    pub fn resume(
        snapshot: &SessionSnapshot,
        base_training: Vec<LabeledSample<T>>,
        pool: UnlabeledPool<T>,
        test: Vec<LabeledSample<T>>,
    ) -> Result<Self> {
        if pool.ids() != snapshot.pool_ids {
            return Err(Error::Config("pool does not match the snapshot".into()));
        }
        let keys: Vec<SecondKey> = test.iter().map(|s| s.input.key()).collect();
        if keys != snapshot.test_keys {
            return Err(Error::Config("test split does not match the snapshot".into()));
        }
        if snapshot.labels.len() != snapshot.episode * snapshot.config.batch || snapshot.auroc_curve.len() != snapshot.episode + 1 {
            return Err(Error::Config("snapshot counters are inconsistent".into()));
        }
        let mut pool = pool;
        let ids: Vec<u64> = snapshot.labels.iter().map(|&(id, _)| id).collect();
        let predictor = refit(&snapshot.spec, snapshot.channel, &base_training, &pool, &snapshot.labels)?;
        pool.remove(&ids)?;
        let auroc = test_auroc(&predictor, &test)?;
        if Some(&auroc) != snapshot.auroc_curve.last() {
            return Err(Error::Config(format!(
                "refit model scores {auroc}, snapshot recorded {:?}",
                snapshot.auroc_curve.last()
            )));
        }
        Ok(Self {
            token: snapshot.token.clone(),
            student_id: snapshot.student_id.clone(),
            spec: snapshot.spec.clone(),
            channel: snapshot.channel,
            config: snapshot.config,
            base_training,
            test,
            pool,
            labels: snapshot.labels.clone(),
            episode: snapshot.episode,
            curve: snapshot.auroc_curve.clone(),
            predictor,
        })
    }
}

/// Persisted session state. Model weights are not stored; resuming refits
/// them from the labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub token: String,
    pub student_id: String,
    pub spec: ClassifierSpec,
    pub channel: Channel,
    pub config: PersonalizationConfig,
    pub episode: usize,
    pub labels: Vec<(u64, EngagementLevel)>,
    pub auroc_curve: Vec<f64>,
    pub pool_ids: Vec<u64>,
    pub test_keys: Vec<SecondKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationOutcome {
    pub auroc_curve: Vec<f64>,
    pub labels_used: usize,
    pub queried: Vec<u64>,
}

/// Runs every configured episode against `oracle`. Fails before any
/// labeling if the pool is too small.
pub fn run_personalization<T: Scalar>(setup: SessionSetup<T>, oracle: &mut dyn Oracle<T>) -> Result<PersonalizationOutcome> {
    let mut session = PersonalizationSession::start(setup)?;
    while !session.is_complete() {
        session.personalize_episode(oracle)?;
    }
    Ok(PersonalizationOutcome {
        auroc_curve: session.curve.clone(),
        labels_used: session.labels.len(),
        queried: session.labels.iter().map(|&(id, _)| id).collect(),
    })
}

/// Splits one student's labeled seconds into an unlabeled pool (with its
/// hidden labels) and a frozen test split. `pool_fraction` of the seconds,
/// chosen by a seeded shuffle, go to the pool.
pub fn personal_split<T: Scalar>(
    samples: Vec<LabeledSample<T>>,
    pool_fraction: f64,
    seed: u64,
) -> Result<(UnlabeledPool<T>, BTreeMap<u64, EngagementLevel>, Vec<LabeledSample<T>>)> {
    if !(pool_fraction > 0.0 && pool_fraction < 1.0) {
        return Err(Error::Config(format!("pool fraction must lie in (0, 1), got {pool_fraction}")));
    }
    let mut samples = samples;
    samples.sort_by_key(|s| s.input.key());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_pool = (samples.len() as f64 * pool_fraction).round() as usize;
    let in_pool: BTreeSet<usize> = order[..n_pool].iter().copied().collect();
    let mut entries = Vec::new();
    let mut truth = BTreeMap::new();
    let mut test = Vec::new();
    for (i, s) in samples.into_iter().enumerate() {
        if in_pool.contains(&i) {
            let id = entries.len() as u64;
            let key = s.input.key();
            truth.insert(id, s.level);
            entries.push(PoolEntry {
                pool_id: id,
                clip_ref: format!("{}/{}/{}", key.session_id, key.student_id, key.second_index),
                input: s.input,
            });
        } else {
            test.push(s);
        }
    }
    Ok((UnlabeledPool::new(entries)?, truth, test))
}

pub const CURVE_COLUMNS: [&str; 3] = ["episode", "labels_used", "auroc"];

pub fn write_curve<W: Write>(out: W, curve: &[f64], batch: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_COLUMNS)?;
    for (episode, auroc) in curve.iter().enumerate() {
        w.write_record([episode.to_string(), (episode * batch).to_string(), auroc.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
