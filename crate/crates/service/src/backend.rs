//! Personalizers backed by the core active-learning session.

use std::collections::BTreeMap;
use std::sync::Arc;

use engage_core::classifiers::ClassifierSpec;
use engage_core::dataset::LabeledSequenceSet;
use engage_core::fusion::{channel_samples, Channel, LabeledSample, Predictor};
use engage_core::level::EngagementLevel;
use engage_core::personalization::{personal_split, PersonalizationConfig, PersonalizationSession, SessionSetup};
use engage_core::Scalar;

use crate::api::{ApiError, BatchItem, CreateRequest};
use crate::manager::{Personalizer, SessionFactory};

pub struct CorePersonalizer<T: Scalar> {
    session: PersonalizationSession<T>,
    pending: Vec<BatchItem>,
}

impl<T: Scalar> CorePersonalizer<T> {
    pub fn new(session: PersonalizationSession<T>) -> Result<Self, ApiError> {
        let pending = Self::items(&session)?;
        Ok(Self { session, pending })
    }

    fn items(session: &PersonalizationSession<T>) -> Result<Vec<BatchItem>, ApiError> {
        Ok(session
            .prepare_batch()?
            .into_iter()
            .map(|id| {
                let e = session.pool().get(id).expect("batch drawn from pool");
                BatchItem {
                    pool_id: id,
                    clip_ref: e.clip_ref.clone(),
                    second: e.second(),
                }
            })
            .collect())
    }

    pub fn session(&self) -> &PersonalizationSession<T> {
        &self.session
    }
}

impl<T: Scalar> Personalizer for CorePersonalizer<T> {
    fn pending(&self) -> &[BatchItem] {
        &self.pending
    }

    fn submit(&mut self, labels: &[(u64, EngagementLevel)]) -> Result<(), ApiError> {
        let batch: Vec<u64> = self.pending.iter().map(|b| b.pool_id).collect();
        let mut next = self.session.clone();
        next.apply_labels(&batch, labels)?;
        let pending = Self::items(&next)?;
        self.session = next;
        self.pending = pending;
        Ok(())
    }

    fn auroc_curve(&self) -> Vec<f64> {
        self.session.auroc_curve().to_vec()
    }

    fn labels_collected(&self) -> usize {
        self.session.labels().len()
    }

    fn labels_target(&self) -> usize {
        self.session.config.labels_needed()
    }

    fn is_complete(&self) -> bool {
        self.session.is_complete()
    }
}

/// A base model a session can start from.
#[derive(Debug, Clone)]
pub struct BaseModel<T: Scalar> {
    pub spec: ClassifierSpec,
    pub channel: Channel,
    /// Already fitted on every student except the one being personalized.
    /// Leave empty to refit per session.
    pub predictors: BTreeMap<String, Predictor<T>>,
}

/// Serves sessions for the students of one labeled set. Each student's
/// seconds are split into a pool the human labels and a frozen test split.
pub struct DatasetFactory<T: Scalar> {
    set: Arc<LabeledSequenceSet<T>>,
    models: BTreeMap<String, BaseModel<T>>,
    pub pool_fraction: f64,
    pub split_seed: u64,
}

impl<T: Scalar> DatasetFactory<T> {
    pub fn new(set: LabeledSequenceSet<T>, models: BTreeMap<String, BaseModel<T>>) -> Self {
        Self {
            set: Arc::new(set),
            models,
            pool_fraction: 0.5,
            split_seed: 0,
        }
    }
}

impl<T: Scalar> SessionFactory for DatasetFactory<T> {
    fn create(&self, token: &str, request: &CreateRequest) -> Result<Box<dyn Personalizer>, ApiError> {
        let model = self
            .models
            .get(&request.model_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown model {}", request.model_id)))?;
        let (mine, base): (Vec<LabeledSample<T>>, Vec<LabeledSample<T>>) = channel_samples(&self.set, model.channel)
            .into_iter()
            .partition(|s| s.input.student_id() == request.student_id);
        if mine.is_empty() {
            return Err(ApiError::not_found(format!("unknown student {}", request.student_id)));
        }
        let defaults = PersonalizationConfig::default();
        let config = PersonalizationConfig {
            episodes: request.episodes.unwrap_or(defaults.episodes),
            batch: request.batch.unwrap_or(defaults.batch),
            ..defaults
        };
        let (pool, _hidden, test) = personal_split(mine, self.pool_fraction, self.split_seed)?;
        if pool.remaining_len() < config.labels_needed() {
            return Err(ApiError::exhausted(format!(
                "pool holds {} seconds but {} labels are needed",
                pool.remaining_len(),
                config.labels_needed()
            )));
        }
        let session = PersonalizationSession::start(SessionSetup {
            token: token.to_string(),
            spec: model.spec.clone(),
            channel: model.channel,
            base_training: base,
            pool,
            test,
            config,
            base_predictor: model.predictors.get(&request.student_id).cloned(),
        })?;
        Ok(Box::new(CorePersonalizer::new(session)?))
    }
}
