//! Session registry and the per-token state machine.
//!
//! Mutations of one token go through a single mutex (single writer); readers
//! load the last published `SessionState` without locking. A label
//! submission is split in two so training can run off the request path:
//! `begin_submit` validates and moves the session to `retraining`,
//! `finish_submit` trains and publishes the result.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};

use arc_swap::ArcSwap;
use engage_core::level::EngagementLevel;
use engage_core::personalization::PersonalizationSession;

use crate::api::{ApiError, BatchItem, BatchResponse, CreateRequest, Progress, SessionState, SessionStatus};

/// A personalization run as seen by the service.
pub trait Personalizer: Send {
    /// Items awaiting labels; empty once complete.
    fn pending(&self) -> &[BatchItem];
    /// Refit with labels for the pending batch. Must leave `self` unchanged
    /// on error.
    fn submit(&mut self, labels: &[(u64, EngagementLevel)]) -> Result<(), ApiError>;
    fn auroc_curve(&self) -> Vec<f64>;
    fn labels_collected(&self) -> usize;
    fn labels_target(&self) -> usize;
    fn is_complete(&self) -> bool;
}

/// Builds personalizers for create requests.
pub trait SessionFactory: Send + Sync {
    fn create(&self, token: &str, request: &CreateRequest) -> Result<Box<dyn Personalizer>, ApiError>;
}

struct Inner {
    status: SessionStatus,
    /// Taken out while a refit is running.
    personalizer: Option<Box<dyn Personalizer>>,
    /// Pool ids of every batch that has been trained on.
    trained: BTreeSet<u64>,
    trainings: usize,
    transitions: Vec<(SessionStatus, SessionStatus)>,
    /// Last view of the personalizer, kept for publishing while it is out.
    progress: Progress,
    curve: Vec<f64>,
}

struct Slot {
    token: String,
    published: ArcSwap<SessionState>,
    inner: Mutex<Inner>,
}

impl Slot {
    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn publish(&self, inner: &Inner) {
        let pending = match (inner.status, &inner.personalizer) {
            (SessionStatus::AwaitingLabels, Some(p)) => p.pending().to_vec(),
            _ => Vec::new(),
        };
        self.published.store(Arc::new(SessionState {
            token: self.token.clone(),
            status: inner.status,
            pending_batch: pending,
            progress: inner.progress,
            auroc_curve: inner.curve.clone(),
        }));
    }

    fn refresh(inner: &mut Inner) {
        if let Some(p) = &inner.personalizer {
            inner.progress = Progress {
                collected: p.labels_collected(),
                target: p.labels_target(),
            };
            inner.curve = p.auroc_curve();
        }
    }

    fn transition(inner: &mut Inner, next: SessionStatus) {
        debug_assert!(inner.status.may_become(next), "{:?} -> {next:?}", inner.status);
        inner.transitions.push((inner.status, next));
        inner.status = next;
    }
}

/// Work accepted by `begin_submit`; hand it to `finish_submit`, typically
/// on a blocking thread.
pub struct SubmitTicket {
    slot: Arc<Slot>,
    personalizer: Box<dyn Personalizer>,
    labels: Vec<(u64, EngagementLevel)>,
}

impl SubmitTicket {
    pub fn token(&self) -> &str {
        &self.slot.token
    }
}

pub struct SessionManager {
    factory: Box<dyn SessionFactory>,
    sessions: Mutex<HashMap<String, Arc<Slot>>>,
}

impl SessionManager {
    pub fn new(factory: impl SessionFactory + 'static) -> Self {
        Self {
            factory: Box::new(factory),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    fn slot(&self, token: &str) -> Result<Arc<Slot>, ApiError> {
        self.sessions
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .get(token)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session with token {token}")))
    }

    pub fn create(&self, request: &CreateRequest) -> Result<SessionState, ApiError> {
        let token = uuid::Uuid::new_v4().simple().to_string();
        let personalizer = self.factory.create(&token, request)?;
        let status = if personalizer.is_complete() {
            SessionStatus::Complete
        } else {
            SessionStatus::AwaitingLabels
        };
        let mut inner = Inner {
            status,
            personalizer: Some(personalizer),
            trained: BTreeSet::new(),
            trainings: 0,
            transitions: Vec::new(),
            progress: Progress { collected: 0, target: 0 },
            curve: Vec::new(),
        };
        Slot::refresh(&mut inner);
        let slot = Arc::new(Slot {
            token: token.clone(),
            published: ArcSwap::from_pointee(SessionState {
                token: token.clone(),
                status,
                pending_batch: Vec::new(),
                progress: inner.progress,
                auroc_curve: Vec::new(),
            }),
            inner: Mutex::new(inner),
        });
        slot.publish(&slot.lock());
        let state = (**slot.published.load()).clone();
        self.sessions.lock().unwrap_or_else(|p| p.into_inner()).insert(token, slot);
        log::info!("session {} created for student {}", state.token, request.student_id);
        Ok(state)
    }

    pub fn status(&self, token: &str) -> Result<SessionState, ApiError> {
        Ok((**self.slot(token)?.published.load()).clone())
    }

    pub fn batch(&self, token: &str) -> Result<BatchResponse, ApiError> {
        let state = self.status(token)?;
        if state.status == SessionStatus::Retraining {
            return Err(ApiError::conflict("session is retraining"));
        }
        Ok(BatchResponse {
            token: state.token,
            status: state.status,
            items: state.pending_batch,
        })
    }

    /// Validates `labels` against the pending batch and claims the session
    /// for retraining. Errors leave the session untouched.
    pub fn begin_submit(&self, token: &str, labels: Vec<(u64, EngagementLevel)>) -> Result<SubmitTicket, ApiError> {
        let slot = self.slot(token)?;
        let mut inner = slot.lock();
        match inner.status {
            SessionStatus::AwaitingLabels => {}
            SessionStatus::Retraining => return Err(ApiError::conflict("a submission for this session is already retraining")),
            SessionStatus::Complete => return Err(ApiError::conflict("session is complete")),
            SessionStatus::Aborted => return Err(ApiError::conflict("session was aborted")),
        }
        if !labels.is_empty() && labels.iter().all(|(id, _)| inner.trained.contains(id)) {
            return Err(ApiError::conflict("these labels were already submitted"));
        }
        let personalizer = inner.personalizer.take().expect("awaiting session holds its personalizer");
        let batch: Vec<u64> = personalizer.pending().iter().map(|b| b.pool_id).collect();
        let bad = PersonalizationSession::<f64>::label_mismatch(&batch, &labels);
        if !bad.is_empty() {
            inner.personalizer = Some(personalizer);
            return Err(ApiError::validation("labels must cover the pending batch exactly once each").with_pool_ids(bad));
        }
        Slot::transition(&mut inner, SessionStatus::Retraining);
        slot.publish(&inner);
        drop(inner);
        Ok(SubmitTicket {
            slot,
            personalizer,
            labels,
        })
    }

    /// Runs the refit claimed by `ticket` and publishes the outcome.
    pub fn finish_submit(&self, ticket: SubmitTicket) -> Result<SessionState, ApiError> {
        let SubmitTicket {
            slot,
            mut personalizer,
            labels,
        } = ticket;
        let outcome = personalizer.submit(&labels);
        let mut inner = slot.lock();
        if outcome.is_ok() {
            inner.trainings += 1;
            inner.trained.extend(labels.iter().map(|&(id, _)| id));
        }
        let complete = personalizer.is_complete();
        inner.personalizer = Some(personalizer);
        Slot::refresh(&mut inner);
        if inner.status == SessionStatus::Retraining {
            let next = if outcome.is_ok() && complete {
                SessionStatus::Complete
            } else {
                SessionStatus::AwaitingLabels
            };
            Slot::transition(&mut inner, next);
        }
        slot.publish(&inner);
        let state = (**slot.published.load()).clone();
        drop(inner);
        outcome.map(|_| state)
    }

    pub fn submit(&self, token: &str, labels: Vec<(u64, EngagementLevel)>) -> Result<SessionState, ApiError> {
        let ticket = self.begin_submit(token, labels)?;
        self.finish_submit(ticket)
    }

    /// Stops a session. A refit already running still finishes and its
    /// episode counts, but no further batches are issued.
    pub fn abort(&self, token: &str) -> Result<SessionState, ApiError> {
        let slot = self.slot(token)?;
        let mut inner = slot.lock();
        if !inner.status.may_become(SessionStatus::Aborted) {
            return Err(ApiError::conflict(format!("cannot abort a session that is {:?}", inner.status)));
        }
        Slot::transition(&mut inner, SessionStatus::Aborted);
        slot.publish(&inner);
        Ok((**slot.published.load()).clone())
    }

    /// Every status change so far, oldest first.
    pub fn transitions(&self, token: &str) -> Result<Vec<(SessionStatus, SessionStatus)>, ApiError> {
        Ok(self.slot(token)?.lock().transitions.clone())
    }

    /// Number of successful refits.
    pub fn trainings(&self, token: &str) -> Result<usize, ApiError> {
        Ok(self.slot(token)?.lock().trainings)
    }
}
