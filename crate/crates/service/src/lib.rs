//! HTTP/JSON front end for live personalization sessions. A human labels the
//! queried seconds; the service refits between batches.

pub mod api;
pub mod backend;
pub mod http;
pub mod manager;

pub use api::{ApiError, BatchItem, BatchResponse, CreateRequest, ErrorCode, LabelEntry, LabelSubmission, Progress, SessionState, SessionStatus};
pub use backend::{BaseModel, CorePersonalizer, DatasetFactory};
pub use http::{router, serve};
pub use manager::{Personalizer, SessionFactory, SessionManager, SubmitTicket};
