//! Runs a generated event stream through the service.

use std::time::{Duration, Instant};

use ringwatch_core::attribute::{AttributeSchema, RawRegistrationEvent, UserId};
use ringwatch_core::classifier::EdgeClassifier;
use ringwatch_core::detector::ClusterId;
use ringwatch_service::journal::ControlOp;
use ringwatch_service::metrics::MetricsSnapshot;
use ringwatch_service::policy::ActionRecord;
use ringwatch_service::service::{IngestError, StartupError};
use ringwatch_service::{Service, ServiceConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Startup(#[from] StartupError),
    #[error("event {index}: {source}")]
    Ingest { index: usize, source: IngestError },
    #[error("final batch run: {0}")]
    Batch(IngestError),
}

#[derive(Debug)]
pub struct Detection {
    pub assignments: Vec<(UserId, ClusterId)>,
    pub actions: Vec<ActionRecord>,
    pub metrics: MetricsSnapshot,
    pub elapsed: Duration,
}

/// Feeds every event in order, then runs one last batch pass so the final
/// clusters reflect the whole graph.
pub fn run_detection(
    events: &[RawRegistrationEvent],
    cfg: ServiceConfig,
    schema: AttributeSchema,
    model: Option<EdgeClassifier>,
) -> Result<Detection, DetectError> {
    let start = Instant::now();
    let mut svc = Service::new(cfg, schema, model)?;
    for (index, e) in events.iter().enumerate() {
        svc.ingest(e).map_err(|source| DetectError::Ingest { index, source })?;
    }
    let end = events.iter().map(|e| e.registered_at).max().unwrap_or(0) + 1;
    svc.control(ControlOp::BatchRun { at: end }).map_err(DetectError::Batch)?;
    Ok(Detection {
        assignments: svc.assignments(),
        actions: svc.actions().to_vec(),
        metrics: svc.metrics(),
        elapsed: start.elapsed(),
    })
}
