//! HTTP service over a trained checkpoint, the disease knowledge base and
//! the service-request log.

pub mod error;
pub mod requests;
pub mod routes;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use leafscan_core::checkpoint::{self, CheckpointError};
use leafscan_core::kb::{KbError, KnowledgeBase, LabelAudit};
use leafscan_core::pipeline::DetectOptions;
use thiserror::Error;

pub use routes::{router, AppState, DiagnosisResponse, DiseaseVerdict, SharedState};
use store::{RequestStore, StoreError};

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_MAX_BODY_BYTES: usize = 16 * 1024 * 1024;

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub model: PathBuf,
    pub kb: PathBuf,
    pub store: PathBuf,
    pub max_body_bytes: usize,
    pub detect: DetectOptions,
}

#[derive(Debug, Error)]
pub enum StartupError {
    #[error("checkpoint {0} does not exist")]
    MissingCheckpoint(PathBuf),
    #[error("cannot load checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("cannot load knowledge base: {0}")]
    Kb(#[from] KbError),
    #[error("cannot open request store: {0}")]
    Store(#[from] StoreError),
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
}

/// Loads checkpoint, KB and request log, and audits the checkpoint labels
/// against the KB. Fails rather than serving with anything missing.
pub fn load_state(config: &ServeConfig) -> Result<(AppState, LabelAudit), StartupError> {
    if !config.model.is_file() {
        return Err(StartupError::MissingCheckpoint(config.model.clone()));
    }
    let (model, model_crc) = checkpoint::load(&config.model)?;
    let kb = KnowledgeBase::load(&config.kb)?;
    let (store, warnings) = RequestStore::open(&config.store)?;
    for w in &warnings {
        tracing::warn!("{w}");
    }
    let audit = kb.audit_labels(model.labels().iter().map(String::as_str));
    for label in &audit.mapped {
        tracing::info!(label, "label resolved");
    }
    for label in &audit.healthy {
        tracing::info!(label, "label resolved as healthy");
    }
    for label in &audit.unmapped {
        tracing::warn!(label, "label unmapped in knowledge base");
    }
    let state = AppState {
        model,
        model_crc,
        kb,
        store: Mutex::new(store),
        detect: config.detect,
        max_body_bytes: config.max_body_bytes,
    };
    Ok((state, audit))
}

async fn shutdown_signal() {
    if tokio::signal::ctrl_c().await.is_err() {
        std::future::pending::<()>().await;
    }
}

/// Binds, reports the bound address through `on_ready`, then serves until
/// interrupted.
pub async fn serve(
    state: AppState,
    host: &str,
    port: u16,
    on_ready: impl FnOnce(SocketAddr),
) -> Result<(), StartupError> {
    let addr = format!("{host}:{port}");
    let bind_err = |source| StartupError::Bind {
        addr: addr.clone(),
        source,
    };
    let listener = tokio::net::TcpListener::bind(&addr).await.map_err(bind_err)?;
    on_ready(listener.local_addr().map_err(bind_err)?);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(shutdown_signal())
        .await
        .map_err(bind_err)
}
