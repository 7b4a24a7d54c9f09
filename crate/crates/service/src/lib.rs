//! HTTP API for interactive neighborhood exploration.
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | GET | `/healthz` | | `{"status":"ok"}` |
//! | GET | `/datasets` | | `[DatasetInfo]` |
//! | POST | `/sessions` | `{"dataset":"mnist"}` | `Session` (201) |
//! | GET | `/sessions/{id}` | | `Session` |
//! | GET | `/sessions/{id}/mispredictions?limit=N` | | `MispredictionList` |
//! | PUT | `/sessions/{id}/poi` | `{"dataset_index":N}` | `PoiResponse` |
//! | POST | `/sessions/{id}/explain` | `NeighborhoodSpec` | `ExplainResponse` |
//!
//! Errors carry `{"code": ..., "message": ...}` with codes `not_found` (404),
//! `invalid_argument` (400), `invalid_state` (409), `dependency` (424) and
//! `internal` (500). Images are base64 PNG, 8-bit grayscale, 28x28.

pub mod api;
pub mod error;
pub mod store;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::routing::{get, post, put};
use axum::Router;

use morphscope_core::data::DatasetName;
use morphscope_core::workbench::{classifier_path, vae_path, Workbench, WorkbenchConfig};

pub use error::{ErrorBody, ServiceError};
use store::SessionStore;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub workbench: WorkbenchConfig,
    pub state_dir: PathBuf,
}

struct Inner {
    config: ServiceConfig,
    store: SessionStore,
    workbenches: Mutex<HashMap<DatasetName, Arc<Workbench>>>,
    session_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

/// Shared by all handlers; models are immutable once loaded.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// Opens the session store and loads every dataset whose checkpoints exist.
    pub fn new(config: ServiceConfig) -> Result<Self, ServiceError> {
        let dir = &config.workbench.checkpoint_dir;
        if !dir.is_dir() {
            return Err(ServiceError::Startup(format!(
                "checkpoint directory {} does not exist",
                dir.display()
            )));
        }
        let store = SessionStore::open(&config.state_dir)?;
        let mut workbenches = HashMap::new();
        for name in DatasetName::ALL {
            if vae_path(dir, name).exists() || classifier_path(dir, name).exists() {
                let bench = Workbench::open(&config.workbench, name)
                    .map_err(|e| ServiceError::Startup(format!("loading {name}: {e}")))?;
                log::info!("loaded {name} checkpoints");
                workbenches.insert(name, Arc::new(bench));
            }
        }
        Ok(AppState {
            inner: Arc::new(Inner {
                config,
                store,
                workbenches: Mutex::new(workbenches),
                session_locks: Mutex::new(HashMap::new()),
            }),
        })
    }

    pub fn store(&self) -> &SessionStore {
        &self.inner.store
    }

    pub fn checkpoints_present(&self, name: DatasetName) -> bool {
        let dir = &self.inner.config.workbench.checkpoint_dir;
        vae_path(dir, name).exists() && classifier_path(dir, name).exists()
    }

    /// The loaded workbench for `name`, loading it on first use.
    pub async fn workbench(&self, name: DatasetName) -> Result<Arc<Workbench>, ServiceError> {
        if let Some(bench) = self.inner.workbenches.lock().unwrap().get(&name) {
            return Ok(bench.clone());
        }
        let config = self.inner.config.workbench.clone();
        let bench = tokio::task::spawn_blocking(move || Workbench::open(&config, name))
            .await
            .map_err(|e| ServiceError::Internal(e.to_string()))?
            .map_err(|e| ServiceError::Dependency(format!("{name} checkpoints unavailable: {e}")))?;
        let mut map = self.inner.workbenches.lock().unwrap();
        Ok(map.entry(name).or_insert_with(|| Arc::new(bench)).clone())
    }

    /// Mutex serializing updates of one session.
    pub fn session_lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.inner
            .session_locks
            .lock()
            .unwrap()
            .entry(id.to_string())
            .or_default()
            .clone()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(api::healthz))
        .route("/datasets", get(api::list_datasets))
        .route("/sessions", post(api::create_session))
        .route("/sessions/{id}", get(api::get_session))
        .route("/sessions/{id}/mispredictions", get(api::list_mispredictions))
        .route("/sessions/{id}/poi", put(api::set_poi))
        .route("/sessions/{id}/explain", post(api::explain))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
