//! Click-to-refine HTTP service. Parameters are frozen at startup; every
//! request binds them into a fresh model, so sessions never share state
//! beyond the read-only weights.

mod api;
mod session;

use std::collections::HashMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::Router;
use hitlseg::data::{Dataset, Group, GroupThresholds};
use hitlseg::model::ModelParams;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

pub use api::{ImagePayload, PointPayload, PredictRequest, PredictResponse, RefineRequest, SampleInfo};
pub use session::Session;

pub const DEFAULT_PORT: u16 = 8765;

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub session_ttl: Duration,
    /// Directory served at `/` (the browser client), if any.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self { session_ttl: Duration::from_secs(3600), static_dir: None }
    }
}

pub struct AppState {
    params: ModelParams<f32>,
    fingerprint: u32,
    samples: Dataset,
    groups: std::collections::BTreeMap<usize, Group>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_session: Mutex<u64>,
    options: ServerOptions,
}

impl AppState {
    /// `samples` is the split exposed by `/api/samples` (normally test).
    pub fn new(params: ModelParams<f32>, samples: Dataset, options: ServerOptions) -> Self {
        let groups = samples.group_map(GroupThresholds::default());
        Self {
            fingerprint: params.fingerprint(),
            params,
            samples,
            groups,
            sessions: Mutex::new(HashMap::new()),
            next_session: Mutex::new(0),
            options,
        }
    }

    /// CRC32 of the parameters as they are now.
    pub fn current_fingerprint(&self) -> u32 {
        self.params.fingerprint()
    }

    /// Fingerprint recorded at construction.
    pub fn startup_fingerprint(&self) -> u32 {
        self.fingerprint
    }

    /// Drops sessions idle for longer than the TTL. Sessions whose lock is
    /// held by an in-flight request are kept.
    pub fn purge_expired(&self) {
        let ttl = self.options.session_ttl;
        let mut table = self.sessions.lock().expect("session table poisoned");
        table.retain(|_, s| s.try_lock().map(|s| s.updated.elapsed() <= ttl).unwrap_or(true));
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table poisoned").len()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = api::routes(state.clone());
    match &state.options.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until `shutdown` resolves, logging the parameter fingerprint at
/// both ends.
pub async fn serve(state: Arc<AppState>, listener: TcpListener, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    tracing::info!(
        addr = %listener.local_addr()?,
        fingerprint = format!("{:08x}", state.startup_fingerprint()),
        samples = state.samples.len(),
        "serving"
    );
    axum::serve(listener, router(state.clone())).with_graceful_shutdown(shutdown).await?;
    let end = state.current_fingerprint();
    tracing::info!(fingerprint = format!("{end:08x}"), unchanged = end == state.startup_fingerprint(), "stopped");
    Ok(())
}
