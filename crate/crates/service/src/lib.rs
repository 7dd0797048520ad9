//! HTTP and WebSocket service that hosts incremental ProMP learning sessions.
//!
//! Each session owns a stepwise learner. Demo uploads are applied one at a
//! time in arrival order; reads use the last published snapshot and never
//! wait for an update.

mod api;
pub mod session;

use std::net::SocketAddr;
use std::sync::Arc;

pub use api::{router, ApiError, AppState};
pub use session::{ServiceConfig, SessionError, Sessions};

/// Restores persisted sessions and builds the application state.
pub fn app_state(config: ServiceConfig) -> Result<AppState, SessionError> {
    Ok(Arc::new(Sessions::restore(config)?))
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    let state = app_state(config).map_err(|e| std::io::Error::other(e.to_string()))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
