//! HTTP backend for soft concept elicitation.
//!
//! Serves stimuli as PNG images, hands out annotation sessions, records soft
//! group annotations to a durable JSON-Lines log and answers live
//! intervention queries against trained models. Models are loaded once and
//! only ever read.

pub mod api;
pub mod error;
pub mod image;
pub mod journal;
pub mod session;
pub mod state;

use axum::http::HeaderValue;
use axum::Router;
use tower_http::cors::{Any, CorsLayer};

pub use api::{resolve_masses, InterveneRequest, InterveneResponse, Prediction, DEFAULT_MASS};
pub use error::{Result, ServiceError};
pub use journal::{AnnotationRecord, Appended, Journal};
pub use session::{Session, SessionStore};
pub use state::{AppState, ServiceConfig};

pub fn router(state: AppState, cors_origin: Option<&str>) -> Result<Router> {
    let app = api::routes(state);
    Ok(match cors_origin {
        None => app,
        Some("*") => app.layer(CorsLayer::new().allow_origin(Any).allow_methods(Any).allow_headers(Any)),
        Some(origin) => {
            let origin = HeaderValue::from_str(origin).map_err(|e| ServiceError::invalid("cors_origin", e.to_string()))?;
            app.layer(CorsLayer::new().allow_origin(origin).allow_methods(Any).allow_headers(Any))
        }
    })
}

/// Loads everything in `cfg` and serves on `listener` until the process ends.
pub async fn serve(cfg: &ServiceConfig, listener: tokio::net::TcpListener) -> Result<()> {
    let state = AppState::open(cfg)?;
    let app = router(state, cfg.cors_origin.as_deref())?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}
