//! Read-only HTTP service over a trained checkpoint and its decoders.
//!
//! WAV endpoints return the audio as the body. Extra values travel in
//! headers: `X-Latent-Layer` on every WAV, `X-Delta-Preview` (a JSON list
//! of `{dim, score}`) on `/interpolate` and `X-Delta` (a number or `null`)
//! on `/partial_swap`.

mod api;
mod error;
mod session;

use std::net::SocketAddr;
use std::sync::Arc;

pub use api::{router, DELTA_HEADER, DELTA_PREVIEW_HEADER, LAYER_HEADER};
pub use error::{ApiError, ErrorBody};
pub use session::{Session, TOP_DIMS};

/// Bind and serve until the process is terminated.
pub async fn serve(session: Session, bind: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "inspect service listening");
    axum::serve(listener, router(Arc::new(session))).await
}
