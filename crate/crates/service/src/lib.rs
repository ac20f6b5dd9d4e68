//! JSON-over-HTTP API over a running pipeline.
//!
//! A [`Driver`] owns the pipeline state and runs steps on its own thread.
//! Handlers read the snapshot it publishes after each step and stage expert
//! verdicts, which the driver applies before the next step. The response
//! shapes are described in `schema/api.schema.json`.

pub mod api;
pub mod driver;
pub mod hub;
pub mod projection;

use std::net::SocketAddr;
use std::sync::Arc;

pub use api::router;
pub use driver::Driver;
pub use hub::{ApiSnapshot, Hub, RunStatus};

/// Serves the API until ctrl-c, then asks the driver to stop.
pub async fn serve(hub: Arc<Hub>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    let stop = Arc::clone(&hub);
    axum::serve(listener, router(hub))
        .with_graceful_shutdown(async move {
            let _ = tokio::signal::ctrl_c().await;
            stop.shutdown();
        })
        .await
}
