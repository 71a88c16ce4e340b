//! HTTP portal, standalone bundle server and the `rrc` command line.

pub mod api;
pub mod auth;
pub mod bundle;
pub mod error;
pub mod preview;

use tokio::net::TcpListener;

/// Serves `app` on `listener` until ctrl-c.
pub async fn serve(listener: TcpListener, app: axum::Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
