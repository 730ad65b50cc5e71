//! Control plane for the sparring agent: run lifecycle, decision routing and
//! the HTTP/SSE API consumed by the operator console.

pub mod api;
pub mod registry;
pub mod runs;
pub mod snapshot;

pub use api::{check_bind, router, AppState};
pub use registry::Registry;
pub use runs::RunManager;
pub use snapshot::RunSnapshot;

/// Serve the API on an already bound listener until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
