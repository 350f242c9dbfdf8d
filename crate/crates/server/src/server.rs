//! Running the HTTP service.

use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;

use crate::api::{open_app, router, AppState};
use crate::config::ServiceConfig;

fn snapshot(state: &AppState) {
    if let Err(e) = state.snapshot_now() {
        tracing::error!(error = %e, "snapshot failed");
    }
}

async fn snapshot_loop(state: Arc<AppState>, every: Duration) {
    let mut ticker = tokio::time::interval(every);
    ticker.tick().await;
    let mut last = state.engine.state().event_count;
    loop {
        ticker.tick().await;
        let count = state.engine.state().event_count;
        if count != last {
            let st = state.clone();
            if tokio::task::spawn_blocking(move || snapshot(&st))
                .await
                .is_err()
            {
                tracing::error!("snapshot task panicked");
            }
            last = count;
        }
    }
}

async fn shutdown_signal() {
    if let Err(e) = tokio::signal::ctrl_c().await {
        tracing::error!(error = %e, "cannot listen for shutdown signal");
        std::future::pending::<()>().await;
    }
}

pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let state = open_app(&config)?;
    let listener = tokio::net::TcpListener::bind(&config.bind)
        .await
        .with_context(|| format!("cannot bind {} (is the port already in use?)", config.bind))?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    let snapshots = tokio::spawn(snapshot_loop(
        state.clone(),
        Duration::from_secs(config.snapshot_interval_secs),
    ));
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown_signal())
        .await?;
    snapshots.abort();
    snapshot(&state);
    Ok(())
}
