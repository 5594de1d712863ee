//! Network surfaces for sonarkit: a TCP emulator of the scanning sonar and
//! an HTTP API over a directory of scans and annotations.

pub mod api;
pub mod emulator;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use sonarkit::simulator::PoolScene;
use tokio::net::TcpListener;

pub use api::{router, ApiState};
pub use emulator::{EmulatorClient, EmulatorConfig};

/// Runs the HTTP API and, if `emulator` is given, the device emulator
/// until either listener fails.
pub async fn serve(
    http: SocketAddr,
    emulator: Option<(SocketAddr, PoolScene, EmulatorConfig)>,
    data_dir: PathBuf,
) -> std::io::Result<()> {
    let state = ApiState::open(data_dir)?;
    let http_listener = TcpListener::bind(http).await?;
    log::info!("http api on {}", http_listener.local_addr()?);
    let api = axum::serve(http_listener, router(state));
    match emulator {
        Some((addr, scene, cfg)) => {
            let listener = TcpListener::bind(addr).await?;
            log::info!("device emulator on {}", listener.local_addr()?);
            tokio::select! {
                r = api => r,
                r = emulator::serve(listener, Arc::new(scene), cfg) => r,
            }
        }
        None => api.await,
    }
}
