use std::path::PathBuf;

use clap::Parser;
use tracing_subscriber::EnvFilter;
use veil_gateway::config::GatewayConfig;
use veil_gateway::{initialize, router, AppState, Settings};

#[derive(Debug, Parser)]
#[command(
    name = "veil-gateway",
    version,
    about = "Privacy-aware routing gateway"
)]
struct Args {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `bind` from the config and `VEIL_BIND`.
    #[arg(long)]
    bind: Option<std::net::SocketAddr>,
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .init();
    let args = Args::parse();
    let mut config = match &args.config {
        Some(path) => GatewayConfig::from_path(path)?,
        None => GatewayConfig::default(),
    }
    .with_env_overrides()?;
    if let Some(bind) = args.bind {
        config.bind = bind;
    }

    let state = AppState::new(Settings::from(&config), config.max_in_flight);
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening, initializing pipeline");

    let init_state = state.clone();
    tokio::task::spawn_blocking(move || match initialize(&init_state, &config) {
        Ok(()) => {
            let v = init_state.metrics.snapshot().verifier;
            tracing::info!(verifier = ?v.map(|v| v.status), "ready");
        }
        Err(e) => {
            tracing::error!(error = %e, "initialization failed");
            std::process::exit(1);
        }
    });

    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        })
        .await?;
    Ok(())
}
