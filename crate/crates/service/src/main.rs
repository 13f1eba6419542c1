//! `persview-serve`: runs the render service.

use std::net::SocketAddr;

use clap::Parser;
use persview::pipeline::PipelineParams;
use persview::raster::RasterOptions;
use persview_service::{router, AppState, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "persview-serve", version, about = "HTTP render service for persview sessions")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Sessions kept in memory before the least recently used is dropped.
    #[arg(long, default_value_t = 16)]
    max_sessions: usize,
    /// Encoded renders kept for repeated queries.
    #[arg(long, default_value_t = 64)]
    render_cache: usize,
    /// Allowed CORS origin (repeatable); none allows any origin.
    #[arg(long = "allow-origin")]
    allowed_origins: Vec<String>,
    #[arg(long, default_value_t = 80.0)]
    cull_deg: f64,
    /// Upload size limit in MiB.
    #[arg(long, default_value_t = 256)]
    max_upload_mib: usize,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    let args = Args::parse();
    let bands = std::env::var("PERSVIEW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let params = PipelineParams {
        cull_deg: args.cull_deg,
        raster: RasterOptions { bands },
        ..PipelineParams::default()
    };
    if let Err(e) = params.validate() {
        eprintln!("persview-serve: {e}");
        std::process::exit(2);
    }
    let state = AppState::new(ServiceConfig {
        max_sessions: args.max_sessions,
        render_cache: args.render_cache,
        params,
        allowed_origins: args.allowed_origins,
        max_upload_bytes: args.max_upload_mib << 20,
    });
    let listener = tokio::net::TcpListener::bind(args.addr).await?;
    eprintln!("persview-serve listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
