//! Build a smoke-scale run (or reuse it) and serve the explorer API over it.
//!
//!     cargo run --release -p latent-lens-service --example serve_smoke -- runs/smoke-serve 8080
//!     curl 'localhost:8080/api/samples?limit=2'
//!     curl -X POST localhost:8080/api/samples/0/intervene -H 'content-type: application/json' -d '{"flip_indices":[0,1]}'

use std::path::PathBuf;

use latent_lens::pipeline::{run_pipeline, RunConfig};

#[tokio::main]
async fn main() -> std::io::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "runs/smoke-serve".into()));
    let port = args.next().and_then(|p| p.parse().ok()).unwrap_or(8080);
    let run = tokio::task::spawn_blocking(move || run_pipeline(&RunConfig::smoke(dir)))
        .await
        .expect("pipeline task")
        .map_err(std::io::Error::other)?;
    println!("serving {} on port {port}", run.dir.display());
    latent_lens_service::serve(run.dir, port).await
}
