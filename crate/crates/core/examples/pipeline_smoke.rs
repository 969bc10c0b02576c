//! Whole pipeline at smoke scale: a bias-split pair, resumption, and the
//! regularization ablation table.
//!
//!     cargo run --release --example pipeline_smoke -- /tmp/latent-lens-smoke

use std::path::PathBuf;

use latent_lens::pipeline::{compare_regularization, run_pipeline, BiasReport, RunConfig};

fn main() -> latent_lens::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/smoke".into()));

    let pair = RunConfig {
        bias_split: Some(0.9),
        ..RunConfig::smoke(root.join("bias"))
    };
    let run = run_pipeline(&pair)?;
    println!("trained stages: {:?}", run.trained_stages);
    let again = run_pipeline(&pair)?;
    println!("second call trained: {:?} (everything resumed)", again.trained_stages);
    let report: BiasReport = serde_json::from_str(&std::fs::read_to_string(root.join("bias/bias_report.json"))?)?;
    println!(
        "factual B of positives: split A {:+.3}, split B {:+.3}, significant {}",
        report.split_a.bias.factual.positive, report.split_b.bias.factual.positive, report.significant
    );

    let ablation = RunConfig {
        seeds: vec![0, 1],
        ..RunConfig::smoke(root.join("ablation"))
    };
    print!("{}", compare_regularization(&ablation)?.to_markdown());
    Ok(())
}
