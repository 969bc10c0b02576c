use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use latent_lens::pipeline::{compare_regularization, emit_bias_report, run_pipeline, RunConfig};

#[derive(Parser)]
#[command(name = "latent-lens", version, about = "Concept discovery and counterfactual rendering for a classifier's hidden layer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) the full pipeline described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Paired runs with and without the information penalty over the config's seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare the factual renders of two completed split runs.
    BiasReport {
        #[arg(long)]
        run_a: PathBuf,
        #[arg(long)]
        run_b: PathBuf,
    },
    /// Serve the read-only explorer API over a completed run.
    Serve {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

fn report(err: &dyn std::error::Error) -> ExitCode {
    eprintln!("error: {err}");
    let mut source = err.source();
    while let Some(e) = source {
        eprintln!("  caused by: {e}");
        source = e.source();
    }
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => RunConfig::from_file(&config).and_then(|c| run_pipeline(&c)).map(|run| {
            println!("metrics: {}", run.metrics_path.display());
            for p in &run.panel_paths {
                println!("panels:  {}", p.display());
            }
            if !run.trained_stages.is_empty() {
                println!("trained: {}", run.trained_stages.join(", "));
            }
        }),
        Command::Ablate { config } => RunConfig::from_file(&config)
            .and_then(|c| compare_regularization(&c))
            .map(|table| print!("{}", table.to_markdown())),
        Command::BiasReport { run_a, run_b } => emit_bias_report(&run_a, &run_b).map(|r| {
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
        }),
        Command::Serve { run, port } => {
            let rt = match tokio::runtime::Runtime::new() {
                Ok(rt) => rt,
                Err(e) => return report(&e),
            };
            return match rt.block_on(latent_lens_service::serve(run, port)) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => report(&e),
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
