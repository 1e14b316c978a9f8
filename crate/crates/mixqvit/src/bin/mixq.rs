//! Mixed-precision quantization pipeline CLI. Stages run in order:
//! synth-data -> calibrate -> importance -> sensitivity -> allocate ->
//! quantize -> eval -> report, each reading its predecessors' cached
//! artifacts. Exit codes: 0 ok, 2 config error, 3 missing artifact,
//! 4 infeasible allocation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mixqvit::config::RunConfig;
use mixqvit::pipeline::{Ablation, Pipeline};
use mixqvit::Error;

#[derive(Parser)]
#[command(name = "mixq", version, about = "Mixed-precision ViT quantization pipeline")]
struct Cli {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the model/dataset/train seeds as a family.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Report output directory (default: config output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Stage artifact directory (default: <out>/stages).
    #[arg(long, global = true)]
    stage_cache: Option<PathBuf>,

    /// Allocation objective ablation.
    #[arg(long, global = true, default_value = "omega-lambda",
          value_parser = ["omega-only", "omega-lambda"])]
    ablation: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic classification dataset.
    SynthData,
    /// Train the toy model and calibrate quantizer ranges.
    Calibrate,
    /// Score per-layer importance by relevance propagation.
    Importance,
    /// Sweep per-(kind, bit) quantization sensitivity.
    Sensitivity,
    /// Solve the exact mixed-precision bit allocation.
    Allocate,
    /// Materialize the mixed and fixed-bit quantization plans.
    Quantize,
    /// Evaluate full-precision, fixed, and mixed configurations.
    Eval,
    /// Assemble the run report and CSV side-files.
    Report,
}

fn run(cli: Cli) -> Result<(), Error> {
    let config = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    let ablation = Ablation::parse(&cli.ablation)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation `{}`", cli.ablation)))?;
    let pipeline = Pipeline::new(config, cli.out, cli.stage_cache, cli.seed, ablation)?;

    match cli.command {
        Command::SynthData => {
            let data = pipeline.synth_data()?;
            println!("synth-data: {} samples", data.len());
        }
        Command::Calibrate => {
            pipeline.calibrate()?;
            println!("calibrate: model trained, ranges fitted");
        }
        Command::Importance => {
            let table = pipeline.importance()?;
            println!("importance: {} layers scored", table.omega.len());
        }
        Command::Sensitivity => {
            let rows = pipeline.sensitivity()?;
            println!("sensitivity: {} (kind, bit) pairs swept", rows.len());
        }
        Command::Allocate => {
            let summary = pipeline.allocate()?;
            println!(
                "allocate: objective {:.6}, size {}/{}, bitops {}/{}",
                summary.objective,
                summary.size,
                summary.budget_size,
                summary.bitops,
                summary.budget_bitops
            );
        }
        Command::Quantize => {
            pipeline.quantize()?;
            println!("quantize: mixed and fixed plans written");
        }
        Command::Eval => {
            for row in pipeline.eval()? {
                println!(
                    "eval {}: accuracy {:.4}, loss {:.6}",
                    row.label, row.accuracy, row.mean_loss
                );
            }
        }
        Command::Report => {
            let report = pipeline.report()?;
            println!(
                "report: written to {} (config {})",
                pipeline.out.display(),
                &report.config_hash[..12]
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // one line, machine-parsable code first
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}] {message}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
