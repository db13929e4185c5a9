//! `mnc`: gradient checks, data generation, training, inference,
//! evaluation and timing for the instance segmentation cascade.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use report::RunReport;

#[derive(Parser, Debug)]
#[command(name = "mnc", version, about = "Multi-task network cascade for instance segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Options,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Finite-difference checks of the warp, masking, loss and end-to-end gradients.
    Gradcheck,
    /// Generates a synthetic dataset from a spec file.
    Gendata,
    /// Trains a 3- or 5-stage cascade, writing a checkpoint and a loss log.
    Train,
    /// Runs 5-stage inference with mask voting, writing a prediction file.
    Infer,
    /// Computes mAP^r and mAP^b of a prediction file.
    Eval,
    /// Times the inference segments per image.
    Bench,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Gradcheck => "gradcheck",
            Command::Gendata => "gendata",
            Command::Train => "train",
            Command::Infer => "infer",
            Command::Eval => "eval",
            Command::Bench => "bench",
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct Options {
    /// Cascade config (train, infer, bench) or dataset spec (gendata), TOML.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Prediction file read by eval.
    #[arg(long, global = true, value_name = "PATH")]
    pub predictions: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Number of training stages.
    #[arg(long, global = true, value_parser = ["3", "5"])]
    pub stages: Option<String>,
    /// Training iterations; images timed by bench.
    #[arg(long, global = true, value_name = "N")]
    pub iters: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage_error = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage_error { 2 } else { 0 });
        }
    };
    let mut report = RunReport::new(cli.command.name());
    let result = match cli.command {
        Command::Gradcheck => commands::gradcheck(&cli.opts, &mut report),
        Command::Gendata => commands::gendata(&cli.opts, &mut report),
        Command::Train => commands::train(&cli.opts, &mut report),
        Command::Infer => commands::infer(&cli.opts, &mut report),
        Command::Eval => commands::eval(&cli.opts, &mut report),
        Command::Bench => commands::bench(&cli.opts, &mut report),
    };
    let code = match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            report.error = Some(format!("{e:#}"));
            if e.downcast_ref::<commands::UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    };
    report.status = code;
    eprintln!("{report}");
    ExitCode::from(code as u8)
}
