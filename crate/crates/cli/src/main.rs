//! `moa-tts` command-line pipelines. Every subcommand reads its inputs,
//! writes into a fresh run directory and never touches the inputs.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "moa-tts", version, about = "Zero-shot TTS acoustic model with speaker-gated mixture of adapters")]
struct Cli {
    /// Parent of generated run directories (`<timestamp>-seed<seed>`).
    #[arg(long, global = true, default_value = "runs")]
    runs_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct OutArgs {
    /// Write here instead of a timestamped directory under --runs-root.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic multi-speaker corpus.
    GenData(commands::GenData),
    /// Two-phase training: backbone, then mixture insertion.
    Train(commands::Train),
    /// Synthesize mel outputs for corpus utterances.
    Synth(commands::Synth),
    /// Score mel outputs against references.
    Eval(commands::Eval),
    /// Real-time-factor benchmark and analytic operation counts.
    Bench(commands::Bench),
    /// Speaker-by-speaker correlation of gate weights.
    AnalyzeGates(commands::AnalyzeGates),
    /// Per-component parameter table for a config.
    CountParams(commands::CountParams),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::*;
            if matches!(e.kind(), DisplayHelp | DisplayVersion | DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == DisplayHelpOnMissingArgumentOrSubcommand {
                    ExitCode::from(2)
                } else {
                    ExitCode::SUCCESS
                };
            }
            let rendered = e.render().to_string();
            let message = rendered
                .lines()
                .next()
                .unwrap_or("usage error")
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": message }));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&cli.runs_root, a),
        Command::Train(a) => commands::train(&cli.runs_root, a),
        Command::Synth(a) => commands::synth(&cli.runs_root, a),
        Command::Eval(a) => commands::eval(&cli.runs_root, a),
        Command::Bench(a) => commands::bench(&cli.runs_root, a),
        Command::AnalyzeGates(a) => commands::analyze_gates(&cli.runs_root, a),
        Command::CountParams(a) => commands::count_params(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(1)
        }
    }
}
