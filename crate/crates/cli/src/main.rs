mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "sentinel", version, about = "Failure detection for stochastic action-chunk policies")]
struct Cli {
    /// Worker threads for batch work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Human-readable output instead of JSON.
    #[arg(long, global = true)]
    pretty: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic rollout logs.
    Synth(SynthArgs),
    /// Compute a conformal threshold from successful rollouts.
    Calibrate(CalibrateArgs),
    /// Score one rollout and report the detection verdict.
    Detect(DetectArgs),
    /// Run a benchmark scenario and write reports.
    Eval(EvalArgs),
    /// Query the VLM monitor on a rollout.
    Vlm(VlmArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Scenario {
    Nominal,
    Erratic,
    Stall,
    Drift,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub scenario: Scenario,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// Scene parameters (JSON) overriding the defaults.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
}

#[derive(Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub detector: String,
    /// Glob matching the calibration logs.
    #[arg(long)]
    pub logs: String,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// Seed for the noise draws of the diffusion baselines.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scene parameters (JSON) for the policy oracle.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
}

#[derive(Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub detector: String,
    #[arg(long)]
    pub calibration: std::path::PathBuf,
    #[arg(long)]
    pub log: std::path::PathBuf,
    /// Write the score series as CSV.
    #[arg(long)]
    pub emit_series: Option<std::path::PathBuf>,
    /// Scene parameters (JSON) for the policy oracle.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: std::path::PathBuf,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum TransportKind {
    Mock,
    Http,
}

#[derive(Args)]
pub struct VlmArgs {
    #[arg(long)]
    pub log: std::path::PathBuf,
    #[arg(long, value_enum)]
    pub transport: TransportKind,
    #[arg(long, default_value = "video_qa")]
    pub template: String,
    /// Majority vote over the three video prompts.
    #[arg(long)]
    pub ensemble: bool,
    /// Response fixtures for the mock transport.
    #[arg(long)]
    pub fixtures: Option<std::path::PathBuf>,
    /// Success-video frames or goal images for the variant prompts.
    #[arg(long, value_delimiter = ',')]
    pub auxiliary: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0])]
    pub checkpoints: Vec<f64>,
    /// Frame subsampling factor.
    #[arg(long, default_value_t = 1)]
    pub nu: usize,
    #[arg(long, default_value = "https://api.openai.com/v1/chat/completions")]
    pub endpoint: String,
    #[arg(long, default_value = "gpt-4o")]
    pub model: String,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 60.0)]
    pub timeout: f64,
    /// Task description key (cover, close, push_chair) replacing the log's text.
    #[arg(long)]
    pub task: Option<String>,
}

fn fail(kind: &str, message: impl std::fmt::Display, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message.to_string() } }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim_end(), 2),
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return fail("usage", "--jobs must be at least 1", 2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            return fail("runtime", e, 1);
        }
    }
    let out = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Detect(a) => commands::detect(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Vlm(a) => commands::vlm(&a),
    };
    match out {
        Ok(output) => {
            if cli.pretty {
                println!("{}", commands::pretty(&output));
            } else {
                println!("{output}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), &e, 1),
    }
}
