use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser};
use dockerssd_cli::{execute, Subcommand};

/// Runs DockerSSD simulator scenarios and writes CSV and JSON reports.
#[derive(Parser)]
#[command(name = "dockerssd", version)]
enum Cli {
    /// Ether-oN codec, tunnel and upcall checks plus namespace isolation.
    NetTest(Common),
    /// Inode-lock traces and the exhaustive interleaving check.
    FsTrace(Common),
    /// Container engine surface, lifecycle and end-to-end checks.
    DockerSim(Common),
    /// Six-model latency breakdown with calibration residuals.
    Latency(Common),
    /// Storage-pool LLM inference sweeps.
    LlmSweep(Common),
    /// Analytical latency model against full-simulator replay.
    ReplayCheck(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML); the built-in default when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Output directory; must be empty or absent.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let (cmd, args) = match Cli::parse() {
        Cli::NetTest(a) => (Subcommand::NetTest, a),
        Cli::FsTrace(a) => (Subcommand::FsTrace, a),
        Cli::DockerSim(a) => (Subcommand::DockerSim, a),
        Cli::Latency(a) => (Subcommand::Latency, a),
        Cli::LlmSweep(a) => (Subcommand::LlmSweep, a),
        Cli::ReplayCheck(a) => (Subcommand::ReplayCheck, a),
    };
    let code = execute(cmd, args.scenario.as_deref(), &args.out, args.seed);
    ExitCode::from(code as u8)
}
