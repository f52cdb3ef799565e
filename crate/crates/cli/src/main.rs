mod device;
mod runs;
mod services;
mod spawn;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Violation,
}

impl Verdict {
    pub fn from_pass(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Violation
        }
    }
}

pub type CmdResult = anyhow::Result<Verdict>;

#[derive(Debug, Parser)]
#[command(name = "otakey", version, about = "Two-stage device key provisioning with atomic A/B key updates")]
pub struct Cli {
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run or administer the key agent.
    #[command(subcommand)]
    Agent(services::AgentCmd),
    /// Run or query the cloud stub.
    #[command(subcommand)]
    Cloud(services::CloudCmd),
    /// Act as one device whose flash lives in an image file.
    #[command(subcommand)]
    Device(device::DeviceCmd),
    /// Provision, rotate and update a whole fleet end to end.
    Demo(runs::DemoArgs),
    /// Cut power at every flash operation and lose every message.
    Faultsweep(runs::FaultsweepArgs),
    /// Active-attacker sweeps and secrecy checks.
    #[command(subcommand)]
    Adversary(runs::AdversaryCmd),
    /// Kill the agent at random journal commits during provisioning.
    CrashDrill(runs::CrashDrillArgs),
    /// Fleet update cost model.
    Sim(runs::SimArgs),
    /// Repeat the run recorded in a manifest.
    Rerun {
        manifest: PathBuf,
    },
}

fn dispatch(cli: Cli, argv: Vec<String>) -> CmdResult {
    match cli.command {
        Command::Agent(c) => services::agent(c),
        Command::Cloud(c) => services::cloud(c),
        Command::Device(c) => device::run(c),
        Command::Demo(a) => runs::demo(a, argv),
        Command::Faultsweep(a) => runs::faultsweep(a, argv),
        Command::Adversary(c) => runs::adversary(c, argv),
        Command::CrashDrill(a) => runs::crash_drill(a, argv),
        Command::Sim(a) => runs::sim(a, argv),
        Command::Rerun { manifest } => {
            let m = otakey_core::RunManifest::read(&manifest)
                .map_err(|e| anyhow::anyhow!("reading {}: {e}", manifest.display()))?;
            let cli = Cli::try_parse_from(std::iter::once("otakey".to_string()).chain(m.argv.clone()))?;
            if matches!(cli.command, Command::Rerun { .. }) {
                anyhow::bail!("a manifest cannot point at another rerun");
            }
            dispatch(cli, m.argv)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp_millis().init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(cli, argv) {
        Ok(Verdict::Pass) => ExitCode::SUCCESS,
        Ok(Verdict::Violation) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
