use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Subcommand, ValueEnum};
use otakey_core::adversary;
use otakey_core::manifest::MANIFEST_FILE;
use otakey_core::scenario::crash::{self, CrashDrillConfig};
use otakey_core::scenario::demo::{self, DemoConfig, LinkMode};
use otakey_core::scenario::faultsweep::{self, Granularity};
use otakey_core::sim::{self, Figure, SimParams};
use otakey_core::{Flow, RunManifest};
use serde::Serialize;

use crate::{spawn, CmdResult, Verdict};

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn finish<C: Serialize>(
    scenario: &str,
    seed: Option<u64>,
    argv: Vec<String>,
    dir: &Path,
    config: &C,
    passed: bool,
) -> CmdResult {
    let mut m = RunManifest::new(scenario, seed, argv, dir).with_config(config);
    m.passed = Some(passed);
    m.write(&dir.join(MANIFEST_FILE))?;
    println!("{scenario}: {}", if passed { "PASS" } else { "FAIL" });
    Ok(Verdict::from_pass(passed))
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 100)]
    devices: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Worker threads (or concurrent device processes with --spawn).
    #[arg(long, default_value_t = 4)]
    parallel: usize,
    #[arg(long, default_value = "tcp")]
    link: LinkMode,
    /// Cut power on this device during its last cloud-key update.
    #[arg(long)]
    fault_device: Option<usize>,
    /// Run every device step as a separate `otakey device` process.
    #[arg(long)]
    spawn: bool,
    #[arg(long, default_value = "out/demo")]
    out: PathBuf,
}

pub fn demo(a: DemoArgs, argv: Vec<String>) -> CmdResult {
    let cfg = DemoConfig { n_devices: a.devices, seed: a.seed, parallel: a.parallel, link: a.link, fault_device: a.fault_device };
    cfg.validate().map_err(anyhow::Error::msg)?;
    let report = if a.spawn {
        if a.link != LinkMode::Tcp {
            bail!("--spawn needs the tcp link");
        }
        spawn::run(&cfg, &a.out)?
    } else {
        demo::run(&cfg).map_err(anyhow::Error::msg)?
    };
    write_json(&a.out.join("demo_report.json"), &report)?;
    println!(
        "{} devices: {} distinct agent keys, {} distinct cloud keys, {} residual product keys, {} cloud logins, {} fully updated, {} ms",
        cfg.n_devices,
        report.distinct_agent_keys,
        report.distinct_cloud_keys,
        report.residual_product_keys,
        report.cloud_auth_successes,
        report.updated,
        report.elapsed_ms
    );
    for v in report.violations.iter().take(20) {
        println!("violation: {v}");
    }
    finish("demo", Some(a.seed), argv, &a.out, &(&cfg, a.spawn), report.passed())
}

#[derive(Debug, Args)]
pub struct FaultsweepArgs {
    /// Flows to sweep; all three when absent.
    #[arg(long)]
    flow: Vec<Flow>,
    #[arg(long, default_value = "byte")]
    granularity: Granularity,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "out/faultsweep")]
    out: PathBuf,
}

pub fn faultsweep(a: FaultsweepArgs, argv: Vec<String>) -> CmdResult {
    let flows = if a.flow.is_empty() { Flow::ALL.to_vec() } else { a.flow.clone() };
    let report = faultsweep::sweep(&flows, a.granularity, a.seed);
    write_json(&a.out.join("faultsweep_report.json"), &report)?;
    for (flow, s) in &report.flows {
        println!(
            "{flow}: {} flash ops, {} cut points, safety {}/{} ok, liveness {}/{} ok",
            s.flash_ops.len(),
            s.cut_points,
            s.safety.passed,
            s.cut_points,
            s.liveness.passed,
            s.cut_points
        );
    }
    for f in report.failures.iter().take(20) {
        println!("failure: {f:?}");
    }
    finish("faultsweep", Some(a.seed), argv, &a.out, &(&flows, a.granularity), report.passed())
}

#[derive(Debug, Subcommand)]
pub enum AdversaryCmd {
    /// Every tamper sequence up to the budget, plus the secrecy check.
    Sweep {
        #[arg(long, default_value = "ak-init")]
        flow: Flow,
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(0..=3))]
        budget: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Report listing every sequence and its outcome.
        #[arg(long, default_value = "out/adversary/report.json")]
        report: PathBuf,
    },
    /// What a passive observer of an honest run can derive.
    Secrecy {
        #[arg(long)]
        flow: Vec<Flow>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Frames of an honest run.
    Transcript {
        #[arg(long, default_value = "ak-init")]
        flow: Flow,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Show the device's check sequence when a stale nonce2 comes back.
    Nonce2Replay {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

pub fn adversary(cmd: AdversaryCmd, argv: Vec<String>) -> CmdResult {
    match cmd {
        AdversaryCmd::Sweep { flow, budget, seed, report } => {
            let r = adversary::tamper_sweep(flow, budget as usize, seed, true);
            write_json(&report, &r)?;
            println!(
                "{flow}: {} sequences over {} actions, {} violations; outcomes {}",
                r.runs,
                r.alphabet_size,
                r.violation_count,
                serde_json::to_string(&r.outcomes)?
            );
            for q in &r.secrecy.queries {
                println!("secrecy {}: {}", q.secret, if q.derivable { "DERIVABLE" } else { "secret" });
            }
            let dir = report.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            finish("adversary", Some(seed), argv, dir, &(flow, budget), r.passed())
        }
        AdversaryCmd::Secrecy { flow, seed } => {
            let flows = if flow.is_empty() { Flow::ALL.to_vec() } else { flow };
            let reports: Vec<_> = flows.iter().map(|&f| adversary::honest_secrecy(f, seed)).collect();
            println!("{}", serde_json::to_string_pretty(&reports)?);
            Ok(Verdict::from_pass(reports.iter().all(|r| r.all_secret())))
        }
        AdversaryCmd::Transcript { flow, seed } => {
            println!("{}", serde_json::to_string_pretty(&adversary::record_honest_run(flow, seed))?);
            Ok(Verdict::Pass)
        }
        AdversaryCmd::Nonce2Replay { seed } => {
            println!("{}", serde_json::to_string_pretty(&adversary::replayed_nonce2_trace(seed))?);
            Ok(Verdict::Pass)
        }
    }
}

#[derive(Debug, Args)]
pub struct CrashDrillArgs {
    #[arg(long, default_value_t = 100)]
    devices: usize,
    #[arg(long, default_value_t = 20)]
    crashes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "out/crash-drill")]
    dir: PathBuf,
}

pub fn crash_drill(a: CrashDrillArgs, argv: Vec<String>) -> CmdResult {
    let cfg = CrashDrillConfig::new(a.devices, a.crashes, a.seed);
    let report = crash::run(&cfg, &a.dir).map_err(anyhow::Error::msg)?;
    write_json(&a.dir.join("crash_report.json"), &report)?;
    println!(
        "{} kills, {} device checks, {} devices completed, {} violations",
        report.kills,
        report.device_checks,
        report.devices_completed,
        report.violations.len()
    );
    for v in report.violations.iter().take(20) {
        println!("violation: {v}");
    }
    finish("crash-drill", Some(a.seed), argv, &a.dir, &cfg, report.passed())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimTarget {
    Fig7,
    Fig8,
    Fig9,
    Gray,
    All,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    target: SimTarget,
    #[arg(long, default_value = "out/sim")]
    out: PathBuf,
    #[arg(long, default_value_t = sim::DEFAULT_DELTA_RATIO)]
    delta_ratio: f64,
    #[arg(long, default_value_t = sim::DEFAULT_FAILURE_RATE)]
    failure_rate: f64,
    /// Draw failures from this seed instead of using expected values.
    #[arg(long)]
    seed: Option<u64>,
}

pub fn sim(a: SimArgs, argv: Vec<String>) -> CmdResult {
    let params = SimParams { delta_ratio: a.delta_ratio, failure_rate: a.failure_rate, seed: a.seed };
    sim::Strategy::new(sim::StrategyKind::Bl2).with_delta_ratio(a.delta_ratio).validate().map_err(anyhow::Error::msg)?;
    sim::FleetConfig { failure_rate: a.failure_rate, ..sim::FleetConfig::fleet(1) }.validate().map_err(anyhow::Error::msg)?;
    let figures: Vec<Figure> = match a.target {
        SimTarget::Fig7 => vec![Figure::Fig7],
        SimTarget::Fig8 => vec![Figure::Fig8],
        SimTarget::Fig9 => vec![Figure::Fig9],
        SimTarget::Gray => vec![Figure::Gray],
        SimTarget::All => Figure::ALL.to_vec(),
    };
    for f in figures {
        let path = sim::emit(f, &a.out, &params)?;
        println!("wrote {}", path.display());
    }
    finish("sim", a.seed, argv, &a.out, &params, true)
}
