use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Subcommand};
use otakey_core::agent_server::registry::{load_product_orders, save_product_orders, AnomalyVerdict, RevokeTarget};
use otakey_core::agent_server::{self, AgentConfig, CloudLink};
use otakey_core::cloud::{self, CloudClient, CloudConfig, CloudStub};
use otakey_core::net::ServiceHandle;
use otakey_core::scenario::product_order;
use otakey_core::{Clock, DeviceId, KeyRng, ProductOrder};

use crate::{CmdResult, Verdict};

#[derive(Debug, Args)]
pub struct RegistryArgs {
    /// Journal file; created on first use.
    #[arg(long)]
    registry: PathBuf,
    /// Product order file (JSON array).
    #[arg(long)]
    orders: PathBuf,
    /// Cloud stub address.
    #[arg(long, conflicts_with = "offline")]
    cloud: Option<SocketAddr>,
    /// Run without a cloud; cloud-key requests are refused.
    #[arg(long)]
    offline: bool,
}

impl RegistryArgs {
    fn config(&self, seed: Option<u64>, compact_every: Option<usize>) -> anyhow::Result<AgentConfig> {
        let cloud = match (self.cloud, self.offline) {
            (Some(addr), _) => CloudLink::Remote(addr),
            (None, true) => CloudLink::Offline,
            (None, false) => bail!("pass --cloud <addr> or --offline"),
        };
        let product_orders =
            load_product_orders(&self.orders).with_context(|| format!("loading {}", self.orders.display()))?;
        Ok(AgentConfig {
            registry_path: Some(self.registry.clone()),
            product_orders,
            cloud,
            seed,
            compact_every,
            clock: Clock::System,
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum AgentCmd {
    /// Serve device requests until killed or `--stop-after` elapses.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7300")]
        listen: String,
        #[command(flatten)]
        reg: RegistryArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Compact the journal after this many lines.
        #[arg(long)]
        compact_every: Option<usize>,
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Revoke one device or a whole product order.
    Revoke {
        #[command(flatten)]
        reg: RegistryArgs,
        #[arg(long, conflicts_with = "po", required_unless_present = "po")]
        device: Option<String>,
        #[arg(long)]
        po: Option<String>,
    },
    /// Compare activations of a product order against its expected count
    /// and window. Exits 1 when a leak is suspected.
    Anomaly {
        #[command(flatten)]
        reg: RegistryArgs,
        #[arg(long)]
        po: String,
    },
    /// Let an active device run first issue again.
    AllowReprovision {
        #[command(flatten)]
        reg: RegistryArgs,
        #[arg(long)]
        device: String,
    },
    /// Create a product order with a fresh product key and add it to a file.
    NewOrder {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        expected: u64,
        #[arg(long)]
        seed: Option<u64>,
        /// Window start, seconds since the epoch; defaults to now.
        #[arg(long)]
        window_start: Option<u64>,
        #[arg(long, default_value_t = 30)]
        window_days: u64,
    },
}

#[derive(Debug, Subcommand)]
pub enum CloudCmd {
    Serve {
        #[arg(long, default_value = "127.0.0.1:7400")]
        listen: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Keep the old key enabled after the first login with a new one.
        #[arg(long)]
        no_auto_activate: bool,
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Write the cloud's device records as JSON.
    Dump {
        #[arg(long)]
        cloud: SocketAddr,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn announce(what: &str, addr: SocketAddr) {
    println!("{what} listening on {addr}");
    let _ = std::io::stdout().flush();
}

fn hold(handle: &mut ServiceHandle, stop_after: Option<u64>) {
    match stop_after {
        Some(s) => {
            std::thread::sleep(Duration::from_secs(s));
            handle.shutdown();
        }
        None => handle.wait(),
    }
}

fn parse_device(s: &str) -> anyhow::Result<DeviceId> {
    DeviceId::from_hex(s).map_err(|e| anyhow::anyhow!("device id: {e}"))
}

fn parse_po(s: &str) -> anyhow::Result<ProductOrder> {
    ProductOrder::from_hex(s).map_err(|e| anyhow::anyhow!("product order: {e}"))
}

pub fn agent(cmd: AgentCmd) -> CmdResult {
    match cmd {
        AgentCmd::Serve { listen, reg, seed, compact_every, stop_after } => {
            let agent = reg.config(seed, compact_every)?.build()?;
            let service = agent_server::serve(agent, listen.as_str()).with_context(|| format!("binding {listen}"))?;
            announce("agent", service.addr());
            match stop_after {
                Some(s) => std::thread::sleep(Duration::from_secs(s)),
                None => service.handle().wait(),
            }
            let agent = service.shutdown()?;
            let stats = agent_server::lock(&agent).stats().clone();
            println!("{}", serde_json::to_string(&stats)?);
            Ok(Verdict::Pass)
        }
        AgentCmd::Revoke { reg, device, po } => {
            let mut agent = reg.config(None, None)?.build()?;
            let target = match (device, po) {
                (Some(d), _) => RevokeTarget::Device(parse_device(&d)?),
                (None, Some(p)) => RevokeTarget::Po(parse_po(&p)?),
                (None, None) => bail!("pass --device or --po"),
            };
            let n = agent.revoke(target)?;
            println!("revoked {n} device(s)");
            Ok(Verdict::Pass)
        }
        AgentCmd::Anomaly { reg, po } => {
            let agent = reg.config(None, None)?.build()?;
            let po = parse_po(&po)?;
            let report = agent.anomaly_scan(&po).with_context(|| format!("unknown product order {po}"))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(Verdict::from_pass(report.verdict == AnomalyVerdict::Normal))
        }
        AgentCmd::AllowReprovision { reg, device } => {
            let mut agent = reg.config(None, None)?.build()?;
            let id = parse_device(&device)?;
            if !agent.allow_reprovision(id)? {
                bail!("device {id} is not in the registry");
            }
            println!("device {id} may run first issue again");
            Ok(Verdict::Pass)
        }
        AgentCmd::NewOrder { out, expected, seed, window_start, window_days } => {
            let mut orders = if out.exists() { load_product_orders(&out)? } else { Vec::new() };
            let start = window_start.unwrap_or_else(|| Clock::System.now());
            let mut rec = product_order(&mut KeyRng::new(seed), expected, start);
            rec.window_end = start + window_days * 24 * 3600;
            println!("{}", rec.po);
            orders.push(rec);
            save_product_orders(&out, &orders)?;
            Ok(Verdict::Pass)
        }
    }
}

pub fn cloud(cmd: CloudCmd) -> CmdResult {
    match cmd {
        CloudCmd::Serve { listen, seed, no_auto_activate, stop_after } => {
            let config = CloudConfig { auto_activate_on_auth: !no_auto_activate, ..CloudConfig::default() };
            let stub = CloudStub::shared(config, seed);
            let mut handle = cloud::serve(stub.clone(), listen.as_str()).with_context(|| format!("binding {listen}"))?;
            announce("cloud", handle.addr());
            hold(&mut handle, stop_after);
            println!("{}", serde_json::to_string(&stub.dump_json())?);
            Ok(Verdict::Pass)
        }
        CloudCmd::Dump { cloud, out } => {
            let records = CloudClient::new(cloud).dump()?;
            let text = serde_json::to_string_pretty(&records)?;
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => println!("{text}"),
            }
            Ok(Verdict::Pass)
        }
    }
}
