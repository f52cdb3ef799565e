use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Subcommand};
use otakey_core::agent_server::registry::load_product_orders;
use otakey_core::cloud::CloudClient;
use otakey_core::flash::Slot;
use otakey_core::net::TcpTransport;
use otakey_core::protocol::device::{run_flow, RetryPolicy};
use otakey_core::scenario::sample_firmware;
use otakey_core::{Device, DeviceId, DeviceIdentity, FlashImage, Flow, KeyKind, ProductOrder};
use serde::Serialize;

use crate::{CmdResult, Verdict};

#[derive(Debug, Args)]
pub struct ImageArgs {
    /// Flash image file. Identity lives next to it in `<image>.id.json`.
    #[arg(long)]
    image: PathBuf,
    /// Seed for the device's nonce generator; random when absent.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct LinkArgs {
    #[arg(long)]
    agent: SocketAddr,
    /// Log in to this cloud after the flow.
    #[arg(long)]
    cloud: Option<SocketAddr>,
    #[arg(long, default_value_t = 3)]
    retries: u32,
    /// Backoff before the first retry; doubles each time.
    #[arg(long, default_value_t = 1000)]
    backoff_ms: u64,
    /// Cut power once this many further flash operations have run.
    #[arg(long)]
    cut_after_ops: Option<u64>,
    /// Bytes of the cut operation that still land.
    #[arg(long, default_value_t = 0, requires = "cut_after_ops")]
    torn_bytes: usize,
}

#[derive(Debug, Subcommand)]
pub enum DeviceCmd {
    /// Stage-one manufacturing: blank flash, product key, firmware.
    Burn {
        #[command(flatten)]
        img: ImageArgs,
        #[arg(long)]
        orders: PathBuf,
        /// Product order to burn; defaults to the first in the file.
        #[arg(long)]
        po: Option<String>,
        /// Chip id in hex.
        #[arg(long, conflicts_with = "index", required_unless_present = "index")]
        id: Option<String>,
        /// Use the synthetic chip id for this fleet index.
        #[arg(long)]
        index: Option<u64>,
        #[arg(long)]
        firmware: Option<PathBuf>,
    },
    /// First agent key, then the first cloud key.
    Provision {
        #[command(flatten)]
        img: ImageArgs,
        #[command(flatten)]
        link: LinkArgs,
        /// Stop after the agent key.
        #[arg(long)]
        agent_key_only: bool,
    },
    /// Replace the agent key.
    Rotate {
        #[command(flatten)]
        img: ImageArgs,
        #[command(flatten)]
        link: LinkArgs,
    },
    /// Replace the cloud key.
    Update {
        #[command(flatten)]
        img: ImageArgs,
        #[command(flatten)]
        link: LinkArgs,
    },
    /// Authenticate to the cloud with the stored cloud key.
    Login {
        #[command(flatten)]
        img: ImageArgs,
        #[arg(long)]
        cloud: SocketAddr,
    },
    /// Show what the bootloader would see.
    Dump {
        #[command(flatten)]
        img: ImageArgs,
        /// Also print the key areas as hex.
        #[arg(long)]
        hex: bool,
    },
}

fn identity_path(image: &Path) -> PathBuf {
    let mut p = image.as_os_str().to_owned();
    p.push(".id.json");
    PathBuf::from(p)
}

fn load(img: &ImageArgs) -> anyhow::Result<Device> {
    let bytes = std::fs::read(&img.image).with_context(|| format!("reading {}", img.image.display()))?;
    let flash = FlashImage::from_bytes(bytes)?;
    let idp = identity_path(&img.image);
    let identity: DeviceIdentity =
        serde_json::from_slice(&std::fs::read(&idp).with_context(|| format!("reading {}", idp.display()))?)?;
    let mut d = Device::new(identity, flash, img.seed);
    d.boot()?;
    Ok(d)
}

fn save(img: &ImageArgs, d: &Device) -> anyhow::Result<()> {
    let tmp = img.image.with_extension("tmp");
    std::fs::write(&tmp, d.flash().as_bytes())?;
    std::fs::rename(&tmp, &img.image)?;
    std::fs::write(identity_path(&img.image), serde_json::to_vec_pretty(&d.identity())?)?;
    Ok(())
}

#[derive(Serialize)]
struct FlowLine {
    flow: Flow,
    attempts: u32,
    acknowledged: bool,
    new_key: String,
}

#[derive(Serialize)]
struct DumpKey {
    kind: KeyKind,
    slot: Slot,
    seq: u32,
    fingerprint: String,
}

#[derive(Serialize)]
struct DumpView {
    identity: DeviceIdentity,
    phase: String,
    keys: Vec<DumpKey>,
}

fn dump_view(d: &Device) -> DumpView {
    let scan = d.flash().scan();
    let keys = [KeyKind::ProductKey, KeyKind::AgentKey, KeyKind::CloudKey]
        .into_iter()
        .filter_map(|k| {
            scan.get(k).map(|r| DumpKey { kind: k, slot: r.slot, seq: r.record.seq, fingerprint: r.record.key.fingerprint() })
        })
        .collect();
    DumpView { identity: d.identity(), phase: format!("{:?}", d.phase()), keys }
}

fn run_flows(img: &ImageArgs, link: &LinkArgs, flows: &[Flow]) -> CmdResult {
    let mut d = load(img)?;
    let policy = RetryPolicy { max_retries: link.retries, base_delay: Duration::from_millis(link.backoff_ms), ..RetryPolicy::default() };
    if let Some(n) = link.cut_after_ops {
        let at = d.flash().op_count() + n;
        d.flash_mut().inject_power_cut(at, link.torn_bytes);
    }
    let mut transport = TcpTransport::new(link.agent);
    for &flow in flows {
        match run_flow(&mut d, flow, &mut transport, &policy) {
            Ok(o) => println!(
                "{}",
                serde_json::to_string(&FlowLine {
                    flow,
                    attempts: o.attempts,
                    acknowledged: o.acknowledged,
                    new_key: o.new_key.fingerprint()
                })?
            ),
            Err(e) if e.is_power_loss() => {
                save(img, &d)?;
                println!("power lost during {flow}; image saved as it stands");
                return Ok(Verdict::Pass);
            }
            Err(e) => {
                save(img, &d)?;
                bail!("{flow} failed: {e}");
            }
        }
    }
    save(img, &d)?;
    if let Some(cloud) = link.cloud {
        return login(&d, cloud);
    }
    Ok(Verdict::Pass)
}

fn login(d: &Device, cloud: SocketAddr) -> CmdResult {
    let outcome = CloudClient::new(cloud).login(d)?;
    println!("{}", serde_json::to_string(&outcome)?);
    Ok(Verdict::from_pass(outcome.accepted()))
}

pub fn run(cmd: DeviceCmd) -> CmdResult {
    match cmd {
        DeviceCmd::Burn { img, orders, po, id, index, firmware } => {
            let orders = load_product_orders(&orders)?;
            let order = match po {
                Some(p) => {
                    let p = ProductOrder::from_hex(&p).map_err(anyhow::Error::msg)?;
                    orders.into_iter().find(|o| o.po == p).with_context(|| format!("product order {p} not in file"))?
                }
                None => orders.into_iter().next().context("order file is empty")?,
            };
            let id = match (id, index) {
                (Some(h), _) => DeviceId::from_hex(&h).map_err(anyhow::Error::msg)?,
                (None, Some(i)) => DeviceId::synthetic(i),
                (None, None) => bail!("pass --id or --index"),
            };
            let fw = match firmware {
                Some(p) => std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?,
                None => sample_firmware(4096),
            };
            let d = Device::burn(DeviceIdentity { id, po: order.po }, &order.pk, &fw, img.seed)?;
            save(&img, &d)?;
            println!("{}", serde_json::to_string(&dump_view(&d))?);
            Ok(Verdict::Pass)
        }
        DeviceCmd::Provision { img, link, agent_key_only } => {
            let flows: &[Flow] = if agent_key_only { &[Flow::AkInit] } else { &[Flow::AkInit, Flow::CkUpdate] };
            run_flows(&img, &link, flows)
        }
        DeviceCmd::Rotate { img, link } => run_flows(&img, &link, &[Flow::AkRotate]),
        DeviceCmd::Update { img, link } => run_flows(&img, &link, &[Flow::CkUpdate]),
        DeviceCmd::Login { img, cloud } => {
            let d = load(&img)?;
            login(&d, cloud)
        }
        DeviceCmd::Dump { img, hex } => {
            let d = load(&img)?;
            println!("{}", serde_json::to_string_pretty(&dump_view(&d))?);
            if hex {
                for slot in Slot::ALL {
                    println!("{slot:?}:\n{}", d.flash().hexdump(slot.region()));
                }
            }
            Ok(Verdict::Pass)
        }
    }
}
