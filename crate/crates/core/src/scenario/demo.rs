//! Networked fleet run.
//!
//! Stage one burns every image with the same product key. Stage two then
//! walks each device through first issue, first cloud key, a cloud login,
//! an agent-key rotation, a cloud-key update and a final login. Devices are
//! spread over `parallel` worker threads that talk to one agent and one
//! cloud, either over loopback TCP or through in-process handles.

use std::collections::HashSet;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{product_order, sample_firmware, EPOCH};
use crate::agent_server::registry::Registry;
use crate::agent_server::{self, lock, AgentService, SharedAgent, SharedTransport};
use crate::clock::Clock;
use crate::cloud::{self, AuthOutcome, CloudClient, CloudConfig, CloudStub};
use crate::crypto::{KeyRng, SymmetricKey};
use crate::flash::KeyKind;
use crate::net::{ServiceHandle, TcpTransport};
use crate::protocol::agent::Agent;
use crate::protocol::device::{run_flow, Device, DevicePhase, RetryPolicy, Transport};
use crate::protocol::wire::{DeviceId, DeviceIdentity};
use crate::protocol::Flow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinkMode {
    #[default]
    Tcp,
    InProcess,
}

impl std::str::FromStr for LinkMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tcp" => Ok(Self::Tcp),
            "in-process" | "in_process" => Ok(Self::InProcess),
            other => Err(format!("unknown link `{other}` (tcp or in-process)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub n_devices: usize,
    pub seed: u64,
    pub parallel: usize,
    pub link: LinkMode,
    /// Cut power on this device halfway through its final cloud-key write.
    pub fault_device: Option<usize>,
}

impl DemoConfig {
    pub fn new(n_devices: usize, seed: u64) -> Self {
        Self { n_devices, seed, parallel: 4, link: LinkMode::Tcp, fault_device: None }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.parallel == 0 {
            return Err("parallel must be at least 1".into());
        }
        if let Some(f) = self.fault_device {
            if f >= self.n_devices {
                return Err(format!("fault device {f} out of range for {} devices", self.n_devices));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub index: usize,
    pub id: DeviceId,
    pub phase: DevicePhase,
    pub agent_key: Option<String>,
    pub cloud_key: Option<String>,
    pub residual_product_key: bool,
    /// Every step of the pipeline finished.
    pub updated: bool,
    pub final_login: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoReport {
    pub config: DemoConfig,
    pub distinct_agent_keys: usize,
    pub distinct_cloud_keys: usize,
    pub residual_product_keys: usize,
    pub cloud_auth_successes: usize,
    pub updated: usize,
    pub elapsed_ms: u128,
    pub violations: Vec<String>,
    pub devices: Vec<DeviceReport>,
}

impl DemoReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Per-worker handles to the two services.
enum Session {
    Tcp { agent: TcpTransport, cloud: CloudClient },
    Local { agent: SharedTransport, cloud: Arc<CloudStub> },
}

impl Session {
    fn transport(&mut self) -> &mut dyn Transport {
        match self {
            Session::Tcp { agent, .. } => agent,
            Session::Local { agent, .. } => agent,
        }
    }

    fn login(&mut self, d: &Device) -> Result<AuthOutcome, String> {
        match self {
            Session::Tcp { cloud, .. } => cloud.login(d).map_err(|e| e.to_string()),
            Session::Local { cloud, .. } => Ok(cloud.login(d)),
        }
    }
}

enum Services {
    Tcp { agent: Box<AgentService>, cloud: ServiceHandle, agent_addr: SocketAddr, cloud_addr: SocketAddr },
    Local { agent: SharedAgent },
}

impl Services {
    fn session(&self, stub: &Arc<CloudStub>) -> Session {
        match self {
            Services::Tcp { agent_addr, cloud_addr, .. } => {
                Session::Tcp { agent: TcpTransport::new(*agent_addr), cloud: CloudClient::new(*cloud_addr) }
            }
            Services::Local { agent } => Session::Local { agent: SharedTransport(agent.clone()), cloud: stub.clone() },
        }
    }

    fn agent(&self) -> SharedAgent {
        match self {
            Services::Tcp { agent, .. } => agent.agent(),
            Services::Local { agent } => agent.clone(),
        }
    }
}

fn provision_one(d: &mut Device, s: &mut Session, clock: &Clock, cut_last_write: bool) -> Result<(), String> {
    let policy = RetryPolicy::immediate();
    let step = |d: &mut Device, s: &mut Session, f: Flow| -> Result<(), String> {
        clock.advance(1);
        run_flow(d, f, s.transport(), &policy).map(|_| ()).map_err(|e| format!("{f}: {e}"))
    };
    let login = |d: &Device, s: &mut Session| -> Result<(), String> {
        match s.login(d)? {
            o if o.accepted() => Ok(()),
            _ => Err("cloud login refused".into()),
        }
    };
    step(d, s, Flow::AkInit)?;
    step(d, s, Flow::CkUpdate)?;
    login(d, s)?;
    step(d, s, Flow::AkRotate)?;
    if cut_last_write {
        let next = d.flash().op_count();
        d.flash_mut().inject_power_cut(next, 12);
        clock.advance(1);
        match run_flow(d, Flow::CkUpdate, s.transport(), &policy) {
            Err(e) if e.is_power_loss() => {}
            other => return Err(format!("power cut did not interrupt the update: {other:?}")),
        }
        d.flash_mut().power_off();
        d.boot().map_err(|e| format!("reboot after cut: {e}"))?;
        login(d, s)?;
        return Err(INJECTED.into());
    }
    step(d, s, Flow::CkUpdate)?;
    login(d, s)
}

/// Error recorded for the device that had power cut on purpose.
pub const INJECTED: &str = "injected power cut during cloud-key update";

/// Checks every device of a finished run against the agent and cloud.
/// `login` performs the final cloud authentication for one device.
pub fn assess(
    cfg: &DemoConfig,
    devices: &[Device],
    results: &[Option<String>],
    agent: &Agent,
    cloud: &CloudStub,
    pk: &SymmetricKey,
    mut login: impl FnMut(&Device) -> bool,
) -> DemoReport {
    let mut report = DemoReport {
        config: cfg.clone(),
        distinct_agent_keys: 0,
        distinct_cloud_keys: 0,
        residual_product_keys: 0,
        cloud_auth_successes: 0,
        updated: 0,
        elapsed_ms: 0,
        violations: Vec::new(),
        devices: Vec::with_capacity(devices.len()),
    };
    let mut aks = HashSet::new();
    let mut cks = HashSet::new();
    for (i, (d, err)) in devices.iter().zip(results).enumerate() {
        let scan = d.flash().scan();
        let ak = scan.key(KeyKind::AgentKey);
        let ck = scan.key(KeyKind::CloudKey);
        let residual = scan.get(KeyKind::ProductKey).is_some() || ak == Some(*pk);
        let final_login = login(d);
        aks.extend(ak);
        cks.extend(ck);
        report.residual_product_keys += residual as usize;
        report.cloud_auth_successes += final_login as usize;
        report.updated += err.is_none() as usize;
        let expected_failure = cfg.fault_device == Some(i) && err.as_deref() == Some(INJECTED);
        if err.is_some() && !expected_failure {
            report.violations.push(format!("device {i}: {}", err.as_deref().unwrap_or_default()));
        }
        if !final_login {
            report.violations.push(format!("device {i}: final cloud login refused"));
        }
        if residual {
            report.violations.push(format!("device {i}: product key still on flash"));
        }
        if let Err(e) = super::check_consistency(d, agent, cloud) {
            report.violations.push(e);
        }
        report.devices.push(DeviceReport {
            index: i,
            id: d.identity().id,
            phase: d.phase(),
            agent_key: ak.map(|k| k.fingerprint()),
            cloud_key: ck.map(|k| k.fingerprint()),
            residual_product_key: residual,
            updated: err.is_none(),
            final_login,
            error: err.clone(),
        });
    }
    let n = devices.len();
    report.distinct_agent_keys = aks.len();
    report.distinct_cloud_keys = cks.len();
    if aks.len() != n {
        report.violations.push(format!("{} distinct agent keys for {n} devices", aks.len()));
    }
    if cks.len() != n {
        report.violations.push(format!("{} distinct cloud keys for {n} devices", cks.len()));
    }
    if aks.contains(pk) || cks.contains(pk) {
        report.violations.push("the product key is in use as a device key".into());
    }
    report
}

pub fn run(cfg: &DemoConfig) -> Result<DemoReport, String> {
    cfg.validate()?;
    let started = Instant::now();
    let mut rng = KeyRng::from_seed(cfg.seed);
    let clock = Clock::manual(EPOCH);
    let order = product_order(&mut rng, cfg.n_devices as u64, EPOCH);
    let stub = CloudStub::shared(CloudConfig::default(), Some(rng.next_u64()));
    let agent_seed = Some(rng.next_u64());

    let services = match cfg.link {
        LinkMode::Tcp => {
            let cloud = cloud::serve(stub.clone(), "127.0.0.1:0").map_err(|e| format!("cloud listen: {e}"))?;
            let cloud_addr = cloud.addr();
            let registry = Registry::in_memory(vec![order.clone()]);
            let agent = Agent::new(registry, Box::new(CloudClient::new(cloud_addr)), clock.clone(), agent_seed);
            let agent = agent_server::serve(agent, "127.0.0.1:0").map_err(|e| format!("agent listen: {e}"))?;
            let agent_addr = agent.addr();
            Services::Tcp { agent: Box::new(agent), cloud, agent_addr, cloud_addr }
        }
        LinkMode::InProcess => {
            let agent = Agent::new(Registry::in_memory(vec![order.clone()]), Box::new(stub.clone()), clock.clone(), agent_seed);
            Services::Local { agent: Arc::new(Mutex::new(agent)) }
        }
    };

    let firmware = sample_firmware(4096);
    let mut devices = Vec::with_capacity(cfg.n_devices);
    for i in 0..cfg.n_devices {
        let identity = DeviceIdentity { id: DeviceId::synthetic(i as u64), po: order.po };
        devices.push(Device::burn(identity, &order.pk, &firmware, Some(rng.next_u64())).map_err(|e| e.to_string())?);
    }

    let mut results: Vec<Option<String>> = vec![None; cfg.n_devices];
    let per_worker = cfg.n_devices.div_ceil(cfg.parallel).max(1);
    std::thread::scope(|scope| {
        for (chunk_idx, (devs, errs)) in devices.chunks_mut(per_worker).zip(results.chunks_mut(per_worker)).enumerate() {
            let mut session = services.session(&stub);
            let clock = clock.clone();
            scope.spawn(move || {
                for (j, (d, e)) in devs.iter_mut().zip(errs.iter_mut()).enumerate() {
                    let index = chunk_idx * per_worker + j;
                    let cut = cfg.fault_device == Some(index);
                    *e = provision_one(d, &mut session, &clock, cut).err();
                }
            });
        }
    });

    let agent = services.agent();
    let mut session = services.session(&stub);
    let mut report = {
        let agent = lock(&agent);
        assess(cfg, &devices, &results, &agent, &stub, &order.pk, |d| session.login(d).map(|o| o.accepted()).unwrap_or(false))
    };
    drop(session);
    if let Services::Tcp { agent, mut cloud, .. } = services {
        agent.shutdown().map_err(|e| e.to_string())?;
        cloud.shutdown();
    }
    report.elapsed_ms = started.elapsed().as_millis();
    Ok(report)
}
