//! End-to-end scenarios over emulated devices: an in-process [`World`],
//! power-cut sweeps, the networked fleet demo and the agent crash drill.

pub mod crash;
pub mod demo;
pub mod faultsweep;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agent_server::registry::{ProductOrderRecord, Registry};
use crate::agent_server::InProcess;
use crate::clock::Clock;
use crate::cloud::{AuthOutcome, CloudConfig, CloudStub};
use crate::crypto::{KeyRng, SymmetricKey};
use crate::flash::KeyKind;
use crate::protocol::agent::Agent;
use crate::protocol::device::{run_flow, Device, DeviceError, FlowOutcome, RetryPolicy};
use crate::protocol::wire::{DeviceId, DeviceIdentity, ProductOrder};
use crate::protocol::Flow;

/// Start of the simulated manufacturing window.
pub const EPOCH: u64 = 1_700_000_000;
/// Length of the simulated manufacturing window.
pub const WINDOW_SECS: u64 = 30 * 24 * 3600;

/// Placeholder firmware written by stage-one manufacturing.
pub fn sample_firmware(len: usize) -> Vec<u8> {
    (0..len).map(|i| (i * 31 % 251) as u8).collect()
}

/// A product order whose devices are expected within the window.
pub fn product_order(rng: &mut KeyRng, expected_count: u64, start: u64) -> ProductOrderRecord {
    let mut po = [0u8; 8];
    rng.fill(&mut po);
    ProductOrderRecord {
        po: ProductOrder(po),
        pk: rng.key(),
        expected_count,
        window_start: start,
        window_end: start + WINDOW_SECS,
    }
}

/// Device, agent and cloud in one process, all seeded.
pub struct World {
    pub agent: Agent,
    pub cloud: Arc<CloudStub>,
    pub devices: Vec<Device>,
    pub order: ProductOrderRecord,
    pub clock: Clock,
    pub policy: RetryPolicy,
}

impl World {
    pub fn new(seed: u64, n_devices: usize) -> Self {
        Self::with_registry(seed, n_devices, None)
    }

    /// `registry` replaces the default in-memory one and must already know
    /// the product order produced for `seed`.
    pub fn with_registry(seed: u64, n_devices: usize, registry: Option<Registry>) -> Self {
        let mut rng = KeyRng::from_seed(seed);
        let clock = Clock::manual(EPOCH);
        let order = product_order(&mut rng, n_devices as u64, EPOCH);
        let cloud = CloudStub::shared(CloudConfig::default(), Some(rng.next_u64()));
        let registry = registry.unwrap_or_else(|| Registry::in_memory(vec![order.clone()]));
        let agent = Agent::new(registry, Box::new(cloud.clone()), clock.clone(), Some(rng.next_u64()));
        let firmware = sample_firmware(1024);
        let devices = (0..n_devices)
            .map(|i| {
                let identity = DeviceIdentity { id: DeviceId::synthetic(i as u64), po: order.po };
                Device::burn(identity, &order.pk, &firmware, Some(rng.next_u64())).expect("burn fits")
            })
            .collect();
        Self { agent, cloud, devices, order, clock, policy: RetryPolicy::none() }
    }

    /// Product order `seed` would generate, for preparing a registry.
    pub fn order_for_seed(seed: u64, n_devices: usize) -> ProductOrderRecord {
        product_order(&mut KeyRng::from_seed(seed), n_devices as u64, EPOCH)
    }

    pub fn run(&mut self, i: usize, flow: Flow) -> Result<FlowOutcome, DeviceError> {
        self.clock.advance(1);
        let policy = self.policy.clone();
        run_flow(&mut self.devices[i], flow, &mut InProcess(&mut self.agent), &policy)
    }

    /// First issue, first cloud key and a cloud login.
    pub fn provision(&mut self, i: usize) -> Result<(), DeviceError> {
        self.run(i, Flow::AkInit)?;
        self.run(i, Flow::CkUpdate)?;
        self.login(i);
        Ok(())
    }

    pub fn login(&self, i: usize) -> AuthOutcome {
        self.cloud.login(&self.devices[i])
    }

    /// Every key a device holds is accepted by the peer that checks it.
    pub fn consistency(&self, i: usize) -> Result<(), String> {
        check_consistency(&self.devices[i], &self.agent, &self.cloud)
    }
}

pub fn check_consistency(device: &Device, agent: &Agent, cloud: &CloudStub) -> Result<(), String> {
    let id = device.identity().id;
    let scan = device.flash().scan();
    match (scan.key(KeyKind::AgentKey), scan.key(KeyKind::ProductKey)) {
        (Some(ak), _) => {
            if !agent.registry().accept_set(&id).contains(&ak) {
                return Err(format!("{id}: agent key {} not accepted by the agent", ak.fingerprint()));
            }
        }
        (None, Some(pk)) => {
            let po = device.identity().po;
            if agent.registry().product_order(&po).map(|r| r.pk) != Some(pk) {
                return Err(format!("{id}: product key not known for its order"));
            }
        }
        (None, None) => return Err(format!("{id}: device holds no agent or product key")),
    }
    if let Some(ck) = scan.key(KeyKind::CloudKey) {
        if !cloud.accept_set(id).contains(&ck) {
            return Err(format!("{id}: cloud key {} not accepted by the cloud", ck.fingerprint()));
        }
    }
    Ok(())
}

/// Number of keys in `keys` that appear more than once, plus any that
/// equal a product key.
pub fn duplicate_count(keys: &[SymmetricKey], product_keys: &[SymmetricKey]) -> usize {
    let mut seen: BTreeMap<SymmetricKey, usize> = BTreeMap::new();
    for k in keys {
        *seen.entry(*k).or_default() += 1;
    }
    seen.values().filter(|&&c| c > 1).map(|c| c - 1).sum::<usize>() + keys.iter().filter(|k| product_keys.contains(k)).count()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub passed: u64,
    pub failed: u64,
}

impl Tally {
    pub fn record(&mut self, ok: bool) {
        if ok {
            self.passed += 1;
        } else {
            self.failed += 1;
        }
    }
}
