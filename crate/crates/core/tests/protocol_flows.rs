use std::collections::HashSet;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use otakey_core::agent_server::registry::{load_product_orders, save_product_orders, RevokeTarget};
use otakey_core::agent_server::{self, AgentConfig, CloudLink, InProcess};
use otakey_core::cloud::{self, CloudClient, CloudConfig, CloudStub};
use otakey_core::net::TcpTransport;
use otakey_core::protocol::device::{run_flow, RetryPolicy, Transport, TransportError, TransportErrorKind};
use otakey_core::protocol::wire::ErrorCode;
use otakey_core::scenario::{sample_firmware, World, EPOCH};
use otakey_core::{Clock, Device, DeviceError, DeviceId, DeviceIdentity, Flow, KeyKind, ProtocolMessage};
use proptest::prelude::*;

/// Loses the first `drops` requests, then forwards to the agent.
struct Lossy<'a> {
    inner: InProcess<'a>,
    drops: usize,
    seen: usize,
}

impl Transport for Lossy<'_> {
    fn exchange(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, TransportError> {
        self.seen += 1;
        if self.seen <= self.drops {
            return Err(TransportError::new(TransportErrorKind::Timeout, "dropped"));
        }
        self.inner.exchange(msg)
    }
}

fn recording_policy(max_retries: u32) -> (RetryPolicy, Arc<Mutex<Vec<Duration>>>) {
    let waits = Arc::new(Mutex::new(Vec::new()));
    let w = waits.clone();
    let policy = RetryPolicy {
        max_retries,
        base_delay: Duration::from_millis(250),
        sleeper: Arc::new(move |d| w.lock().unwrap().push(d)),
    };
    (policy, waits)
}

#[test]
fn retries_back_off_exponentially_then_give_up() {
    let mut w = World::new(1, 1);
    let (policy, waits) = recording_policy(3);
    let mut t = Lossy { inner: InProcess(&mut w.agent), drops: usize::MAX, seen: 0 };
    let err = run_flow(&mut w.devices[0], Flow::AkInit, &mut t, &policy).unwrap_err();
    assert!(matches!(err, DeviceError::Transport(_)), "{err:?}");
    assert_eq!(t.seen, 4);
    let ms: Vec<u128> = waits.lock().unwrap().iter().map(Duration::as_millis).collect();
    assert_eq!(ms, [250, 500, 1000]);
    assert_eq!(w.devices[0].held_key(KeyKind::ProductKey), Some(w.order.pk));
}

#[test]
fn transient_loss_is_absorbed_by_retries() {
    let mut w = World::new(2, 1);
    let (policy, waits) = recording_policy(3);
    let mut t = Lossy { inner: InProcess(&mut w.agent), drops: 2, seen: 0 };
    let out = run_flow(&mut w.devices[0], Flow::AkInit, &mut t, &policy).unwrap();
    assert_eq!(out.attempts, 3);
    assert!(out.acknowledged);
    assert_eq!(waits.lock().unwrap().len(), 2);
    w.consistency(0).unwrap();
}

#[test]
fn first_issue_happens_once_unless_the_operator_allows_it() {
    let mut w = World::new(3, 2);
    w.run(0, Flow::AkInit).unwrap();
    let order = w.order.clone();
    let mut twin = Device::burn(w.devices[0].identity(), &order.pk, &sample_firmware(256), Some(99)).unwrap();
    let err = run_flow(&mut twin, Flow::AkInit, &mut InProcess(&mut w.agent), &RetryPolicy::none()).unwrap_err();
    assert_eq!(err, DeviceError::Agent(ErrorCode::AlreadyProvisioned));
    assert_eq!(err.exit_label(), "exit_agent_error");

    assert!(w.agent.allow_reprovision(w.devices[0].identity().id).unwrap());
    run_flow(&mut twin, Flow::AkInit, &mut InProcess(&mut w.agent), &RetryPolicy::none()).unwrap();
    assert_ne!(twin.held_key(KeyKind::AgentKey), w.devices[0].held_key(KeyKind::AgentKey));
}

#[test]
fn unknown_order_and_revoked_device_are_refused() {
    let mut w = World::new(4, 2);
    let stranger_order = World::order_for_seed(77, 1);
    let mut stranger = Device::burn(
        DeviceIdentity { id: DeviceId::synthetic(500), po: stranger_order.po },
        &stranger_order.pk,
        &sample_firmware(256),
        Some(1),
    )
    .unwrap();
    let err = run_flow(&mut stranger, Flow::AkInit, &mut InProcess(&mut w.agent), &RetryPolicy::none()).unwrap_err();
    assert_eq!(err, DeviceError::Agent(ErrorCode::UnknownPo));

    w.provision(0).unwrap();
    let id = w.devices[0].identity().id;
    assert_eq!(w.agent.revoke(RevokeTarget::Device(id)).unwrap(), 1);
    assert_eq!(w.run(0, Flow::AkRotate).unwrap_err(), DeviceError::Agent(ErrorCode::Revoked));
    w.provision(1).unwrap();
}

#[test]
fn offline_agent_still_rotates_but_refuses_cloud_keys() {
    let order = World::order_for_seed(5, 1);
    let mut agent = AgentConfig {
        clock: Clock::manual(EPOCH),
        seed: Some(5),
        ..AgentConfig::in_memory(vec![order.clone()], CloudLink::Offline)
    }
    .build()
    .unwrap();
    let mut d = Device::burn(DeviceIdentity { id: DeviceId::synthetic(0), po: order.po }, &order.pk, &sample_firmware(64), Some(5)).unwrap();
    let p = RetryPolicy::none();
    run_flow(&mut d, Flow::AkInit, &mut InProcess(&mut agent), &p).unwrap();
    run_flow(&mut d, Flow::AkRotate, &mut InProcess(&mut agent), &p).unwrap();
    let err = run_flow(&mut d, Flow::CkUpdate, &mut InProcess(&mut agent), &p).unwrap_err();
    assert_eq!(err, DeviceError::Agent(ErrorCode::CloudUnavailable));
    assert!(d.held_key(KeyKind::CloudKey).is_none());
}

#[test]
fn journal_on_disk_survives_an_agent_restart() {
    let dir = tempfile::tempdir().unwrap();
    let orders_path = dir.path().join("orders.json");
    let order = World::order_for_seed(6, 1);
    save_product_orders(&orders_path, std::slice::from_ref(&order)).unwrap();
    let text = std::fs::read_to_string(&orders_path).unwrap();
    assert!(text.contains("\"po_hex\"") && text.contains("\"pk_hex\""), "{text}");
    assert_eq!(load_product_orders(&orders_path).unwrap(), vec![order.clone()]);

    let cloud = CloudStub::shared(CloudConfig::default(), Some(6));
    let config = AgentConfig {
        registry_path: Some(dir.path().join("registry.jsonl")),
        product_orders: vec![order.clone()],
        cloud: CloudLink::Local(cloud.clone()),
        seed: Some(6),
        compact_every: None,
        clock: Clock::manual(EPOCH),
    };
    let mut d = Device::burn(DeviceIdentity { id: DeviceId::synthetic(0), po: order.po }, &order.pk, &sample_firmware(64), Some(6)).unwrap();
    let p = RetryPolicy::none();
    {
        let mut agent = config.build().unwrap();
        run_flow(&mut d, Flow::AkInit, &mut InProcess(&mut agent), &p).unwrap();
        run_flow(&mut d, Flow::CkUpdate, &mut InProcess(&mut agent), &p).unwrap();
    }
    let mut agent = config.build().unwrap();
    let entry = agent.registry().get(&d.identity().id).unwrap();
    assert_eq!(entry.ak, d.held_key(KeyKind::AgentKey));
    run_flow(&mut d, Flow::AkRotate, &mut InProcess(&mut agent), &p).unwrap();
    assert!(cloud.login(&d).accepted());
}

#[test]
fn full_lifecycle_over_loopback_tcp() {
    let stub = CloudStub::shared(CloudConfig::default(), Some(8));
    let mut cloud_service = cloud::serve(stub.clone(), "127.0.0.1:0").unwrap();
    let order = World::order_for_seed(8, 3);
    let agent = AgentConfig {
        clock: Clock::manual(EPOCH),
        seed: Some(8),
        ..AgentConfig::in_memory(vec![order.clone()], CloudLink::Remote(cloud_service.addr()))
    }
    .build()
    .unwrap();
    let service = agent_server::serve(agent, "127.0.0.1:0").unwrap();
    let mut transport = TcpTransport::new(service.addr());
    let mut login = CloudClient::new(cloud_service.addr());
    let p = RetryPolicy::immediate();

    let mut cloud_keys = HashSet::new();
    for i in 0..3 {
        let id = DeviceIdentity { id: DeviceId::synthetic(i), po: order.po };
        let mut d = Device::burn(id, &order.pk, &sample_firmware(128), Some(i)).unwrap();
        for flow in [Flow::AkInit, Flow::CkUpdate, Flow::AkRotate, Flow::CkUpdate] {
            assert!(run_flow(&mut d, flow, &mut transport, &p).unwrap().acknowledged, "{flow}");
        }
        assert!(login.login(&d).unwrap().accepted());
        assert!(d.held_key(KeyKind::ProductKey).is_none());
        cloud_keys.insert(d.held_key(KeyKind::CloudKey).unwrap());
    }
    assert_eq!(cloud_keys.len(), 3);
    let agent = service.shutdown().unwrap();
    assert!(agent_server::lock(&agent).registry().commits() > 0);
    cloud_service.shutdown();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Any interleaving of flows across devices keeps every device's keys
    /// accepted by its peers and never hands two devices the same key.
    #[test]
    fn interleaved_flows_stay_consistent(seed in any::<u64>(), steps in prop::collection::vec((0usize..3, 0usize..3), 1..24)) {
        let mut w = World::new(seed, 3);
        for i in 0..3 {
            w.run(i, Flow::AkInit).unwrap();
        }
        for (i, f) in steps {
            let flow = [Flow::AkInit, Flow::AkRotate, Flow::CkUpdate][f];
            let r = w.run(i, flow);
            if flow == Flow::AkInit {
                prop_assert!(r.is_err());
            } else {
                prop_assert!(r.unwrap().acknowledged);
            }
            prop_assert_eq!(w.consistency(i), Ok(()));
        }
        let aks: HashSet<_> = w.devices.iter().map(|d| d.held_key(KeyKind::AgentKey).unwrap()).collect();
        prop_assert_eq!(aks.len(), 3);
        prop_assert!(!aks.contains(&w.order.pk));
    }
}
