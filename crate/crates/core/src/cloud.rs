//! Mock IoT cloud holding the per-device cloud key window.
//!
//! Each device has at most one current key and a list of registered but
//! unactivated keys. Both are accepted for authentication until an
//! activation retires everything except the activated key. Retired keys
//! never return.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io;
use std::net::{SocketAddr, ToSocketAddrs};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{verify_mac, KeyRng, SymmetricKey, TAG_LEN};
use crate::net::{serve_frames, FrameClient, FrameHandler, ServiceHandle};
use crate::protocol::device::Device;
use crate::protocol::wire::{DeviceId, Frame};

pub const CHALLENGE_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CloudError {
    #[error("cloud unreachable: {0}")]
    Unavailable(String),
    #[error("device {0} is blocked")]
    Blocked(DeviceId),
    #[error("no pending key to activate for {0}")]
    NothingPending(DeviceId),
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloudKeyGrant {
    pub key: SymmetricKey,
    pub connection_info: Vec<u8>,
}

/// Operations the agent needs from the cloud.
pub trait CloudApi: Send {
    fn register_new_key(&mut self, id: DeviceId) -> Result<CloudKeyGrant, CloudError>;
    /// Make the most recently registered key the only enabled one.
    fn activate_new_disable_old(&mut self, id: DeviceId) -> Result<(), CloudError>;
    fn disable(&mut self, id: DeviceId) -> Result<(), CloudError>;
}

/// A cloud that is never reachable.
#[derive(Debug, Default, Clone, Copy)]
pub struct OfflineCloud;

impl CloudApi for OfflineCloud {
    fn register_new_key(&mut self, _: DeviceId) -> Result<CloudKeyGrant, CloudError> {
        Err(CloudError::Unavailable("offline".into()))
    }
    fn activate_new_disable_old(&mut self, _: DeviceId) -> Result<(), CloudError> {
        Err(CloudError::Unavailable("offline".into()))
    }
    fn disable(&mut self, _: DeviceId) -> Result<(), CloudError> {
        Err(CloudError::Unavailable("offline".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudConfig {
    /// First successful login with a pending key activates it.
    pub auto_activate_on_auth: bool,
    pub endpoint: String,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self { auto_activate_on_auth: true, endpoint: "mqtts://cloud.example".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudDeviceRecord {
    pub id: DeviceId,
    pub current: Option<SymmetricKey>,
    pub pending: Vec<SymmetricKey>,
    pub generation: u32,
    pub connection_info: String,
    pub blocked: bool,
    pub auth_ok: u64,
    pub auth_failed: u64,
}

impl CloudDeviceRecord {
    fn new(id: DeviceId) -> Self {
        Self {
            id,
            current: None,
            pending: Vec::new(),
            generation: 0,
            connection_info: String::new(),
            blocked: false,
            auth_ok: 0,
            auth_failed: 0,
        }
    }

    /// The key being replaced.
    pub fn old_key(&self) -> Option<SymmetricKey> {
        self.current
    }

    /// The newest registered key awaiting activation.
    pub fn new_key(&self) -> Option<SymmetricKey> {
        self.pending.last().copied()
    }

    pub fn accept_set(&self) -> Vec<SymmetricKey> {
        if self.blocked {
            return Vec::new();
        }
        self.current.iter().chain(self.pending.iter()).copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyRole {
    Current,
    Pending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthOutcome {
    Accepted { role: KeyRole, activated: bool },
    Rejected,
}

impl AuthOutcome {
    pub fn accepted(self) -> bool {
        matches!(self, AuthOutcome::Accepted { .. })
    }
}

struct CloudState {
    records: BTreeMap<DeviceId, CloudDeviceRecord>,
    challenges: HashMap<DeviceId, [u8; CHALLENGE_LEN]>,
    retired: HashSet<SymmetricKey>,
    rng: KeyRng,
}

pub struct CloudStub {
    config: CloudConfig,
    state: Mutex<CloudState>,
}

impl std::fmt::Debug for CloudStub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CloudStub").field("config", &self.config).finish()
    }
}

impl CloudStub {
    pub fn new(config: CloudConfig, seed: Option<u64>) -> Self {
        Self {
            config,
            state: Mutex::new(CloudState {
                records: BTreeMap::new(),
                challenges: HashMap::new(),
                retired: HashSet::new(),
                rng: KeyRng::new(seed),
            }),
        }
    }

    pub fn shared(config: CloudConfig, seed: Option<u64>) -> Arc<Self> {
        Arc::new(Self::new(config, seed))
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, CloudState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn config(&self) -> &CloudConfig {
        &self.config
    }

    pub fn register_new_key(&self, id: DeviceId) -> Result<CloudKeyGrant, CloudError> {
        let mut st = self.lock();
        let st = &mut *st;
        let rec = st.records.entry(id).or_insert_with(|| CloudDeviceRecord::new(id));
        if rec.blocked {
            return Err(CloudError::Blocked(id));
        }
        let key = loop {
            let k = st.rng.key();
            if !st.retired.contains(&k) && rec.current != Some(k) && !rec.pending.contains(&k) {
                break k;
            }
        };
        rec.generation += 1;
        rec.connection_info = format!("{}/devices/{}?gen={}", self.config.endpoint, id, rec.generation);
        rec.pending.push(key);
        log::debug!("cloud: registered key {} for {id}", key.fingerprint());
        Ok(CloudKeyGrant { key, connection_info: rec.connection_info.clone().into_bytes() })
    }

    pub fn activate_new_disable_old(&self, id: DeviceId) -> Result<(), CloudError> {
        let mut st = self.lock();
        let rec = st.records.get(&id).ok_or(CloudError::UnknownDevice(id))?;
        let key = rec.new_key().ok_or(CloudError::NothingPending(id))?;
        Self::activate(&mut st, id, key);
        Ok(())
    }

    fn activate(st: &mut CloudState, id: DeviceId, key: SymmetricKey) {
        let rec = st.records.get_mut(&id).expect("caller checked");
        let retiring: Vec<_> = rec.current.iter().chain(rec.pending.iter()).copied().filter(|k| *k != key).collect();
        rec.current = Some(key);
        rec.pending.clear();
        st.retired.extend(retiring);
        log::debug!("cloud: {id} now uses {}", key.fingerprint());
    }

    pub fn disable(&self, id: DeviceId) -> Result<(), CloudError> {
        let mut st = self.lock();
        let st = &mut *st;
        let rec = st.records.entry(id).or_insert_with(|| CloudDeviceRecord::new(id));
        st.retired.extend(rec.current.take());
        st.retired.extend(rec.pending.drain(..));
        rec.blocked = true;
        Ok(())
    }

    pub fn accept_set(&self, id: DeviceId) -> Vec<SymmetricKey> {
        self.lock().records.get(&id).map(CloudDeviceRecord::accept_set).unwrap_or_default()
    }

    pub fn record(&self, id: DeviceId) -> Option<CloudDeviceRecord> {
        self.lock().records.get(&id).cloned()
    }

    pub fn is_retired(&self, key: &SymmetricKey) -> bool {
        self.lock().retired.contains(key)
    }

    pub fn challenge(&self, id: DeviceId) -> [u8; CHALLENGE_LEN] {
        let mut st = self.lock();
        let mut c = [0u8; CHALLENGE_LEN];
        st.rng.fill(&mut c);
        st.challenges.insert(id, c);
        c
    }

    /// Check `proof` against an outstanding challenge. The challenge is
    /// consumed either way.
    pub fn authenticate(&self, id: DeviceId, challenge: &[u8], proof: &[u8]) -> AuthOutcome {
        let mut st = self.lock();
        let st = &mut *st;
        let issued = st.challenges.remove(&id);
        let Some(rec) = st.records.get_mut(&id) else { return AuthOutcome::Rejected };
        if issued.as_ref().map(|c| &c[..]) != Some(challenge) || rec.blocked {
            rec.auth_failed += 1;
            return AuthOutcome::Rejected;
        }
        let matches = |k: &SymmetricKey| verify_mac(k, &[b"otakey-cloud-auth", &id.0, challenge], proof);
        if rec.current.as_ref().is_some_and(matches) {
            rec.auth_ok += 1;
            return AuthOutcome::Accepted { role: KeyRole::Current, activated: false };
        }
        let Some(key) = rec.pending.iter().copied().find(|k| matches(k)) else {
            rec.auth_failed += 1;
            return AuthOutcome::Rejected;
        };
        rec.auth_ok += 1;
        let activated = self.config.auto_activate_on_auth;
        if activated {
            Self::activate(st, id, key);
        }
        AuthOutcome::Accepted { role: KeyRole::Pending, activated }
    }

    /// In-process login for an emulated device.
    pub fn login(&self, device: &Device) -> AuthOutcome {
        let id = device.identity().id;
        let challenge = self.challenge(id);
        match device.cloud_proof(&challenge) {
            Some(proof) => self.authenticate(id, &challenge, &proof),
            None => {
                self.authenticate(id, &challenge, &[0u8; TAG_LEN]);
                AuthOutcome::Rejected
            }
        }
    }

    pub fn dump(&self) -> Vec<CloudDeviceRecord> {
        self.lock().records.values().cloned().collect()
    }

    pub fn dump_json(&self) -> serde_json::Value {
        serde_json::to_value(self.dump()).expect("cloud records serialize")
    }
}

impl CloudApi for Arc<CloudStub> {
    fn register_new_key(&mut self, id: DeviceId) -> Result<CloudKeyGrant, CloudError> {
        CloudStub::register_new_key(self, id)
    }
    fn activate_new_disable_old(&mut self, id: DeviceId) -> Result<(), CloudError> {
        CloudStub::activate_new_disable_old(self, id)
    }
    fn disable(&mut self, id: DeviceId) -> Result<(), CloudError> {
        CloudStub::disable(self, id)
    }
}

/// Frame type codes on the cloud link.
pub mod ops {
    pub const REGISTER: u8 = 0x41;
    pub const GRANT: u8 = 0x42;
    pub const ACTIVATE: u8 = 0x43;
    pub const OK: u8 = 0x44;
    pub const DISABLE: u8 = 0x45;
    pub const CHALLENGE: u8 = 0x46;
    pub const CHALLENGE_REPLY: u8 = 0x47;
    pub const AUTH: u8 = 0x48;
    pub const AUTH_REPLY: u8 = 0x49;
    pub const DUMP: u8 = 0x4A;
    pub const DUMP_REPLY: u8 = 0x4B;
    pub const ERROR: u8 = 0x4F;
}

fn error_frame(e: &CloudError) -> Frame {
    Frame::new(ops::ERROR, vec![], e.to_string().into_bytes())
}

fn handle_frame(stub: &CloudStub, f: Frame) -> Frame {
    if f.msg_type == ops::DUMP {
        return Frame::new(ops::DUMP_REPLY, vec![], stub.dump_json().to_string().into_bytes());
    }
    let Some(id) = DeviceId::from_slice(&f.header) else {
        return error_frame(&CloudError::Protocol("header must be a device id".into()));
    };
    let result = match f.msg_type {
        ops::REGISTER => stub.register_new_key(id).map(|g| {
            Frame::new(ops::GRANT, vec![], [&g.key.as_bytes()[..], &g.connection_info].concat())
        }),
        ops::ACTIVATE => stub.activate_new_disable_old(id).map(|_| Frame::new(ops::OK, vec![], vec![])),
        ops::DISABLE => stub.disable(id).map(|_| Frame::new(ops::OK, vec![], vec![])),
        ops::CHALLENGE => Ok(Frame::new(ops::CHALLENGE_REPLY, vec![], stub.challenge(id).to_vec())),
        ops::AUTH if f.body.len() == CHALLENGE_LEN + TAG_LEN => {
            let out = stub.authenticate(id, &f.body[..CHALLENGE_LEN], &f.body[CHALLENGE_LEN..]);
            let body = match out {
                AuthOutcome::Accepted { role, activated } => vec![1, (role == KeyRole::Pending) as u8, activated as u8],
                AuthOutcome::Rejected => vec![0, 0, 0],
            };
            Ok(Frame::new(ops::AUTH_REPLY, vec![], body))
        }
        other => Err(CloudError::Protocol(format!("unexpected frame type {other:#04x}"))),
    };
    result.unwrap_or_else(|e| error_frame(&e))
}

pub fn serve<A: ToSocketAddrs>(stub: Arc<CloudStub>, addr: A) -> io::Result<ServiceHandle> {
    let handler: FrameHandler = Arc::new(move |f| Some(handle_frame(&stub, f)));
    serve_frames(addr, "cloud", handler)
}

/// TCP client for a remote [`CloudStub`].
pub struct CloudClient(FrameClient);

impl CloudClient {
    pub fn new(addr: SocketAddr) -> Self {
        Self(FrameClient::new(addr))
    }

    fn call(&mut self, op: u8, id: Option<DeviceId>, body: Vec<u8>, expect: u8) -> Result<Vec<u8>, CloudError> {
        let header = id.map(|i| i.0.to_vec()).unwrap_or_default();
        let reply = self.0.call(&Frame::new(op, header, body)).map_err(|e| CloudError::Unavailable(e.to_string()))?;
        if reply.msg_type == ops::ERROR {
            let msg = String::from_utf8_lossy(&reply.body).into_owned();
            return Err(match id {
                Some(id) if msg.contains("blocked") => CloudError::Blocked(id),
                Some(id) if msg.contains("no pending") => CloudError::NothingPending(id),
                _ => CloudError::Protocol(msg),
            });
        }
        if reply.msg_type != expect {
            return Err(CloudError::Protocol(format!("unexpected reply type {:#04x}", reply.msg_type)));
        }
        Ok(reply.body)
    }

    pub fn login(&mut self, device: &Device) -> Result<AuthOutcome, CloudError> {
        let id = device.identity().id;
        let challenge = self.call(ops::CHALLENGE, Some(id), vec![], ops::CHALLENGE_REPLY)?;
        let proof = device.cloud_proof(&challenge).unwrap_or([0u8; TAG_LEN]);
        let body = self.call(ops::AUTH, Some(id), [&challenge[..], &proof].concat(), ops::AUTH_REPLY)?;
        Ok(match body.as_slice() {
            [1, pending, activated] => AuthOutcome::Accepted {
                role: if *pending == 1 { KeyRole::Pending } else { KeyRole::Current },
                activated: *activated == 1,
            },
            _ => AuthOutcome::Rejected,
        })
    }

    pub fn dump(&mut self) -> Result<Vec<CloudDeviceRecord>, CloudError> {
        let body = self.call(ops::DUMP, None, vec![], ops::DUMP_REPLY)?;
        serde_json::from_slice(&body).map_err(|e| CloudError::Protocol(e.to_string()))
    }
}

impl CloudApi for CloudClient {
    fn register_new_key(&mut self, id: DeviceId) -> Result<CloudKeyGrant, CloudError> {
        let body = self.call(ops::REGISTER, Some(id), vec![], ops::GRANT)?;
        if body.len() < 16 {
            return Err(CloudError::Protocol("short grant".into()));
        }
        Ok(CloudKeyGrant {
            key: SymmetricKey::from_slice(&body[..16]).expect("len checked"),
            connection_info: body[16..].to_vec(),
        })
    }
    fn activate_new_disable_old(&mut self, id: DeviceId) -> Result<(), CloudError> {
        self.call(ops::ACTIVATE, Some(id), vec![], ops::OK).map(|_| ())
    }
    fn disable(&mut self, id: DeviceId) -> Result<(), CloudError> {
        self.call(ops::DISABLE, Some(id), vec![], ops::OK).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::device::cloud_auth_proof;

    fn id() -> DeviceId {
        DeviceId([4; 12])
    }

    fn proof(stub: &CloudStub, key: &SymmetricKey) -> AuthOutcome {
        let c = stub.challenge(id());
        stub.authenticate(id(), &c, &cloud_auth_proof(key, id(), &c))
    }

    #[test]
    fn window_accepts_both_then_only_new() {
        let stub = CloudStub::new(CloudConfig { auto_activate_on_auth: false, ..Default::default() }, Some(1));
        let k1 = stub.register_new_key(id()).unwrap().key;
        stub.activate_new_disable_old(id()).unwrap();
        let k2 = stub.register_new_key(id()).unwrap().key;
        assert_eq!(stub.accept_set(id()), vec![k1, k2]);
        assert_eq!(proof(&stub, &k1), AuthOutcome::Accepted { role: KeyRole::Current, activated: false });
        assert_eq!(proof(&stub, &k2), AuthOutcome::Accepted { role: KeyRole::Pending, activated: false });
        stub.activate_new_disable_old(id()).unwrap();
        assert_eq!(stub.accept_set(id()), vec![k2]);
        assert_eq!(proof(&stub, &k1), AuthOutcome::Rejected);
        assert!(stub.is_retired(&k1));
        assert!(matches!(stub.activate_new_disable_old(id()), Err(CloudError::NothingPending(_))));
    }

    #[test]
    fn first_login_with_new_key_activates_it() {
        let stub = CloudStub::new(CloudConfig::default(), Some(2));
        let k1 = stub.register_new_key(id()).unwrap().key;
        assert_eq!(proof(&stub, &k1), AuthOutcome::Accepted { role: KeyRole::Pending, activated: true });
        let k2 = stub.register_new_key(id()).unwrap().key;
        let k3 = stub.register_new_key(id()).unwrap().key;
        assert_eq!(stub.accept_set(id()), vec![k1, k2, k3]);
        assert_eq!(proof(&stub, &k2), AuthOutcome::Accepted { role: KeyRole::Pending, activated: true });
        assert_eq!(stub.accept_set(id()), vec![k2]);
        assert_eq!(proof(&stub, &k3), AuthOutcome::Rejected);
    }

    #[test]
    fn challenges_are_single_use_and_bound_to_the_device() {
        let stub = CloudStub::new(CloudConfig::default(), Some(3));
        let k = stub.register_new_key(id()).unwrap().key;
        let c = stub.challenge(id());
        let p = cloud_auth_proof(&k, id(), &c);
        assert!(stub.authenticate(id(), &c, &p).accepted());
        assert!(!stub.authenticate(id(), &c, &p).accepted());
        let c = stub.challenge(id());
        assert!(!stub.authenticate(id(), &c, &cloud_auth_proof(&k, DeviceId([5; 12]), &c)).accepted());
        assert_eq!(stub.record(id()).unwrap().auth_failed, 2);
    }

    #[test]
    fn disabled_device_is_blocked_for_good() {
        let stub = CloudStub::new(CloudConfig::default(), Some(4));
        let k = stub.register_new_key(id()).unwrap().key;
        stub.disable(id()).unwrap();
        assert!(stub.accept_set(id()).is_empty());
        assert_eq!(proof(&stub, &k), AuthOutcome::Rejected);
        assert!(matches!(stub.register_new_key(id()), Err(CloudError::Blocked(_))));
    }

    #[test]
    fn connection_info_names_device_and_generation() {
        let stub = CloudStub::new(CloudConfig::default(), Some(5));
        let g = stub.register_new_key(id()).unwrap();
        let s = String::from_utf8(g.connection_info).unwrap();
        assert!(s.ends_with(&format!("{}?gen=1", id())));
    }

    #[test]
    fn tcp_client_mirrors_in_process_calls() {
        let stub = CloudStub::shared(CloudConfig { auto_activate_on_auth: false, ..Default::default() }, Some(6));
        let srv = serve(stub.clone(), "127.0.0.1:0").unwrap();
        let mut c = CloudClient::new(srv.addr());
        let g = c.register_new_key(id()).unwrap();
        assert_eq!(stub.record(id()).unwrap().new_key(), Some(g.key));
        c.activate_new_disable_old(id()).unwrap();
        assert_eq!(stub.accept_set(id()), vec![g.key]);
        assert!(matches!(c.activate_new_disable_old(id()), Err(CloudError::NothingPending(_))));
        assert_eq!(c.dump().unwrap().len(), 1);
        c.disable(id()).unwrap();
        assert!(matches!(c.register_new_key(id()), Err(CloudError::Blocked(_))));
    }
}
