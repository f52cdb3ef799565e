//! Agent-side protocol handling over the registry and the cloud.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::wire::*;
use super::Flow;
use crate::agent_server::registry::{
    AnomalyReport, DeviceStatus, JournalEvent, Registry, RegistryError, RevokeTarget,
};
use crate::clock::Clock;
use crate::cloud::{CloudApi, CloudError};
use crate::crypto::{mac_parts, open, seal, KeyRng, Nonce, SealedMessage, SymmetricKey};

#[derive(Debug, Clone)]
struct AgentSession {
    flow: Flow,
    po: ProductOrder,
    nonce2: Nonce,
    auth_key: SymmetricKey,
    new_key: SymmetricKey,
}

enum Fail {
    Code(ErrorCode),
    Crashed,
}

impl From<ErrorCode> for Fail {
    fn from(c: ErrorCode) -> Self {
        Fail::Code(c)
    }
}

impl From<RegistryError> for Fail {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::Crashed => Fail::Crashed,
            other => {
                log::error!("registry commit failed: {other}");
                Fail::Code(ErrorCode::Busy)
            }
        }
    }
}

impl From<CloudError> for Fail {
    fn from(e: CloudError) -> Self {
        log::warn!("cloud call failed: {e}");
        match e {
            CloudError::Blocked(_) => Fail::Code(ErrorCode::Revoked),
            _ => Fail::Code(ErrorCode::CloudUnavailable),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentStats {
    pub requests: u64,
    pub aks_issued: u64,
    pub aks_activated: u64,
    pub aks_promoted: u64,
    pub cloud_keys_issued: u64,
    pub cloud_keys_activated: u64,
    pub rejected: u64,
}

pub struct Agent {
    registry: Registry,
    cloud: Box<dyn CloudApi>,
    rng: KeyRng,
    clock: Clock,
    sessions: HashMap<DeviceId, AgentSession>,
    stats: AgentStats,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent").field("registry", &self.registry).field("stats", &self.stats).finish()
    }
}

impl Agent {
    pub fn new(registry: Registry, cloud: Box<dyn CloudApi>, clock: Clock, seed: Option<u64>) -> Self {
        Self { registry, cloud, rng: KeyRng::new(seed), clock, sessions: HashMap::new(), stats: AgentStats::default() }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut Registry {
        &mut self.registry
    }

    pub fn into_registry(self) -> Registry {
        self.registry
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn stats(&self) -> &AgentStats {
        &self.stats
    }

    pub fn is_down(&self) -> bool {
        self.registry.is_dead()
    }

    /// Reply to one device message; `None` when the agent is down and the
    /// connection should simply drop.
    pub fn handle(&mut self, msg: &ProtocolMessage) -> Option<ProtocolMessage> {
        if self.registry.is_dead() {
            return None;
        }
        self.stats.requests += 1;
        let result = match msg.msg_type {
            MsgType::AkRequest => self.on_ak_request(msg),
            MsgType::AkConfirm => self.on_ak_confirm(msg),
            MsgType::CkRequest => self.on_ck_request(msg),
            MsgType::CkConfirm => self.on_ck_confirm(msg),
            _ => Err(ErrorCode::Malformed.into()),
        };
        match result {
            Ok(reply) => Some(reply),
            Err(Fail::Crashed) => None,
            Err(Fail::Code(code)) => {
                self.stats.rejected += 1;
                log::debug!("agent rejects {:?}: {code:?}", msg.msg_type);
                Some(ProtocolMessage::error(code))
            }
        }
    }

    /// Raw-frame entry point for servers.
    pub fn handle_frame(&mut self, frame: &Frame) -> Option<Frame> {
        match ProtocolMessage::from_frame(frame) {
            Ok(msg) => self.handle(&msg).map(|r| r.to_frame()),
            Err(_) if self.registry.is_dead() => None,
            Err(_) => Some(ProtocolMessage::error(ErrorCode::Malformed).to_frame()),
        }
    }

    fn seal(&mut self, key: &SymmetricKey, plain: &[u8]) -> SealedMessage {
        seal(key, plain, &mut self.rng).expect("protocol payloads are small")
    }

    fn body(msg: &ProtocolMessage) -> Result<&SealedMessage, Fail> {
        msg.body.as_ref().ok_or(Fail::Code(ErrorCode::Malformed))
    }

    /// Open with the active key, then the pending one. Success with the
    /// pending key proves the device holds it, so it becomes active.
    fn open_with_device_key(&mut self, id: DeviceId, body: &SealedMessage) -> Result<(SymmetricKey, Vec<u8>), Fail> {
        let entry = self.registry.get(&id).ok_or(ErrorCode::Rejected)?;
        if entry.status == DeviceStatus::Revoked || self.registry.is_po_revoked(&entry.po) {
            return Err(ErrorCode::Revoked.into());
        }
        let (po, ak, pending) = (entry.po, entry.ak, entry.pending_ak);
        if let Some(plain) = ak.and_then(|k| open(&k, body).ok()) {
            return Ok((ak.expect("checked"), plain));
        }
        let Some(k) = pending else { return Err(ErrorCode::Rejected.into()) };
        let plain = open(&k, body).map_err(|_| ErrorCode::Rejected)?;
        self.registry.commit(self.clock.now(), Some(id), po, JournalEvent::AkActivated, Some(&k))?;
        self.stats.aks_promoted += 1;
        if self.sessions.get(&id).is_some_and(|s| s.new_key == k) {
            self.sessions.remove(&id);
        }
        log::info!("agent: {id} proved pending key {}, promoted", k.fingerprint());
        Ok((k, plain))
    }

    fn on_ak_request(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, Fail> {
        let (po, rotating) = header::parse_ak_request(&msg.header).map_err(|_| ErrorCode::Malformed)?;
        let body = Self::body(msg)?;
        let (flow, auth_key, request) = match rotating {
            None => {
                let record = self.registry.product_order(&po).ok_or(ErrorCode::UnknownPo)?;
                let pk = record.pk;
                if self.registry.is_po_revoked(&po) {
                    return Err(ErrorCode::Revoked.into());
                }
                let plain = open(&pk, body).map_err(|_| ErrorCode::Rejected)?;
                let req = AkRequestPayload::decode(&plain).map_err(|_| ErrorCode::Malformed)?;
                if let Some(e) = self.registry.get(&req.id) {
                    if e.po != po {
                        return Err(ErrorCode::Rejected.into());
                    }
                    match e.status {
                        DeviceStatus::Revoked => return Err(ErrorCode::Revoked.into()),
                        DeviceStatus::Active if !e.reprovision_allowed => return Err(ErrorCode::AlreadyProvisioned.into()),
                        _ => {}
                    }
                }
                (Flow::AkInit, pk, req)
            }
            Some(id) => {
                if self.registry.get(&id).is_some_and(|e| e.po != po) {
                    return Err(ErrorCode::Rejected.into());
                }
                let (key, plain) = self.open_with_device_key(id, body)?;
                let req = AkRequestPayload::decode(&plain).map_err(|_| ErrorCode::Malformed)?;
                if req.id != id {
                    return Err(ErrorCode::Rejected.into());
                }
                (Flow::AkRotate, key, req)
            }
        };

        let new_ak = self.rng.key();
        let nonce2 = self.rng.nonce();
        self.registry.commit(self.clock.now(), Some(request.id), po, JournalEvent::AkIssued, Some(&new_ak))?;
        self.stats.aks_issued += 1;
        if let Some(old) = self.sessions.insert(request.id, AgentSession { flow, po, nonce2, auth_key, new_key: new_ak }) {
            log::debug!("agent: {} superseded an open {} session", request.id, old.flow);
        }

        let payload = AkResponsePayload { ak: new_ak, nonce1: request.nonce1, nonce2 };
        let inner_mac = mac_parts(&new_ak, &[&payload.mac_input()]);
        let sealed = self.seal(&auth_key, &payload.encode());
        Ok(ProtocolMessage::sealed(MsgType::AkResponse, inner_mac.to_vec(), sealed))
    }

    /// A failed confirm voids the session. The issued key stays in the
    /// accept set because the device may already have committed it.
    fn take_session(&mut self, msg: &ProtocolMessage, flows: &[Flow]) -> Result<(DeviceId, AgentSession), Fail> {
        let id = header::parse_id(msg.msg_type, &msg.header).map_err(|_| ErrorCode::Malformed)?;
        match self.sessions.get(&id) {
            Some(s) if flows.contains(&s.flow) => Ok((id, self.sessions.remove(&id).expect("present"))),
            _ => Err(ErrorCode::NoSession.into()),
        }
    }

    fn on_ak_confirm(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, Fail> {
        let (id, sess) = self.take_session(msg, &[Flow::AkInit, Flow::AkRotate])?;
        let body = Self::body(msg)?;
        let plain = open(&sess.new_key, body).map_err(|_| ErrorCode::Rejected)?;
        let confirm = AkConfirmPayload::decode(&plain).map_err(|_| ErrorCode::Malformed)?;
        if confirm.nonce2 != sess.nonce2 {
            return Err(ErrorCode::Rejected.into());
        }
        self.registry.commit(self.clock.now(), Some(id), sess.po, JournalEvent::AkActivated, Some(&sess.new_key))?;
        self.stats.aks_activated += 1;
        log::debug!("agent: {id} confirmed {} (nonce3 {})", sess.flow, hex::encode(confirm.nonce3.0));
        let ack = self.seal(&sess.new_key, &AckPayload { nonce3: confirm.nonce3 }.encode(MsgType::AkAck));
        Ok(ProtocolMessage::sealed(MsgType::AkAck, Vec::new(), ack))
    }

    fn on_ck_request(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, Fail> {
        let id = header::parse_id(msg.msg_type, &msg.header).map_err(|_| ErrorCode::Malformed)?;
        let body = Self::body(msg)?;
        let (ak, plain) = self.open_with_device_key(id, body)?;
        let request = CkRequestPayload::decode(&plain).map_err(|_| ErrorCode::Malformed)?;
        let po = self.registry.get(&id).expect("opened above").po;

        let grant = self.cloud.register_new_key(id)?;
        self.registry.commit(self.clock.now(), Some(id), po, JournalEvent::CkRegistered, None)?;
        self.stats.cloud_keys_issued += 1;
        let nonce2 = self.rng.nonce();
        self.sessions.insert(id, AgentSession { flow: Flow::CkUpdate, po, nonce2, auth_key: ak, new_key: grant.key });

        let payload = CkResponsePayload {
            cloud_key: grant.key,
            connection_info: grant.connection_info,
            nonce1: request.nonce1,
            nonce2,
        };
        let sealed = self.seal(&ak, &payload.encode());
        Ok(ProtocolMessage::sealed(MsgType::CkResponse, Vec::new(), sealed))
    }

    fn on_ck_confirm(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, Fail> {
        let (id, sess) = self.take_session(msg, &[Flow::CkUpdate])?;
        let body = Self::body(msg)?;
        let plain = open(&sess.auth_key, body).map_err(|_| ErrorCode::Rejected)?;
        let confirm = CkConfirmPayload::decode(&plain).map_err(|_| ErrorCode::Malformed)?;
        if confirm.nonce2 != sess.nonce2 {
            return Err(ErrorCode::Rejected.into());
        }
        self.cloud.activate_new_disable_old(id)?;
        self.registry.commit(self.clock.now(), Some(id), sess.po, JournalEvent::CkActivated, None)?;
        self.stats.cloud_keys_activated += 1;
        log::debug!("agent: {id} confirmed cloud key {} (nonce3 {})", sess.new_key.fingerprint(), hex::encode(confirm.nonce3.0));
        let ack = self.seal(&sess.auth_key, &AckPayload { nonce3: confirm.nonce3 }.encode(MsgType::CkAck));
        Ok(ProtocolMessage::sealed(MsgType::CkAck, Vec::new(), ack))
    }

    /// Revoke one device or a whole product order. Returns the number of
    /// device entries newly revoked.
    pub fn revoke(&mut self, target: RevokeTarget) -> Result<usize, RegistryError> {
        let now = self.clock.now();
        let targets = self.registry.revoke_targets(target);
        for (id, po) in &targets {
            self.registry.commit(now, Some(*id), *po, JournalEvent::Revoked, None)?;
            self.sessions.remove(id);
            if let Err(e) = self.cloud.disable(*id) {
                log::warn!("cloud disable for {id} failed: {e}");
            }
        }
        if let RevokeTarget::Po(po) = target {
            if !self.registry.is_po_revoked(&po) {
                self.registry.commit(now, None, po, JournalEvent::PoRevoked, None)?;
            }
        }
        Ok(targets.len())
    }

    /// Operator override letting an active device run first issue again.
    pub fn allow_reprovision(&mut self, id: DeviceId) -> Result<bool, RegistryError> {
        let Some(e) = self.registry.get(&id) else { return Ok(false) };
        let po = e.po;
        self.registry.commit(self.clock.now(), Some(id), po, JournalEvent::ReprovisionAllowed, None)?;
        Ok(true)
    }

    pub fn anomaly_scan(&self, po: &ProductOrder) -> Option<AnomalyReport> {
        self.registry.anomaly_scan(po)
    }
}
