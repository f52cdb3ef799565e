//! Device-side state machine.
//!
//! The device is sans-IO: [`Device::start`], [`Device::on_response`],
//! [`Device::after_confirm`] and [`Device::on_ack`] consume and produce
//! [`ProtocolMessage`]s, and [`run_flow`] drives them over a [`Transport`]
//! with the retry policy.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::wire::*;
use super::Flow;
use crate::crypto::{mac_parts, open, seal, KeyRng, Nonce, SymmetricKey, TAG_LEN};
use crate::flash::{BootScan, FlashError, FlashImage, KeyKind, PendingWrite};

/// Number of recent nonce2 values a device remembers between reboots.
pub const REPLAY_WINDOW: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("envelope or key MAC did not verify")]
    TagMismatch,
    #[error("response does not echo our nonce1")]
    Nonce1Mismatch,
    #[error("nonce2 was already seen")]
    ReplayedNonce2,
    #[error("agent refused: {0:?}")]
    Agent(ErrorCode),
    #[error("expected {expected:?}, got {got:?}")]
    Unexpected { expected: MsgType, got: MsgType },
    #[error("no session in progress")]
    NoSession,
    #[error("flow {0} not possible in the current phase")]
    WrongPhase(Flow),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("flash: {0}")]
    Flash(FlashError),
    #[error("transport: {0}")]
    Transport(String),
}

impl From<FlashError> for DeviceError {
    fn from(e: FlashError) -> Self {
        DeviceError::Flash(e)
    }
}

impl DeviceError {
    pub fn is_power_loss(&self) -> bool {
        matches!(self, DeviceError::Flash(FlashError::PowerLost))
    }

    /// Stable label for reports, naming the check that ended the session.
    pub fn exit_label(&self) -> &'static str {
        match self {
            DeviceError::TagMismatch => "exit_tag_mismatch",
            DeviceError::Nonce1Mismatch => "exit_nonce1_mismatch",
            DeviceError::ReplayedNonce2 => "exit_replayed_nonce2",
            DeviceError::Agent(_) => "exit_agent_error",
            DeviceError::Unexpected { .. } => "exit_unexpected_message",
            DeviceError::NoSession => "exit_no_session",
            DeviceError::WrongPhase(_) => "exit_wrong_phase",
            DeviceError::Malformed(_) => "exit_malformed",
            DeviceError::Flash(FlashError::PowerLost) => "exit_power_lost",
            DeviceError::Flash(_) => "exit_flash_error",
            DeviceError::Transport(_) => "exit_transport",
        }
    }
}

/// Checks a device applies to a response, in the order it applies them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStep {
    Envelope,
    Nonce1,
    Nonce2Fresh,
    InnerMac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub step: CheckStep,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DevicePhase {
    Unprovisioned,
    Burned,
    AkIssued,
    CloudProvisioned,
    Updating(Flow),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Response,
    ConfirmSent,
    Ack,
}

#[derive(Debug, Clone)]
struct Session {
    flow: Flow,
    stage: Stage,
    auth_key: SymmetricKey,
    nonce1: Nonce,
    nonce3: Option<Nonce>,
    ack_key: Option<SymmetricKey>,
    new_key: Option<SymmetricKey>,
    pending: Option<PendingWrite>,
}

#[derive(Clone)]
pub struct Device {
    identity: DeviceIdentity,
    flash: FlashImage,
    rng: KeyRng,
    session: Option<Session>,
    seen_nonce2: VecDeque<Nonce>,
    trace: Vec<CheckRecord>,
    last_confirm_plaintext: Option<Vec<u8>>,
    pinned_nonce1: Option<Nonce>,
}

impl fmt::Debug for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Device")
            .field("identity", &self.identity)
            .field("phase", &self.phase())
            .finish()
    }
}

impl Device {
    pub fn new(identity: DeviceIdentity, flash: FlashImage, seed: Option<u64>) -> Self {
        Self {
            identity,
            flash,
            rng: KeyRng::new(seed),
            session: None,
            seen_nonce2: VecDeque::new(),
            trace: Vec::new(),
            last_confirm_plaintext: None,
            pinned_nonce1: None,
        }
    }

    /// Stage-one manufacturing: blank flash, product key and firmware.
    pub fn burn(identity: DeviceIdentity, pk: &SymmetricKey, firmware: &[u8], seed: Option<u64>) -> Result<Self, DeviceError> {
        let mut flash = FlashImage::default();
        flash.first_stage_burn(pk, firmware)?;
        Ok(Self::new(identity, flash, seed))
    }

    pub fn identity(&self) -> DeviceIdentity {
        self.identity
    }

    pub fn flash(&self) -> &FlashImage {
        &self.flash
    }

    pub fn flash_mut(&mut self) -> &mut FlashImage {
        &mut self.flash
    }

    pub fn into_flash(self) -> FlashImage {
        self.flash
    }

    pub fn held_key(&self, kind: KeyKind) -> Option<SymmetricKey> {
        self.flash.scan().key(kind)
    }

    pub fn phase(&self) -> DevicePhase {
        if let Some(s) = &self.session {
            if s.pending.is_some() || s.stage != Stage::Response {
                return DevicePhase::Updating(s.flow);
            }
        }
        let scan = self.flash.scan();
        match (&scan.product, &scan.agent, &scan.cloud) {
            (_, Some(_), Some(_)) => DevicePhase::CloudProvisioned,
            (_, Some(_), None) => DevicePhase::AkIssued,
            (Some(_), None, _) => DevicePhase::Burned,
            (None, None, _) => DevicePhase::Unprovisioned,
        }
    }

    pub fn check_trace(&self) -> &[CheckRecord] {
        &self.trace
    }

    pub fn clear_trace(&mut self) {
        self.trace.clear();
    }

    /// Plaintext of the most recent confirm this device sealed.
    pub fn last_confirm_plaintext(&self) -> Option<&[u8]> {
        self.last_confirm_plaintext.as_deref()
    }

    /// Power-on: clears RAM state and rolls an interrupted first issue
    /// forward by removing a product key that coexists with an agent key.
    pub fn boot(&mut self) -> Result<BootScan, DeviceError> {
        self.flash.reboot();
        self.session = None;
        self.seen_nonce2.clear();
        let scan = self.flash.boot_scan()?;
        if scan.agent.is_some() && scan.product.is_some() {
            log::info!("device {}: erasing residual product key", self.identity.id);
            self.flash.erase_product_key()?;
            return Ok(self.flash.scan());
        }
        Ok(scan)
    }

    /// Fault injection: every request reuses `nonce1` (a stuck RNG).
    pub fn pin_nonce1(&mut self, nonce1: Option<Nonce>) {
        self.pinned_nonce1 = nonce1;
    }

    /// Drop the in-progress session. Flash is untouched.
    pub fn abort(&mut self) {
        self.session = None;
    }

    pub fn start(&mut self, flow: Flow) -> Result<ProtocolMessage, DeviceError> {
        let scan = self.flash.scan();
        let (auth_key, header) = match flow {
            Flow::AkInit => match (scan.key(KeyKind::ProductKey), scan.agent.is_none()) {
                (Some(pk), true) => (pk, header::ak_request(self.identity.po, None)),
                _ => return Err(DeviceError::WrongPhase(flow)),
            },
            Flow::AkRotate => match scan.key(KeyKind::AgentKey) {
                Some(ak) => (ak, header::ak_request(self.identity.po, Some(self.identity.id))),
                None => return Err(DeviceError::WrongPhase(flow)),
            },
            Flow::CkUpdate => match scan.key(KeyKind::AgentKey) {
                Some(ak) => (ak, header::id(self.identity.id)),
                None => return Err(DeviceError::WrongPhase(flow)),
            },
        };
        let nonce1 = self.pinned_nonce1.unwrap_or_else(|| self.rng.nonce());
        let (msg_type, plain) = match flow {
            Flow::AkInit | Flow::AkRotate => (MsgType::AkRequest, AkRequestPayload { id: self.identity.id, nonce1 }.encode()),
            Flow::CkUpdate => (MsgType::CkRequest, CkRequestPayload { nonce1 }.encode()),
        };
        let body = seal(&auth_key, &plain, &mut self.rng).map_err(|e| DeviceError::Malformed(e.to_string()))?;
        self.session = Some(Session {
            flow,
            stage: Stage::Response,
            auth_key,
            nonce1,
            nonce3: None,
            ack_key: None,
            new_key: None,
            pending: None,
        });
        Ok(ProtocolMessage::sealed(msg_type, header, body))
    }

    fn check(&mut self, step: CheckStep, passed: bool, err: DeviceError) -> Result<(), DeviceError> {
        self.trace.push(CheckRecord { step, passed });
        if passed {
            Ok(())
        } else {
            self.session = None;
            Err(err)
        }
    }

    fn nonce2_fresh(&mut self, n2: Nonce) -> Result<(), DeviceError> {
        let fresh = !self.seen_nonce2.contains(&n2);
        self.check(CheckStep::Nonce2Fresh, fresh, DeviceError::ReplayedNonce2)?;
        if self.seen_nonce2.len() == REPLAY_WINDOW {
            self.seen_nonce2.pop_front();
        }
        self.seen_nonce2.push_back(n2);
        Ok(())
    }

    /// Validate a response, write the new key and produce the confirm.
    ///
    /// Agent keys are committed here (and the product key removed on first
    /// issue) before the confirm exists. Cloud keys are only written; the
    /// commit follows in [`after_confirm`](Self::after_confirm).
    pub fn on_response(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, DeviceError> {
        let sess = self.session.clone().ok_or(DeviceError::NoSession)?;
        if sess.stage != Stage::Response {
            return Err(DeviceError::NoSession);
        }
        if let Some(code) = msg.error_code() {
            self.session = None;
            return Err(DeviceError::Agent(code));
        }
        let expected = match sess.flow {
            Flow::AkInit | Flow::AkRotate => MsgType::AkResponse,
            Flow::CkUpdate => MsgType::CkResponse,
        };
        if msg.msg_type != expected {
            self.session = None;
            return Err(DeviceError::Unexpected { expected, got: msg.msg_type });
        }
        let Some(body) = &msg.body else {
            self.session = None;
            return Err(DeviceError::Malformed("response without body".into()));
        };
        let plain = open(&sess.auth_key, body);
        self.check(CheckStep::Envelope, plain.is_ok(), DeviceError::TagMismatch)?;
        let plain = plain.expect("checked");
        match sess.flow {
            Flow::AkInit | Flow::AkRotate => self.accept_agent_key(sess, &msg.header, &plain),
            Flow::CkUpdate => self.accept_cloud_key(sess, &plain),
        }
    }

    fn accept_agent_key(&mut self, sess: Session, hdr: &[u8], plain: &[u8]) -> Result<ProtocolMessage, DeviceError> {
        let p = AkResponsePayload::decode(plain).map_err(|e| {
            self.session = None;
            DeviceError::Malformed(e.to_string())
        })?;
        self.check(CheckStep::Nonce1, p.nonce1 == sess.nonce1, DeviceError::Nonce1Mismatch)?;
        self.nonce2_fresh(p.nonce2)?;
        let mac_ok = AkResponsePayload::parse_mac_header(hdr)
            .map(|tag| crate::crypto::verify_mac(&p.ak, &[&p.mac_input()], &tag))
            .unwrap_or(false);
        self.check(CheckStep::InnerMac, mac_ok, DeviceError::TagMismatch)?;

        self.flash.erase_stale_slot(KeyKind::AgentKey)?;
        let handle = self.flash.begin_key_write(KeyKind::AgentKey, &p.ak, &[])?;
        self.flash.commit_key(&handle)?;
        if sess.flow == Flow::AkInit {
            self.flash.erase_product_key()?;
        }

        let nonce3 = self.rng.nonce();
        let plain = AkConfirmPayload { nonce2: p.nonce2, nonce3 }.encode();
        let body = seal(&p.ak, &plain, &mut self.rng).map_err(|e| DeviceError::Malformed(e.to_string()))?;
        self.last_confirm_plaintext = Some(plain);
        self.session = Some(Session {
            stage: Stage::ConfirmSent,
            nonce3: Some(nonce3),
            ack_key: Some(p.ak),
            new_key: Some(p.ak),
            ..sess
        });
        Ok(ProtocolMessage::sealed(MsgType::AkConfirm, header::id(self.identity.id), body))
    }

    fn accept_cloud_key(&mut self, sess: Session, plain: &[u8]) -> Result<ProtocolMessage, DeviceError> {
        let p = CkResponsePayload::decode(plain).map_err(|e| {
            self.session = None;
            DeviceError::Malformed(e.to_string())
        })?;
        self.check(CheckStep::Nonce1, p.nonce1 == sess.nonce1, DeviceError::Nonce1Mismatch)?;
        self.nonce2_fresh(p.nonce2)?;

        self.flash.erase_stale_slot(KeyKind::CloudKey)?;
        let handle = self.flash.begin_key_write(KeyKind::CloudKey, &p.cloud_key, &p.connection_info)?;

        let nonce3 = self.rng.nonce();
        let plain = CkConfirmPayload { nonce2: p.nonce2, nonce3 }.encode();
        let body = seal(&sess.auth_key, &plain, &mut self.rng).map_err(|e| DeviceError::Malformed(e.to_string()))?;
        self.last_confirm_plaintext = Some(plain);
        self.session = Some(Session {
            stage: Stage::ConfirmSent,
            nonce3: Some(nonce3),
            ack_key: Some(sess.auth_key),
            new_key: Some(p.cloud_key),
            pending: Some(handle),
            ..sess
        });
        Ok(ProtocolMessage::sealed(MsgType::CkConfirm, header::id(self.identity.id), body))
    }

    /// Called once the confirm has been handed to the transport, whether or
    /// not delivery succeeded.
    pub fn after_confirm(&mut self) -> Result<(), DeviceError> {
        let sess = self.session.as_mut().ok_or(DeviceError::NoSession)?;
        if sess.stage != Stage::ConfirmSent {
            return Err(DeviceError::NoSession);
        }
        sess.stage = Stage::Ack;
        if let Some(handle) = sess.pending.take() {
            self.flash.commit_key(&handle)?;
        }
        Ok(())
    }

    /// Acknowledgement from the agent. Failure here leaves flash as is.
    pub fn on_ack(&mut self, msg: &ProtocolMessage) -> Result<(), DeviceError> {
        let sess = self.session.take().ok_or(DeviceError::NoSession)?;
        if sess.stage != Stage::Ack {
            return Err(DeviceError::NoSession);
        }
        if let Some(code) = msg.error_code() {
            return Err(DeviceError::Agent(code));
        }
        let expected = match sess.flow {
            Flow::AkInit | Flow::AkRotate => MsgType::AkAck,
            Flow::CkUpdate => MsgType::CkAck,
        };
        if msg.msg_type != expected {
            return Err(DeviceError::Unexpected { expected, got: msg.msg_type });
        }
        let key = sess.ack_key.ok_or(DeviceError::NoSession)?;
        let body = msg.body.as_ref().ok_or_else(|| DeviceError::Malformed("ack without body".into()))?;
        let plain = open(&key, body).map_err(|_| DeviceError::TagMismatch)?;
        let ack = AckPayload::decode(expected, &plain).map_err(|e| DeviceError::Malformed(e.to_string()))?;
        if Some(ack.nonce3) != sess.nonce3 {
            return Err(DeviceError::Malformed("ack does not echo nonce3".into()));
        }
        Ok(())
    }

    /// Cloud key and connection info currently stored in flash.
    pub fn cloud_credentials(&self) -> Option<(SymmetricKey, Vec<u8>)> {
        self.flash.scan().cloud.map(|a| (a.record.key, a.record.payload))
    }

    pub fn cloud_proof(&self, challenge: &[u8]) -> Option<[u8; TAG_LEN]> {
        let (key, _) = self.cloud_credentials()?;
        Some(cloud_auth_proof(&key, self.identity.id, challenge))
    }
}

/// Proof a device presents to the cloud: `HMAC(ck, label || id || challenge)`.
pub fn cloud_auth_proof(key: &SymmetricKey, id: DeviceId, challenge: &[u8]) -> [u8; TAG_LEN] {
    mac_parts(key, &[b"otakey-cloud-auth", &id.0, challenge])
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?}: {detail}")]
pub struct TransportError {
    pub kind: TransportErrorKind,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportErrorKind {
    Timeout,
    Closed,
    Io,
}

impl TransportError {
    pub fn new(kind: TransportErrorKind, detail: impl Into<String>) -> Self {
        Self { kind, detail: detail.into() }
    }
}

/// Request/reply channel from a device to its agent.
pub trait Transport {
    fn exchange(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, TransportError>;
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn exchange(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, TransportError> {
        (**self).exchange(msg)
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Retries on transport failure, each with a fresh nonce1.
#[derive(Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub sleeper: Sleeper,
}

impl fmt::Debug for RetryPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RetryPolicy")
            .field("max_retries", &self.max_retries)
            .field("base_delay", &self.base_delay)
            .finish()
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, base_delay: Duration::from_secs(1), sleeper: Arc::new(std::thread::sleep) }
    }
}

impl RetryPolicy {
    /// Same schedule, no real waiting.
    pub fn immediate() -> Self {
        Self { sleeper: Arc::new(|_| {}), ..Self::default() }
    }

    pub fn none() -> Self {
        Self { max_retries: 0, ..Self::immediate() }
    }

    /// Delay before retry number `attempt` (0-based): base, 2*base, 4*base ...
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowOutcome {
    pub flow: Flow,
    pub new_key: SymmetricKey,
    /// The agent's acknowledgement arrived and verified.
    pub acknowledged: bool,
    pub attempts: u32,
}

pub fn run_flow<T: Transport + ?Sized>(
    device: &mut Device,
    flow: Flow,
    transport: &mut T,
    policy: &RetryPolicy,
) -> Result<FlowOutcome, DeviceError> {
    let mut attempt = 0;
    loop {
        let request = device.start(flow)?;
        let response = match transport.exchange(&request) {
            Ok(r) => r,
            Err(e) => {
                device.abort();
                if attempt >= policy.max_retries {
                    return Err(DeviceError::Transport(e.to_string()));
                }
                let wait = policy.delay(attempt);
                log::debug!("device {}: {flow} attempt {} failed ({e}), retrying in {wait:?}", device.identity.id, attempt + 1);
                (policy.sleeper)(wait);
                attempt += 1;
                continue;
            }
        };
        let confirm = device.on_response(&response)?;
        let new_key = device.session.as_ref().and_then(|s| s.new_key).expect("session holds new key");
        let ack = transport.exchange(&confirm);
        device.after_confirm()?;
        let acknowledged = match ack {
            Ok(a) => match device.on_ack(&a) {
                Ok(()) => true,
                Err(e) => {
                    log::warn!("device {}: ack rejected: {e}", device.identity.id);
                    false
                }
            },
            Err(e) => {
                device.abort();
                log::warn!("device {}: no ack: {e}", device.identity.id);
                false
            }
        };
        return Ok(FlowOutcome { flow, new_key, acknowledged, attempts: attempt + 1 });
    }
}
