//! Dolev-Yao style checks against the device/agent link.
//!
//! Two tools live here. [`Knowledge`] computes what a passive observer can
//! derive from captured frames: it splits frames by the public grammar and
//! opens any envelope whose key it already holds, repeating until nothing
//! new appears. The tamper engine replays a flow with an active attacker
//! applying up to `budget` actions (drop, bit flip, replay, reorder,
//! injection under a key the attacker knows) and checks every run for a
//! peer accepting a key its counterpart does not hold, or a key reaching
//! the attacker.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent_server::InProcess;
use crate::crypto::{mac_parts, open, seal, KeyRng, Nonce, SealedMessage, SymmetricKey, KEY_LEN};
use crate::flash::KeyKind;
use crate::protocol::device::{run_flow, CheckRecord, Device, RetryPolicy, Transport, TransportError};
use crate::protocol::wire::*;
use crate::protocol::Flow;
use crate::scenario::{check_consistency, World};

/// Messages of one flow, in order.
pub const SLOTS: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Tampering {
    Drop,
    FlipBit { byte: usize, bit: u8 },
    /// Substitute the same message from an earlier session.
    Replay,
    /// Deliver the earlier session's message first, then the current one.
    Reorder,
    /// Substitute a well-formed message sealed under a key the attacker
    /// holds.
    InjectUnderKnownKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action {
    pub slot: u8,
    pub tampering: Tampering,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RunOutcome {
    /// Both sides finished; `acknowledged` says whether the ack verified.
    Completed { acknowledged: bool },
    /// The device ended the session at a check.
    DeviceAborted { exit: String },
    /// The agent refused the last message it received.
    AgentRejected { code: String },
    /// A message was lost and the flow stalled at `slot`.
    Stalled { slot: u8 },
}

impl RunOutcome {
    pub fn label(&self) -> String {
        match self {
            RunOutcome::Completed { acknowledged: true } => "completed".into(),
            RunOutcome::Completed { acknowledged: false } => "completed_unacknowledged".into(),
            RunOutcome::DeviceAborted { exit } => exit.clone(),
            RunOutcome::AgentRejected { code } => format!("agent_{code}"),
            RunOutcome::Stalled { slot } => format!("stalled_at_{slot}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub actions: Vec<Action>,
    pub outcome: RunOutcome,
    pub violations: Vec<String>,
}

/// What an observer can derive from a set of frames.
#[derive(Debug, Default)]
pub struct Knowledge {
    atoms: HashSet<Vec<u8>>,
    opened: usize,
}

fn header_fields(t: u8, h: &[u8]) -> Vec<&[u8]> {
    match MsgType::from_code(t) {
        Some(MsgType::AkRequest) if h.len() == PO_LEN + ID_LEN => vec![&h[..PO_LEN], &h[PO_LEN..]],
        _ => vec![h],
    }
}

fn payload_fields(t: u8, plain: &[u8]) -> Vec<Vec<u8>> {
    let n = |x: &Nonce| x.0.to_vec();
    let k = |x: &SymmetricKey| x.as_bytes().to_vec();
    match MsgType::from_code(t) {
        Some(MsgType::AkRequest) => AkRequestPayload::decode(plain).map(|p| vec![p.id.0.to_vec(), n(&p.nonce1)]).unwrap_or_default(),
        Some(MsgType::AkResponse) => AkResponsePayload::decode(plain)
            .map(|p| vec![k(&p.ak), n(&p.nonce1), n(&p.nonce2)])
            .unwrap_or_default(),
        Some(MsgType::AkConfirm) => AkConfirmPayload::decode(plain).map(|p| vec![n(&p.nonce2), n(&p.nonce3)]).unwrap_or_default(),
        Some(MsgType::CkRequest) => CkRequestPayload::decode(plain).map(|p| vec![n(&p.nonce1)]).unwrap_or_default(),
        Some(MsgType::CkResponse) => CkResponsePayload::decode(plain)
            .map(|p| vec![k(&p.cloud_key), p.connection_info, n(&p.nonce1), n(&p.nonce2)])
            .unwrap_or_default(),
        Some(MsgType::CkConfirm) => CkConfirmPayload::decode(plain).map(|p| vec![n(&p.nonce2), n(&p.nonce3)]).unwrap_or_default(),
        Some(t @ (MsgType::AkAck | MsgType::CkAck)) => AckPayload::decode(t, plain).map(|p| vec![n(&p.nonce3)]).unwrap_or_default(),
        _ => Vec::new(),
    }
}

impl Knowledge {
    /// Closure of `frames` (frame bytes without the length prefix) plus
    /// `initial` atoms.
    pub fn derive(frames: &[Vec<u8>], initial: &[Vec<u8>]) -> Self {
        let mut atoms: HashSet<Vec<u8>> = initial.iter().cloned().collect();
        let mut sealed: Vec<(u8, SealedMessage)> = Vec::new();
        for f in frames {
            atoms.insert(f.clone());
            let Ok(frame) = Frame::from_bytes(f) else { continue };
            for field in header_fields(frame.msg_type, &frame.header) {
                atoms.insert(field.to_vec());
            }
            if let Ok(sm) = SealedMessage::from_bytes(&frame.body) {
                atoms.insert(sm.iv.to_vec());
                atoms.insert(sm.ciphertext.clone());
                atoms.insert(sm.tag.clone());
                sealed.push((frame.msg_type, sm));
            }
        }
        let mut opened = vec![false; sealed.len()];
        let mut tried: HashSet<(usize, Vec<u8>)> = HashSet::new();
        loop {
            let keys: Vec<SymmetricKey> = atoms
                .iter()
                .filter(|a| a.len() == KEY_LEN)
                .map(|a| SymmetricKey::from_slice(a).expect("len checked"))
                .collect();
            let mut learned = Vec::new();
            for (i, (t, sm)) in sealed.iter().enumerate() {
                if opened[i] {
                    continue;
                }
                for k in &keys {
                    if !tried.insert((i, k.as_bytes().to_vec())) {
                        continue;
                    }
                    if let Ok(plain) = open(k, sm) {
                        opened[i] = true;
                        learned.extend(payload_fields(*t, &plain));
                        learned.push(plain);
                        break;
                    }
                }
            }
            let before = atoms.len();
            atoms.extend(learned);
            if atoms.len() == before {
                break;
            }
        }
        Self { opened: opened.iter().filter(|&&o| o).count(), atoms }
    }

    pub fn knows(&self, secret: &[u8]) -> bool {
        self.atoms.contains(secret)
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn envelopes_opened(&self) -> usize {
        self.opened
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecrecyQuery {
    pub secret: String,
    pub derivable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecrecyReport {
    pub flow: Flow,
    pub frames_observed: usize,
    pub atoms_known: usize,
    pub envelopes_opened: usize,
    pub queries: Vec<SecrecyQuery>,
}

impl SecrecyReport {
    pub fn all_secret(&self) -> bool {
        self.queries.iter().all(|q| !q.derivable)
    }
}

pub fn secrecy_check(frames: &[Vec<u8>], initial: &[Vec<u8>], secrets: &[(String, Vec<u8>)], flow: Flow) -> SecrecyReport {
    let k = Knowledge::derive(frames, initial);
    SecrecyReport {
        flow,
        frames_observed: frames.len(),
        atoms_known: k.atom_count(),
        envelopes_opened: k.envelopes_opened(),
        queries: secrets.iter().map(|(name, s)| SecrecyQuery { secret: name.clone(), derivable: k.knows(s) }).collect(),
    }
}

/// Records every frame crossing the link.
struct Recorder<'a> {
    inner: InProcess<'a>,
    frames: Vec<Vec<u8>>,
}

impl Transport for Recorder<'_> {
    fn exchange(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, TransportError> {
        self.frames.push(msg.to_bytes());
        let reply = self.inner.exchange(msg)?;
        self.frames.push(reply.to_bytes());
        Ok(reply)
    }
}

/// Public values every observer has: identity, order number and the
/// attacker's own key.
fn public_knowledge(device: &Device, attacker_key: &SymmetricKey) -> Vec<Vec<u8>> {
    let id = device.identity();
    vec![id.id.0.to_vec(), id.po.0.to_vec(), attacker_key.as_bytes().to_vec()]
}

/// Honest run of `flow` for device 0, captured, with the secrets to test.
pub fn honest_secrecy(flow: Flow, seed: u64) -> SecrecyReport {
    let mut env = AttackEnv::new(flow, seed);
    let mut rec = Recorder { inner: InProcess(&mut env.world.agent), frames: Vec::new() };
    run_flow(&mut env.world.devices[0], flow, &mut rec, &RetryPolicy::none()).expect("honest run completes");
    let mut frames = rec.frames;
    frames.extend(env.prior.iter().flatten().cloned());
    let dev = &env.world.devices[0];
    let mut secrets = env.secrets_before.clone();
    secrets.push(("new agent key".into(), dev.held_key(KeyKind::AgentKey).expect("holds ak").as_bytes().to_vec()));
    if let Some(ck) = dev.held_key(KeyKind::CloudKey) {
        secrets.push(("cloud key".into(), ck.as_bytes().to_vec()));
    }
    secrets.push(("successTX".into(), dev.last_confirm_plaintext().expect("confirm sent").to_vec()));
    secrecy_check(&frames, &public_knowledge(dev, &env.attacker_key), &secrets, flow)
}

/// World prepared for one attacked run of `flow` by device 0, plus the
/// earlier-session messages an attacker could have captured.
pub struct AttackEnv {
    pub world: World,
    pub flow: Flow,
    /// Slots 0 and 1 from an attempt of device 0 whose response never
    /// arrived; slots 2 and 3 from a completed earlier run.
    pub prior: [Option<Vec<u8>>; SLOTS as usize],
    pub attacker_key: SymmetricKey,
    attacker_rng: KeyRng,
    secrets_before: Vec<(String, Vec<u8>)>,
    active_before: Option<SymmetricKey>,
}

impl AttackEnv {
    pub fn new(flow: Flow, seed: u64) -> Self {
        let mut world = World::new(seed, 2);
        let mut attacker_rng = KeyRng::from_seed(seed ^ 0xA77A_C4E2);
        let attacker_key = attacker_rng.key();
        if flow != Flow::AkInit {
            world.provision(0).expect("setup");
            world.provision(1).expect("setup");
        }
        let earlier = if flow == Flow::AkInit { 1 } else { 0 };
        let mut rec = Recorder { inner: InProcess(&mut world.agent), frames: Vec::new() };
        run_flow(&mut world.devices[earlier], flow, &mut rec, &RetryPolicy::none()).expect("setup");
        let done = rec.frames;
        let mut prior: [Option<Vec<u8>>; SLOTS as usize] = Default::default();
        prior[2] = done.get(2).cloned();
        prior[3] = done.get(3).cloned();

        let req = world.devices[0].start(flow).expect("device 0 can start");
        let resp = world.agent.handle(&req).expect("agent up");
        world.devices[0].abort();
        prior[0] = Some(req.to_bytes());
        prior[1] = Some(resp.to_bytes());

        let dev = &world.devices[0];
        let mut secrets_before = vec![("product key".to_string(), world.order.pk.as_bytes().to_vec())];
        if let Some(ak) = dev.held_key(KeyKind::AgentKey) {
            secrets_before.push(("current agent key".into(), ak.as_bytes().to_vec()));
        }
        if let Some(ck) = dev.held_key(KeyKind::CloudKey) {
            secrets_before.push(("current cloud key".into(), ck.as_bytes().to_vec()));
        }
        let active_before = world.agent.registry().get(&dev.identity().id).and_then(|e| e.ak);
        Self { world, flow, prior, attacker_key, attacker_rng, secrets_before, active_before }
    }

    fn forge(&mut self, slot: u8, honest: &[u8]) -> Vec<u8> {
        let Ok(frame) = Frame::from_bytes(honest) else { return honest.to_vec() };
        let Some(t) = MsgType::from_code(frame.msg_type) else { return honest.to_vec() };
        let rng = &mut self.attacker_rng;
        let key = self.attacker_key;
        let (n1, n2, n3, k2) = (rng.nonce(), rng.nonce(), rng.nonce(), rng.key());
        let id = self.world.devices[0].identity().id;
        let mut header = frame.header.clone();
        let plain = match t {
            MsgType::AkRequest => AkRequestPayload { id, nonce1: n1 }.encode(),
            MsgType::AkResponse => {
                let p = AkResponsePayload { ak: k2, nonce1: n1, nonce2: n2 };
                header = mac_parts(&k2, &[&p.mac_input()]).to_vec();
                p.encode()
            }
            MsgType::AkConfirm => AkConfirmPayload { nonce2: n2, nonce3: n3 }.encode(),
            MsgType::CkRequest => CkRequestPayload { nonce1: n1 }.encode(),
            MsgType::CkResponse => {
                CkResponsePayload { cloud_key: k2, connection_info: b"mqtts://evil".to_vec(), nonce1: n1, nonce2: n2 }.encode()
            }
            MsgType::CkConfirm => CkConfirmPayload { nonce2: n2, nonce3: n3 }.encode(),
            MsgType::AkAck | MsgType::CkAck => AckPayload { nonce3: n3 }.encode(t),
            MsgType::Error => return honest.to_vec(),
        };
        log::trace!("forging slot {slot} as {t:?}");
        let body = seal(&key, &plain, rng).expect("small payload");
        Frame::new(frame.msg_type, header, body.to_bytes()).to_bytes()
    }

    /// Frames actually delivered for `slot`.
    fn tamper(&mut self, slot: u8, current: Vec<u8>, actions: &[Action]) -> Vec<Vec<u8>> {
        let mine: Vec<Tampering> = actions.iter().filter(|a| a.slot == slot).map(|a| a.tampering).collect();
        if mine.is_empty() {
            return vec![current];
        }
        let prior = self.prior[slot as usize].clone();
        let mut frame = current;
        let mut reorder = false;
        let mut drop = false;
        for t in &mine {
            match *t {
                Tampering::Replay => {
                    if let Some(p) = &prior {
                        frame = p.clone();
                    }
                }
                Tampering::InjectUnderKnownKey => frame = self.forge(slot, &frame),
                Tampering::FlipBit { .. } | Tampering::Reorder | Tampering::Drop => {}
            }
        }
        for t in &mine {
            match *t {
                Tampering::FlipBit { byte, bit } => {
                    if let Some(b) = frame.get_mut(byte) {
                        *b ^= 1 << bit;
                    }
                }
                Tampering::Reorder => reorder = true,
                Tampering::Drop => drop = true,
                _ => {}
            }
        }
        let mut out = Vec::new();
        if reorder {
            out.extend(prior);
        }
        if !drop {
            out.push(frame);
        }
        out
    }

    fn agent_receive(&mut self, bytes: &[u8]) -> ProtocolMessage {
        match ProtocolMessage::from_bytes(bytes) {
            Ok(m) => self.world.agent.handle(&m).unwrap_or_else(|| ProtocolMessage::error(ErrorCode::Busy)),
            Err(_) => ProtocolMessage::error(ErrorCode::Malformed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    DeviceToAgent,
    AgentToDevice,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub direction: Direction,
    /// Seconds on the scenario clock.
    pub ts: u64,
    pub msg_type: String,
    #[serde(with = "hex::serde")]
    pub frame: Vec<u8>,
}

/// Undisturbed run of `flow` by device 0 of an [`AttackEnv`].
pub fn record_honest_run(flow: Flow, seed: u64) -> Vec<TranscriptEntry> {
    let mut env = AttackEnv::new(flow, seed);
    let mut rec = Recorder { inner: InProcess(&mut env.world.agent), frames: Vec::new() };
    run_flow(&mut env.world.devices[0], flow, &mut rec, &RetryPolicy::none()).expect("honest run completes");
    let ts = env.world.clock.now();
    rec.frames
        .into_iter()
        .enumerate()
        .map(|(i, frame)| TranscriptEntry {
            direction: if i % 2 == 0 { Direction::DeviceToAgent } else { Direction::AgentToDevice },
            ts,
            msg_type: frame.first().and_then(|&c| MsgType::from_code(c)).map_or("unknown".into(), |t| format!("{t:?}")),
            frame,
        })
        .collect()
}

/// The frames of an undisturbed run, used to size the bit-flip alphabet.
pub fn honest_frames(flow: Flow, seed: u64) -> Vec<Vec<u8>> {
    record_honest_run(flow, seed).into_iter().map(|e| e.frame).collect()
}

/// One bit per byte of every message, plus the whole-message actions.
pub fn alphabet(honest: &[Vec<u8>]) -> Vec<Action> {
    let mut out = Vec::new();
    for (slot, frame) in honest.iter().enumerate() {
        let slot = slot as u8;
        for t in [Tampering::Drop, Tampering::Replay, Tampering::Reorder, Tampering::InjectUnderKnownKey] {
            out.push(Action { slot, tampering: t });
        }
        for byte in 0..frame.len() {
            out.push(Action { slot, tampering: Tampering::FlipBit { byte, bit: (byte % 8) as u8 } });
        }
    }
    out
}

/// All multisets of at most `budget` actions, including the empty one.
pub fn sequences(alphabet_len: usize, budget: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..budget {
        let mut next = Vec::new();
        for seq in &frontier {
            let start = seq.last().copied().unwrap_or(0);
            for i in start..alphabet_len {
                let mut s: Vec<usize> = seq.clone();
                s.push(i);
                next.push(s);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn error_label(m: &ProtocolMessage) -> Option<String> {
    m.error_code().map(|c| format!("{c:?}"))
}

pub fn execute(flow: Flow, seed: u64, actions: &[Action]) -> RunRecord {
    let mut env = AttackEnv::new(flow, seed);
    let mut wire: Vec<Vec<u8>> = env.prior.iter().flatten().cloned().collect();
    let outcome = drive(&mut env, actions, &mut wire);
    let violations = judge(&env, &wire);
    RunRecord { actions: actions.to_vec(), outcome, violations }
}

fn drive(env: &mut AttackEnv, actions: &[Action], wire: &mut Vec<Vec<u8>>) -> RunOutcome {
    let flow = env.flow;
    let request = env.world.devices[0].start(flow).expect("device can start");
    wire.push(request.to_bytes());
    let delivered = env.tamper(0, request.to_bytes(), actions);
    wire.extend(delivered.iter().cloned());
    if delivered.is_empty() {
        env.world.devices[0].abort();
        return RunOutcome::Stalled { slot: 0 };
    }
    let reply = delivered.iter().map(|f| env.agent_receive(f)).last().expect("non-empty");

    wire.push(reply.to_bytes());
    let delivered = env.tamper(1, reply.to_bytes(), actions);
    wire.extend(delivered.iter().cloned());
    if delivered.is_empty() {
        env.world.devices[0].abort();
        return RunOutcome::Stalled { slot: 1 };
    }
    let mut confirm = None;
    let mut exit = None;
    for f in &delivered {
        if confirm.is_some() || exit.is_some() {
            break;
        }
        match ProtocolMessage::from_bytes(f) {
            Ok(m) => match env.world.devices[0].on_response(&m) {
                Ok(c) => confirm = Some(c),
                Err(e) => exit = Some(e.exit_label().to_string()),
            },
            Err(_) => {
                env.world.devices[0].abort();
                exit = Some("exit_malformed".to_string());
            }
        }
    }
    let Some(confirm) = confirm else {
        return RunOutcome::DeviceAborted { exit: exit.expect("one of the two is set") };
    };

    wire.push(confirm.to_bytes());
    let delivered = env.tamper(2, confirm.to_bytes(), actions);
    wire.extend(delivered.iter().cloned());
    let ack = delivered.iter().map(|f| env.agent_receive(f)).last();
    if let Err(e) = env.world.devices[0].after_confirm() {
        return RunOutcome::DeviceAborted { exit: e.exit_label().to_string() };
    }
    let Some(ack) = ack else {
        return RunOutcome::Stalled { slot: 2 };
    };
    if let Some(code) = error_label(&ack) {
        return RunOutcome::AgentRejected { code };
    }

    wire.push(ack.to_bytes());
    let delivered = env.tamper(3, ack.to_bytes(), actions);
    wire.extend(delivered.iter().cloned());
    let Some(first) = delivered.first() else {
        return RunOutcome::Completed { acknowledged: false };
    };
    let acknowledged = ProtocolMessage::from_bytes(first).is_ok_and(|m| env.world.devices[0].on_ack(&m).is_ok());
    RunOutcome::Completed { acknowledged }
}

fn judge(env: &AttackEnv, wire: &[Vec<u8>]) -> Vec<String> {
    let w = &env.world;
    let dev = &w.devices[0];
    let mut v = Vec::new();
    if let Err(e) = check_consistency(dev, &w.agent, &w.cloud) {
        v.push(format!("key consistency: {e}"));
    }
    let id = dev.identity().id;
    let active = w.agent.registry().get(&id).and_then(|e| e.ak);
    if active != env.active_before && active.is_some() && dev.held_key(KeyKind::AgentKey) != active {
        v.push("agent activated an agent key the device does not hold".into());
    }
    let k = Knowledge::derive(wire, &public_knowledge(dev, &env.attacker_key));
    let mut secrets = env.secrets_before.clone();
    for kind in [KeyKind::AgentKey, KeyKind::CloudKey] {
        if let Some(key) = dev.held_key(kind) {
            secrets.push((format!("held {kind:?}"), key.as_bytes().to_vec()));
        }
    }
    for key in w.agent.registry().accept_set(&id).into_iter().chain(w.cloud.accept_set(id)) {
        secrets.push((format!("accepted key {}", key.fingerprint()), key.as_bytes().to_vec()));
    }
    if let Some(p) = dev.last_confirm_plaintext() {
        secrets.push(("successTX".into(), p.to_vec()));
    }
    for (name, s) in secrets {
        if k.knows(&s) {
            v.push(format!("attacker derives {name}"));
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryReport {
    pub flow: Flow,
    pub seed: u64,
    pub budget: usize,
    pub alphabet_size: usize,
    pub runs: usize,
    pub violation_count: usize,
    pub outcomes: BTreeMap<String, u64>,
    pub secrecy: SecrecyReport,
    pub violations: Vec<RunRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub records: Vec<RunRecord>,
}

impl AdversaryReport {
    pub fn passed(&self) -> bool {
        self.violation_count == 0 && self.secrecy.all_secret()
    }
}

pub fn tamper_sweep(flow: Flow, budget: usize, seed: u64, keep_records: bool) -> AdversaryReport {
    let honest = honest_frames(flow, seed);
    let alpha = alphabet(&honest);
    let seqs = sequences(alpha.len(), budget);
    let records: Vec<RunRecord> = seqs
        .par_iter()
        .map(|s| {
            let actions: Vec<Action> = s.iter().map(|&i| alpha[i]).collect();
            execute(flow, seed, &actions)
        })
        .collect();
    let mut outcomes = BTreeMap::new();
    let mut violations = Vec::new();
    for r in &records {
        *outcomes.entry(r.outcome.label()).or_insert(0) += 1;
        if !r.violations.is_empty() {
            violations.push(r.clone());
        }
    }
    AdversaryReport {
        flow,
        seed,
        budget,
        alphabet_size: alpha.len(),
        runs: records.len(),
        violation_count: violations.len(),
        outcomes,
        secrecy: honest_secrecy(flow, seed),
        violations,
        records: if keep_records { records } else { Vec::new() },
    }
}

/// Reach the stale-nonce2 exit: a device with a stuck nonce1 repeats a
/// cloud-key request and is handed the earlier response again.
pub fn replayed_nonce2_trace(seed: u64) -> Vec<CheckRecord> {
    let mut w = World::new(seed, 1);
    w.provision(0).expect("setup");
    let stuck = Nonce([0x5A; 16]);
    w.devices[0].pin_nonce1(Some(stuck));
    let req = w.devices[0].start(Flow::CkUpdate).expect("start");
    let resp = w.agent.handle(&req).expect("agent up");
    w.devices[0].on_response(&resp).expect("first response accepted");
    w.devices[0].after_confirm().expect("commit");
    w.devices[0].abort();
    w.devices[0].clear_trace();
    w.devices[0].start(Flow::CkUpdate).expect("start again");
    let err = w.devices[0].on_response(&resp).expect_err("replay rejected");
    assert_eq!(err, crate::protocol::device::DeviceError::ReplayedNonce2);
    w.devices[0].check_trace().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::device::CheckStep;

    #[test]
    fn sequence_counts_are_multisets() {
        assert_eq!(sequences(3, 0).len(), 1);
        assert_eq!(sequences(3, 1).len(), 4);
        assert_eq!(sequences(3, 2).len(), 1 + 3 + 6);
        assert_eq!(sequences(4, 3).len(), 1 + 4 + 10 + 20);
    }

    #[test]
    fn knowledge_opens_envelopes_under_known_keys_only() {
        let mut rng = KeyRng::from_seed(1);
        let k1 = rng.key();
        let k2 = rng.key();
        let inner = seal(&k2, &[0x14; 17], &mut rng).unwrap();
        let outer = AckPayload { nonce3: Nonce(*k2.as_bytes()) }.encode(MsgType::CkAck);
        let f1 = Frame::new(MsgType::CkAck.code(), vec![], seal(&k1, &outer, &mut rng).unwrap().to_bytes()).to_bytes();
        let f2 = Frame::new(MsgType::CkAck.code(), vec![], inner.to_bytes()).to_bytes();
        let frames = vec![f1, f2];
        let k = Knowledge::derive(&frames, &[]);
        assert!(!k.knows(k1.as_bytes()) && !k.knows(k2.as_bytes()));
        assert_eq!(k.envelopes_opened(), 0);
        // Knowing k1 exposes k2 through the first envelope, which opens the second.
        let k = Knowledge::derive(&frames, &[k1.as_bytes().to_vec()]);
        assert!(k.knows(k2.as_bytes()));
        assert!(k.knows(&[0x14; 17]));
        assert_eq!(k.envelopes_opened(), 2);
    }

    #[test]
    fn honest_runs_keep_all_secrets() {
        for flow in Flow::ALL {
            let r = honest_secrecy(flow, 9);
            assert!(r.all_secret(), "{r:#?}");
            assert!(r.queries.iter().any(|q| q.secret == "successTX"));
        }
    }

    #[test]
    fn leaked_product_key_exposes_the_agent_key() {
        let env = AttackEnv::new(Flow::AkInit, 5);
        let frames = honest_frames(Flow::AkInit, 5);
        let pk = env.world.order.pk.as_bytes().to_vec();
        let k = Knowledge::derive(&frames, &[pk]);
        let mut replay = AttackEnv::new(Flow::AkInit, 5);
        let mut rec = Recorder { inner: InProcess(&mut replay.world.agent), frames: Vec::new() };
        run_flow(&mut replay.world.devices[0], Flow::AkInit, &mut rec, &RetryPolicy::none()).unwrap();
        let ak = replay.world.devices[0].held_key(KeyKind::AgentKey).unwrap();
        assert!(k.knows(ak.as_bytes()));
        assert!(k.knows(replay.world.devices[0].last_confirm_plaintext().unwrap()));
    }

    #[test]
    fn transcript_alternates_direction() {
        let t = record_honest_run(Flow::CkUpdate, 1);
        assert_eq!(t.len(), 4);
        assert_eq!(t[0].msg_type, "CkRequest");
        assert_eq!(t[3].direction, Direction::AgentToDevice);
    }

    #[test]
    fn bit_flips_in_sealed_bodies_never_change_state() {
        for flow in Flow::ALL {
            let honest = honest_frames(flow, 8);
            for slot in [0u8, 1] {
                let frame = Frame::from_bytes(&honest[slot as usize]).unwrap();
                let body_start = 2 + frame.header.len();
                for byte in body_start..honest[slot as usize].len() {
                    let r = execute(flow, 8, &[Action { slot, tampering: Tampering::FlipBit { byte, bit: (byte % 8) as u8 } }]);
                    assert!(
                        matches!(r.outcome, RunOutcome::DeviceAborted { .. }),
                        "{flow} slot {slot} byte {byte}: {:?}",
                        r.outcome
                    );
                    assert!(r.violations.is_empty());
                }
            }
        }
    }

    #[test]
    fn empty_sequence_completes_cleanly() {
        for flow in Flow::ALL {
            let r = execute(flow, 4, &[]);
            assert_eq!(r.outcome, RunOutcome::Completed { acknowledged: true }, "{flow}");
            assert!(r.violations.is_empty(), "{:?}", r.violations);
        }
    }

    #[test]
    fn replayed_response_stops_at_nonce1() {
        let r = execute(Flow::AkInit, 4, &[Action { slot: 1, tampering: Tampering::Replay }]);
        assert_eq!(r.outcome, RunOutcome::DeviceAborted { exit: "exit_nonce1_mismatch".into() });
        assert!(r.violations.is_empty());
    }

    #[test]
    fn stale_nonce2_is_caught_after_nonce1() {
        let trace = replayed_nonce2_trace(3);
        let steps: Vec<_> = trace.iter().map(|c| (c.step, c.passed)).collect();
        assert_eq!(steps, vec![(CheckStep::Envelope, true), (CheckStep::Nonce1, true), (CheckStep::Nonce2Fresh, false)]);
    }

    #[test]
    fn injection_under_attacker_key_is_refused_everywhere() {
        for flow in Flow::ALL {
            for slot in 0..SLOTS {
                let r = execute(flow, 6, &[Action { slot, tampering: Tampering::InjectUnderKnownKey }]);
                assert!(r.violations.is_empty(), "{flow} slot {slot}: {:?}", r.violations);
                assert!(!matches!(r.outcome, RunOutcome::Completed { acknowledged: true }), "{flow} slot {slot}");
            }
        }
    }

    #[test]
    fn budget_one_sweep_has_no_violations() {
        let r = tamper_sweep(Flow::AkInit, 1, 2, false);
        assert!(r.passed(), "{:#?}", r.violations);
        assert_eq!(r.runs, 1 + r.alphabet_size);
    }
}
