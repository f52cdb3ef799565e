//! Power-cut and message-loss sweep over the three key flows.
//!
//! Every flash operation a flow issues is cut at every byte offset (or at
//! its start, middle and end with [`Granularity::Op`]), and every message
//! of the flow is lost in turn. After each cut the device reboots and two
//! things are checked: the keys it holds are still accepted by its peers
//! (safety), and a retry brings it back to a working cloud login
//! (liveness).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_consistency, Tally, World};
use crate::agent_server::InProcess;
use crate::flash::{FlashOp, FlashOpKind};
use crate::protocol::device::{
    run_flow, DevicePhase, RetryPolicy, Transport, TransportError, TransportErrorKind,
};
use crate::protocol::wire::ProtocolMessage;
use crate::protocol::Flow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Byte,
    Op,
}

impl std::str::FromStr for Granularity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "byte" => Ok(Self::Byte),
            "op" => Ok(Self::Op),
            other => Err(format!("unknown granularity `{other}` (byte or op)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CutPoint {
    /// Flash operation `op` of the flow (0-based) lands `torn_bytes` bytes,
    /// then power drops.
    Flash { op: u64, torn_bytes: usize },
    /// Message `slot` of the flow (request, response, confirm, ack) is
    /// lost, then power drops.
    LostMessage { slot: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutResult {
    pub flow: Flow,
    pub cut: CutPoint,
    pub phase_after_boot: Option<DevicePhase>,
    pub safety_ok: bool,
    pub liveness_ok: bool,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub flash_ops: Vec<FlashOp>,
    pub cut_points: usize,
    pub safety: Tally,
    pub liveness: Tally,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSweepReport {
    pub seed: u64,
    pub granularity: Granularity,
    pub cut_points: usize,
    pub safety_violations: usize,
    pub liveness_failures: usize,
    pub flows: BTreeMap<String, FlowSummary>,
    /// Only cut points that failed a check.
    pub failures: Vec<CutResult>,
}

impl FaultSweepReport {
    pub fn passed(&self) -> bool {
        self.safety_violations == 0 && self.liveness_failures == 0
    }
}

/// World with device 0 ready to run `flow`.
pub fn baseline(flow: Flow, seed: u64) -> World {
    let mut w = World::new(seed, 1);
    if flow != Flow::AkInit {
        w.provision(0).expect("honest provisioning succeeds");
    }
    w.devices[0].boot().expect("provisioned device boots");
    w
}

/// Flash operations an uninterrupted run of `flow` issues.
pub fn probe_ops(flow: Flow, seed: u64) -> Vec<FlashOp> {
    let mut w = baseline(flow, seed);
    let before = w.devices[0].flash().op_log().len();
    w.run(0, flow).expect("honest flow succeeds");
    w.devices[0].flash().op_log()[before..].to_vec()
}

fn torn_offsets(op: &FlashOp, g: Granularity) -> Vec<usize> {
    match g {
        Granularity::Byte => (0..=op.len).collect(),
        Granularity::Op => {
            let mut v = vec![0, op.len / 2, op.len];
            v.dedup();
            v
        }
    }
}

pub fn cut_points(ops: &[FlashOp], g: Granularity) -> Vec<CutPoint> {
    let mut cuts: Vec<CutPoint> = ops
        .iter()
        .enumerate()
        .flat_map(|(i, op)| torn_offsets(op, g).into_iter().map(move |t| CutPoint::Flash { op: i as u64, torn_bytes: t }))
        .collect();
    cuts.extend((0..4).map(|slot| CutPoint::LostMessage { slot }));
    cuts
}

/// Forwards to the agent but loses message `slot`. A lost request never
/// reaches the agent; a lost reply is processed but not delivered.
struct Lossy<'a> {
    inner: InProcess<'a>,
    slot: u8,
    seen: u8,
}

impl Transport for Lossy<'_> {
    fn exchange(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, TransportError> {
        let out_slot = self.seen * 2;
        self.seen += 1;
        let lost = || TransportError::new(TransportErrorKind::Timeout, "message lost");
        if self.slot == out_slot {
            return Err(lost());
        }
        let reply = self.inner.exchange(msg)?;
        if self.slot == out_slot + 1 {
            return Err(lost());
        }
        Ok(reply)
    }
}

pub fn run_cut(flow: Flow, seed: u64, cut: CutPoint) -> CutResult {
    let mut w = baseline(flow, seed);
    let mut result = CutResult { flow, cut, phase_after_boot: None, safety_ok: false, liveness_ok: false, detail: None };

    match cut {
        CutPoint::Flash { op, torn_bytes } => {
            let base = w.devices[0].flash().op_count();
            w.devices[0].flash_mut().inject_power_cut(base + op, torn_bytes);
            let _ = w.run(0, flow);
        }
        CutPoint::LostMessage { slot } => {
            let mut t = Lossy { inner: InProcess(&mut w.agent), slot, seen: 0 };
            let _ = run_flow(&mut w.devices[0], flow, &mut t, &RetryPolicy::none());
        }
    }
    w.devices[0].flash_mut().power_off();

    if let Err(e) = w.devices[0].boot() {
        result.detail = Some(format!("boot failed: {e}"));
        return result;
    }
    result.phase_after_boot = Some(w.devices[0].phase());
    if let Err(e) = w.consistency(0) {
        result.detail = Some(e);
        return result;
    }
    result.safety_ok = true;

    match recover(&mut w, flow) {
        Ok(()) => result.liveness_ok = true,
        Err(e) => result.detail = Some(e),
    }
    result
}

fn recover(w: &mut World, flow: Flow) -> Result<(), String> {
    let step = |w: &mut World, f: Flow| -> Result<(), String> {
        w.run(0, f).map_err(|e| format!("retry of {f} failed: {e}"))?;
        w.consistency(0)
    };
    if w.devices[0].phase() == DevicePhase::Burned {
        step(w, Flow::AkInit)?;
    }
    match flow {
        Flow::AkInit => {}
        Flow::AkRotate => step(w, Flow::AkRotate)?,
        Flow::CkUpdate => {
            if !w.login(0).accepted() {
                return Err("cloud login with the surviving key refused".into());
            }
            step(w, Flow::CkUpdate)?;
        }
    }
    if w.devices[0].held_key(crate::flash::KeyKind::CloudKey).is_none() {
        step(w, Flow::CkUpdate)?;
    }
    if !w.login(0).accepted() {
        return Err("cloud login after recovery refused".into());
    }
    check_consistency(&w.devices[0], &w.agent, &w.cloud)
}

pub fn sweep(flows: &[Flow], granularity: Granularity, seed: u64) -> FaultSweepReport {
    let mut report = FaultSweepReport {
        seed,
        granularity,
        cut_points: 0,
        safety_violations: 0,
        liveness_failures: 0,
        flows: BTreeMap::new(),
        failures: Vec::new(),
    };
    for &flow in flows {
        let ops = probe_ops(flow, seed);
        let cuts = cut_points(&ops, granularity);
        let results: Vec<CutResult> = cuts.par_iter().map(|&c| run_cut(flow, seed, c)).collect();
        let mut summary = FlowSummary { flash_ops: ops, cut_points: cuts.len(), safety: Tally::default(), liveness: Tally::default() };
        for r in results {
            summary.safety.record(r.safety_ok);
            summary.liveness.record(r.liveness_ok);
            if !r.safety_ok {
                report.safety_violations += 1;
            }
            if !r.liveness_ok {
                report.liveness_failures += 1;
            }
            if !(r.safety_ok && r.liveness_ok) {
                report.failures.push(r);
            }
        }
        report.cut_points += summary.cut_points;
        report.flows.insert(flow.name().to_string(), summary);
    }
    report
}

/// Count of operations of each kind, for reports.
pub fn op_histogram(ops: &[FlashOp]) -> (usize, usize) {
    let programs = ops.iter().filter(|o| o.kind == FlashOpKind::Program).count();
    (programs, ops.len() - programs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_flow_issues_a_write_then_an_erase() {
        for flow in Flow::ALL {
            let ops = probe_ops(flow, 3);
            assert_eq!(op_histogram(&ops), (1, 1), "{flow}: {ops:?}");
            assert_eq!(ops[0].kind, FlashOpKind::Program);
        }
    }

    #[test]
    fn op_granularity_sweep_is_clean() {
        let r = sweep(&Flow::ALL, Granularity::Op, 11);
        assert!(r.passed(), "{:#?}", r.failures);
        assert_eq!(r.cut_points, 3 * (6 + 4));
    }

    #[test]
    fn lost_confirm_leaves_pending_key_usable() {
        let r = run_cut(Flow::AkInit, 5, CutPoint::LostMessage { slot: 2 });
        assert!(r.safety_ok && r.liveness_ok, "{r:?}");
        assert_eq!(r.phase_after_boot, Some(DevicePhase::AkIssued));
    }
}
