//! Agent crash drill.
//!
//! A fleet is provisioned against an agent with a file-backed journal. At a
//! set of randomly chosen journal commits the agent process "dies": the
//! commit is either lost or written without a reply. The drill then reopens
//! the registry from disk, starts a fresh agent and lets the interrupted
//! device carry on. After every restart, every device is checked against
//! the reloaded registry.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{check_consistency, World};
use crate::agent_server::registry::{CrashPoint, Registry};
use crate::agent_server::InProcess;
use crate::crypto::SymmetricKey;
use crate::flash::KeyKind;
use crate::protocol::agent::Agent;
use crate::protocol::device::{run_flow, DeviceError, RetryPolicy};
use crate::protocol::Flow;

/// Journal commits of one honest provisioning: issue, activation, cloud
/// registration and cloud activation.
pub const COMMITS_PER_DEVICE: u64 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashDrillConfig {
    pub n_devices: usize,
    pub crashes: usize,
    pub seed: u64,
    /// Journal lines between compactions.
    pub compact_every: Option<usize>,
}

impl CrashDrillConfig {
    pub fn new(n_devices: usize, crashes: usize, seed: u64) -> Self {
        Self { n_devices, crashes, seed, compact_every: Some(64) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashDrillReport {
    pub config: CrashDrillConfig,
    pub journal: PathBuf,
    /// Planned crash points, indexed over all commits of the run.
    pub crash_points: Vec<CrashPoint>,
    pub kills: usize,
    pub device_checks: usize,
    pub devices_completed: usize,
    pub violations: Vec<String>,
}

impl CrashDrillReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.kills == self.crash_points.len()
    }
}

struct Incarnation {
    agent: Agent,
    /// Global index of this incarnation's first commit.
    offset: u64,
}

fn start_agent(w: &World, journal: &Path, cfg: &CrashDrillConfig, offset: u64, plan: &[CrashPoint], gen: u64) -> Result<Incarnation, String> {
    let mut registry = Registry::open(journal, vec![w.order.clone()]).map_err(|e| format!("reload: {e}"))?;
    registry.set_compact_every(cfg.compact_every);
    let next = plan.iter().find(|c| c.commit_index >= offset);
    registry.set_crash_point(next.map(|c| CrashPoint { commit_index: c.commit_index - offset, ..*c }));
    let agent = Agent::new(registry, Box::new(w.cloud.clone()), w.clock.clone(), Some(cfg.seed ^ gen.wrapping_mul(0x9E37_79B9)));
    Ok(Incarnation { agent, offset })
}

/// Every device holding an acknowledged agent key finds it in `registry`,
/// and every key any device holds is accepted.
fn audit(w: &World, agent: &Agent, acked: &[Option<SymmetricKey>], violations: &mut Vec<String>) -> usize {
    for (i, d) in w.devices.iter().enumerate() {
        let id = d.identity().id;
        if let Some(ak) = acked[i] {
            if !agent.registry().accept_set(&id).contains(&ak) {
                violations.push(format!("device {i}: acknowledged agent key {} missing after reload", ak.fingerprint()));
            }
        }
        if let Err(e) = check_consistency(d, agent, &w.cloud) {
            violations.push(e);
        }
    }
    w.devices.len()
}

pub fn run(cfg: &CrashDrillConfig, dir: &Path) -> Result<CrashDrillReport, String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let journal = dir.join("registry.jsonl");
    for stale in [journal.clone(), crate::agent_server::registry::snapshot_path(&journal)] {
        if stale.exists() {
            std::fs::remove_file(&stale).map_err(|e| e.to_string())?;
        }
    }
    let honest_commits = cfg.n_devices as u64 * COMMITS_PER_DEVICE;
    if cfg.crashes as u64 > honest_commits {
        return Err(format!("{} crashes requested but only {honest_commits} commits happen", cfg.crashes));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut idx = sample(&mut rng, honest_commits as usize, cfg.crashes).into_vec();
    idx.sort_unstable();
    let plan: Vec<CrashPoint> =
        idx.into_iter().map(|i| CrashPoint { commit_index: i as u64, after_write: rng.random() }).collect();

    let mut w = World::new(cfg.seed, cfg.n_devices);
    let mut report = CrashDrillReport {
        config: cfg.clone(),
        journal: journal.clone(),
        crash_points: plan.clone(),
        kills: 0,
        device_checks: 0,
        devices_completed: 0,
        violations: Vec::new(),
    };
    let mut acked: Vec<Option<SymmetricKey>> = vec![None; cfg.n_devices];
    let mut inc = start_agent(&w, &journal, cfg, 0, &plan, 0)?;
    let policy = RetryPolicy::none();
    let max_steps = 16;

    for i in 0..cfg.n_devices {
        let mut steps = 0;
        loop {
            let d = &w.devices[i];
            let flow = match (d.held_key(KeyKind::AgentKey), d.held_key(KeyKind::CloudKey)) {
                (None, _) => Flow::AkInit,
                (Some(_), None) => Flow::CkUpdate,
                (Some(_), Some(_)) => break,
            };
            steps += 1;
            if steps > max_steps {
                report.violations.push(format!("device {i}: no progress after {max_steps} attempts"));
                break;
            }
            w.clock.advance(1);
            let result = run_flow(&mut w.devices[i], flow, &mut InProcess(&mut inc.agent), &policy);
            if inc.agent.is_down() {
                report.kills += 1;
                let offset = inc.offset + inc.agent.registry().commits();
                drop(inc);
                inc = start_agent(&w, &journal, cfg, offset, &plan, report.kills as u64)?;
                report.device_checks += audit(&w, &inc.agent, &acked, &mut report.violations);
                if let Ok(o) = &result {
                    if o.acknowledged && flow != Flow::CkUpdate {
                        acked[i] = Some(o.new_key);
                    }
                }
                continue;
            }
            match result {
                Ok(o) => {
                    if o.acknowledged && flow != Flow::CkUpdate {
                        acked[i] = Some(o.new_key);
                    }
                }
                Err(DeviceError::Transport(_)) => {}
                Err(e) => report.violations.push(format!("device {i}: {flow} failed: {e}")),
            }
        }
        if !w.login(i).accepted() {
            report.violations.push(format!("device {i}: cloud login refused"));
        } else {
            report.devices_completed += 1;
        }
    }
    drop(inc);
    let last = start_agent(&w, &journal, cfg, u64::MAX, &[], u64::MAX)?;
    report.device_checks += audit(&w, &last.agent, &acked, &mut report.violations);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_drill_survives_every_crash() {
        let dir = tempfile::tempdir().unwrap();
        let r = run(&CrashDrillConfig::new(10, 6, 3), dir.path()).unwrap();
        assert!(r.passed(), "{r:#?}");
        assert_eq!(r.devices_completed, 10);
        assert_eq!(r.kills, 6);
    }

    #[test]
    fn crash_on_every_commit_of_one_device() {
        let dir = tempfile::tempdir().unwrap();
        let r = run(&CrashDrillConfig::new(1, 4, 1), dir.path()).unwrap();
        assert!(r.passed(), "{r:#?}");
    }

    #[test]
    fn too_many_crashes_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(run(&CrashDrillConfig::new(1, 5, 1), dir.path()).is_err());
    }
}
