//! Persistent device registry.
//!
//! State changes are appended to a JSON-Lines journal and flushed with
//! `sync_data` before they are applied in memory, so a reply that depends
//! on a change is never sent ahead of the change reaching disk. A snapshot
//! file periodically absorbs the journal.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::SymmetricKey;
use crate::protocol::wire::{DeviceId, ProductOrder};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("registry i/o: {0}")]
    Io(#[from] io::Error),
    #[error("registry is corrupt at line {line}: {detail}")]
    Corrupt { line: usize, detail: String },
    #[error("agent process is down")]
    Crashed,
    #[error("journal write failed: {0}")]
    WriteFailed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductOrderRecord {
    #[serde(rename = "po_hex")]
    pub po: ProductOrder,
    #[serde(rename = "pk_hex")]
    pub pk: SymmetricKey,
    pub expected_count: u64,
    pub window_start: u64,
    pub window_end: u64,
}

pub fn load_product_orders(path: &Path) -> Result<Vec<ProductOrderRecord>, RegistryError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| RegistryError::Corrupt { line: e.line(), detail: e.to_string() })
}

pub fn save_product_orders(path: &Path, records: &[ProductOrderRecord]) -> Result<(), RegistryError> {
    let text = serde_json::to_string_pretty(records).expect("product orders serialize");
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceStatus {
    Unseen,
    PendingAk,
    Active,
    Revoked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JournalEvent {
    AkIssued,
    AkActivated,
    CkRegistered,
    CkActivated,
    Revoked,
    ReprovisionAllowed,
    PoRevoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub ts: u64,
    pub event: JournalEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub id: DeviceId,
    pub po: ProductOrder,
    pub status: DeviceStatus,
    pub ak: Option<SymmetricKey>,
    /// Issued and not yet confirmed. Accepted alongside `ak`.
    pub pending_ak: Option<SymmetricKey>,
    pub cloud_key_seq: u32,
    pub activated_at: Option<u64>,
    pub reprovision_allowed: bool,
    pub audit: Vec<AuditEvent>,
}

impl RegistryEntry {
    fn new(id: DeviceId, po: ProductOrder) -> Self {
        Self {
            id,
            po,
            status: DeviceStatus::Unseen,
            ak: None,
            pending_ak: None,
            cloud_key_seq: 0,
            activated_at: None,
            reprovision_allowed: false,
            audit: Vec::new(),
        }
    }

    /// Keys this device may currently authenticate with.
    pub fn accept_set(&self) -> Vec<SymmetricKey> {
        if self.status == DeviceStatus::Revoked {
            return Vec::new();
        }
        self.ak.iter().chain(self.pending_ak.iter()).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub ts: u64,
    pub id_hex: String,
    pub po_hex: String,
    pub event: JournalEvent,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_hex: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    /// Journal lines already folded into this snapshot.
    journal_skip: usize,
    revoked_pos: Vec<ProductOrder>,
    entries: Vec<RegistryEntry>,
}

/// Simulated process death: the `commit_index`-th commit (0-based) either
/// never reaches disk or reaches disk with no reply sent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashPoint {
    pub commit_index: u64,
    pub after_write: bool,
}

enum Sink {
    Memory(Vec<JournalRecord>),
    File { journal: PathBuf, snapshot: PathBuf, file: File, lines: usize },
    Failing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyVerdict {
    Normal,
    SuspectedPkLeak,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub po: ProductOrder,
    pub expected_count: u64,
    pub observed_activations: u64,
    pub out_of_window: u64,
    pub verdict: AnomalyVerdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevokeTarget {
    Device(DeviceId),
    Po(ProductOrder),
}

pub struct Registry {
    entries: BTreeMap<DeviceId, RegistryEntry>,
    product_orders: BTreeMap<ProductOrder, ProductOrderRecord>,
    revoked_pos: BTreeSet<ProductOrder>,
    sink: Sink,
    commits: u64,
    crash: Option<CrashPoint>,
    dead: bool,
    compact_every: Option<usize>,
}

impl std::fmt::Debug for Registry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry")
            .field("entries", &self.entries.len())
            .field("commits", &self.commits)
            .field("dead", &self.dead)
            .finish()
    }
}

pub fn snapshot_path(journal: &Path) -> PathBuf {
    let mut name = journal.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".snapshot");
    journal.with_file_name(name)
}

impl Registry {
    fn with_sink(sink: Sink, product_orders: Vec<ProductOrderRecord>) -> Self {
        Self {
            entries: BTreeMap::new(),
            product_orders: product_orders.into_iter().map(|r| (r.po, r)).collect(),
            revoked_pos: BTreeSet::new(),
            sink,
            commits: 0,
            crash: None,
            dead: false,
            compact_every: None,
        }
    }

    pub fn in_memory(product_orders: Vec<ProductOrderRecord>) -> Self {
        Self::with_sink(Sink::Memory(Vec::new()), product_orders)
    }

    /// A registry whose every journal write fails, as on a full disk.
    pub fn failing(product_orders: Vec<ProductOrderRecord>) -> Self {
        Self::with_sink(Sink::Failing, product_orders)
    }

    /// Load snapshot plus journal, or start empty if neither exists.
    /// A torn final journal line is dropped; any other unparsable line is
    /// an error.
    pub fn open(journal: &Path, product_orders: Vec<ProductOrderRecord>) -> Result<Self, RegistryError> {
        let snapshot = snapshot_path(journal);
        let mut reg = Self::in_memory(product_orders);

        let mut skip = 0;
        if snapshot.exists() {
            let text = fs::read_to_string(&snapshot)?;
            let snap: Snapshot = serde_json::from_str(&text)
                .map_err(|e| RegistryError::Corrupt { line: e.line(), detail: format!("snapshot: {e}") })?;
            skip = snap.journal_skip;
            reg.revoked_pos = snap.revoked_pos.into_iter().collect();
            reg.entries = snap.entries.into_iter().map(|e| (e.id, e)).collect();
        }

        let text = match fs::read(journal) {
            Ok(bytes) => String::from_utf8_lossy(&bytes).into_owned(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        let mut good_len = 0usize;
        let mut records = Vec::new();
        let mut offset = 0usize;
        for (i, line) in text.split_inclusive('\n').enumerate() {
            offset += line.len();
            let complete = line.ends_with('\n');
            match serde_json::from_str::<JournalRecord>(line.trim_end()) {
                Ok(r) if complete => {
                    records.push(r);
                    good_len = offset;
                }
                _ if !complete => {
                    log::warn!("dropping torn journal tail ({} bytes)", line.len());
                }
                Ok(_) => unreachable!(),
                Err(e) => return Err(RegistryError::Corrupt { line: i + 1, detail: e.to_string() }),
            }
        }
        // The journal is only shorter than the skip count when a compaction
        // was interrupted right after truncating it.
        let skip = if records.len() >= skip { skip } else { 0 };
        for (i, r) in records.iter().enumerate().skip(skip) {
            reg.apply(r).map_err(|detail| RegistryError::Corrupt { line: i + 1, detail })?;
        }

        let file = OpenOptions::new().create(true).append(true).read(true).open(journal)?;
        if (good_len as u64) < file.metadata()?.len() {
            file.set_len(good_len as u64)?;
            file.sync_data()?;
        }
        reg.sink = Sink::File { journal: journal.to_path_buf(), snapshot, file, lines: records.len() };
        Ok(reg)
    }

    pub fn set_compact_every(&mut self, every: Option<usize>) {
        self.compact_every = every;
    }

    pub fn set_crash_point(&mut self, crash: Option<CrashPoint>) {
        self.crash = crash;
    }

    pub fn is_dead(&self) -> bool {
        self.dead
    }

    pub fn commits(&self) -> u64 {
        self.commits
    }

    /// Device events applied over the registry's whole life, across reopens
    /// and compactions.
    pub fn history_len(&self) -> u64 {
        self.entries.values().map(|e| e.audit.len() as u64).sum()
    }

    pub fn product_order(&self, po: &ProductOrder) -> Option<&ProductOrderRecord> {
        self.product_orders.get(po)
    }

    pub fn product_orders(&self) -> impl Iterator<Item = &ProductOrderRecord> {
        self.product_orders.values()
    }

    pub fn add_product_order(&mut self, record: ProductOrderRecord) {
        self.product_orders.insert(record.po, record);
    }

    pub fn is_po_revoked(&self, po: &ProductOrder) -> bool {
        self.revoked_pos.contains(po)
    }

    pub fn get(&self, id: &DeviceId) -> Option<&RegistryEntry> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn accept_set(&self, id: &DeviceId) -> Vec<SymmetricKey> {
        self.entries.get(id).map(RegistryEntry::accept_set).unwrap_or_default()
    }

    /// Records held by an in-memory journal.
    pub fn memory_journal(&self) -> Option<&[JournalRecord]> {
        match &self.sink {
            Sink::Memory(v) => Some(v),
            _ => None,
        }
    }

    /// Durably record `event`, then apply it.
    pub fn commit(
        &mut self,
        ts: u64,
        id: Option<DeviceId>,
        po: ProductOrder,
        event: JournalEvent,
        key: Option<&SymmetricKey>,
    ) -> Result<(), RegistryError> {
        if self.dead {
            return Err(RegistryError::Crashed);
        }
        let record = JournalRecord {
            ts,
            id_hex: id.map(|i| i.to_hex()).unwrap_or_default(),
            po_hex: po.to_hex(),
            event,
            key_hex: key.map(SymmetricKey::to_hex),
        };
        let index = self.commits;
        self.commits += 1;
        let crash_here = self.crash.filter(|c| c.commit_index == index);
        if matches!(crash_here, Some(c) if !c.after_write) {
            self.dead = true;
            return Err(RegistryError::Crashed);
        }
        match &mut self.sink {
            Sink::Memory(v) => v.push(record.clone()),
            Sink::File { file, lines, .. } => {
                let mut line = serde_json::to_string(&record).expect("journal record serializes");
                line.push('\n');
                file.write_all(line.as_bytes())?;
                file.sync_data()?;
                *lines += 1;
            }
            Sink::Failing => return Err(RegistryError::WriteFailed("no space left on device".into())),
        }
        if crash_here.is_some() {
            self.dead = true;
            return Err(RegistryError::Crashed);
        }
        self.apply(&record).map_err(RegistryError::WriteFailed)?;
        if let (Some(every), Sink::File { lines, .. }) = (self.compact_every, &self.sink) {
            if *lines >= every {
                self.compact()?;
            }
        }
        Ok(())
    }

    fn apply(&mut self, r: &JournalRecord) -> Result<(), String> {
        let po = ProductOrder::from_hex(&r.po_hex)?;
        if r.event == JournalEvent::PoRevoked {
            self.revoked_pos.insert(po);
            return Ok(());
        }
        let id = DeviceId::from_hex(&r.id_hex)?;
        let key = r.key_hex.as_deref().map(SymmetricKey::from_hex).transpose().map_err(|e| e.to_string())?;
        let need_key = || format!("{:?} without key", r.event);
        let e = self.entries.entry(id).or_insert_with(|| RegistryEntry::new(id, po));
        match r.event {
            JournalEvent::AkIssued => {
                e.pending_ak = Some(key.ok_or_else(need_key)?);
                if matches!(e.status, DeviceStatus::Unseen) {
                    e.status = DeviceStatus::PendingAk;
                }
            }
            JournalEvent::AkActivated => {
                let k = key.ok_or_else(need_key)?;
                e.ak = Some(k);
                if e.pending_ak == Some(k) {
                    e.pending_ak = None;
                }
                e.status = DeviceStatus::Active;
                e.activated_at = Some(r.ts);
                e.reprovision_allowed = false;
            }
            JournalEvent::CkRegistered => {}
            JournalEvent::CkActivated => e.cloud_key_seq += 1,
            JournalEvent::Revoked => {
                e.status = DeviceStatus::Revoked;
                e.pending_ak = None;
            }
            JournalEvent::ReprovisionAllowed => e.reprovision_allowed = true,
            JournalEvent::PoRevoked => unreachable!(),
        }
        e.audit.push(AuditEvent { ts: r.ts, event: r.event });
        Ok(())
    }

    /// Fold the journal into the snapshot and truncate it.
    pub fn compact(&mut self) -> Result<(), RegistryError> {
        let Sink::File { journal, snapshot, file, lines } = &mut self.sink else {
            return Ok(());
        };
        let write_snapshot = |skip: usize, entries: &BTreeMap<DeviceId, RegistryEntry>, pos: &BTreeSet<ProductOrder>| -> io::Result<()> {
            let snap = Snapshot {
                journal_skip: skip,
                revoked_pos: pos.iter().copied().collect(),
                entries: entries.values().cloned().collect(),
            };
            let tmp = snapshot.with_extension("tmp");
            let mut f = File::create(&tmp)?;
            f.write_all(serde_json::to_string(&snap).expect("snapshot serializes").as_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, &*snapshot)?;
            Ok(())
        };
        write_snapshot(*lines, &self.entries, &self.revoked_pos)?;
        file.set_len(0)?;
        file.sync_all()?;
        *lines = 0;
        write_snapshot(0, &self.entries, &self.revoked_pos)?;
        log::debug!("compacted registry journal {}", journal.display());
        Ok(())
    }

    pub fn anomaly_scan(&self, po: &ProductOrder) -> Option<AnomalyReport> {
        let record = self.product_orders.get(po)?;
        let mut observed = 0;
        let mut out_of_window = 0;
        for e in self.entries.values().filter(|e| e.po == *po && e.status == DeviceStatus::Active) {
            observed += 1;
            if let Some(t) = e.activated_at {
                if t < record.window_start || t > record.window_end {
                    out_of_window += 1;
                }
            }
        }
        let verdict = if observed > record.expected_count || out_of_window > 0 {
            AnomalyVerdict::SuspectedPkLeak
        } else {
            AnomalyVerdict::Normal
        };
        Some(AnomalyReport {
            po: *po,
            expected_count: record.expected_count,
            observed_activations: observed,
            out_of_window,
            verdict,
        })
    }

    /// Devices a revocation applies to that are not already revoked.
    pub fn revoke_targets(&self, target: RevokeTarget) -> Vec<(DeviceId, ProductOrder)> {
        self.entries
            .values()
            .filter(|e| e.status != DeviceStatus::Revoked)
            .filter(|e| match target {
                RevokeTarget::Device(id) => e.id == id,
                RevokeTarget::Po(po) => e.po == po,
            })
            .map(|e| (e.id, e.po))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn po() -> ProductOrder {
        ProductOrder([1; 8])
    }

    fn record(n: u64) -> ProductOrderRecord {
        ProductOrderRecord { po: po(), pk: SymmetricKey::from_bytes([9; 16]), expected_count: n, window_start: 100, window_end: 200 }
    }

    fn k(b: u8) -> SymmetricKey {
        SymmetricKey::from_bytes([b; 16])
    }

    #[test]
    fn issue_then_activate_moves_pending_to_active() {
        let mut r = Registry::in_memory(vec![record(10)]);
        let id = DeviceId([2; 12]);
        r.commit(150, Some(id), po(), JournalEvent::AkIssued, Some(&k(3))).unwrap();
        assert_eq!(r.get(&id).unwrap().status, DeviceStatus::PendingAk);
        assert_eq!(r.accept_set(&id), vec![k(3)]);
        r.commit(151, Some(id), po(), JournalEvent::AkActivated, Some(&k(3))).unwrap();
        let e = r.get(&id).unwrap();
        assert_eq!((e.status, e.ak, e.pending_ak, e.activated_at), (DeviceStatus::Active, Some(k(3)), None, Some(151)));
        r.commit(160, Some(id), po(), JournalEvent::AkIssued, Some(&k(4))).unwrap();
        assert_eq!(r.accept_set(&id), vec![k(3), k(4)]);
        assert_eq!(r.get(&id).unwrap().status, DeviceStatus::Active);
        assert_eq!(r.memory_journal().unwrap().len(), 3);
    }

    #[test]
    fn journal_reload_reproduces_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg.jsonl");
        let id = DeviceId([2; 12]);
        {
            let mut r = Registry::open(&path, vec![record(10)]).unwrap();
            r.commit(150, Some(id), po(), JournalEvent::AkIssued, Some(&k(3))).unwrap();
            r.commit(151, Some(id), po(), JournalEvent::AkActivated, Some(&k(3))).unwrap();
            r.commit(152, Some(id), po(), JournalEvent::CkActivated, None).unwrap();
        }
        let r = Registry::open(&path, vec![record(10)]).unwrap();
        let e = r.get(&id).unwrap();
        assert_eq!(e.ak, Some(k(3)));
        assert_eq!(e.cloud_key_seq, 1);
        assert_eq!(e.audit.len(), 3);
        let line = fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        for field in ["ts", "id_hex", "po_hex", "event", "key_hex"] {
            assert!(v.get(field).is_some(), "journal line lacks {field}");
        }
    }

    #[test]
    fn torn_tail_is_dropped_and_midfile_garbage_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg.jsonl");
        let id = DeviceId([2; 12]);
        {
            let mut r = Registry::open(&path, vec![]).unwrap();
            r.commit(1, Some(id), po(), JournalEvent::AkIssued, Some(&k(3))).unwrap();
        }
        OpenOptions::new().append(true).open(&path).unwrap().write_all(b"{\"ts\":2,\"id_h").unwrap();
        {
            let mut r = Registry::open(&path, vec![]).unwrap();
            assert_eq!(r.get(&id).unwrap().pending_ak, Some(k(3)));
            r.commit(3, Some(id), po(), JournalEvent::AkActivated, Some(&k(3))).unwrap();
        }
        assert_eq!(Registry::open(&path, vec![]).unwrap().get(&id).unwrap().ak, Some(k(3)));

        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, format!("not json\n{text}")).unwrap();
        assert!(matches!(Registry::open(&path, vec![]), Err(RegistryError::Corrupt { line: 1, .. })));
    }

    #[test]
    fn compaction_preserves_state_and_empties_journal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg.jsonl");
        let mut r = Registry::open(&path, vec![]).unwrap();
        r.set_compact_every(Some(4));
        for i in 0..10u8 {
            let id = DeviceId([i; 12]);
            r.commit(1, Some(id), po(), JournalEvent::AkIssued, Some(&k(i))).unwrap();
        }
        assert!(fs::read_to_string(&path).unwrap().lines().count() < 4);
        drop(r);
        let r = Registry::open(&path, vec![]).unwrap();
        assert_eq!(r.len(), 10);
        assert_eq!(r.accept_set(&DeviceId([7; 12])), vec![k(7)]);
    }

    #[test]
    fn interrupted_compaction_does_not_double_apply() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg.jsonl");
        let id = DeviceId([5; 12]);
        let mut r = Registry::open(&path, vec![]).unwrap();
        r.commit(1, Some(id), po(), JournalEvent::CkActivated, None).unwrap();
        r.commit(2, Some(id), po(), JournalEvent::CkActivated, None).unwrap();
        // Snapshot written with skip=2, journal not yet truncated.
        let snap = Snapshot { journal_skip: 2, revoked_pos: vec![], entries: r.entries().cloned().collect() };
        fs::write(snapshot_path(&path), serde_json::to_string(&snap).unwrap()).unwrap();
        drop(r);
        assert_eq!(Registry::open(&path, vec![]).unwrap().get(&id).unwrap().cloud_key_seq, 2);
    }

    #[test]
    fn crash_points_stop_the_registry() {
        let id = DeviceId([2; 12]);
        let mut r = Registry::in_memory(vec![]);
        r.set_crash_point(Some(CrashPoint { commit_index: 1, after_write: true }));
        r.commit(1, Some(id), po(), JournalEvent::AkIssued, Some(&k(1))).unwrap();
        assert!(matches!(r.commit(2, Some(id), po(), JournalEvent::AkActivated, Some(&k(1))), Err(RegistryError::Crashed)));
        assert!(r.is_dead());
        assert_eq!(r.memory_journal().unwrap().len(), 2);
        assert!(matches!(r.commit(3, Some(id), po(), JournalEvent::CkActivated, None), Err(RegistryError::Crashed)));

        let mut r = Registry::in_memory(vec![]);
        r.set_crash_point(Some(CrashPoint { commit_index: 0, after_write: false }));
        assert!(r.commit(1, Some(id), po(), JournalEvent::AkIssued, Some(&k(1))).is_err());
        assert!(r.memory_journal().unwrap().is_empty());
    }

    #[test]
    fn failing_sink_reports_write_failure() {
        let mut r = Registry::failing(vec![]);
        assert!(matches!(
            r.commit(1, Some(DeviceId([1; 12])), po(), JournalEvent::AkIssued, Some(&k(1))),
            Err(RegistryError::WriteFailed(_))
        ));
        assert!(r.is_empty());
    }

    #[test]
    fn anomaly_scan_flags_overcount_and_out_of_window() {
        let mut r = Registry::in_memory(vec![record(2)]);
        for i in 0..2u8 {
            let id = DeviceId([i; 12]);
            r.commit(150, Some(id), po(), JournalEvent::AkActivated, Some(&k(i))).unwrap();
        }
        assert_eq!(r.anomaly_scan(&po()).unwrap().verdict, AnomalyVerdict::Normal);
        r.commit(500, Some(DeviceId([9; 12])), po(), JournalEvent::AkActivated, Some(&k(9))).unwrap();
        let rep = r.anomaly_scan(&po()).unwrap();
        assert_eq!((rep.observed_activations, rep.out_of_window, rep.verdict), (3, 1, AnomalyVerdict::SuspectedPkLeak));
        assert_eq!(r.revoke_targets(RevokeTarget::Po(po())).len(), 3);
        assert!(r.anomaly_scan(&ProductOrder([0; 8])).is_none());
    }

    #[test]
    fn revoked_entries_accept_nothing() {
        let mut r = Registry::in_memory(vec![]);
        let id = DeviceId([2; 12]);
        r.commit(1, Some(id), po(), JournalEvent::AkActivated, Some(&k(1))).unwrap();
        r.commit(2, Some(id), po(), JournalEvent::Revoked, None).unwrap();
        r.commit(2, None, po(), JournalEvent::PoRevoked, None).unwrap();
        assert!(r.accept_set(&id).is_empty());
        assert!(r.is_po_revoked(&po()));
        assert!(r.revoke_targets(RevokeTarget::Device(id)).is_empty());
    }
}
