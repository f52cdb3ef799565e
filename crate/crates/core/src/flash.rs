//! Emulated STM32F4-style flash holding the device key areas.
//!
//! ```text
//! 0x08000000  vector table            2 KiB
//! 0x08000800  area A / agent key      2 KiB
//! 0x08001000  area A / cloud key     16 KiB
//! 0x08005000  area B (redundancy)    0x4D00 bytes, ends at 0x08009D00
//! 0x08009D00  feature firmware        remainder
//! ```
//!
//! Area B is used as two page-aligned slots mirroring area A: an agent slot at
//! `0x08005000` and a cloud slot at `0x08005800..0x08009800`. The last
//! 0x500 bytes of area B share a page with the start of the firmware and are
//! never erased by key operations.
//!
//! Each slot holds at most one [`KeySlotRecord`]. The active record of a kind
//! is the CRC-valid record with the highest sequence number, so recovery after
//! a power cut is a pure read of the image.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{SymmetricKey, KEY_LEN};

pub const FLASH_BASE: u32 = 0x0800_0000;
pub const PAGE_SIZE: usize = 2048;
pub const ERASED: u8 = 0xFF;
/// Default emulated flash size (64 KiB is plenty for the key areas plus a
/// small firmware blob).
pub const DEFAULT_FLASH_SIZE: usize = 0x1_0000;

pub const RECORD_MAGIC: [u8; 4] = *b"OTAK";
pub const MAX_PAYLOAD: usize = 512;
const RECORD_HEADER_LEN: usize = 4 + 4 + 1 + KEY_LEN + 2;
const RECORD_CRC_LEN: usize = 4;

/// Half-open address range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub start: u32,
    pub end: u32,
}

impl Region {
    pub const fn new(start: u32, end: u32) -> Self {
        Self { start, end }
    }

    pub const fn len(&self) -> usize {
        (self.end - self.start) as usize
    }

    pub const fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub const fn contains(&self, addr: u32) -> bool {
        addr >= self.start && addr < self.end
    }
}

pub const VECTOR_TABLE: Region = Region::new(0x0800_0000, 0x0800_0800);
pub const AREA_A_AGENT: Region = Region::new(0x0800_0800, 0x0800_1000);
pub const AREA_A_CLOUD: Region = Region::new(0x0800_1000, 0x0800_5000);
pub const AREA_B: Region = Region::new(0x0800_5000, 0x0800_9D00);
pub const AREA_B_AGENT: Region = Region::new(0x0800_5000, 0x0800_5800);
pub const AREA_B_CLOUD: Region = Region::new(0x0800_5800, 0x0800_9800);
pub const FIRMWARE_START: u32 = 0x0800_9D00;

/// Region map of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeySlotLayout {
    pub vector_table: Region,
    pub area_a_agent: Region,
    pub area_a_cloud: Region,
    pub area_b: Region,
    pub feature_firmware: Region,
}

impl KeySlotLayout {
    pub fn for_size(size: usize) -> Self {
        Self {
            vector_table: VECTOR_TABLE,
            area_a_agent: AREA_A_AGENT,
            area_a_cloud: AREA_A_CLOUD,
            area_b: AREA_B,
            feature_firmware: Region::new(FIRMWARE_START, FLASH_BASE + size as u32),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyKind {
    ProductKey,
    AgentKey,
    CloudKey,
}

impl KeyKind {
    pub const ALL: [KeyKind; 3] = [KeyKind::ProductKey, KeyKind::AgentKey, KeyKind::CloudKey];

    fn code(self) -> u8 {
        match self {
            KeyKind::ProductKey => 1,
            KeyKind::AgentKey => 2,
            KeyKind::CloudKey => 3,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(KeyKind::ProductKey),
            2 => Some(KeyKind::AgentKey),
            3 => Some(KeyKind::CloudKey),
            _ => None,
        }
    }

    /// Product and agent keys share the 2 KiB slots.
    fn slots(self) -> [Slot; 2] {
        match self {
            KeyKind::ProductKey | KeyKind::AgentKey => [Slot::AAgent, Slot::BAgent],
            KeyKind::CloudKey => [Slot::ACloud, Slot::BCloud],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    AAgent,
    ACloud,
    BAgent,
    BCloud,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::AAgent, Slot::ACloud, Slot::BAgent, Slot::BCloud];

    pub fn region(self) -> Region {
        match self {
            Slot::AAgent => AREA_A_AGENT,
            Slot::ACloud => AREA_A_CLOUD,
            Slot::BAgent => AREA_B_AGENT,
            Slot::BCloud => AREA_B_CLOUD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeySlotRecord {
    pub seq: u32,
    pub kind: KeyKind,
    pub key: SymmetricKey,
    pub payload: Vec<u8>,
}

impl KeySlotRecord {
    pub fn encoded_len(&self) -> usize {
        RECORD_HEADER_LEN + self.payload.len() + RECORD_CRC_LEN
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&RECORD_MAGIC);
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(self.key.as_bytes());
        out.extend_from_slice(&(self.payload.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_be_bytes());
        out
    }

    /// Parse a record from the start of `bytes`; `None` unless magic, bounds
    /// and CRC all check.
    pub fn decode(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < RECORD_HEADER_LEN + RECORD_CRC_LEN || bytes[..4] != RECORD_MAGIC {
            return None;
        }
        let seq = u32::from_be_bytes(bytes[4..8].try_into().ok()?);
        let kind = KeyKind::from_code(bytes[8])?;
        let key = SymmetricKey::from_slice(&bytes[9..9 + KEY_LEN]).ok()?;
        let plen = u16::from_be_bytes(bytes[25..27].try_into().ok()?) as usize;
        if plen > MAX_PAYLOAD {
            return None;
        }
        let body_end = RECORD_HEADER_LEN + plen;
        if bytes.len() < body_end + RECORD_CRC_LEN {
            return None;
        }
        let stored = u32::from_be_bytes(bytes[body_end..body_end + 4].try_into().ok()?);
        if crc32fast::hash(&bytes[..body_end]) != stored {
            return None;
        }
        Some(Self {
            seq,
            kind,
            key,
            payload: bytes[RECORD_HEADER_LEN..body_end].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FlashError {
    #[error("write to non-erased flash at {addr:#010x}")]
    WriteToNonErased { addr: u32 },
    #[error("address range {start:#010x}+{len} is outside the image")]
    OutOfBounds { start: u32, len: usize },
    #[error("firmware of {len} bytes does not fit the {capacity}-byte feature region")]
    SizeError { len: usize, capacity: usize },
    #[error("payload of {0} bytes exceeds the record limit")]
    PayloadTooLarge(usize),
    #[error("target slot {0:?} holds a stale record and must be erased first")]
    StaleSlotOccupied(Slot),
    #[error("no {0:?} record is active to extend")]
    NothingToUpdate(KeyKind),
    #[error("pending record is not valid; commit refused")]
    CommitRefused,
    #[error("product key can only be erased after a committed agent key")]
    OrderingViolation,
    #[error("device holds neither a product key nor an agent key")]
    Unprovisioned,
    #[error("power lost")]
    PowerLost,
    #[error("image size {0} is not a page multiple covering the key areas")]
    BadImage(usize),
}

/// Cut point: operation `op_index` (0-based) is torn after `torn_bytes`
/// bytes and every later mutating operation is dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PowerCut {
    pub op_index: u64,
    pub torn_bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlashOpKind {
    Program,
    ErasePage,
}

/// A mutating operation as issued (before any cut is applied).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlashOp {
    pub kind: FlashOpKind,
    pub addr: u32,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveRecord {
    pub slot: Slot,
    pub record: KeySlotRecord,
}

/// Active record per kind as seen by the boot loader.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BootScan {
    pub product: Option<ActiveRecord>,
    pub agent: Option<ActiveRecord>,
    pub cloud: Option<ActiveRecord>,
}

impl BootScan {
    pub fn get(&self, kind: KeyKind) -> Option<&ActiveRecord> {
        match kind {
            KeyKind::ProductKey => self.product.as_ref(),
            KeyKind::AgentKey => self.agent.as_ref(),
            KeyKind::CloudKey => self.cloud.as_ref(),
        }
    }

    pub fn key(&self, kind: KeyKind) -> Option<SymmetricKey> {
        self.get(kind).map(|a| a.record.key)
    }
}

/// Handle for a record written but not yet committed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingWrite {
    pub kind: KeyKind,
    pub slot: Slot,
    pub seq: u32,
    /// Slot of the record this one supersedes, erased on commit.
    pub old_slot: Option<Slot>,
}

#[derive(Debug, Clone)]
pub struct FlashImage {
    base: u32,
    data: Vec<u8>,
    ops: u64,
    cut: Option<PowerCut>,
    powered: bool,
    uncommitted: Option<PendingWrite>,
    op_log: Vec<FlashOp>,
}

impl FlashImage {
    pub fn blank(size: usize) -> Self {
        assert!(
            size.is_multiple_of(PAGE_SIZE) && FLASH_BASE as usize + size > FIRMWARE_START as usize,
            "flash size must be a page multiple covering the key areas"
        );
        Self {
            base: FLASH_BASE,
            data: vec![ERASED; size],
            ops: 0,
            cut: None,
            powered: true,
            uncommitted: None,
            op_log: Vec::new(),
        }
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, FlashError> {
        let n = bytes.len();
        if !n.is_multiple_of(PAGE_SIZE) || FLASH_BASE as usize + n <= FIRMWARE_START as usize {
            return Err(FlashError::BadImage(n));
        }
        let mut img = Self::blank(n);
        img.data = bytes;
        Ok(img)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn base_address(&self) -> u32 {
        self.base
    }

    pub fn size(&self) -> usize {
        self.data.len()
    }

    pub fn layout(&self) -> KeySlotLayout {
        KeySlotLayout::for_size(self.data.len())
    }

    /// Mutating operations issued since power-on (including dropped ones).
    pub fn op_count(&self) -> u64 {
        self.ops
    }

    pub fn is_powered(&self) -> bool {
        self.powered
    }

    pub fn inject_power_cut(&mut self, op_index: u64, torn_bytes: usize) {
        self.cut = Some(PowerCut { op_index, torn_bytes });
    }

    /// Cut power right now: every further mutation is dropped.
    pub fn power_off(&mut self) {
        self.powered = false;
    }

    /// Restore power. RAM state (cut point, op counter, uncommitted handle)
    /// is lost; flash contents persist.
    pub fn reboot(&mut self) {
        self.ops = 0;
        self.cut = None;
        self.powered = true;
        self.uncommitted = None;
        self.op_log.clear();
    }

    /// Operations issued since power-on, in order.
    pub fn op_log(&self) -> &[FlashOp] {
        &self.op_log
    }

    fn offset(&self, addr: u32, len: usize) -> Result<usize, FlashError> {
        let off = addr.checked_sub(self.base).ok_or(FlashError::OutOfBounds { start: addr, len })? as usize;
        if off + len > self.data.len() {
            return Err(FlashError::OutOfBounds { start: addr, len });
        }
        Ok(off)
    }

    pub fn read(&self, addr: u32, len: usize) -> Result<&[u8], FlashError> {
        let off = self.offset(addr, len)?;
        Ok(&self.data[off..off + len])
    }

    fn region_bytes(&self, region: Region) -> &[u8] {
        let off = (region.start - self.base) as usize;
        &self.data[off..off + region.len()]
    }

    pub fn is_blank(&self, region: Region) -> bool {
        self.region_bytes(region).iter().all(|&b| b == ERASED)
    }

    /// Returns how many bytes of this operation may land, or `PowerLost`
    /// once the cut has passed.
    fn admit(&mut self, kind: FlashOpKind, addr: u32, len: usize) -> Result<usize, FlashError> {
        if !self.powered {
            return Err(FlashError::PowerLost);
        }
        self.op_log.push(FlashOp { kind, addr, len });
        let idx = self.ops;
        self.ops += 1;
        match self.cut {
            Some(cut) if idx == cut.op_index => {
                self.powered = false;
                Ok(cut.torn_bytes.min(len))
            }
            Some(cut) if idx > cut.op_index => {
                self.powered = false;
                Err(FlashError::PowerLost)
            }
            _ => Ok(len),
        }
    }

    pub fn program(&mut self, addr: u32, bytes: &[u8]) -> Result<(), FlashError> {
        let off = self.offset(addr, bytes.len())?;
        if let Some(pos) = self.data[off..off + bytes.len()].iter().position(|&b| b != ERASED) {
            return Err(FlashError::WriteToNonErased { addr: addr + pos as u32 });
        }
        let n = self.admit(FlashOpKind::Program, addr, bytes.len())?;
        self.data[off..off + n].copy_from_slice(&bytes[..n]);
        if n < bytes.len() {
            return Err(FlashError::PowerLost);
        }
        Ok(())
    }

    pub fn erase_page(&mut self, addr: u32) -> Result<(), FlashError> {
        let off = self.offset(addr, PAGE_SIZE)?;
        if off % PAGE_SIZE != 0 {
            return Err(FlashError::OutOfBounds { start: addr, len: PAGE_SIZE });
        }
        let n = self.admit(FlashOpKind::ErasePage, addr, PAGE_SIZE)?;
        self.data[off..off + n].fill(ERASED);
        if n < PAGE_SIZE {
            return Err(FlashError::PowerLost);
        }
        Ok(())
    }

    /// Erase every non-blank page of a page-aligned region.
    pub fn erase_region(&mut self, region: Region) -> Result<(), FlashError> {
        let mut addr = region.start;
        while addr < region.end {
            if !self.is_blank(Region::new(addr, addr + PAGE_SIZE as u32)) {
                self.erase_page(addr)?;
            }
            addr += PAGE_SIZE as u32;
        }
        Ok(())
    }

    pub fn read_slot(&self, slot: Slot) -> Option<KeySlotRecord> {
        KeySlotRecord::decode(self.region_bytes(slot.region()))
    }

    /// Stage one: product key into area B, firmware into the feature region.
    pub fn first_stage_burn(&mut self, pk: &SymmetricKey, firmware: &[u8]) -> Result<(), FlashError> {
        let capacity = self.layout().feature_firmware.len();
        if firmware.len() > capacity {
            return Err(FlashError::SizeError { len: firmware.len(), capacity });
        }
        let record = KeySlotRecord { seq: 0, kind: KeyKind::ProductKey, key: *pk, payload: Vec::new() };
        self.program(AREA_B_AGENT.start, &record.encode())?;
        if !firmware.is_empty() {
            self.program(FIRMWARE_START, firmware)?;
        }
        Ok(())
    }

    pub fn boot_scan(&self) -> Result<BootScan, FlashError> {
        let scan = self.scan();
        if scan.product.is_none() && scan.agent.is_none() {
            return Err(FlashError::Unprovisioned);
        }
        Ok(scan)
    }

    /// Like [`boot_scan`](Self::boot_scan) but never fails.
    pub fn scan(&self) -> BootScan {
        let mut scan = BootScan::default();
        for slot in Slot::ALL {
            let Some(record) = self.read_slot(slot) else { continue };
            // A record is only honoured in the slots of its own kind.
            if !record.kind.slots().contains(&slot) {
                continue;
            }
            let entry = match record.kind {
                KeyKind::ProductKey => &mut scan.product,
                KeyKind::AgentKey => &mut scan.agent,
                KeyKind::CloudKey => &mut scan.cloud,
            };
            let better = match entry {
                None => true,
                Some(cur) => record.seq > cur.record.seq,
            };
            if better {
                *entry = Some(ActiveRecord { slot, record });
            }
        }
        scan
    }

    /// Slot a new record of `kind` would be written to.
    pub fn target_slot(&self, kind: KeyKind) -> Slot {
        let scan = self.scan();
        let [a, b] = kind.slots();
        match scan.get(kind) {
            Some(active) if active.slot == a => b,
            Some(_) => a,
            None => {
                if self.is_blank(a.region()) || !self.holds_active(&scan, a) {
                    a
                } else {
                    b
                }
            }
        }
    }

    fn holds_active(&self, scan: &BootScan, slot: Slot) -> bool {
        [&scan.product, &scan.agent, &scan.cloud]
            .into_iter()
            .flatten()
            .any(|a| a.slot == slot)
    }

    /// Erase the target slot for `kind` if it holds a torn or superseded
    /// record. Never touches a slot holding an active record.
    pub fn erase_stale_slot(&mut self, kind: KeyKind) -> Result<(), FlashError> {
        let slot = self.target_slot(kind);
        let scan = self.scan();
        if self.is_blank(slot.region()) || self.holds_active(&scan, slot) {
            return Ok(());
        }
        self.erase_region(slot.region())
    }

    pub fn begin_key_write(&mut self, kind: KeyKind, key: &SymmetricKey, payload: &[u8]) -> Result<PendingWrite, FlashError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(FlashError::PayloadTooLarge(payload.len()));
        }
        let scan = self.scan();
        let active = scan.get(kind).cloned();
        if active.is_none() && kind == KeyKind::ProductKey {
            return Err(FlashError::NothingToUpdate(kind));
        }
        let slot = self.target_slot(kind);
        if !self.is_blank(slot.region()) {
            return Err(FlashError::StaleSlotOccupied(slot));
        }
        let seq = active.as_ref().map_or(0, |a| a.record.seq + 1);
        let record = KeySlotRecord { seq, kind, key: *key, payload: payload.to_vec() };
        let handle = PendingWrite { kind, slot, seq, old_slot: active.map(|a| a.slot) };
        self.uncommitted = Some(handle.clone());
        self.program(slot.region().start, &record.encode())?;
        Ok(handle)
    }

    pub fn commit_key(&mut self, handle: &PendingWrite) -> Result<(), FlashError> {
        match self.read_slot(handle.slot) {
            Some(r) if r.kind == handle.kind && r.seq == handle.seq => {}
            _ => return Err(FlashError::CommitRefused),
        }
        if let Some(old) = handle.old_slot {
            self.erase_region(old.region())?;
        }
        if self.uncommitted.as_ref() == Some(handle) {
            self.uncommitted = None;
        }
        Ok(())
    }

    pub fn erase_product_key(&mut self) -> Result<(), FlashError> {
        let scan = self.scan();
        let agent_uncommitted = matches!(&self.uncommitted, Some(p) if p.kind == KeyKind::AgentKey);
        if scan.agent.is_none() || agent_uncommitted {
            return Err(FlashError::OrderingViolation);
        }
        for slot in KeyKind::ProductKey.slots() {
            if matches!(self.read_slot(slot), Some(r) if r.kind == KeyKind::ProductKey) {
                self.erase_region(slot.region())?;
            }
        }
        Ok(())
    }

    /// `xxd`-style dump of `[start, end)`, collapsing runs of erased lines.
    pub fn hexdump(&self, region: Region) -> String {
        let mut out = String::new();
        let bytes = self.region_bytes(region);
        let mut skipping = false;
        for (i, line) in bytes.chunks(16).enumerate() {
            if line.iter().all(|&b| b == ERASED) {
                if !skipping {
                    out.push_str("*\n");
                    skipping = true;
                }
                continue;
            }
            skipping = false;
            let _ = write!(out, "{:08x}: ", region.start as usize + i * 16);
            for b in line {
                let _ = write!(out, "{b:02x} ");
            }
            out.push(' ');
            out.extend(line.iter().map(|&b| if b.is_ascii_graphic() { b as char } else { '.' }));
            out.push('\n');
        }
        out
    }
}

impl Default for FlashImage {
    fn default() -> Self {
        Self::blank(DEFAULT_FLASH_SIZE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyRng;

    fn burned(seed: u64) -> (FlashImage, SymmetricKey, KeyRng) {
        let mut rng = KeyRng::from_seed(seed);
        let pk = rng.key();
        let mut img = FlashImage::default();
        img.first_stage_burn(&pk, b"firmware").unwrap();
        (img, pk, rng)
    }

    #[test]
    fn layout_matches_reference_addresses() {
        assert_eq!(FLASH_BASE, 0x0800_0000);
        assert_eq!((VECTOR_TABLE.start, VECTOR_TABLE.end), (0x0800_0000, 0x0800_0800));
        assert_eq!((AREA_A_AGENT.start, AREA_A_AGENT.end), (0x0800_0800, 0x0800_1000));
        assert_eq!((AREA_A_CLOUD.start, AREA_A_CLOUD.end), (0x0800_1000, 0x0800_5000));
        assert_eq!((AREA_B.start, AREA_B.end), (0x0800_5000, 0x0800_9D00));
        assert_eq!(AREA_A_AGENT.len(), 2 * 1024);
        assert_eq!(AREA_A_CLOUD.len(), 16 * 1024);
        assert_eq!(AREA_B_AGENT.len() + AREA_B_CLOUD.len(), 18 * 1024);
        let l = FlashImage::default().layout();
        let seq = [l.vector_table, l.area_a_agent, l.area_a_cloud, l.area_b, l.feature_firmware];
        for w in seq.windows(2) {
            assert_eq!(w[0].end, w[1].start, "regions must be contiguous and disjoint");
        }
        for s in Slot::ALL {
            assert_eq!(s.region().start as usize % PAGE_SIZE, 0);
            assert_eq!(s.region().len() % PAGE_SIZE, 0);
        }
        assert!(AREA_B.contains(AREA_B_CLOUD.end - 1));
    }

    #[test]
    fn fresh_burn_yields_product_key_only() {
        let (img, pk, _) = burned(1);
        let scan = img.boot_scan().unwrap();
        assert_eq!(scan.key(KeyKind::ProductKey), Some(pk));
        assert_eq!(scan.product.as_ref().unwrap().record.seq, 0);
        assert_eq!(scan.product.as_ref().unwrap().slot, Slot::BAgent);
        assert!(scan.agent.is_none() && scan.cloud.is_none());
        assert!(img.is_blank(AREA_A_AGENT) && img.is_blank(AREA_A_CLOUD));
        assert_eq!(img.read(FIRMWARE_START, 8).unwrap(), b"firmware");
    }

    #[test]
    fn burn_twice_is_rejected() {
        let (mut img, pk, _) = burned(2);
        assert!(matches!(img.first_stage_burn(&pk, b""), Err(FlashError::WriteToNonErased { .. })));
    }

    #[test]
    fn empty_firmware_and_oversize_firmware() {
        let mut img = FlashImage::default();
        let pk = KeyRng::from_seed(3).key();
        img.first_stage_burn(&pk, &[]).unwrap();
        assert_eq!(img.boot_scan().unwrap().key(KeyKind::ProductKey), Some(pk));

        let mut img = FlashImage::default();
        let cap = img.layout().feature_firmware.len();
        assert!(matches!(img.first_stage_burn(&pk, &vec![0; cap + 1]), Err(FlashError::SizeError { .. })));
    }

    #[test]
    fn blank_image_is_unprovisioned() {
        assert_eq!(FlashImage::default().boot_scan(), Err(FlashError::Unprovisioned));
    }

    #[test]
    fn agent_key_then_product_erase() {
        let (mut img, _, mut rng) = burned(4);
        assert_eq!(img.erase_product_key(), Err(FlashError::OrderingViolation));
        let ak = rng.key();
        let h = img.begin_key_write(KeyKind::AgentKey, &ak, &[]).unwrap();
        assert_eq!(h.slot, Slot::AAgent);
        assert_eq!(img.erase_product_key(), Err(FlashError::OrderingViolation));
        img.commit_key(&h).unwrap();
        img.erase_product_key().unwrap();
        let scan = img.boot_scan().unwrap();
        assert_eq!(scan.key(KeyKind::AgentKey), Some(ak));
        assert!(scan.product.is_none());
    }

    #[test]
    fn rotation_alternates_slots_and_increments_seq() {
        let (mut img, _, mut rng) = burned(5);
        let h = img.begin_key_write(KeyKind::AgentKey, &rng.key(), &[]).unwrap();
        img.commit_key(&h).unwrap();
        img.erase_product_key().unwrap();
        let seq0 = img.scan().agent.unwrap().record.seq;
        for expected_slot in [Slot::BAgent, Slot::AAgent] {
            let k = rng.key();
            let h = img.begin_key_write(KeyKind::AgentKey, &k, &[]).unwrap();
            assert_eq!(h.slot, expected_slot);
            img.commit_key(&h).unwrap();
            assert_eq!(img.scan().key(KeyKind::AgentKey), Some(k));
        }
        assert_eq!(img.scan().agent.unwrap().record.seq, seq0 + 2);
    }

    #[test]
    fn stale_slot_must_be_erased_first() {
        let (mut img, _, mut rng) = burned(6);
        let k1 = rng.key();
        let h = img.begin_key_write(KeyKind::CloudKey, &k1, b"host-a").unwrap();
        img.commit_key(&h).unwrap();
        // Update written, then power dies before the old record is erased.
        let k2 = rng.key();
        let h2 = img.begin_key_write(KeyKind::CloudKey, &k2, b"host-b").unwrap();
        img.reboot();
        assert_eq!(img.scan().key(KeyKind::CloudKey), Some(k2));
        let k3 = rng.key();
        assert_eq!(
            img.begin_key_write(KeyKind::CloudKey, &k3, b"host-c"),
            Err(FlashError::StaleSlotOccupied(h.slot))
        );
        img.erase_stale_slot(KeyKind::CloudKey).unwrap();
        assert_eq!(img.scan().key(KeyKind::CloudKey), Some(k2));
        let h3 = img.begin_key_write(KeyKind::CloudKey, &k3, b"host-c").unwrap();
        img.commit_key(&h3).unwrap();
        assert_eq!(img.scan().cloud.unwrap().record.seq, h2.seq + 1);
    }

    #[test]
    fn commit_of_torn_record_is_refused() {
        let (mut img, _, mut rng) = burned(7);
        img.inject_power_cut(0, 10);
        let err = img.begin_key_write(KeyKind::AgentKey, &rng.key(), &[]).unwrap_err();
        assert_eq!(err, FlashError::PowerLost);
        img.reboot();
        let fake = PendingWrite { kind: KeyKind::AgentKey, slot: Slot::AAgent, seq: 0, old_slot: None };
        assert_eq!(img.commit_key(&fake), Err(FlashError::CommitRefused));
    }

    #[test]
    fn payload_limit() {
        let (mut img, _, mut rng) = burned(8);
        let k = rng.key();
        assert!(img.begin_key_write(KeyKind::CloudKey, &k, &[0; MAX_PAYLOAD]).is_ok());
        let (mut img, _, _) = burned(8);
        assert_eq!(
            img.begin_key_write(KeyKind::CloudKey, &k, &[0; MAX_PAYLOAD + 1]),
            Err(FlashError::PayloadTooLarge(MAX_PAYLOAD + 1))
        );
    }

    /// Exhaustive oracle: every cut point of an update sequence leaves
    /// exactly the old or the new record active for the kind under update.
    fn sweep_update(kind: KeyKind, payload: &[u8]) -> usize {
        let (mut base, _, mut rng) = burned(9);
        let first = rng.key();
        let h = base.begin_key_write(KeyKind::AgentKey, &first, &[]).unwrap();
        base.commit_key(&h).unwrap();
        base.erase_product_key().unwrap();
        let old = if kind == KeyKind::CloudKey {
            let ck = rng.key();
            let h = base.begin_key_write(KeyKind::CloudKey, &ck, payload).unwrap();
            base.commit_key(&h).unwrap();
            ck
        } else {
            first
        };
        base.reboot();
        let new = rng.key();

        // Count the ops of an uninterrupted run first.
        let mut probe = base.clone();
        let h = probe.begin_key_write(kind, &new, payload).unwrap();
        probe.commit_key(&h).unwrap();
        let total_ops = probe.op_count();
        let record_len = KeySlotRecord { seq: 0, kind, key: new, payload: payload.to_vec() }.encoded_len();

        let mut checked = 0;
        for op in 0..total_ops {
            let max_torn = if op == 0 { record_len } else { PAGE_SIZE };
            for torn in 0..=max_torn {
                let mut img = base.clone();
                img.inject_power_cut(op, torn);
                let written = img.begin_key_write(kind, &new, payload).and_then(|h| img.commit_key(&h));
                img.reboot();
                let active = img.boot_scan().unwrap().key(kind).unwrap();
                assert!(active == old || active == new, "torn record surfaced at op {op} byte {torn}");
                if op == 0 && torn < record_len {
                    assert_eq!(active, old);
                    assert!(written.is_err());
                }
                if op >= 1 {
                    assert_eq!(active, new, "fully written record must win at op {op}");
                }
                checked += 1;
            }
        }
        checked
    }

    #[test]
    fn exhaustive_cut_sweep_agent_rotation() {
        assert!(sweep_update(KeyKind::AgentKey, &[]) > 40);
    }

    #[test]
    fn exhaustive_cut_sweep_cloud_update() {
        assert!(sweep_update(KeyKind::CloudKey, b"mqtts://cloud.example:8883") > 60);
    }

    #[test]
    fn image_round_trips_through_raw_bytes() {
        let (img, pk, _) = burned(10);
        let copy = FlashImage::from_bytes(img.as_bytes().to_vec()).unwrap();
        assert_eq!(copy.boot_scan().unwrap().key(KeyKind::ProductKey), Some(pk));
        assert!(FlashImage::from_bytes(vec![0xFF; 100]).is_err());
    }

    #[test]
    fn hexdump_collapses_erased_runs() {
        let (img, _, _) = burned(11);
        let dump = img.hexdump(AREA_B_AGENT);
        assert!(dump.starts_with("08005000: 4f 54 41 4b"));
        assert!(dump.contains("*\n"));
    }
}
