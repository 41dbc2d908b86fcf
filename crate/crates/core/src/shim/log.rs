//! Totally ordered log of allocation-family, registration and stream calls.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::device::{AllocId, AllocationKind, AllocationRecord, BinaryHandle, DevicePtr};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LogOp {
    Alloc,
    Free,
    RegisterBinary,
    UnregisterBinary,
    StreamCreate,
    StreamDestroy,
}

impl LogOp {
    pub fn code(self) -> u8 {
        match self {
            LogOp::Alloc => 1,
            LogOp::Free => 2,
            LogOp::RegisterBinary => 3,
            LogOp::UnregisterBinary => 4,
            LogOp::StreamCreate => 5,
            LogOp::StreamDestroy => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => LogOp::Alloc,
            2 => LogOp::Free,
            3 => LogOp::RegisterBinary,
            4 => LogOp::UnregisterBinary,
            5 => LogOp::StreamCreate,
            6 => LogOp::StreamDestroy,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LogOp::Alloc => "alloc",
            LogOp::Free => "free",
            LogOp::RegisterBinary => "register",
            LogOp::UnregisterBinary => "unregister",
            LogOp::StreamCreate => "stream_create",
            LogOp::StreamDestroy => "stream_destroy",
        }
    }
}

/// Wire code for an optional allocation kind (0 = none).
pub fn kind_code(kind: Option<AllocationKind>) -> u8 {
    match kind {
        None => 0,
        Some(AllocationKind::Device) => 1,
        Some(AllocationKind::PinnedHost) => 2,
        Some(AllocationKind::Managed) => 3,
    }
}

pub fn kind_from_code(code: u8) -> Option<Option<AllocationKind>> {
    Some(match code {
        0 => None,
        1 => Some(AllocationKind::Device),
        2 => Some(AllocationKind::PinnedHost),
        3 => Some(AllocationKind::Managed),
        _ => return None,
    })
}

fn kind_str(kind: Option<AllocationKind>) -> &'static str {
    match kind {
        None => "-",
        Some(AllocationKind::Device) => "device",
        Some(AllocationKind::PinnedHost) => "pinned",
        Some(AllocationKind::Managed) => "managed",
    }
}

/// One logged call with its result. `id` is the allocation id, stream id or
/// binary handle depending on `op`; `kind`, `size` and `address` are only
/// meaningful for `Alloc`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallLogEntry {
    pub seq: u64,
    pub op: LogOp,
    pub kind: Option<AllocationKind>,
    pub size: u64,
    pub id: u64,
    pub address: u64,
}

impl CallLogEntry {
    pub fn alloc(seq: u64, rec: &AllocationRecord) -> Self {
        Self {
            seq,
            op: LogOp::Alloc,
            kind: Some(rec.kind),
            size: rec.size,
            id: rec.id.0,
            address: rec.address.0,
        }
    }

    pub fn other(seq: u64, op: LogOp, id: u64) -> Self {
        Self {
            seq,
            op,
            kind: None,
            size: 0,
            id,
            address: 0,
        }
    }

    /// `seq op kind size id address`, address in hex.
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {} {:#x}",
            self.seq,
            self.op.as_str(),
            kind_str(self.kind),
            self.size,
            self.id,
            self.address
        )
    }
}

/// Kernel ids of one registered binary, kept beside the log so that
/// registration entries can be replayed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryRecord {
    pub handle: BinaryHandle,
    pub kernels: Vec<String>,
    pub live: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CallLog {
    entries: Vec<CallLogEntry>,
    binaries: BTreeMap<BinaryHandle, BinaryRecord>,
}

impl CallLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a log from its parts (used at restart).
    pub fn from_parts(entries: Vec<CallLogEntry>, binaries: Vec<BinaryRecord>) -> Self {
        Self {
            entries,
            binaries: binaries.into_iter().map(|b| (b.handle, b)).collect(),
        }
    }

    pub fn entries(&self) -> &[CallLogEntry] {
        &self.entries
    }

    pub fn binaries(&self) -> Vec<BinaryRecord> {
        self.binaries.values().cloned().collect()
    }

    pub fn binary(&self, handle: BinaryHandle) -> Option<&BinaryRecord> {
        self.binaries.get(&handle)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn next_seq(&self) -> u64 {
        self.entries.len() as u64 + 1
    }

    pub(crate) fn push_alloc(&mut self, rec: &AllocationRecord) {
        self.entries.push(CallLogEntry::alloc(self.next_seq(), rec));
    }

    pub(crate) fn push(&mut self, op: LogOp, id: u64) {
        self.entries.push(CallLogEntry::other(self.next_seq(), op, id));
    }

    pub(crate) fn push_register(&mut self, handle: BinaryHandle, kernels: Vec<String>) {
        self.push(LogOp::RegisterBinary, handle.0);
        self.binaries.insert(
            handle,
            BinaryRecord {
                handle,
                kernels,
                live: true,
            },
        );
    }

    pub(crate) fn push_unregister(&mut self, handle: BinaryHandle) {
        self.push(LogOp::UnregisterBinary, handle.0);
        if let Some(b) = self.binaries.get_mut(&handle) {
            b.live = false;
        }
    }

    /// Live allocations, in allocation order.
    pub fn active_set(&self) -> Vec<AllocationRecord> {
        active_set(&self.entries)
    }

    /// One diagnostic line per entry.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{}", e.to_line());
        }
        out
    }

    /// Checks contiguity of `seq` and that every free names an earlier alloc.
    pub fn validate(&self) -> Result<(), String> {
        let mut allocated = std::collections::HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.seq != i as u64 + 1 {
                return Err(format!("entry {i} has seq {}", e.seq));
            }
            match e.op {
                LogOp::Alloc => {
                    allocated.insert(e.id);
                }
                LogOp::Free if !allocated.contains(&e.id) => {
                    return Err(format!("seq {} frees unknown allocation {}", e.seq, e.id));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Allocations present in `entries` with no later free, in allocation order.
pub fn active_set(entries: &[CallLogEntry]) -> Vec<AllocationRecord> {
    let mut live: BTreeMap<u64, AllocationRecord> = BTreeMap::new();
    for e in entries {
        match e.op {
            LogOp::Alloc => {
                live.insert(
                    e.seq,
                    AllocationRecord {
                        id: AllocId(e.id),
                        kind: e.kind.unwrap_or(AllocationKind::Device),
                        size: e.size,
                        address: DevicePtr(e.address),
                        freed: false,
                    },
                );
            }
            LogOp::Free => live.retain(|_, r| r.id.0 != e.id),
            _ => {}
        }
    }
    live.into_values().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, size: u64, address: u64) -> AllocationRecord {
        AllocationRecord {
            id: AllocId(id),
            kind: AllocationKind::Device,
            size,
            address: DevicePtr(address),
            freed: false,
        }
    }

    #[test]
    fn active_set_examples() {
        assert!(active_set(&[]).is_empty());
        let mut log = CallLog::new();
        log.push_alloc(&rec(1, 16, 0x100));
        log.push_alloc(&rec(2, 16, 0x200));
        log.push(LogOp::Free, 1);
        assert_eq!(log.active_set(), vec![rec(2, 16, 0x200)]);
        log.validate().unwrap();
    }

    #[test]
    fn dump_format() {
        let mut log = CallLog::new();
        log.push_alloc(&rec(1, 1024, 0x0D00_0000_0000));
        log.push(LogOp::Free, 1);
        assert_eq!(log.dump(), "1 alloc device 1024 1 0xd0000000000\n2 free - 0 1 0x0\n");
    }

    #[test]
    fn validate_rejects_orphan_free() {
        let log = CallLog::from_parts(vec![CallLogEntry::other(1, LogOp::Free, 3)], vec![]);
        assert!(log.validate().is_err());
    }

    #[test]
    fn op_codes_round_trip() {
        for op in [
            LogOp::Alloc,
            LogOp::Free,
            LogOp::RegisterBinary,
            LogOp::UnregisterBinary,
            LogOp::StreamCreate,
            LogOp::StreamDestroy,
        ] {
            assert_eq!(LogOp::from_code(op.code()), Some(op));
        }
        assert_eq!(LogOp::from_code(0), None);
        assert_eq!(
            kind_from_code(kind_code(Some(AllocationKind::Managed))),
            Some(Some(AllocationKind::Managed))
        );
        assert_eq!(kind_from_code(9), None);
    }
}
