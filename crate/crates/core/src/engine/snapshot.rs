use crate::device::{AllocId, ManagedPage, StreamId};
use crate::shim::{BinaryRecord, CallLogEntry};

/// Version written into checkpoint metadata.
pub const ENGINE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SnapshotMeta {
    pub seed: u64,
    pub arena_bytes: u64,
    pub engine_version: u32,
}

/// Full content of one device or pinned-host allocation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AllocPayload {
    pub id: AllocId,
    pub bytes: Vec<u8>,
}

/// Every page of one managed allocation, with residence and dirty flag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManagedPayload {
    pub id: AllocId,
    pub pages: Vec<ManagedPage>,
}

/// Everything a checkpoint saves: upper-half state plus the minimum needed
/// to rebuild the lower half.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub meta: SnapshotMeta,
    pub log: Vec<CallLogEntry>,
    /// Device and pinned-host allocations, ascending id.
    pub payloads: Vec<AllocPayload>,
    /// Managed allocations, ascending id.
    pub managed: Vec<ManagedPayload>,
    pub streams: Vec<StreamId>,
    pub app_state: Vec<u8>,
    pub binaries: Vec<BinaryRecord>,
}

impl Snapshot {
    pub fn empty(seed: u64, arena_bytes: u64) -> Self {
        Self {
            meta: SnapshotMeta {
                seed,
                arena_bytes,
                engine_version: ENGINE_VERSION,
            },
            log: Vec::new(),
            payloads: Vec::new(),
            managed: Vec::new(),
            streams: Vec::new(),
            app_state: Vec::new(),
            binaries: Vec::new(),
        }
    }

    /// Payload bytes of device and pinned-host allocations.
    pub fn payload_bytes(&self) -> u64 {
        self.payloads.iter().map(|p| p.bytes.len() as u64).sum()
    }

    /// Content bytes of managed pages.
    pub fn managed_bytes(&self) -> u64 {
        self.managed
            .iter()
            .flat_map(|m| &m.pages)
            .map(|p| p.content.len() as u64)
            .sum()
    }
}
