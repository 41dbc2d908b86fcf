//! Checkpoint and restart of a [`Session`].
//!
//! A checkpoint stops the world at a step boundary, drains every stream and
//! copies out the active allocations, the call log, the live stream ids and
//! the application's state blob. The session keeps running afterwards.
//!
//! Restart builds a fresh device, replays the whole log in order (including
//! binary registrations, so handles and kernel ids come back unchanged),
//! checks that every allocation lands at its logged address, then copies the
//! saved payloads back in.

mod snapshot;
mod trigger;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock, RwLockReadGuard};
use thiserror::Error;

use crate::device::{
    AllocId, AllocationKind, BinaryHandle, Device, DeviceError, KernelLibrary, Payload, StreamId, ARENA_BASE,
};
use crate::image::{self, ImageError, RegistryEntry};
use crate::shim::{
    BinaryRecord, CallError, CallLog, CallLogEntry, Classification, DispatchMode, Half, LogOp, Lower, Perms, RegionMap,
    Shim,
};

pub use snapshot::{AllocPayload, ManagedPayload, Snapshot, SnapshotMeta, ENGINE_VERSION};
pub use trigger::{Trigger, Watcher};

/// How long a checkpoint waits for in-flight steps and stream work.
pub const DEFAULT_QUIESCE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("quiescence not reached within {0:?}")]
    QuiesceTimeout(Duration),
    #[error("replay diverged at seq {seq}: {reason}")]
    ReplayDivergence { seq: u64, reason: String },
    #[error("image corrupt: {0}")]
    ImageCorrupt(String),
    #[error("image i/o: {0}")]
    Io(String),
    #[error("kernel {0:?} is not in the application's kernel library")]
    UnknownKernel(String),
    #[error("kernel {name:?} recorded with {recorded:?} (buffers, scalars) but the library has {actual:?}")]
    KernelArity {
        name: String,
        recorded: (u16, u16),
        actual: (u16, u16),
    },
    #[error("replay needs a fresh device context")]
    NotFresh,
    #[error("snapshot does not match its own log: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Call(#[from] CallError),
}

impl From<ImageError> for EngineError {
    fn from(e: ImageError) -> Self {
        match e {
            ImageError::Corrupt(m) => EngineError::ImageCorrupt(m),
            ImageError::Io(m) => EngineError::Io(m),
        }
    }
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

/// Summary of one checkpoint written to disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointInfo {
    pub image_bytes: usize,
    pub payload_bytes: u64,
    pub log_len: usize,
}

/// A running application: the shim in front of a device, the application's
/// opaque state blob and the step gate used for stop-the-world checkpoints.
pub struct Session {
    shim: Shim,
    library: Arc<KernelLibrary>,
    regions: RegionMap,
    app_state: Mutex<Vec<u8>>,
    gate: RwLock<()>,
    quiesce_timeout: Duration,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("mode", &self.shim.table().mode())
            .field("log_len", &self.shim.log_len())
            .finish_non_exhaustive()
    }
}

/// Held by application code for the duration of one step. Checkpoints wait
/// until no step is in flight.
pub type StepGuard<'a> = RwLockReadGuard<'a, ()>;

fn arena_regions(arena_bytes: u64) -> RegionMap {
    let mut regions = RegionMap::new();
    regions
        .register(ARENA_BASE..ARENA_BASE + arena_bytes, Half::Lower, Perms::RW)
        .expect("arena range is valid");
    regions
}

impl Session {
    pub fn new(seed: u64, arena_bytes: u64, mode: DispatchMode, library: Arc<KernelLibrary>) -> Result<Self> {
        let device = Arc::new(Device::new(seed, arena_bytes)?);
        let lower = Lower::new(device, Arc::clone(&library));
        Ok(Self::assemble(Shim::new(lower, mode), library, arena_bytes, Vec::new()))
    }

    fn assemble(shim: Shim, library: Arc<KernelLibrary>, arena_bytes: u64, app_state: Vec<u8>) -> Self {
        Self {
            shim,
            library,
            regions: arena_regions(arena_bytes),
            app_state: Mutex::new(app_state),
            gate: RwLock::new(()),
            quiesce_timeout: DEFAULT_QUIESCE_TIMEOUT,
        }
    }

    pub fn with_quiesce_timeout(mut self, timeout: Duration) -> Self {
        self.quiesce_timeout = timeout;
        self
    }

    pub fn shim(&self) -> &Shim {
        &self.shim
    }

    pub fn device(&self) -> &Device {
        &self.shim.lower().device
    }

    pub fn library(&self) -> &Arc<KernelLibrary> {
        &self.library
    }

    pub fn regions(&self) -> &RegionMap {
        &self.regions
    }

    pub fn mode(&self) -> DispatchMode {
        self.shim.table().mode()
    }

    pub fn app_state(&self) -> Vec<u8> {
        self.app_state.lock().clone()
    }

    pub fn set_app_state(&self, state: Vec<u8>) {
        *self.app_state.lock() = state;
    }

    /// Marks the start of an application step.
    pub fn enter(&self) -> StepGuard<'_> {
        self.gate.read()
    }

    /// Checkpoint using the stored application state.
    pub fn checkpoint(&self) -> Result<Snapshot> {
        self.checkpoint_with(|| None)
    }

    /// Checkpoint; `save` runs inside the barrier and, if it returns a blob,
    /// replaces the stored application state first.
    pub fn checkpoint_with(&self, save: impl FnOnce() -> Option<Vec<u8>>) -> Result<Snapshot> {
        let timeout = self.quiesce_timeout;
        let deadline = Instant::now() + timeout;
        let _world = self
            .gate
            .try_write_until(deadline)
            .ok_or(EngineError::QuiesceTimeout(timeout))?;
        if !self.device().drain_until(deadline) {
            return Err(EngineError::QuiesceTimeout(timeout));
        }
        if let Some(state) = save() {
            self.set_app_state(state);
        }
        self.capture()
    }

    fn capture(&self) -> Result<Snapshot> {
        let device = self.device();
        let log = self.shim.log();
        let mut snap = Snapshot::empty(device.seed(), device.arena_bytes());
        for rec in log.active_set() {
            if self.regions.classify(rec.address.0) != Classification::Lower {
                return Err(EngineError::Inconsistent(format!(
                    "allocation {} outside the arena",
                    rec.id.0
                )));
            }
            match device.capture(rec.id)? {
                Payload::Bytes(bytes) => snap.payloads.push(AllocPayload { id: rec.id, bytes }),
                Payload::Pages(pages) => snap.managed.push(ManagedPayload { id: rec.id, pages }),
            }
        }
        snap.streams = device.stream_ids();
        snap.binaries = log.binaries();
        snap.log = log.entries().to_vec();
        snap.app_state = self.app_state();
        Ok(snap)
    }

    /// Encodes a snapshot with kernel arities taken from this session's library.
    pub fn encode(&self, snapshot: &Snapshot) -> Vec<u8> {
        image::encode_with(snapshot, &|name| arity_of(&self.library, name).unwrap_or((0, 0)))
    }

    /// Checkpoints straight to an image file.
    pub fn checkpoint_to(
        &self,
        path: &Path,
        compressed: bool,
        save: impl FnOnce() -> Option<Vec<u8>>,
    ) -> Result<CheckpointInfo> {
        let snap = self.checkpoint_with(save)?;
        let mut bytes = self.encode(&snap);
        if compressed {
            bytes = image::compress(&bytes);
        }
        std::fs::write(path, &bytes).map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))?;
        Ok(CheckpointInfo {
            image_bytes: bytes.len(),
            payload_bytes: snap.payload_bytes(),
            log_len: snap.log.len(),
        })
    }

    /// Rebuilds a session from a snapshot.
    pub fn restart(snapshot: Snapshot, mode: DispatchMode, library: Arc<KernelLibrary>) -> Result<Self> {
        let Snapshot {
            meta,
            log,
            payloads,
            managed,
            streams,
            app_state,
            binaries,
        } = snapshot;
        let device = Arc::new(Device::new(meta.seed, meta.arena_bytes)?);
        let lower = Lower::new(device, Arc::clone(&library));
        let log = CallLog::from_parts(log, binaries);
        replay_log(&lower, &log)?;

        let live: BTreeSet<StreamId> = lower.device.stream_ids().into_iter().collect();
        if live != streams.iter().copied().collect() {
            return Err(EngineError::Inconsistent(format!(
                "replayed streams {live:?} differ from saved {streams:?}"
            )));
        }

        let active: BTreeMap<AllocId, AllocationKind> = log.active_set().iter().map(|r| (r.id, r.kind)).collect();
        let mut seen = BTreeSet::new();
        for p in &payloads {
            match active.get(&p.id) {
                Some(AllocationKind::Device | AllocationKind::PinnedHost) => {}
                _ => {
                    return Err(EngineError::Inconsistent(format!(
                        "payload for {} has no matching allocation",
                        p.id.0
                    )))
                }
            }
            seen.insert(p.id);
            lower.device.restore(p.id, &Payload::Bytes(p.bytes.clone()))?;
        }
        for m in managed {
            if active.get(&m.id) != Some(&AllocationKind::Managed) {
                return Err(EngineError::Inconsistent(format!(
                    "pages for {} have no managed allocation",
                    m.id.0
                )));
            }
            seen.insert(m.id);
            lower.device.restore(m.id, &Payload::Pages(m.pages))?;
        }
        if seen.len() != active.len() {
            let missing: Vec<u64> = active.keys().filter(|id| !seen.contains(id)).map(|id| id.0).collect();
            return Err(EngineError::Inconsistent(format!(
                "no payload for active allocations {missing:?}"
            )));
        }

        Ok(Self::assemble(
            Shim::with_log(lower, mode, log),
            library,
            meta.arena_bytes,
            app_state,
        ))
    }

    /// Decodes a (possibly gzip-wrapped) image, checks recorded kernel
    /// arities against `library` and restarts from it.
    pub fn restart_from_image(bytes: &[u8], mode: DispatchMode, library: Arc<KernelLibrary>) -> Result<Self> {
        let plain = image::unwrap_compressed(bytes)?;
        let (snapshot, registry) = image::decode_full(&plain)?;
        check_registry(&registry, &library)?;
        Self::restart(snapshot, mode, library)
    }

    pub fn restart_from_file(path: &Path, mode: DispatchMode, library: Arc<KernelLibrary>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))?;
        Self::restart_from_image(&bytes, mode, library)
    }
}

fn arity_of(library: &KernelLibrary, name: &str) -> Option<(u16, u16)> {
    library.get(name).map(|k| {
        let (b, s) = k.arity();
        (b as u16, s as u16)
    })
}

fn check_registry(registry: &[RegistryEntry], library: &KernelLibrary) -> Result<()> {
    for (binary, arities) in registry {
        for (name, &recorded) in binary.kernels.iter().zip(arities) {
            let actual = arity_of(library, name).ok_or_else(|| EngineError::UnknownKernel(name.clone()))?;
            if actual != recorded {
                return Err(EngineError::KernelArity {
                    name: name.clone(),
                    recorded,
                    actual,
                });
            }
        }
    }
    Ok(())
}

fn diverged(seq: u64, reason: impl Into<String>) -> EngineError {
    EngineError::ReplayDivergence {
        seq,
        reason: reason.into(),
    }
}

fn replay_entry(
    lower: &Lower,
    e: &CallLogEntry,
    binaries: &BTreeMap<BinaryHandle, &BinaryRecord>,
) -> Result<Option<u64>> {
    let device = &lower.device;
    let failed = |err: DeviceError| diverged(e.seq, format!("{} failed: {err}", e.op.as_str()));
    match e.op {
        LogOp::Alloc => {
            let kind = e.kind.ok_or_else(|| diverged(e.seq, "alloc entry without kind"))?;
            let rec = device.alloc(kind, e.size).map_err(failed)?;
            if rec.id.0 != e.id || rec.address.0 != e.address {
                return Err(diverged(
                    e.seq,
                    format!(
                        "alloc of {} bytes gave id {} at {:#x}, log has id {} at {:#x}",
                        e.size, rec.id.0, rec.address.0, e.id, e.address
                    ),
                ));
            }
            Ok(Some(rec.address.0))
        }
        LogOp::Free => {
            device.free(AllocId(e.id)).map_err(failed)?;
            Ok(None)
        }
        LogOp::StreamCreate => {
            let id = device.stream_create().map_err(failed)?;
            if id.0 != e.id {
                return Err(diverged(
                    e.seq,
                    format!("stream create gave {}, log has {}", id.0, e.id),
                ));
            }
            Ok(None)
        }
        LogOp::StreamDestroy => {
            device.stream_destroy(StreamId(e.id)).map_err(failed)?;
            Ok(None)
        }
        LogOp::RegisterBinary => {
            let record = binaries
                .get(&BinaryHandle(e.id))
                .ok_or_else(|| diverged(e.seq, format!("no kernel list for binary {}", e.id)))?;
            let kernels = match lower.library.resolve(&record.kernels) {
                Some(k) => k,
                None => {
                    let missing = record.kernels.iter().find(|k| lower.library.get(k).is_none());
                    return Err(EngineError::UnknownKernel(missing.cloned().unwrap_or_default()));
                }
            };
            let handle = device.register_fat_binary(kernels).map_err(failed)?;
            if handle.0 != e.id {
                return Err(diverged(
                    e.seq,
                    format!("registration gave handle {}, log has {}", handle.0, e.id),
                ));
            }
            Ok(None)
        }
        LogOp::UnregisterBinary => {
            device.unregister_fat_binary(BinaryHandle(e.id)).map_err(failed)?;
            Ok(None)
        }
    }
}

/// Re-executes every log entry against a fresh lower half, in `seq` order.
/// Returns the address each `Alloc` entry produced, keyed by `seq`.
pub fn replay_log(lower: &Lower, log: &CallLog) -> Result<BTreeMap<u64, u64>> {
    if lower.device.epoch() != 0 {
        return Err(EngineError::NotFresh);
    }
    let binaries = log.binaries();
    let by_handle: BTreeMap<BinaryHandle, &BinaryRecord> = binaries.iter().map(|b| (b.handle, b)).collect();
    let mut addresses = BTreeMap::new();
    for (i, e) in log.entries().iter().enumerate() {
        if e.seq != i as u64 + 1 {
            return Err(diverged(e.seq, format!("out of order, expected seq {}", i + 1)));
        }
        if let Some(addr) = replay_entry(lower, e, &by_handle)? {
            addresses.insert(e.seq, addr);
        }
    }
    Ok(addresses)
}
