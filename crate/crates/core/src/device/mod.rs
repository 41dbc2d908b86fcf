//! The simulated accelerator runtime (the "lower half").
//!
//! [`Device`] owns device memory, streams, managed pages and the kernel
//! registry. Its state is deliberately never serialized: a checkpoint
//! captures only what the application can observe (allocation payloads,
//! managed pages, live stream ids) and rebuilds the rest by replaying the
//! call log against a fresh `Device`.
//!
//! Asynchronous work is queued per stream and executed in device-wide
//! enqueue order whenever the device drains: on [`Device::synchronize`], and
//! implicitly before any synchronous operation that touches memory (sync
//! copies, managed-page access, frees, binary unregistration). Observable
//! state is therefore defined at every synchronization point and independent
//! of when the queues happen to drain.

mod allocator;
pub mod kernel;
mod stream;
mod uvm;

use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use allocator::{align_up, AllocatorState, ALIGN, ARENA_BASE};
pub use kernel::{KernelBody, KernelDescriptor, KernelLibrary};
pub use stream::{StreamState, MAX_STREAMS};
pub use uvm::{ManagedPage, Side, PAGE_SIZE};

use stream::{Task, TaskOp};
use uvm::ManagedMemory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AllocId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StreamId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BinaryHandle(pub u64);

/// Simulated address inside the device arena.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DevicePtr(pub u64);

impl std::fmt::LowerHex for DevicePtr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::LowerHex::fmt(&self.0, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AllocationKind {
    Device,
    PinnedHost,
    Managed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationRecord {
    pub id: AllocId,
    pub kind: AllocationKind,
    /// Requested size in bytes (the arena extent is this rounded up to [`ALIGN`]).
    pub size: u64,
    pub address: DevicePtr,
    pub freed: bool,
}

/// An allocation plus a byte offset into it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferRef {
    pub id: AllocId,
    pub offset: u64,
}

impl BufferRef {
    pub fn new(id: AllocId, offset: u64) -> Self {
        Self { id, offset }
    }
}

impl From<AllocId> for BufferRef {
    fn from(id: AllocId) -> Self {
        Self { id, offset: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CopyDirection {
    HostToDevice,
    DeviceToHost,
    DeviceToDevice,
}

impl CopyDirection {
    fn sides(self) -> (Side, Side) {
        match self {
            CopyDirection::HostToDevice => (Side::Host, Side::Device),
            CopyDirection::DeviceToHost => (Side::Device, Side::Host),
            CopyDirection::DeviceToDevice => (Side::Device, Side::Device),
        }
    }
}

/// Managed-page access. `Write` carries the bytes to store.
#[derive(Clone, Copy, Debug)]
pub enum Access<'a> {
    Read(u64),
    Write(&'a [u8]),
}

/// Captured content of one live allocation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Payload {
    Bytes(Vec<u8>),
    Pages(Vec<ManagedPage>),
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeviceError {
    #[error("arena size {0} must be a positive multiple of {ALIGN}")]
    InvalidArenaSize(u64),
    #[error("zero-sized allocation")]
    ZeroSize,
    #[error("out of arena: no hole fits {0} bytes")]
    OutOfArena(u64),
    #[error("unknown allocation {0:?}")]
    UnknownId(AllocId),
    #[error("allocation {0:?} already freed")]
    DoubleFree(AllocId),
    #[error("stream limit of {MAX_STREAMS} exceeded")]
    StreamLimitExceeded,
    #[error("unknown stream {0:?}")]
    UnknownStream(StreamId),
    #[error("stream {0:?} has pending tasks")]
    BusyStream(StreamId),
    #[error("kernel {0:?} is not registered")]
    UnregisteredKernel(String),
    #[error("kernel id {0:?} is already registered")]
    DuplicateKernelId(String),
    #[error("unknown binary handle {0:?}")]
    UnknownBinary(BinaryHandle),
    #[error("range {offset}+{len} out of bounds for {id:?} of {size} bytes")]
    OutOfRange {
        id: AllocId,
        offset: u64,
        len: u64,
        size: u64,
    },
    #[error("allocation {0:?} is not managed memory")]
    NotManaged(AllocId),
    #[error("allocation {id:?} of kind {kind:?} cannot be used here")]
    WrongKind { id: AllocId, kind: AllocationKind },
    #[error("kernel {kernel:?} takes {expected:?} (buffers, scalars), got {got:?}")]
    ArityMismatch {
        kernel: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("kernel {kernel:?} rejected its arguments: {reason}")]
    BadKernelArgs { kernel: String, reason: String },
    #[error("allocation {0:?} passed twice to one launch")]
    AliasedBuffers(AllocId),
    #[error("restore mismatch for {0:?}: {1}")]
    RestoreMismatch(AllocId, String),
}

pub type Result<T, E = DeviceError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Eq)]
enum Backing {
    Plain(Vec<u8>),
    Managed(ManagedMemory),
}

impl Backing {
    /// Slice of `[start, start+len)` on `side`, migrating managed pages there.
    fn region(&mut self, side: Side, start: usize, len: usize) -> &mut [u8] {
        match self {
            Backing::Plain(v) => &mut v[start..start + len],
            Backing::Managed(m) => {
                m.migrate(start, len, side);
                &mut m.side_mut(side)[start..start + len]
            }
        }
    }

    fn write(&mut self, side: Side, start: usize, data: &[u8]) {
        match self {
            Backing::Plain(v) => v[start..start + data.len()].copy_from_slice(data),
            Backing::Managed(m) => m.write(start, data, side),
        }
    }
}

/// All runtime state of one device context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeviceState {
    seed: u64,
    arena_bytes: u64,
    arena: AllocatorState,
    records: BTreeMap<AllocId, AllocationRecord>,
    memory: BTreeMap<AllocId, Backing>,
    streams: BTreeMap<StreamId, StreamState>,
    /// Stream of each pending task, in device-wide enqueue order.
    pending: VecDeque<StreamId>,
    binaries: BTreeMap<BinaryHandle, Vec<KernelDescriptor>>,
    kernels: BTreeMap<String, (BinaryHandle, KernelDescriptor)>,
    epoch: u64,
    next_alloc: u64,
    next_stream: u64,
    next_binary: u64,
    next_task: u64,
    trace: Option<Vec<(StreamId, u64)>>,
}

impl DeviceState {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn arena_bytes(&self) -> u64 {
        self.arena_bytes
    }

    pub fn allocator(&self) -> &AllocatorState {
        &self.arena
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn streams(&self) -> impl Iterator<Item = &StreamState> {
        self.streams.values()
    }

    pub fn pending_tasks(&self) -> usize {
        self.pending.len()
    }

    pub fn records(&self) -> impl Iterator<Item = &AllocationRecord> {
        self.records.values()
    }

    /// `(handle, kernel ids)` for every registered binary.
    pub fn binaries(&self) -> Vec<(BinaryHandle, Vec<String>)> {
        self.binaries
            .iter()
            .map(|(h, ks)| (*h, ks.iter().map(|k| k.name().to_owned()).collect()))
            .collect()
    }

    /// Residence and dirty flag of a managed page.
    pub fn page_meta(&self, id: AllocId, index: usize) -> Option<(Side, bool)> {
        match self.memory.get(&id)? {
            Backing::Managed(m) => m.page_meta(index),
            Backing::Plain(_) => None,
        }
    }

    /// Order in which tasks ran, when tracing is on.
    pub fn trace(&self) -> Option<&[(StreamId, u64)]> {
        self.trace.as_deref()
    }

    fn bump(&mut self) {
        self.epoch += 1;
    }

    fn live(&self, id: AllocId) -> Result<&AllocationRecord> {
        match self.records.get(&id) {
            None => Err(DeviceError::UnknownId(id)),
            Some(r) if r.freed => Err(DeviceError::UnknownId(id)),
            Some(r) => Ok(r),
        }
    }

    fn check_range(&self, id: AllocId, offset: u64, len: u64) -> Result<&AllocationRecord> {
        let rec = self.live(id)?;
        match offset.checked_add(len) {
            Some(end) if end <= rec.size => Ok(rec),
            _ => Err(DeviceError::OutOfRange {
                id,
                offset,
                len,
                size: rec.size,
            }),
        }
    }

    fn check_copy(&self, dst: BufferRef, src: BufferRef, len: u64, direction: CopyDirection) -> Result<()> {
        use AllocationKind::*;
        let s = self.check_range(src.id, src.offset, len)?;
        let d = self.check_range(dst.id, dst.offset, len)?;
        let (src_ok, dst_ok) = match direction {
            CopyDirection::HostToDevice => (s.kind != Device, d.kind != PinnedHost),
            CopyDirection::DeviceToHost => (s.kind != PinnedHost, d.kind != Device),
            CopyDirection::DeviceToDevice => (s.kind != PinnedHost, d.kind != PinnedHost),
        };
        if !src_ok {
            return Err(DeviceError::WrongKind { id: s.id, kind: s.kind });
        }
        if !dst_ok {
            return Err(DeviceError::WrongKind { id: d.id, kind: d.kind });
        }
        Ok(())
    }

    fn check_launch(&self, kernel: &str, buffers: &[BufferRef], scalars: &[u64]) -> Result<()> {
        let (_, desc) = self
            .kernels
            .get(kernel)
            .ok_or_else(|| DeviceError::UnregisteredKernel(kernel.to_owned()))?;
        if desc.arity() != (buffers.len(), scalars.len()) {
            return Err(DeviceError::ArityMismatch {
                kernel: kernel.to_owned(),
                expected: desc.arity(),
                got: (buffers.len(), scalars.len()),
            });
        }
        let mut lens = Vec::with_capacity(buffers.len());
        for (i, b) in buffers.iter().enumerate() {
            let rec = self.live(b.id)?;
            if b.offset >= rec.size {
                return Err(DeviceError::OutOfRange {
                    id: b.id,
                    offset: b.offset,
                    len: 0,
                    size: rec.size,
                });
            }
            if buffers[..i].iter().any(|o| o.id == b.id) {
                return Err(DeviceError::AliasedBuffers(b.id));
            }
            lens.push((rec.size - b.offset) as usize);
        }
        desc.check(&lens, scalars).map_err(|reason| DeviceError::BadKernelArgs {
            kernel: kernel.to_owned(),
            reason,
        })
    }

    fn enqueue(&mut self, stream: StreamId, op: TaskOp) -> Result<()> {
        let seq = self.next_task;
        let s = self
            .streams
            .get_mut(&stream)
            .ok_or(DeviceError::UnknownStream(stream))?;
        s.queue.push_back(Task { seq, op });
        self.next_task += 1;
        self.pending.push_back(stream);
        self.bump();
        Ok(())
    }

    /// Runs the oldest pending task. `false` when nothing was pending.
    fn step(&mut self) -> bool {
        let Some(sid) = self.pending.pop_front() else {
            return false;
        };
        let stream = self.streams.get_mut(&sid).expect("pending task on a dead stream");
        let task = stream.queue.pop_front().expect("stream queue out of sync");
        stream.completed += 1;
        if let Some(trace) = &mut self.trace {
            trace.push((sid, task.seq));
        }
        self.execute(task.op);
        true
    }

    fn drain(&mut self) -> u64 {
        let mut n = 0;
        while self.step() {
            n += 1;
        }
        if n > 0 {
            self.bump();
        }
        n
    }

    fn execute(&mut self, op: TaskOp) {
        match op {
            TaskOp::Kernel {
                kernel,
                buffers,
                scalars,
            } => {
                let desc = self.kernels[&kernel].1.clone();
                let mut taken: Vec<Backing> = buffers
                    .iter()
                    .map(|b| self.memory.remove(&b.id).expect("launch validated"))
                    .collect();
                {
                    let mut slices: Vec<&mut [u8]> = taken
                        .iter_mut()
                        .zip(&buffers)
                        .map(|(backing, b)| {
                            let start = b.offset as usize;
                            let len = match backing {
                                Backing::Plain(v) => v.len(),
                                Backing::Managed(m) => m.len(),
                            } - start;
                            backing.region(Side::Device, start, len)
                        })
                        .collect();
                    desc.run(&mut slices, &scalars);
                }
                for (backing, b) in taken.iter_mut().zip(&buffers) {
                    if let Backing::Managed(m) = backing {
                        let start = b.offset as usize;
                        m.mark_dirty(start, m.len() - start);
                    }
                }
                for (backing, b) in taken.into_iter().zip(&buffers) {
                    self.memory.insert(b.id, backing);
                }
            }
            TaskOp::Copy {
                dst,
                src,
                len,
                direction,
            } => {
                let (src_side, dst_side) = direction.sides();
                let len = len as usize;
                let data = self
                    .memory
                    .get_mut(&src.id)
                    .expect("copy validated")
                    .region(src_side, src.offset as usize, len)
                    .to_vec();
                self.memory
                    .get_mut(&dst.id)
                    .expect("copy validated")
                    .write(dst_side, dst.offset as usize, &data);
            }
        }
    }
}

/// A device context. All methods take `&self`; state mutation is serialized
/// internally.
#[derive(Debug)]
pub struct Device {
    state: Mutex<DeviceState>,
}

impl Device {
    /// Fresh context with one hole spanning `arena_bytes` at [`ARENA_BASE`].
    pub fn new(seed: u64, arena_bytes: u64) -> Result<Self> {
        if arena_bytes == 0 || arena_bytes % ALIGN != 0 || ARENA_BASE.checked_add(arena_bytes).is_none() {
            return Err(DeviceError::InvalidArenaSize(arena_bytes));
        }
        Ok(Self {
            state: Mutex::new(DeviceState {
                seed,
                arena_bytes,
                arena: AllocatorState::new(arena_bytes),
                records: BTreeMap::new(),
                memory: BTreeMap::new(),
                streams: BTreeMap::new(),
                pending: VecDeque::new(),
                binaries: BTreeMap::new(),
                kernels: BTreeMap::new(),
                epoch: 0,
                next_alloc: 1,
                next_stream: 1,
                next_binary: 1,
                next_task: 1,
                trace: None,
            }),
        })
    }

    pub fn seed(&self) -> u64 {
        self.state.lock().seed
    }

    pub fn arena_bytes(&self) -> u64 {
        self.state.lock().arena_bytes
    }

    pub fn epoch(&self) -> u64 {
        self.state.lock().epoch
    }

    /// Clone of the full state, for comparisons and diagnostics.
    pub fn state(&self) -> DeviceState {
        self.state.lock().clone()
    }

    /// Runs `f` against the state under the device lock.
    pub fn inspect<T>(&self, f: impl FnOnce(&DeviceState) -> T) -> T {
        f(&self.state.lock())
    }

    /// Records the execution order of tasks from now on.
    pub fn set_trace(&self, on: bool) {
        self.state.lock().trace = on.then(Vec::new);
    }

    pub fn alloc(&self, kind: AllocationKind, size: u64) -> Result<AllocationRecord> {
        if size == 0 {
            return Err(DeviceError::ZeroSize);
        }
        let mut st = self.state.lock();
        let id = AllocId(st.next_alloc);
        let address = st.arena.allocate(id, size).ok_or(DeviceError::OutOfArena(size))?;
        st.next_alloc += 1;
        let backing = match kind {
            AllocationKind::Managed => Backing::Managed(ManagedMemory::new(size as usize)),
            _ => Backing::Plain(vec![0; size as usize]),
        };
        let record = AllocationRecord {
            id,
            kind,
            size,
            address,
            freed: false,
        };
        st.records.insert(id, record);
        st.memory.insert(id, backing);
        st.bump();
        Ok(record)
    }

    /// Frees `id`. Drains pending work first.
    pub fn free(&self, id: AllocId) -> Result<AllocationRecord> {
        let mut st = self.state.lock();
        match st.records.get(&id) {
            None => return Err(DeviceError::UnknownId(id)),
            Some(r) if r.freed => return Err(DeviceError::DoubleFree(id)),
            Some(_) => {}
        }
        st.drain();
        st.arena.release(id).expect("live record without extent");
        st.memory.remove(&id);
        let rec = st.records.get_mut(&id).unwrap();
        rec.freed = true;
        let rec = *rec;
        st.bump();
        Ok(rec)
    }

    pub fn stream_create(&self) -> Result<StreamId> {
        let mut st = self.state.lock();
        if st.streams.len() >= MAX_STREAMS {
            return Err(DeviceError::StreamLimitExceeded);
        }
        let id = StreamId(st.next_stream);
        st.next_stream += 1;
        st.streams.insert(id, StreamState::new(id));
        st.bump();
        Ok(id)
    }

    pub fn stream_destroy(&self, id: StreamId) -> Result<()> {
        let mut st = self.state.lock();
        let s = st.streams.get(&id).ok_or(DeviceError::UnknownStream(id))?;
        if s.pending() > 0 {
            return Err(DeviceError::BusyStream(id));
        }
        st.streams.remove(&id);
        st.bump();
        Ok(())
    }

    pub fn register_fat_binary(&self, kernels: Vec<KernelDescriptor>) -> Result<BinaryHandle> {
        let mut st = self.state.lock();
        for (i, k) in kernels.iter().enumerate() {
            if st.kernels.contains_key(k.name()) || kernels[..i].iter().any(|o| o.name() == k.name()) {
                return Err(DeviceError::DuplicateKernelId(k.name().to_owned()));
            }
        }
        let handle = BinaryHandle(st.next_binary);
        st.next_binary += 1;
        for k in &kernels {
            st.kernels.insert(k.name().to_owned(), (handle, k.clone()));
        }
        st.binaries.insert(handle, kernels);
        st.bump();
        Ok(handle)
    }

    /// Drains pending work, then removes the binary's kernels.
    pub fn unregister_fat_binary(&self, handle: BinaryHandle) -> Result<()> {
        let mut st = self.state.lock();
        if !st.binaries.contains_key(&handle) {
            return Err(DeviceError::UnknownBinary(handle));
        }
        st.drain();
        for k in st.binaries.remove(&handle).unwrap() {
            st.kernels.remove(k.name());
        }
        st.bump();
        Ok(())
    }

    /// Enqueues a kernel on `stream`. Runs no later than the next drain.
    pub fn launch_kernel(&self, stream: StreamId, kernel: &str, buffers: &[BufferRef], scalars: &[u64]) -> Result<()> {
        let mut st = self.state.lock();
        if !st.streams.contains_key(&stream) {
            return Err(DeviceError::UnknownStream(stream));
        }
        st.check_launch(kernel, buffers, scalars)?;
        st.enqueue(
            stream,
            TaskOp::Kernel {
                kernel: kernel.to_owned(),
                buffers: buffers.to_vec(),
                scalars: scalars.to_vec(),
            },
        )
    }

    /// Copy between allocations. Host-side operands must be pinned or managed,
    /// device-side operands device or managed. Synchronous (after a drain)
    /// without a stream, queued on the stream otherwise.
    pub fn memcpy(
        &self,
        dst: BufferRef,
        src: BufferRef,
        len: u64,
        direction: CopyDirection,
        stream: Option<StreamId>,
    ) -> Result<()> {
        let mut st = self.state.lock();
        st.check_copy(dst, src, len, direction)?;
        let op = TaskOp::Copy {
            dst,
            src,
            len,
            direction,
        };
        match stream {
            Some(sid) => st.enqueue(sid, op),
            None => {
                st.drain();
                st.execute(op);
                st.bump();
                Ok(())
            }
        }
    }

    /// Synchronous copy from application memory into an allocation.
    pub fn upload(&self, dst: BufferRef, data: &[u8]) -> Result<()> {
        let mut st = self.state.lock();
        let kind = st.check_range(dst.id, dst.offset, data.len() as u64)?.kind;
        st.drain();
        let side = if kind == AllocationKind::PinnedHost {
            Side::Host
        } else {
            Side::Device
        };
        st.memory
            .get_mut(&dst.id)
            .unwrap()
            .write(side, dst.offset as usize, data);
        st.bump();
        Ok(())
    }

    /// Synchronous copy from an allocation into application memory.
    pub fn download(&self, src: BufferRef, len: u64) -> Result<Vec<u8>> {
        let mut st = self.state.lock();
        let kind = st.check_range(src.id, src.offset, len)?.kind;
        st.drain();
        let side = if kind == AllocationKind::PinnedHost {
            Side::Host
        } else {
            Side::Device
        };
        let out = st
            .memory
            .get_mut(&src.id)
            .unwrap()
            .region(side, src.offset as usize, len as usize)
            .to_vec();
        st.bump();
        Ok(out)
    }

    /// Direct application store into pinned host memory. Does not drain:
    /// queued copies into the same bytes may still land afterwards.
    pub fn write_host(&self, dst: BufferRef, data: &[u8]) -> Result<()> {
        let mut st = self.state.lock();
        let rec = st.check_range(dst.id, dst.offset, data.len() as u64)?;
        if rec.kind != AllocationKind::PinnedHost {
            return Err(DeviceError::WrongKind {
                id: rec.id,
                kind: rec.kind,
            });
        }
        st.memory
            .get_mut(&dst.id)
            .unwrap()
            .write(Side::Host, dst.offset as usize, data);
        st.bump();
        Ok(())
    }

    /// Direct application load from pinned host memory. Does not drain.
    pub fn read_host(&self, src: BufferRef, len: u64) -> Result<Vec<u8>> {
        let mut st = self.state.lock();
        let rec = st.check_range(src.id, src.offset, len)?;
        if rec.kind != AllocationKind::PinnedHost {
            return Err(DeviceError::WrongKind {
                id: rec.id,
                kind: rec.kind,
            });
        }
        Ok(st
            .memory
            .get_mut(&src.id)
            .unwrap()
            .region(Side::Host, src.offset as usize, len as usize)
            .to_vec())
    }

    /// Touches a managed range from `side`, migrating pages that live on the
    /// other side. Returns the bytes for reads and an empty buffer for writes.
    pub fn page_access(&self, id: AllocId, offset: u64, side: Side, access: Access<'_>) -> Result<Vec<u8>> {
        let mut st = self.state.lock();
        let len = match access {
            Access::Read(n) => n,
            Access::Write(data) => data.len() as u64,
        };
        let rec = st.check_range(id, offset, len)?;
        if rec.kind != AllocationKind::Managed {
            return Err(DeviceError::NotManaged(id));
        }
        st.drain();
        let Some(Backing::Managed(m)) = st.memory.get_mut(&id) else {
            unreachable!("managed record without managed backing")
        };
        let before = m.migrations();
        let out = match access {
            Access::Read(n) => m.read(offset as usize, n as usize, side),
            Access::Write(data) => {
                m.write(offset as usize, data, side);
                Vec::new()
            }
        };
        if m.migrations() != before || matches!(access, Access::Write(_)) {
            st.bump();
        }
        Ok(out)
    }

    /// Full barrier: runs every pending task. Returns how many ran.
    pub fn synchronize(&self) -> u64 {
        self.state.lock().drain()
    }

    /// Drains task by task until done or `deadline` passes. `true` if the
    /// queues are empty on return.
    pub fn drain_until(&self, deadline: Instant) -> bool {
        loop {
            let mut st = self.state.lock();
            if st.pending.is_empty() {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            st.step();
            st.bump();
        }
    }

    pub fn record(&self, id: AllocId) -> Option<AllocationRecord> {
        self.state.lock().records.get(&id).copied()
    }

    /// Live allocations in allocation order.
    pub fn live_records(&self) -> Vec<AllocationRecord> {
        self.state
            .lock()
            .records
            .values()
            .filter(|r| !r.freed)
            .copied()
            .collect()
    }

    pub fn stream_ids(&self) -> Vec<StreamId> {
        self.state.lock().streams.keys().copied().collect()
    }

    pub fn pending_tasks(&self) -> usize {
        self.state.lock().pending.len()
    }

    /// Reads an allocation's content without migrating anything. Managed
    /// allocations yield their pages as they sit on their residence side.
    pub fn capture(&self, id: AllocId) -> Result<Payload> {
        let st = self.state.lock();
        st.live(id)?;
        Ok(match &st.memory[&id] {
            Backing::Plain(v) => Payload::Bytes(v.clone()),
            Backing::Managed(m) => Payload::Pages(m.pages()),
        })
    }

    /// Authoritative bytes of an allocation, without migrating anything.
    pub fn contents(&self, id: AllocId) -> Result<Vec<u8>> {
        let st = self.state.lock();
        st.live(id)?;
        Ok(match &st.memory[&id] {
            Backing::Plain(v) => v.clone(),
            Backing::Managed(m) => m.pages().into_iter().flat_map(|p| p.content).collect(),
        })
    }

    /// Appends an allocation's authoritative bytes to `out`.
    pub fn append_contents(&self, id: AllocId, out: &mut Vec<u8>) -> Result<()> {
        let st = self.state.lock();
        st.live(id)?;
        match &st.memory[&id] {
            Backing::Plain(v) => out.extend_from_slice(v),
            Backing::Managed(m) => {
                for p in m.pages() {
                    out.extend_from_slice(&p.content);
                }
            }
        }
        Ok(())
    }

    /// Replaces an allocation's bytes in place. Managed pages keep their
    /// residence and dirty flags. The epoch is left alone: writing back
    /// identical bytes is not an observable mutation.
    pub fn overwrite(&self, id: AllocId, data: &[u8]) -> Result<()> {
        let mut st = self.state.lock();
        let size = st.live(id)?.size;
        if data.len() as u64 != size {
            return Err(DeviceError::RestoreMismatch(
                id,
                format!("{} bytes, expected {size}", data.len()),
            ));
        }
        match st.memory.get_mut(&id).unwrap() {
            Backing::Plain(v) => v.copy_from_slice(data),
            Backing::Managed(m) => m.overwrite(data),
        }
        Ok(())
    }

    /// Installs captured content into a live allocation of matching shape.
    pub fn restore(&self, id: AllocId, payload: &Payload) -> Result<()> {
        let mut st = self.state.lock();
        st.live(id)?;
        match (st.memory.get_mut(&id).unwrap(), payload) {
            (Backing::Plain(v), Payload::Bytes(bytes)) => {
                if v.len() != bytes.len() {
                    return Err(DeviceError::RestoreMismatch(
                        id,
                        format!("{} bytes, expected {}", bytes.len(), v.len()),
                    ));
                }
                v.copy_from_slice(bytes);
            }
            (Backing::Managed(m), Payload::Pages(pages)) => {
                if pages.len() != m.page_count() {
                    return Err(DeviceError::RestoreMismatch(
                        id,
                        format!("{} pages, expected {}", pages.len(), m.page_count()),
                    ));
                }
                for p in pages {
                    m.restore_page(p).map_err(|e| DeviceError::RestoreMismatch(id, e))?;
                }
            }
            _ => return Err(DeviceError::RestoreMismatch(id, "payload kind differs".into())),
        }
        st.bump();
        Ok(())
    }
}

#[cfg(test)]
mod tests;
