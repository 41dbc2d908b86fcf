//! Deterministic workloads written as resumable step machines.
//!
//! Each workload has one or more lanes (logical application threads). A lane
//! advances one step at a time; its whole state (cursor, handles, running
//! digest) is plain data, so it can be serialized into the session's app
//! state at a step boundary and picked up again after a restart.

use std::str::FromStr;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::device::kernel::builtin;
use crate::device::{AllocId, AllocationKind, BinaryHandle, BufferRef, CopyDirection, Side, StreamId, MAX_STREAMS};
use crate::shim::{Runtime, RuntimeExt};

type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WorkloadKind {
    StreamOverlap,
    UvmTasks,
    BlasDot,
    BlasGemv,
    BlasGemm,
    AllocChurn,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 6] = [
        WorkloadKind::StreamOverlap,
        WorkloadKind::UvmTasks,
        WorkloadKind::BlasDot,
        WorkloadKind::BlasGemv,
        WorkloadKind::BlasGemm,
        WorkloadKind::AllocChurn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WorkloadKind::StreamOverlap => "stream_overlap",
            WorkloadKind::UvmTasks => "uvm_tasks",
            WorkloadKind::BlasDot => "blas_dot",
            WorkloadKind::BlasGemv => "blas_gemv",
            WorkloadKind::BlasGemm => "blas_gemm",
            WorkloadKind::AllocChurn => "alloc_churn",
        }
    }

    /// Workloads whose wall time is meaningful to compare across modes.
    pub fn is_timing(self) -> bool {
        !matches!(self, WorkloadKind::UvmTasks | WorkloadKind::AllocChurn)
    }
}

impl std::fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WorkloadKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        WorkloadKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown workload {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    /// Streams (stream_overlap, uvm_tasks).
    pub streams: u32,
    /// Problem size in bytes; meaning depends on the workload.
    pub data_bytes: u64,
    /// Repetitions, tasks (uvm_tasks) or steps per thread (alloc_churn).
    pub iterations: u64,
    pub seed: u64,
    /// Application threads (alloc_churn); 1 elsewhere.
    pub threads: u32,
}

/// Seed of the task assignment in the unified-memory workload.
pub const UVM_DEFAULT_SEED: u64 = 12701;
/// Bytes per task in the unified-memory workload; two tasks share a page.
pub const UVM_SLOT: u64 = 2048;
/// Columns of the gemv matrix.
pub const GEMV_COLS: u64 = 1024;
/// Output columns and inner dimension of the tall-skinny gemm.
pub const GEMM_COLS: u64 = 256;
pub const GEMM_INNER: u64 = 4;
/// Operand shift range: iteration `i` reads its vector operand `i % SHIFTS`
/// elements in, so consecutive iterations compute different results.
pub const SHIFTS: u64 = 8;

impl WorkloadSpec {
    /// Defaults per workload.
    pub fn new(kind: WorkloadKind) -> Self {
        let (streams, data_bytes, iterations, seed, threads) = match kind {
            WorkloadKind::StreamOverlap => (4, 1 << 18, 100, 1, 1),
            WorkloadKind::UvmTasks => (128, 0, 1280, UVM_DEFAULT_SEED, 1),
            WorkloadKind::BlasDot | WorkloadKind::BlasGemv | WorkloadKind::BlasGemm => (1, 1 << 20, 1000, 1, 1),
            WorkloadKind::AllocChurn => (1, 1 << 16, 200, 1, 8),
        };
        Self {
            kind,
            streams,
            data_bytes,
            iterations,
            seed,
            threads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::InvalidSpec(m));
        if self.streams == 0 || self.streams as usize > MAX_STREAMS {
            return bad(format!("streams must be 1..={MAX_STREAMS}, got {}", self.streams));
        }
        if self.threads == 0 || self.threads > 64 {
            return bad(format!("threads must be 1..=64, got {}", self.threads));
        }
        if self.kind != WorkloadKind::UvmTasks && self.data_bytes < 64 {
            return bad(format!("data size {} is below 64 bytes", self.data_bytes));
        }
        if self.kind == WorkloadKind::StreamOverlap && self.data_bytes < 4 * self.streams as u64 {
            return bad("stream_overlap needs at least 4 bytes per stream".into());
        }
        Ok(())
    }

    /// Logical application threads.
    pub fn lanes(&self) -> usize {
        match self.kind {
            WorkloadKind::AllocChurn => self.threads as usize,
            _ => 1,
        }
    }

    /// Steps one lane takes from start to finish.
    pub fn lane_steps(&self) -> u64 {
        match self.kind {
            WorkloadKind::AllocChurn => self.iterations + 1,
            _ => self.iterations + 2,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.lane_steps() * self.lanes() as u64
    }
}

/// FNV-1a over 64-bit little-endian words, zero-padded at the tail.
pub fn digest_bytes(mut h: u64, bytes: &[u8]) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut words = bytes.chunks_exact(8);
    for w in words.by_ref() {
        h = (h ^ u64::from_le_bytes(w.try_into().unwrap())).wrapping_mul(PRIME);
    }
    let rest = words.remainder();
    if !rest.is_empty() {
        let mut w = [0u8; 8];
        w[..rest.len()].copy_from_slice(rest);
        h = (h ^ u64::from_le_bytes(w)).wrapping_mul(PRIME);
    }
    (h ^ bytes.len() as u64).wrapping_mul(PRIME)
}

pub const DIGEST_INIT: u64 = 0xcbf2_9ce4_8422_2325;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Randomness for one step of one lane.
fn step_rng(seed: u64, lane: usize, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(lane as u64 ^ splitmix(step))))
}

fn random_f32s(rng: &mut ChaCha8Rng, count: u64) -> Vec<u8> {
    (0..count)
        .flat_map(|_| rng.gen_range(-1.0f32..1.0).to_le_bytes())
        .collect()
}

/// Deterministic content of a churn allocation.
fn churn_pattern(tag: u64, size: u64) -> Vec<u8> {
    (0..size.div_ceil(8))
        .flat_map(|i| splitmix(tag ^ i.wrapping_mul(0x0010_0000_0001)).to_le_bytes())
        .take(size as usize)
        .collect()
}

/// State machine for one workload lane.
trait Lane: Serialize + DeserializeOwned + Send + 'static {
    fn start(spec: &WorkloadSpec, lane: usize) -> Self;
    fn cursor(&self) -> u64;
    fn digest(&self) -> u64;
    /// Runs the step at `cursor()` and advances the cursor.
    fn step(&mut self, spec: &WorkloadSpec, lane: usize, rt: &dyn Runtime) -> Result<()>;
}

// ---------------------------------------------------------------------------
// stream_overlap: every stream initializes its chunk of a device array and
// copies it back asynchronously; the copies are collected one step later.

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StreamOverlap {
    cursor: u64,
    digest: u64,
    binary: Option<BinaryHandle>,
    streams: Vec<StreamId>,
    device: Option<AllocId>,
    host: Option<AllocId>,
}

impl StreamOverlap {
    fn chunk(spec: &WorkloadSpec) -> u64 {
        spec.data_bytes / spec.streams as u64 / 4 * 4
    }

    fn collect(&mut self, spec: &WorkloadSpec, rt: &dyn Runtime) -> Result<()> {
        rt.synchronize()?;
        let len = Self::chunk(spec) * spec.streams as u64;
        let bytes = rt.read_host(self.host.unwrap().into(), len)?;
        self.digest = digest_bytes(self.digest, &bytes);
        Ok(())
    }
}

impl Lane for StreamOverlap {
    fn start(_: &WorkloadSpec, _: usize) -> Self {
        Self {
            cursor: 0,
            digest: DIGEST_INIT,
            binary: None,
            streams: Vec::new(),
            device: None,
            host: None,
        }
    }

    fn cursor(&self) -> u64 {
        self.cursor
    }

    fn digest(&self) -> u64 {
        self.digest
    }

    fn step(&mut self, spec: &WorkloadSpec, lane: usize, rt: &dyn Runtime) -> Result<()> {
        let chunk = Self::chunk(spec);
        let total = chunk * spec.streams as u64;
        let last = spec.iterations + 1;
        match self.cursor {
            0 => {
                self.binary = Some(rt.register_binary(&[builtin::INIT_ARRAY])?);
                for _ in 0..spec.streams {
                    self.streams.push(rt.stream_create()?);
                }
                self.device = Some(rt.alloc(AllocationKind::Device, total)?.id);
                self.host = Some(rt.alloc(AllocationKind::PinnedHost, total)?.id);
            }
            c if c == last => {
                if spec.iterations > 0 {
                    self.collect(spec, rt)?;
                }
                for s in self.streams.drain(..) {
                    rt.stream_destroy(s)?;
                }
                rt.free(self.device.take().unwrap())?;
                rt.free(self.host.take().unwrap())?;
                rt.unregister_binary(self.binary.take().unwrap())?;
            }
            c => {
                if c > 1 {
                    self.collect(spec, rt)?;
                }
                let mut rng = step_rng(spec.seed, lane, c);
                let (dev, host) = (self.device.unwrap(), self.host.unwrap());
                for (i, &s) in self.streams.iter().enumerate() {
                    let at = i as u64 * chunk;
                    let value = rng.gen::<u32>() as u64;
                    let reps = rng.gen_range(1..4);
                    rt.launch(
                        s,
                        builtin::INIT_ARRAY,
                        &[BufferRef::new(dev, at)],
                        &[value, chunk / 4, reps],
                    )?;
                    rt.memcpy(
                        BufferRef::new(host, at),
                        BufferRef::new(dev, at),
                        chunk,
                        CopyDirection::DeviceToHost,
                        Some(s),
                    )?;
                }
            }
        }
        self.cursor += 1;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// uvm_tasks: tasks on one managed buffer, each consumed either on the host
// (page access) or on the device (kernel on a stream). Slots are half a page,
// so consecutive tasks on different streams write disjoint halves of one page.

/// One task of the unified-memory workload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UvmTask {
    pub stream: usize,
    pub slot: u64,
    pub side: Side,
    pub mul: u32,
    pub add: u32,
}

/// Slots in the managed buffer: two per stream.
pub fn uvm_slots(streams: u32) -> u64 {
    2 * streams as u64
}

/// Task `t` of a `uvm_tasks` run: a pure function of `(seed, streams, t)`.
pub fn uvm_task(seed: u64, streams: u32, t: u64) -> UvmTask {
    let mut rng = step_rng(seed, 0, t + 1);
    UvmTask {
        stream: (t % streams as u64) as usize,
        slot: t % uvm_slots(streams),
        side: if rng.gen_bool(0.5) { Side::Host } else { Side::Device },
        mul: rng.gen::<u32>() | 1,
        add: rng.gen(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct UvmTasks {
    cursor: u64,
    digest: u64,
    binary: Option<BinaryHandle>,
    streams: Vec<StreamId>,
    buffer: Option<AllocId>,
}

impl UvmTasks {
    fn buffer_len(spec: &WorkloadSpec) -> u64 {
        uvm_slots(spec.streams) * UVM_SLOT
    }

    fn collect(&mut self, spec: &WorkloadSpec, rt: &dyn Runtime) -> Result<()> {
        rt.synchronize()?;
        let bytes = rt.page_read(self.buffer.unwrap(), 0, Self::buffer_len(spec), Side::Host)?;
        self.digest = digest_bytes(self.digest, &bytes);
        Ok(())
    }
}

impl Lane for UvmTasks {
    fn start(_: &WorkloadSpec, _: usize) -> Self {
        Self {
            cursor: 0,
            digest: DIGEST_INIT,
            binary: None,
            streams: Vec::new(),
            buffer: None,
        }
    }

    fn cursor(&self) -> u64 {
        self.cursor
    }

    fn digest(&self) -> u64 {
        self.digest
    }

    fn step(&mut self, spec: &WorkloadSpec, lane: usize, rt: &dyn Runtime) -> Result<()> {
        let last = spec.iterations + 1;
        match self.cursor {
            0 => {
                self.binary = Some(rt.register_binary(&[builtin::TRANSFORM])?);
                for _ in 0..spec.streams {
                    self.streams.push(rt.stream_create()?);
                }
                let len = Self::buffer_len(spec);
                let buf = rt.alloc(AllocationKind::Managed, len)?.id;
                let mut rng = step_rng(spec.seed, lane, 0);
                let init: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                rt.page_write(buf, 0, &init, Side::Host)?;
                self.buffer = Some(buf);
            }
            c if c == last => {
                self.collect(spec, rt)?;
                for s in self.streams.drain(..) {
                    rt.stream_destroy(s)?;
                }
                rt.free(self.buffer.take().unwrap())?;
                rt.unregister_binary(self.binary.take().unwrap())?;
            }
            c => {
                let t = c - 1;
                let task = uvm_task(spec.seed, spec.streams, t);
                let buf = self.buffer.unwrap();
                let at = task.slot * UVM_SLOT;
                let lanes = UVM_SLOT / 4;
                match task.side {
                    Side::Host => {
                        let mut bytes = rt.page_read(buf, at, UVM_SLOT, Side::Host)?;
                        builtin::transform_u32(&mut bytes, lanes as usize, task.mul, task.add);
                        rt.page_write(buf, at, &bytes, Side::Host)?;
                    }
                    Side::Device => rt.launch(
                        self.streams[task.stream],
                        builtin::TRANSFORM,
                        &[BufferRef::new(buf, at)],
                        &[lanes, task.mul as u64, task.add as u64],
                    )?,
                }
                if (t + 1) % spec.streams as u64 == 0 {
                    self.collect(spec, rt)?;
                }
            }
        }
        self.cursor += 1;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// blas_*: one library-style call per iteration, result read back each time.

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
enum Blas {
    Dot,
    Gemv,
    Gemm,
}

/// Problem shape of a blas workload: `(m, n, k)` where dot uses `n` only.
pub fn blas_shape(kind: WorkloadKind, data_bytes: u64) -> (u64, u64, u64) {
    match kind {
        // x and y split the budget
        WorkloadKind::BlasDot => (1, (data_bytes / 8).max(SHIFTS + 1), 1),
        // the matrix takes the budget
        WorkloadKind::BlasGemv => {
            let n = GEMV_COLS.min(data_bytes / 4).max(1);
            ((data_bytes / (4 * n)).max(1), n, 1)
        }
        // the output takes the budget
        WorkloadKind::BlasGemm => ((data_bytes / (4 * GEMM_COLS)).max(1), GEMM_COLS, GEMM_INNER),
        _ => (0, 0, 0),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BlasLane {
    which: Blas,
    cursor: u64,
    digest: u64,
    binary: Option<BinaryHandle>,
    stream: Option<StreamId>,
    /// Matrix or first vector, shifted operand, output.
    a: Option<AllocId>,
    b: Option<AllocId>,
    c: Option<AllocId>,
}

impl BlasLane {
    fn new(which: Blas) -> Self {
        Self {
            which,
            cursor: 0,
            digest: DIGEST_INIT,
            binary: None,
            stream: None,
            a: None,
            b: None,
            c: None,
        }
    }

    fn kind(&self) -> WorkloadKind {
        match self.which {
            Blas::Dot => WorkloadKind::BlasDot,
            Blas::Gemv => WorkloadKind::BlasGemv,
            Blas::Gemm => WorkloadKind::BlasGemm,
        }
    }

    /// Element counts of `a`, `b`, `c`.
    fn sizes(&self, spec: &WorkloadSpec) -> (u64, u64, u64) {
        let (m, n, k) = blas_shape(self.kind(), spec.data_bytes);
        match self.which {
            Blas::Dot => (n, n, 1),
            Blas::Gemv => (m * n, n + SHIFTS, m),
            Blas::Gemm => (m * k, k * n + SHIFTS, m * n),
        }
    }

    fn kernel(&self) -> &'static str {
        match self.which {
            Blas::Dot => builtin::SDOT,
            Blas::Gemv => builtin::SGEMV,
            Blas::Gemm => builtin::SGEMM,
        }
    }

    fn setup(&mut self, spec: &WorkloadSpec, lane: usize, rt: &dyn Runtime) -> Result<()> {
        self.binary = Some(rt.register_binary(&[self.kernel()])?);
        self.stream = Some(rt.stream_create()?);
        let (na, nb, nc) = self.sizes(spec);
        let mut rng = step_rng(spec.seed, lane, 0);
        let a = rt.alloc(AllocationKind::Device, na * 4)?.id;
        let b = rt.alloc(AllocationKind::Device, nb * 4)?.id;
        let c = rt.alloc(AllocationKind::Device, nc * 4)?.id;
        rt.upload(a.into(), &random_f32s(&mut rng, na))?;
        rt.upload(b.into(), &random_f32s(&mut rng, nb))?;
        (self.a, self.b, self.c) = (Some(a), Some(b), Some(c));
        Ok(())
    }

    fn iterate(&mut self, spec: &WorkloadSpec, i: u64, rt: &dyn Runtime) -> Result<()> {
        let (m, n, k) = blas_shape(self.kind(), spec.data_bytes);
        let (a, b, c) = (self.a.unwrap(), self.b.unwrap(), self.c.unwrap());
        let shift = BufferRef::new(b, (i % SHIFTS) * 4);
        let stream = self.stream.unwrap();
        let (scalars, readback) = match self.which {
            Blas::Dot => (vec![n - SHIFTS], 4),
            Blas::Gemv => (vec![m, n], m * 4),
            Blas::Gemm => (vec![m, n, k], n * 4),
        };
        rt.launch(stream, self.kernel(), &[a.into(), shift, c.into()], &scalars)?;
        rt.synchronize()?;
        let out = rt.download(c.into(), readback)?;
        self.digest = digest_bytes(self.digest, &out);
        Ok(())
    }

    fn teardown(&mut self, spec: &WorkloadSpec, rt: &dyn Runtime) -> Result<()> {
        let c = self.c.unwrap();
        let (_, _, nc) = self.sizes(spec);
        let out = rt.download(c.into(), nc * 4)?;
        self.digest = digest_bytes(self.digest, &out);
        rt.stream_destroy(self.stream.take().unwrap())?;
        for id in [self.a.take(), self.b.take(), self.c.take()].into_iter().flatten() {
            rt.free(id)?;
        }
        rt.unregister_binary(self.binary.take().unwrap())?;
        Ok(())
    }
}

macro_rules! blas_lane {
    ($name:ident, $which:expr) => {
        #[derive(Clone, Debug, Serialize, Deserialize)]
        struct $name(BlasLane);

        impl Lane for $name {
            fn start(_: &WorkloadSpec, _: usize) -> Self {
                Self(BlasLane::new($which))
            }

            fn cursor(&self) -> u64 {
                self.0.cursor
            }

            fn digest(&self) -> u64 {
                self.0.digest
            }

            fn step(&mut self, spec: &WorkloadSpec, lane: usize, rt: &dyn Runtime) -> Result<()> {
                let l = &mut self.0;
                match l.cursor {
                    0 => l.setup(spec, lane, rt)?,
                    c if c == spec.iterations + 1 => l.teardown(spec, rt)?,
                    c => l.iterate(spec, c - 1, rt)?,
                }
                l.cursor += 1;
                Ok(())
            }
        }
    };
}

blas_lane!(BlasDot, Blas::Dot);
blas_lane!(BlasGemv, Blas::Gemv);
blas_lane!(BlasGemm, Blas::Gemm);

// ---------------------------------------------------------------------------
// alloc_churn: threads allocating, filling, checking and freeing buffers of
// random size and kind. Each allocation carries a tag that determines its
// content, so the digest does not depend on how threads interleave.

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ChurnAlloc {
    tag: u64,
    id: AllocId,
    kind: AllocationKind,
    size: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AllocChurn {
    cursor: u64,
    digest: u64,
    live: Vec<ChurnAlloc>,
}

const CHURN_MAX_LIVE: usize = 48;

impl AllocChurn {
    fn fill(a: &ChurnAlloc, rt: &dyn Runtime) -> Result<()> {
        let data = churn_pattern(a.tag, a.size);
        match a.kind {
            AllocationKind::Managed => rt.page_write(a.id, 0, &data, Side::Host)?,
            _ => rt.upload(a.id.into(), &data)?,
        }
        Ok(())
    }

    fn check(&mut self, a: &ChurnAlloc, rt: &dyn Runtime) -> Result<()> {
        let bytes = match a.kind {
            AllocationKind::Managed => rt.page_read(a.id, 0, a.size, Side::Host)?,
            _ => rt.download(a.id.into(), a.size)?,
        };
        if bytes != churn_pattern(a.tag, a.size) {
            return Err(HarnessError::Readback(format!(
                "allocation tagged {:#x} lost its content",
                a.tag
            )));
        }
        self.digest = digest_bytes(self.digest ^ a.tag, &bytes);
        Ok(())
    }
}

impl Lane for AllocChurn {
    fn start(_: &WorkloadSpec, _: usize) -> Self {
        Self {
            cursor: 0,
            digest: DIGEST_INIT,
            live: Vec::new(),
        }
    }

    fn cursor(&self) -> u64 {
        self.cursor
    }

    fn digest(&self) -> u64 {
        self.digest
    }

    fn step(&mut self, spec: &WorkloadSpec, lane: usize, rt: &dyn Runtime) -> Result<()> {
        if self.cursor == spec.iterations {
            for a in std::mem::take(&mut self.live) {
                self.check(&a, rt)?;
                rt.free(a.id)?;
            }
        } else {
            let mut rng = step_rng(spec.seed, lane, self.cursor);
            let grow = self.live.len() < 4 || (self.live.len() < CHURN_MAX_LIVE && rng.gen_bool(0.55));
            if grow {
                let kind = match rng.gen_range(0..4) {
                    0 => AllocationKind::PinnedHost,
                    1 => AllocationKind::Managed,
                    _ => AllocationKind::Device,
                };
                let size = rng.gen_range(1..=spec.data_bytes);
                let tag = ((lane as u64) << 40) | self.cursor;
                let id = rt.alloc(kind, size)?.id;
                let a = ChurnAlloc { tag, id, kind, size };
                Self::fill(&a, rt)?;
                self.live.push(a);
            } else {
                let a = self.live.swap_remove(rng.gen_range(0..self.live.len()));
                self.check(&a, rt)?;
                rt.free(a.id)?;
            }
        }
        self.cursor += 1;
        Ok(())
    }
}

// ---------------------------------------------------------------------------

/// A workload instance: spec plus per-lane state, shareable across threads.
pub trait Program: Send + Sync {
    fn spec(&self) -> &WorkloadSpec;
    /// Runs the next step of `lane`. Returns `false` once the lane is done.
    fn step(&self, lane: usize, rt: &dyn Runtime) -> Result<bool>;
    fn lane_done(&self, lane: usize) -> bool;
    /// Steps completed over all lanes.
    fn steps_done(&self) -> u64;
    /// Serialized state for the session's app state.
    fn save(&self) -> Vec<u8>;
    /// Digest over all lanes' readbacks.
    fn digest(&self) -> u64;
}

#[derive(Serialize, Deserialize)]
struct SavedProgram {
    spec: WorkloadSpec,
    lanes: Vec<Vec<u8>>,
}

struct Machine<L: Lane> {
    spec: WorkloadSpec,
    lanes: Vec<Mutex<L>>,
}

impl<L: Lane> Machine<L> {
    fn start(spec: WorkloadSpec) -> Self {
        Self {
            lanes: (0..spec.lanes()).map(|i| Mutex::new(L::start(&spec, i))).collect(),
            spec,
        }
    }

    fn restore(spec: WorkloadSpec, lanes: &[Vec<u8>]) -> Result<Self> {
        if lanes.len() != spec.lanes() {
            return Err(HarnessError::BadState(format!(
                "{} lanes saved, spec has {}",
                lanes.len(),
                spec.lanes()
            )));
        }
        let lanes = lanes
            .iter()
            .map(|b| bincode::deserialize(b).map(Mutex::new))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| HarnessError::BadState(e.to_string()))?;
        Ok(Self { spec, lanes })
    }
}

impl<L: Lane> Program for Machine<L> {
    fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    fn step(&self, lane: usize, rt: &dyn Runtime) -> Result<bool> {
        let mut l = self.lanes[lane].lock();
        if l.cursor() >= self.spec.lane_steps() {
            return Ok(false);
        }
        l.step(&self.spec, lane, rt)?;
        Ok(true)
    }

    fn lane_done(&self, lane: usize) -> bool {
        self.lanes[lane].lock().cursor() >= self.spec.lane_steps()
    }

    fn steps_done(&self) -> u64 {
        self.lanes.iter().map(|l| l.lock().cursor()).sum()
    }

    fn save(&self) -> Vec<u8> {
        let saved = SavedProgram {
            spec: self.spec,
            lanes: self
                .lanes
                .iter()
                .map(|l| bincode::serialize(&*l.lock()).expect("lane state serializes"))
                .collect(),
        };
        bincode::serialize(&saved).expect("program state serializes")
    }

    fn digest(&self) -> u64 {
        self.lanes
            .iter()
            .fold(DIGEST_INIT, |h, l| digest_bytes(h, &l.lock().digest().to_le_bytes()))
    }
}

fn build(spec: WorkloadSpec, lanes: Option<&[Vec<u8>]>) -> Result<Box<dyn Program>> {
    fn make<L: Lane>(spec: WorkloadSpec, lanes: Option<&[Vec<u8>]>) -> Result<Box<dyn Program>> {
        Ok(match lanes {
            None => Box::new(Machine::<L>::start(spec)),
            Some(l) => Box::new(Machine::<L>::restore(spec, l)?),
        })
    }
    spec.validate()?;
    match spec.kind {
        WorkloadKind::StreamOverlap => make::<StreamOverlap>(spec, lanes),
        WorkloadKind::UvmTasks => make::<UvmTasks>(spec, lanes),
        WorkloadKind::BlasDot => make::<BlasDot>(spec, lanes),
        WorkloadKind::BlasGemv => make::<BlasGemv>(spec, lanes),
        WorkloadKind::BlasGemm => make::<BlasGemm>(spec, lanes),
        WorkloadKind::AllocChurn => make::<AllocChurn>(spec, lanes),
    }
}

/// A fresh program for `spec`.
pub fn program(spec: WorkloadSpec) -> Result<Box<dyn Program>> {
    build(spec, None)
}

/// Rebuilds a program from state produced by [`Program::save`].
pub fn resume(app_state: &[u8]) -> Result<Box<dyn Program>> {
    let saved: SavedProgram = bincode::deserialize(app_state).map_err(|e| HarnessError::BadState(e.to_string()))?;
    build(saved.spec, Some(&saved.lanes))
}
