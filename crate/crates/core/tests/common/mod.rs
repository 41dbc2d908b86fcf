//! Generators shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use cracsim_core::device::{AllocationKind, Device, KernelLibrary, ManagedPage, Side, PAGE_SIZE};
use cracsim_core::engine::{AllocPayload, ManagedPayload, Session, Snapshot};
use cracsim_core::shim::{BinaryRecord, CallLogEntry, DispatchMode, LogOp, Lower, Shim};
use cracsim_core::{AllocId, BinaryHandle, RuntimeExt, StreamId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ARENA: u64 = 1 << 24;

pub fn library() -> Arc<KernelLibrary> {
    Arc::new(KernelLibrary::builtin())
}

pub fn lower(seed: u64) -> Lower {
    Lower::new(Arc::new(Device::new(seed, ARENA).unwrap()), library())
}

pub fn kind(rng: &mut ChaCha8Rng) -> AllocationKind {
    [
        AllocationKind::Device,
        AllocationKind::PinnedHost,
        AllocationKind::Managed,
    ][rng.gen_range(0..3)]
}

/// Up to `ops` random alloc/free/stream calls issued by one thread.
pub fn churn(shim: &Shim, rng: &mut ChaCha8Rng, ops: usize) {
    let mut live: Vec<AllocId> = Vec::new();
    let mut streams: Vec<StreamId> = Vec::new();
    for _ in 0..ops {
        match rng.gen_range(0..10) {
            0..=4 => {
                let size = if rng.gen_bool(0.9) {
                    rng.gen_range(1..5000)
                } else {
                    rng.gen_range(5000..200_000)
                };
                if let Ok(r) = shim.alloc(kind(rng), size) {
                    live.push(r.id);
                }
            }
            5..=7 if !live.is_empty() => {
                let id = live.swap_remove(rng.gen_range(0..live.len()));
                shim.free(id).unwrap();
            }
            8 => {
                if let Ok(s) = shim.stream_create() {
                    streams.push(s);
                }
            }
            9 if !streams.is_empty() => {
                let s = streams.swap_remove(rng.gen_range(0..streams.len()));
                shim.stream_destroy(s).unwrap();
            }
            _ => {}
        }
    }
}

/// A shim whose log holds a random sequence of at most `max_ops` calls,
/// issued by `threads` concurrent threads.
pub fn random_log(seed: u64, max_ops: usize, threads: usize) -> Shim {
    let shim = Shim::new(lower(seed), DispatchMode::Direct);
    let per_thread = max_ops / threads;
    if threads == 1 {
        churn(&shim, &mut ChaCha8Rng::seed_from_u64(seed), per_thread);
    } else {
        std::thread::scope(|s| {
            for t in 0..threads {
                let shim = &shim;
                s.spawn(move || {
                    churn(
                        shim,
                        &mut ChaCha8Rng::seed_from_u64(seed ^ (t as u64) << 32),
                        per_thread,
                    )
                });
            }
        });
    }
    shim
}

/// A session after a random alloc/free sequence, with every live buffer
/// filled with random bytes.
pub fn random_session(seed: u64, ops: usize) -> Session {
    let s = Session::new(seed, ARENA, DispatchMode::Direct, library()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    churn(s.shim(), &mut rng, ops);
    for r in s.shim().active_set() {
        let data: Vec<u8> = (0..r.size).map(|_| rng.gen()).collect();
        match r.kind {
            AllocationKind::Managed => {
                let side = if rng.gen_bool(0.5) { Side::Host } else { Side::Device };
                s.shim().page_write(r.id, 0, &data, side).unwrap();
            }
            _ => s.shim().upload(r.id.into(), &data).unwrap(),
        }
    }
    s
}

fn bytes(rng: &mut ChaCha8Rng, max: usize) -> Vec<u8> {
    let n = rng.gen_range(0..max);
    (0..n).map(|_| rng.gen()).collect()
}

/// A structurally arbitrary snapshot (not necessarily restartable).
pub fn random_snapshot(rng: &mut ChaCha8Rng) -> Snapshot {
    let mut s = Snapshot::empty(rng.gen(), rng.gen_range(1..1u64 << 40) * 256);
    s.meta.engine_version = rng.gen();
    let ops = [
        LogOp::Alloc,
        LogOp::Free,
        LogOp::StreamCreate,
        LogOp::StreamDestroy,
        LogOp::RegisterBinary,
        LogOp::UnregisterBinary,
    ];
    for seq in 1..=rng.gen_range(0..40) {
        let op = ops[rng.gen_range(0..ops.len())];
        s.log.push(CallLogEntry {
            seq,
            op,
            kind: (op == LogOp::Alloc).then(|| kind(rng)),
            size: rng.gen(),
            id: rng.gen(),
            address: rng.gen(),
        });
    }
    for _ in 0..rng.gen_range(0..5) {
        s.payloads.push(AllocPayload {
            id: AllocId(rng.gen()),
            bytes: bytes(rng, 3000),
        });
    }
    for _ in 0..rng.gen_range(0..3) {
        let pages = (0..rng.gen_range(0..4))
            .map(|index| ManagedPage {
                index,
                residence: if rng.gen_bool(0.5) { Side::Host } else { Side::Device },
                dirty: rng.gen(),
                content: bytes(rng, PAGE_SIZE),
            })
            .collect();
        s.managed.push(ManagedPayload {
            id: AllocId(rng.gen()),
            pages,
        });
    }
    s.streams = (0..rng.gen_range(0..10)).map(|_| StreamId(rng.gen())).collect();
    s.app_state = bytes(rng, 500);
    let names = ["fill", "sdot", "sgemm", "custom_kernel", "ünïcode"];
    for _ in 0..rng.gen_range(0..3) {
        s.binaries.push(BinaryRecord {
            handle: BinaryHandle(rng.gen()),
            kernels: (0..rng.gen_range(0..4))
                .map(|_| names[rng.gen_range(0..names.len())].to_string())
                .collect(),
            live: rng.gen(),
        });
    }
    s
}
