//! Fixtures shared by the criterion benchmarks.

use std::sync::Arc;

use cracsim_core::device::kernel::builtin;
use cracsim_core::{AllocationKind, DispatchMode, KernelLibrary, RuntimeExt, Session};

pub const ARENA: u64 = 1 << 32;

pub fn session(mode: DispatchMode) -> Session {
    Session::new(1, ARENA, mode, Arc::new(KernelLibrary::builtin())).expect("session")
}

/// A session holding `buffers` device allocations of `bytes` each, filled,
/// plus the churn left behind by freeing every other one of twice as many.
pub fn populated(buffers: usize, bytes: u64) -> Session {
    let s = session(DispatchMode::Direct);
    let sh = s.shim();
    sh.register_binary(&[builtin::FILL]).unwrap();
    let st = sh.stream_create().unwrap();
    let ids: Vec<_> = (0..buffers * 2)
        .map(|_| sh.alloc(AllocationKind::Device, bytes).unwrap().id)
        .collect();
    for (i, id) in ids.into_iter().enumerate() {
        if i % 2 == 0 {
            sh.free(id).unwrap();
        } else {
            sh.launch(st, builtin::FILL, &[id.into()], &[i as u64, bytes]).unwrap();
        }
    }
    sh.synchronize().unwrap();
    s
}
