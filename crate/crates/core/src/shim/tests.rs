use std::sync::Arc;

use super::*;
use crate::device::kernel::builtin;
use crate::device::{AllocationKind, BufferRef, CopyDirection, Device, KernelLibrary, Side, ARENA_BASE};

fn lower(arena: u64) -> Lower {
    Lower::new(
        Arc::new(Device::new(3, arena).unwrap()),
        Arc::new(KernelLibrary::builtin()),
    )
}

fn shim(mode: DispatchMode) -> Shim {
    Shim::new(lower(1 << 24), mode)
}

#[test]
fn table_is_complete() {
    let s = shim(DispatchMode::Direct);
    let names: Vec<CallName> = s.table().names().collect();
    assert_eq!(names, CallName::ALL.to_vec());
    for n in CallName::ALL {
        assert!(s.table().entry(n).is_some(), "{n} missing");
    }
}

#[test]
fn pass_through_matches_direct_device_call() {
    let s = shim(DispatchMode::Direct);
    let reference = Device::new(3, 1 << 24).unwrap();
    let via_table = s.alloc(AllocationKind::Device, 1000).unwrap();
    let direct = reference.alloc(AllocationKind::Device, 1000).unwrap();
    assert_eq!(via_table, direct);
}

#[test]
fn logged_sequence() {
    let s = shim(DispatchMode::Direct);
    let a = s.alloc(AllocationKind::Device, 64).unwrap();
    let b = s.alloc(AllocationKind::PinnedHost, 64).unwrap();
    s.free(a.id).unwrap();
    let log = s.log();
    let seqs: Vec<u64> = log.entries().iter().map(|e| e.seq).collect();
    assert_eq!(seqs, vec![1, 2, 3]);
    assert_eq!(log.entries()[0].id, a.id.0);
    assert_eq!(log.entries()[1].id, b.id.0);
    assert_eq!(log.entries()[2].op, LogOp::Free);
    assert_eq!(log.entries()[2].id, a.id.0);
    assert_eq!(s.active_set(), vec![b]);
}

#[test]
fn non_logged_calls_leave_no_entry() {
    let s = shim(DispatchMode::Direct);
    s.register_binary(&[builtin::FILL]).unwrap();
    let st = s.stream_create().unwrap();
    let a = s.alloc(AllocationKind::Device, 64).unwrap();
    let before = s.log_len();
    s.launch(st, builtin::FILL, &[a.id.into()], &[1, 64]).unwrap();
    s.synchronize().unwrap();
    s.download(a.id.into(), 64).unwrap();
    assert_eq!(s.log_len(), before);
}

#[test]
fn failed_calls_are_not_logged() {
    let s = Shim::new(lower(512), DispatchMode::Direct);
    assert!(s.alloc(AllocationKind::Device, 1024).is_err());
    assert!(s.free(crate::device::AllocId(5)).is_err());
    assert!(s.register_binary(&["no_such_kernel"]).is_err());
    assert_eq!(s.log_len(), 0);
}

#[test]
fn registration_and_streams_are_logged() {
    let s = shim(DispatchMode::Direct);
    let h = s.register_binary(&[builtin::FILL, builtin::SDOT]).unwrap();
    let st = s.stream_create().unwrap();
    s.stream_destroy(st).unwrap();
    s.unregister_binary(h).unwrap();
    let log = s.log();
    let ops: Vec<LogOp> = log.entries().iter().map(|e| e.op).collect();
    assert_eq!(
        ops,
        vec![
            LogOp::RegisterBinary,
            LogOp::StreamCreate,
            LogOp::StreamDestroy,
            LogOp::UnregisterBinary
        ]
    );
    let b = log.binary(h).unwrap();
    assert_eq!(b.kernels, vec!["fill".to_string(), "sdot".to_string()]);
    assert!(!b.live);
}

#[test]
fn concurrent_allocs_form_a_legal_serialization() {
    let s = Arc::new(shim(DispatchMode::Direct));
    let threads: Vec<_> = (0..8)
        .map(|t| {
            let s = Arc::clone(&s);
            std::thread::spawn(move || {
                for i in 0..100u64 {
                    s.alloc(AllocationKind::Device, 1 + (t * 131 + i * 17) % 3000).unwrap();
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    let log = s.log();
    assert_eq!(log.len(), 800);
    log.validate().unwrap();
    let fresh = Device::new(99, 1 << 24).unwrap();
    for e in log.entries() {
        let r = fresh.alloc(e.kind.unwrap(), e.size).unwrap();
        assert_eq!((r.id.0, r.address.0), (e.id, e.address), "seq {}", e.seq);
    }
}

fn scripted(rt: &dyn Runtime) -> Vec<Vec<u8>> {
    rt.register_binary(&[builtin::FILL, builtin::ADD_AT_OFFSET, builtin::SDOT])
        .unwrap();
    let s1 = rt.stream_create().unwrap();
    let s2 = rt.stream_create().unwrap();
    let a = rt.alloc(AllocationKind::Device, 4096).unwrap();
    let m = rt.alloc(AllocationKind::Managed, 5000).unwrap();
    let p = rt.alloc(AllocationKind::PinnedHost, 4096).unwrap();
    rt.launch(s1, builtin::FILL, &[a.id.into()], &[3, 4096]).unwrap();
    rt.launch(s2, builtin::ADD_AT_OFFSET, &[m.id.into()], &[0, 2048, 1])
        .unwrap();
    rt.page_write(m.id, 4000, &[9; 100], Side::Host).unwrap();
    rt.launch(s1, builtin::ADD_AT_OFFSET, &[m.id.into()], &[2048, 2048, 2])
        .unwrap();
    rt.memcpy(p.id.into(), a.id.into(), 4096, CopyDirection::DeviceToHost, Some(s2))
        .unwrap();
    rt.launch(s1, builtin::ADD_AT_OFFSET, &[BufferRef::new(a.id, 100)], &[0, 10, 4])
        .unwrap();
    rt.synchronize().unwrap();
    vec![
        rt.download(a.id.into(), 4096).unwrap(),
        rt.page_read(m.id, 0, 5000, Side::Host).unwrap(),
        rt.read_host(p.id.into(), 4096).unwrap(),
    ]
}

#[test]
fn proxy_matches_direct() {
    let direct = shim(DispatchMode::Direct);
    let proxy = shim(DispatchMode::Proxy);
    let native = lower(1 << 24);
    let d = scripted(&direct);
    assert_eq!(d, scripted(&proxy));
    assert_eq!(d, scripted(&native));
    assert_eq!(direct.log(), proxy.log());
    assert!(proxy.table().proxy_bytes() > 3 * 4096);
    assert_eq!(direct.table().proxy_bytes(), 0);
}

#[test]
fn proxy_propagates_errors() {
    let s = shim(DispatchMode::Proxy);
    let st = s.stream_create().unwrap();
    assert_eq!(
        s.launch(st, builtin::FILL, &[crate::device::AllocId(7).into()], &[1, 1]),
        Err(CallError::Device(crate::device::DeviceError::UnregisteredKernel(
            "fill".into()
        )))
    );
    assert!(matches!(
        s.free(crate::device::AllocId(7)),
        Err(CallError::Device(crate::device::DeviceError::UnknownId(_)))
    ));
}

#[test]
fn arena_addresses_classify_lower() {
    let s = shim(DispatchMode::Direct);
    let mut map = RegionMap::new();
    map.register(ARENA_BASE..ARENA_BASE + (1 << 24), Half::Lower, Perms::RW)
        .unwrap();
    map.register(0x5555_0000_0000..0x5555_0010_0000, Half::Upper, Perms::RW)
        .unwrap();
    for size in [1, 300, 5000] {
        let r = s.alloc(AllocationKind::Device, size).unwrap();
        assert_eq!(map.classify(r.address.0), Classification::Lower);
    }
    assert_eq!(map.classify(0x5555_0000_0800), Classification::Upper);
}
