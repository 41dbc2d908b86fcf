use super::kernel::builtin;
use super::*;

const MIB: u64 = 1 << 20;

fn device() -> Device {
    let d = Device::new(42, MIB).unwrap();
    d.register_fat_binary(builtin::all()).unwrap();
    d
}

#[test]
fn init_single_hole() {
    let d = Device::new(42, MIB).unwrap();
    let st = d.state();
    assert_eq!(st.allocator().holes(), vec![(0x0D00_0000_0000, MIB)]);
    assert_eq!(st.streams().count(), 0);
    assert_eq!(st.epoch(), 0);
    assert_eq!(
        Device::new(42, 4096).unwrap().state(),
        Device::new(42, 4096).unwrap().state()
    );
}

#[test]
fn init_rejects_bad_arena() {
    assert_eq!(Device::new(7, 1000).unwrap_err(), DeviceError::InvalidArenaSize(1000));
    assert_eq!(Device::new(7, 0).unwrap_err(), DeviceError::InvalidArenaSize(0));
}

#[test]
fn alloc_addresses_first_fit() {
    let d = Device::new(1, MIB).unwrap();
    let a = d.alloc(AllocationKind::Device, 1024).unwrap();
    assert_eq!(a.address, DevicePtr(0x0D00_0000_0000));
    assert_eq!(a.id, AllocId(1));
    // frozen from the bitmap reference allocator in tests/allocator_oracle.rs
    let b = d.alloc(AllocationKind::Device, 100).unwrap();
    assert_eq!(b.address, DevicePtr(0x0D00_0000_0400));
    d.free(a.id).unwrap();
    let c = d.alloc(AllocationKind::Device, 512).unwrap();
    assert_eq!(c.address, DevicePtr(0x0D00_0000_0000));
    assert_eq!(c.id, AllocId(3));
}

#[test]
fn alloc_errors() {
    let d = Device::new(1, 1024).unwrap();
    assert_eq!(d.alloc(AllocationKind::Device, 0).unwrap_err(), DeviceError::ZeroSize);
    d.alloc(AllocationKind::Device, 1000).unwrap();
    assert_eq!(
        d.alloc(AllocationKind::Device, 1).unwrap_err(),
        DeviceError::OutOfArena(1)
    );
    // failure consumed no id
    d.free(AllocId(1)).unwrap();
    assert_eq!(d.alloc(AllocationKind::Device, 1).unwrap().id, AllocId(2));
}

#[test]
fn free_restores_full_hole() {
    let d = Device::new(1, MIB).unwrap();
    let a = d.alloc(AllocationKind::Device, 256).unwrap();
    d.free(a.id).unwrap();
    assert_eq!(d.state().allocator().holes(), vec![(ARENA_BASE, MIB)]);
    assert_eq!(d.free(a.id).unwrap_err(), DeviceError::DoubleFree(a.id));
    assert_eq!(d.free(AllocId(99)).unwrap_err(), DeviceError::UnknownId(AllocId(99)));
}

#[test]
fn free_coalesces_neighbors() {
    let d = Device::new(1, MIB).unwrap();
    let a = d.alloc(AllocationKind::Device, 256).unwrap();
    let b = d.alloc(AllocationKind::Device, 512).unwrap();
    let _c = d.alloc(AllocationKind::Device, 256).unwrap();
    d.free(b.id).unwrap();
    d.free(a.id).unwrap();
    let holes = d.state().allocator().holes();
    assert_eq!(holes[0], (ARENA_BASE, 768));
    assert_eq!(holes.len(), 2);
}

#[test]
fn stream_limits() {
    let d = device();
    let first = d.stream_create().unwrap();
    assert_eq!(first, StreamId(1));
    for _ in 1..MAX_STREAMS {
        d.stream_create().unwrap();
    }
    assert_eq!(d.stream_create().unwrap_err(), DeviceError::StreamLimitExceeded);
    d.stream_destroy(first).unwrap();
    // ids are never reused
    assert_eq!(d.stream_create().unwrap(), StreamId(MAX_STREAMS as u64 + 1));
}

#[test]
fn destroy_busy_stream() {
    let d = device();
    let s = d.stream_create().unwrap();
    let a = d.alloc(AllocationKind::Device, 64).unwrap();
    d.launch_kernel(s, builtin::FILL, &[a.id.into()], &[1, 64]).unwrap();
    assert_eq!(d.stream_destroy(s).unwrap_err(), DeviceError::BusyStream(s));
    d.synchronize();
    d.stream_destroy(s).unwrap();
}

#[test]
fn fill_then_readback() {
    let d = device();
    let s = d.stream_create().unwrap();
    let a = d.alloc(AllocationKind::Device, 1024).unwrap();
    d.launch_kernel(s, builtin::FILL, &[a.id.into()], &[7, 1024]).unwrap();
    d.synchronize();
    assert_eq!(d.download(a.id.into(), 1024).unwrap(), vec![7; 1024]);
}

#[test]
fn launch_errors() {
    let d = Device::new(1, MIB).unwrap();
    let s = d.stream_create().unwrap();
    let a = d.alloc(AllocationKind::Device, 64).unwrap();
    assert_eq!(
        d.launch_kernel(s, "fill", &[a.id.into()], &[1, 64]).unwrap_err(),
        DeviceError::UnregisteredKernel("fill".into())
    );
    d.register_fat_binary(builtin::all()).unwrap();
    assert_eq!(
        d.launch_kernel(s, "fill", &[AllocId(9).into()], &[1, 64]).unwrap_err(),
        DeviceError::UnknownId(AllocId(9))
    );
    assert!(matches!(
        d.launch_kernel(s, "fill", &[BufferRef::new(a.id, 64)], &[1, 1])
            .unwrap_err(),
        DeviceError::OutOfRange { .. }
    ));
    assert!(matches!(
        d.launch_kernel(s, "fill", &[a.id.into()], &[1]).unwrap_err(),
        DeviceError::ArityMismatch { .. }
    ));
    assert!(matches!(
        d.launch_kernel(s, "fill", &[BufferRef::new(a.id, 32)], &[1, 33])
            .unwrap_err(),
        DeviceError::BadKernelArgs { .. }
    ));
    assert_eq!(
        d.launch_kernel(StreamId(77), "fill", &[a.id.into()], &[1, 1])
            .unwrap_err(),
        DeviceError::UnknownStream(StreamId(77))
    );
    assert_eq!(d.pending_tasks(), 0);
}

#[test]
fn two_streams_disjoint_halves_of_managed_page() {
    let run = |streams: usize| {
        let d = device();
        let ids: Vec<_> = (0..streams).map(|_| d.stream_create().unwrap()).collect();
        let m = d.alloc(AllocationKind::Managed, PAGE_SIZE as u64).unwrap();
        let half = PAGE_SIZE as u64 / 2;
        d.launch_kernel(ids[0], builtin::ADD_AT_OFFSET, &[m.id.into()], &[0, half, 3])
            .unwrap();
        d.launch_kernel(
            ids[streams - 1],
            builtin::ADD_AT_OFFSET,
            &[m.id.into()],
            &[half, half, 5],
        )
        .unwrap();
        d.synchronize();
        d.page_access(m.id, 0, Side::Host, Access::Read(PAGE_SIZE as u64))
            .unwrap()
    };
    let concurrent = run(2);
    let sequential = run(1);
    assert_eq!(concurrent, sequential);
    assert!(concurrent[..PAGE_SIZE / 2].iter().all(|&b| b == 3));
    assert!(concurrent[PAGE_SIZE / 2..].iter().all(|&b| b == 5));
}

#[test]
fn memcpy_round_trips() {
    let d = device();
    let pinned = d.alloc(AllocationKind::PinnedHost, 3).unwrap();
    let dev = d.alloc(AllocationKind::Device, 3).unwrap();
    let back = d.alloc(AllocationKind::PinnedHost, 3).unwrap();
    d.write_host(pinned.id.into(), &[1, 2, 3]).unwrap();
    d.memcpy(dev.id.into(), pinned.id.into(), 3, CopyDirection::HostToDevice, None)
        .unwrap();
    d.memcpy(back.id.into(), dev.id.into(), 3, CopyDirection::DeviceToHost, None)
        .unwrap();
    assert_eq!(d.read_host(back.id.into(), 3).unwrap(), vec![1, 2, 3]);

    d.upload(dev.id.into(), &[4, 5, 6]).unwrap();
    assert_eq!(d.download(dev.id.into(), 3).unwrap(), vec![4, 5, 6]);
}

#[test]
fn async_copy_lands_at_synchronize() {
    let d = device();
    let s = d.stream_create().unwrap();
    let dev = d.alloc(AllocationKind::Device, 4).unwrap();
    let host = d.alloc(AllocationKind::PinnedHost, 4).unwrap();
    d.upload(dev.id.into(), &[9; 4]).unwrap();
    d.memcpy(host.id.into(), dev.id.into(), 4, CopyDirection::DeviceToHost, Some(s))
        .unwrap();
    // not yet drained in this model
    assert_eq!(d.read_host(host.id.into(), 4).unwrap(), vec![0; 4]);
    assert_eq!(d.synchronize(), 1);
    assert_eq!(d.read_host(host.id.into(), 4).unwrap(), vec![9; 4]);
}

#[test]
fn device_to_device_copy() {
    let d = device();
    let a = d.alloc(AllocationKind::Device, 16).unwrap();
    let b = d.alloc(AllocationKind::Device, 16).unwrap();
    let src: Vec<u8> = (0..16).collect();
    d.upload(a.id.into(), &src).unwrap();
    d.memcpy(
        BufferRef::new(b.id, 4),
        BufferRef::new(a.id, 2),
        8,
        CopyDirection::DeviceToDevice,
        None,
    )
    .unwrap();
    let out = d.download(b.id.into(), 16).unwrap();
    assert_eq!(&out[4..12], &src[2..10]);
    assert_eq!(&out[..4], &[0; 4]);
}

#[test]
fn memcpy_errors() {
    let d = device();
    let dev = d.alloc(AllocationKind::Device, 8).unwrap();
    let host = d.alloc(AllocationKind::PinnedHost, 8).unwrap();
    assert!(matches!(
        d.memcpy(dev.id.into(), host.id.into(), 9, CopyDirection::HostToDevice, None),
        Err(DeviceError::OutOfRange { .. })
    ));
    assert_eq!(
        d.memcpy(dev.id.into(), AllocId(50).into(), 1, CopyDirection::HostToDevice, None),
        Err(DeviceError::UnknownId(AllocId(50)))
    );
    assert_eq!(
        d.memcpy(host.id.into(), dev.id.into(), 1, CopyDirection::HostToDevice, None),
        Err(DeviceError::WrongKind {
            id: dev.id,
            kind: AllocationKind::Device
        })
    );
    assert_eq!(
        d.write_host(dev.id.into(), &[1]),
        Err(DeviceError::WrongKind {
            id: dev.id,
            kind: AllocationKind::Device
        })
    );
}

#[test]
fn synchronize_many_streams() {
    let d = device();
    let a = d.alloc(AllocationKind::Device, 4 * MAX_STREAMS as u64).unwrap();
    let streams: Vec<_> = (0..MAX_STREAMS).map(|_| d.stream_create().unwrap()).collect();
    for (i, s) in streams.iter().enumerate() {
        for _ in 0..10 {
            d.launch_kernel(
                *s,
                builtin::INIT_ARRAY,
                &[BufferRef::new(a.id, 4 * i as u64)],
                &[1, 1, 1],
            )
            .unwrap();
        }
    }
    assert_eq!(d.synchronize(), 1280);
    let st = d.state();
    assert_eq!(st.streams().map(|s| s.completed()).sum::<u64>(), 1280);
    assert!(st.streams().all(|s| s.pending() == 0));
    // idempotent
    assert_eq!(d.synchronize(), 0);
    assert_eq!(d.state(), st);
    let out = d.download(a.id.into(), 4 * MAX_STREAMS as u64).unwrap();
    assert!(out.chunks(4).all(|c| u32::from_le_bytes(c.try_into().unwrap()) == 10));
}

#[test]
fn fifo_within_stream() {
    let d = device();
    d.set_trace(true);
    let s1 = d.stream_create().unwrap();
    let s2 = d.stream_create().unwrap();
    let a = d.alloc(AllocationKind::Device, 16).unwrap();
    for i in 0..6u64 {
        let s = if i % 3 == 0 { s2 } else { s1 };
        d.launch_kernel(s, builtin::FILL, &[a.id.into()], &[i, 16]).unwrap();
    }
    d.synchronize();
    let st = d.state();
    let trace = st.trace().unwrap();
    for s in [s1, s2] {
        let seqs: Vec<u64> = trace.iter().filter(|(sid, _)| *sid == s).map(|(_, q)| *q).collect();
        assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    }
    // last enqueued fill wins
    assert_eq!(d.download(a.id.into(), 16).unwrap(), vec![5; 16]);
}

#[test]
fn registration() {
    let d = Device::new(1, MIB).unwrap();
    let h = d
        .register_fat_binary(vec![builtin::fill(), builtin::add_at_offset()])
        .unwrap();
    assert_eq!(h, BinaryHandle(1));
    let s = d.stream_create().unwrap();
    let a = d.alloc(AllocationKind::Device, 8).unwrap();
    d.launch_kernel(s, "fill", &[a.id.into()], &[1, 8]).unwrap();
    assert_eq!(
        d.register_fat_binary(vec![builtin::sdot(), builtin::fill()])
            .unwrap_err(),
        DeviceError::DuplicateKernelId("fill".into())
    );
    d.unregister_fat_binary(h).unwrap();
    // the queued launch drained before the kernels went away
    assert_eq!(d.download(a.id.into(), 8).unwrap(), vec![1; 8]);
    assert_eq!(
        d.launch_kernel(s, "fill", &[a.id.into()], &[1, 8]).unwrap_err(),
        DeviceError::UnregisteredKernel("fill".into())
    );
    assert_eq!(d.unregister_fat_binary(h).unwrap_err(), DeviceError::UnknownBinary(h));
    assert_eq!(d.register_fat_binary(vec![builtin::fill()]).unwrap(), BinaryHandle(2));
}

#[test]
fn managed_host_write_then_kernel_reads() {
    let d = device();
    let s = d.stream_create().unwrap();
    let m = d.alloc(AllocationKind::Managed, 2 * PAGE_SIZE as u64).unwrap();
    assert_eq!(d.state().page_meta(m.id, 0), Some((Side::Host, false)));
    d.page_access(m.id, 0, Side::Host, Access::Write(&1u32.to_le_bytes()))
        .unwrap();
    // transform: x = x * 10 + 2 on the first lane
    d.launch_kernel(s, builtin::TRANSFORM, &[m.id.into()], &[1, 10, 2])
        .unwrap();
    d.synchronize();
    assert_eq!(d.state().page_meta(m.id, 0), Some((Side::Device, true)));
    let back = d.page_access(m.id, 0, Side::Host, Access::Read(4)).unwrap();
    assert_eq!(u32::from_le_bytes(back.try_into().unwrap()), 12);
    assert_eq!(d.state().page_meta(m.id, 0), Some((Side::Host, true)));
}

#[test]
fn managed_host_accesses_need_no_launch() {
    let d = device();
    let m = d.alloc(AllocationKind::Managed, 64).unwrap();
    assert_eq!(d.page_access(m.id, 0, Side::Host, Access::Read(4)).unwrap(), vec![0; 4]);
    d.page_access(m.id, 0, Side::Host, Access::Write(&[1, 2, 3, 4]))
        .unwrap();
    assert_eq!(
        d.page_access(m.id, 0, Side::Host, Access::Read(4)).unwrap(),
        vec![1, 2, 3, 4]
    );
}

#[test]
fn managed_write_across_boundary() {
    let d = device();
    let m = d.alloc(AllocationKind::Managed, 3 * PAGE_SIZE as u64).unwrap();
    d.page_access(m.id, PAGE_SIZE as u64 - 3, Side::Device, Access::Write(&[1; 6]))
        .unwrap();
    let st = d.state();
    assert_eq!(st.page_meta(m.id, 0), Some((Side::Device, true)));
    assert_eq!(st.page_meta(m.id, 1), Some((Side::Device, true)));
    assert_eq!(st.page_meta(m.id, 2), Some((Side::Host, false)));
}

#[test]
fn page_access_errors() {
    let d = device();
    let dev = d.alloc(AllocationKind::Device, 64).unwrap();
    let m = d.alloc(AllocationKind::Managed, 64).unwrap();
    assert_eq!(
        d.page_access(dev.id, 0, Side::Host, Access::Read(1)).unwrap_err(),
        DeviceError::NotManaged(dev.id)
    );
    assert!(matches!(
        d.page_access(m.id, 60, Side::Host, Access::Read(5)).unwrap_err(),
        DeviceError::OutOfRange { .. }
    ));
    assert_eq!(
        d.page_access(AllocId(40), 0, Side::Host, Access::Read(1)).unwrap_err(),
        DeviceError::UnknownId(AllocId(40))
    );
}

#[test]
fn epoch_increases_on_mutation() {
    let d = device();
    let e0 = d.epoch();
    let a = d.alloc(AllocationKind::Device, 8).unwrap();
    let e1 = d.epoch();
    assert!(e1 > e0);
    d.download(a.id.into(), 8).unwrap();
    assert!(d.epoch() >= e1);
    d.free(a.id).unwrap();
    assert!(d.epoch() > e1);
    let e2 = d.epoch();
    let _ = d.free(a.id);
    assert_eq!(d.epoch(), e2);
}

#[test]
fn capture_and_restore() {
    let d = device();
    let a = d.alloc(AllocationKind::Device, 8).unwrap();
    let m = d.alloc(AllocationKind::Managed, PAGE_SIZE as u64 + 8).unwrap();
    d.upload(a.id.into(), &[3; 8]).unwrap();
    d.page_access(m.id, PAGE_SIZE as u64, Side::Device, Access::Write(&[4; 8]))
        .unwrap();
    let pa = d.capture(a.id).unwrap();
    let pm = d.capture(m.id).unwrap();

    let fresh = device();
    let a2 = fresh.alloc(AllocationKind::Device, 8).unwrap();
    let m2 = fresh.alloc(AllocationKind::Managed, PAGE_SIZE as u64 + 8).unwrap();
    fresh.restore(a2.id, &pa).unwrap();
    fresh.restore(m2.id, &pm).unwrap();
    assert_eq!(fresh.capture(a2.id).unwrap(), pa);
    assert_eq!(fresh.capture(m2.id).unwrap(), pm);
    assert!(fresh.restore(a2.id, &pm).is_err());
}
