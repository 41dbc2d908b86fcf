use cracsim_bench::session;
use cracsim_core::device::kernel::builtin;
use cracsim_core::{AllocationKind, DispatchMode, RuntimeExt};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn modes() -> [(&'static str, DispatchMode); 2] {
    [("direct", DispatchMode::Direct), ("proxy", DispatchMode::Proxy)]
}

fn launch_and_sync(c: &mut Criterion) {
    let mut group = c.benchmark_group("launch_sync");
    for bytes in [4u64 << 10, 1 << 20] {
        group.throughput(Throughput::Bytes(bytes));
        for (name, mode) in modes() {
            let s = session(mode);
            let sh = s.shim();
            sh.register_binary(&[builtin::FILL]).unwrap();
            let st = sh.stream_create().unwrap();
            let buf = sh.alloc(AllocationKind::Device, bytes).unwrap().id;
            group.bench_with_input(BenchmarkId::new(name, bytes), &bytes, |b, &bytes| {
                b.iter(|| {
                    sh.launch(st, builtin::FILL, &[buf.into()], &[7, bytes]).unwrap();
                    sh.synchronize().unwrap();
                })
            });
        }
    }
    group.finish();
}

fn alloc_free(c: &mut Criterion) {
    let mut group = c.benchmark_group("alloc_free");
    for (name, mode) in modes() {
        let s = session(mode);
        let sh = s.shim();
        group.bench_function(name, |b| {
            b.iter(|| {
                let r = sh.alloc(AllocationKind::Device, 4096).unwrap();
                sh.free(r.id).unwrap();
            })
        });
    }
    group.finish();
}

criterion_group!(benches, launch_and_sync, alloc_free);
criterion_main!(benches);
