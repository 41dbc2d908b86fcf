use std::sync::Arc;

use cracsim_bench::populated;
use cracsim_core::{image, DispatchMode, KernelLibrary, Session};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

const SIZES: [(usize, u64); 3] = [(16, 4 << 10), (64, 64 << 10), (16, 4 << 20)];

fn checkpoint(c: &mut Criterion) {
    let mut group = c.benchmark_group("checkpoint");
    group.sample_size(20);
    for (buffers, bytes) in SIZES {
        let s = populated(buffers, bytes);
        group.throughput(Throughput::Bytes(buffers as u64 * bytes));
        group.bench_with_input(
            BenchmarkId::new("capture_encode", buffers as u64 * bytes),
            &s,
            |b, s| b.iter(|| s.encode(&s.checkpoint().unwrap())),
        );
    }
    group.finish();
}

fn restart(c: &mut Criterion) {
    let mut group = c.benchmark_group("restart");
    group.sample_size(20);
    let library = Arc::new(KernelLibrary::builtin());
    for (buffers, bytes) in SIZES {
        let s = populated(buffers, bytes);
        let img = s.encode(&s.checkpoint().unwrap());
        group.throughput(Throughput::Bytes(buffers as u64 * bytes));
        group.bench_with_input(
            BenchmarkId::new("decode_replay", buffers as u64 * bytes),
            &img,
            |b, img| b.iter(|| Session::restart_from_image(img, DispatchMode::Direct, Arc::clone(&library)).unwrap()),
        );
        let gz = image::compress(&img);
        group.bench_with_input(BenchmarkId::new("gzip_decode", buffers as u64 * bytes), &gz, |b, gz| {
            b.iter(|| image::decode_any(gz).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, checkpoint, restart);
criterion_main!(benches);
