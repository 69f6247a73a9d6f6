use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ipf::bitstream::{read_tensor, write_tensor, BitReader, BitWriter};
use ipf::media::make_coord_grid;
use ipf::par::with_workers;
use ipf::siren::{ArchitectureSpec, Network};

fn worker_counts() -> Vec<usize> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    if available > 1 {
        vec![1, available]
    } else {
        vec![1, 2]
    }
}

fn label(workers: usize) -> String {
    if workers == 1 {
        "sequential".into()
    } else {
        format!("parallel-{workers}")
    }
}

fn network_eval(c: &mut Criterion) {
    let spec = ArchitectureSpec::siren(10, 28).unwrap();
    let net = Network::init(&spec, 0).unwrap();
    let grid = make_coord_grid(64, 64).unwrap();

    let mut group = c.benchmark_group("forward_64x64");
    for w in worker_counts() {
        group.bench_function(BenchmarkId::from_parameter(label(w)), |b| {
            b.iter(|| with_workers(w, || net.forward(black_box(&grid), false).unwrap()).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("forward_backward_64x64");
    group.sample_size(20);
    for w in worker_counts() {
        group.bench_function(BenchmarkId::from_parameter(label(w)), |b| {
            b.iter(|| {
                with_workers(w, || {
                    let (out, cache) = net.forward_cached(grid.coords(), None, false).unwrap();
                    net.backward(&cache, out.view(), true).unwrap()
                })
                .unwrap()
            })
        });
    }
    group.finish();
}

fn bit_packing(c: &mut Criterion) {
    let spec = ArchitectureSpec::siren(12, 79).unwrap();
    let mut net = Network::init(&spec, 1).unwrap();
    net.attach_quantizers().unwrap();
    let tensors = net.export_quantized().unwrap();
    let mut w = BitWriter::new();
    for t in &tensors {
        write_tensor(t, &mut w).unwrap();
    }
    let bytes = w.into_bytes();
    let shapes: Vec<(usize, usize)> = tensors.iter().map(|t| (t.rows(), t.row_len())).collect();

    let mut group = c.benchmark_group("bitstream_63677_params");
    group.bench_function("pack", |b| {
        b.iter(|| {
            let mut w = BitWriter::new();
            for t in black_box(&tensors) {
                write_tensor(t, &mut w).unwrap();
            }
            w.into_bytes()
        })
    });
    group.bench_function("unpack", |b| {
        b.iter(|| {
            let mut r = BitReader::new(black_box(&bytes));
            shapes
                .iter()
                .map(|&(rows, len)| read_tensor(&mut r, rows, len, &|| String::new()).unwrap())
                .count()
        })
    });
    group.finish();
}

criterion_group!(benches, network_eval, bit_packing);
criterion_main!(benches);
