use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use fusekit_bench::{checkpoint, normal_values};
use fusekit_core::dtype::{decode_f32, encode_f32};
use fusekit_core::store::{from_bytes, to_bytes};
use fusekit_core::Dtype;

fn bench_codec(c: &mut Criterion) {
    let map = checkpoint(16, 65_536, Dtype::F32);
    let bytes = to_bytes(&map).unwrap();
    let mut g = c.benchmark_group("checkpoint");
    g.throughput(Throughput::Bytes(bytes.len() as u64));
    g.bench_function("to_bytes", |b| b.iter(|| to_bytes(&map).unwrap()));
    g.bench_function("from_bytes", |b| b.iter(|| from_bytes(&bytes).unwrap()));
    g.finish();

    let values = normal_values(5, 0, 1 << 20);
    let mut g = c.benchmark_group("convert");
    g.throughput(Throughput::Elements(values.len() as u64));
    for dtype in [Dtype::BF16, Dtype::F16] {
        let encoded = encode_f32(&values, dtype);
        g.bench_function(format!("encode_{dtype}"), |b| b.iter(|| encode_f32(&values, dtype)));
        g.bench_function(format!("decode_{dtype}"), |b| b.iter(|| decode_f32(&encoded, dtype)));
    }
    g.finish();
}

criterion_group!(benches, bench_codec);
criterion_main!(benches);
