use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use videosaur::decoder::{DecodeProbe, DecoderShape};
use videosaur::{DecoderConfig, DecoderKind};

const SHAPE: DecoderShape = DecoderShape {
    num_patches: 64,
    slot_dim: 32,
    feature_dim: 16,
};

fn decode(c: &mut Criterion) {
    let mut group = c.benchmark_group("decode");
    for kind in [DecoderKind::Mixer, DecoderKind::Broadcast] {
        let cfg = DecoderConfig {
            kind,
            ..DecoderConfig::default()
        };
        for k in [4, 8, 16, 32] {
            let probe = DecodeProbe::new(SHAPE, &cfg, k, 0).unwrap();
            group.bench_with_input(BenchmarkId::new(format!("{kind:?}").to_lowercase(), k), &probe, |b, p| {
                b.iter(|| p.run().unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, decode);
criterion_main!(benches);
