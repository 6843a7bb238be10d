use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lapis_bench::{ks_shred, ks_temporal, noise};
use lapis_core::temporal::{train_seq2seq, Seq2SeqExample, TemporalTrainConfig};

fn shred_encode_decode(c: &mut Criterion) {
    let shred = ks_shred();
    let series = noise(&[101, 3], 0);
    c.bench_function("shred_frame_encode_101x3", |b| b.iter(|| shred.encode(black_box(&series)).unwrap()));
    let z = shred.encode(&series).unwrap();
    c.bench_function("shred_decode_101_to_64x64", |b| b.iter(|| shred.decode(black_box(&z)).unwrap()));
}

fn temporal_generate(c: &mut Criterion) {
    let model = ks_temporal();
    let obs = noise(&[10, 64], 2);
    c.bench_function("seq2seq_generate_10_to_91", |b| {
        b.iter(|| model.generate(black_box(&obs), 91).unwrap())
    });
}

fn temporal_epoch(c: &mut Criterion) {
    let examples: Vec<Seq2SeqExample<f32>> = (0..7)
        .map(|k| Seq2SeqExample {
            observed: noise(&[10, 64], 10 + k),
            target: noise(&[91, 64], 20 + k),
        })
        .collect();
    let cfg = TemporalTrainConfig {
        epochs: 1,
        ..TemporalTrainConfig::default()
    };
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("seq2seq_epoch_7_members", |b| {
        b.iter(|| {
            let mut model = ks_temporal();
            train_seq2seq(&mut model, &examples, &examples[..1], &cfg).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, shred_encode_decode, temporal_generate, temporal_epoch);
criterion_main!(benches);
