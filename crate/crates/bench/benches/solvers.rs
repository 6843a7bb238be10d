use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lapis_core::sim::{tau_for, Fft2, Ks2d, Lattice};

fn ks_step(c: &mut Criterion) {
    let mut ks = Ks2d::new(64, 64, 16.0 * std::f64::consts::PI, 0.05, true);
    let u: Vec<f64> = (0..64 * 64)
        .map(|i| 0.1 * ((i % 64) as f64 * 0.3).sin() * ((i / 64) as f64 * 0.2).cos())
        .collect();
    let v = ks.to_spectral(&u);
    c.bench_function("ks2d_etdrk4_step_64x64", |b| b.iter(|| ks.step(black_box(&v)).unwrap()));
}

fn fft(c: &mut Criterion) {
    let mut f = Fft2::new(64, 64);
    let data: Vec<f64> = (0..64 * 64).map(|i| (i as f64 * 0.01).sin()).collect();
    c.bench_function("fft2_forward_real_64x64", |b| b.iter(|| f.forward_real(black_box(&data))));
}

fn lbm_step(c: &mut Criterion) {
    let mut lat = Lattice::channel(400, 160, tau_for(0.036, 16.0, 80.6), 0.036, Some(16.0), 0.01, 0.0);
    c.bench_function("lbm_d2q9_step_400x160", |b| b.iter(|| lat.step()));
}

criterion_group!(benches, ks_step, fft, lbm_step);
criterion_main!(benches);
