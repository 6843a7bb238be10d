//! Fixtures shared by the benchmark targets.

use lapis_core::pipeline::SensorWindow;
use lapis_core::shred::{ShredConfig, ShredModel};
use lapis_core::temporal::{Seq2SeqConfig, Seq2SeqTemporalModel};
use lapis_core::{Direction, Tensor};

/// Deterministic pseudo-random values in [-1, 1).
pub fn noise(shape: &[usize], seed: u64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let data = (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 40) as f32 / (1u64 << 23) as f32 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Frame-mode SHRED at the 2D KS deployment size: 3 sensors, 64×64 state.
pub fn ks_shred() -> ShredModel {
    let mut m = ShredModel::new(ShredConfig::frame(3, 64 * 64), 0).expect("valid config");
    m.freeze();
    m
}

/// Backward temporal model generating 91 latents from a 10-frame window.
pub fn ks_temporal() -> Seq2SeqTemporalModel<f32> {
    Seq2SeqTemporalModel::new(
        Seq2SeqConfig {
            latent_dim: 64,
            hidden: 64,
            observed: 10,
            out_len: 91,
            direction: Direction::Backward,
        },
        0,
    )
    .expect("valid config")
}

pub fn sensor_window(frames: usize, sensors: usize) -> SensorWindow {
    SensorWindow::new(noise(&[frames, sensors], 1), 0).expect("finite window")
}
