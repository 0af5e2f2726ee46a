use std::time::Instant;

use dear::net::{ArchDescriptor, ModelBundle};
use dear::trainer::{Trainer, TrainingConfig};

fn main() {
    let n = 16_384;
    let l = 16;
    let cfg = TrainingConfig {
        segment_len: n,
        watermark_len: l,
        batch_size: 8,
        learning_rate: 1e-3,
        ..TrainingConfig::default()
    };
    let model = ModelBundle::new_random(ArchDescriptor::default(), l, n, 44_100, 1).unwrap();
    println!(
        "params: enc {} dec {} disc {}",
        model.encoder.param_count(),
        model.decoder.param_count(),
        model.discriminator.param_count()
    );
    let mut t = Trainer::new(model, cfg).unwrap();
    let segs: Vec<Vec<f64>> = (0..8)
        .map(|k| {
            (0..n)
                .map(|i| {
                    0.3 * (2.0 * std::f64::consts::PI * (300.0 + 200.0 * k as f64) * i as f64
                        / 44_100.0)
                        .sin()
                        + 0.1 * ((i * (k + 3)) % 101) as f64 / 101.0
                })
                .collect()
        })
        .collect();
    let batch: Vec<&[f64]> = segs.iter().map(|s| s.as_slice()).collect();
    // warmup
    let t0 = Instant::now();
    let rec = t.train_step(&batch).unwrap();
    println!("step 1: {:?}  losses le={:.4} lw={:.4}", t0.elapsed(), rec.loss_encoder, rec.loss_watermark);
    let t1 = Instant::now();
    let iters = 3;
    for _ in 0..iters {
        t.train_step(&batch).unwrap();
    }
    println!("avg step: {:?}", t1.elapsed() / iters);
}
