use dear::net::{ArchDescriptor, ModelBundle};
use dear::trainer::{DistortionMode, Trainer, TrainingConfig};

fn main() {
    let arch = ArchDescriptor {
        enc_blocks: 2, enc_channels: 6, enc_kernel: 5,
        dec_blocks: 2, dec_channels: 6, dec_kernel: 5, dec_downsamples: 2,
        disc_blocks: 2, disc_channels: 6, disc_kernel: 5, disc_downsamples: 1,
        leaky_slope: 0.2,
        enc_output_init_gain: 1.0,
    };
    let n = 256; let l = 4;
    for lr in [1e-4, 3e-4, 1e-3] {
        let mut cfg = TrainingConfig { segment_len: n, watermark_len: l, batch_size: 1, epochs: 1, learning_rate: lr, ir_count: 2, ..TrainingConfig::default() };
        cfg.lambda_w = 0.0; cfg.lambda_d = 0.0; cfg.distortion = DistortionMode::None;
        let model = ModelBundle::new_random(arch.clone(), l, n, 44_100, 3).unwrap();
        let mut t = Trainer::new(model, cfg).unwrap();
        let seg: Vec<f64> = (0..n).map(|i| 0.4 * (2.0 * std::f64::consts::PI * 800.0 * i as f64 / 44_100.0 + 0.3).sin()).collect();
        let mut les = Vec::new();
        for _ in 0..50 { les.push(t.train_step(&[seg.as_slice()]).unwrap().loss_encoder); }
        let inc = les.windows(2).filter(|w| w[1] > w[0]).count();
        println!("lr={lr}: first={:.3e} last={:.3e} increases={}", les[0], les[49], inc);
    }
}
