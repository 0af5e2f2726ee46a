use std::time::Instant;

use dear::net::{ArchDescriptor, ModelBundle};
use dear::trainer::{train_on_segments, TrainingConfig};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Tones + noise corpus clips resembling simple music/speech energy.
fn make_clip(rng: &mut ChaCha8Rng, len: usize, sr: f64) -> Vec<f64> {
    let n_tones = rng.gen_range(2..6);
    let mut clip = vec![0.0f64; len];
    for _ in 0..n_tones {
        let freq = rng.gen_range(100.0..5000.0);
        let amp = rng.gen_range(0.05..0.25);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let fm = rng.gen_range(0.2..3.0);
        let fm_depth = rng.gen_range(0.0..0.01);
        for (i, s) in clip.iter_mut().enumerate() {
            let t = i as f64 / sr;
            let f = freq * (1.0 + fm_depth * (std::f64::consts::TAU * fm * t).sin());
            *s += amp * (std::f64::consts::TAU * f * t + phase).sin();
        }
    }
    // broadband noise floor with a slow envelope
    for (i, s) in clip.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let env = 0.6 + 0.4 * (std::f64::consts::TAU * 0.5 * t).sin();
        *s += env * 0.02 * rng.gen_range(-1.0..1.0);
        *s = s.clamp(-1.0, 1.0);
    }
    clip
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let max_steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(400);
    let out = args.get(3).cloned().unwrap_or_else(|| "/tmp/probe_model.dear".into());

    let n = 16_384usize;
    let l = 16usize;
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    // 50 clips x 4 segments each
    let mut segments = Vec::new();
    for _ in 0..50 {
        let clip = make_clip(&mut rng, n * 4, 44_100.0);
        for chunk in clip.chunks_exact(n) {
            segments.push(chunk.to_vec());
        }
    }
    eprintln!("segments: {}", segments.len());

    let config = TrainingConfig {
        segment_len: n,
        watermark_len: l,
        batch_size: 8,
        epochs: 1000,
        learning_rate: lr,
        seed: 7,
        eval_interval: 25,
        checkpoint_interval: 0,
        max_steps: Some(max_steps),
        target_clean_acc: Some(0.995),
        target_dar_acc: Some(0.92),
        target_snr_db: Some(16.0),
        ..TrainingConfig::default()
    };
    let model = ModelBundle::new_random(ArchDescriptor::default(), l, n, 44_100, 11).unwrap();
    let t0 = Instant::now();
    let mut log = std::io::stderr();
    let outcome = train_on_segments(segments, model, config, None, Some(&mut log)).unwrap();
    eprintln!("elapsed: {:?}", t0.elapsed());
    if let Some(best) = &outcome.record.best_eval {
        eprintln!(
            "best: step {} snr {:.2} clean {:.4} dar {:.4}",
            best.step, best.snr_db, best.clean_acc, best.dar_acc
        );
    }
    outcome.model.save(std::path::Path::new(&out)).unwrap();
}
