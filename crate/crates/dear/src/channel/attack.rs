//! Evaluation-time attacks on raw audio.
//!
//! These reuse the same graph primitives as the training path (with
//! gradients off) so the attacked signal matches what the distortion layer
//! produces, but they run on whole files and include non-differentiable
//! operations like MP3 via an external codec hook.

use std::path::PathBuf;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::channel::filter::{design_highpass, design_lowpass, BandPassFilter};
use crate::channel::ir::IrSet;
use crate::error::{DearError, Result};
use crate::grad::{Graph, Tensor};
use crate::signal::AudioSignal;

/// Environment variable holding the MP3 codec command template. The
/// command must read the WAV at `{in}`, encode it at `{kbps}` kbit/s,
/// decode it back, and write the WAV to `{out}`.
pub const MP3_CMD_ENV: &str = "DEAR_MP3_CMD";

/// A named evaluation-time distortion with parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Attack {
    Identity,
    Gaussian { snr_db: f64 },
    HighPass { cutoff_hz: f64 },
    LowPass { cutoff_hz: f64 },
    Resample { factor: f64 },
    Dropout { period: usize },
    Amplitude { factor: f64 },
    Requantize { bits: u32 },
    MedianFilter { window: usize },
    Rerecord { snr_db: f64, ir_dir: Option<PathBuf> },
    Mp3 { kbps: u32 },
}

impl Attack {
    /// Parse a `name[:params]` spec, e.g. `gaussian:20`, `resample:0.9`,
    /// `rerecord:snr=22`, `mp3:64`.
    pub fn parse(spec: &str) -> Result<Attack> {
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (spec.trim(), None),
        };
        let bad = |what: &str| DearError::UnknownAttack(format!("{spec}: {what}"));
        let num = |a: Option<&str>, default: f64| -> Result<f64> {
            match a {
                None => Ok(default),
                Some(s) => s.parse().map_err(|_| bad("bad numeric parameter")),
            }
        };
        match name {
            "identity" | "none" => Ok(Attack::Identity),
            "gaussian" | "gaussian_noise" => {
                let snr = num(arg, 20.0)?;
                Ok(Attack::Gaussian { snr_db: snr })
            }
            "highpass" => Ok(Attack::HighPass {
                cutoff_hz: num(arg, 1_000.0)?,
            }),
            "lowpass" => Ok(Attack::LowPass {
                cutoff_hz: num(arg, 4_000.0)?,
            }),
            "resample" => {
                let f = num(arg, 0.9)?;
                if !(0.1..1.0).contains(&f) {
                    return Err(bad("resample factor must be in [0.1, 1)"));
                }
                Ok(Attack::Resample { factor: f })
            }
            "dropout" => {
                let p = num(arg, 100.0)? as usize;
                if p == 0 {
                    return Err(bad("dropout period must be >= 1"));
                }
                Ok(Attack::Dropout { period: p })
            }
            "amplitude" => Ok(Attack::Amplitude {
                factor: num(arg, 0.9)?,
            }),
            "requantize" => {
                let bits = num(arg, 8.0)? as u32;
                if !(2..=16).contains(&bits) {
                    return Err(bad("requantize bits must be in 2..=16"));
                }
                Ok(Attack::Requantize { bits })
            }
            "median" | "median_filter" => {
                let w = num(arg, 3.0)? as usize;
                if w % 2 == 0 || w == 0 {
                    return Err(bad("median window must be odd"));
                }
                Ok(Attack::MedianFilter { window: w })
            }
            "rerecord" | "simulated_rerecording" => {
                let mut snr_db = 22.0;
                let mut ir_dir = None;
                if let Some(a) = arg {
                    for part in a.split(',').filter(|p| !p.is_empty()) {
                        match part.split_once('=') {
                            Some(("snr", v)) => {
                                snr_db = v.parse().map_err(|_| bad("bad snr"))?;
                            }
                            Some(("ir", v)) => {
                                if v != "synthetic" {
                                    ir_dir = Some(PathBuf::from(v));
                                }
                            }
                            _ => return Err(bad("expected snr=<db> or ir=<dir|synthetic>")),
                        }
                    }
                }
                Ok(Attack::Rerecord { snr_db, ir_dir })
            }
            "mp3" => {
                let kbps = num(arg, 128.0)? as u32;
                Ok(Attack::Mp3 { kbps })
            }
            _ => Err(DearError::UnknownAttack(spec.to_string())),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Attack::Identity => "identity".into(),
            Attack::Gaussian { snr_db } => format!("gaussian:{snr_db}"),
            Attack::HighPass { cutoff_hz } => format!("highpass:{cutoff_hz}"),
            Attack::LowPass { cutoff_hz } => format!("lowpass:{cutoff_hz}"),
            Attack::Resample { factor } => format!("resample:{factor}"),
            Attack::Dropout { period } => format!("dropout:{period}"),
            Attack::Amplitude { factor } => format!("amplitude:{factor}"),
            Attack::Requantize { bits } => format!("requantize:{bits}"),
            Attack::MedianFilter { window } => format!("median:{window}"),
            Attack::Rerecord { snr_db, .. } => format!("rerecord:snr={snr_db}"),
            Attack::Mp3 { kbps } => format!("mp3:{kbps}"),
        }
    }

    /// Apply to a whole signal. Randomized attacks draw from `rng`;
    /// `rerecord` needs an impulse set (loaded from `ir_dir` or synthetic
    /// from the rng).
    pub fn apply(&self, audio: &AudioSignal, rng: &mut ChaCha8Rng) -> Result<AudioSignal> {
        let sr = audio.sample_rate();
        let n = audio.len();
        let samples = audio.samples().to_vec();
        let out = match self {
            Attack::Identity => samples,
            Attack::Gaussian { snr_db } => {
                let power = samples.iter().map(|v| v * v).sum::<f64>() / n as f64;
                if power == 0.0 {
                    return Err(DearError::ZeroReference);
                }
                let sigma = (power * 10f64.powf(-snr_db / 10.0)).sqrt();
                samples
                    .into_iter()
                    .map(|v| {
                        let z: f64 = StandardNormal.sample(rng);
                        v + sigma * z
                    })
                    .collect()
            }
            Attack::HighPass { cutoff_hz } => {
                let taps = Arc::new(design_highpass(*cutoff_hz, sr)?);
                run_graph(samples, |g, x| g.fir_centered(x, taps))?
            }
            Attack::LowPass { cutoff_hz } => {
                let taps = Arc::new(design_lowpass(*cutoff_hz, sr)?);
                run_graph(samples, |g, x| g.fir_centered(x, taps))?
            }
            Attack::Resample { factor } => {
                let down = ((n as f64) * factor).round().max(2.0) as usize;
                run_graph(samples, |g, x| {
                    let d = g.lin_resample(x, down)?;
                    g.lin_resample(d, n)
                })?
            }
            Attack::Dropout { period } => {
                let mask: Vec<f64> = (0..n)
                    .map(|i| if (i + 1) % period == 0 { 0.0 } else { 1.0 })
                    .collect();
                run_graph(samples, |g, x| g.mul_mask(x, Arc::new(mask)))?
            }
            Attack::Amplitude { factor } => samples.into_iter().map(|v| v * factor).collect(),
            Attack::Requantize { bits } => {
                run_graph(samples, |g, x| Ok(g.requantize(x, *bits)))?
            }
            Attack::MedianFilter { window } => {
                run_graph(samples, |g, x| g.median_filter(x, *window))?
            }
            Attack::Rerecord { snr_db, ir_dir } => {
                let ir_set = match ir_dir {
                    Some(dir) => IrSet::load_dir(dir, crate::channel::ir::DEFAULT_IR_MAX_LEN)?,
                    None => IrSet::synthetic(rng, 4, sr)?,
                };
                let band = BandPassFilter::design(1_000.0, 4_000.0, sr)?;
                let ir = ir_set.sample(rng).taps.clone();
                let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
                let snr = *snr_db;
                run_graph(samples, move |g, x| {
                    let x = g.fir_causal(x, ir)?;
                    let x = g.fir_centered(x, band.hp_taps.clone())?;
                    let x = g.fir_centered(x, band.lp_taps.clone())?;
                    g.gaussian_noise(x, Arc::new(noise), snr)
                })?
            }
            Attack::Mp3 { kbps } => return mp3_round_trip(audio, *kbps),
        };
        AudioSignal::new(out, sr)
    }
}

fn run_graph(
    samples: Vec<f64>,
    build: impl FnOnce(&mut Graph, crate::grad::Var) -> Result<crate::grad::Var>,
) -> Result<Vec<f64>> {
    let n = samples.len();
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(1, n, samples)?);
    let y = build(&mut g, x)?;
    Ok(g.value(y).data().to_vec())
}

/// Encode/decode through the external codec command named by
/// [`MP3_CMD_ENV`]. Errors cleanly when the hook is not configured.
fn mp3_round_trip(audio: &AudioSignal, kbps: u32) -> Result<AudioSignal> {
    let template = std::env::var(MP3_CMD_ENV).map_err(|_| {
        DearError::CodecUnavailable(format!(
            "set {MP3_CMD_ENV} to a command template with {{in}}, {{out}}, {{kbps}}"
        ))
    })?;
    let dir = std::env::temp_dir();
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let in_path = dir.join(format!("dear-mp3-in-{stamp}.wav"));
    let out_path = dir.join(format!("dear-mp3-out-{stamp}.wav"));
    crate::signal::save_wav_pcm16(audio, &in_path)?;

    let cmd = template
        .replace("{in}", &in_path.display().to_string())
        .replace("{out}", &out_path.display().to_string())
        .replace("{kbps}", &kbps.to_string());
    let status = std::process::Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .status()
        .map_err(|e| DearError::CodecUnavailable(format!("failed to spawn codec: {e}")))?;
    let result = if status.success() {
        crate::signal::load_wav(&out_path)
    } else {
        Err(DearError::CodecUnavailable(format!(
            "codec command exited with {status}"
        )))
    };
    let _ = std::fs::remove_file(&in_path);
    let _ = std::fs::remove_file(&out_path);
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tone(n: usize, freq: f64, sr: u32) -> AudioSignal {
        let samples = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / f64::from(sr)).sin())
            .collect();
        AudioSignal::new(samples, sr).unwrap()
    }

    #[test]
    fn parse_round_trips() {
        for spec in [
            "identity",
            "gaussian:15",
            "highpass:1000",
            "lowpass:4000",
            "resample:0.9",
            "dropout:100",
            "amplitude:0.9",
            "requantize:8",
            "median:3",
            "rerecord:snr=22",
            "mp3:64",
        ] {
            let a = Attack::parse(spec).unwrap();
            assert_eq!(Attack::parse(&a.name()).unwrap(), a);
        }
        assert!(Attack::parse("warp:9").is_err());
        assert!(Attack::parse("median:4").is_err());
        assert!(Attack::parse("resample:1.5").is_err());
    }

    #[test]
    fn amplitude_scales_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = AudioSignal::new(vec![0.5, -0.5], 44_100).unwrap();
        let out = Attack::Amplitude { factor: 0.9 }.apply(&s, &mut rng).unwrap();
        assert_eq!(out.samples(), &[0.45, -0.45]);
    }

    #[test]
    fn dropout_zeroes_every_period() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = AudioSignal::new(vec![1.0; 250], 44_100).unwrap();
        let out = Attack::Dropout { period: 100 }.apply(&s, &mut rng).unwrap();
        let zeros = out.samples().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 2);
        assert_eq!(out.samples()[99], 0.0);
        assert_eq!(out.samples()[199], 0.0);
    }

    #[test]
    fn resample_preserves_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = tone(4000, 440.0, 44_100);
        let out = Attack::Resample { factor: 0.9 }.apply(&s, &mut rng).unwrap();
        assert_eq!(out.len(), s.len());
        // mild distortion only
        let snr = crate::signal::snr(&s, &out).unwrap();
        assert!(snr > 20.0, "resample snr {snr}");
    }

    #[test]
    fn gaussian_attack_hits_target_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = tone(44_100, 800.0, 44_100);
        let out = Attack::Gaussian { snr_db: 20.0 }.apply(&s, &mut rng).unwrap();
        let measured = crate::signal::snr(&s, &out).unwrap();
        assert!((measured - 20.0).abs() < 0.2, "snr {measured}");
    }

    #[test]
    fn requantize_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = AudioSignal::new(vec![0.5, 0.123, -0.77], 44_100).unwrap();
        let out = Attack::Requantize { bits: 8 }.apply(&s, &mut rng).unwrap();
        for (a, b) in s.samples().iter().zip(out.samples()) {
            assert!((a - b).abs() <= 1.0 / 256.0 + 1e-12);
        }
    }

    #[test]
    fn mp3_without_codec_errors_cleanly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        std::env::remove_var(MP3_CMD_ENV);
        let s = tone(1024, 440.0, 44_100);
        let err = Attack::Mp3 { kbps: 64 }.apply(&s, &mut rng).unwrap_err();
        assert!(matches!(err, DearError::CodecUnavailable(_)));
    }

    #[test]
    fn mp3_hook_runs_external_command() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // stand-in codec: copy input to output
        std::env::set_var(MP3_CMD_ENV, "cp {in} {out} && true kbps={kbps}");
        let s = tone(512, 440.0, 44_100);
        let out = Attack::Mp3 { kbps: 64 }.apply(&s, &mut rng).unwrap();
        std::env::remove_var(MP3_CMD_ENV);
        assert_eq!(out.len(), s.len());
        let snr = crate::signal::snr(&s, &out).unwrap();
        assert!(snr > 40.0); // pcm16 quantization only
    }
}
