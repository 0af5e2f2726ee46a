//! The differentiable re-recording distortion layer (reverberation,
//! band-limiting, Gaussian noise), the enhanced-training distortion set,
//! and the evaluation-time attack suite.

mod attack;
pub mod filter;
mod ir;

pub use attack::{Attack, MP3_CMD_ENV};
pub use filter::BandPassFilter;
pub use ir::{synth_ir, ImpulseResponse, IrSet, DEFAULT_IR_MAX_LEN};

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DearError, Result};
use crate::grad::{Graph, Var};

/// Extra distortions the enhanced training variant rotates through, one
/// per mini-batch, alongside the re-recording pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnhancedOp {
    Resample,
    Dropout,
    Amplitude,
    Requantize,
    MedianFilter,
}

impl EnhancedOp {
    pub const ALL: [EnhancedOp; 5] = [
        EnhancedOp::Resample,
        EnhancedOp::Dropout,
        EnhancedOp::Amplitude,
        EnhancedOp::Requantize,
        EnhancedOp::MedianFilter,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            EnhancedOp::Resample => "resample",
            EnhancedOp::Dropout => "dropout",
            EnhancedOp::Amplitude => "amplitude",
            EnhancedOp::Requantize => "requantize",
            EnhancedOp::MedianFilter => "median_filter",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| op.tag() == tag)
            .ok_or_else(|| DearError::UnknownAttack(format!("enhanced op '{tag}'")))
    }
}

/// Parameters of the training-time distortion layer.
#[derive(Debug, Clone)]
pub struct DistortionConfig {
    pub sample_rate: u32,
    /// High-pass threshold alpha in Hz.
    pub highpass_hz: f64,
    /// Low-pass threshold beta in Hz.
    pub lowpass_hz: f64,
    /// Noise SNR drawn uniformly from this dB range per application.
    pub noise_snr_db: (f64, f64),
    pub ir_set: IrSet,
    /// Extra ops for enhanced training; empty means plain re-recording.
    pub enhanced_ops: Vec<EnhancedOp>,
    band: BandPassFilter,
}

impl DistortionConfig {
    pub const DEFAULT_HIGHPASS_HZ: f64 = 1_000.0;
    pub const DEFAULT_LOWPASS_HZ: f64 = 4_000.0;
    pub const DEFAULT_NOISE_SNR_DB: (f64, f64) = (20.0, 25.0);

    pub fn new(sample_rate: u32, ir_set: IrSet) -> Result<Self> {
        Self::with_band(
            sample_rate,
            ir_set,
            Self::DEFAULT_HIGHPASS_HZ,
            Self::DEFAULT_LOWPASS_HZ,
            Self::DEFAULT_NOISE_SNR_DB,
        )
    }

    pub fn with_band(
        sample_rate: u32,
        ir_set: IrSet,
        highpass_hz: f64,
        lowpass_hz: f64,
        noise_snr_db: (f64, f64),
    ) -> Result<Self> {
        if noise_snr_db.0 > noise_snr_db.1 {
            return Err(DearError::InvalidArgument(
                "noise snr range min > max".into(),
            ));
        }
        let band = BandPassFilter::design(highpass_hz, lowpass_hz, sample_rate)?;
        Ok(Self {
            sample_rate,
            highpass_hz,
            lowpass_hz,
            noise_snr_db,
            ir_set,
            enhanced_ops: Vec::new(),
            band,
        })
    }

    pub fn with_enhanced(mut self, ops: Vec<EnhancedOp>) -> Self {
        self.enhanced_ops = ops;
        self
    }

    pub fn band(&self) -> &BandPassFilter {
        &self.band
    }

    fn draw_snr(&self, rng: &mut ChaCha8Rng) -> f64 {
        let (lo, hi) = self.noise_snr_db;
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..hi)
        }
    }
}

/// Which stages of the re-recording pipeline run; used by the component
/// ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DarStages {
    pub reverb: bool,
    pub band_pass: bool,
    pub noise: bool,
}

impl DarStages {
    pub const ALL: DarStages = DarStages {
        reverb: true,
        band_pass: true,
        noise: true,
    };

    pub fn without_reverb() -> Self {
        DarStages {
            reverb: false,
            ..Self::ALL
        }
    }

    pub fn without_band_pass() -> Self {
        DarStages {
            band_pass: false,
            ..Self::ALL
        }
    }

    pub fn without_noise() -> Self {
        DarStages {
            noise: false,
            ..Self::ALL
        }
    }
}

/// Environment reverberation: convolution with one impulse response,
/// truncated to the input length. Differentiable w.r.t. the audio; the
/// taps are data.
pub fn env_reverb(g: &mut Graph, audio: Var, ir: &ImpulseResponse) -> Result<Var> {
    g.fir_causal(audio, Arc::clone(&ir.taps))
}

/// High-pass at `alpha` then low-pass at `beta`, both linear-phase FIR
/// with group-delay compensation.
pub fn band_pass(g: &mut Graph, audio: Var, band: &BandPassFilter) -> Result<Var> {
    let hp = g.fir_centered(audio, Arc::clone(&band.hp_taps))?;
    g.fir_centered(hp, Arc::clone(&band.lp_taps))
}

/// Additive Gaussian noise at `target_snr_db`, drawn from `rng` and frozen
/// into the graph.
pub fn gaussian_noise(
    g: &mut Graph,
    audio: Var,
    target_snr_db: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let n = g.value(audio).numel();
    let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    g.gaussian_noise(audio, Arc::new(noise), target_snr_db)
}

/// The full re-recording surrogate: noise after band-limiting after
/// reverberation, with the impulse response and noise level sampled here.
pub fn dar(
    g: &mut Graph,
    audio: Var,
    config: &DistortionConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    dar_with_stages(g, audio, config, DarStages::ALL, rng)
}

/// [`dar`] with individual stages switched off for ablations.
pub fn dar_with_stages(
    g: &mut Graph,
    audio: Var,
    config: &DistortionConfig,
    stages: DarStages,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    // Sampling happens unconditionally so ablated runs consume the same
    // random stream as full runs with the same seed.
    let ir = config.ir_set.sample(rng).clone();
    let snr = config.draw_snr(rng);
    let mut x = audio;
    if stages.reverb {
        x = env_reverb(g, x, &ir)?;
    }
    if stages.band_pass {
        x = band_pass(g, x, &config.band)?;
    }
    if stages.noise {
        x = gaussian_noise(g, x, snr, rng)?;
    }
    Ok(x)
}

/// One training-path distortion chosen uniformly from the re-recording
/// pipeline plus the configured enhanced ops. Returns the distorted node
/// and the tag of what was applied.
pub fn enhanced_sample(
    g: &mut Graph,
    audio: Var,
    config: &DistortionConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, &'static str)> {
    if config.enhanced_ops.is_empty() {
        return Err(DearError::InvalidArgument(
            "enhanced_sample needs a non-empty enhanced op set".into(),
        ));
    }
    let pick = rng.gen_range(0..=config.enhanced_ops.len());
    if pick == 0 {
        let out = dar(g, audio, config, rng)?;
        return Ok((out, "dar"));
    }
    let op = config.enhanced_ops[pick - 1];
    let out = apply_enhanced_op(g, audio, op)?;
    Ok((out, op.tag()))
}

/// The digital distortions as differentiable (or surrogate-gradient)
/// graph ops on a `(1, n)` audio node.
pub fn apply_enhanced_op(g: &mut Graph, audio: Var, op: EnhancedOp) -> Result<Var> {
    let n = g.value(audio).len();
    match op {
        EnhancedOp::Resample => {
            let down = ((n as f64) * 0.9).round().max(2.0) as usize;
            let d = g.lin_resample(audio, down)?;
            g.lin_resample(d, n)
        }
        EnhancedOp::Dropout => {
            let mask: Vec<f64> = (0..n)
                .map(|i| if (i + 1) % 100 == 0 { 0.0 } else { 1.0 })
                .collect();
            g.mul_mask(audio, Arc::new(mask))
        }
        EnhancedOp::Amplitude => Ok(g.mul_scalar(audio, 0.9)),
        EnhancedOp::Requantize => Ok(g.requantize(audio, 8)),
        EnhancedOp::MedianFilter => g.median_filter(audio, 3),
    }
}
