//! Room impulse responses: ingestion from WAV files and a synthetic
//! generator used when no measured set is supplied.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DearError, Result};
use crate::signal;

/// Default cap on impulse response length in samples; longer files are
/// truncated on load.
pub const DEFAULT_IR_MAX_LEN: usize = 4096;

/// One impulse response, peak-normalized so `max |tap| == 1`.
#[derive(Debug, Clone)]
pub struct ImpulseResponse {
    pub taps: Arc<Vec<f64>>,
    pub sample_rate: u32,
    pub source: String,
}

impl ImpulseResponse {
    pub fn new(mut taps: Vec<f64>, sample_rate: u32, source: impl Into<String>) -> Result<Self> {
        if taps.is_empty() {
            return Err(DearError::InvalidArgument("empty impulse response".into()));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(DearError::InvalidArgument(
                "non-finite impulse response tap".into(),
            ));
        }
        let peak = taps.iter().fold(0.0f64, |m, t| m.max(t.abs()));
        if peak == 0.0 {
            return Err(DearError::InvalidArgument(
                "all-zero impulse response".into(),
            ));
        }
        for t in &mut taps {
            *t /= peak;
        }
        Ok(Self {
            taps: Arc::new(taps),
            sample_rate,
            source: source.into(),
        })
    }

    /// The identity response: a single unit tap.
    pub fn delta(sample_rate: u32) -> Self {
        Self {
            taps: Arc::new(vec![1.0]),
            sample_rate,
            source: "delta".into(),
        }
    }
}

/// Synthetic room response: unit direct-path tap followed by an
/// exponentially decaying Gaussian tail whose envelope falls 60 dB over
/// `rt60` seconds. The tail level is set for a direct-to-reverberant
/// energy ratio of about 2 dB.
pub fn synth_ir(
    rng: &mut impl Rng,
    length: usize,
    rt60_seconds: f64,
    sample_rate: u32,
) -> Result<ImpulseResponse> {
    if length < 1 {
        return Err(DearError::InvalidArgument("ir length must be >= 1".into()));
    }
    if rt60_seconds <= 0.0 {
        return Err(DearError::InvalidArgument("rt60 must be > 0".into()));
    }
    const DRR_DB: f64 = 2.0;
    // Reflections never exceed the direct path; the cap keeps the rt60 -> 0
    // limit a near-delta instead of letting the energy target blow up.
    const MAX_TAIL_GAIN: f64 = 0.7;
    let fs = f64::from(sample_rate);
    // envelope(t) = 10^(-3 t / rt60); tail energy per unit gain
    let mut unit_energy = 0.0;
    for t in 1..length {
        let env = 10f64.powf(-3.0 * (t as f64 / fs) / rt60_seconds);
        unit_energy += env * env;
    }
    let gain = if unit_energy > 0.0 {
        (1.0 / (unit_energy * 10f64.powf(DRR_DB / 10.0)))
            .sqrt()
            .min(MAX_TAIL_GAIN)
    } else {
        0.0
    };
    let mut taps = Vec::with_capacity(length);
    taps.push(1.0);
    for t in 1..length {
        let env = 10f64.powf(-3.0 * (t as f64 / fs) / rt60_seconds);
        let z: f64 = StandardNormal.sample(rng);
        taps.push(gain * env * z);
    }
    ImpulseResponse::new(taps, sample_rate, "synthetic")
}

/// The set P of impulse responses the reverberation stage samples from.
#[derive(Debug, Clone)]
pub struct IrSet {
    irs: Vec<ImpulseResponse>,
}

impl IrSet {
    pub fn new(irs: Vec<ImpulseResponse>) -> Result<Self> {
        if irs.is_empty() {
            return Err(DearError::InvalidArgument("empty impulse set".into()));
        }
        Ok(Self { irs })
    }

    /// A set holding only the identity response (neutral reverberation).
    pub fn delta(sample_rate: u32) -> Self {
        Self {
            irs: vec![ImpulseResponse::delta(sample_rate)],
        }
    }

    /// Generate `count` synthetic rooms with rt60 drawn from
    /// `[0.04, 0.12]` seconds.
    pub fn synthetic(rng: &mut impl Rng, count: usize, sample_rate: u32) -> Result<Self> {
        let mut irs = Vec::with_capacity(count);
        for _ in 0..count {
            let rt60 = rng.gen_range(0.04..0.12);
            irs.push(synth_ir(rng, DEFAULT_IR_MAX_LEN, rt60, sample_rate)?);
        }
        Self::new(irs)
    }

    /// Load every WAV file in a directory as one impulse response each,
    /// truncated to `max_len` taps. Files are taken in name order so the
    /// set is deterministic.
    pub fn load_dir(dir: &Path, max_len: usize) -> Result<Self> {
        let mut names: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| DearError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .map(|x| x.eq_ignore_ascii_case("wav"))
                    .unwrap_or(false)
            })
            .collect();
        names.sort();
        let mut irs = Vec::new();
        for path in names {
            let audio = signal::load_wav(&path)?;
            let rate = audio.sample_rate();
            let mut taps = audio.into_samples();
            taps.truncate(max_len);
            irs.push(ImpulseResponse::new(
                taps,
                rate,
                path.display().to_string(),
            )?);
        }
        Self::new(irs)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> &ImpulseResponse {
        &self.irs[rng.gen_range(0..self.irs.len())]
    }

    pub fn len(&self) -> usize {
        self.irs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn irs(&self) -> &[ImpulseResponse] {
        &self.irs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tiny_rt60_is_nearly_a_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ir = synth_ir(&mut rng, 512, 1e-4, 44_100).unwrap();
        assert_eq!(ir.taps[0], 1.0);
        let tail_energy: f64 = ir.taps[1..].iter().map(|t| t * t).sum();
        assert!(tail_energy < 0.01, "tail energy {tail_energy}");
        // and the limit is monotone: shrinking rt60 shrinks the tail
        let tinier = synth_ir(&mut ChaCha8Rng::seed_from_u64(1), 512, 1e-5, 44_100).unwrap();
        let tinier_energy: f64 = tinier.taps[1..].iter().map(|t| t * t).sum();
        assert!(tinier_energy < tail_energy / 10.0);
    }

    #[test]
    fn envelope_drops_60db_at_rt60() {
        let fs = 44_100u32;
        let rt60 = 0.05;
        let n_rt60 = (rt60 * f64::from(fs)) as usize;
        // Mean tap energy over windows right after the direct path and
        // around rt60, averaged across independent draws so the Gaussian
        // factor cancels; the oracle integrates 10^(-3 t / rt60) over the
        // same windows.
        let mut head_e = 0.0;
        let mut tail_e = 0.0;
        for seed in 0..16u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ir = synth_ir(&mut rng, n_rt60 + 400, rt60, fs).unwrap();
            head_e += ir.taps[1..301].iter().map(|t| t * t).sum::<f64>() / 300.0;
            tail_e += ir.taps[n_rt60..n_rt60 + 300].iter().map(|t| t * t).sum::<f64>() / 300.0;
        }
        let drop_db = 10.0 * (head_e / tail_e).log10();

        let env_energy = |range: std::ops::Range<usize>| {
            let count = range.len() as f64;
            let e: f64 = range
                .map(|t| 10f64.powf(-6.0 * t as f64 / (rt60 * f64::from(fs))))
                .sum();
            e / count
        };
        let expected = 10.0 * (env_energy(1..301) / env_energy(n_rt60..n_rt60 + 300)).log10();
        assert!((expected - 60.0).abs() < 2.0, "oracle sanity: {expected}");
        assert!(
            (drop_db - expected).abs() < 1.0,
            "measured {drop_db} dB, expected {expected} dB"
        );
    }

    #[test]
    fn fixed_seed_reproduces() {
        let a = synth_ir(&mut ChaCha8Rng::seed_from_u64(9), 256, 0.08, 44_100).unwrap();
        let b = synth_ir(&mut ChaCha8Rng::seed_from_u64(9), 256, 0.08, 44_100).unwrap();
        assert_eq!(a.taps, b.taps);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(synth_ir(&mut rng, 0, 0.1, 44_100).is_err());
        assert!(synth_ir(&mut rng, 16, 0.0, 44_100).is_err());
        assert!(ImpulseResponse::new(vec![], 44_100, "x").is_err());
        assert!(ImpulseResponse::new(vec![0.0, 0.0], 44_100, "x").is_err());
        assert!(IrSet::new(vec![]).is_err());
    }

    #[test]
    fn peak_normalization() {
        let ir = ImpulseResponse::new(vec![0.5, -2.0, 0.25], 44_100, "x").unwrap();
        assert_eq!(ir.taps.as_slice(), &[0.25, -1.0, 0.125]);
    }
}
