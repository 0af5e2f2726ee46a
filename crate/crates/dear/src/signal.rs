//! Audio container, WAV file I/O, segmentation, and the fidelity/robustness
//! metrics (SNR, bit accuracy).
//!
//! Audio is mono internally; multichannel files are averaged to mono on load.
//! Float-32 WAV is the canonical interchange format, 16-bit PCM is supported
//! for ingestion.

use std::path::Path;

use crate::error::{DearError, Result};

/// A sampled mono waveform. Samples are nominally in `[-1, 1]` and always
/// finite; the container is never empty.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(DearError::EmptyAudio);
        }
        if sample_rate == 0 {
            return Err(DearError::InvalidArgument("sample_rate must be > 0".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(DearError::NonFiniteSample(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

/// A binary watermark with entries in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Watermark {
    bits: Vec<i8>,
}

impl Watermark {
    pub fn new(bits: Vec<i8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(DearError::InvalidArgument(
                "watermark must have at least one bit".into(),
            ));
        }
        if bits.iter().any(|&b| b != 1 && b != -1) {
            return Err(DearError::InvalidArgument(
                "watermark entries must be -1 or +1".into(),
            ));
        }
        Ok(Self { bits })
    }

    /// Parse from an ASCII `0`/`1` string or a hex string with `0x` prefix.
    /// `0` maps to `-1`, `1` maps to `+1`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let bits: Vec<i8> = if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X"))
        {
            let mut bits = Vec::with_capacity(hex.len() * 4);
            for c in hex.chars() {
                let v = c.to_digit(16).ok_or_else(|| {
                    DearError::InvalidArgument(format!("bad hex digit '{c}' in watermark"))
                })?;
                for shift in (0..4).rev() {
                    bits.push(if (v >> shift) & 1 == 1 { 1 } else { -1 });
                }
            }
            bits
        } else {
            s.chars()
                .map(|c| match c {
                    '0' => Ok(-1),
                    '1' => Ok(1),
                    _ => Err(DearError::InvalidArgument(format!(
                        "bad bit character '{c}' in watermark"
                    ))),
                })
                .collect::<Result<_>>()?
        };
        Watermark::new(bits)
    }

    /// Draw `len` uniform random bits.
    pub fn random(len: usize, rng: &mut impl rand::Rng) -> Self {
        let bits = (0..len).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
        Self { bits }
    }

    pub fn bits(&self) -> &[i8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `0`/`1` ASCII rendering (`-1` → `0`, `+1` → `1`).
    pub fn to_bit_string(&self) -> String {
        self.bits
            .iter()
            .map(|&b| if b > 0 { '1' } else { '0' })
            .collect()
    }

    /// The watermark as soft values (exactly its own bits).
    pub fn as_soft(&self) -> SoftWatermark {
        SoftWatermark {
            values: self.bits.iter().map(|&b| f64::from(b)).collect(),
        }
    }
}

/// Soft-valued watermark estimate with entries in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftWatermark {
    values: Vec<f64>,
}

impl SoftWatermark {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Harden to bits. `sign(0)` counts as `+1`.
    pub fn to_bits(&self) -> Watermark {
        Watermark {
            bits: self.values.iter().map(|&v| hard_sign(v)).collect(),
        }
    }

    /// Mean absolute soft value, used as an extraction confidence proxy.
    pub fn confidence(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().map(|v| v.abs()).sum::<f64>() / self.values.len() as f64
    }
}

/// Tie rule for bit decisions: `sign(0)` is `+1`.
fn hard_sign(v: f64) -> i8 {
    if v < 0.0 {
        -1
    } else {
        1
    }
}

/// Load a WAV file (PCM 16-bit or IEEE float-32) as a mono signal scaled to
/// `[-1, 1]`. Multichannel audio is averaged to mono.
pub fn load_wav(path: &Path) -> Result<AudioSignal> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => DearError::io(path, io),
        other => DearError::UnsupportedEncoding(other.to_string()),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(DearError::UnsupportedEncoding("zero channels".into()));
    }

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| DearError::UnsupportedEncoding(e.to_string()))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| DearError::UnsupportedEncoding(e.to_string()))?,
        (fmt, bits) => {
            return Err(DearError::UnsupportedEncoding(format!(
                "{fmt:?} at {bits} bits per sample"
            )))
        }
    };

    if interleaved.is_empty() {
        return Err(DearError::EmptyAudio);
    }

    let frames = interleaved.len() / channels;
    if frames == 0 {
        return Err(DearError::EmptyAudio);
    }
    let mut mono = Vec::with_capacity(frames);
    for frame in interleaved.chunks_exact(channels) {
        mono.push(frame.iter().sum::<f64>() / channels as f64);
    }
    AudioSignal::new(mono, spec.sample_rate)
}

/// Save as IEEE float-32 WAV (canonical interchange format; load/save
/// round-trips are bit-exact up to the f64→f32 rounding of each sample).
pub fn save_wav(signal: &AudioSignal, path: &Path) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_write_err(path, e))?;
    for &s in &signal.samples {
        writer
            .write_sample(s as f32)
            .map_err(|e| wav_write_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_write_err(path, e))
}

/// Save as 16-bit PCM WAV. Samples are clamped to `[-1, 1]` and quantized.
pub fn save_wav_pcm16(signal: &AudioSignal, path: &Path) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_write_err(path, e))?;
    for &s in &signal.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(q)
            .map_err(|e| wav_write_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_write_err(path, e))
}

fn wav_write_err(path: &Path, e: hound::Error) -> DearError {
    match e {
        hound::Error::IoError(io) => DearError::io(path, io),
        other => DearError::UnsupportedEncoding(other.to_string()),
    }
}

/// Signal-to-noise ratio in dB: `10*log10(sum(ref^2) / sum((test-ref)^2))`.
/// Returns `f64::INFINITY` when the residual is identically zero.
pub fn snr(reference: &AudioSignal, test: &AudioSignal) -> Result<f64> {
    snr_samples(reference.samples(), test.samples())
}

/// SNR over raw sample slices; see [`snr`].
pub fn snr_samples(reference: &[f64], test: &[f64]) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(DearError::LengthMismatch {
            left: reference.len(),
            right: test.len(),
        });
    }
    let signal_power: f64 = reference.iter().map(|a| a * a).sum();
    if signal_power == 0.0 {
        return Err(DearError::ZeroReference);
    }
    let residual_power: f64 = reference
        .iter()
        .zip(test)
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    if residual_power == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal_power / residual_power).log10())
}

/// Fraction of positions where `sign(estimate)` matches the true bit.
pub fn bit_accuracy(truth: &Watermark, estimate: &SoftWatermark) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(DearError::LengthMismatch {
            left: truth.len(),
            right: estimate.len(),
        });
    }
    let matches = truth
        .bits()
        .iter()
        .zip(estimate.values())
        .filter(|(&b, &v)| hard_sign(v) == b)
        .count();
    Ok(matches as f64 / truth.len() as f64)
}

/// Split into consecutive non-overlapping segments of `segment_length`
/// samples; the final partial segment is zero-padded.
pub fn segment(signal: &AudioSignal, segment_length: usize) -> Result<Vec<AudioSignal>> {
    if segment_length < 2 || segment_length % 2 != 0 {
        return Err(DearError::InvalidArgument(format!(
            "segment_length must be even and >= 2, got {segment_length}"
        )));
    }
    let mut out = Vec::with_capacity(signal.len().div_ceil(segment_length));
    for chunk in signal.samples.chunks(segment_length) {
        let mut seg = chunk.to_vec();
        seg.resize(segment_length, 0.0);
        out.push(AudioSignal {
            samples: seg,
            sample_rate: signal.sample_rate,
        });
    }
    Ok(out)
}

/// Reassemble segments into one signal of `original_len` samples (drops the
/// zero padding added by [`segment`]).
pub fn concat_segments(segments: &[AudioSignal], original_len: usize) -> Result<AudioSignal> {
    let mut samples = Vec::with_capacity(original_len);
    for seg in segments {
        samples.extend_from_slice(seg.samples());
    }
    if samples.len() < original_len {
        return Err(DearError::LengthMismatch {
            left: samples.len(),
            right: original_len,
        });
    }
    samples.truncate(original_len);
    let sr = segments
        .first()
        .map(|s| s.sample_rate)
        .ok_or(DearError::EmptyAudio)?;
    AudioSignal::new(samples, sr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sig(samples: &[f64]) -> AudioSignal {
        AudioSignal::new(samples.to_vec(), 44_100).unwrap()
    }

    #[test]
    fn pcm16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 44_100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(16384i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();

        let s = load_wav(&path).unwrap();
        assert!((s.samples()[0] - 0.5).abs() <= 1.0 / 32768.0);
        assert_eq!(s.samples()[1], 0.0);
    }

    #[test]
    fn stereo_averages_to_mono() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 44_100,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0.2f32).unwrap();
        w.write_sample(0.4f32).unwrap();
        w.finalize().unwrap();

        let s = load_wav(&path).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s.samples()[0] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn truncated_header_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"RIFF....WAVE").unwrap();
        let err = load_wav(&path).unwrap_err();
        assert!(matches!(
            err,
            DearError::UnsupportedEncoding(_) | DearError::Io { .. }
        ));
    }

    #[test]
    fn float32_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f32.wav");
        // Values chosen representable in f32 so the f64 round trip is exact.
        let s = sig(&[0.5, -0.25, 0.125, 1.0, -1.0, 0.0]);
        save_wav(&s, &path).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(s.samples(), back.samples());
        assert_eq!(s.sample_rate(), back.sample_rate());
    }

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p16.wav");
        let s = sig(&[0.5, -0.3, 0.9999]);
        save_wav_pcm16(&s, &path).unwrap();
        let back = load_wav(&path).unwrap();
        for (a, b) in s.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() <= 1.0 / 32768.0 + 1e-12);
        }
    }

    #[test]
    fn write_to_bad_path_is_io_error() {
        let s = sig(&[0.1]);
        let err = save_wav(&s, Path::new("/nonexistent-dir/x.wav")).unwrap_err();
        assert!(matches!(err, DearError::Io { .. }));
    }

    #[test]
    fn snr_examples() {
        // reference [1,0,0,0], test [1,0.1,0,0]: 10*log10(1/0.01) = 20 dB
        let reference = sig(&[1.0, 0.0, 0.0, 0.0]);
        let test = sig(&[1.0, 0.1, 0.0, 0.0]);
        assert!((snr(&reference, &test).unwrap() - 20.0).abs() < 1e-9);

        assert_eq!(snr(&reference, &reference).unwrap(), f64::INFINITY);

        let zero = sig(&[0.0, 0.0]);
        assert!(matches!(
            snr(&zero, &sig(&[0.1, 0.0])).unwrap_err(),
            DearError::ZeroReference
        ));
        assert!(matches!(
            snr(&reference, &sig(&[1.0])).unwrap_err(),
            DearError::LengthMismatch { .. }
        ));
    }

    #[test]
    fn snr_residual_scale_covariance() {
        let reference = sig(&[0.4, -0.2, 0.7, 0.1]);
        let test_full = sig(&[0.4 + 0.02, -0.2 - 0.04, 0.7 + 0.01, 0.1 - 0.03]);
        let test_half = sig(&[0.4 + 0.01, -0.2 - 0.02, 0.7 + 0.005, 0.1 - 0.015]);
        let a = snr(&reference, &test_full).unwrap();
        let b = snr(&reference, &test_half).unwrap();
        assert!((b - a - 20.0 * 2.0f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn bit_accuracy_examples() {
        let truth = Watermark::new(vec![1, -1, 1, -1]).unwrap();
        assert_eq!(bit_accuracy(&truth, &truth.as_soft()).unwrap(), 1.0);

        let inverted = SoftWatermark::new(vec![-1.0, 1.0, -1.0, 1.0]);
        assert_eq!(bit_accuracy(&truth, &inverted).unwrap(), 0.0);

        // Hand count: [0.9 vs +1 ok, 0.3 vs -1 miss, -0.2 vs +1 miss, -0.8 vs -1 ok]
        let est = SoftWatermark::new(vec![0.9, 0.3, -0.2, -0.8]);
        assert_eq!(bit_accuracy(&truth, &est).unwrap(), 0.5);
    }

    #[test]
    fn sign_zero_counts_as_plus_one() {
        let truth = Watermark::new(vec![1, -1]).unwrap();
        let est = SoftWatermark::new(vec![0.0, 0.0]);
        assert_eq!(bit_accuracy(&truth, &est).unwrap(), 0.5);
    }

    #[test]
    fn segment_examples() {
        let s = sig(&[1.0; 10]);
        let segs = segment(&s, 4).unwrap();
        assert_eq!(segs.len(), 3);
        assert_eq!(segs[2].samples(), &[1.0, 1.0, 0.0, 0.0]);

        let s8 = sig(&[1.0; 8]);
        let segs = segment(&s8, 8).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].samples(), s8.samples());

        assert!(segment(&s, 3).is_err());
        assert!(segment(&s, 0).is_err());
        assert!(AudioSignal::new(vec![], 44_100).is_err());
    }

    #[test]
    fn watermark_parse_forms() {
        let w = Watermark::parse("0110").unwrap();
        assert_eq!(w.bits(), &[-1, 1, 1, -1]);
        let h = Watermark::parse("0xA").unwrap();
        assert_eq!(h.bits(), &[1, -1, 1, -1]);
        assert!(Watermark::parse("01x").is_err());
        assert!(Watermark::parse("").is_err());
        assert_eq!(w.to_bit_string(), "0110");
    }

    proptest! {
        #[test]
        fn segment_concat_round_trips(len in 1usize..400, seg_len_half in 1usize..16) {
            let seg_len = seg_len_half * 2;
            let samples: Vec<f64> = (0..len).map(|i| ((i * 37 + 11) % 101) as f64 / 101.0 - 0.5).collect();
            let s = AudioSignal::new(samples, 8000).unwrap();
            let segs = segment(&s, seg_len).unwrap();
            prop_assert_eq!(segs.len(), len.div_ceil(seg_len));
            let back = concat_segments(&segs, len).unwrap();
            prop_assert_eq!(back.samples(), s.samples());
        }

        #[test]
        fn bit_accuracy_of_own_soft_is_one(len in 1usize..64, seed in 0u64..1000) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let w = Watermark::random(len, &mut rng);
            prop_assert_eq!(bit_accuracy(&w, &w.as_soft()).unwrap(), 1.0);
        }
    }
}
