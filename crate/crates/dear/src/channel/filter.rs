//! Windowed-sinc FIR design for the band-limiting stage.
//!
//! Filters are linear-phase type I (odd tap count, symmetric), designed
//! with a Hamming window. Applied through `Graph::fir_centered` they are
//! exactly linear maps with group-delay compensation, so the training path
//! differentiates them as their own transpose.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{DearError, Result};

/// Tap count used at 44.1 kHz; scaled proportionally for other rates and
/// forced odd.
pub const BASE_TAPS_AT_44100: usize = 511;

pub fn tap_count(sample_rate: u32) -> usize {
    let n = (BASE_TAPS_AT_44100 as f64 * f64::from(sample_rate) / 44_100.0).round() as usize;
    let n = n.max(31);
    if n % 2 == 0 {
        n + 1
    } else {
        n
    }
}

fn hamming(n: usize, taps: usize) -> f64 {
    0.54 - 0.46 * (2.0 * PI * n as f64 / (taps - 1) as f64).cos()
}

fn validate_cutoff(cutoff_hz: f64, sample_rate: u32) -> Result<()> {
    let nyquist = f64::from(sample_rate) / 2.0;
    if cutoff_hz <= 0.0 || cutoff_hz >= nyquist {
        return Err(DearError::InvalidArgument(format!(
            "cutoff {cutoff_hz} Hz outside (0, {nyquist})"
        )));
    }
    Ok(())
}

/// Hamming-windowed sinc low-pass, DC gain normalized to exactly 1.
pub fn design_lowpass(cutoff_hz: f64, sample_rate: u32) -> Result<Vec<f64>> {
    validate_cutoff(cutoff_hz, sample_rate)?;
    let taps = tap_count(sample_rate);
    let fc = cutoff_hz / f64::from(sample_rate);
    let mid = (taps - 1) as f64 / 2.0;
    let mut h = Vec::with_capacity(taps);
    for n in 0..taps {
        let x = n as f64 - mid;
        let sinc = if x == 0.0 {
            2.0 * fc
        } else {
            (2.0 * PI * fc * x).sin() / (PI * x)
        };
        h.push(sinc * hamming(n, taps));
    }
    let sum: f64 = h.iter().sum();
    for v in &mut h {
        *v /= sum;
    }
    Ok(h)
}

/// High-pass by spectral inversion of the matching low-pass.
pub fn design_highpass(cutoff_hz: f64, sample_rate: u32) -> Result<Vec<f64>> {
    let mut h = design_lowpass(cutoff_hz, sample_rate)?;
    for v in h.iter_mut() {
        *v = -*v;
    }
    let mid = (h.len() - 1) / 2;
    h[mid] += 1.0;
    Ok(h)
}

/// Magnitude of the filter's frequency response at `freq_hz`, evaluated
/// directly from the taps: `|sum_k h[k] e^{-j w k}|`.
pub fn response_magnitude(taps: &[f64], freq_hz: f64, sample_rate: u32) -> f64 {
    let w = 2.0 * PI * freq_hz / f64::from(sample_rate);
    let mut re = 0.0;
    let mut im = 0.0;
    for (k, &h) in taps.iter().enumerate() {
        let phase = w * k as f64;
        re += h * phase.cos();
        im -= h * phase.sin();
    }
    (re * re + im * im).sqrt()
}

pub fn response_db(taps: &[f64], freq_hz: f64, sample_rate: u32) -> f64 {
    20.0 * response_magnitude(taps, freq_hz, sample_rate).log10()
}

/// High-pass at `highpass_hz` cascaded with low-pass at `lowpass_hz`, with
/// the taps shared behind `Arc` so graphs can reference them cheaply.
#[derive(Debug, Clone)]
pub struct BandPassFilter {
    pub highpass_hz: f64,
    pub lowpass_hz: f64,
    pub sample_rate: u32,
    pub hp_taps: Arc<Vec<f64>>,
    pub lp_taps: Arc<Vec<f64>>,
}

impl BandPassFilter {
    pub fn design(highpass_hz: f64, lowpass_hz: f64, sample_rate: u32) -> Result<Self> {
        if !(0.0 < highpass_hz && highpass_hz < lowpass_hz
            && lowpass_hz < f64::from(sample_rate) / 2.0)
        {
            return Err(DearError::InvalidArgument(format!(
                "need 0 < highpass ({highpass_hz}) < lowpass ({lowpass_hz}) < nyquist"
            )));
        }
        Ok(Self {
            highpass_hz,
            lowpass_hz,
            sample_rate,
            hp_taps: Arc::new(design_highpass(highpass_hz, sample_rate)?),
            lp_taps: Arc::new(design_lowpass(lowpass_hz, sample_rate)?),
        })
    }

    /// Cascade magnitude response at `freq_hz`.
    pub fn cascade_magnitude(&self, freq_hz: f64) -> f64 {
        response_magnitude(&self.hp_taps, freq_hz, self.sample_rate)
            * response_magnitude(&self.lp_taps, freq_hz, self.sample_rate)
    }

    pub fn cascade_db(&self, freq_hz: f64) -> f64 {
        20.0 * self.cascade_magnitude(freq_hz).log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_count_is_odd_and_scales() {
        assert_eq!(tap_count(44_100), 511);
        assert_eq!(tap_count(22_050) % 2, 1);
        assert!(tap_count(22_050) < 511 / 2 + 10);
        assert!(tap_count(48_000) > 511);
    }

    #[test]
    fn lowpass_dc_gain_is_unity() {
        let h = design_lowpass(4_000.0, 44_100).unwrap();
        let dc: f64 = h.iter().sum();
        assert!((dc - 1.0).abs() < 1e-12);
        assert!((response_magnitude(&h, 0.0, 44_100) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lowpass_passband_and_stopband() {
        let h = design_lowpass(4_000.0, 44_100).unwrap();
        assert!(response_db(&h, 2_000.0, 44_100).abs() < 0.1);
        assert!(response_db(&h, 8_000.0, 44_100) < -50.0);
    }

    #[test]
    fn highpass_passband_and_stopband() {
        let h = design_highpass(1_000.0, 44_100).unwrap();
        assert!(response_db(&h, 100.0, 44_100) < -30.0);
        assert!(response_db(&h, 2_000.0, 44_100).abs() < 0.1);
        // nothing at DC
        assert!(response_magnitude(&h, 0.0, 44_100) < 1e-10);
    }

    #[test]
    fn cascade_rejects_bad_cutoffs() {
        assert!(BandPassFilter::design(4_000.0, 1_000.0, 44_100).is_err());
        assert!(BandPassFilter::design(0.0, 1_000.0, 44_100).is_err());
        assert!(BandPassFilter::design(1_000.0, 30_000.0, 44_100).is_err());
    }

    #[test]
    fn cascade_band_shape() {
        let f = BandPassFilter::design(1_000.0, 4_000.0, 44_100).unwrap();
        assert!(f.cascade_db(2_000.0).abs() < 0.2);
        assert!(f.cascade_db(500.0) < -30.0);
        assert!(f.cascade_db(8_000.0) < -30.0);
    }
}
