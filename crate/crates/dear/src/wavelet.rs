//! Single-level discrete wavelet transform and its exact inverse.
//!
//! The transform is the orthonormal Haar pair: analysis maps a length-N
//! signal to approximate and detail coefficient vectors of length N/2, and
//! synthesis reconstructs exactly. Both maps are linear and orthonormal, so
//! each backward pass (for gradient flow) is the opposite-direction
//! transform itself.

use crate::error::{DearError, Result};
use crate::signal::AudioSignal;

const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Wavelet family tag. Only Haar is implemented; the tag exists so
/// checkpoints are self-describing and other families can be added without
/// a format change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaveletFamily {
    Haar,
}

impl WaveletFamily {
    pub fn tag(self) -> u8 {
        match self {
            WaveletFamily::Haar => 0,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(WaveletFamily::Haar),
            other => Err(DearError::BadCheckpoint(format!(
                "unknown wavelet family tag {other}"
            ))),
        }
    }
}

/// Approximate (low-frequency) and detail (high-frequency) halves of a
/// single-level DWT. Both vectors have length `source_length / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientPair {
    pub approx: Vec<f64>,
    pub detail: Vec<f64>,
}

impl CoefficientPair {
    pub fn new(approx: Vec<f64>, detail: Vec<f64>) -> Result<Self> {
        if approx.len() != detail.len() {
            return Err(DearError::LengthMismatch {
                left: approx.len(),
                right: detail.len(),
            });
        }
        if approx.is_empty() {
            return Err(DearError::EmptyAudio);
        }
        Ok(Self { approx, detail })
    }

    pub fn source_length(&self) -> usize {
        self.approx.len() * 2
    }
}

/// Orthonormal Haar analysis on a raw even-length slice.
pub fn dwt_samples(samples: &[f64]) -> Result<CoefficientPair> {
    if samples.len() < 2 || samples.len() % 2 != 0 {
        return Err(DearError::InvalidArgument(format!(
            "dwt needs an even length >= 2, got {}",
            samples.len()
        )));
    }
    let half = samples.len() / 2;
    let mut approx = Vec::with_capacity(half);
    let mut detail = Vec::with_capacity(half);
    for pair in samples.chunks_exact(2) {
        approx.push((pair[0] + pair[1]) * SQRT_HALF);
        detail.push((pair[0] - pair[1]) * SQRT_HALF);
    }
    Ok(CoefficientPair { approx, detail })
}

/// Exact inverse of [`dwt_samples`].
pub fn idwt_samples(coeffs: &CoefficientPair) -> Vec<f64> {
    let mut out = Vec::with_capacity(coeffs.source_length());
    for (a, d) in coeffs.approx.iter().zip(&coeffs.detail) {
        out.push((a + d) * SQRT_HALF);
        out.push((a - d) * SQRT_HALF);
    }
    out
}

/// Analysis on an [`AudioSignal`].
pub fn dwt(signal: &AudioSignal) -> Result<CoefficientPair> {
    dwt_samples(signal.samples())
}

/// Synthesis back to an [`AudioSignal`].
pub fn idwt(coeffs: &CoefficientPair, sample_rate: u32) -> Result<AudioSignal> {
    AudioSignal::new(idwt_samples(coeffs), sample_rate)
}

/// Gradient of the analysis transform: the transpose of an orthonormal map
/// is its inverse, so this is synthesis applied to the coefficient grads.
pub fn dwt_backward(grad_approx: &[f64], grad_detail: &[f64]) -> Result<Vec<f64>> {
    let pair = CoefficientPair::new(grad_approx.to_vec(), grad_detail.to_vec())?;
    Ok(idwt_samples(&pair))
}

/// Gradient of the synthesis transform: analysis applied to the signal grad.
pub fn idwt_backward(grad_signal: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let pair = dwt_samples(grad_signal)?;
    Ok((pair.approx, pair.detail))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn energy(xs: &[f64]) -> f64 {
        xs.iter().map(|x| x * x).sum()
    }

    #[test]
    fn constant_signal_has_no_detail() {
        let c = 0.37;
        let pair = dwt_samples(&[c, c, c, c]).unwrap();
        for (a, d) in pair.approx.iter().zip(&pair.detail) {
            assert!((a - c * std::f64::consts::SQRT_2).abs() < 1e-15);
            assert_eq!(*d, 0.0);
        }
    }

    #[test]
    fn pure_difference() {
        let pair = dwt_samples(&[1.0, -1.0]).unwrap();
        assert!((pair.approx[0]).abs() < 1e-15);
        assert!((pair.detail[0] - std::f64::consts::SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn idwt_of_constant_approx() {
        let pair = CoefficientPair::new(vec![std::f64::consts::SQRT_2], vec![0.0]).unwrap();
        let out = idwt_samples(&pair);
        assert!((out[0] - 1.0).abs() < 1e-15);
        assert!((out[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn parseval_on_random_1024() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<f64> = (0..1024).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pair = dwt_samples(&samples).unwrap();
        let total = energy(&pair.approx) + energy(&pair.detail);
        let rel = (total - energy(&samples)).abs() / energy(&samples);
        assert!(rel < 1e-10, "Parseval relative error {rel}");
    }

    #[test]
    fn approx_perturbation_energy() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pair = dwt_samples(&samples).unwrap();
        let delta: Vec<f64> = (0..pair.approx.len())
            .map(|_| rng.gen_range(-0.01..0.01))
            .collect();
        let perturbed = CoefficientPair::new(
            pair.approx
                .iter()
                .zip(&delta)
                .map(|(a, d)| a + d)
                .collect(),
            pair.detail.clone(),
        )
        .unwrap();
        let out = idwt_samples(&perturbed);
        let diff_energy: f64 = out
            .iter()
            .zip(&samples)
            .map(|(y, x)| (y - x) * (y - x))
            .sum();
        let rel = (diff_energy - energy(&delta)).abs() / energy(&delta);
        assert!(rel < 1e-10, "energy relative error {rel}");
    }

    #[test]
    fn odd_length_rejected() {
        assert!(dwt_samples(&[1.0, 2.0, 3.0]).is_err());
        assert!(dwt_samples(&[1.0]).is_err());
    }

    #[test]
    fn delta_gradient_spreads_at_sqrt_half() {
        // Transpose of the analysis matrix: a unit grad on approx[0] and
        // detail[0] lands on sample 0 with weight 1/sqrt(2) each.
        let g = dwt_backward(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((g[0] - SQRT_HALF).abs() < 1e-15);
        assert!((g[1] - SQRT_HALF).abs() < 1e-15);
        let g = dwt_backward(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((g[0] - SQRT_HALF).abs() < 1e-15);
        assert!((g[1] + SQRT_HALF).abs() < 1e-15);
    }

    #[test]
    fn backward_pair_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let grad: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (ga, gd) = idwt_backward(&grad).unwrap();
        let back = dwt_backward(&ga, &gd).unwrap();
        for (a, b) in grad.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn perfect_reconstruction(seed in 0u64..500, half in 1usize..200) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<f64> = (0..half * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pair = dwt_samples(&samples).unwrap();
            let back = idwt_samples(&pair);
            for (a, b) in samples.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn linearity(seed in 0u64..500) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 64;
            let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let mixed: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| a * x + b * y).collect();
            let lhs = dwt_samples(&mixed).unwrap();
            let px = dwt_samples(&xs).unwrap();
            let py = dwt_samples(&ys).unwrap();
            for k in 0..n / 2 {
                prop_assert!((lhs.approx[k] - (a * px.approx[k] + b * py.approx[k])).abs() < 1e-10);
                prop_assert!((lhs.detail[k] - (a * px.detail[k] + b * py.detail[k])).abs() < 1e-10);
            }
        }
    }
}
