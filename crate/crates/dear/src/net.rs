//! The watermark encoder, decoder, and discriminator: fully convolutional
//! 1D networks operating on approximate DWT coefficients.
//!
//! The encoder keeps feature-map length unchanged and produces a residual
//! that is scaled by the strength factor and added onto the carrier
//! coefficients. The decoder downsamples with strided convolutions and
//! averages per watermark-bit block. Encoder and decoder re-concatenate
//! their initial input at every block; the discriminator is a plain conv
//! stack ending in a global mean and a sigmoid.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{DearError, Result};
use crate::grad::kernels::block_bounds;
use crate::grad::{AdamCheckpoint, Checkpoint, Graph, Tensor, Var};
use crate::signal::{AudioSignal, SoftWatermark, Watermark};
use crate::wavelet::{self, WaveletFamily};

/// Layer counts, widths, and kernel sizes; persisted with the model so a
/// checkpoint is self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub enc_blocks: usize,
    pub enc_channels: usize,
    pub enc_kernel: usize,
    pub dec_blocks: usize,
    pub dec_channels: usize,
    pub dec_kernel: usize,
    pub dec_downsamples: usize,
    pub disc_blocks: usize,
    pub disc_channels: usize,
    pub disc_kernel: usize,
    pub disc_downsamples: usize,
    pub leaky_slope: f64,
    /// Init gain on the encoder's output layer. The fresh residual must
    /// sit above the channel noise floor or the fidelity term shrinks it
    /// to nothing before the decoder can latch onto it.
    #[serde(default = "default_output_gain")]
    pub enc_output_init_gain: f64,
}

fn default_output_gain() -> f64 {
    8.0
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        Self {
            enc_blocks: 4,
            enc_channels: 32,
            enc_kernel: 9,
            dec_blocks: 4,
            dec_channels: 32,
            dec_kernel: 9,
            dec_downsamples: 4,
            disc_blocks: 3,
            disc_channels: 32,
            disc_kernel: 9,
            disc_downsamples: 3,
            leaky_slope: 0.2,
            enc_output_init_gain: default_output_gain(),
        }
    }
}

/// Probability clamp used before the adversarial log terms.
pub const PROB_EPS: f64 = 1e-6;

/// One conv layer's parameters.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvParams {
    fn init(c_in: usize, c_out: usize, kernel: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        // fan-in scaled uniform init, biases zero
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let dist = rand::distributions::Uniform::new_inclusive(-bound, bound);
        let data = (0..c_out * c_in * kernel)
            .map(|_| dist.sample(rng))
            .collect();
        Self {
            weight: Tensor::from_vec(c_out, c_in * kernel, data).expect("init shape"),
            bias: Tensor::zeros(c_out, 1),
            c_in,
            c_out,
            kernel,
            stride,
        }
    }
}

/// An ordered conv stack; the meaning of each layer comes from the
/// architecture descriptor.
#[derive(Debug, Clone)]
pub struct NetParams {
    pub layers: Vec<ConvParams>,
}

/// Graph handles for one network's parameters.
pub struct NetVars {
    pub layers: Vec<(Var, Var)>,
}

impl NetParams {
    pub fn to_vars(&self, g: &mut Graph, requires_grad: bool) -> NetVars {
        NetVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        g.leaf(l.weight.clone(), requires_grad),
                        g.leaf(l.bias.clone(), requires_grad),
                    )
                })
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }
}

fn encoder_params(arch: &ArchDescriptor, rng: &mut ChaCha8Rng) -> NetParams {
    let (c, k) = (arch.enc_channels, arch.enc_kernel);
    let mut layers = vec![ConvParams::init(2, c, k, 1, rng)];
    for _ in 1..arch.enc_blocks {
        layers.push(ConvParams::init(c + 2, c, k, 1, rng));
    }
    let mut out = ConvParams::init(c + 2, 1, k, 1, rng);
    out.weight = out.weight.map(|v| v * arch.enc_output_init_gain);
    layers.push(out);
    NetParams { layers }
}

fn decoder_params(arch: &ArchDescriptor, rng: &mut ChaCha8Rng) -> NetParams {
    let (c, k) = (arch.dec_channels, arch.dec_kernel);
    let mut layers = vec![ConvParams::init(1, c, k, 1, rng)];
    for _ in 1..arch.dec_blocks {
        layers.push(ConvParams::init(c + 1, c, k, 1, rng));
    }
    for _ in 0..arch.dec_downsamples {
        layers.push(ConvParams::init(c, c, k, 2, rng));
    }
    layers.push(ConvParams::init(c, 1, k, 1, rng));
    NetParams { layers }
}

fn discriminator_params(arch: &ArchDescriptor, rng: &mut ChaCha8Rng) -> NetParams {
    let (c, k) = (arch.disc_channels, arch.disc_kernel);
    let mut layers = vec![ConvParams::init(1, c, k, 1, rng)];
    for _ in 1..arch.disc_blocks {
        layers.push(ConvParams::init(c, c, k, 1, rng));
    }
    for _ in 0..arch.disc_downsamples {
        layers.push(ConvParams::init(c, c, k, 2, rng));
    }
    layers.push(ConvParams::init(c, 1, k, 1, rng));
    NetParams { layers }
}

/// Tile the watermark bits across `target_len` positions in contiguous
/// order-preserving blocks (earlier bits get the larger blocks when the
/// length does not divide evenly).
pub fn fuse_watermark(w: &Watermark, target_len: usize) -> Result<Tensor> {
    if w.len() > target_len {
        return Err(DearError::InvalidArgument(format!(
            "watermark length {} exceeds target length {target_len}",
            w.len()
        )));
    }
    let bounds = block_bounds(target_len, w.len());
    let mut data = vec![0.0; target_len];
    for (i, &bit) in w.bits().iter().enumerate() {
        for v in &mut data[bounds[i]..bounds[i + 1]] {
            *v = f64::from(bit);
        }
    }
    Tensor::from_vec(1, target_len, data)
}

/// Encoder forward: watermark-conditioned residual in `[-1, 1]`, same
/// length as the carrier, with skip re-concatenation of the (carrier,
/// watermark) pair at every block. `skip_connections` exists for the
/// wiring ablation and is on in normal use.
pub fn encoder_forward(
    g: &mut Graph,
    arch: &ArchDescriptor,
    vars: &NetVars,
    a_ac: Var,
    w_channel: Var,
    skip_connections: bool,
) -> Result<Var> {
    let x0 = g.concat_channels(a_ac, w_channel)?;
    let (w0, b0) = vars.layers[0];
    let mut h = g.conv1d(x0, w0, Some(b0), arch.enc_kernel, 1)?;
    h = g.leaky_relu(h, arch.leaky_slope);
    for &(w, b) in &vars.layers[1..arch.enc_blocks] {
        let input = if skip_connections {
            g.concat_channels(h, x0)?
        } else {
            h
        };
        h = g.conv1d(input, w, Some(b), arch.enc_kernel, 1)?;
        h = g.leaky_relu(h, arch.leaky_slope);
    }
    let (wf, bf) = vars.layers[arch.enc_blocks];
    let input = if skip_connections {
        g.concat_channels(h, x0)?
    } else {
        h
    };
    let out = g.conv1d(input, wf, Some(bf), arch.enc_kernel, 1)?;
    Ok(g.tanh(out))
}

/// Watermarked coefficients as a graph node:
/// `strength * encoder(a_ac, w) + a_ac`.
pub fn embed_forward(
    g: &mut Graph,
    arch: &ArchDescriptor,
    vars: &NetVars,
    a_ac: Var,
    w_channel: Var,
    strength: f64,
) -> Result<Var> {
    let residual = encoder_forward(g, arch, vars, a_ac, w_channel, true)?;
    let scaled = g.mul_scalar(residual, strength);
    g.add(scaled, a_ac)
}

/// Decoder forward: conv stack with skip re-concatenation, strided
/// downsampling, projection to one channel, balanced per-bit block mean,
/// tanh.
pub fn decoder_forward(
    g: &mut Graph,
    arch: &ArchDescriptor,
    vars: &NetVars,
    coeffs: Var,
    watermark_len: usize,
) -> Result<Var> {
    let x0 = coeffs;
    let (w0, b0) = vars.layers[0];
    let mut h = g.conv1d(x0, w0, Some(b0), arch.dec_kernel, 1)?;
    h = g.leaky_relu(h, arch.leaky_slope);
    for &(w, b) in &vars.layers[1..arch.dec_blocks] {
        let input = g.concat_channels(h, x0)?;
        h = g.conv1d(input, w, Some(b), arch.dec_kernel, 1)?;
        h = g.leaky_relu(h, arch.leaky_slope);
    }
    let ds = &vars.layers[arch.dec_blocks..arch.dec_blocks + arch.dec_downsamples];
    for &(w, b) in ds {
        h = g.conv1d(h, w, Some(b), arch.dec_kernel, 2)?;
        h = g.leaky_relu(h, arch.leaky_slope);
    }
    let (wf, bf) = vars.layers[arch.dec_blocks + arch.dec_downsamples];
    let proj = g.conv1d(h, wf, Some(bf), arch.dec_kernel, 1)?;
    if g.value(proj).len() < watermark_len {
        return Err(DearError::InvalidArgument(format!(
            "input too short: {} positions left for {} bits",
            g.value(proj).len(),
            watermark_len
        )));
    }
    let pooled = g.block_mean(proj, watermark_len)?;
    Ok(g.tanh(pooled))
}

/// Discriminator forward: probability in `(0, 1)` that the coefficients
/// carry no watermark (the convention the adversarial losses train it
/// toward).
pub fn discriminator_forward(
    g: &mut Graph,
    arch: &ArchDescriptor,
    vars: &NetVars,
    coeffs: Var,
) -> Result<Var> {
    let (w0, b0) = vars.layers[0];
    let mut h = g.conv1d(coeffs, w0, Some(b0), arch.disc_kernel, 1)?;
    h = g.leaky_relu(h, arch.leaky_slope);
    for &(w, b) in &vars.layers[1..arch.disc_blocks] {
        h = g.conv1d(h, w, Some(b), arch.disc_kernel, 1)?;
        h = g.leaky_relu(h, arch.leaky_slope);
    }
    let ds = &vars.layers[arch.disc_blocks..arch.disc_blocks + arch.disc_downsamples];
    for &(w, b) in ds {
        h = g.conv1d(h, w, Some(b), arch.disc_kernel, 2)?;
        h = g.leaky_relu(h, arch.leaky_slope);
    }
    let (wf, bf) = vars.layers[arch.disc_blocks + arch.disc_downsamples];
    let proj = g.conv1d(h, wf, Some(bf), arch.disc_kernel, 1)?;
    let mean = g.mean_over_length(proj);
    Ok(g.sigmoid(mean))
}

/// Encoder/decoder/discriminator parameters plus the strength factor and
/// the segmentation geometry; everything needed to embed and extract.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub arch: ArchDescriptor,
    pub encoder: NetParams,
    pub decoder: NetParams,
    pub discriminator: NetParams,
    pub strength: f64,
    pub watermark_len: usize,
    pub segment_len: usize,
    pub sample_rate: u32,
    pub wavelet: WaveletFamily,
    pub trained_steps: u64,
}

impl ModelBundle {
    pub fn new_random(
        arch: ArchDescriptor,
        watermark_len: usize,
        segment_len: usize,
        sample_rate: u32,
        seed: u64,
    ) -> Result<Self> {
        if segment_len % 2 != 0 || segment_len < 2 {
            return Err(DearError::InvalidArgument(
                "segment length must be even and >= 2".into(),
            ));
        }
        if watermark_len < 1 || watermark_len > segment_len / 2 {
            return Err(DearError::InvalidArgument(format!(
                "watermark length must be in 1..={}",
                segment_len / 2
            )));
        }
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            encoder: encoder_params(&arch, &mut rng),
            decoder: decoder_params(&arch, &mut rng),
            discriminator: discriminator_params(&arch, &mut rng),
            arch,
            strength: 1.0,
            watermark_len,
            segment_len,
            sample_rate,
            wavelet: WaveletFamily::Haar,
            trained_steps: 0,
        })
    }

    /// Residual for one segment's approximate coefficients, before the
    /// strength factor.
    pub fn encode_residual(&self, a_ac: &[f64], w: &Watermark) -> Result<Vec<f64>> {
        if w.len() != self.watermark_len {
            return Err(DearError::LengthMismatch {
                left: w.len(),
                right: self.watermark_len,
            });
        }
        let mut g = Graph::new();
        let vars = self.encoder.to_vars(&mut g, false);
        let a = g.constant(Tensor::from_vec(1, a_ac.len(), a_ac.to_vec())?);
        let wc = g.constant(fuse_watermark(w, a_ac.len())?);
        let r = encoder_forward(&mut g, &self.arch, &vars, a, wc, true)?;
        Ok(g.value(r).data().to_vec())
    }

    /// Watermarked coefficients `a_ac + strength * residual`.
    pub fn embed_coeffs(&self, a_ac: &[f64], w: &Watermark, strength: f64) -> Result<Vec<f64>> {
        let residual = self.encode_residual(a_ac, w)?;
        Ok(a_ac
            .iter()
            .zip(&residual)
            .map(|(a, r)| a + strength * r)
            .collect())
    }

    /// Soft watermark from one segment's (possibly attacked) approximate
    /// coefficients.
    pub fn decode_coeffs(&self, coeffs: &[f64]) -> Result<SoftWatermark> {
        let mut g = Graph::new();
        let vars = self.decoder.to_vars(&mut g, false);
        let c = g.constant(Tensor::from_vec(1, coeffs.len(), coeffs.to_vec())?);
        let soft = decoder_forward(&mut g, &self.arch, &vars, c, self.watermark_len)?;
        Ok(SoftWatermark::new(g.value(soft).data().to_vec()))
    }

    /// Discriminator probability for one segment's coefficients, clamped
    /// into `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn discriminate_coeffs(&self, coeffs: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.discriminator.to_vars(&mut g, false);
        let c = g.constant(Tensor::from_vec(1, coeffs.len(), coeffs.to_vec())?);
        let p = discriminator_forward(&mut g, &self.arch, &vars, c)?;
        Ok(g.value(p).item().clamp(PROB_EPS, 1.0 - PROB_EPS))
    }

    /// Embed into one segment: analysis, residual on the approximate
    /// coefficients, synthesis with the original detail coefficients.
    pub fn embed_segment(
        &self,
        segment: &AudioSignal,
        w: &Watermark,
        strength: f64,
    ) -> Result<AudioSignal> {
        let pair = wavelet::dwt(segment)?;
        let marked = self.embed_coeffs(&pair.approx, w, strength)?;
        let out = wavelet::CoefficientPair::new(marked, pair.detail)?;
        wavelet::idwt(&out, segment.sample_rate())
    }

    /// Embed the same watermark into every segment of a longer signal;
    /// returns the watermarked audio trimmed to the original length and
    /// the segment count.
    pub fn embed_audio(
        &self,
        audio: &AudioSignal,
        w: &Watermark,
        strength: f64,
    ) -> Result<(AudioSignal, usize)> {
        let segments = crate::signal::segment(audio, self.segment_len)?;
        let marked: Vec<AudioSignal> = segments
            .iter()
            .map(|s| self.embed_segment(s, w, strength))
            .collect::<Result<_>>()?;
        let out = crate::signal::concat_segments(&marked, audio.len())?;
        Ok((out, segments.len()))
    }

    /// Decode one segment.
    pub fn decode_segment(&self, segment: &AudioSignal) -> Result<SoftWatermark> {
        let pair = wavelet::dwt(segment)?;
        self.decode_coeffs(&pair.approx)
    }

    /// Decode a longer signal: per-segment soft values averaged across
    /// segments (soft majority vote).
    pub fn decode_audio(&self, audio: &AudioSignal) -> Result<SoftWatermark> {
        let segments = crate::signal::segment(audio, self.segment_len)?;
        let mut acc = vec![0.0; self.watermark_len];
        for seg in &segments {
            let soft = self.decode_segment(seg)?;
            for (a, v) in acc.iter_mut().zip(soft.values()) {
                *a += v;
            }
        }
        let n = segments.len() as f64;
        Ok(SoftWatermark::new(acc.into_iter().map(|v| v / n).collect()))
    }

    /// Flat parameter order used for optimization and checkpoints:
    /// encoder, decoder, then discriminator layers implied by the arch.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, net) in [
            ("encoder", &self.encoder),
            ("decoder", &self.decoder),
            ("discriminator", &self.discriminator),
        ] {
            for (i, layer) in net.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &layer.weight));
                out.push((format!("{prefix}.{i}.bias"), &layer.bias));
            }
        }
        out
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "dear-model",
            "arch": self.arch,
            "strength": self.strength,
            "watermark_len": self.watermark_len,
            "segment_len": self.segment_len,
            "sample_rate": self.sample_rate,
            "wavelet": self.wavelet.tag(),
            "trained_steps": self.trained_steps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_adam(path, None)
    }

    pub fn save_with_adam(&self, path: &Path, adam: Option<AdamCheckpoint>) -> Result<()> {
        let ck = Checkpoint {
            meta: self.meta(),
            tensors: self
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
            adam,
        };
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (bundle, _) = Self::load_with_adam(path)?;
        Ok(bundle)
    }

    pub fn load_with_adam(path: &Path) -> Result<(Self, Option<AdamCheckpoint>)> {
        let ck = Checkpoint::load(path)?;
        let meta = &ck.meta;
        if meta["kind"] != "dear-model" {
            return Err(DearError::BadCheckpoint(
                "not a model checkpoint".to_string(),
            ));
        }
        let arch: ArchDescriptor = serde_json::from_value(meta["arch"].clone())
            .map_err(|e| DearError::BadCheckpoint(format!("bad arch descriptor: {e}")))?;
        let get_usize = |key: &str| -> Result<usize> {
            meta[key]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| DearError::BadCheckpoint(format!("missing {key}")))
        };
        let watermark_len = get_usize("watermark_len")?;
        let segment_len = get_usize("segment_len")?;
        let sample_rate = get_usize("sample_rate")? as u32;
        let strength = meta["strength"].as_f64().unwrap_or(1.0);
        let trained_steps = meta["trained_steps"].as_u64().unwrap_or(0);
        let wavelet = WaveletFamily::from_tag(meta["wavelet"].as_u64().unwrap_or(0) as u8)?;

        let mut template = Self::new_random(arch, watermark_len, segment_len, sample_rate, 0)?;
        for (prefix, net) in [
            ("encoder", &mut template.encoder),
            ("decoder", &mut template.decoder),
            ("discriminator", &mut template.discriminator),
        ] {
            for (i, layer) in net.layers.iter_mut().enumerate() {
                let w = ck.tensor(&format!("{prefix}.{i}.weight"))?;
                let b = ck.tensor(&format!("{prefix}.{i}.bias"))?;
                if !w.same_shape(&layer.weight) || !b.same_shape(&layer.bias) {
                    return Err(DearError::BadCheckpoint(format!(
                        "{prefix}.{i} shape does not match architecture"
                    )));
                }
                layer.weight = w.clone();
                layer.bias = b.clone();
            }
        }
        template.strength = strength;
        template.trained_steps = trained_steps;
        template.wavelet = wavelet;
        Ok((template, ck.adam))
    }
}
