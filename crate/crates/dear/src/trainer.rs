//! Joint end-to-end training of encoder, decoder, and discriminator
//! through the full pipeline: analysis, residual embedding, synthesis,
//! simulated re-recording, analysis again, extraction.
//!
//! Each batch takes one Adam step on encoder + decoder against the
//! weighted composite loss, then one separate Adam step on the
//! discriminator with the watermarked coefficients treated as constant
//! data.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::channel::{self, DarStages, DistortionConfig, EnhancedOp, IrSet};
use crate::error::{DearError, Result};
use crate::grad::{AdamCheckpoint, AdamState, Graph, Tensor, Var};
use crate::net::{
    decoder_forward, discriminator_forward, embed_forward, fuse_watermark, ModelBundle, NetVars,
    PROB_EPS,
};
use crate::signal::{self, AudioSignal, Watermark};

/// Direction of the encoder's adversarial term. `Literal` minimizes
/// `log(1 - D(marked))`, which under the discriminator objective below
/// pushes the discriminator's output on marked coefficients toward its
/// clean-audio response. `Flipped` minimizes the negated term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdvSign {
    #[default]
    Literal,
    Flipped,
}

/// Which distortion the training forward pass applies between embedding
/// and extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistortionMode {
    /// The full re-recording pipeline.
    #[default]
    Rerecording,
    /// Per batch, one of {re-recording, resample, dropout, amplitude,
    /// requantize, median filter} chosen uniformly.
    Enhanced,
    /// No distortion (identity channel).
    None,
}

#[derive(Debug, Clone)]
pub struct TrainingConfig {
    pub lambda_e: f64,
    pub lambda_d: f64,
    pub lambda_w: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub segment_len: usize,
    pub watermark_len: usize,
    pub sample_rate: u32,
    pub seed: u64,
    pub distortion: DistortionMode,
    pub dar_stages: DarStages,
    pub adv_sign: AdvSign,
    pub noise_snr_db: (f64, f64),
    pub highpass_hz: f64,
    pub lowpass_hz: f64,
    /// Directory of impulse-response WAVs, or None for a synthetic set.
    pub ir_dir: Option<std::path::PathBuf>,
    pub ir_count: usize,
    pub val_fraction: f64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    pub max_steps: Option<u64>,
    /// Early-stop targets checked at each evaluation; training stops when
    /// all configured targets are met.
    pub target_clean_acc: Option<f64>,
    pub target_dar_acc: Option<f64>,
    pub target_snr_db: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda_e: 150.0,
            lambda_d: 0.01,
            lambda_w: 1.0,
            learning_rate: 1e-4,
            batch_size: 8,
            epochs: 10,
            segment_len: 16_384,
            watermark_len: 16,
            sample_rate: 44_100,
            seed: 0,
            distortion: DistortionMode::Rerecording,
            dar_stages: DarStages::ALL,
            adv_sign: AdvSign::Literal,
            noise_snr_db: DistortionConfig::DEFAULT_NOISE_SNR_DB,
            highpass_hz: DistortionConfig::DEFAULT_HIGHPASS_HZ,
            lowpass_hz: DistortionConfig::DEFAULT_LOWPASS_HZ,
            ir_dir: None,
            ir_count: 8,
            val_fraction: 0.05,
            eval_interval: 25,
            checkpoint_interval: 200,
            max_steps: None,
            target_clean_acc: None,
            target_dar_acc: None,
            target_snr_db: None,
        }
    }
}

impl TrainingConfig {
    /// Validate field invariants.
    pub fn validate(&self) -> Result<()> {
        if self.lambda_e < 0.0 || self.lambda_d < 0.0 || self.lambda_w < 0.0 {
            return Err(DearError::InvalidArgument("lambdas must be >= 0".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(DearError::InvalidArgument(
                "learning_rate must be > 0".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(DearError::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.segment_len < 2 || self.segment_len % 2 != 0 {
            return Err(DearError::InvalidArgument(
                "segment_len must be even and >= 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(DearError::InvalidArgument(
                "val_fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Parse the flat `key = value` config format. Lines starting with `#`
    /// and blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainingConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| DearError::Config {
                line,
                message: format!("expected 'key = value', got '{trimmed}'"),
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |message: String| DearError::Config { line, message };
            let as_f64 =
                |v: &str| -> Result<f64> { v.parse().map_err(|_| bad(format!("bad number '{v}'"))) };
            let as_u64 =
                |v: &str| -> Result<u64> { v.parse().map_err(|_| bad(format!("bad integer '{v}'"))) };
            match key {
                "lambda_e" => cfg.lambda_e = as_f64(value)?,
                "lambda_d" => cfg.lambda_d = as_f64(value)?,
                "lambda_w" => cfg.lambda_w = as_f64(value)?,
                "learning_rate" => cfg.learning_rate = as_f64(value)?,
                "batch_size" => cfg.batch_size = as_u64(value)? as usize,
                "epochs" => cfg.epochs = as_u64(value)? as usize,
                "segment_len" => cfg.segment_len = as_u64(value)? as usize,
                "watermark_len" => cfg.watermark_len = as_u64(value)? as usize,
                "sample_rate" => cfg.sample_rate = as_u64(value)? as u32,
                "seed" => cfg.seed = as_u64(value)?,
                "distortion" => {
                    cfg.distortion = match value {
                        "dar" | "rerecording" => DistortionMode::Rerecording,
                        "enhanced" => DistortionMode::Enhanced,
                        "none" => DistortionMode::None,
                        other => return Err(bad(format!("unknown distortion '{other}'"))),
                    }
                }
                "ablate" => {
                    cfg.dar_stages = match value {
                        "none" => DarStages::ALL,
                        "er" => DarStages::without_reverb(),
                        "bf" => DarStages::without_band_pass(),
                        "gn" => DarStages::without_noise(),
                        other => return Err(bad(format!("unknown ablation '{other}'"))),
                    }
                }
                "adv_sign" => {
                    cfg.adv_sign = match value {
                        "literal" => AdvSign::Literal,
                        "flipped" => AdvSign::Flipped,
                        other => return Err(bad(format!("unknown adv_sign '{other}'"))),
                    }
                }
                "noise_snr_min" => cfg.noise_snr_db.0 = as_f64(value)?,
                "noise_snr_max" => cfg.noise_snr_db.1 = as_f64(value)?,
                "highpass_hz" => cfg.highpass_hz = as_f64(value)?,
                "lowpass_hz" => cfg.lowpass_hz = as_f64(value)?,
                "ir_dir" => {
                    cfg.ir_dir = if value == "synthetic" {
                        None
                    } else {
                        Some(value.into())
                    }
                }
                "ir_count" => cfg.ir_count = as_u64(value)? as usize,
                "val_fraction" => cfg.val_fraction = as_f64(value)?,
                "eval_interval" => cfg.eval_interval = as_u64(value)?,
                "checkpoint_interval" => cfg.checkpoint_interval = as_u64(value)?,
                "max_steps" => cfg.max_steps = Some(as_u64(value)?),
                "target_clean_acc" => cfg.target_clean_acc = Some(as_f64(value)?),
                "target_dar_acc" => cfg.target_dar_acc = Some(as_f64(value)?),
                "target_snr_db" => cfg.target_snr_db = Some(as_f64(value)?),
                other => {
                    return Err(bad(format!("unknown key '{other}'")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn build_distortion(&self) -> Result<DistortionConfig> {
        let ir_set = match &self.ir_dir {
            Some(dir) => IrSet::load_dir(dir, channel::DEFAULT_IR_MAX_LEN)?,
            None => {
                let mut ir_rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x1225_92F2_9B74_2D2E);
                IrSet::synthetic(&mut ir_rng, self.ir_count, self.sample_rate)?
            }
        };
        let mut d = DistortionConfig::with_band(
            self.sample_rate,
            ir_set,
            self.highpass_hz,
            self.lowpass_hz,
            self.noise_snr_db,
        )?;
        if self.distortion == DistortionMode::Enhanced {
            d = d.with_enhanced(EnhancedOp::ALL.to_vec());
        }
        Ok(d)
    }
}

/// Per-step losses.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss_encoder: f64,
    pub loss_adversarial: f64,
    pub loss_watermark: f64,
    pub loss_total: f64,
    pub loss_discriminator: f64,
    pub distortion: String,
}

/// Held-out metrics at one evaluation point.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRecord {
    pub step: u64,
    pub snr_db: f64,
    pub clean_acc: f64,
    pub dar_acc: f64,
}

/// Everything a training run produced besides the model.
#[derive(Debug, Clone, Default)]
pub struct TrainingRecord {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub best_eval: Option<EvalRecord>,
}

/// Eq. 3's mean-square distance between carrier and marked coefficients:
/// the mean over the N/2 coefficient positions.
pub fn encoder_loss(g: &mut Graph, a_ac: Var, a_ac_w: Var) -> Result<Var> {
    g.mse(a_ac, a_ac_w)
}

/// MSE between the embedded bits and the soft extraction.
pub fn watermark_loss(g: &mut Graph, target: Var, soft: Var) -> Result<Var> {
    g.mse(target, soft)
}

/// The two adversarial scalars from clamped probabilities:
/// the encoder term `log(1 - d_fake)` and the discriminator objective
/// `log(1 - d_real) + log(d_fake)`, both minimized as written.
pub fn adversarial_losses(d_real: f64, d_fake: f64) -> (f64, f64) {
    let dr = d_real.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let df = d_fake.clamp(PROB_EPS, 1.0 - PROB_EPS);
    ((1.0 - df).ln(), (1.0 - dr).ln() + df.ln())
}

/// Weighted total `lambda_e*Le + lambda_d*Ld + lambda_w*Lw`.
pub fn total_loss(le: f64, ld: f64, lw: f64, config: &TrainingConfig) -> f64 {
    config.lambda_e * le + config.lambda_d * ld + config.lambda_w * lw
}

/// Held-out metrics for a set of segments: embedding SNR, clean extraction
/// accuracy, and accuracy through the re-recording channel.
pub fn evaluate_model(
    model: &ModelBundle,
    segments: &[Vec<f64>],
    distortion: &DistortionConfig,
    stages: DarStages,
    seed: u64,
) -> Result<EvalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut snr_sum = 0.0;
    let mut clean_sum = 0.0;
    let mut dar_sum = 0.0;
    for seg_data in segments {
        let w = Watermark::random(model.watermark_len, &mut rng);
        let seg = AudioSignal::new(seg_data.clone(), model.sample_rate)?;
        let marked = model.embed_segment(&seg, &w, 1.0)?;
        let snr = signal::snr(&seg, &marked)?;
        snr_sum += snr.min(200.0);

        let clean_soft = model.decode_segment(&marked)?;
        clean_sum += signal::bit_accuracy(&w, &clean_soft)?;

        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(1, marked.len(), marked.samples().to_vec())?);
        let attacked = channel::dar_with_stages(&mut g, x, distortion, stages, &mut rng)?;
        let attacked_sig = AudioSignal::new(g.value(attacked).data().to_vec(), model.sample_rate)?;
        let dar_soft = model.decode_segment(&attacked_sig)?;
        dar_sum += signal::bit_accuracy(&w, &dar_soft)?;
    }
    let n = segments.len() as f64;
    Ok(EvalRecord {
        step: 0,
        snr_db: snr_sum / n,
        clean_acc: clean_sum / n,
        dar_acc: dar_sum / n,
    })
}

/// One training run's mutable state.
pub struct Trainer {
    pub model: ModelBundle,
    pub config: TrainingConfig,
    pub distortion: DistortionConfig,
    main_adam: AdamState,
    disc_adam: AdamState,
    rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: ModelBundle, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        if model.watermark_len != config.watermark_len
            || model.segment_len != config.segment_len
        {
            return Err(DearError::InvalidArgument(
                "model and config disagree on segment/watermark lengths".into(),
            ));
        }
        let distortion = config.build_distortion()?;
        let main_shapes = main_param_shapes(&model);
        let disc_shapes: Vec<_> = model
            .discriminator
            .layers
            .iter()
            .flat_map(|l| [l.weight.shape(), l.bias.shape()])
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            main_adam: AdamState::new(&main_shapes, config.learning_rate),
            disc_adam: AdamState::new(&disc_shapes, config.learning_rate),
            rng,
            step: 0,
            model,
            config,
            distortion,
        })
    }

    /// Restore a trainer whose model and Adam state were saved by
    /// [`Trainer::save_checkpoint`]; the step counter continues.
    pub fn resume(path: &Path, config: TrainingConfig) -> Result<Self> {
        let (model, adam) = ModelBundle::load_with_adam(path)?;
        let mut t = Self::new(model, config)?;
        if let Some(ck) = adam {
            let split = main_param_count(&t.model);
            let mut main = ck.clone();
            let disc_moments = main.moments.split_off(split);
            t.step = main.step;
            t.main_adam = AdamCheckpoint {
                moments: main.moments,
                ..main
            }
            .into_state();
            t.disc_adam = AdamCheckpoint {
                moments: disc_moments,
                ..ck
            }
            .into_state();
            // the two optimizers share one step counter in the checkpoint
            t.main_adam.step = t.step;
            t.disc_adam.step = t.step;
        }
        Ok(t)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let names: Vec<String> = self
            .model
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let split = main_param_count(&self.model);
        let mut moments = AdamCheckpoint::from_state(&self.main_adam, &names[..split]).moments;
        moments.extend(AdamCheckpoint::from_state(&self.disc_adam, &names[split..]).moments);
        let adam = AdamCheckpoint {
            step: self.step,
            learning_rate: self.main_adam.learning_rate,
            beta1: self.main_adam.beta1,
            beta2: self.main_adam.beta2,
            epsilon: self.main_adam.epsilon,
            moments,
        };
        self.model.save_with_adam(path, Some(adam))
    }

    /// One optimization step on a batch of equal-length audio segments:
    /// encoder+decoder update against the composite loss, then a
    /// discriminator update with the marked coefficients as constants.
    pub fn train_step(&mut self, batch: &[&[f64]]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(DearError::InvalidArgument("empty batch".into()));
        }
        let inv_batch = 1.0 / batch.len() as f64;
        let half = self.config.segment_len / 2;

        // Enhanced mode picks one distortion per mini-batch.
        let batch_tag = match self.config.distortion {
            DistortionMode::Rerecording => "dar",
            DistortionMode::None => "none",
            DistortionMode::Enhanced => {
                let arms = 1 + self.distortion.enhanced_ops.len();
                let pick = self.rng.gen_range(0..arms);
                if pick == 0 {
                    "dar"
                } else {
                    self.distortion.enhanced_ops[pick - 1].tag()
                }
            }
        };

        let mut main_grads = zero_grads(&main_param_shapes(&self.model));
        let mut disc_grads = zero_grads(
            &self
                .model
                .discriminator
                .layers
                .iter()
                .flat_map(|l| [l.weight.shape(), l.bias.shape()])
                .collect::<Vec<_>>(),
        );
        let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0); // le, ld, lw, total, l_disc
        let mut marked_store: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(batch.len());

        for seg in batch {
            if seg.len() != self.config.segment_len {
                return Err(DearError::LengthMismatch {
                    left: seg.len(),
                    right: self.config.segment_len,
                });
            }
            let w = Watermark::random(self.config.watermark_len, &mut self.rng);

            let mut g = Graph::new();
            let enc_vars = self.model.encoder.to_vars(&mut g, true);
            let dec_vars = self.model.decoder.to_vars(&mut g, true);
            let disc_vars = self.model.discriminator.to_vars(&mut g, false);

            let audio = g.constant(Tensor::from_vec(1, seg.len(), seg.to_vec())?);
            let coeffs = g.dwt(audio)?;
            let a_ac = g.slice_channels(coeffs, 0, 1)?;
            let a_dc = g.slice_channels(coeffs, 1, 1)?;
            let w_channel = g.constant(fuse_watermark(&w, half)?);

            // training always embeds at unit strength
            let a_ac_w = embed_forward(&mut g, &self.model.arch, &enc_vars, a_ac, w_channel, 1.0)?;

            let marked_pair = g.concat_channels(a_ac_w, a_dc)?;
            let marked_audio = g.idwt(marked_pair)?;

            let attacked = self.apply_batch_distortion(&mut g, marked_audio, batch_tag)?;
            let attacked_coeffs = g.dwt(attacked)?;
            let attacked_ac = g.slice_channels(attacked_coeffs, 0, 1)?;

            let soft = decoder_forward(
                &mut g,
                &self.model.arch,
                &dec_vars,
                attacked_ac,
                self.config.watermark_len,
            )?;

            let target = g.constant(Tensor::from_vec(
                1,
                w.len(),
                w.bits().iter().map(|&b| f64::from(b)).collect(),
            )?);
            let le = encoder_loss(&mut g, a_ac, a_ac_w)?;
            let lw = watermark_loss(&mut g, target, soft)?;

            let d_fake = discriminator_forward(&mut g, &self.model.arch, &disc_vars, a_ac_w)?;
            let d_fake_c = g.clamp(d_fake, PROB_EPS, 1.0 - PROB_EPS);
            let one_minus = g.affine(d_fake_c, -1.0, 1.0);
            let ld_literal = g.log(one_minus)?;
            let ld = match self.config.adv_sign {
                AdvSign::Literal => ld_literal,
                AdvSign::Flipped => g.mul_scalar(ld_literal, -1.0),
            };

            let le_s = g.mul_scalar(le, self.config.lambda_e);
            let ld_s = g.mul_scalar(ld, self.config.lambda_d);
            let lw_s = g.mul_scalar(lw, self.config.lambda_w);
            let partial = g.add(le_s, ld_s)?;
            let total = g.add(partial, lw_s)?;
            let scaled = g.mul_scalar(total, inv_batch);
            g.backward(scaled)?;

            accumulate_main_grads(&g, &enc_vars, &dec_vars, &mut main_grads);

            sums.0 += g.value(le).item() * inv_batch;
            sums.1 += g.value(ld).item() * inv_batch;
            sums.2 += g.value(lw).item() * inv_batch;
            sums.3 += g.value(total).item() * inv_batch;

            marked_store.push((
                g.value(a_ac).data().to_vec(),
                g.value(a_ac_w).data().to_vec(),
            ));
        }

        let mut main_params = collect_main_params(&self.model);
        self.main_adam.step(&mut main_params, &main_grads)?;
        write_back_main_params(&mut self.model, main_params);

        // Discriminator step: minimize log(1 - D(clean)) + log(D(marked))
        // with the marked coefficients detached.
        for (clean, marked) in &marked_store {
            let mut g = Graph::new();
            let disc_vars = self.model.discriminator.to_vars(&mut g, true);
            let real = g.constant(Tensor::from_vec(1, half, clean.clone())?);
            let fake = g.constant(Tensor::from_vec(1, half, marked.clone())?);
            let d_real = discriminator_forward(&mut g, &self.model.arch, &disc_vars, real)?;
            let d_fake = discriminator_forward(&mut g, &self.model.arch, &disc_vars, fake)?;
            let d_real_c = g.clamp(d_real, PROB_EPS, 1.0 - PROB_EPS);
            let d_fake_c = g.clamp(d_fake, PROB_EPS, 1.0 - PROB_EPS);
            let one_minus_real = g.affine(d_real_c, -1.0, 1.0);
            let log_real = g.log(one_minus_real)?;
            let log_fake = g.log(d_fake_c)?;
            let l_disc = g.add(log_real, log_fake)?;
            let scaled = g.mul_scalar(l_disc, inv_batch);
            g.backward(scaled)?;

            for (i, &(w, b)) in disc_vars.layers.iter().enumerate() {
                if let Some(gw) = g.grad(w) {
                    disc_grads[2 * i].add_assign(gw);
                }
                if let Some(gb) = g.grad(b) {
                    disc_grads[2 * i + 1].add_assign(gb);
                }
            }
            sums.4 += g.value(l_disc).item() * inv_batch;
        }
        let mut disc_params: Vec<Tensor> = self
            .model
            .discriminator
            .layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect();
        self.disc_adam.step(&mut disc_params, &disc_grads)?;
        for (i, layer) in self.model.discriminator.layers.iter_mut().enumerate() {
            layer.weight = disc_params[2 * i].clone();
            layer.bias = disc_params[2 * i + 1].clone();
        }

        self.step += 1;
        self.model.trained_steps = self.step;
        let record = StepRecord {
            step: self.step,
            loss_encoder: sums.0,
            loss_adversarial: sums.1,
            loss_watermark: sums.2,
            loss_total: sums.3,
            loss_discriminator: sums.4,
            distortion: batch_tag.to_string(),
        };
        for (name, v) in [
            ("encoder loss", record.loss_encoder),
            ("adversarial loss", record.loss_adversarial),
            ("watermark loss", record.loss_watermark),
            ("total loss", record.loss_total),
            ("discriminator loss", record.loss_discriminator),
        ] {
            if !v.is_finite() {
                return Err(DearError::NonFiniteLoss {
                    step: self.step,
                    what: name.into(),
                });
            }
        }
        Ok(record)
    }

    fn apply_batch_distortion(&mut self, g: &mut Graph, audio: Var, tag: &str) -> Result<Var> {
        match self.config.distortion {
            DistortionMode::None => Ok(audio),
            DistortionMode::Rerecording => channel::dar_with_stages(
                g,
                audio,
                &self.distortion,
                self.config.dar_stages,
                &mut self.rng,
            ),
            DistortionMode::Enhanced => {
                if tag == "dar" {
                    channel::dar_with_stages(
                        g,
                        audio,
                        &self.distortion,
                        self.config.dar_stages,
                        &mut self.rng,
                    )
                } else {
                    let op = EnhancedOp::from_tag(tag)?;
                    channel::apply_enhanced_op(g, audio, op)
                }
            }
        }
    }
}

fn main_param_shapes(model: &ModelBundle) -> Vec<(usize, usize)> {
    model
        .encoder
        .layers
        .iter()
        .chain(&model.decoder.layers)
        .flat_map(|l| [l.weight.shape(), l.bias.shape()])
        .collect()
}

fn main_param_count(model: &ModelBundle) -> usize {
    2 * (model.encoder.layers.len() + model.decoder.layers.len())
}

fn zero_grads(shapes: &[(usize, usize)]) -> Vec<Tensor> {
    shapes.iter().map(|&(c, n)| Tensor::zeros(c, n)).collect()
}

fn collect_main_params(model: &ModelBundle) -> Vec<Tensor> {
    model
        .encoder
        .layers
        .iter()
        .chain(&model.decoder.layers)
        .flat_map(|l| [l.weight.clone(), l.bias.clone()])
        .collect()
}

fn write_back_main_params(model: &mut ModelBundle, params: Vec<Tensor>) {
    let mut it = params.into_iter();
    for layer in model
        .encoder
        .layers
        .iter_mut()
        .chain(model.decoder.layers.iter_mut())
    {
        layer.weight = it.next().expect("param count");
        layer.bias = it.next().expect("param count");
    }
}

fn accumulate_main_grads(g: &Graph, enc: &NetVars, dec: &NetVars, grads: &mut [Tensor]) {
    let mut idx = 0;
    for &(w, b) in enc.layers.iter().chain(&dec.layers) {
        if let Some(gw) = g.grad(w) {
            grads[idx].add_assign(gw);
        }
        if let Some(gb) = g.grad(b) {
            grads[idx + 1].add_assign(gb);
        }
        idx += 2;
    }
}

/// Load a corpus directory of WAVs and cut every file into training
/// segments; unreadable files are skipped with a note on stderr.
pub fn load_corpus_segments(dir: &Path, config: &TrainingConfig) -> Result<Vec<Vec<f64>>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| DearError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|x| x.eq_ignore_ascii_case("wav"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(DearError::EmptyCorpus(dir.display().to_string()));
    }
    let mut segments = Vec::new();
    let mut readable = 0usize;
    for path in &paths {
        match signal::load_wav(path) {
            Ok(audio) => {
                readable += 1;
                for seg in signal::segment(&audio, config.segment_len)? {
                    let data = seg.into_samples();
                    let power = data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64;
                    // silent padding tails cannot carry a watermark
                    if power > 1e-9 {
                        segments.push(data);
                    }
                }
            }
            Err(e) => {
                eprintln!("skipping {}: {e}", path.display());
            }
        }
    }
    if readable == 0 || segments.is_empty() {
        return Err(DearError::EmptyCorpus(format!(
            "{}: no usable segments",
            dir.display()
        )));
    }
    Ok(segments)
}

/// Outcome of [`train`]: the best-by-validation model and the full record.
pub struct TrainOutcome {
    pub model: ModelBundle,
    pub record: TrainingRecord,
}

/// Split segments, run epochs of batches, evaluate periodically, and keep
/// the checkpoint with the best held-out re-recording accuracy. `log`
/// receives one JSON line per step and per evaluation.
pub fn train(
    corpus_dir: &Path,
    model: ModelBundle,
    config: TrainingConfig,
    checkpoint_path: Option<&Path>,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let segments = load_corpus_segments(corpus_dir, &config)?;
    train_on_segments(segments, model, config, checkpoint_path, log)
}

/// [`train`] on pre-cut segments.
pub fn train_on_segments(
    segments: Vec<Vec<f64>>,
    model: ModelBundle,
    config: TrainingConfig,
    checkpoint_path: Option<&Path>,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5DEE_CE66_D1CE_5EED);
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.shuffle(&mut split_rng);
    let n_val = ((segments.len() as f64 * config.val_fraction).round() as usize)
        .clamp(1, segments.len().saturating_sub(1).max(1));
    let (val_idx, train_idx) = order.split_at(n_val.min(order.len()));
    let val_segments: Vec<Vec<f64>> = val_idx.iter().map(|&i| segments[i].clone()).collect();
    let train_ids: Vec<usize> = train_idx.to_vec();
    if train_ids.is_empty() {
        return Err(DearError::EmptyCorpus("no training segments".into()));
    }

    let mut trainer = Trainer::new(model, config)?;
    let mut record = TrainingRecord::default();
    let mut best: Option<(EvalRecord, ModelBundle)> = None;
    let eval_seed_base = trainer.config.seed ^ 0xE7A1_5EED_0000_0000;

    'outer: for _epoch in 0..trainer.config.epochs {
        let mut epoch_order = train_ids.clone();
        epoch_order.shuffle(&mut trainer.rng);
        for chunk in epoch_order.chunks(trainer.config.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| segments[i].as_slice()).collect();
            let step_rec = trainer.train_step(&batch)?;
            if let Some(w) = log.as_deref_mut() {
                let _ = writeln!(
                    w,
                    "{}",
                    serde_json::json!({"type": "step", "data": &step_rec})
                );
            }
            record.steps.push(step_rec);

            let due_eval = trainer.step % trainer.config.eval_interval == 0;
            let out_of_steps = trainer
                .config
                .max_steps
                .map(|m| trainer.step >= m)
                .unwrap_or(false);
            if due_eval || out_of_steps {
                let mut eval = evaluate_model(
                    &trainer.model,
                    &val_segments,
                    &trainer.distortion,
                    trainer.config.dar_stages,
                    eval_seed_base.wrapping_add(trainer.step),
                )?;
                eval.step = trainer.step;
                if let Some(w) = log.as_deref_mut() {
                    let _ = writeln!(w, "{}", serde_json::json!({"type": "eval", "data": &eval}));
                }
                let better = match &best {
                    None => true,
                    Some((b, _)) => {
                        (eval.dar_acc, eval.clean_acc) > (b.dar_acc, b.clean_acc)
                    }
                };
                if better {
                    best = Some((eval.clone(), trainer.model.clone()));
                }
                let targets_met = trainer
                    .config
                    .target_clean_acc
                    .map(|t| eval.clean_acc >= t)
                    .unwrap_or(true)
                    && trainer
                        .config
                        .target_dar_acc
                        .map(|t| eval.dar_acc >= t)
                        .unwrap_or(true)
                    && trainer
                        .config
                        .target_snr_db
                        .map(|t| eval.snr_db >= t)
                        .unwrap_or(true)
                    && (trainer.config.target_clean_acc.is_some()
                        || trainer.config.target_dar_acc.is_some()
                        || trainer.config.target_snr_db.is_some());
                record.evals.push(eval);
                if targets_met || out_of_steps {
                    break 'outer;
                }
            }
            if trainer.config.checkpoint_interval > 0
                && trainer.step % trainer.config.checkpoint_interval == 0
            {
                if let Some(path) = checkpoint_path {
                    trainer.save_checkpoint(path)?;
                }
            }
        }
    }

    // epochs == 0 or no eval ran: fall back to the final state
    let (best_eval, best_model) = match best {
        Some((e, m)) => (Some(e), m),
        None => (None, trainer.model.clone()),
    };
    record.best_eval = best_eval;
    Ok(TrainOutcome {
        model: best_model,
        record,
    })
}
