//! Command-line workflows: train, embed, extract, attack, evaluate.
//!
//! Machine-readable output is line-delimited JSON on stdout; human tables
//! go to stderr under `--pretty`. Exit codes: 0 success, 1 usage error,
//! 2 data error, 3 internal error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::Attack;
use crate::error::{DearError, Result};
use crate::net::ModelBundle;
use crate::signal::{self, AudioSignal, Watermark};
use crate::sync::{extract_with_sync, SyncConfig, SyncDirection};
use crate::trainer::{self, TrainingConfig};

#[derive(Parser)]
#[command(
    name = "dear",
    about = "Audio watermarking robust to re-recording: embed, extract, attack, evaluate, train",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of WAV files.
    Train(TrainArgs),
    /// Embed watermark bits into a WAV file.
    Embed(EmbedArgs),
    /// Extract watermark bits from a WAV file.
    Extract(ExtractArgs),
    /// Apply a named distortion to a WAV file.
    Attack(AttackArgs),
    /// Embed, attack, and extract over a corpus; report mean accuracy.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training config file (flat `key = value` lines); defaults apply
    /// when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of training WAVs.
    #[arg(long)]
    corpus: PathBuf,
    /// Output model path.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Bits as 0/1 ASCII, hex with 0x prefix, or @path to a file holding
    /// either form. Length must be the model's watermark length or a
    /// multiple of it (chunks then rotate across segments).
    #[arg(long)]
    bits: String,
    #[arg(long)]
    out: PathBuf,
    /// Strength factor applied to the encoder residual.
    #[arg(long, default_value_t = 1.0)]
    strength: f64,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Ground-truth bits; when given, the sync search maximizes accuracy
    /// and the report carries it.
    #[arg(long)]
    bits: Option<String>,
    #[arg(long = "sync-min")]
    sync_min: Option<usize>,
    #[arg(long = "sync-max")]
    sync_max: Option<usize>,
    #[arg(long = "sync-step", default_value_t = 1)]
    sync_step: usize,
    /// forward, backward, or both.
    #[arg(long = "sync-direction", default_value = "forward")]
    sync_direction: String,
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Attack spec like gaussian:20, amplitude:0.9, rerecord:snr=22,
    /// mp3:64 (see README for the registry).
    #[arg(long)]
    attack: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory of test WAVs.
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated attack specs.
    #[arg(long, default_value = "identity")]
    attacks: String,
    /// Fixed bits for every file; random per file when omitted.
    #[arg(long)]
    bits: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    strength: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "sync-max", default_value_t = 0)]
    sync_max: usize,
    #[arg(long)]
    pretty: bool,
}

/// Parse argv and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful exits
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Embed(args) => cmd_embed(args),
        Command::Extract(args) => cmd_extract(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &DearError) -> i32 {
    match e {
        DearError::InvalidArgument(_)
        | DearError::UnknownAttack(_)
        | DearError::Config { .. }
        | DearError::LengthMismatch { .. } => 1,
        DearError::Io { .. }
        | DearError::UnsupportedEncoding(_)
        | DearError::EmptyAudio
        | DearError::NonFiniteSample(_)
        | DearError::ZeroReference
        | DearError::BadCheckpoint(_)
        | DearError::CodecUnavailable(_)
        | DearError::EmptyCorpus(_) => 2,
        DearError::ShapeMismatch { .. } | DearError::NonFiniteLoss { .. } => 3,
    }
}

fn parse_bits(spec: &str) -> Result<Watermark> {
    if let Some(path) = spec.strip_prefix('@') {
        let text = std::fs::read_to_string(path).map_err(|e| DearError::io(path, e))?;
        Watermark::parse(&text)
    } else {
        Watermark::parse(spec)
    }
}

fn load_model(path: &Path) -> Result<ModelBundle> {
    ModelBundle::load(path)
}

fn check_audio_for_model(model: &ModelBundle, audio: &AudioSignal) -> Result<()> {
    if audio.sample_rate() != model.sample_rate {
        eprintln!(
            "warning: audio sample rate {} differs from the model's {}",
            audio.sample_rate(),
            model.sample_rate
        );
    }
    if audio.len() < model.segment_len {
        return Err(DearError::InvalidArgument(format!(
            "audio has {} samples, the model needs at least {}",
            audio.len(),
            model.segment_len
        )));
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| DearError::io(path, e))?;
            TrainingConfig::parse(&text)?
        }
        None => TrainingConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let model = ModelBundle::new_random(
        crate::net::ArchDescriptor::default(),
        config.watermark_len,
        config.segment_len,
        config.sample_rate,
        config.seed,
    )?;
    let log_path = args.out.with_extension("log.jsonl");
    let mut log = std::fs::File::create(&log_path).map_err(|e| DearError::io(&log_path, e))?;
    let outcome = trainer::train(
        &args.corpus,
        model,
        config,
        Some(&args.out),
        Some(&mut log),
    )?;
    outcome.model.save(&args.out)?;
    let best = outcome.record.best_eval;
    println!(
        "{}",
        serde_json::json!({
            "model": args.out,
            "log": log_path,
            "steps": outcome.record.steps.len(),
            "best_eval": best.map(|b| serde_json::json!({
                "step": b.step, "snr_db": b.snr_db,
                "clean_acc": b.clean_acc, "dar_acc": b.dar_acc,
            })),
        })
    );
    Ok(())
}

fn cmd_embed(args: EmbedArgs) -> Result<()> {
    if args.strength <= 0.0 {
        return Err(DearError::InvalidArgument("strength must be > 0".into()));
    }
    let model = load_model(&args.model)?;
    let audio = signal::load_wav(&args.input)?;
    check_audio_for_model(&model, &audio)?;
    let bits = parse_bits(&args.bits)?;
    if bits.len() % model.watermark_len != 0 {
        return Err(DearError::InvalidArgument(format!(
            "got {} bits, expected the model's watermark length {} (or a multiple)",
            bits.len(),
            model.watermark_len
        )));
    }
    let chunks: Vec<Watermark> = bits
        .bits()
        .chunks(model.watermark_len)
        .map(|c| Watermark::new(c.to_vec()).expect("chunk of valid bits"))
        .collect();

    let segments = signal::segment(&audio, model.segment_len)?;
    let marked: Vec<AudioSignal> = segments
        .iter()
        .enumerate()
        .map(|(i, seg)| model.embed_segment(seg, &chunks[i % chunks.len()], args.strength))
        .collect::<Result<_>>()?;
    let out = signal::concat_segments(&marked, audio.len())?;
    signal::save_wav(&out, &args.out)?;

    let snr_db = signal::snr(&audio, &out)?;
    println!(
        "{}",
        serde_json::json!({
            "snr_db": snr_db,
            "n_segments": segments.len(),
            "S": args.strength,
        })
    );
    Ok(())
}

fn parse_direction(s: &str) -> Result<SyncDirection> {
    match s {
        "forward" => Ok(SyncDirection::Forward),
        "backward" => Ok(SyncDirection::Backward),
        "both" => Ok(SyncDirection::Both),
        other => Err(DearError::InvalidArgument(format!(
            "sync direction must be forward, backward, or both; got '{other}'"
        ))),
    }
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let audio = signal::load_wav(&args.input)?;
    check_audio_for_model(&model, &audio)?;
    let truth = args.bits.as_deref().map(parse_bits).transpose()?;
    if let Some(w) = &truth {
        if w.len() != model.watermark_len {
            return Err(DearError::LengthMismatch {
                left: w.len(),
                right: model.watermark_len,
            });
        }
    }
    let sync_requested = args.sync_min.is_some() || args.sync_max.is_some();
    let config = if sync_requested {
        SyncConfig {
            shift_min: args.sync_min.unwrap_or(0),
            shift_max: args.sync_max.unwrap_or(8_000),
            shift_step: args.sync_step,
            direction: parse_direction(&args.sync_direction)?,
        }
    } else {
        SyncConfig::disabled()
    };
    let result = extract_with_sync(&model, &audio, &config, truth.as_ref())?;
    let bits = result.soft.to_bits();
    println!(
        "{}",
        serde_json::json!({
            "bits": bits.to_bit_string(),
            "n_bits": bits.len(),
            "acc": result.accuracy,
            "shift": result.shift,
            "confidence": result.confidence,
            "heuristic_sync": result.heuristic,
        })
    );
    if args.pretty {
        eprintln!(
            "bits: {}\nshift: {} ({})",
            bits.to_bit_string(),
            result.shift,
            if result.heuristic {
                "confidence proxy"
            } else {
                "max accuracy"
            }
        );
        if let Some(acc) = result.accuracy {
            eprintln!("accuracy: {acc:.4}");
        }
    }
    Ok(())
}

fn cmd_attack(args: AttackArgs) -> Result<()> {
    let attack = Attack::parse(&args.attack)?;
    let audio = signal::load_wav(&args.input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let out = attack.apply(&audio, &mut rng)?;
    signal::save_wav(&out, &args.out)?;
    println!(
        "{}",
        serde_json::json!({
            "attack_name": attack.name(),
            "seed": args.seed,
            "n_samples": out.len(),
        })
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let attacks: Vec<Attack> = args
        .attacks
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Attack::parse)
        .collect::<Result<_>>()?;
    if attacks.is_empty() {
        return Err(DearError::InvalidArgument("no attacks given".into()));
    }
    let fixed_bits = args.bits.as_deref().map(parse_bits).transpose()?;
    if let Some(w) = &fixed_bits {
        if w.len() != model.watermark_len {
            return Err(DearError::LengthMismatch {
                left: w.len(),
                right: model.watermark_len,
            });
        }
    }

    let mut files: Vec<PathBuf> = std::fs::read_dir(&args.corpus)
        .map_err(|e| DearError::io(&args.corpus, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|x| x.eq_ignore_ascii_case("wav"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DearError::EmptyCorpus(args.corpus.display().to_string()));
    }

    let sync = if args.sync_max > 0 {
        SyncConfig {
            shift_min: 0,
            shift_max: args.sync_max,
            shift_step: 1,
            direction: SyncDirection::Forward,
        }
    } else {
        SyncConfig::disabled()
    };

    let mut summaries = Vec::new();
    for attack in &attacks {
        let mut accs = Vec::new();
        let mut snrs = Vec::new();
        let mut failures = 0usize;
        for (fi, path) in files.iter().enumerate() {
            let mut per_file = || -> Result<(f64, f64)> {
                let audio = signal::load_wav(path)?;
                check_audio_for_model(&model, &audio)?;
                let mut rng = ChaCha8Rng::seed_from_u64(
                    args.seed ^ (fi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                let bits = match &fixed_bits {
                    Some(w) => w.clone(),
                    None => Watermark::random(model.watermark_len, &mut rng),
                };
                let (marked, _) = model.embed_audio(&audio, &bits, args.strength)?;
                let snr_db = signal::snr(&audio, &marked)?;
                let attacked = attack.apply(&marked, &mut rng)?;
                let result = extract_with_sync(&model, &attacked, &sync, Some(&bits))?;
                let acc = result.accuracy.expect("truth given");
                Ok((snr_db, acc))
            };
            match per_file() {
                Ok((snr_db, acc)) => {
                    println!(
                        "{}",
                        serde_json::json!({
                            "type": "file",
                            "attack_name": attack.name(),
                            "file": path,
                            "snr_db": snr_db,
                            "acc": acc,
                            "n_bits": model.watermark_len,
                        })
                    );
                    accs.push(acc);
                    snrs.push(snr_db);
                }
                Err(e) => {
                    eprintln!("{}: {e}", path.display());
                    failures += 1;
                }
            }
        }
        if accs.is_empty() {
            return Err(DearError::EmptyCorpus(format!(
                "all {failures} files failed under {}",
                attack.name()
            )));
        }
        let mean_acc = accs.iter().sum::<f64>() / accs.len() as f64;
        let mean_snr = snrs.iter().sum::<f64>() / snrs.len() as f64;
        println!(
            "{}",
            serde_json::json!({
                "type": "summary",
                "attack_name": attack.name(),
                "acc": mean_acc,
                "snr_db": mean_snr,
                "n_bits": model.watermark_len,
                "files": accs.len(),
                "failures": failures,
            })
        );
        summaries.push((attack.name(), mean_acc, mean_snr, accs.len()));
    }

    if args.pretty {
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "{:<24} {:>8} {:>10} {:>6}", "attack", "ACC", "SNR(dB)", "n");
        let _ = writeln!(err, "{}", "-".repeat(52));
        for (name, acc, snr, n) in &summaries {
            let _ = writeln!(err, "{name:<24} {acc:>8.4} {snr:>10.2} {n:>6}");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_parsing_forms() {
        assert_eq!(parse_bits("0101").unwrap().len(), 4);
        assert_eq!(parse_bits("0xFF").unwrap().len(), 8);
        assert!(parse_bits("012").is_err());
    }

    #[test]
    fn direction_parsing() {
        assert!(matches!(parse_direction("forward"), Ok(SyncDirection::Forward)));
        assert!(matches!(parse_direction("backward"), Ok(SyncDirection::Backward)));
        assert!(matches!(parse_direction("both"), Ok(SyncDirection::Both)));
        assert!(parse_direction("sideways").is_err());
    }

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(exit_code(&DearError::InvalidArgument("x".into())), 1);
        assert_eq!(exit_code(&DearError::UnknownAttack("x".into())), 1);
        assert_eq!(exit_code(&DearError::EmptyAudio), 2);
        assert_eq!(exit_code(&DearError::BadCheckpoint("x".into())), 2);
        assert_eq!(
            exit_code(&DearError::ShapeMismatch {
                expected: "a".into(),
                got: "b".into()
            }),
            3
        );
    }
}
