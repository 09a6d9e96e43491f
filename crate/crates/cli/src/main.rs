use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use usm_core::encoder::{receptive_field_for, AttentionPattern, ENCODER_FRAME_MICROS};
use usm_core::features::{featurize, read_wav};
use usm_core::pipeline::config::{KvConfig, Stage, TrainConfig};
use usm_core::pipeline::train::{evaluate, load_asr, load_utterances, run_stage};
use usm_core::pipeline::{read_manifest, rtf_bench, synth_corpus, write_corpus, SynthSpec};

#[derive(Parser)]
#[command(name = "usm", version, about = "Conformer speech encoder training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-prediction pre-training on unlabeled audio.
    Pretrain(StageArgs),
    /// Joint speech and text pre-training.
    Most(StageArgs),
    /// CTC fine-tuning.
    Finetune(StageArgs),
    /// Per-language residual adapter training on a frozen model.
    Adapt(StageArgs),
    /// Pseudo-label, filter, mix and train a student.
    Nst(StageArgs),
    /// Greedy-decode a manifest and report WER and CER.
    Eval(EvalArgs),
    /// Receptive field of a stacked attention pattern.
    RfReport(RfArgs),
    /// Inference throughput in audio seconds per wall second.
    Rtf(RtfArgs),
    /// Write a synthetic corpus and manifest.
    Synth(SynthArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Key-value configuration file.
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides as `key=value`, applied after the file.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Do not echo metrics to standard output.
    #[arg(short, long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory holding `config.txt`.
    #[arg(short, long)]
    checkpoint: PathBuf,
    #[arg(short, long)]
    manifest: PathBuf,
    /// Attention pattern override, e.g. `chunk:200` or `local:64:64`.
    #[arg(short, long)]
    pattern: Option<AttentionPattern>,
}

#[derive(Args)]
struct RfArgs {
    #[arg(short, long, default_value = "local:128:128")]
    pattern: AttentionPattern,
    #[arg(short, long, default_value_t = 32)]
    layers: usize,
    /// Depthwise kernel; 0 ignores convolutions.
    #[arg(short, long, default_value_t = 0)]
    kernel: usize,
    /// Encoder frame duration in microseconds.
    #[arg(long, default_value_t = ENCODER_FRAME_MICROS)]
    frame_micros: u64,
    /// Print one tab-separated line instead of a table.
    #[arg(long)]
    machine: bool,
}

#[derive(Args)]
struct RtfArgs {
    #[arg(short, long)]
    checkpoint: PathBuf,
    #[arg(short, long)]
    manifest: PathBuf,
    #[arg(short, long, default_value_t = 4)]
    batch_size: usize,
    #[arg(short, long, default_value_t = 5)]
    repeats: usize,
    #[arg(short, long)]
    pattern: Option<AttentionPattern>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(short, long)]
    out: PathBuf,
    #[arg(short = 'n', long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// File prefix for audio and manifest.
    #[arg(long, default_value = "clips")]
    prefix: String,
    #[arg(long, default_value_t = 8)]
    letters: usize,
    #[arg(long, default_value = "en")]
    language: String,
    /// Rotates the letter-to-tone table.
    #[arg(long, default_value_t = 0)]
    tone_shift: usize,
    #[arg(long, default_value_t = 0.0)]
    speaker_spread: f64,
    #[arg(long, default_value_t = 3.0)]
    max_seconds: f64,
    /// Concatenate this many clips into each output item.
    #[arg(long, default_value_t = 1)]
    concat: usize,
    /// Write "-" instead of transcripts.
    #[arg(long)]
    unlabeled: bool,
}

fn train(stage: Stage, args: &StageArgs) -> Result<()> {
    let mut kv = KvConfig::load(&args.config)?;
    kv.set("stage", stage);
    for o in &args.overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!("override {o:?} is not key=value");
        };
        kv.set(k.trim(), v.trim());
    }
    let cfg = TrainConfig::from_kv(&kv)?;
    info!("{stage} for {} steps, writing to {}", cfg.steps, cfg.out.display());
    let ck = run_stage(&cfg, !args.quiet)?;
    info!("finished at step {}", ck.step);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Pretrain(a) => train(Stage::Pretrain, &a)?,
        Command::Most(a) => train(Stage::Most, &a)?,
        Command::Finetune(a) => train(Stage::Finetune, &a)?,
        Command::Adapt(a) => train(Stage::Adapt, &a)?,
        Command::Nst(a) => train(Stage::Nst, &a)?,
        Command::Eval(a) => {
            let (cfg, model, store) = load_asr(&a.checkpoint)?;
            let data = load_utterances(&read_manifest(&a.manifest)?, &cfg.vocab())?;
            let report = evaluate(&model, &store, &data, a.pattern.unwrap_or(cfg.pattern), None)?;
            for (lang, t) in &report.per_language {
                println!("{lang}\tutterances={}\twer={:.4}\tcer={:.4}", t.utterances, t.wer(), t.cer());
            }
            let p = &report.pooled;
            println!("pooled\tutterances={}\twer={:.4}\tcer={:.4}", p.utterances, p.wer(), p.cer());
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::RfReport(a) => {
            let r = receptive_field_for(a.pattern, a.layers, a.kernel, a.frame_micros);
            if a.machine {
                println!("{}", r.machine_line());
            } else {
                println!("{r}");
            }
        }
        Command::Rtf(a) => {
            let (cfg, model, store) = load_asr(&a.checkpoint)?;
            let entries = read_manifest(&a.manifest)?;
            let feats = entries
                .iter()
                .map(|e| Ok(featurize(&read_wav(&e.path)?).normalized()))
                .collect::<Result<Vec<_>>>()?;
            let r = rtf_bench(&model.encoder, &store, &feats, a.batch_size, a.pattern.unwrap_or(cfg.pattern), a.repeats)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Synth(a) => {
            let spec = SynthSpec {
                letters: a.letters,
                language: a.language.clone(),
                tone_shift: a.tone_shift,
                speaker_spread: a.speaker_spread,
                max_seconds: a.max_seconds,
                ..Default::default()
            };
            if a.concat == 0 {
                bail!("--concat must be at least 1");
            }
            let clips = synth_corpus(&spec, a.count * a.concat, a.seed)?;
            let items: Vec<_> = clips.chunks(a.concat).map(usm_core::pipeline::concat_clips).collect();
            let entries = write_corpus(&a.out, &a.prefix, &items, !a.unlabeled)
                .with_context(|| format!("writing corpus to {}", a.out.display()))?;
            let secs: f64 = entries.iter().map(|e| e.duration).sum();
            info!("wrote {} clips ({secs:.1} s) to {}", entries.len(), a.out.display());
        }
    }
    Ok(())
}
