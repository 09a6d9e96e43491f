//! Short-segment training versus long-form decoding.
//!
//! Models are trained on single synthetic clips and decoded on
//! concatenations of `concat_factor` held-out clips. A local pattern whose
//! stacked context exceeds the training clips sees attention windows at
//! test time that it never saw during training; a chunked pattern sees the
//! same windows in both.

use std::fmt::Write as _;

use serde::Serialize;

use crate::encoder::{receptive_field, AttentionPattern, ConformerConfig, ENCODER_FRAME_MICROS};
use crate::pipeline::config::{KvConfig, Stage, TrainConfig};
use crate::pipeline::eval::{EditCounts, EvalReport};
use crate::pipeline::metrics::MetricsSink;
use crate::pipeline::synth::{concat_clips, synth_corpus, SynthClip, SynthSpec};
use crate::pipeline::train::{evaluate, finetune, RunContext, Utterance};
use crate::{derive_seed, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LongFormExperimentSpec {
    pub corpus: SynthSpec,
    /// Upper bound on training clip length in seconds.
    pub train_segment_seconds: f64,
    pub train_clips: usize,
    pub short_eval_clips: usize,
    /// Number of long-form evaluation items.
    pub long_eval_items: usize,
    /// Clips concatenated into one long-form item.
    pub concat_factor: usize,
    pub local: AttentionPattern,
    pub chunk: AttentionPattern,
    pub model: ConformerConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Long-form WER is measured every this many steps for the plot data.
    pub eval_every: usize,
    pub seeds: Vec<u64>,
    /// Seed of the synthetic train and eval corpora (shared by all runs).
    pub data_seed: u64,
}

impl Default for LongFormExperimentSpec {
    fn default() -> Self {
        Self {
            corpus: SynthSpec {
                speaker_spread: 0.15,
                ..SynthSpec::default()
            },
            train_segment_seconds: 3.0,
            train_clips: 400,
            short_eval_clips: 60,
            long_eval_items: 8,
            concat_factor: 40,
            local: AttentionPattern::Local { left: 256, right: 256 },
            chunk: AttentionPattern::Chunk { size: 32 },
            model: ConformerConfig::default(),
            steps: 500,
            batch_size: 8,
            eval_every: 100,
            seeds: vec![1, 2, 3],
            data_seed: 2024,
        }
    }
}

impl LongFormExperimentSpec {
    fn train_segment_frames(&self) -> u64 {
        (self.train_segment_seconds * 1e6 / ENCODER_FRAME_MICROS as f64).ceil() as u64
    }

    /// Encoder frames one local attention layer spans.
    fn local_window(&self) -> u64 {
        match self.local {
            AttentionPattern::Local { left, right } => (left + right + 1) as u64,
            _ => 0,
        }
    }

    /// Long-form items must be longer than anything seen in training and
    /// than a single local attention window, so every layer attends over
    /// more context at test time than it ever did in training.
    pub fn check_data(&self, data: &LongFormData) -> Result<()> {
        let frames = |u: &Utterance| (u.features.num_frames / self.model.subsampling_factor) as u64;
        let shortest = data.long.iter().map(frames).min().unwrap_or(0);
        let need = self.train_segment_frames().max(self.local_window());
        if shortest <= need {
            return Err(Error::Config(format!(
                "shortest long-form item has {shortest} encoder frames; it must exceed {need}"
            )));
        }
        if let Some(u) = data.train.iter().find(|u| frames(u) > self.train_segment_frames()) {
            return Err(Error::Config(format!("training clip {} exceeds the segment limit", u.id)));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate().map_err(Error::Config)?;
        self.local.validate().map_err(Error::Config)?;
        self.chunk.validate().map_err(Error::Config)?;
        if self.seeds.len() < 3 {
            return Err(Error::Config(format!("need at least 3 seeds, got {}", self.seeds.len())));
        }
        if self.concat_factor == 0 || self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("concatenation factor, steps, batch size and eval interval must be positive".into()));
        }
        if self.corpus.max_seconds > self.train_segment_seconds {
            return Err(Error::Config(format!(
                "training clips of up to {} s exceed the {} s segment limit",
                self.corpus.max_seconds, self.train_segment_seconds
            )));
        }
        let rf = receptive_field(&self.model, self.local, ENCODER_FRAME_MICROS)
            .attention_rf_width()
            .ok_or_else(|| Error::Config("the local pattern must have a bounded receptive field".into()))?;
        let train_frames = self.train_segment_frames();
        if !matches!(self.local, AttentionPattern::Local { .. }) || !matches!(self.chunk, AttentionPattern::Chunk { .. }) {
            return Err(Error::Config(format!("expected a local and a chunked pattern, got {} and {}", self.local, self.chunk)));
        }
        if rf <= train_frames {
            return Err(Error::Config(format!(
                "local receptive field of {rf} frames does not exceed the {train_frames}-frame training segment"
            )));
        }
        Ok(())
    }

    fn train_config(&self, pattern: AttentionPattern, seed: u64) -> Result<TrainConfig> {
        let mut kv = KvConfig::default();
        kv.set("seed", seed);
        kv.set("stage", Stage::Finetune);
        kv.set("vocab.letters", self.corpus.letters);
        let mut cfg = TrainConfig::from_kv(&kv)?;
        cfg.model = self.model.clone();
        cfg.model.bias_cap = pattern.bias_cap();
        cfg.pattern = pattern;
        cfg.steps = self.steps;
        cfg.batch_size = self.batch_size;
        cfg.log_every = 0;
        cfg.encoder_optim.total_steps = self.steps;
        cfg.decoder_optim.total_steps = self.steps;
        Ok(cfg)
    }
}

/// One trained model's scores.
#[derive(Clone, Debug, Serialize)]
pub struct LongFormRun {
    pub pattern: String,
    pub seed: u64,
    /// `None` when training diverged; such runs are excluded from medians.
    pub short: Option<EditCounts>,
    pub long: Option<EditCounts>,
    pub diverged: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PatternSummary {
    pub pattern: String,
    pub surviving_seeds: usize,
    pub median_short_wer: f64,
    pub median_long_wer: f64,
    pub median_short_deletion: f64,
    pub median_long_deletion: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LongFormReport {
    pub runs: Vec<LongFormRun>,
    pub local: PatternSummary,
    pub chunk: PatternSummary,
    /// `(step, pattern, seed, longform_wer)` rows.
    pub curve: Vec<(usize, String, u64, f64)>,
}

impl LongFormReport {
    /// Tab-separated plot data with a header row.
    pub fn plot_tsv(&self) -> String {
        let mut s = String::from("step\tpattern\tseed\tlongform_wer\n");
        for (step, pattern, seed, wer) in &self.curve {
            let _ = writeln!(s, "{step}\t{pattern}\t{seed}\t{wer:.6}");
        }
        s
    }

    /// Median long-form WER of the chunked pattern is no worse than the
    /// local one.
    pub fn chunk_not_worse(&self) -> bool {
        self.chunk.median_long_wer <= self.local.median_long_wer
    }

    /// The local pattern deletes a larger share of words on long-form audio.
    pub fn local_deletions_grow(&self) -> bool {
        self.local.median_long_deletion > self.local.median_short_deletion
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn summarize(pattern: AttentionPattern, runs: &[LongFormRun]) -> Result<PatternSummary> {
    let name = pattern.to_string();
    let ok: Vec<(&EditCounts, &EditCounts)> = runs
        .iter()
        .filter(|r| r.pattern == name)
        .filter_map(|r| Some((r.short.as_ref()?, r.long.as_ref()?)))
        .collect();
    if ok.len() < 2 {
        return Err(Error::Diverged {
            step: 0,
            what: format!("only {} seed(s) of {name} finished; at least 2 are required", ok.len()),
        });
    }
    let med = |f: &dyn Fn(&(&EditCounts, &EditCounts)) -> f64| median(&mut ok.iter().map(f).collect::<Vec<_>>());
    Ok(PatternSummary {
        pattern: name,
        surviving_seeds: ok.len(),
        median_short_wer: med(&|p| p.0.rate()),
        median_long_wer: med(&|p| p.1.rate()),
        median_short_deletion: med(&|p| p.0.deletion_rate()),
        median_long_deletion: med(&|p| p.1.deletion_rate()),
    })
}

fn utterances(clips: &[SynthClip], letters: usize) -> Result<Vec<Utterance>> {
    let vocab = crate::ctc::TokenVocab::letters(letters);
    clips
        .iter()
        .enumerate()
        .map(|(i, c)| Utterance::from_clip(format!("clip{i}"), &c.audio, Some(&c.text), &c.language, &vocab))
        .collect()
}

pub struct LongFormData {
    pub train: Vec<Utterance>,
    pub short: Vec<Utterance>,
    pub long: Vec<Utterance>,
}

/// Synthetic training clips, held-out short clips and their long-form
/// concatenations.
pub fn longform_data(spec: &LongFormExperimentSpec) -> Result<LongFormData> {
    let letters = spec.corpus.letters;
    let train = synth_corpus(&spec.corpus, spec.train_clips, derive_seed(spec.data_seed, &[0]))?;
    let short = synth_corpus(&spec.corpus, spec.short_eval_clips, derive_seed(spec.data_seed, &[1]))?;
    let pool = synth_corpus(&spec.corpus, spec.long_eval_items * spec.concat_factor, derive_seed(spec.data_seed, &[2]))?;
    let long: Vec<SynthClip> = pool.chunks(spec.concat_factor).map(concat_clips).collect();
    Ok(LongFormData {
        train: utterances(&train, letters)?,
        short: utterances(&short, letters)?,
        long: utterances(&long, letters)?,
    })
}

fn wer_counts(report: &EvalReport) -> EditCounts {
    report.pooled.words
}

/// Trains one model per pattern and seed and scores each on short and
/// long-form audio. Diverged runs are recorded and excluded.
pub fn run_longform(spec: &LongFormExperimentSpec, data: &LongFormData) -> Result<LongFormReport> {
    spec.validate()?;
    spec.check_data(data)?;
    let mut runs = Vec::new();
    let mut curve = Vec::new();
    for pattern in [spec.local, spec.chunk] {
        for &seed in &spec.seeds {
            let cfg = spec.train_config(pattern, seed)?;
            let mut metrics = MetricsSink::memory();
            let model_for_curve = crate::pipeline::train::build_asr(&cfg, None)?.0;
            let mut points: Vec<(usize, String, u64, f64)> = Vec::new();
            let mut observe = |step: usize, store: &crate::numerics::ParamStore| -> Result<()> {
                if step % spec.eval_every == 0 && step < spec.steps {
                    let r = evaluate(&model_for_curve, store, &data.long, pattern, None)?;
                    points.push((step, pattern.to_string(), seed, r.pooled.wer()));
                }
                Ok(())
            };
            let outcome = {
                let mut ctx = RunContext::memory(&mut metrics);
                ctx.observer = Some(&mut observe);
                finetune(&cfg, &data.train, None, &mut ctx)
            };
            match outcome {
                Ok((model, out)) => {
                    let store = out.checkpoint.params();
                    let short = evaluate(&model, store, &data.short, pattern, None)?;
                    let long = evaluate(&model, store, &data.long, pattern, None)?;
                    curve.append(&mut points);
                    curve.push((spec.steps, pattern.to_string(), seed, long.pooled.wer()));
                    log::info!(
                        "{pattern} seed {seed}: short WER {:.4}, long WER {:.4} (deletions {:.4})",
                        short.pooled.wer(),
                        long.pooled.wer(),
                        long.pooled.words.deletion_rate()
                    );
                    runs.push(LongFormRun {
                        pattern: pattern.to_string(),
                        seed,
                        short: Some(wer_counts(&short)),
                        long: Some(wer_counts(&long)),
                        diverged: None,
                    });
                }
                Err(Error::Diverged { step, what }) => {
                    log::warn!("{pattern} seed {seed} diverged at step {step}: {what}");
                    runs.push(LongFormRun {
                        pattern: pattern.to_string(),
                        seed,
                        short: None,
                        long: None,
                        diverged: Some(format!("step {step}: {what}")),
                    });
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(LongFormReport {
        local: summarize(spec.local, &runs)?,
        chunk: summarize(spec.chunk, &runs)?,
        runs,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn default_spec_has_mismatch_geometry() {
        LongFormExperimentSpec::default().validate().unwrap();
    }

    #[test]
    fn short_local_context_is_rejected() {
        let spec = LongFormExperimentSpec {
            local: AttentionPattern::Local { left: 4, right: 4 },
            ..Default::default()
        };
        assert!(spec.validate().is_err());
        let spec = LongFormExperimentSpec {
            chunk: AttentionPattern::Global,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
        let spec = LongFormExperimentSpec {
            seeds: vec![1, 2],
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn too_few_survivors_is_an_error() {
        let run = |seed, ok: bool| LongFormRun {
            pattern: "chunk:4".into(),
            seed,
            short: ok.then(EditCounts::default),
            long: ok.then(EditCounts::default),
            diverged: (!ok).then(|| "nan".into()),
        };
        let runs = vec![run(1, true), run(2, false), run(3, false)];
        assert!(summarize(AttentionPattern::Chunk { size: 4 }, &runs).is_err());
    }
}
