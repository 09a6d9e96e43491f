//! Configuration, checkpoints, metrics, data, training stages, scoring and
//! benchmarking.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod manifest;
pub mod metrics;
pub mod optim;
pub mod rtf;
pub mod synth;
pub mod train;

pub use checkpoint::{load_prefix, Checkpoint};
pub use config::{KvConfig, Stage, TrainConfig};
pub use eval::{cer, char_edits, wer, word_edits, EditCounts, ErrorTally, EvalReport};
pub use manifest::{format_manifest, parse_manifest, read_manifest, ManifestEntry};
pub use metrics::MetricsSink;
pub use optim::{Adam, OptimConfig, Schedule};
pub use rtf::{rtf_bench, RtfReport};
pub use synth::{concat_clips, synth_corpus, write_corpus, SynthClip, SynthSpec};
pub use train::{
    adapt, adapter_train_step, batch_indices, build_asr, evaluate, finetune, load_asr, load_utterances, most, nst, pretrain,
    run_stage, MostData, RunContext, StageOutcome, Utterance,
};
