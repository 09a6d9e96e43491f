//! Desk-scale universal speech model training stack: log-mel features,
//! conformer encoders with global, local and chunk-wise attention,
//! random-projection quantization pre-training, text injection, CTC
//! fine-tuning, residual adapters and noisy student training.

pub mod adapters;
pub mod asr;
pub mod bestrq;
pub mod ctc;
pub mod encoder;
pub mod features;
pub mod longform;
pub mod most;
pub mod nst;
pub mod numerics;
pub mod pipeline;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] numerics::TensorError),
    #[error(transparent)]
    Ctc(#[from] ctc::CtcError),
    #[error(transparent)]
    Features(#[from] features::FeatureError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
        let context = context.into();
        move |source| Error::Io { context, source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Deterministic child seed from a base seed and a path of indices
/// (splitmix64 finalizer over each component).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}
