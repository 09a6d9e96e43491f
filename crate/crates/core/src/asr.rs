//! Encoder with a CTC output layer.

use rand::Rng;

use crate::adapters::BlockAdapters;
use crate::ctc::{ctc_greedy_decode, ctc_loss_var, LabelSequence, TokenVocab};
use crate::encoder::{AttentionPattern, ConformerConfig, Encoder, Linear};
use crate::features::FeatureSequence;
use crate::numerics::{Binder, Graph, ParamStore, Scalar, Var};
use crate::Result;

pub const ENCODER_PREFIX: &str = "encoder";
pub const CTC_HEAD_PREFIX: &str = "ctc.out";

#[derive(Clone, Debug)]
pub struct AsrModel {
    pub encoder: Encoder,
    pub head: Linear,
    pub vocab: TokenVocab,
}

impl AsrModel {
    pub fn new(store: &mut ParamStore, config: &ConformerConfig, vocab: TokenVocab, rng: &mut impl Rng) -> Result<Self> {
        let encoder = Encoder::new(store, ENCODER_PREFIX, config, rng)?;
        let head = Linear::new(store, CTC_HEAD_PREFIX, config.model_dim, vocab.size(), rng);
        Ok(Self { encoder, head, vocab })
    }

    /// `[T', V]` log probabilities from encoder states.
    pub fn head_log_probs<'g, T: Scalar>(&self, b: &Binder<'g, '_, T>, states: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.head.forward(b, states)?.log_softmax())
    }

    pub fn log_probs<'g, T: Scalar>(
        &self,
        b: &Binder<'g, '_, T>,
        features: &FeatureSequence,
        pattern: AttentionPattern,
        adapters: Option<&[BlockAdapters]>,
    ) -> Result<Var<'g, T>> {
        let states = self.encoder.forward_adapted(b, features, pattern, adapters)?;
        self.head_log_probs(b, states)
    }

    /// CTC loss for one utterance; `None` when the target cannot fit.
    pub fn loss<'g, T: Scalar>(
        &self,
        b: &Binder<'g, '_, T>,
        features: &FeatureSequence,
        target: &LabelSequence,
        pattern: AttentionPattern,
        adapters: Option<&[BlockAdapters]>,
    ) -> Result<Option<Var<'g, T>>> {
        ctc_loss_var(self.log_probs(b, features, pattern, adapters)?, target)
    }

    /// Greedy transcript of one utterance.
    pub fn transcribe(
        &self,
        store: &ParamStore,
        features: &FeatureSequence,
        pattern: AttentionPattern,
        adapters: Option<&[BlockAdapters]>,
    ) -> Result<String> {
        let g = Graph::<f64>::new();
        let b = Binder::frozen(&g, store);
        let lp = self.log_probs(&b, features, pattern, adapters)?;
        let labels = lp.with_value(|t| ctc_greedy_decode(t.data(), t.cols()));
        Ok(self.vocab.decode(&labels))
    }
}
