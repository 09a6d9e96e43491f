//! Joint pre-training on unlabeled speech, paired speech-text and unspoken
//! text through a shared encoder.
//!
//! Speech runs through the subsampling stem and a speech-only conformer
//! layer; text runs through a grapheme embedding, a fixed repetition
//! upsampler and a text-only conformer layer. Both feed the shared encoder
//! blocks. Four losses are combined: masked prediction on speech, CTC on
//! paired speech, a consistency term pulling text representations towards
//! (frozen) speech representations, and CTC reconstruction of masked text
//! representations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::asr::AsrModel;
use crate::bestrq::{BestRq, MaskSpec};
use crate::ctc::{ctc_loss_var, LabelSequence};
use crate::encoder::{AttentionPattern, ConformerBlock};
use crate::features::FeatureSequence;
use crate::numerics::{Binder, GradMap, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::{derive_seed, Error, Result};

pub const SPEECH_LAYER_PREFIX: &str = "most.speech_layer";
pub const TEXT_PREFIX: &str = "most.text";

/// Each token embedding repeated `factor` times in order.
pub fn upsample_text<'g, T: Scalar>(token_embeddings: Var<'g, T>, factor: usize) -> Result<Var<'g, T>> {
    Ok(token_embeddings.repeat_rows(factor)?)
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub repeat: usize,
    pub layer: ConformerBlock,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, model: &AsrModel, repeat: usize, rng: &mut impl Rng) -> Self {
        let d = model.encoder.config.model_dim;
        let v = model.vocab.size();
        let table: Vec<f64> = (0..v * d).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            embedding: store.insert(format!("{TEXT_PREFIX}.embedding"), Tensor::matrix(v, d, table).unwrap()),
            repeat,
            layer: ConformerBlock::new(store, &format!("{TEXT_PREFIX}.layer"), &model.encoder.config, rng),
        }
    }

    /// `[repeat * len, d]` frames at the shared encoder's input rate.
    pub fn forward<'g, T: Scalar>(
        &self,
        b: &Binder<'g, '_, T>,
        model: &AsrModel,
        text: &LabelSequence,
        pattern: AttentionPattern,
    ) -> Result<Var<'g, T>> {
        if text.is_empty() {
            return Err(Error::Input("empty transcript".into()));
        }
        let emb = b.get(self.embedding).gather_rows(&text.ids)?;
        let x = upsample_text(emb, self.repeat)?;
        let spec = model.encoder.attention_spec(pattern, x.rows());
        self.layer.forward(b, x, &spec, None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MostLossWeights {
    pub bestrq: f64,
    pub asr: f64,
    pub consistency: f64,
    pub reconstruction: f64,
}

impl Default for MostLossWeights {
    fn default() -> Self {
        Self {
            bestrq: 1.0,
            asr: 1.0,
            consistency: 1.0,
            reconstruction: 1.0,
        }
    }
}

impl MostLossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.bestrq, self.asr, self.consistency, self.reconstruction];
        if w.iter().any(|&x| !(x >= 0.0)) || w.iter().all(|&x| x == 0.0) {
            return Err(Error::Config(format!("MOST weights {w:?} must be non-negative with one positive")));
        }
        Ok(())
    }
}

/// Step at which unspoken text starts to contribute.
pub fn curriculum_gate(total_steps: usize) -> usize {
    (0.17 * total_steps as f64).round() as usize
}

#[derive(Clone, Debug, Default)]
pub struct MostBatch {
    pub unlabeled_speech: Vec<FeatureSequence>,
    pub paired: Vec<(FeatureSequence, LabelSequence)>,
    pub unlabeled_text: Vec<LabelSequence>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MostTerm {
    BestRq,
    Asr,
    Consistency,
    Reconstruction,
}

impl MostTerm {
    pub const ALL: [MostTerm; 4] = [Self::BestRq, Self::Asr, Self::Consistency, Self::Reconstruction];

    pub fn name(self) -> &'static str {
        match self {
            Self::BestRq => "bestrq",
            Self::Asr => "asr",
            Self::Consistency => "consistency",
            Self::Reconstruction => "reconstruction",
        }
    }
}

/// Component values, the weighted total and per-term gradients of one step.
#[derive(Clone, Debug)]
pub struct MostStepOutput {
    pub losses: [f64; 4],
    pub total: f64,
    /// Unweighted gradient of each term, in [`MostTerm::ALL`] order.
    pub term_grads: Vec<GradMap>,
    /// Weighted sum of the term gradients.
    pub grads: GradMap,
    /// Terms that had no usable items this step.
    pub missing: Vec<MostTerm>,
    pub skipped_items: usize,
}

impl MostStepOutput {
    pub fn loss(&self, term: MostTerm) -> f64 {
        self.losses[term as usize]
    }
}

#[derive(Clone, Debug)]
pub struct MostModel {
    pub asr: AsrModel,
    pub speech_layer: ConformerBlock,
    pub text: TextEncoder,
    pub bestrq: BestRq,
    pub pattern: AttentionPattern,
    /// Masking of text-encoder frames before reconstruction.
    pub text_mask: MaskSpec,
    pub weights: MostLossWeights,
}

impl MostModel {
    /// Adds the speech-only layer and the text encoder to an existing
    /// model; both start from random weights.
    pub fn extend(
        store: &mut ParamStore,
        asr: AsrModel,
        bestrq: BestRq,
        pattern: AttentionPattern,
        text_repeat: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let speech_layer = ConformerBlock::new(store, SPEECH_LAYER_PREFIX, &asr.encoder.config, rng);
        let text = TextEncoder::new(store, &asr, text_repeat, rng);
        Self {
            asr,
            speech_layer,
            text,
            bestrq,
            pattern,
            text_mask: MaskSpec {
                start_probability: 0.05,
                span_seconds: 0.16,
                ..MaskSpec::default()
            },
            weights: MostLossWeights::default(),
        }
    }

    pub fn is_speech_encoder_param(name: &str) -> bool {
        name.starts_with("encoder.stem.") || name.starts_with(&format!("{SPEECH_LAYER_PREFIX}."))
    }

    /// Stem plus speech-only layer.
    pub fn speech_encoder<'g, T: Scalar>(&self, b: &Binder<'g, '_, T>, features: &FeatureSequence) -> Result<Var<'g, T>> {
        let enc = &self.asr.encoder;
        let x = enc.embed(b, enc.stacked_input(b, features)?)?;
        let spec = enc.attention_spec(self.pattern, x.rows());
        self.speech_layer.forward(b, x, &spec, None)
    }

    pub fn shared_encoder<'g, T: Scalar>(&self, b: &Binder<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        self.asr.encoder.forward_blocks(b, x, self.pattern, None)
    }

    pub fn bestrq_loss<'g, T: Scalar>(&self, b: &Binder<'g, '_, T>, features: &FeatureSequence, mask_seed: u64) -> Result<Var<'g, T>> {
        #[cfg(debug_assertions)]
        self.bestrq.quantizer.verify()?;
        let factor = self.asr.encoder.config.subsampling_factor;
        let (targets, masked) = self.bestrq.prepare(features, factor, mask_seed)?;
        let out = self.shared_encoder(b, self.speech_encoder(b, &masked)?)?;
        Ok(crate::bestrq::bestrq_loss(b, &self.bestrq.heads, out, &targets)?.loss)
    }

    pub fn asr_loss<'g, T: Scalar>(
        &self,
        b: &Binder<'g, '_, T>,
        features: &FeatureSequence,
        text: &LabelSequence,
    ) -> Result<Option<Var<'g, T>>> {
        let states = self.shared_encoder(b, self.speech_encoder(b, features)?)?;
        ctc_loss_var(self.asr.head_log_probs(b, states)?, text)
    }

    /// Mean squared error between the time-interpolated text encoding and
    /// the detached speech encoding. `None` for an empty transcript.
    pub fn consistency_loss<'g, T: Scalar>(
        &self,
        b: &Binder<'g, '_, T>,
        features: &FeatureSequence,
        text: &LabelSequence,
    ) -> Result<Option<Var<'g, T>>> {
        if text.is_empty() {
            return Ok(None);
        }
        let speech = self.speech_encoder(b, features)?.detach();
        let text_frames = self.text.forward(b, &self.asr, text, self.pattern)?;
        Ok(Some(consistency_mse(text_frames, speech)?))
    }

    /// Text encoding with masked frames replaced by noise, then the shared
    /// encoder and CTC against the original text.
    pub fn text_reconstruction_loss<'g, T: Scalar>(
        &self,
        b: &Binder<'g, '_, T>,
        text: &LabelSequence,
        mask_seed: u64,
    ) -> Result<Option<Var<'g, T>>> {
        if text.is_empty() {
            return Ok(None);
        }
        let frames = self.text.forward(b, &self.asr, text, self.pattern)?;
        let (rows, cols) = (frames.rows(), frames.cols());
        let spec = self.text_mask.with_seed(mask_seed);
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        // Text frames sit at the encoder rate, so the span shrinks by the
        // subsampling factor.
        let factor = self.asr.encoder.config.subsampling_factor;
        let span = spec.span_frames().div_ceil(factor).max(1);
        let mut keep = vec![true; rows];
        for t in 0..rows {
            if rng.gen_bool(spec.start_probability) {
                keep[t..(t + span).min(rows)].iter_mut().for_each(|k| *k = false);
            }
        }
        let noise = Normal::new(spec.noise_mean, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        let fill: Vec<T> = (0..rows * cols).map(|_| T::from_f64(noise.sample(&mut rng))).collect();
        let masked = frames.keep_rows(&keep, &Tensor::matrix(rows, cols, fill)?)?;
        let states = self.shared_encoder(b, masked)?;
        ctc_loss_var(self.asr.head_log_probs(b, states)?, text)
    }

    /// Losses and gradients for one step. Each term is averaged over its
    /// sub-batch and differentiated separately; the total gradient is the
    /// weighted sum in fixed term order.
    pub fn step(
        &self,
        store: &ParamStore,
        batch: &MostBatch,
        step: usize,
        gate_step: usize,
        seed: u64,
    ) -> Result<MostStepOutput> {
        self.weights.validate()?;
        let gated = step >= gate_step;
        let mut losses = [0.0; 4];
        let mut term_grads = Vec::with_capacity(4);
        let mut missing = Vec::new();
        let mut skipped = 0;
        for term in MostTerm::ALL {
            let g = Graph::<f64>::new();
            let b = Binder::new(&g, store);
            let mut parts: Vec<Var<'_, f64>> = Vec::new();
            match term {
                MostTerm::BestRq => {
                    for (i, f) in batch.unlabeled_speech.iter().enumerate() {
                        parts.push(self.bestrq_loss(&b, f, derive_seed(seed, &[step as u64, 0, i as u64]))?);
                    }
                }
                MostTerm::Asr => {
                    for (f, t) in &batch.paired {
                        match self.asr_loss(&b, f, t)? {
                            Some(l) => parts.push(l),
                            None => skipped += 1,
                        }
                    }
                }
                MostTerm::Consistency => {
                    for (f, t) in &batch.paired {
                        match self.consistency_loss(&b, f, t)? {
                            Some(l) => parts.push(l),
                            None => skipped += 1,
                        }
                    }
                }
                MostTerm::Reconstruction if gated => {
                    for (i, t) in batch.unlabeled_text.iter().enumerate() {
                        match self.text_reconstruction_loss(&b, t, derive_seed(seed, &[step as u64, 3, i as u64]))? {
                            Some(l) => parts.push(l),
                            None => skipped += 1,
                        }
                    }
                }
                MostTerm::Reconstruction => {}
            }
            if parts.is_empty() {
                if term != MostTerm::Reconstruction || gated {
                    missing.push(term);
                }
                term_grads.push(GradMap::new(store.len()));
                continue;
            }
            let n = parts.len() as f64;
            let mean = Var::concat_rows(&parts.iter().map(|p| p.reshape(&[1, 1])).collect::<Result<Vec<_>, _>>()?)?
                .sum()
                .scale(1.0 / n);
            losses[term as usize] = mean.item();
            term_grads.push(b.grads(&g.backward(mean)?));
        }
        let w = [
            self.weights.bestrq,
            self.weights.asr,
            self.weights.consistency,
            if gated { self.weights.reconstruction } else { 0.0 },
        ];
        let mut grads = GradMap::new(store.len());
        for (gm, &wi) in term_grads.iter().zip(&w) {
            if wi != 0.0 {
                grads.add_scaled(gm, wi);
            }
        }
        let total = most_total(&losses, &self.weights, gated);
        Ok(MostStepOutput {
            losses,
            total,
            term_grads,
            grads,
            missing,
            skipped_items: skipped,
        })
    }
}

pub fn consistency_mse<'g, T: Scalar>(text_frames: Var<'g, T>, speech: Var<'g, T>) -> Result<Var<'g, T>> {
    let aligned = text_frames.interpolate_rows(speech.rows())?;
    Ok(aligned.sub(speech)?.square()?.mean())
}

/// Weighted combination of the four component losses; reconstruction only
/// counts once the gate has opened.
pub fn most_total(losses: &[f64; 4], w: &MostLossWeights, gated: bool) -> f64 {
    let recon = if gated { w.reconstruction * losses[3] } else { 0.0 };
    w.bestrq * losses[0] + w.asr * losses[1] + w.consistency * losses[2] + recon
}
