//! Masked prediction of random-projection quantizer labels.
//!
//! Labels come from a frozen random projection of stacked feature frames
//! followed by a cosine-similarity nearest neighbour search in frozen random
//! codebooks. The encoder sees masked features and `N` softmax heads predict
//! the `N` codebook labels at masked positions.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use sha2::{Digest, Sha256};

use crate::encoder::{stack_frames, AttentionPattern, Encoder, Linear};
use crate::features::{FeatureSequence, FRAME_HOP_SECONDS};
use crate::numerics::{Binder, ParamStore, Scalar, Tensor, Var};
use crate::{Error, Result};

static EMPTY_MASK_STEPS: AtomicUsize = AtomicUsize::new(0);

/// Number of loss evaluations so far that saw no masked frame.
pub fn empty_mask_steps() -> usize {
    EMPTY_MASK_STEPS.load(Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomQuantizer {
    /// `[d_in, d_emb]`.
    projection: Tensor,
    /// `N * c * d_emb`, book-major.
    codebooks: Vec<f64>,
    num_codebooks: usize,
    codebook_size: usize,
    checksum: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTargets {
    /// `labels[n][t]` in `[0, c)`.
    pub labels: Vec<Vec<usize>>,
    /// Sorted masked frame indices.
    pub mask_indices: Vec<usize>,
    /// Frames whose projection had zero norm and were assigned code 0.
    pub degenerate_frames: usize,
}

impl RandomQuantizer {
    /// Projection entries `N(0, 1/d_in)`, codebook entries `N(0, 1)`.
    pub fn new(d_in: usize, d_emb: usize, codebook_size: usize, num_codebooks: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (1.0 / d_in as f64).sqrt();
        let proj: Vec<f64> = (0..d_in * d_emb)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        let books = (0..num_codebooks * codebook_size * d_emb)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Self::from_parts(Tensor::matrix(d_in, d_emb, proj)?, books, num_codebooks, codebook_size)
    }

    pub fn from_parts(projection: Tensor, codebooks: Vec<f64>, num_codebooks: usize, codebook_size: usize) -> Result<Self> {
        let d_emb = projection.cols();
        if projection.shape().len() != 2 || codebooks.len() != num_codebooks * codebook_size * d_emb || codebook_size == 0 {
            return Err(Error::Config(format!(
                "codebooks hold {} values, expected {num_codebooks} x {codebook_size} x {d_emb}",
                codebooks.len()
            )));
        }
        if let Some(i) = codebooks.chunks(d_emb).position(|v| v.iter().all(|&x| x == 0.0)) {
            return Err(Error::Config(format!("codebook vector {i} has zero norm")));
        }
        let mut q = Self {
            projection,
            codebooks,
            num_codebooks,
            codebook_size,
            checksum: String::new(),
        };
        q.checksum = q.compute_checksum();
        Ok(q)
    }

    pub fn input_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn num_codebooks(&self) -> usize {
        self.num_codebooks
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn codebooks(&self) -> &[f64] {
        &self.codebooks
    }

    fn compute_checksum(&self) -> String {
        let mut h = Sha256::new();
        for x in self.projection.data().iter().chain(&self.codebooks) {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Checksum taken at construction.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Fails if the frozen state no longer matches its construction checksum.
    pub fn verify(&self) -> Result<()> {
        if self.compute_checksum() != self.checksum {
            return Err(Error::Config("quantizer state changed after construction".into()));
        }
        Ok(())
    }

    /// Codebook labels for every row of `frames` (`[T, d_in]`).
    pub fn quantize(&self, frames: &Tensor) -> Result<QuantizedTargets> {
        if frames.cols() != self.input_dim() {
            return Err(Error::Input(format!(
                "quantizer expects {}-dim frames, got {}",
                self.input_dim(),
                frames.cols()
            )));
        }
        let d = self.embedding_dim();
        let c = self.codebook_size;
        let unit: Vec<f64> = self
            .codebooks
            .chunks(d)
            .flat_map(|v| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(move |x| x / n)
            })
            .collect();
        let projected = crate::numerics::matmul_kernel(frames.data(), self.projection.data(), frames.rows(), frames.cols(), d);
        let mut labels = vec![vec![0; frames.rows()]; self.num_codebooks];
        let mut degenerate = 0;
        for (t, p) in projected.chunks(d).enumerate() {
            if p.iter().all(|&x| x == 0.0) {
                degenerate += 1;
                continue;
            }
            // The positive frame norm does not change the argmax.
            for (n, book) in unit.chunks(c * d).enumerate() {
                let mut best = (0, f64::NEG_INFINITY);
                for (j, v) in book.chunks(d).enumerate() {
                    let s: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
                    if s > best.1 {
                        best = (j, s);
                    }
                }
                labels[n][t] = best.0;
            }
        }
        Ok(QuantizedTargets {
            labels,
            mask_indices: Vec::new(),
            degenerate_frames: degenerate,
        })
    }

    /// Projection and codebooks as named tensors for checkpointing.
    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("quantizer.projection", self.projection.clone());
        s.insert(
            "quantizer.codebooks",
            Tensor::new(
                vec![self.num_codebooks, self.codebook_size, self.embedding_dim()],
                self.codebooks.clone(),
            )
            .unwrap(),
        );
        s
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let get = |n: &str| {
            store
                .by_name(n)
                .ok_or_else(|| Error::Checkpoint(format!("missing {n}")))
        };
        let proj = get("quantizer.projection")?.clone();
        let books = get("quantizer.codebooks")?;
        let shape = books.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Checkpoint(format!("quantizer.codebooks has shape {shape:?}")));
        }
        Self::from_parts(proj, books.data().to_vec(), shape[0], shape[1])
    }
}

pub fn quantize(frames: &Tensor, quantizer: &RandomQuantizer) -> Result<QuantizedTargets> {
    quantizer.quantize(frames)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub start_probability: f64,
    pub span_seconds: f64,
    pub noise_mean: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            start_probability: 0.01,
            span_seconds: 0.4,
            noise_mean: 0.0,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.start_probability) {
            return Err(Error::Config(format!("mask probability {} outside [0, 1]", self.start_probability)));
        }
        if !(self.span_seconds > 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Config("mask span must be positive and noise std non-negative".into()));
        }
        Ok(())
    }

    /// Span length in feature frames, at least one.
    pub fn span_frames(&self) -> usize {
        ((self.span_seconds / FRAME_HOP_SECONDS).round() as usize).max(1)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Expected masked fraction far from the sequence start.
    pub fn expected_coverage(&self) -> f64 {
        1.0 - (1.0 - self.start_probability).powi(self.span_frames() as i32)
    }

    /// Masked flags for `num_frames` frames.
    pub fn sample(&self, num_frames: usize, rng: &mut impl Rng) -> Vec<bool> {
        let span = self.span_frames();
        let mut mask = vec![false; num_frames];
        for t in 0..num_frames {
            if rng.gen_bool(self.start_probability) {
                mask[t..(t + span).min(num_frames)].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }
}

/// Replaces masked feature frames by Gaussian noise. Unmasked frames are
/// copied unchanged.
pub fn apply_mask(features: &FeatureSequence, spec: &MaskSpec) -> Result<(FeatureSequence, Vec<usize>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mask = spec.sample(features.num_frames, &mut rng);
    let noise = Normal::new(spec.noise_mean, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let d = features.dims();
    let mut out = features.clone();
    let mut indices = Vec::new();
    for (t, &m) in mask.iter().enumerate() {
        if m {
            indices.push(t);
            out.frames[t * d..(t + 1) * d]
                .iter_mut()
                .for_each(|x| *x = noise.sample(&mut rng));
        }
    }
    Ok((out, indices))
}

/// Encoder frames that contain at least one masked feature frame.
pub fn encoder_mask(feature_mask: &[usize], factor: usize, encoder_frames: usize) -> Vec<usize> {
    let mut out: Vec<usize> = feature_mask
        .iter()
        .map(|&t| t / factor)
        .filter(|&t| t < encoder_frames)
        .collect();
    out.dedup();
    out
}

pub struct BestRqLoss<'g, T: Scalar> {
    pub loss: Var<'g, T>,
    pub masked_frames: usize,
    /// Correct argmax predictions summed over heads and masked frames.
    pub correct: usize,
}

/// Mean over heads of the mean masked-frame cross-entropy. Without masked
/// frames the loss is a constant zero.
pub fn bestrq_loss<'g, T: Scalar>(
    b: &Binder<'g, '_, T>,
    heads: &[Linear],
    encoder_output: Var<'g, T>,
    targets: &QuantizedTargets,
) -> Result<BestRqLoss<'g, T>> {
    if heads.len() != targets.labels.len() {
        return Err(Error::Input(format!(
            "{} heads for {} codebooks",
            heads.len(),
            targets.labels.len()
        )));
    }
    if let Some(l) = targets.labels.iter().find(|l| l.len() != encoder_output.rows()) {
        return Err(Error::Input(format!(
            "{} labels for {} encoder frames",
            l.len(),
            encoder_output.rows()
        )));
    }
    let m = targets.mask_indices.len();
    if m == 0 || heads.is_empty() {
        EMPTY_MASK_STEPS.fetch_add(1, Ordering::Relaxed);
        log::warn!("no masked frames in this step; loss set to 0");
        return Ok(BestRqLoss {
            loss: b.constant(Tensor::scalar(T::zero())),
            masked_frames: 0,
            correct: 0,
        });
    }
    let masked = encoder_output.gather_rows(&targets.mask_indices)?;
    let scale = -1.0 / (heads.len() * m) as f64;
    let mut total: Option<Var<'g, T>> = None;
    let mut correct = 0;
    for (head, labels) in heads.iter().zip(&targets.labels) {
        let picked: Vec<usize> = targets.mask_indices.iter().map(|&t| labels[t]).collect();
        let logp = head.forward(b, masked)?.log_softmax();
        correct += logp.with_value(|v| {
            (0..m)
                .filter(|&r| {
                    let row = v.row(r);
                    let arg = (0..row.len()).fold(0, |a, j| if row[j] > row[a] { j } else { a });
                    arg == picked[r]
                })
                .count()
        });
        let term = logp.pick_cols(&picked)?.sum().scale(scale);
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(BestRqLoss {
        loss: total.expect("at least one head"),
        masked_frames: m,
        correct,
    })
}

/// Quantizer, prediction heads and masking policy for pre-training.
#[derive(Clone, Debug)]
pub struct BestRq {
    pub quantizer: RandomQuantizer,
    pub heads: Vec<Linear>,
    pub mask: MaskSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestRqConfig {
    pub num_codebooks: usize,
    pub codebook_size: usize,
    pub embedding_dim: usize,
    pub mask: MaskSpec,
}

impl Default for BestRqConfig {
    fn default() -> Self {
        Self {
            num_codebooks: 16,
            codebook_size: 256,
            embedding_dim: 16,
            mask: MaskSpec::default(),
        }
    }
}

impl BestRq {
    pub fn new(
        store: &mut ParamStore,
        encoder: &Encoder,
        config: &BestRqConfig,
        quantizer_seed: u64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.mask.validate()?;
        let quantizer = RandomQuantizer::new(
            encoder.config.stem_input_dim(),
            config.embedding_dim,
            config.codebook_size,
            config.num_codebooks,
            quantizer_seed,
        )?;
        Ok(Self::with_quantizer(store, encoder, quantizer, config.mask.clone(), rng))
    }

    pub fn with_quantizer(
        store: &mut ParamStore,
        encoder: &Encoder,
        quantizer: RandomQuantizer,
        mask: MaskSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let heads = (0..quantizer.num_codebooks())
            .map(|n| {
                Linear::new(
                    store,
                    &format!("bestrq.heads.{n}"),
                    encoder.config.model_dim,
                    quantizer.codebook_size(),
                    rng,
                )
            })
            .collect();
        Self { quantizer, heads, mask }
    }

    /// Labels on clean stacked frames, encoder-level mask indices, and the
    /// masked features the encoder should see.
    pub fn prepare(&self, features: &FeatureSequence, factor: usize, mask_seed: u64) -> Result<(QuantizedTargets, FeatureSequence)> {
        let stacked = stack_frames(features, factor);
        let mut targets = self.quantizer.quantize(&stacked)?;
        let (masked, indices) = apply_mask(features, &self.mask.with_seed(mask_seed))?;
        targets.mask_indices = encoder_mask(&indices, factor, stacked.rows());
        Ok((targets, masked))
    }

    /// Full masked-prediction loss for one utterance.
    pub fn loss<'g, T: Scalar>(
        &self,
        b: &Binder<'g, '_, T>,
        encoder: &Encoder,
        features: &FeatureSequence,
        pattern: AttentionPattern,
        mask_seed: u64,
    ) -> Result<BestRqLoss<'g, T>> {
        #[cfg(debug_assertions)]
        self.quantizer.verify()?;
        let (targets, masked) = self.prepare(features, encoder.config.subsampling_factor, mask_seed)?;
        let out = encoder.forward(b, &masked, pattern)?;
        bestrq_loss(b, &self.heads, out, &targets)
    }
}
