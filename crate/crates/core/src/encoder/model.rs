use rand::Rng;
use rand_distr::StandardNormal;

use super::{AttentionPattern, ConformerConfig};
use crate::adapters::BlockAdapters;
use crate::features::FeatureSequence;
use crate::numerics::{AttentionSpec, Binder, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::{Error, Result};

fn gaussian(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights `N(0, 1/in_dim)`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let w = Tensor::matrix(in_dim, out_dim, gaussian(rng, in_dim * out_dim, (1.0 / in_dim as f64).sqrt())).unwrap();
        Self::from_weights(store, name, w)
    }

    /// Like [`Linear::new`] with no bias term.
    pub fn without_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let w = Tensor::matrix(in_dim, out_dim, gaussian(rng, in_dim * out_dim, (1.0 / in_dim as f64).sqrt())).unwrap();
        Self {
            w: store.insert(format!("{name}.w"), w),
            b: None,
            in_dim,
            out_dim,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::from_weights(store, name, Tensor::zeros(vec![in_dim, out_dim]))
    }

    fn from_weights(store: &mut ParamStore, name: &str, w: Tensor) -> Self {
        let (in_dim, out_dim) = (w.shape()[0], w.shape()[1]);
        Self {
            w: store.insert(format!("{name}.w"), w),
            b: Some(store.insert(format!("{name}.b"), Tensor::zeros(vec![out_dim]))),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, b: &Binder<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = x.matmul(b.get(self.w))?;
        Ok(match self.b {
            Some(id) => y.add_row(b.get(id))?,
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::full(vec![dim], 1.0)),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, b: &Binder<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(x.layer_norm(b.get(self.gamma), b.get(self.beta), Self::EPS)?)
    }
}

/// Pre-norm feed-forward: layer norm, expand, swish, project back.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub ln: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), dim),
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, b: &Binder<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.up.forward(b, self.ln.forward(b, x)?)?.swish();
        self.down.forward(b, h)
    }
}

/// Multi-head self-attention with a learned per-head relative bias.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub ln: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub rel_bias: Option<ParamId>,
    pub heads: usize,
    pub bias_cap: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ConformerConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim;
        let rel_bias = cfg.relative_attention.then(|| {
            store.insert(
                format!("{name}.rel_bias"),
                Tensor::zeros(vec![cfg.attention_heads, 2 * cfg.bias_cap + 1]),
            )
        });
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), d),
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            // A key bias only shifts each query's scores by a constant,
            // which softmax ignores.
            k: Linear::without_bias(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            rel_bias,
            heads: cfg.attention_heads,
            bias_cap: cfg.bias_cap,
        }
    }

    pub fn spec(&self, pattern: AttentionPattern, len: usize) -> AttentionSpec {
        AttentionSpec {
            heads: self.heads,
            ranges: pattern.ranges(len),
            bias_cap: self.bias_cap,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, b: &Binder<'g, '_, T>, x: Var<'g, T>, spec: &AttentionSpec) -> Result<Var<'g, T>> {
        let h = self.ln.forward(b, x)?;
        let q = self.q.forward(b, h)?;
        let k = self.k.forward(b, h)?;
        let v = self.v.forward(b, h)?;
        let bias = self.rel_bias.map(|id| b.get(id));
        let a = q.attention(k, v, bias, spec)?;
        self.out.forward(b, a)
    }
}

/// Gated pointwise projection, depthwise convolution over time, layer norm,
/// swish and a final pointwise projection.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub ln: LayerNorm,
    pub value: Linear,
    pub gate: Linear,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub ln_conv: LayerNorm,
    pub out: Linear,
}

impl ConvModule {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ConformerConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim;
        let k = cfg.conv_kernel_size;
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), d),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            gate: Linear::new(store, &format!("{name}.gate"), d, d, rng),
            depthwise: store.insert(
                format!("{name}.depthwise.w"),
                Tensor::matrix(k, d, gaussian(rng, k * d, (1.0 / k as f64).sqrt())).unwrap(),
            ),
            depthwise_bias: store.insert(format!("{name}.depthwise.b"), Tensor::zeros(vec![d])),
            ln_conv: LayerNorm::new(store, &format!("{name}.ln_conv"), d),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, b: &Binder<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.ln.forward(b, x)?;
        let glu = self.value.forward(b, h)?.mul(self.gate.forward(b, h)?.sigmoid())?;
        let c = glu
            .depthwise_conv1d(b.get(self.depthwise))?
            .add_row(b.get(self.depthwise_bias))?;
        let c = self.ln_conv.forward(b, c)?.swish();
        self.out.forward(b, c)
    }
}

/// Half feed-forward, self-attention, convolution, half feed-forward, each
/// residual, followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ff1: FeedForward,
    pub attn: SelfAttention,
    pub conv: Option<ConvModule>,
    pub ff2: FeedForward,
    pub ln_out: LayerNorm,
}

impl ConformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ConformerConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim;
        let hidden = d * cfg.ff_multiplier;
        Self {
            ff1: FeedForward::new(store, &format!("{name}.ff1"), d, hidden, rng),
            attn: SelfAttention::new(store, &format!("{name}.attn"), cfg, rng),
            conv: cfg.use_conv.then(|| ConvModule::new(store, &format!("{name}.conv"), cfg, rng)),
            ff2: FeedForward::new(store, &format!("{name}.ff2"), d, hidden, rng),
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), d),
        }
    }

    /// Residual adapters, when given, run in parallel with the two
    /// feed-forward sublayers on the same sublayer input.
    pub fn forward<'g, T: Scalar>(
        &self,
        b: &Binder<'g, '_, T>,
        x: Var<'g, T>,
        spec: &AttentionSpec,
        adapters: Option<&BlockAdapters>,
    ) -> Result<Var<'g, T>> {
        let mut x = self.half_ff(b, &self.ff1, x, adapters.map(|a| &a.parallel_ff1))?;
        x = x.add(self.attn.forward(b, x, spec)?)?;
        if let Some(conv) = &self.conv {
            x = x.add(conv.forward(b, x)?)?;
        }
        x = self.half_ff(b, &self.ff2, x, adapters.map(|a| &a.parallel_ff2))?;
        self.ln_out.forward(b, x)
    }

    fn half_ff<'g, T: Scalar>(
        &self,
        b: &Binder<'g, '_, T>,
        ff: &FeedForward,
        x: Var<'g, T>,
        adapter: Option<&crate::adapters::Adapter>,
    ) -> Result<Var<'g, T>> {
        let mut y = x.add(ff.forward(b, x)?.scale(0.5))?;
        if let Some(a) = adapter {
            y = y.add(a.forward(b, x)?)?;
        }
        Ok(y)
    }
}

/// Groups `factor` consecutive frames into one row, dropping a trailing
/// remainder: `[T, D] -> [T / factor, factor * D]`.
pub fn stack_frames(features: &FeatureSequence, factor: usize) -> Tensor {
    let out_len = features.num_frames / factor;
    let width = factor * features.dims();
    Tensor::matrix(out_len, width, features.frames[..out_len * width].to_vec()).unwrap()
}

/// Frame-stacking subsampling stem followed by conformer blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: ConformerConfig,
    pub stem: Linear,
    pub blocks: Vec<ConformerBlock>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &ConformerConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate().map_err(Error::Config)?;
        let stem = Linear::new(store, &format!("{prefix}.stem"), config.stem_input_dim(), config.model_dim, rng);
        let blocks = (0..config.num_layers)
            .map(|i| ConformerBlock::new(store, &format!("{prefix}.layers.{i}"), config, rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            stem,
            blocks,
        })
    }

    /// Attention windows for a sequence of `len` encoder frames.
    pub fn attention_spec(&self, pattern: AttentionPattern, len: usize) -> AttentionSpec {
        AttentionSpec {
            heads: self.config.attention_heads,
            ranges: pattern.ranges(len),
            bias_cap: self.config.bias_cap,
        }
    }

    /// Projects stacked frames `[T', stem_input_dim]` to `[T', model_dim]`.
    pub fn embed<'g, T: Scalar>(&self, b: &Binder<'g, '_, T>, stacked: Var<'g, T>) -> Result<Var<'g, T>> {
        self.stem.forward(b, stacked)
    }

    pub fn stacked_input<'g, T: Scalar>(&self, b: &Binder<'g, '_, T>, features: &FeatureSequence) -> Result<Var<'g, T>> {
        let stacked = stack_frames(features, self.config.subsampling_factor);
        if stacked.rows() == 0 {
            return Err(Error::Input(format!(
                "{} frames give no encoder frames after {}x subsampling",
                features.num_frames, self.config.subsampling_factor
            )));
        }
        Ok(b.constant(stacked.cast()))
    }

    pub fn forward_blocks<'g, T: Scalar>(
        &self,
        b: &Binder<'g, '_, T>,
        mut x: Var<'g, T>,
        pattern: AttentionPattern,
        adapters: Option<&[BlockAdapters]>,
    ) -> Result<Var<'g, T>> {
        let spec = self.attention_spec(pattern, x.rows());
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(b, x, &spec, adapters.map(|a| &a[i]))?;
        }
        Ok(x)
    }

    /// Encodes `[T, 128]` features to `[T / subsampling, model_dim]`.
    pub fn forward<'g, T: Scalar>(
        &self,
        b: &Binder<'g, '_, T>,
        features: &FeatureSequence,
        pattern: AttentionPattern,
    ) -> Result<Var<'g, T>> {
        self.forward_adapted(b, features, pattern, None)
    }

    pub fn forward_adapted<'g, T: Scalar>(
        &self,
        b: &Binder<'g, '_, T>,
        features: &FeatureSequence,
        pattern: AttentionPattern,
        adapters: Option<&[BlockAdapters]>,
    ) -> Result<Var<'g, T>> {
        let x = self.embed(b, self.stacked_input(b, features)?)?;
        self.forward_blocks(b, x, pattern, adapters)
    }
}

/// `conformer_forward`: encode with a fresh inference graph and return the
/// output values.
pub fn conformer_forward(
    encoder: &Encoder,
    store: &ParamStore,
    features: &FeatureSequence,
    pattern: AttentionPattern,
) -> Result<Tensor> {
    let g = crate::numerics::Graph::<f64>::new();
    let b = Binder::frozen(&g, store);
    Ok(encoder.forward(&b, features, pattern)?.value())
}
