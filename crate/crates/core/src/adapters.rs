//! Residual bottleneck adapters for adapting a frozen encoder per language.

use indexmap::IndexMap;
use rand::Rng;

use crate::encoder::{ConformerConfig, Encoder, LayerNorm, Linear};
use crate::numerics::{Binder, ParamStore, Scalar, Var};
use crate::{Error, Result};

/// Target share of added parameters relative to the base encoder.
pub const DEFAULT_ADAPTER_RATIO: f64 = 0.023;

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    pub bottleneck_dim: usize,
}

impl AdapterConfig {
    /// Picks the bottleneck whose per-language parameter ratio is closest to
    /// `target`.
    pub fn for_ratio(model: &ConformerConfig, target: f64) -> Self {
        let base = model.param_count() as f64;
        let best = (1..=model.model_dim)
            .min_by(|&a, &b| {
                let ea = (adapter_param_count(model, a) as f64 / base - target).abs();
                let eb = (adapter_param_count(model, b) as f64 / base - target).abs();
                ea.total_cmp(&eb)
            })
            .unwrap_or(1);
        Self { bottleneck_dim: best }
    }

    pub fn validate(&self, model: &ConformerConfig) -> Result<()> {
        if self.bottleneck_dim == 0 || self.bottleneck_dim > model.model_dim {
            return Err(Error::Config(format!(
                "adapter bottleneck {} must be in 1..={}",
                self.bottleneck_dim, model.model_dim
            )));
        }
        Ok(())
    }
}

/// Parameters added by one language's adapter set.
pub fn adapter_param_count(model: &ConformerConfig, bottleneck: usize) -> usize {
    let d = model.model_dim;
    let one = 2 * d + (d * bottleneck + bottleneck) + (bottleneck * d + d);
    2 * one * model.num_layers
}

/// Layer norm, down projection, swish, up projection. The up projection
/// starts at zero so a fresh adapter is an exact no-op.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub ln: LayerNorm,
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, bottleneck: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), dim),
            down: Linear::new(store, &format!("{name}.down"), dim, bottleneck, rng),
            up: Linear::zeros(store, &format!("{name}.up"), bottleneck, dim),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, b: &Binder<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.down.forward(b, self.ln.forward(b, x)?)?.swish();
        self.up.forward(b, h)
    }
}

/// The two adapters of one conformer block.
#[derive(Clone, Debug)]
pub struct BlockAdapters {
    pub parallel_ff1: Adapter,
    pub parallel_ff2: Adapter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterReport {
    pub base_params: usize,
    pub adapter_params_per_language: usize,
    pub languages: usize,
}

impl AdapterReport {
    pub fn ratio(&self) -> f64 {
        self.adapter_params_per_language as f64 / self.base_params as f64
    }
}

/// Per-language adapter sets living in the same parameter store as the
/// encoder, under `adapters.<lang>.`.
#[derive(Clone, Debug)]
pub struct AdapterBank {
    pub config: AdapterConfig,
    sets: IndexMap<String, Vec<BlockAdapters>>,
}

pub fn adapter_prefix(language: &str) -> String {
    format!("adapters.{language}.")
}

/// Registers zero-initialised adapters for each language.
pub fn attach_adapters(
    encoder: &Encoder,
    store: &mut ParamStore,
    config: &AdapterConfig,
    languages: &[&str],
    rng: &mut impl Rng,
) -> Result<(AdapterBank, AdapterReport)> {
    config.validate(&encoder.config)?;
    let d = encoder.config.model_dim;
    let mut sets = IndexMap::new();
    for &lang in languages {
        if sets.contains_key(lang) {
            return Err(Error::Config(format!("duplicate adapter language {lang:?}")));
        }
        let prefix = adapter_prefix(lang);
        let blocks = (0..encoder.blocks.len())
            .map(|i| BlockAdapters {
                parallel_ff1: Adapter::new(store, &format!("{prefix}layers.{i}.ff1"), d, config.bottleneck_dim, rng),
                parallel_ff2: Adapter::new(store, &format!("{prefix}layers.{i}.ff2"), d, config.bottleneck_dim, rng),
            })
            .collect();
        sets.insert(lang.to_string(), blocks);
    }
    let report = AdapterReport {
        base_params: encoder.config.param_count(),
        adapter_params_per_language: adapter_param_count(&encoder.config, config.bottleneck_dim),
        languages: languages.len(),
    };
    Ok((
        AdapterBank {
            config: config.clone(),
            sets,
        },
        report,
    ))
}

impl AdapterBank {
    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.sets.keys().map(String::as_str)
    }

    /// Adapter set for `language`; an unknown tag lists the registered ones.
    pub fn select(&self, language: &str) -> Result<&[BlockAdapters]> {
        self.sets.get(language).map(Vec::as_slice).ok_or_else(|| {
            Error::Config(format!(
                "no adapters for language {language:?}; registered: {}",
                self.sets.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    /// Trainable predicate selecting only `language`'s adapter parameters.
    pub fn trainable(&self, language: &str) -> Result<impl Fn(&str) -> bool + 'static> {
        self.select(language)?;
        let prefix = adapter_prefix(language);
        Ok(move |name: &str| name.starts_with(&prefix))
    }
}
