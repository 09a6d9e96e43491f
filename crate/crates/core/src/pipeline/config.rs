//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; `include = path` splices
//! another file (relative to the including file) at that point. Later
//! assignments override earlier ones.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::optim::{OptimConfig, Schedule};
use crate::bestrq::{BestRqConfig, MaskSpec};
use crate::ctc::TokenVocab;
use crate::encoder::{AttentionPattern, ConformerConfig};
use crate::most::MostLossWeights;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: IndexMap<String, String>,
}

impl KvConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.merge_text(text, None, &mut HashSet::new())?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut c = Self::default();
        c.merge_file(path.as_ref(), &mut HashSet::new())?;
        Ok(c)
    }

    fn merge_file(&mut self, path: &Path, seen: &mut HashSet<PathBuf>) -> Result<()> {
        let canon = path
            .canonicalize()
            .map_err(Error::io(format!("config {}", path.display())))?;
        if !seen.insert(canon.clone()) {
            return Err(Error::Config(format!("include cycle through {}", path.display())));
        }
        let text = std::fs::read_to_string(&canon).map_err(Error::io(format!("config {}", path.display())))?;
        self.merge_text(&text, canon.parent(), seen)?;
        seen.remove(&canon);
        Ok(())
    }

    fn merge_text(&mut self, text: &str, base: Option<&Path>, seen: &mut HashSet<PathBuf>) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "include" {
                let p = base.map_or_else(|| PathBuf::from(v), |b| b.join(v));
                self.merge_file(&p, seen)?;
            } else {
                self.entries.insert(k.to_string(), v.to_string());
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// Pulls typed values out of a [`KvConfig`], tracking which keys were used.
struct Reader<'a> {
    kv: &'a KvConfig,
    used: HashSet<&'static str>,
}

impl<'a> Reader<'a> {
    fn parse<T: FromStr>(&mut self, key: &'static str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.used.insert(key);
        match self.kv.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))),
        }
    }

    fn path(&mut self, key: &'static str) -> Option<PathBuf> {
        self.used.insert(key);
        self.kv.get(key).filter(|v| !v.is_empty()).map(PathBuf::from)
    }

    fn finish(self) -> Result<()> {
        let unknown: Vec<&str> = self
            .kv
            .iter()
            .map(|(k, _)| k)
            .filter(|k| !self.used.contains(k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Most,
    Finetune,
    Adapt,
    Nst,
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "pretrain" => Self::Pretrain,
            "most" => Self::Most,
            "finetune" => Self::Finetune,
            "adapt" => Self::Adapt,
            "nst" => Self::Nst,
            _ => return Err(format!("unknown stage {s:?}")),
        })
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pretrain => "pretrain",
            Self::Most => "most",
            Self::Finetune => "finetune",
            Self::Adapt => "adapt",
            Self::Nst => "nst",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataPaths {
    /// Audio without transcripts.
    pub unlabeled: Option<PathBuf>,
    /// Audio with transcripts.
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    /// One transcript per line.
    pub text: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub seed: u64,
    pub model: ConformerConfig,
    pub pattern: AttentionPattern,
    pub vocab_letters: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub encoder_optim: OptimConfig,
    pub decoder_optim: OptimConfig,
    pub bestrq: BestRqConfig,
    pub most_weights: MostLossWeights,
    /// Unlabeled speech, paired and text sub-batch sizes.
    pub most_batches: (usize, usize, usize),
    pub most_text_repeat: usize,
    pub adapter_language: String,
    pub adapter_bottleneck: Option<usize>,
    pub nst_min_wps: f64,
    pub nst_max_wps: f64,
    pub nst_mix_ratio: f64,
    pub data: DataPaths,
    pub init: Option<PathBuf>,
    pub out: PathBuf,
    pub resume: bool,
}

impl TrainConfig {
    /// Keys that do not change a run's trajectory and are left out of the
    /// fingerprint.
    const UNFINGERPRINTED: [&'static str; 5] = ["steps", "out", "resume", "checkpoint_every", "log_every"];

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg = Self::from_kv(&KvConfig::load(path.as_ref())?)?;
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut r = Reader { kv, used: HashSet::new() };
        let stage: Stage = r.parse("stage", Stage::Pretrain)?;
        r.used.insert("seed");
        let seed = kv
            .get("seed")
            .ok_or_else(|| Error::Config("seed is mandatory".into()))?
            .parse()
            .map_err(|e| Error::Config(format!("seed: {e}")))?;
        let pattern: AttentionPattern = r.parse("attention", AttentionPattern::Chunk { size: 200 })?;
        let dm = ConformerConfig::default();
        let mut model = ConformerConfig {
            num_layers: r.parse("model.layers", dm.num_layers)?,
            model_dim: r.parse("model.dim", dm.model_dim)?,
            attention_heads: r.parse("model.heads", dm.attention_heads)?,
            conv_kernel_size: r.parse("model.conv_kernel", dm.conv_kernel_size)?,
            subsampling_factor: r.parse("model.subsampling", dm.subsampling_factor)?,
            relative_attention: r.parse("model.relative_attention", dm.relative_attention)?,
            ff_multiplier: r.parse("model.ff_multiplier", dm.ff_multiplier)?,
            use_conv: r.parse("model.use_conv", dm.use_conv)?,
            bias_cap: 0,
            input_dim: dm.input_dim,
        };
        model.bias_cap = r.parse("model.bias_cap", pattern.bias_cap())?;
        model.validate().map_err(Error::Config)?;
        let steps = r.parse("steps", 100)?;
        let mut encoder_optim = OptimConfig {
            lr: r.parse("optim.encoder_lr", 2e-3)?,
            ..OptimConfig::default()
        };
        let mut decoder_optim = OptimConfig {
            lr: r.parse("optim.decoder_lr", 5e-3)?,
            ..OptimConfig::default()
        };
        let warmup = r.parse("optim.warmup", OptimConfig::default().warmup)?;
        let schedule: Schedule = r.parse("optim.schedule", OptimConfig::default().schedule)?;
        let clip = r.parse("optim.clip", OptimConfig::default().clip)?;
        let final_fraction = r.parse("optim.final_fraction", OptimConfig::default().final_fraction)?;
        for o in [&mut encoder_optim, &mut decoder_optim] {
            o.warmup = warmup;
            o.schedule = schedule;
            o.clip = clip;
            o.final_fraction = final_fraction;
            o.total_steps = steps;
        }
        let dmask = MaskSpec::default();
        let dq = BestRqConfig::default();
        let bestrq = BestRqConfig {
            num_codebooks: r.parse("bestrq.codebooks", dq.num_codebooks)?,
            codebook_size: r.parse("bestrq.codebook_size", dq.codebook_size)?,
            embedding_dim: r.parse("bestrq.embedding_dim", dq.embedding_dim)?,
            mask: MaskSpec {
                start_probability: r.parse("mask.probability", dmask.start_probability)?,
                span_seconds: r.parse("mask.span_seconds", dmask.span_seconds)?,
                noise_mean: r.parse("mask.noise_mean", dmask.noise_mean)?,
                noise_std: r.parse("mask.noise_std", dmask.noise_std)?,
                seed: 0,
            },
        };
        bestrq.mask.validate()?;
        let dw = MostLossWeights::default();
        let most_weights = MostLossWeights {
            bestrq: r.parse("most.w_bestrq", dw.bestrq)?,
            asr: r.parse("most.w_asr", dw.asr)?,
            consistency: r.parse("most.w_consistency", dw.consistency)?,
            reconstruction: r.parse("most.w_reconstruction", dw.reconstruction)?,
        };
        // 4096 : 8192 : 1024 scaled down by one factor.
        let scale: usize = r.parse("most.batch_scale", 1)?;
        let most_batches = (4 * scale, 8 * scale, scale);
        let cfg = Self {
            stage,
            seed,
            model,
            pattern,
            vocab_letters: r.parse("vocab.letters", 8)?,
            steps,
            batch_size: r.parse("batch_size", 8)?,
            checkpoint_every: r.parse("checkpoint_every", 0)?,
            log_every: r.parse("log_every", 10)?,
            encoder_optim,
            decoder_optim,
            bestrq,
            most_weights,
            most_batches,
            most_text_repeat: r.parse("most.text_repeat", 4)?,
            adapter_language: r.parse("adapter.language", String::from("xx"))?,
            adapter_bottleneck: match r.parse("adapter.bottleneck", 0usize)? {
                0 => None,
                b => Some(b),
            },
            nst_min_wps: r.parse("nst.min_wps", crate::nst::DEFAULT_MIN_WPS)?,
            nst_max_wps: r.parse("nst.max_wps", crate::nst::DEFAULT_MAX_WPS)?,
            nst_mix_ratio: r.parse("nst.mix_ratio", 0.5)?,
            data: DataPaths {
                unlabeled: r.path("data.unlabeled"),
                train: r.path("data.train"),
                dev: r.path("data.dev"),
                text: r.path("data.text"),
            },
            init: r.path("init"),
            out: r.path("out").unwrap_or_else(|| PathBuf::from("run")),
            resume: r.parse("resume", false)?,
        };
        r.finish()?;
        if cfg.batch_size == 0 || cfg.vocab_letters == 0 || cfg.vocab_letters > 26 {
            return Err(Error::Config("batch_size must be positive and vocab.letters in 1..=26".into()));
        }
        cfg.most_weights.validate()?;
        Ok(cfg)
    }

    /// Every referenced input must exist.
    pub fn check_files(&self) -> Result<()> {
        let d = &self.data;
        for p in [&d.unlabeled, &d.train, &d.dev, &d.text, &self.init].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> TokenVocab {
        TokenVocab::letters(self.vocab_letters)
    }

    /// Fully resolved configuration, one `key = value` per line.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        let p = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        kv.set("stage", self.stage);
        kv.set("seed", self.seed);
        kv.set("attention", self.pattern);
        kv.set("model.layers", self.model.num_layers);
        kv.set("model.dim", self.model.model_dim);
        kv.set("model.heads", self.model.attention_heads);
        kv.set("model.conv_kernel", self.model.conv_kernel_size);
        kv.set("model.subsampling", self.model.subsampling_factor);
        kv.set("model.relative_attention", self.model.relative_attention);
        kv.set("model.ff_multiplier", self.model.ff_multiplier);
        kv.set("model.use_conv", self.model.use_conv);
        kv.set("model.bias_cap", self.model.bias_cap);
        kv.set("vocab.letters", self.vocab_letters);
        kv.set("steps", self.steps);
        kv.set("batch_size", self.batch_size);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("log_every", self.log_every);
        kv.set("optim.encoder_lr", self.encoder_optim.lr);
        kv.set("optim.decoder_lr", self.decoder_optim.lr);
        kv.set("optim.warmup", self.encoder_optim.warmup);
        kv.set("optim.schedule", self.encoder_optim.schedule);
        kv.set("optim.clip", self.encoder_optim.clip);
        kv.set("optim.final_fraction", self.encoder_optim.final_fraction);
        kv.set("bestrq.codebooks", self.bestrq.num_codebooks);
        kv.set("bestrq.codebook_size", self.bestrq.codebook_size);
        kv.set("bestrq.embedding_dim", self.bestrq.embedding_dim);
        kv.set("mask.probability", self.bestrq.mask.start_probability);
        kv.set("mask.span_seconds", self.bestrq.mask.span_seconds);
        kv.set("mask.noise_mean", self.bestrq.mask.noise_mean);
        kv.set("mask.noise_std", self.bestrq.mask.noise_std);
        kv.set("most.w_bestrq", self.most_weights.bestrq);
        kv.set("most.w_asr", self.most_weights.asr);
        kv.set("most.w_consistency", self.most_weights.consistency);
        kv.set("most.w_reconstruction", self.most_weights.reconstruction);
        kv.set("most.batch_scale", self.most_batches.2);
        kv.set("most.text_repeat", self.most_text_repeat);
        kv.set("adapter.language", &self.adapter_language);
        kv.set("adapter.bottleneck", self.adapter_bottleneck.unwrap_or(0));
        kv.set("nst.min_wps", self.nst_min_wps);
        kv.set("nst.max_wps", self.nst_max_wps);
        kv.set("nst.mix_ratio", self.nst_mix_ratio);
        kv.set("data.unlabeled", p(&self.data.unlabeled));
        kv.set("data.train", p(&self.data.train));
        kv.set("data.dev", p(&self.data.dev));
        kv.set("data.text", p(&self.data.text));
        kv.set("init", p(&self.init));
        kv.set("out", self.out.display());
        kv.set("resume", self.resume);
        kv
    }

    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_kv().iter() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    /// SHA-256 over every trajectory-relevant resolved key.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_kv().iter() {
            if !Self::UNFINGERPRINTED.contains(&k) {
                h.update(format!("{k}={v}\n"));
            }
        }
        hex::encode(h.finalize())
    }
}
