//! Training stages over in-memory utterances.
//!
//! Every stage is a pure function of (config, seed, data): batches are a
//! function of the step index, per-item randomness is derived from
//! `(seed, step, item)`, and gradients are reduced in a fixed order. This
//! makes resuming from a checkpoint reproduce the uninterrupted trajectory
//! exactly.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use super::checkpoint::{load_prefix, Checkpoint, CONFIG_FILE, OPTIMIZER, QUANTIZER};
use super::config::TrainConfig;
use super::eval::EvalReport;
use super::manifest::{read_manifest, ManifestEntry};
use super::metrics::MetricsSink;
use super::optim::Adam;
use crate::adapters::{adapter_prefix, attach_adapters, AdapterBank, AdapterConfig, AdapterReport, DEFAULT_ADAPTER_RATIO};
use crate::asr::{AsrModel, CTC_HEAD_PREFIX, ENCODER_PREFIX};
use crate::bestrq::{BestRq, RandomQuantizer};
use crate::ctc::{LabelSequence, TokenVocab};
use crate::encoder::{AttentionPattern, Encoder};
use crate::features::{featurize, read_wav, AudioClip, FeatureSequence};
use crate::most::{curriculum_gate, MostBatch, MostModel, MostTerm};
use crate::nst::{mark_kept, mix_datasets, pseudo_label, PseudoLabeledItem, Source};
use crate::numerics::{Binder, GradMap, Graph, ParamStore};
use crate::{derive_seed, Error, Result};

/// One featurized utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Normalized log-mel features.
    pub features: FeatureSequence,
    pub text: Option<String>,
    pub labels: Option<LabelSequence>,
    pub language: String,
    pub duration: f64,
}

impl Utterance {
    pub fn from_clip(id: impl Into<String>, clip: &AudioClip, text: Option<&str>, language: &str, vocab: &TokenVocab) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            features: featurize(clip).normalized(),
            labels: text.map(|t| vocab.encode(t)).transpose()?,
            text: text.map(str::to_string),
            language: language.to_string(),
            duration: clip.duration(),
        })
    }
}

pub fn load_utterances(entries: &[ManifestEntry], vocab: &TokenVocab) -> Result<Vec<Utterance>> {
    entries
        .iter()
        .map(|e| {
            let clip = read_wav(&e.path)?;
            Utterance::from_clip(e.path.display().to_string(), &clip, e.transcript.as_deref(), &e.language, vocab)
        })
        .collect()
}

/// Item indices of batch `step`: consecutive slices of per-epoch
/// permutations, so any step can be recomputed without replaying earlier
/// ones.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch)
        .map(|i| {
            let pos = step * batch + i;
            let epoch = pos / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64])));
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[pos % n]
        })
        .collect()
}

/// Called after every optimizer step with the number of completed steps.
pub type StepObserver<'a> = dyn FnMut(usize, &ParamStore) -> Result<()> + 'a;

/// Where a stage writes, and how it reports.
pub struct RunContext<'a> {
    pub metrics: &'a mut MetricsSink,
    /// Directory for `checkpoint/`, `config.txt` and stage outputs.
    pub out: Option<PathBuf>,
    pub observer: Option<&'a mut StepObserver<'a>>,
}

impl<'a> RunContext<'a> {
    pub fn memory(metrics: &'a mut MetricsSink) -> Self {
        Self {
            metrics,
            out: None,
            observer: None,
        }
    }

    pub fn checkpoint_dir(&self) -> Option<PathBuf> {
        self.out.as_ref().map(|o| o.join("checkpoint"))
    }
}

struct StepResult {
    loss: f64,
    grads: GradMap,
    fields: Map<String, Value>,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    /// Loss at every step run in this invocation, indexed from `start_step`.
    pub losses: Vec<f64>,
    pub start_step: usize,
    /// Per-step extra fields (accuracy, loss components, ...).
    pub records: Vec<Map<String, Value>>,
}

fn init_rng(cfg: &TrainConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]))
}

/// Resume point from `<out>/checkpoint` when `resume` is set.
fn resume_point(cfg: &TrainConfig, ctx: &RunContext) -> Result<Option<Checkpoint>> {
    if !cfg.resume {
        return Ok(None);
    }
    let Some(dir) = ctx.checkpoint_dir().filter(|d| d.exists()) else {
        return Ok(None);
    };
    let ck = Checkpoint::load(&dir)?;
    if ck.fingerprint != cfg.fingerprint() {
        return Err(Error::Checkpoint(format!(
            "{} was written by a different configuration (fingerprint {} vs {})",
            dir.display(),
            ck.fingerprint,
            cfg.fingerprint()
        )));
    }
    Ok(Some(ck))
}

fn restore(store: &mut ParamStore, opt: &mut Adam, ck: &Checkpoint) -> Result<()> {
    load_prefix(store, ck.params(), "")?;
    if let Some(state) = ck.group(OPTIMIZER) {
        opt.load_state(store, state)?;
    }
    Ok(())
}

/// Shared optimisation loop. `extra` adds non-parameter groups (e.g. the
/// quantizer) to every checkpoint.
fn run_loop(
    cfg: &TrainConfig,
    ctx: &mut RunContext,
    stage: &str,
    store: &mut ParamStore,
    opt: &mut Adam,
    start: usize,
    extra: &[(&str, ParamStore)],
    mut step_fn: impl FnMut(usize, &ParamStore) -> Result<StepResult>,
) -> Result<StageOutcome> {
    if let Some(out) = &ctx.out {
        std::fs::create_dir_all(out).map_err(Error::io(format!("creating {}", out.display())))?;
        std::fs::write(out.join(CONFIG_FILE), cfg.resolved_text()).map_err(Error::io("writing resolved config"))?;
    }
    let make_ck = |step: usize, store: &ParamStore, opt: &Adam| {
        let mut ck = Checkpoint::new(step, cfg.fingerprint(), store.clone()).with_group(OPTIMIZER, opt.state(store));
        for (name, s) in extra {
            ck = ck.with_group(name, s.clone());
        }
        ck
    };
    let save = |ck: &Checkpoint, ctx: &RunContext| -> Result<()> {
        if let Some(dir) = ctx.checkpoint_dir() {
            ck.save(&dir)?;
            if let Some(out) = &ctx.out {
                std::fs::copy(out.join(CONFIG_FILE), dir.join(CONFIG_FILE)).map_err(Error::io("copying config"))?;
            }
        }
        Ok(())
    };
    let mut losses = Vec::new();
    let mut records = Vec::new();
    for step in start..cfg.steps {
        let r = step_fn(step, store)?;
        if !r.loss.is_finite() || !r.grads.is_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("{stage} loss {}", r.loss),
            });
        }
        let stats = opt.step(store, &r.grads);
        losses.push(r.loss);
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            let mut fields = r.fields.clone();
            fields.insert("stage".into(), json!(stage));
            fields.insert("step".into(), json!(step));
            fields.insert("loss".into(), json!(r.loss));
            for s in &stats {
                fields.insert(format!("lr_{}", s.name), json!(s.lr));
                fields.insert(format!("grad_norm_{}", s.name), json!(s.grad_norm));
            }
            ctx.metrics.emit("step", Value::Object(fields))?;
        }
        records.push(r.fields);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
            save(&make_ck(step + 1, store, opt), ctx)?;
        }
        if let Some(obs) = ctx.observer.as_mut() {
            obs(step + 1, store)?;
        }
    }
    let ck = make_ck(cfg.steps.max(start), store, opt);
    save(&ck, ctx)?;
    Ok(StageOutcome {
        checkpoint: ck,
        losses,
        start_step: start,
        records,
    })
}

fn mean_grads(parts: Vec<GradMap>, len: usize) -> GradMap {
    let mut g = GradMap::new(len);
    let n = parts.len().max(1) as f64;
    for p in &parts {
        g.add_scaled(p, 1.0 / n);
    }
    g
}

fn is_decoder_param(name: &str) -> bool {
    name.starts_with("ctc.") || name.starts_with("bestrq.heads.")
}

/// Masked-prediction pre-training of the encoder.
pub fn pretrain(cfg: &TrainConfig, data: &[Utterance], ctx: &mut RunContext) -> Result<StageOutcome> {
    if data.is_empty() {
        return Err(Error::Input("pre-training needs unlabeled audio".into()));
    }
    let mut rng = init_rng(cfg);
    let mut store = ParamStore::new();
    let encoder = Encoder::new(&mut store, ENCODER_PREFIX, &cfg.model, &mut rng)?;
    let resume = resume_point(cfg, ctx)?;
    let bestrq = match resume.as_ref().and_then(|ck| ck.group(QUANTIZER)) {
        Some(q) => BestRq::with_quantizer(&mut store, &encoder, RandomQuantizer::from_store(q)?, cfg.bestrq.mask.clone(), &mut rng),
        None => BestRq::new(&mut store, &encoder, &cfg.bestrq, derive_seed(cfg.seed, &[1]), &mut rng)?,
    };
    let mut opt = Adam::encoder_decoder(&store, is_decoder_param, cfg.encoder_optim.clone(), cfg.decoder_optim.clone())?;
    let start = match &resume {
        Some(ck) => {
            restore(&mut store, &mut opt, ck)?;
            ck.step
        }
        None => 0,
    };
    let quantizer_state = bestrq.quantizer.to_store();
    let n_books = bestrq.quantizer.num_codebooks();
    run_loop(cfg, ctx, "pretrain", &mut store, &mut opt, start, &[(QUANTIZER, quantizer_state)], |step, store| {
        let idx = batch_indices(data.len(), cfg.batch_size, derive_seed(cfg.seed, &[2]), step);
        let mut grads = Vec::with_capacity(idx.len());
        let (mut loss, mut correct, mut masked) = (0.0, 0usize, 0usize);
        for (i, &u) in idx.iter().enumerate() {
            let g = Graph::<f64>::new();
            let b = Binder::new(&g, store);
            let out = bestrq.loss(&b, &encoder, &data[u].features, cfg.pattern, derive_seed(cfg.seed, &[3, step as u64, i as u64]))?;
            loss += out.loss.item();
            correct += out.correct;
            masked += out.masked_frames;
            grads.push(b.grads(&g.backward(out.loss)?));
        }
        let n = idx.len() as f64;
        let mut fields = Map::new();
        let acc = if masked > 0 { correct as f64 / (masked * n_books) as f64 } else { 0.0 };
        fields.insert("accuracy".into(), json!(acc));
        fields.insert("masked_frames".into(), json!(masked));
        Ok(StepResult {
            loss: loss / n,
            grads: mean_grads(grads, store.len()),
            fields,
        })
    })
}

/// Fresh CTC model, optionally initialised from the encoder of `init`.
pub fn build_asr(cfg: &TrainConfig, init: Option<&Checkpoint>) -> Result<(AsrModel, ParamStore)> {
    let mut rng = init_rng(cfg);
    let mut store = ParamStore::new();
    let model = AsrModel::new(&mut store, &cfg.model, cfg.vocab(), &mut rng)?;
    if let Some(ck) = init {
        load_prefix(&mut store, ck.params(), &format!("{ENCODER_PREFIX}."))?;
    }
    Ok((model, store))
}

fn ctc_batch_step(
    model: &AsrModel,
    store: &ParamStore,
    items: &[&Utterance],
    pattern: AttentionPattern,
    bank: Option<(&AdapterBank, &str)>,
) -> Result<StepResult> {
    let mut grads = Vec::with_capacity(items.len());
    let mut loss = 0.0;
    let mut skipped = 0;
    for u in items {
        let labels = u
            .labels
            .as_ref()
            .ok_or_else(|| Error::Input(format!("{} has no transcript", u.id)))?;
        let g = Graph::<f64>::new();
        let (b, adapters) = match bank {
            Some((bank, lang)) => (Binder::with_trainable(&g, store, bank.trainable(lang)?), Some(bank.select(lang)?)),
            None => (Binder::new(&g, store), None),
        };
        match model.loss(&b, &u.features, labels, pattern, adapters)? {
            Some(l) => {
                loss += l.item();
                grads.push(b.grads(&g.backward(l)?));
            }
            None => skipped += 1,
        }
    }
    let used = grads.len();
    let mut fields = Map::new();
    fields.insert("skipped".into(), json!(skipped));
    Ok(StepResult {
        loss: if used > 0 { loss / used as f64 } else { 0.0 },
        grads: mean_grads(grads, store.len()),
        fields,
    })
}

/// CTC fine-tuning with separate encoder and decoder optimizers.
pub fn finetune(cfg: &TrainConfig, data: &[Utterance], init: Option<&Checkpoint>, ctx: &mut RunContext) -> Result<(AsrModel, StageOutcome)> {
    if data.is_empty() {
        return Err(Error::Input("fine-tuning needs transcribed audio".into()));
    }
    let (model, mut store) = build_asr(cfg, init)?;
    let mut opt = Adam::encoder_decoder(&store, is_decoder_param, cfg.encoder_optim.clone(), cfg.decoder_optim.clone())?;
    let start = match resume_point(cfg, ctx)? {
        Some(ck) => {
            restore(&mut store, &mut opt, &ck)?;
            ck.step
        }
        None => 0,
    };
    let outcome = run_loop(cfg, ctx, "finetune", &mut store, &mut opt, start, &[], |step, store| {
        let idx = batch_indices(data.len(), cfg.batch_size, derive_seed(cfg.seed, &[4]), step);
        let items: Vec<&Utterance> = idx.iter().map(|&i| &data[i]).collect();
        ctc_batch_step(&model, store, &items, cfg.pattern, None)
    })?;
    Ok((model, outcome))
}

/// Greedy decoding of every transcribed utterance.
pub fn evaluate(
    model: &AsrModel,
    store: &ParamStore,
    data: &[Utterance],
    pattern: AttentionPattern,
    adapters: Option<(&AdapterBank, &str)>,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for u in data {
        let Some(reference) = &u.text else { continue };
        if reference.trim().is_empty() {
            continue;
        }
        let a = adapters.map(|(bank, lang)| bank.select(lang)).transpose()?;
        let hyp = model.transcribe(store, &u.features, pattern, a)?;
        report.add(&u.language, reference, &hyp);
    }
    Ok(report)
}

pub struct MostData<'a> {
    pub unlabeled: &'a [Utterance],
    pub paired: &'a [Utterance],
    pub text: &'a [LabelSequence],
}

/// Joint speech/text pre-training initialised from a masked-prediction
/// checkpoint (encoder, prediction heads and quantizer).
pub fn most(cfg: &TrainConfig, data: &MostData, init: &Checkpoint, ctx: &mut RunContext) -> Result<(MostModel, StageOutcome)> {
    let mut rng = init_rng(cfg);
    let mut store = ParamStore::new();
    let asr = AsrModel::new(&mut store, &cfg.model, cfg.vocab(), &mut rng)?;
    let quantizer = RandomQuantizer::from_store(
        init.group(QUANTIZER)
            .ok_or_else(|| Error::Checkpoint("MOST needs a checkpoint with quantizer state".into()))?,
    )?;
    let bestrq = BestRq::with_quantizer(&mut store, &asr.encoder, quantizer, cfg.bestrq.mask.clone(), &mut rng);
    let mut model = MostModel::extend(&mut store, asr, bestrq, cfg.pattern, cfg.most_text_repeat, &mut rng);
    model.weights = cfg.most_weights;
    load_prefix(&mut store, init.params(), &format!("{ENCODER_PREFIX}."))?;
    load_prefix(&mut store, init.params(), "bestrq.heads.")?;
    let mut opt = Adam::encoder_decoder(&store, is_decoder_param, cfg.encoder_optim.clone(), cfg.decoder_optim.clone())?;
    let start = match resume_point(cfg, ctx)? {
        Some(ck) => {
            restore(&mut store, &mut opt, &ck)?;
            ck.step
        }
        None => 0,
    };
    let gate = curriculum_gate(cfg.steps);
    let (ns, np, nt) = cfg.most_batches;
    let quantizer_state = model.bestrq.quantizer.to_store();
    let outcome = run_loop(cfg, ctx, "most", &mut store, &mut opt, start, &[(QUANTIZER, quantizer_state)], |step, store| {
        let pick = |n: usize, b: usize, stream: u64| batch_indices(n, b, derive_seed(cfg.seed, &[5, stream]), step);
        let batch = MostBatch {
            unlabeled_speech: pick(data.unlabeled.len(), ns, 0)
                .into_iter()
                .map(|i| data.unlabeled[i].features.clone())
                .collect(),
            paired: pick(data.paired.len(), np, 1)
                .into_iter()
                .filter_map(|i| data.paired[i].labels.clone().map(|l| (data.paired[i].features.clone(), l)))
                .collect(),
            unlabeled_text: pick(data.text.len(), nt, 2).into_iter().map(|i| data.text[i].clone()).collect(),
        };
        let out = model.step(store, &batch, step, gate, derive_seed(cfg.seed, &[6]))?;
        let mut fields = Map::new();
        for t in MostTerm::ALL {
            fields.insert(format!("loss_{}", t.name()), json!(out.loss(t)));
        }
        fields.insert("gate_open".into(), json!(step >= gate));
        fields.insert(
            "missing".into(),
            json!(out.missing.iter().map(|t| t.name()).collect::<Vec<_>>()),
        );
        Ok(StepResult {
            loss: out.total,
            grads: out.grads,
            fields,
        })
    })?;
    Ok((model, outcome))
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub model: AsrModel,
    pub bank: AdapterBank,
    pub report: AdapterReport,
    pub stage: StageOutcome,
    pub base_checksum_before: String,
    pub base_checksum_after: String,
}

pub fn adapter_config(cfg: &TrainConfig) -> AdapterConfig {
    match cfg.adapter_bottleneck {
        Some(b) => AdapterConfig { bottleneck_dim: b },
        None => AdapterConfig::for_ratio(&cfg.model, DEFAULT_ADAPTER_RATIO),
    }
}

/// Trains only the adapters of `cfg.adapter_language` on top of a frozen
/// CTC model from `init`.
pub fn adapt(cfg: &TrainConfig, data: &[Utterance], init: &Checkpoint, languages: &[&str], ctx: &mut RunContext) -> Result<AdaptOutcome> {
    let lang = cfg.adapter_language.as_str();
    let (model, mut store) = build_asr(cfg, None)?;
    load_prefix(&mut store, init.params(), &format!("{ENCODER_PREFIX}."))?;
    load_prefix(&mut store, init.params(), &format!("{CTC_HEAD_PREFIX}."))?;
    let mut langs: Vec<&str> = languages.to_vec();
    if !langs.contains(&lang) {
        langs.push(lang);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[7]));
    let (bank, report) = attach_adapters(&model.encoder, &mut store, &adapter_config(cfg), &langs, &mut rng)?;
    let is_base = |n: &str| !n.starts_with("adapters.");
    let before = store.checksum_where(is_base);
    let prefix = adapter_prefix(lang);
    let mut opt = Adam::single(&store, "adapter", |n| n.starts_with(&prefix), cfg.encoder_optim.clone())?;
    let start = match resume_point(cfg, ctx)? {
        Some(ck) => {
            restore(&mut store, &mut opt, &ck)?;
            ck.step
        }
        None => 0,
    };
    let items: Vec<&Utterance> = data.iter().filter(|u| u.language == lang).collect();
    if items.is_empty() {
        return Err(Error::Input(format!("no training audio for language {lang:?}")));
    }
    let stage = run_loop(cfg, ctx, "adapt", &mut store, &mut opt, start, &[], |step, store| {
        let idx = batch_indices(items.len(), cfg.batch_size, derive_seed(cfg.seed, &[8]), step);
        let batch: Vec<&Utterance> = idx.iter().map(|&i| items[i]).collect();
        ctc_batch_step(&model, store, &batch, cfg.pattern, Some((&bank, lang)))
    })?;
    let after = stage.checkpoint.params().checksum_where(is_base);
    if let Some(out) = &ctx.out {
        let mut only = ParamStore::new();
        for (_, n, t) in stage.checkpoint.params().iter().filter(|(_, n, _)| n.starts_with(&prefix)) {
            only.insert(n, t.clone());
        }
        Checkpoint::new(stage.checkpoint.step, cfg.fingerprint(), only).save(out.join("adapters").join(lang))?;
    }
    Ok(AdaptOutcome {
        model,
        bank,
        report,
        stage,
        base_checksum_before: before,
        base_checksum_after: after,
    })
}

/// One adapter update's loss and gradients for `language`.
pub fn adapter_train_step(
    model: &AsrModel,
    bank: &AdapterBank,
    store: &ParamStore,
    batch: &[&Utterance],
    language: &str,
    pattern: AttentionPattern,
) -> Result<(f64, GradMap)> {
    let r = ctc_batch_step(model, store, batch, pattern, Some((bank, language)))?;
    Ok((r.loss, r.grads))
}

#[derive(Clone, Debug)]
pub struct NstOutcome {
    pub items: Vec<PseudoLabeledItem>,
    pub skipped_clips: usize,
    pub stage: StageOutcome,
    /// Supervised and pseudo items consumed.
    pub consumed: (usize, usize),
}

/// Pseudo-labels `unlabeled` with the teacher in `init`, filters by speaking
/// rate, mixes with `supervised` and trains a student initialised from the
/// teacher.
pub fn nst(
    cfg: &TrainConfig,
    supervised: &[Utterance],
    unlabeled: &[ManifestEntry],
    init: &Checkpoint,
    ctx: &mut RunContext,
) -> Result<NstOutcome> {
    let (teacher, mut store) = build_asr(cfg, None)?;
    load_prefix(&mut store, init.params(), "")?;
    let (mut items, skipped) = pseudo_label(&teacher, &store, unlabeled, cfg.pattern)?;
    mark_kept(&mut items, cfg.nst_min_wps, cfg.nst_max_wps)?;
    if let Some(out) = &ctx.out {
        std::fs::create_dir_all(out).map_err(Error::io(format!("creating {}", out.display())))?;
        std::fs::write(out.join("pseudo.tsv"), crate::nst::format_pseudo_manifest(&items))
            .map_err(Error::io("writing pseudo-label manifest"))?;
    }
    let vocab = cfg.vocab();
    let mut pseudo = Vec::new();
    for it in items.iter().filter(|i| i.kept) {
        let clip = read_wav(&it.path)?;
        pseudo.push(Utterance::from_clip(it.path.clone(), &clip, Some(&it.hypothesis), &it.language, &vocab)?);
    }
    ctx.metrics.emit(
        "pseudo_label",
        json!({"clips": items.len(), "kept": pseudo.len(), "skipped": skipped}),
    )?;
    let sup_idx: Vec<usize> = (0..supervised.len()).collect();
    let pseudo_idx: Vec<usize> = (0..pseudo.len()).collect();
    let ratio = if pseudo.is_empty() { 1.0 } else { cfg.nst_mix_ratio };
    let mut stream = mix_datasets(sup_idx, pseudo_idx, ratio, cfg.batch_size, derive_seed(cfg.seed, &[9]))?;
    let mut opt = Adam::encoder_decoder(&store, is_decoder_param, cfg.encoder_optim.clone(), cfg.decoder_optim.clone())?;
    let mut consumed = (0, 0);
    let batches: Vec<Vec<(Source, usize)>> = (0..cfg.steps).map(|_| stream.next_batch()).collect();
    let stage = run_loop(cfg, ctx, "nst", &mut store, &mut opt, 0, &[], |step, store| {
        let items: Vec<&Utterance> = batches[step]
            .iter()
            .map(|&(src, i)| match src {
                Source::Supervised => &supervised[i],
                Source::Pseudo => &pseudo[i],
            })
            .collect();
        consumed.0 += batches[step].iter().filter(|b| b.0 == Source::Supervised).count();
        consumed.1 += batches[step].iter().filter(|b| b.0 == Source::Pseudo).count();
        ctc_batch_step(&teacher, store, &items, cfg.pattern, None)
    })?;
    Ok(NstOutcome {
        items,
        skipped_clips: skipped,
        stage,
        consumed,
    })
}

fn manifest_utterances(path: &Option<PathBuf>, what: &str, vocab: &TokenVocab) -> Result<Vec<Utterance>> {
    let p = path
        .as_ref()
        .ok_or_else(|| Error::Config(format!("data.{what} is required for this stage")))?;
    load_utterances(&read_manifest(p)?, vocab)
}

fn require_init(cfg: &TrainConfig) -> Result<Checkpoint> {
    let p = cfg
        .init
        .as_ref()
        .ok_or_else(|| Error::Config(format!("stage {} needs init = <checkpoint dir>", cfg.stage)))?;
    Checkpoint::load(p)
}

fn read_text_lines(path: &Path, vocab: &TokenVocab) -> Result<Vec<LabelSequence>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(format!("text corpus {}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| vocab.encode(l.trim()).map_err(Error::from))
        .collect()
}

/// Runs the stage named in `cfg` against on-disk manifests, writing the
/// checkpoint, resolved config and metrics under `cfg.out`.
pub fn run_stage(cfg: &TrainConfig, echo: bool) -> Result<Checkpoint> {
    cfg.check_files()?;
    std::fs::create_dir_all(&cfg.out).map_err(Error::io(format!("creating {}", cfg.out.display())))?;
    let mut metrics = MetricsSink::to_file(cfg.out.join("metrics.jsonl"), echo)?;
    let mut ctx = RunContext {
        metrics: &mut metrics,
        out: Some(cfg.out.clone()),
        observer: None,
    };
    let vocab = cfg.vocab();
    use super::config::Stage;
    let ck = match cfg.stage {
        Stage::Pretrain => pretrain(cfg, &manifest_utterances(&cfg.data.unlabeled, "unlabeled", &vocab)?, &mut ctx)?.checkpoint,
        Stage::Finetune => {
            let init = cfg.init.as_ref().map(Checkpoint::load).transpose()?;
            let train = manifest_utterances(&cfg.data.train, "train", &vocab)?;
            let (model, out) = finetune(cfg, &train, init.as_ref(), &mut ctx)?;
            if cfg.data.dev.is_some() {
                let dev = manifest_utterances(&cfg.data.dev, "dev", &vocab)?;
                let report = evaluate(&model, out.checkpoint.params(), &dev, cfg.pattern, None)?;
                ctx.metrics.emit("eval", &report)?;
            }
            out.checkpoint
        }
        Stage::Most => {
            let init = require_init(cfg)?;
            let unlabeled = manifest_utterances(&cfg.data.unlabeled, "unlabeled", &vocab)?;
            let paired = manifest_utterances(&cfg.data.train, "train", &vocab)?;
            let text = match &cfg.data.text {
                Some(p) => read_text_lines(p, &vocab)?,
                None => Vec::new(),
            };
            let data = MostData {
                unlabeled: &unlabeled,
                paired: &paired,
                text: &text,
            };
            most(cfg, &data, &init, &mut ctx)?.1.checkpoint
        }
        Stage::Adapt => {
            let init = require_init(cfg)?;
            let train = manifest_utterances(&cfg.data.train, "train", &vocab)?;
            let out = adapt(cfg, &train, &init, &[], &mut ctx)?;
            ctx.metrics.emit(
                "adapter_report",
                json!({
                    "base_params": out.report.base_params,
                    "adapter_params": out.report.adapter_params_per_language,
                    "ratio": out.report.ratio(),
                    "base_checksum_unchanged": out.base_checksum_before == out.base_checksum_after,
                }),
            )?;
            out.stage.checkpoint
        }
        Stage::Nst => {
            let init = require_init(cfg)?;
            let train = manifest_utterances(&cfg.data.train, "train", &vocab)?;
            let unl = cfg
                .data
                .unlabeled
                .as_ref()
                .ok_or_else(|| Error::Config("data.unlabeled is required for nst".into()))?;
            nst(cfg, &train, &read_manifest(unl)?, &init, &mut ctx)?.stage.checkpoint
        }
    };
    Ok(ck)
}

/// Loads a CTC model from a checkpoint directory whose `config.txt`
/// describes the architecture.
pub fn load_asr(dir: impl AsRef<Path>) -> Result<(TrainConfig, AsrModel, ParamStore)> {
    let dir = dir.as_ref();
    let kv = super::config::KvConfig::load(dir.join(CONFIG_FILE))?;
    let cfg = TrainConfig::from_kv(&kv)?;
    let ck = Checkpoint::load(dir)?;
    let (model, mut store) = build_asr(&cfg, None)?;
    load_prefix(&mut store, ck.params(), &format!("{ENCODER_PREFIX}."))?;
    load_prefix(&mut store, ck.params(), &format!("{CTC_HEAD_PREFIX}."))?;
    Ok((cfg, model, store))
}
