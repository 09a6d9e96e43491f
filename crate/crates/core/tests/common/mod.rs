//! Shared fixtures for integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use usm_core::adapters::{attach_adapters, AdapterConfig};
use usm_core::asr::AsrModel;
use usm_core::bestrq::{apply_mask, bestrq_loss, BestRq, BestRqConfig, MaskSpec, QuantizedTargets, RandomQuantizer};
use usm_core::ctc::{LabelSequence, TokenVocab};
use usm_core::encoder::{AttentionPattern, ConformerConfig, Encoder, Linear};
use usm_core::features::{FeatureSequence, NUM_MELS};
use usm_core::most::MostModel;
use usm_core::numerics::{grad_check_sampled, grad_check_where, Binder, GradReport, Graph, ParamStore, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const PROBES: usize = 6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_config(pattern: AttentionPattern, layers: usize) -> ConformerConfig {
    ConformerConfig {
        num_layers: layers,
        model_dim: 8,
        attention_heads: 2,
        conv_kernel_size: 3,
        bias_cap: pattern.bias_cap(),
        ff_multiplier: 2,
        ..Default::default()
    }
}

pub fn noise_features(frames: usize, seed: u64) -> FeatureSequence {
    let mut r = rng(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    FeatureSequence::from_frames((0..frames * NUM_MELS).map(|_| n.sample(&mut r)).collect())
}

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Replaces every parameter whose name matches `pred` with small random
/// values so zero-initialised weights still get informative gradients.
pub fn randomize(store: &mut ParamStore, pred: impl Fn(&str) -> bool, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.iter().filter(|(_, n, _)| pred(n)).map(|(id, _, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = r.gen_range(-0.3..0.3);
        }
    }
}

/// Weighted sum of an output matrix, a smooth scalar probe of every entry.
pub fn probe<'g>(b: &Binder<'g, '_, f64>, out: Var<'g, f64>, seed: u64) -> usm_core::Result<Var<'g, f64>> {
    let w = b.constant(random_tensor(out.rows(), out.cols(), seed));
    Ok(out.mul(w)?.sum())
}

pub fn check<F>(store: &ParamStore, f: F) -> GradReport
where
    F: for<'g> Fn(&Binder<'g, '_, f64>) -> usm_core::Result<Var<'g, f64>>,
{
    grad_check_sampled(f, store, FD_STEP, PROBES).expect("gradient check evaluation")
}

/// Conformer block stack under `pattern`.
pub fn conformer_block_check(pattern: AttentionPattern) -> GradReport {
    let cfg = tiny_config(pattern, 2);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "encoder", &cfg, &mut rng(1)).unwrap();
    randomize(&mut store, |n| n.contains("rel_bias"), 2);
    let feats = noise_features(24, 3);
    check(&store, |b| {
        let out = enc.forward(b, &feats, pattern)?;
        probe(b, out, 4)
    })
}

pub fn bestrq_check() -> GradReport {
    let pattern = AttentionPattern::Global;
    let cfg = tiny_config(pattern, 1);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "encoder", &cfg, &mut rng(5)).unwrap();
    let brq_cfg = BestRqConfig {
        num_codebooks: 2,
        codebook_size: 8,
        embedding_dim: 4,
        mask: MaskSpec {
            start_probability: 0.2,
            span_seconds: 0.04,
            ..MaskSpec::default()
        },
    };
    let brq = BestRq::new(&mut store, &enc, &brq_cfg, 6, &mut rng(7)).unwrap();
    let feats = noise_features(32, 8);
    check(&store, |b| Ok(brq.loss(b, &enc, &feats, pattern, 9)?.loss))
}

pub fn tiny_most(seed: u64) -> (MostModel, ParamStore) {
    let pattern = AttentionPattern::Chunk { size: 4 };
    let cfg = tiny_config(pattern, 1);
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let asr = AsrModel::new(&mut store, &cfg, TokenVocab::letters(4), &mut r).unwrap();
    let brq_cfg = BestRqConfig {
        num_codebooks: 2,
        codebook_size: 8,
        embedding_dim: 4,
        mask: MaskSpec {
            start_probability: 0.2,
            span_seconds: 0.04,
            ..MaskSpec::default()
        },
    };
    let brq = BestRq::new(&mut store, &asr.encoder, &brq_cfg, seed + 1, &mut r).unwrap();
    let mut model = MostModel::extend(&mut store, asr, brq, pattern, 4, &mut r);
    model.text_mask.start_probability = 0.3;
    randomize(&mut store, |n| n.contains("rel_bias"), seed + 2);
    (model, store)
}

pub fn labels(text: &str) -> LabelSequence {
    TokenVocab::letters(4).encode(text).unwrap()
}

/// Every MOST term, each checked on its own.
pub fn most_checks() -> Vec<(&'static str, GradReport)> {
    let (m, store) = tiny_most(11);
    let feats = noise_features(48, 12);
    let text = labels("ab ca");
    vec![
        ("most bestrq", check(&store, |b| m.bestrq_loss(b, &feats, 13))),
        ("most asr", check(&store, |b| Ok(m.asr_loss(b, &feats, &text)?.expect("feasible")))),
        (
            "most consistency",
            grad_check_where(
                |b| Ok::<_, usm_core::Error>(m.consistency_loss(b, &feats, &text)?.expect("non-empty")),
                &store,
                FD_STEP,
                PROBES,
                |n| !MostModel::is_speech_encoder_param(n),
            )
            .expect("gradient check evaluation"),
        ),
        (
            "most reconstruction",
            check(&store, |b| Ok(m.text_reconstruction_loss(b, &text, 14)?.expect("feasible"))),
        ),
    ]
}

pub fn adapter_check() -> GradReport {
    let pattern = AttentionPattern::Local { left: 2, right: 1 };
    let cfg = tiny_config(pattern, 2);
    let mut store = ParamStore::new();
    let model = AsrModel::new(&mut store, &cfg, TokenVocab::letters(4), &mut rng(21)).unwrap();
    let (bank, _) = attach_adapters(&model.encoder, &mut store, &AdapterConfig { bottleneck_dim: 3 }, &["xx"], &mut rng(22)).unwrap();
    randomize(&mut store, |n| n.starts_with("adapters."), 23);
    let feats = noise_features(32, 24);
    let text = labels("abc");
    let adapters = bank.select("xx").unwrap();
    check(&store, |b| Ok(model.loss(b, &feats, &text, pattern, Some(adapters))?.expect("feasible")))
}

/// The full finite-difference suite: (name, report) per trainable module.
pub fn gradient_suite() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();
    for pattern in [
        AttentionPattern::Global,
        AttentionPattern::Local { left: 2, right: 1 },
        AttentionPattern::Chunk { size: 2 },
    ] {
        out.push((format!("conformer {pattern}"), conformer_block_check(pattern)));
    }
    out.push(("bestrq heads".into(), bestrq_check()));
    for (n, r) in most_checks() {
        out.push((n.into(), r));
    }
    out.push(("adapters".into(), adapter_check()));
    out
}

/// Featurized synthetic clips.
pub fn synth_utterances(
    spec: &usm_core::pipeline::SynthSpec,
    n: usize,
    seed: u64,
    vocab: &TokenVocab,
    labelled: bool,
) -> Vec<usm_core::pipeline::Utterance> {
    usm_core::pipeline::synth_corpus(spec, n, seed)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            usm_core::pipeline::Utterance::from_clip(
                format!("{seed}-{i}"),
                &c.audio,
                labelled.then_some(c.text.as_str()),
                &c.language,
                vocab,
            )
            .unwrap()
        })
        .collect()
}

/// Random `[T, V]` log-softmax rows.
pub fn random_log_probs(t: usize, v: usize, r: &mut impl Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * v);
    for _ in 0..t {
        let logits: Vec<f64> = (0..v).map(|_| r.gen_range(-3.0..3.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        out.extend(logits.iter().map(|x| x - z));
    }
    out
}

/// Random CTC instance with `T <= 6`, `V <= 4` and a target that fits.
pub fn ctc_instance(r: &mut impl Rng) -> (Vec<f64>, usize, LabelSequence) {
    let t = r.gen_range(1..=6);
    let v = r.gen_range(2..=4);
    let lp = random_log_probs(t, v, r);
    loop {
        let len = r.gen_range(0..=t);
        let ids: Vec<usize> = (0..len).map(|_| r.gen_range(1..v)).collect();
        let target = LabelSequence::new(ids);
        if target.min_frames() <= t {
            return (lp, v, target);
        }
    }
}

/// Worst brute-force deviation and worst gradient relative error over
/// `cases` random instances.
pub fn ctc_oracle_errors(cases: usize, seed: u64) -> (f64, f64) {
    use usm_core::ctc::{ctc_brute_force, ctc_loss};
    let mut r = rng(seed);
    let (mut worst_nll, mut worst_grad) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let (lp, v, target) = ctc_instance(&mut r);
        let got = ctc_loss(&lp, v, &target).unwrap();
        assert!(got.feasible);
        let want = ctc_brute_force(&lp, v, &target).unwrap();
        worst_nll = worst_nll.max((got.nll - want).abs());
        let h = 1e-6;
        let numeric: Vec<f64> = (0..lp.len())
            .map(|i| {
                let mut p = lp.clone();
                p[i] += h;
                let up = ctc_brute_force(&p, v, &target).unwrap();
                p[i] -= 2.0 * h;
                let down = ctc_brute_force(&p, v, &target).unwrap();
                (up - down) / (2.0 * h)
            })
            .collect();
        let diff: f64 = got.grad.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = got.grad.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        worst_grad = worst_grad.max(diff / scale.max(1e-8));
    }
    (worst_nll, worst_grad)
}

/// Speech-encoder parameters that received a non-zero gradient from the
/// consistency term, and the number of speech-encoder parameters checked.
pub fn consistency_speech_leaks(seed: u64) -> (Vec<String>, usize) {
    let (m, store) = tiny_most(seed);
    let feats = noise_features(40, seed + 10);
    let g = Graph::<f64>::new();
    let b = Binder::new(&g, &store);
    let loss = m.consistency_loss(&b, &feats, &labels("abc d")).unwrap().unwrap();
    let grads = b.grads(&g.backward(loss).unwrap());
    let speech: Vec<_> = store.iter().filter(|(_, n, _)| MostModel::is_speech_encoder_param(n)).collect();
    let leaks = speech.iter().filter(|(id, _, _)| !grads.is_zero(*id)).map(|(_, n, _)| n.to_string()).collect();
    (leaks, speech.len())
}

/// Seeded stage configuration with `key = value` overrides.
pub fn stage_config(stage: &str, seed: u64, steps: usize, extra: &[(&str, &str)]) -> usm_core::pipeline::TrainConfig {
    let mut kv = usm_core::pipeline::KvConfig::default();
    kv.set("seed", seed);
    kv.set("stage", stage);
    kv.set("steps", steps);
    kv.set("log_every", 0);
    for (k, v) in extra {
        kv.set(k, v);
    }
    usm_core::pipeline::TrainConfig::from_kv(&kv).unwrap()
}

/// Base model on one language, then 200 adapter steps on 50 utterances of
/// a second language with a rotated tone table. Returns the adaptation
/// outcome and the first and last ten-step mean losses.
pub fn adapter_run(seed: u64) -> (usm_core::pipeline::train::AdaptOutcome, f64, f64) {
    use usm_core::pipeline::metrics::MetricsSink;
    use usm_core::pipeline::{adapt, finetune, RunContext, SynthSpec};
    let vocab = TokenVocab::letters(8);
    let base_cfg = stage_config("finetune", seed, 150, &[]);
    let base_data = synth_utterances(&SynthSpec::default(), 200, 100 + seed, &vocab, true);
    let mut sink = MetricsSink::memory();
    let (_, base) = finetune(&base_cfg, &base_data, None, &mut RunContext::memory(&mut sink)).unwrap();
    let spec = SynthSpec {
        language: "xx".into(),
        tone_shift: 3,
        ..SynthSpec::default()
    };
    let data = synth_utterances(&spec, 50, 200 + seed, &vocab, true);
    let cfg = stage_config("adapt", seed, 200, &[("adapter.language", "xx")]);
    let out = adapt(&cfg, &data, &base.checkpoint, &["en"], &mut RunContext::memory(&mut sink)).unwrap();
    let l = &out.stage.losses;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&l[..10]), mean(&l[l.len() - 10..]));
    (out, first, last)
}

/// Tiny model with adapters for languages `a` and `b`, adapter weights
/// randomised so they change the output.
pub fn tiny_adapted(seed: u64) -> (AsrModel, usm_core::adapters::AdapterBank, ParamStore, AttentionPattern) {
    let pattern = AttentionPattern::Chunk { size: 4 };
    let cfg = tiny_config(pattern, 2);
    let mut store = ParamStore::new();
    let model = AsrModel::new(&mut store, &cfg, TokenVocab::letters(4), &mut rng(seed)).unwrap();
    let (bank, _) = attach_adapters(&model.encoder, &mut store, &AdapterConfig { bottleneck_dim: 2 }, &["a", "b"], &mut rng(seed + 1)).unwrap();
    (model, bank, store, pattern)
}

/// Base parameters (and non-selected adapters) with a non-zero gradient
/// when training language `a`.
pub fn adapter_gradient_leaks(seed: u64) -> Vec<String> {
    let (model, bank, mut store, pattern) = tiny_adapted(seed);
    randomize(&mut store, |n| n.starts_with("adapters."), seed + 2);
    let g = Graph::<f64>::new();
    let b = Binder::with_trainable(&g, &store, bank.trainable("a").unwrap());
    let loss = model
        .loss(&b, &noise_features(32, seed), &labels("ab c"), pattern, Some(bank.select("a").unwrap()))
        .unwrap()
        .unwrap();
    let grads = b.grads(&g.backward(loss).unwrap());
    store
        .iter()
        .filter(|(id, n, _)| !n.starts_with("adapters.a.") && !grads.is_zero(*id))
        .map(|(_, n, _)| n.to_string())
        .collect()
}

/// True when zero-initialised adapters leave the forward pass bit-identical.
pub fn zero_adapters_are_identity(seed: u64) -> bool {
    let (model, bank, store, pattern) = tiny_adapted(seed);
    let feats = noise_features(36, seed);
    let run = |a: Option<&[usm_core::adapters::BlockAdapters]>| {
        let g = Graph::<f64>::new();
        let b = Binder::frozen(&g, &store);
        model.log_probs(&b, &feats, pattern, a).unwrap().value()
    };
    let base = run(None);
    base == run(Some(bank.select("a").unwrap())) && base == run(Some(bank.select("b").unwrap()))
}

/// Largest deviation, over every prefix of `batches` batches, between the
/// supervised count and `round(k * batch * ratio)`.
pub fn mixing_quota_error(ratio: f64, batch: usize, batches: usize, seed: u64) -> usize {
    use usm_core::nst::{mix_datasets, Source};
    let mut s = mix_datasets((0..37).collect::<Vec<usize>>(), (0..101).collect(), ratio, batch, seed).unwrap();
    let mut sup = 0usize;
    let mut worst = 0;
    for k in 1..=batches {
        let b = s.next_batch();
        assert_eq!(b.len(), batch);
        sup += b.iter().filter(|x| x.0 == Source::Supervised).count();
        let want = (k as f64 * batch as f64 * ratio).round() as usize;
        worst = worst.max(sup.abs_diff(want));
    }
    worst
}

/// Teacher fine-tuned on labelled clips, then the full pseudo-label,
/// filter, mix and train loop writing into `out`.
pub fn nst_run(out: &std::path::Path, steps: usize) -> usm_core::pipeline::train::NstOutcome {
    use usm_core::pipeline::metrics::MetricsSink;
    use usm_core::pipeline::{finetune, nst, synth_corpus, write_corpus, RunContext, SynthSpec};
    let vocab = TokenVocab::letters(8);
    let cfg = stage_config("finetune", 4, 60, &[]);
    let sup = synth_utterances(&SynthSpec::default(), 60, 41, &vocab, true);
    let mut sink = MetricsSink::memory();
    let (_, teacher) = finetune(&cfg, &sup, None, &mut RunContext::memory(&mut sink)).unwrap();
    let clips = synth_corpus(&SynthSpec::default(), 24, 42).unwrap();
    write_corpus(out.join("audio"), "u", &clips, false).unwrap();
    let entries = usm_core::pipeline::read_manifest(out.join("audio").join("u.tsv")).unwrap();
    let cfg = stage_config("nst", 4, steps, &[("nst.mix_ratio", "0.5"), ("nst.min_wps", "0.1")]);
    let mut ctx = RunContext::memory(&mut sink);
    ctx.out = Some(out.join("run"));
    nst(&cfg, &sup, &entries, &teacher.checkpoint, &mut ctx).unwrap()
}

/// Runs `run` to completion in `full`, and in `cut` stops it with an
/// observer error after `stop` steps, then resumes it. Returns the full
/// run and the concatenated interrupted run.
pub fn interrupted_and_resumed(
    cfg: &usm_core::pipeline::TrainConfig,
    stop: usize,
    run: impl Fn(&usm_core::pipeline::TrainConfig, &mut usm_core::pipeline::RunContext) -> usm_core::Result<usm_core::pipeline::StageOutcome>,
) -> (usm_core::pipeline::StageOutcome, Vec<f64>, usm_core::pipeline::StageOutcome) {
    use usm_core::pipeline::metrics::MetricsSink;
    use usm_core::pipeline::RunContext;
    let (full_dir, cut_dir) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut sink = MetricsSink::memory();
    let mut ctx = RunContext::memory(&mut sink);
    ctx.out = Some(full_dir.path().to_path_buf());
    let full = run(cfg, &mut ctx).unwrap();

    let mut cfg = cfg.clone();
    cfg.checkpoint_every = stop;
    let mut first = Vec::new();
    {
        let mut sink = MetricsSink::memory();
        let mut stopper = |step: usize, _: &ParamStore| {
            if step == stop {
                Err(usm_core::Error::Input("interrupted".into()))
            } else {
                Ok(())
            }
        };
        let mut ctx = RunContext::memory(&mut sink);
        ctx.out = Some(cut_dir.path().to_path_buf());
        ctx.observer = Some(&mut stopper);
        assert!(run(&cfg, &mut ctx).is_err());
    }
    cfg.resume = true;
    let mut sink = MetricsSink::memory();
    let mut ctx = RunContext::memory(&mut sink);
    ctx.out = Some(cut_dir.path().to_path_buf());
    let resumed = run(&cfg, &mut ctx).unwrap();
    assert_eq!(resumed.start_step, stop);
    first.extend_from_slice(&full.losses[..stop]);
    first.extend_from_slice(&resumed.losses);
    (full, first, resumed)
}

/// Frames whose codes change under a positive rescaling.
pub fn scale_violations(q: &RandomQuantizer, x: &Tensor, scales: &[f64]) -> usize {
    let base = q.quantize(x).unwrap().labels;
    scales
        .iter()
        .map(|&s| {
            let y = Tensor::matrix(x.rows(), x.cols(), x.data().iter().map(|v| v * s).collect()).unwrap();
            let l = q.quantize(&y).unwrap().labels;
            (0..x.rows()).filter(|&t| (0..base.len()).any(|n| base[n][t] != l[n][t])).count()
        })
        .sum()
}

pub fn heads_and_targets(books: usize, c: usize, t: usize, seed: u64) -> (ParamStore, Vec<Linear>, QuantizedTargets) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let heads: Vec<Linear> = (0..books).map(|n| Linear::new(&mut store, &format!("h{n}"), 5, c, &mut r)).collect();
    let labels = (0..books).map(|_| (0..t).map(|_| r.gen_range(0..c)).collect()).collect();
    let mask_indices = (0..t).filter(|_| r.gen_bool(0.5)).collect::<Vec<_>>();
    let targets = QuantizedTargets {
        labels,
        mask_indices: if mask_indices.is_empty() { vec![0] } else { mask_indices },
        degenerate_frames: 0,
    };
    (store, heads, targets)
}

/// Largest gap between the joint loss and the mean of per-codebook losses.
pub fn multi_softmax_gap(seed: u64) -> f64 {
    let (store, heads, targets) = heads_and_targets(4, 6, 10, seed);
    let x = random_tensor(10, 5, seed + 1);
    let g = Graph::<f64>::new();
    let b = Binder::frozen(&g, &store);
    let enc = b.constant(x);
    let joint = bestrq_loss(&b, &heads, enc, &targets).unwrap().loss.item();
    let singles: f64 = (0..heads.len())
        .map(|n| {
            let t = QuantizedTargets {
                labels: vec![targets.labels[n].clone()],
                ..targets.clone()
            };
            bestrq_loss(&b, &heads[n..n + 1], enc, &t).unwrap().loss.item()
        })
        .sum::<f64>()
        / heads.len() as f64;
    (joint - singles).abs()
}

/// Mean masked fraction over `seeds` sequences of `frames` frames.
pub fn empirical_coverage(spec: &MaskSpec, frames: usize, seeds: u64) -> f64 {
    let feats = FeatureSequence::from_frames(vec![0.0; frames * usm_core::features::NUM_MELS]);
    let total: usize = (0..seeds).map(|s| apply_mask(&feats, &spec.with_seed(s)).unwrap().1.len()).sum();
    total as f64 / (frames as f64 * seeds as f64)
}
