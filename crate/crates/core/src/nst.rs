//! Noisy student training: teacher pseudo-labels, rate-based filtering and
//! deterministic mixing with supervised data.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::asr::AsrModel;
use crate::encoder::AttentionPattern;
use crate::features::{featurize, read_wav};
use crate::numerics::ParamStore;
use crate::pipeline::ManifestEntry;
use crate::{derive_seed, Error, Result};

pub const DEFAULT_MIN_WPS: f64 = 0.5;
pub const DEFAULT_MAX_WPS: f64 = 6.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabeledItem {
    pub path: String,
    pub language: String,
    pub hypothesis: String,
    pub duration: f64,
    pub words_per_second: f64,
    pub kept: bool,
}

impl PseudoLabeledItem {
    pub fn new(path: impl Into<String>, language: impl Into<String>, hypothesis: impl Into<String>, duration: f64) -> Self {
        let hypothesis = hypothesis.into();
        Self {
            path: path.into(),
            language: language.into(),
            words_per_second: word_count(&hypothesis) as f64 / duration,
            hypothesis,
            duration,
            kept: true,
        }
    }
}

/// Whitespace-separated tokens.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Greedy CTC transcripts of every readable clip. Unreadable clips are
/// logged and skipped; the second value counts them.
pub fn pseudo_label(
    teacher: &AsrModel,
    store: &ParamStore,
    entries: &[ManifestEntry],
    pattern: AttentionPattern,
) -> Result<(Vec<PseudoLabeledItem>, usize)> {
    let mut items = Vec::with_capacity(entries.len());
    let mut skipped = 0;
    for e in entries {
        let clip = match read_wav(&e.path) {
            Ok(c) => c,
            Err(err) => {
                log::warn!("skipping {}: {err}", e.path.display());
                skipped += 1;
                continue;
            }
        };
        let duration = clip.duration();
        let feats = featurize(&clip).normalized();
        let hyp = match teacher.transcribe(store, &feats, pattern, None) {
            Ok(h) => h,
            Err(err) => {
                log::warn!("skipping {}: {err}", e.path.display());
                skipped += 1;
                continue;
            }
        };
        items.push(PseudoLabeledItem::new(
            e.path.display().to_string(),
            e.language.clone(),
            hyp,
            duration,
        ));
    }
    Ok((items, skipped))
}

/// Sets `kept` on every item: inside `[min_wps, max_wps]` and non-empty.
pub fn mark_kept(items: &mut [PseudoLabeledItem], min_wps: f64, max_wps: f64) -> Result<()> {
    if !(min_wps < max_wps) {
        return Err(Error::Config(format!("filter bounds [{min_wps}, {max_wps}] are empty")));
    }
    for it in items {
        it.kept = word_count(&it.hypothesis) > 0 && min_wps <= it.words_per_second && it.words_per_second <= max_wps;
    }
    Ok(())
}

/// Items that pass [`mark_kept`].
pub fn filter_pseudo(items: &[PseudoLabeledItem], min_wps: f64, max_wps: f64) -> Result<Vec<PseudoLabeledItem>> {
    let mut all = items.to_vec();
    mark_kept(&mut all, min_wps, max_wps)?;
    all.retain(|i| i.kept);
    Ok(all)
}

/// Tab-separated `path, duration, hypothesis, wps, kept` lines; an empty
/// hypothesis is written as `-`.
pub fn format_pseudo_manifest(items: &[PseudoLabeledItem]) -> String {
    let mut s = String::new();
    for it in items {
        let hyp = if it.hypothesis.is_empty() { "-" } else { &it.hypothesis };
        writeln!(
            s,
            "{}\t{:.6}\t{}\t{:.6}\t{}",
            it.path, it.duration, hyp, it.words_per_second, it.kept
        )
        .unwrap();
    }
    s
}

/// Splits a long clip duration into consecutive segments with lengths drawn
/// uniformly from `[min_seconds, max_seconds]`; the tail joins the last
/// segment when shorter than `min_seconds`.
pub fn random_segments(duration: f64, min_seconds: f64, max_seconds: f64, seed: u64) -> Vec<(f64, f64)> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut start = 0.0;
    while duration - start > 0.0 {
        let len = rng.gen_range(min_seconds..=max_seconds);
        let end = (start + len).min(duration);
        if end - start < min_seconds {
            if let Some(last) = out.last_mut() {
                last.1 = duration;
                break;
            }
        }
        out.push((start, end));
        start = end;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Supervised,
    Pseudo,
}

/// Endless batch stream with exact per-batch quotas. Over the first `k`
/// batches exactly `round(k * batch * ratio)` items are supervised.
#[derive(Clone, Debug)]
pub struct MixedStream<S> {
    sources: [Vec<S>; 2],
    orders: [Vec<usize>; 2],
    cursors: [usize; 2],
    epochs: [usize; 2],
    ratio: f64,
    batch_size: usize,
    batch_index: usize,
    seed: u64,
}

pub fn mix_datasets<S: Clone>(
    supervised: Vec<S>,
    pseudo: Vec<S>,
    mixing_ratio: f64,
    batch_size: usize,
    seed: u64,
) -> Result<MixedStream<S>> {
    if !(mixing_ratio > 0.0 && mixing_ratio <= 1.0) {
        return Err(Error::Config(format!("mixing ratio {mixing_ratio} outside (0, 1]")));
    }
    if batch_size == 0 || supervised.is_empty() || (mixing_ratio < 1.0 && pseudo.is_empty()) {
        return Err(Error::Config("mixing needs a positive batch size and non-empty sources".into()));
    }
    let mut s = MixedStream {
        sources: [supervised, pseudo],
        orders: [Vec::new(), Vec::new()],
        cursors: [0, 0],
        epochs: [0, 0],
        ratio: mixing_ratio,
        batch_size,
        batch_index: 0,
        seed,
    };
    s.reshuffle(0);
    s.reshuffle(1);
    Ok(s)
}

impl<S: Clone> MixedStream<S> {
    fn reshuffle(&mut self, src: usize) {
        let mut order: Vec<usize> = (0..self.sources[src].len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[src as u64, self.epochs[src] as u64]));
        order.shuffle(&mut rng);
        self.orders[src] = order;
        self.cursors[src] = 0;
    }

    fn take(&mut self, src: usize) -> S {
        if self.cursors[src] == self.orders[src].len() {
            self.epochs[src] += 1;
            self.reshuffle(src);
        }
        let i = self.orders[src][self.cursors[src]];
        self.cursors[src] += 1;
        self.sources[src][i].clone()
    }

    fn quota(&self, batches: usize) -> usize {
        (batches as f64 * self.batch_size as f64 * self.ratio).round() as usize
    }

    /// Completed passes over the supervised and pseudo sources.
    pub fn epochs(&self) -> (usize, usize) {
        (self.epochs[0], self.epochs[1])
    }

    pub fn next_batch(&mut self) -> Vec<(Source, S)> {
        let k = self.batch_index;
        let sup = self.quota(k + 1) - self.quota(k);
        self.batch_index += 1;
        let mut out = Vec::with_capacity(self.batch_size);
        for _ in 0..sup {
            out.push((Source::Supervised, self.take(0)));
        }
        for _ in sup..self.batch_size {
            out.push((Source::Pseudo, self.take(1)));
        }
        out
    }
}

impl<S: Clone> Iterator for MixedStream<S> {
    type Item = Vec<(Source, S)>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(hyp: &str, dur: f64) -> PseudoLabeledItem {
        PseudoLabeledItem::new("x.wav", "en", hyp, dur)
    }

    #[test]
    fn open_bounds_drop_only_empty() {
        let items = vec![item("", 1.0), item("a", 1.0), item("a b c d e f g h", 0.5)];
        let kept = filter_pseudo(&items, 0.0, f64::INFINITY).unwrap();
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn lower_bound_inclusive() {
        let kept = filter_pseudo(&[item("a b", 4.0)], 0.5, 6.0).unwrap();
        assert_eq!(kept.len(), 1);
        assert!(filter_pseudo(&[item("a", 1.0)], 2.0, 2.0).is_err());
    }

    #[test]
    fn quotas() {
        let mut s = mix_datasets((0..5).collect(), (100..103).collect(), 0.5, 8, 1).unwrap();
        for _ in 0..10 {
            let b = s.next_batch();
            assert_eq!(b.iter().filter(|x| x.0 == Source::Supervised).count(), 4);
        }
        let mut only = mix_datasets(vec![1, 2], Vec::<i32>::new(), 1.0, 4, 1).unwrap();
        assert!(only.next_batch().iter().all(|x| x.0 == Source::Supervised));
        assert!(mix_datasets(vec![1], vec![2], 0.0, 4, 1).is_err());
    }

    #[test]
    fn epochs_advance_and_cover_source() {
        let mut s = mix_datasets((0..4).collect(), (10..13).collect(), 0.5, 2, 9).unwrap();
        let mut sup = Vec::new();
        for _ in 0..4 {
            sup.extend(s.next_batch().into_iter().filter(|x| x.0 == Source::Supervised).map(|x| x.1));
        }
        let mut first: Vec<i32> = sup[..4].to_vec();
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3]);
        assert_eq!(s.epochs().0, 0);
        s.next_batch();
        assert_eq!(s.epochs(), (1, 1));
    }

    #[test]
    fn segments_cover_duration() {
        let segs = random_segments(47.0, 5.0, 15.0, 3);
        assert_eq!(segs.first().unwrap().0, 0.0);
        assert_eq!(segs.last().unwrap().1, 47.0);
        for w in segs.windows(2) {
            assert_eq!(w[0].1, w[1].0);
        }
        assert!(segs.iter().all(|s| s.1 - s.0 >= 5.0));
    }
}
