//! Connectionist temporal classification over grapheme vocabularies.
//!
//! The loss runs the forward-backward recursions over the blank-interleaved
//! label lattice entirely in log space. [`ctc_brute_force`] enumerates every
//! frame-level path and exists as an oracle for tiny instances.

use std::collections::HashSet;

use thiserror::Error;

use crate::numerics::{Scalar, Var};

pub const BLANK: usize = 0;

#[derive(Debug, Error, PartialEq)]
pub enum CtcError {
    #[error("duplicate grapheme {0:?} in vocabulary")]
    DuplicateSymbol(char),
    #[error("character {0:?} is not in the vocabulary")]
    UnknownSymbol(char),
    #[error("label id {0} outside [1, {1})")]
    BadLabel(usize, usize),
    #[error("brute force limited to T <= 8 and V <= 5, got T={0}, V={1}")]
    TooLarge(usize, usize),
    #[error("log_probs has {0} values, not a multiple of V={1}")]
    Shape(usize, usize),
}

/// Ordered grapheme inventory. Id 0 is the blank; grapheme `i` has id `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenVocab {
    symbols: Vec<char>,
}

impl TokenVocab {
    pub fn new(symbols: impl IntoIterator<Item = char>) -> Result<Self, CtcError> {
        let symbols: Vec<char> = symbols.into_iter().collect();
        let mut seen = HashSet::new();
        for &c in &symbols {
            if !seen.insert(c) {
                return Err(CtcError::DuplicateSymbol(c));
            }
        }
        Ok(Self { symbols })
    }

    /// Lowercase letters `a..` (count `n`) plus the word separator `' '`.
    pub fn letters(n: usize) -> Self {
        let mut symbols = vec![' '];
        symbols.extend((b'a'..b'a' + n as u8).map(char::from));
        Self { symbols }
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Output dimension including the blank.
    pub fn size(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn blank_id(&self) -> usize {
        BLANK
    }

    pub fn encode(&self, text: &str) -> Result<LabelSequence, CtcError> {
        text.chars()
            .map(|c| {
                self.symbols
                    .iter()
                    .position(|&s| s == c)
                    .map(|i| i + 1)
                    .ok_or(CtcError::UnknownSymbol(c))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(|ids| LabelSequence { ids })
    }

    pub fn decode(&self, labels: &LabelSequence) -> String {
        labels
            .ids
            .iter()
            .filter_map(|&i| i.checked_sub(1).and_then(|j| self.symbols.get(j)))
            .collect()
    }
}

/// Transcript as token ids, blanks excluded.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct LabelSequence {
    pub ids: Vec<usize>,
}

impl LabelSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), CtcError> {
        match self.ids.iter().find(|&&i| i == BLANK || i >= vocab_size) {
            Some(&bad) => Err(CtcError::BadLabel(bad, vocab_size)),
            None => Ok(()),
        }
    }

    /// Frames needed to emit this sequence: one per label plus one blank
    /// between each pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.ids.len() + self.ids.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

/// Negative log likelihood and its gradient with respect to the log
/// probabilities (row-major `[T, V]`).
#[derive(Clone, Debug, PartialEq)]
pub struct CtcOutcome {
    pub nll: f64,
    pub grad: Vec<f64>,
    /// False when the sequence is too long for the available frames; `nll`
    /// is then `+inf` and `grad` is all zeros.
    pub feasible: bool,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// CTC negative log likelihood by forward-backward in log space.
///
/// `log_probs` is row-major `[T, V]` with blank at column 0.
pub fn ctc_loss(log_probs: &[f64], num_classes: usize, target: &LabelSequence) -> Result<CtcOutcome, CtcError> {
    if num_classes == 0 || log_probs.len() % num_classes != 0 {
        return Err(CtcError::Shape(log_probs.len(), num_classes));
    }
    target.validate(num_classes)?;
    let t_len = log_probs.len() / num_classes;
    let infeasible = || CtcOutcome {
        nll: f64::INFINITY,
        grad: vec![0.0; log_probs.len()],
        feasible: false,
    };
    if t_len == 0 || target.min_frames() > t_len {
        return Ok(infeasible());
    }
    let lp = |t: usize, k: usize| log_probs[t * num_classes + k];

    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &l in &target.ids {
        ext.push(l);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == neg { neg } else { a + lp(t, ext[s]) };
        }
    }
    let last = (t_len - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if log_p == neg {
        return Ok(infeasible());
    }

    let mut beta = vec![neg; t_len * s_len];
    beta[last + s_len - 1] = lp(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && ext[s] != BLANK && ext[s] != ext[s + 2] {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == neg { neg } else { b + lp(t, ext[s]) };
        }
    }

    // d(-log p) / d lp[t][k] = -sum_{s: ext[s] = k} alpha * beta / y / p
    let mut grad = vec![0.0; log_probs.len()];
    for t in 0..t_len {
        let mut occupancy = vec![neg; num_classes];
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab > neg {
                occupancy[ext[s]] = log_add(occupancy[ext[s]], ab - lp(t, ext[s]));
            }
        }
        for k in 0..num_classes {
            if occupancy[k] > neg {
                grad[t * num_classes + k] = -(occupancy[k] - log_p).exp();
            }
        }
    }
    Ok(CtcOutcome {
        nll: -log_p,
        grad,
        feasible: true,
    })
}

/// Collapse of a frame path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> LabelSequence {
    let mut ids = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            ids.push(p);
        }
        prev = Some(p);
    }
    LabelSequence { ids }
}

/// Sums the probability of every length-T path that collapses to `target`.
/// Exponential in T; limited to T <= 8, V <= 5.
pub fn ctc_brute_force(log_probs: &[f64], num_classes: usize, target: &LabelSequence) -> Result<f64, CtcError> {
    if num_classes == 0 || log_probs.len() % num_classes != 0 {
        return Err(CtcError::Shape(log_probs.len(), num_classes));
    }
    let t_len = log_probs.len() / num_classes;
    if t_len > 8 || num_classes > 5 {
        return Err(CtcError::TooLarge(t_len, num_classes));
    }
    target.validate(num_classes)?;
    let mut path = vec![0usize; t_len];
    let mut total = f64::NEG_INFINITY;
    loop {
        if collapse(&path) == *target {
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| log_probs[t * num_classes + k]).sum();
            total = log_add(total, lp);
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == t_len {
                return Ok(-total);
            }
            path[i] += 1;
            if path[i] < num_classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Per-frame argmax (lowest index on ties), collapsed.
pub fn ctc_greedy_decode(log_probs: &[f64], num_classes: usize) -> LabelSequence {
    let path: Vec<usize> = log_probs
        .chunks(num_classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect();
    collapse(&path)
}

/// CTC loss as a graph node over `[T, V]` log probabilities.
/// Returns `None` when the target cannot fit in T frames.
pub fn ctc_loss_var<'g, T: Scalar>(log_probs: Var<'g, T>, target: &LabelSequence) -> crate::Result<Option<Var<'g, T>>> {
    let (lp, v) = log_probs.with_value(|t| (t.data().iter().map(|x| x.as_f64()).collect::<Vec<_>>(), t.cols()));
    let out = ctc_loss(&lp, v, target)?;
    if !out.feasible {
        return Ok(None);
    }
    let grad = out.grad.into_iter().map(T::from_f64).collect();
    Ok(Some(log_probs.graph().external_loss(log_probs, T::from_f64(out.nll), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_frame_single_label() {
        let lp = [0.2f64.ln(), 0.7f64.ln(), 0.1f64.ln()];
        let out = ctc_loss(&lp, 3, &LabelSequence::new(vec![1])).unwrap();
        assert!((out.nll + 0.7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_separator() {
        let lp = vec![(0.5f64).ln(); 4];
        let out = ctc_loss(&lp, 2, &LabelSequence::new(vec![1, 1])).unwrap();
        assert!(!out.feasible);
        assert!(out.nll.is_infinite());
    }

    #[test]
    fn uniform_two_frames_hand_enumeration() {
        let lp = vec![0.5f64.ln(); 4];
        let target = LabelSequence::new(vec![1]);
        let bf = ctc_brute_force(&lp, 2, &target).unwrap();
        assert!((bf + 0.75f64.ln()).abs() < 1e-12);
        let fb = ctc_loss(&lp, 2, &target).unwrap();
        assert!((fb.nll - bf).abs() < 1e-12);
    }

    #[test]
    fn greedy_examples() {
        let onehot = |path: &[usize], v: usize| -> Vec<f64> {
            path.iter()
                .flat_map(|&k| (0..v).map(move |j| if j == k { 0.0 } else { -5.0 }))
                .collect()
        };
        assert_eq!(ctc_greedy_decode(&onehot(&[1, 1, 0, 2], 3), 3).ids, vec![1, 2]);
        assert!(ctc_greedy_decode(&onehot(&[0, 0, 0], 3), 3).is_empty());
        assert_eq!(ctc_greedy_decode(&onehot(&[1, 0, 1], 3), 3).ids, vec![1, 1]);
    }

    #[test]
    fn vocab_round_trip_and_errors() {
        let v = TokenVocab::letters(4);
        let l = v.encode("ab dc").unwrap();
        assert_eq!(v.decode(&l), "ab dc");
        assert_eq!(v.encode("z"), Err(CtcError::UnknownSymbol('z')));
        assert_eq!(TokenVocab::new(['a', 'a']), Err(CtcError::DuplicateSymbol('a')));
        assert!(l.ids.iter().all(|&i| i != BLANK));
    }

    #[test]
    fn brute_force_limits() {
        let lp = vec![0.0; 9 * 2];
        assert_eq!(
            ctc_brute_force(&lp, 2, &LabelSequence::default()),
            Err(CtcError::TooLarge(9, 2))
        );
    }
}
