//! Word and character error rates.

use indexmap::IndexMap;
use serde::Serialize;

use crate::{Error, Result};

/// Edit operations of one minimum-cost alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.reference_len as f64
    }

    pub fn deletion_rate(&self) -> f64 {
        self.deletions as f64 / self.reference_len as f64
    }

    pub fn add(&mut self, other: &EditCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.reference_len += other.reference_len;
    }
}

/// Levenshtein alignment with unit costs. Among minimum-cost alignments
/// the backtrace prefers matches/substitutions, then deletions.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut c = EditCounts {
        reference_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]) {
            if reference[i - 1] != hypothesis[j - 1] {
                c.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

pub fn word_edits(reference: &str, hypothesis: &str) -> EditCounts {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    align(&r, &h)
}

/// Characters of the whitespace-normalized text, single spaces included.
pub fn char_edits(reference: &str, hypothesis: &str) -> EditCounts {
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").chars().collect::<Vec<char>>();
    align(&norm(reference), &norm(hypothesis))
}

pub fn wer(reference: &[&str], hypothesis: &[&str]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input("word error rate needs a non-empty reference".into()));
    }
    Ok(align(reference, hypothesis).rate())
}

pub fn cer(reference: &[char], hypothesis: &[char]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input("character error rate needs a non-empty reference".into()));
    }
    Ok(align(reference, hypothesis).rate())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ErrorTally {
    pub words: EditCounts,
    pub chars: EditCounts,
    pub utterances: usize,
}

impl ErrorTally {
    pub fn add(&mut self, reference: &str, hypothesis: &str) {
        self.words.add(&word_edits(reference, hypothesis));
        self.chars.add(&char_edits(reference, hypothesis));
        self.utterances += 1;
    }

    pub fn wer(&self) -> f64 {
        self.words.rate()
    }

    pub fn cer(&self) -> f64 {
        self.chars.rate()
    }
}

/// Per-language and pooled error tallies.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_language: IndexMap<String, ErrorTally>,
    pub pooled: ErrorTally,
}

impl EvalReport {
    pub fn add(&mut self, language: &str, reference: &str, hypothesis: &str) {
        self.per_language.entry(language.to_string()).or_default().add(reference, hypothesis);
        self.pooled.add(reference, hypothesis);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(wer(&["a", "b"], &["a", "b"]).unwrap(), 0.0);
        assert!((wer(&["a", "b", "c"], &["a", "c"]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(wer(&[], &["a"]).is_err());
        let c = word_edits("a b c", "x b c d");
        assert_eq!((c.substitutions, c.deletions, c.insertions), (1, 0, 1));
        assert_eq!(word_edits("a b c", "").deletions, 3);
    }

    #[test]
    fn char_rate_normalizes_spaces() {
        let c = char_edits("ab  cd", " ab cd ");
        assert_eq!(c.errors(), 0);
        assert_eq!(c.reference_len, 5);
    }
}
