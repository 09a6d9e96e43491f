use std::fmt;
use std::str::FromStr;

/// Which keys each query position may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionPattern {
    Global,
    /// Band of `left` past and `right` future frames around each query.
    Local { left: usize, right: usize },
    /// Non-overlapping blocks of `size` frames aligned to position 0; the
    /// final partial block attends within itself.
    Chunk { size: usize },
}

impl AttentionPattern {
    /// Key window `[lo, hi)` for every query row of a length-`t` sequence.
    pub fn ranges(&self, t: usize) -> Vec<(usize, usize)> {
        (0..t)
            .map(|i| match *self {
                Self::Global => (0, t),
                Self::Local { left, right } => (i.saturating_sub(left), (i + right + 1).min(t)),
                Self::Chunk { size } => {
                    let start = i / size * size;
                    (start, (start + size).min(t))
                }
            })
            .collect()
    }

    /// Dense `t x t` boolean mask; `mask[i][j]` is true when query `i` may
    /// attend to key `j`.
    pub fn mask(&self, t: usize) -> Vec<Vec<bool>> {
        (0..t)
            .map(|i| {
                (0..t)
                    .map(|j| match *self {
                        Self::Global => true,
                        Self::Local { left, right } => {
                            let d = j as isize - i as isize;
                            -(left as isize) <= d && d <= right as isize
                        }
                        Self::Chunk { size } => i / size == j / size,
                    })
                    .collect()
            })
            .collect()
    }

    /// Clip distance for the relative-position bias table.
    pub fn bias_cap(&self) -> usize {
        match *self {
            Self::Global => 64,
            Self::Local { left, right } => left.max(right).max(1),
            Self::Chunk { size } => size.max(1),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match *self {
            Self::Chunk { size: 0 } => Err("chunk size must be positive".into()),
            _ => Ok(()),
        }
    }
}

pub fn build_attention_mask(pattern: AttentionPattern, t: usize) -> Vec<Vec<bool>> {
    pattern.mask(t)
}

impl fmt::Display for AttentionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Global => write!(f, "global"),
            Self::Local { left, right } => write!(f, "local:{left}:{right}"),
            Self::Chunk { size } => write!(f, "chunk:{size}"),
        }
    }
}

impl FromStr for AttentionPattern {
    type Err = String;

    /// `global`, `local:<left>:<right>` or `chunk:<frames>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str| p.parse::<usize>().map_err(|e| format!("bad number {p:?} in pattern {s:?}: {e}"));
        let pat = match parts.as_slice() {
            ["global"] => Self::Global,
            ["local", l, r] => Self::Local {
                left: num(l)?,
                right: num(r)?,
            },
            ["chunk", n] => Self::Chunk { size: num(n)? },
            _ => return Err(format!("unrecognized attention pattern {s:?}")),
        };
        pat.validate()?;
        Ok(pat)
    }
}
