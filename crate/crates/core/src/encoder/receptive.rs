//! Exact receptive-field arithmetic for stacked attention + convolution.
//!
//! Spans count the distance between the outermost input frames that can
//! influence one output frame (`width = span + 1`). All arithmetic is
//! integer; seconds are derived from an integer frame duration in
//! microseconds.

use std::fmt;

use super::attention::AttentionPattern;
use super::ConformerConfig;

/// 10 ms feature hop times 4x subsampling.
pub const ENCODER_FRAME_MICROS: u64 = 40_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ReceptiveFieldReport {
    pub pattern: AttentionPattern,
    pub num_layers: usize,
    pub encoder_frame_micros: u64,
    /// Attention-only span; `None` when unbounded (global attention).
    pub attention_rf_frames: Option<u64>,
    /// Span added by the depthwise convolutions alone.
    pub conv_rf_frames: u64,
    /// Span of attention and convolution combined; `None` when unbounded.
    pub total_rf_frames: Option<u64>,
}

impl ReceptiveFieldReport {
    pub fn attention_rf_width(&self) -> Option<u64> {
        self.attention_rf_frames.map(|s| s + 1)
    }

    pub fn total_rf_width(&self) -> Option<u64> {
        self.total_rf_frames.map(|s| s + 1)
    }

    fn seconds(&self, frames: u64) -> f64 {
        (frames * self.encoder_frame_micros) as f64 / 1e6
    }

    pub fn attention_rf_seconds(&self) -> Option<f64> {
        self.attention_rf_frames.map(|f| self.seconds(f))
    }

    pub fn total_rf_seconds(&self) -> Option<f64> {
        self.total_rf_frames.map(|f| self.seconds(f))
    }

    /// One tab-separated `key=value` line.
    pub fn machine_line(&self) -> String {
        let opt = |v: Option<u64>| v.map_or("unbounded".to_string(), |x| x.to_string());
        let secs = |v: Option<f64>| v.map_or("unbounded".to_string(), |x| format!("{x:.3}"));
        format!(
            "rf\tpattern={}\tlayers={}\tframes={}\tseconds={}\twidth={}\tconv_frames={}\ttotal_frames={}\ttotal_seconds={}",
            self.pattern,
            self.num_layers,
            opt(self.attention_rf_frames),
            secs(self.attention_rf_seconds()),
            opt(self.attention_rf_width()),
            self.conv_rf_frames,
            opt(self.total_rf_frames),
            secs(self.total_rf_seconds()),
        )
    }
}

impl fmt::Display for ReceptiveFieldReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<u64>| v.map_or("unbounded".to_string(), |x| x.to_string());
        let secs = |v: Option<f64>| v.map_or("unbounded".to_string(), |x| format!("{x:.3} s"));
        writeln!(f, "{:<22}{}", "pattern", self.pattern)?;
        writeln!(f, "{:<22}{}", "layers", self.num_layers)?;
        writeln!(f, "{:<22}{} ms", "encoder frame", self.encoder_frame_micros as f64 / 1e3)?;
        writeln!(f, "{:<22}{}", "attention span", opt(self.attention_rf_frames))?;
        writeln!(f, "{:<22}{}", "attention width", opt(self.attention_rf_width()))?;
        writeln!(f, "{:<22}{}", "attention seconds", secs(self.attention_rf_seconds()))?;
        writeln!(f, "{:<22}{}", "conv span", self.conv_rf_frames)?;
        writeln!(f, "{:<22}{}", "total span", opt(self.total_rf_frames))?;
        write!(f, "{:<22}{}", "total seconds", secs(self.total_rf_seconds()))
    }
}

/// Receptive field of `num_layers` conformer blocks using `pattern`, with
/// depthwise kernels of `conv_kernel` frames (0 disables convolution).
pub fn receptive_field_for(
    pattern: AttentionPattern,
    num_layers: usize,
    conv_kernel: usize,
    encoder_frame_micros: u64,
) -> ReceptiveFieldReport {
    let layers = num_layers as u64;
    let conv_each = conv_kernel.saturating_sub(1) as u64;
    let (attention, total) = match pattern {
        AttentionPattern::Global => (None, None),
        AttentionPattern::Local { left, right } => {
            let a = layers * (left + right) as u64;
            (Some(a), Some(a + layers * conv_each))
        }
        AttentionPattern::Chunk { size } => (
            Some(if num_layers == 0 { 0 } else { size as u64 - 1 }),
            Some(chunk_total_span(size, num_layers, conv_kernel)),
        ),
    };
    ReceptiveFieldReport {
        pattern,
        num_layers,
        encoder_frame_micros,
        attention_rf_frames: attention,
        conv_rf_frames: layers * conv_each,
        total_rf_frames: total,
    }
}

pub fn receptive_field(config: &ConformerConfig, pattern: AttentionPattern, encoder_frame_micros: u64) -> ReceptiveFieldReport {
    let kernel = if config.use_conv { config.conv_kernel_size } else { 0 };
    receptive_field_for(pattern, config.num_layers, kernel, encoder_frame_micros)
}

/// Worst-case span under chunked attention with convolutions, found by
/// propagating the influence interval of each output offset within a chunk
/// back through the stack on an unbounded sequence.
fn chunk_total_span(size: usize, num_layers: usize, conv_kernel: usize) -> u64 {
    let pad = (conv_kernel.saturating_sub(1) / 2) as i64;
    let s = size as i64;
    // Any offset far from the sequence start behaves like the unbounded case.
    let origin = s * (num_layers as i64 + 2) * (pad + 1);
    (0..s)
        .map(|offset| {
            let (mut lo, mut hi) = (origin + offset, origin + offset);
            for _ in 0..num_layers {
                // Block order: attention, then convolution. Walk backwards.
                lo -= pad;
                hi += pad;
                lo = lo.div_euclid(s) * s;
                hi = hi.div_euclid(s) * s + s - 1;
            }
            (hi - lo) as u64
        })
        .max()
        .unwrap_or(0)
}
