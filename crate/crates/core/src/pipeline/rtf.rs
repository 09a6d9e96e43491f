//! Inference throughput in audio seconds per wall-clock second.

use std::time::Instant;

use serde::Serialize;

use crate::encoder::{AttentionPattern, Encoder};
use crate::features::{FeatureSequence, NUM_MELS};
use crate::numerics::{Binder, Graph, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct RtfReport {
    pub batch_size: usize,
    pub pattern: String,
    pub params: usize,
    /// Feature frames in each packed row.
    pub row_frames: usize,
    pub audio_seconds: f64,
    /// Median wall time over the repeats.
    pub wall_seconds: f64,
    /// Audio seconds processed per wall second (1.0 / RTF).
    pub inverse_rtf: f64,
    pub repeats: usize,
    /// Per-repeat 1.0 / RTF values.
    pub samples: Vec<f64>,
    /// (max - min) / median over the repeats.
    pub noise_band: f64,
    pub precision: &'static str,
    pub hardware: String,
}

fn hardware() -> String {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    format!("{model}; {threads} threads; {}", std::env::consts::OS)
}

/// Packs every utterance back to back along time and cuts the stream into
/// `batch_size` rows of equal length, so no padding is processed. Rows are
/// encoded with a 32-bit inference graph.
pub fn rtf_bench(
    encoder: &Encoder,
    store: &ParamStore,
    audio: &[FeatureSequence],
    batch_size: usize,
    pattern: AttentionPattern,
    repeats: usize,
) -> Result<RtfReport> {
    if batch_size == 0 || repeats == 0 {
        return Err(Error::Config("batch size and repeats must be positive".into()));
    }
    let factor = encoder.config.subsampling_factor;
    let mut stream: Vec<f64> = Vec::new();
    for f in audio {
        stream.extend_from_slice(&f.frames);
    }
    let dim = NUM_MELS;
    let total = stream.len() / dim;
    let row_frames = total / batch_size / factor * factor;
    if row_frames == 0 {
        return Err(Error::Input(format!(
            "{total} frames cannot fill {batch_size} rows of at least {factor} frames"
        )));
    }
    let rows: Vec<FeatureSequence> = (0..batch_size)
        .map(|r| FeatureSequence::from_frames(stream[r * row_frames * dim..(r + 1) * row_frames * dim].to_vec()))
        .collect();
    let hop = audio.first().map(|f| f.frame_hop).unwrap_or(0.01);
    let audio_seconds = (batch_size * row_frames) as f64 * hop;
    let run = || -> Result<f64> {
        let start = Instant::now();
        for row in &rows {
            let g = Graph::<f32>::new();
            let b = Binder::frozen(&g, store);
            std::hint::black_box(encoder.forward(&b, row, pattern)?.value());
        }
        Ok(start.elapsed().as_secs_f64())
    };
    run()?;
    let mut walls = (0..repeats).map(|_| run()).collect::<Result<Vec<f64>>>()?;
    let samples: Vec<f64> = walls.iter().map(|w| audio_seconds / w).collect();
    walls.sort_by(f64::total_cmp);
    let wall = walls[walls.len() / 2];
    let inverse_rtf = audio_seconds / wall;
    let (lo, hi) = samples.iter().fold((f64::MAX, f64::MIN), |(a, b), &s| (a.min(s), b.max(s)));
    Ok(RtfReport {
        batch_size,
        pattern: pattern.to_string(),
        params: encoder.config.param_count(),
        row_frames,
        audio_seconds,
        wall_seconds: wall,
        inverse_rtf,
        repeats,
        samples,
        noise_band: (hi - lo) / inverse_rtf,
        precision: "f32",
        hardware: hardware(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ConformerConfig;
    use rand::SeedableRng;

    #[test]
    fn report_schema() {
        let cfg = ConformerConfig {
            num_layers: 1,
            model_dim: 8,
            attention_heads: 2,
            bias_cap: 4,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "encoder", &cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
        let feats = FeatureSequence::from_frames(vec![0.1; 40 * 128]);
        let r = rtf_bench(&enc, &store, &[feats], 2, AttentionPattern::Chunk { size: 4 }, 2).unwrap();
        assert_eq!(r.batch_size, 2);
        assert_eq!(r.row_frames, 20);
        assert_eq!(r.params, cfg.param_count());
        assert_eq!(r.pattern, "chunk:4");
        assert!(r.inverse_rtf > 0.0 && r.noise_band >= 0.0);
    }
}
