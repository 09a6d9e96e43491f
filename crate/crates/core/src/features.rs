//! Audio ingestion and 128-dimensional log-mel featurization at 16 kHz.
//!
//! Framing: 25 ms Hann window, 10 ms hop, 1024-point FFT, 128 triangular
//! mel filters spanning 125-7600 Hz, `log(energy + 1e-10)`.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

pub const SAMPLE_RATE: u32 = 16_000;
pub const NUM_MELS: usize = 128;
pub const WINDOW_SAMPLES: usize = 400;
pub const HOP_SAMPLES: usize = 160;
pub const FFT_SIZE: usize = 1024;
pub const MEL_LOW_HZ: f64 = 125.0;
pub const MEL_HIGH_HZ: f64 = 7600.0;
pub const ENERGY_FLOOR: f64 = 1e-10;
pub const FRAME_HOP_SECONDS: f64 = 0.010;
pub const FRAME_WINDOW_SECONDS: f64 = 0.025;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
    #[error("unsupported wav format: {0}")]
    Unsupported(String),
    #[error("malformed feature file: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    /// Samples in [-1, 1].
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        Self { samples, sample_rate }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Time-major `[num_frames, 128]` log-mel matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Vec<f64>,
    pub num_frames: usize,
    pub frame_hop: f64,
    pub frame_window: f64,
}

impl FeatureSequence {
    pub fn from_frames(frames: Vec<f64>) -> Self {
        assert_eq!(frames.len() % NUM_MELS, 0, "frames must have {NUM_MELS} columns");
        Self {
            num_frames: frames.len() / NUM_MELS,
            frames,
            frame_hop: FRAME_HOP_SECONDS,
            frame_window: FRAME_WINDOW_SECONDS,
        }
    }

    pub fn dims(&self) -> usize {
        NUM_MELS
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * NUM_MELS..(t + 1) * NUM_MELS]
    }

    pub fn is_empty(&self) -> bool {
        self.num_frames == 0
    }

    /// Per-utterance mean and variance normalization of every dimension.
    pub fn normalized(&self) -> FeatureSequence {
        if self.num_frames == 0 {
            return self.clone();
        }
        let n = self.num_frames as f64;
        let mut mean = [0.0; NUM_MELS];
        let mut var = [0.0; NUM_MELS];
        for t in 0..self.num_frames {
            for (m, &x) in mean.iter_mut().zip(self.frame(t)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for t in 0..self.num_frames {
            for (j, &x) in self.frame(t).iter().enumerate() {
                var[j] += (x - mean[j]).powi(2);
            }
        }
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v / n + 1e-5).sqrt()).collect();
        let frames = self
            .frames
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - mean[i % NUM_MELS]) * inv[i % NUM_MELS])
            .collect();
        FeatureSequence { frames, ..*self }
    }
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
///
/// Output length is `round(n * target / source)`.
pub fn resample(clip: &AudioClip, target_rate: u32) -> AudioClip {
    assert!(target_rate > 0, "target rate must be positive");
    if clip.sample_rate == target_rate || clip.samples.is_empty() {
        let out_len = (clip.samples.len() as f64 * target_rate as f64 / clip.sample_rate as f64).round() as usize;
        let mut samples = clip.samples.clone();
        samples.truncate(out_len);
        return AudioClip::new(samples, target_rate);
    }
    let ratio = target_rate as f64 / clip.sample_rate as f64;
    let out_len = (clip.samples.len() as f64 * ratio).round() as usize;
    let cutoff = ratio.min(1.0);
    let half_width = (16.0 / cutoff).ceil();
    let n = clip.samples.len() as isize;
    let samples = (0..out_len)
        .map(|i| {
            let center = i as f64 / ratio;
            let lo = (center - half_width).ceil() as isize;
            let hi = (center + half_width).floor() as isize;
            let mut acc = 0.0;
            for j in lo.max(0)..=hi.min(n - 1) {
                let x = center - j as f64;
                let arg = cutoff * x;
                let sinc = if arg.abs() < 1e-12 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
                let window = 0.5 * (1.0 + (PI * x / half_width).cos());
                acc += clip.samples[j as usize] * cutoff * sinc * window;
            }
            acc
        })
        .collect();
    AudioClip::new(samples, target_rate)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Precomputed window, FFT plan and filterbank.
pub struct MelFrontend {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    /// `[NUM_MELS]` sparse filters: first bin index and weights.
    filters: Vec<(usize, Vec<f64>)>,
}

impl Default for MelFrontend {
    fn default() -> Self {
        Self::new()
    }
}

impl MelFrontend {
    pub fn new() -> Self {
        // Periodic Hann window.
        let window = (0..WINDOW_SAMPLES)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / WINDOW_SAMPLES as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        let lo = hz_to_mel(MEL_LOW_HZ);
        let hi = hz_to_mel(MEL_HIGH_HZ);
        let edges: Vec<f64> = (0..NUM_MELS + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (NUM_MELS + 1) as f64))
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / FFT_SIZE as f64;
        let filters = (0..NUM_MELS)
            .map(|m| {
                let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
                let first = (left / bin_hz).floor() as usize;
                let last = ((right / bin_hz).ceil() as usize).min(FFT_SIZE / 2);
                let weights = (first..=last)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        let up = (f - left) / (center - left);
                        let down = (right - f) / (right - center);
                        up.min(down).max(0.0)
                    })
                    .collect();
                (first, weights)
            })
            .collect();
        Self { window, fft, filters }
    }

    /// Dense `[NUM_MELS, FFT_SIZE / 2 + 1]` filterbank.
    pub fn filterbank(&self) -> Vec<Vec<f64>> {
        self.filters
            .iter()
            .map(|(first, w)| {
                let mut row = vec![0.0; FFT_SIZE / 2 + 1];
                for (i, &v) in w.iter().enumerate() {
                    row[first + i] = v;
                }
                row
            })
            .collect()
    }

    pub fn num_frames(num_samples: usize) -> usize {
        if num_samples < WINDOW_SAMPLES {
            0
        } else {
            1 + (num_samples - WINDOW_SAMPLES) / HOP_SAMPLES
        }
    }

    /// Featurizes a 16 kHz clip; clips shorter than one window give zero
    /// frames.
    pub fn compute(&self, clip: &AudioClip) -> FeatureSequence {
        assert_eq!(clip.sample_rate, SAMPLE_RATE, "log-mel expects 16 kHz audio");
        let num_frames = Self::num_frames(clip.samples.len());
        let mut frames = Vec::with_capacity(num_frames * NUM_MELS);
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let mut power = vec![0.0; FFT_SIZE / 2 + 1];
        for t in 0..num_frames {
            let start = t * HOP_SAMPLES;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < WINDOW_SAMPLES {
                    Complex::new(clip.samples[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            for (first, w) in &self.filters {
                let e: f64 = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
                frames.push((e + ENERGY_FLOOR).ln());
            }
        }
        FeatureSequence {
            frames,
            num_frames,
            frame_hop: FRAME_HOP_SECONDS,
            frame_window: FRAME_WINDOW_SECONDS,
        }
    }
}

fn default_frontend() -> &'static MelFrontend {
    static FRONTEND: OnceLock<MelFrontend> = OnceLock::new();
    FRONTEND.get_or_init(MelFrontend::new)
}

pub fn log_mel(clip: &AudioClip) -> FeatureSequence {
    default_frontend().compute(clip)
}

/// Resamples to 16 kHz when needed, then featurizes.
pub fn featurize(clip: &AudioClip) -> FeatureSequence {
    if clip.sample_rate == SAMPLE_RATE {
        log_mel(clip)
    } else {
        log_mel(&resample(clip, SAMPLE_RATE))
    }
}

/// Reads a mono 16-bit PCM RIFF/WAVE file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip, FeatureError> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(FeatureError::Unsupported(format!(
            "{} channel(s), {} bits, {:?}; expected mono PCM-16",
            spec.channels, spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AudioClip::new(samples, spec.sample_rate))
}

/// Writes a mono 16-bit PCM file; samples are clipped to [-1, 1).
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<(), FeatureError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in &clip.samples {
        w.write_sample(pcm16(s))?;
    }
    w.finalize()?;
    Ok(())
}

pub fn pcm16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes a feature dump: a text header terminated by a line `end`,
/// followed by `frames * dims` little-endian f64 values, row-major.
///
/// ```text
/// usm-features 1
/// frames <T>
/// dims 128
/// hop <seconds>
/// window <seconds>
/// end
/// ```
pub fn write_features(mut w: impl Write, seq: &FeatureSequence) -> Result<(), FeatureError> {
    writeln!(w, "usm-features 1")?;
    writeln!(w, "frames {}", seq.num_frames)?;
    writeln!(w, "dims {}", NUM_MELS)?;
    writeln!(w, "hop {}", seq.frame_hop)?;
    writeln!(w, "window {}", seq.frame_window)?;
    writeln!(w, "end")?;
    for v in &seq.frames {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features(r: impl Read) -> Result<FeatureSequence, FeatureError> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut frames = None;
    let mut dims = None;
    let mut hop = None;
    let mut window = None;
    r.read_line(&mut line)?;
    if line.trim() != "usm-features 1" {
        return Err(FeatureError::Format(format!("bad magic line {:?}", line.trim())));
    }
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(FeatureError::Format("missing `end` line".into()));
        }
        let l = line.trim();
        if l == "end" {
            break;
        }
        let (k, v) = l
            .split_once(' ')
            .ok_or_else(|| FeatureError::Format(format!("bad header line {l:?}")))?;
        let bad = |_| FeatureError::Format(format!("bad value for {k}: {v:?}"));
        match k {
            "frames" => frames = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "dims" => dims = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "hop" => hop = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            "window" => window = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            _ => return Err(FeatureError::Format(format!("unknown header key {k:?}"))),
        }
    }
    let (Some(frames), Some(dims), Some(hop), Some(window)) = (frames, dims, hop, window) else {
        return Err(FeatureError::Format("incomplete header".into()));
    };
    if dims != NUM_MELS {
        return Err(FeatureError::Format(format!("expected {NUM_MELS} dims, got {dims}")));
    }
    let mut bytes = vec![0u8; frames * dims * 8];
    r.read_exact(&mut bytes)?;
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureSequence {
        frames: values,
        num_frames: frames,
        frame_hop: hop,
        frame_window: window,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, seconds: f64) -> AudioClip {
        let n = (rate as f64 * seconds) as usize;
        AudioClip::new(
            (0..n).map(|i| 0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin()).collect(),
            rate,
        )
    }

    #[test]
    fn resample_identity() {
        let c = sine(440.0, 16_000, 0.1);
        assert_eq!(resample(&c, 16_000), c);
    }

    #[test]
    fn resample_lengths() {
        let c = sine(440.0, 48_000, 1.0);
        let out = resample(&c, 16_000);
        assert!((out.samples.len() as i64 - 16_000).abs() <= 1);
        assert!(resample(&AudioClip::new(vec![], 8000), 16_000).samples.is_empty());
    }

    #[test]
    fn resample_keeps_dominant_frequency() {
        let up = resample(&sine(100.0, 8_000, 1.0), 16_000);
        assert_eq!(up.samples.len(), 16_000);
        // Naive DFT magnitude over 1 Hz bins (the clip is exactly one second).
        let mag = |k: usize| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &s) in up.samples.iter().enumerate() {
                let a = 2.0 * PI * k as f64 * n as f64 / up.samples.len() as f64;
                re += s * a.cos();
                im -= s * a.sin();
            }
            re.hypot(im)
        };
        let peak = (20..400).max_by(|&a, &b| mag(a).total_cmp(&mag(b))).unwrap();
        assert_eq!(peak, 100);
    }

    #[test]
    fn frame_counts() {
        assert_eq!(MelFrontend::num_frames(16_000), 98);
        assert_eq!(MelFrontend::num_frames(399), 0);
        assert_eq!(log_mel(&AudioClip::new(vec![0.1; 300], 16_000)).num_frames, 0);
    }

    #[test]
    fn silence_hits_the_floor() {
        let f = log_mel(&AudioClip::new(vec![0.0; 4000], 16_000));
        assert!(f.frames.iter().all(|&v| v == ENERGY_FLOOR.ln()));
    }

    #[test]
    fn every_filter_has_support() {
        let fb = MelFrontend::new().filterbank();
        assert_eq!(fb.len(), NUM_MELS);
        assert!(fb.iter().all(|row| row.iter().any(|&w| w > 0.0)));
    }

    #[test]
    fn feature_dump_round_trip() {
        let f = log_mel(&sine(300.0, 16_000, 0.05));
        let mut buf = Vec::new();
        write_features(&mut buf, &f).unwrap();
        assert_eq!(read_features(buf.as_slice()).unwrap(), f);
    }

    #[test]
    fn wav_round_trip_and_rejects_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let c = AudioClip::new(vec![0.0, 0.5, -0.5, 0.25], 16_000);
        write_wav(&p, &c).unwrap();
        assert_eq!(read_wav(&p).unwrap(), c);

        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&stereo), Err(FeatureError::Unsupported(_))));
    }
}
