//! Log-mel feature extraction and frame-level training targets.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{resample, Waveform};
use crate::error::{Error, Result};
use crate::evaluation::Event;

/// Front-end settings. `time_pool` is the factor by which the model
/// downsamples time; frame targets are produced at that pooled rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_size: usize,
    pub hop_size: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub time_pool: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self::advanced()
    }
}

impl FeatureConfig {
    /// 16 kHz, 2048-point window, 255-sample hop, 128 mel bands.
    pub fn advanced() -> Self {
        Self {
            sample_rate: 16_000,
            window_size: 2048,
            hop_size: 255,
            n_mels: 128,
            fmin: 0.0,
            fmax: 8_000.0,
            log_floor: 1e-10,
            time_pool: 4,
        }
    }

    /// 44.1 kHz, 2048-point window, 511-sample hop, 64 mel bands.
    pub fn baseline() -> Self {
        Self {
            sample_rate: 44_100,
            window_size: 2048,
            hop_size: 511,
            n_mels: 64,
            fmin: 0.0,
            fmax: 22_050.0,
            log_floor: 1e-10,
            time_pool: 4,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "advanced" => Ok(Self::advanced()),
            "baseline" => Ok(Self::baseline()),
            other => Err(Error::BadFeatureConfig(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::BadFeatureConfig(msg.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.hop_size == 0 || self.hop_size > self.window_size {
            return bad("need 0 < hop_size <= window_size");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad("need 0 <= fmin < fmax <= sample_rate / 2");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        if self.time_pool == 0 {
            return bad("time_pool must be positive");
        }
        Ok(())
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop_size as f64 / self.sample_rate as f64
    }

    /// Frame spacing after the model's time pooling.
    pub fn effective_hop_seconds(&self) -> f64 {
        self.hop_seconds() * self.time_pool as f64
    }
}

/// `[n_frames × n_mels]` log-mel energies of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureClip {
    pub values: Array2<f32>,
    pub hop_seconds: f64,
    /// Source clip length in seconds.
    pub duration: f64,
    pub clip_id: String,
}

impl FeatureClip {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.ncols()
    }

    pub fn with_values(&self, values: Array2<f32>) -> Self {
        Self { values, hop_seconds: self.hop_seconds, duration: self.duration, clip_id: self.clip_id.clone() }
    }
}

/// `[n_output_frames × n_classes]` activity targets at the pooled frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTargets {
    pub values: Array2<f32>,
    pub effective_hop_seconds: f64,
}

/// `floor((n_samples − window) / hop) + 1`.
pub fn frame_count(n_samples: usize, window: usize, hop: usize) -> Result<usize> {
    if hop == 0 {
        return Err(Error::InvalidArgument("hop must be positive".into()));
    }
    if n_samples < window {
        return Err(Error::ClipTooShort { samples: n_samples, window });
    }
    Ok((n_samples - window) / hop + 1)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the mel scale, stored sparsely per band.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `(first_bin, weights)` for each band
    bands: Vec<(usize, Vec<f32>)>,
    centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Self {
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let points: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64)).collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let bands = (0..n_mels)
            .map(|m| {
                let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
                let mut first = None;
                let mut weights = Vec::new();
                for k in 0..n_bins {
                    let f = k as f64 * bin_hz;
                    let w = if f > left && f < right {
                        if f <= center {
                            (f - left) / (center - left)
                        } else {
                            (right - f) / (right - center)
                        }
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        first.get_or_insert(k);
                        weights.push(w as f32);
                    } else if first.is_some() {
                        break;
                    }
                }
                (first.unwrap_or(0), weights)
            })
            .collect();
        Self { bands, centers: points[1..=n_mels].to_vec() }
    }

    /// Peak frequency of each band in Hz.
    pub fn center_frequencies(&self) -> &[f64] {
        &self.centers
    }

    pub fn apply(&self, spectrum: &[f32], out: &mut [f32]) {
        for ((first, weights), o) in self.bands.iter().zip(out.iter_mut()) {
            *o = weights.iter().zip(&spectrum[*first..]).map(|(w, s)| w * s).sum();
        }
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_periodic(n: usize) -> Vec<f32> {
    (0..n).map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as f32).collect()
}

/// Reusable extractor holding the FFT plan, window and filterbank.
pub struct FeatureExtractor {
    cfg: FeatureConfig,
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    filterbank: MelFilterbank,
}

impl FeatureExtractor {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.window_size);
        Ok(Self {
            cfg: cfg.clone(),
            fft,
            window: hann_periodic(cfg.window_size),
            filterbank: MelFilterbank::new(cfg.n_mels, cfg.window_size, cfg.sample_rate, cfg.fmin, cfg.fmax),
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn extract(&self, w: &Waveform, clip_id: &str) -> Result<FeatureClip> {
        let resampled;
        let w = if w.sample_rate() == self.cfg.sample_rate {
            w
        } else {
            resampled = resample(w, self.cfg.sample_rate)?;
            &resampled
        };
        let samples = w.samples();
        let n = self.cfg.window_size;
        let frames = frame_count(samples.len(), n, self.cfg.hop_size)?;
        let floor = self.cfg.log_floor as f32;
        let mut values = Array2::<f32>::zeros((frames, self.cfg.n_mels));
        let mut buf = vec![Complex::new(0.0f32, 0.0); n];
        let mut scratch = vec![Complex::new(0.0f32, 0.0); self.fft.get_inplace_scratch_len()];
        let mut mag = vec![0.0f32; n / 2 + 1];
        for (i, mut row) in values.axis_iter_mut(Axis(0)).enumerate() {
            let start = i * self.cfg.hop_size;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(samples[start + k] * self.window[k], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, b) in mag.iter_mut().zip(&buf) {
                *m = b.norm();
            }
            let out = row.as_slice_mut().expect("row-major");
            self.filterbank.apply(&mag, out);
            out.iter_mut().for_each(|v| *v = v.max(floor).ln());
        }
        Ok(FeatureClip { values, hop_seconds: self.cfg.hop_seconds(), duration: w.duration(), clip_id: clip_id.to_string() })
    }
}

/// Magnitude STFT (periodic Hann) → mel filterbank → `ln(max(e, log_floor))`.
pub fn extract_features(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureClip> {
    FeatureExtractor::new(cfg)?.extract(w, "")
}

/// Output frame `i` of class `c` is active when its center
/// `(i + 0.5) · hop · time_pool` falls in `[onset, offset)` of a class-`c` event.
pub fn labels_to_frame_targets(
    events: &[Event],
    clip: &FeatureClip,
    time_pool: usize,
    n_classes: usize,
) -> Result<FrameTargets> {
    if time_pool == 0 {
        return Err(Error::InvalidArgument("time_pool must be positive".into()));
    }
    let hop = clip.hop_seconds * time_pool as f64;
    let frames = clip.n_frames().div_ceil(time_pool);
    let mut values = Array2::<f32>::zeros((frames, n_classes));
    for e in events {
        if e.class_id >= n_classes {
            return Err(Error::InvalidArgument(format!("event class {} outside [0, {n_classes})", e.class_id)));
        }
        if !(e.onset >= 0.0 && e.onset < e.offset && e.offset <= clip.duration + 1e-6) {
            return Err(Error::InvalidArgument(format!(
                "event [{}, {}) outside clip of {} s",
                e.onset, e.offset, clip.duration
            )));
        }
        for i in 0..frames {
            let center = (i as f64 + 0.5) * hop;
            if center >= e.onset && center < e.offset {
                values[[i, e.class_id]] = 1.0;
            }
        }
    }
    Ok(FrameTargets { values, effective_hop_seconds: hop })
}

/// Per-mel-band standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureStats {
    /// Mean and standard deviation of every band over all frames of `clips`.
    pub fn fit<'a>(clips: impl IntoIterator<Item = &'a Array2<f32>>) -> Result<Self> {
        let mut sum: Option<Array1<f64>> = None;
        let mut sq: Option<Array1<f64>> = None;
        let mut count = 0usize;
        for c in clips {
            let c64 = c.mapv(f64::from);
            let s = c64.sum_axis(Axis(0));
            let q = c64.mapv(|v| v * v).sum_axis(Axis(0));
            match (&mut sum, &mut sq) {
                (Some(a), Some(b)) => {
                    if a.len() != s.len() {
                        return Err(Error::ShapeMismatch("clips disagree on mel band count".into()));
                    }
                    *a += &s;
                    *b += &q;
                }
                _ => {
                    sum = Some(s);
                    sq = Some(q);
                }
            }
            count += c.nrows();
        }
        let (Some(sum), Some(sq)) = (sum, sq) else {
            return Err(Error::EmptySplit);
        };
        let n = count as f64;
        let mean = sum.mapv(|s| s / n);
        let std = sq.iter().zip(&mean).map(|(&q, &m)| ((q / n - m * m).max(0.0).sqrt().max(1e-5)) as f32).collect();
        Ok(Self { mean: mean.iter().map(|&m| m as f32).collect(), std })
    }

    pub fn apply(&self, values: &mut Array2<f32>) {
        for mut row in values.axis_iter_mut(Axis(0)) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}
