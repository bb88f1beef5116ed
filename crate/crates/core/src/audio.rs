//! Waveform container, WAV input/output and band-limited resampling.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

/// Longest clip the pipeline accepts, in seconds.
pub const MAX_CLIP_SECONDS: f64 = 10.0;

/// Mono audio with nominal amplitude range `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument("waveform has no samples".into()));
        }
        let duration = samples.len() as f64 / sample_rate as f64;
        if duration > MAX_CLIP_SECONDS + 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "clip lasts {duration:.3} s, longer than {MAX_CLIP_SECONDS} s"
            )));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

/// Reads a mono WAV file stored as 16-bit integer or 32-bit float PCM.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    if !path.exists() {
        return Err(Error::MissingAudio(path.to_path_buf()));
    }
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::InvalidArgument(format!("{}: expected mono audio, found {} channels", path.display(), spec.channels)));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => {
            reader.samples::<i16>().map(|s| s.map(|v| v as f32 / 32768.0)).collect::<Result<_, _>>().map_err(wav_err)?
        }
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect::<Result<_, _>>().map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::InvalidArgument(format!("{}: unsupported sample format {fmt:?}/{bits}", path.display())))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Encodes a waveform as mono PCM16 WAV bytes. Samples are clamped to `[-1, 1]`.
pub fn encode_wav_pcm16(w: &Waveform) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    let wav_err = |source| Error::Wav { path: "<memory>".into(), source };
    {
        let mut writer = hound::WavWriter::new(&mut cursor, spec).map_err(wav_err)?;
        for &s in &w.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v).map_err(wav_err)?;
        }
        writer.finalize().map_err(wav_err)?;
    }
    Ok(cursor.into_inner())
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Windowed-sinc polyphase resampler for a rational rate change.
pub struct Resampler {
    up: usize,
    down: usize,
    half_taps: usize,
    /// `up` phases, each with `2 · half_taps` coefficients
    table: Vec<f64>,
}

impl Resampler {
    const ZERO_CROSSINGS: f64 = 16.0;

    pub fn new(from_rate: u32, to_rate: u32) -> Result<Self> {
        if from_rate == 0 || to_rate == 0 {
            return Err(Error::InvalidArgument("sample rates must be positive".into()));
        }
        let g = gcd(from_rate as u64, to_rate as u64);
        let (up, down) = ((to_rate as u64 / g) as usize, (from_rate as u64 / g) as usize);
        // anti-aliasing cutoff relative to the input Nyquist frequency
        let cutoff = (up as f64 / down as f64).min(1.0) * 0.95;
        let half_width = Self::ZERO_CROSSINGS / cutoff;
        let half_taps = half_width.ceil() as usize;
        let taps = 2 * half_taps;
        let mut table = vec![0.0; up * taps];
        for phase in 0..up {
            let frac = phase as f64 / up as f64;
            for k in 0..taps {
                // distance from the output instant to input sample (base - half_taps + 1 + k)
                let x = (k as f64 - half_taps as f64 + 1.0) - frac;
                let sinc = if x.abs() < 1e-12 { 1.0 } else { (PI * cutoff * x).sin() / (PI * cutoff * x) };
                let u = x / half_width;
                let window = if u.abs() >= 1.0 { 0.0 } else { 0.5 + 0.5 * (PI * u).cos() };
                table[phase * taps + k] = cutoff * sinc * window;
            }
        }
        Ok(Self { up, down, half_taps, table })
    }

    pub fn is_identity(&self) -> bool {
        self.up == self.down
    }

    pub fn process(&self, input: &[f32]) -> Vec<f32> {
        if self.is_identity() {
            return input.to_vec();
        }
        let n_out = (input.len() * self.up).div_ceil(self.down);
        let taps = 2 * self.half_taps;
        (0..n_out)
            .map(|n| {
                let pos = n * self.down;
                let (base, phase) = (pos / self.up, pos % self.up);
                let coeffs = &self.table[phase * taps..(phase + 1) * taps];
                let start = base as isize - self.half_taps as isize + 1;
                let mut acc = 0.0f64;
                for (k, &c) in coeffs.iter().enumerate() {
                    let i = start + k as isize;
                    if i >= 0 && (i as usize) < input.len() {
                        acc += c * input[i as usize] as f64;
                    }
                }
                acc as f32
            })
            .collect()
    }
}

/// Converts `w` to `rate`; identity when the rates already agree.
pub fn resample(w: &Waveform, rate: u32) -> Result<Waveform> {
    if w.sample_rate == rate {
        return Ok(w.clone());
    }
    let out = Resampler::new(w.sample_rate, rate)?.process(&w.samples);
    Waveform::new(out, rate)
}
