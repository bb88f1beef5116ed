//! Deterministic synthetic soundscapes with strong, weak and unlabeled
//! manifests.
//!
//! Layout of a generated corpus:
//!
//! ```text
//! <dir>/audio/<split>/<split>_<index>.wav
//! <dir>/metadata/<split>.tsv
//! ```
//!
//! Every clip draws from its own rng substream keyed by (split, index), so
//! a clip does not change when the counts of other splits change.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{encode_wav_pcm16, Waveform};
use crate::error::{Error, Result};
use crate::evaluation::Event;

/// Temporal envelope of a class prototype.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modulation {
    /// Continuous band-limited noise.
    Steady,
    /// Band-limited noise gated on and off at `rate_hz` with half duty cycle.
    Pulsed { rate_hz: f64 },
    /// Linear sine sweep from the low to the high band edge.
    Chirp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class_id: usize,
    /// `(low, high)` in Hz
    pub band: (f64, f64),
    pub modulation: Modulation,
    /// `(min, max)` in seconds
    pub duration_range: (f64, f64),
}

pub fn class_name(class_id: usize) -> String {
    format!("class_{class_id}")
}

/// Inverse of [`class_name`].
pub fn parse_class_name(name: &str, n_classes: usize) -> Option<usize> {
    name.strip_prefix("class_").and_then(|s| s.parse().ok()).filter(|&c| c < n_classes)
}

/// The ten default prototypes; all bands lie below 8 kHz.
pub fn default_prototypes() -> Vec<ClassPrototype> {
    use Modulation::*;
    let table = [
        ((250.0, 400.0), Steady, (0.5, 3.0)),
        ((500.0, 700.0), Pulsed { rate_hz: 4.0 }, (1.0, 4.0)),
        ((800.0, 1600.0), Chirp, (0.5, 2.0)),
        ((1000.0, 1200.0), Steady, (0.5, 3.0)),
        ((1500.0, 1900.0), Pulsed { rate_hz: 8.0 }, (1.0, 4.0)),
        ((2200.0, 2600.0), Steady, (0.5, 3.0)),
        ((3000.0, 4500.0), Chirp, (0.5, 2.0)),
        ((3500.0, 4000.0), Pulsed { rate_hz: 3.0 }, (1.0, 4.0)),
        ((5000.0, 5600.0), Steady, (0.5, 3.0)),
        ((6200.0, 7200.0), Pulsed { rate_hz: 6.0 }, (1.0, 4.0)),
    ];
    table
        .into_iter()
        .enumerate()
        .map(|(class_id, (band, modulation, duration_range))| ClassPrototype { class_id, band, modulation, duration_range })
        .collect()
}

/// White noise restricted to `[low, high]` Hz by zeroing FFT bins.
fn band_noise(n: usize, sample_rate: u32, band: (f64, f64), rng: &mut impl Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> =
        (0..n).map(|_| Complex::new(StandardNormal.sample(rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let df = sample_rate as f64 / n as f64;
    for (k, v) in buf.iter_mut().enumerate() {
        // bin k and bin n - k carry the same frequency
        let freq = k.min(n - k) as f64 * df;
        if freq < band.0 || freq > band.1 {
            *v = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Noise with a `1/f` power spectrum above 20 Hz.
fn pink_noise(n: usize, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> =
        (0..n).map(|_| Complex::new(StandardNormal.sample(rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let df = sample_rate as f64 / n as f64;
    for (k, v) in buf.iter_mut().enumerate() {
        let freq = k.min(n - k) as f64 * df;
        *v = if freq < 20.0 { Complex::new(0.0, 0.0) } else { *v / freq.sqrt() };
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let r = rms(x);
    if r > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / r);
    }
}

/// Raised-cosine fade of `len` samples at both ends.
fn apply_ramps(x: &mut [f64], len: usize) {
    let len = len.min(x.len() / 2);
    let n = x.len();
    for i in 0..len {
        let g = 0.5 - 0.5 * (PI * i as f64 / len as f64).cos();
        x[i] *= g;
        x[n - 1 - i] *= g;
    }
}

/// One event of `duration` seconds with unit RMS and 10 ms onset/offset ramps.
pub fn synth_event_waveform(proto: &ClassPrototype, duration: f64, sample_rate: u32, rng: &mut impl Rng) -> Result<Waveform> {
    let (lo, hi) = proto.duration_range;
    if !(duration >= lo - 1e-9 && duration <= hi + 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "duration {duration} s outside [{lo}, {hi}] for class {}",
            proto.class_id
        )));
    }
    let n = (duration * sample_rate as f64).round() as usize;
    if n == 0 {
        return Err(Error::InvalidArgument("event shorter than one sample".into()));
    }
    let sr = sample_rate as f64;
    let mut x = match proto.modulation {
        Modulation::Steady => band_noise(n, sample_rate, proto.band, rng),
        Modulation::Pulsed { rate_hz } => {
            let mut x = band_noise(n, sample_rate, proto.band, rng);
            let phase0: f64 = rng.random_range(0.0..1.0);
            for (i, v) in x.iter_mut().enumerate() {
                // half-sine gate: on for the first half of each period
                let phase = (i as f64 / sr * rate_hz + phase0).fract();
                let gate = if phase < 0.5 { (PI * phase / 0.5).sin() } else { 0.0 };
                *v *= gate;
            }
            x
        }
        Modulation::Chirp => {
            let (f0, f1) = proto.band;
            let phase0: f64 = rng.random_range(0.0..2.0 * PI);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    (2.0 * PI * (f0 * t + (f1 - f0) * t * t / (2.0 * duration)) + phase0).sin()
                })
                .collect()
        }
    };
    normalize_rms(&mut x, 1.0);
    apply_ramps(&mut x, (0.010 * sr).round() as usize);
    Waveform::new(x.into_iter().map(|v| v as f32).collect(), sample_rate)
}

/// One event of a scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEvent {
    pub class_id: usize,
    pub onset: f64,
    pub duration: f64,
    pub snr_db: f64,
}

impl SceneEvent {
    pub fn offset(&self) -> f64 {
        self.onset + self.duration
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub clip_duration: f64,
    pub events: Vec<SceneEvent>,
    /// Background RMS level in dBFS.
    pub background_level: f64,
    pub max_polyphony: usize,
}

/// Largest number of simultaneously active events.
pub fn polyphony(events: &[SceneEvent]) -> usize {
    let mut edges: Vec<(f64, i32)> = events.iter().flat_map(|e| [(e.onset, 1), (e.offset(), -1)]).collect();
    // offsets sort before onsets at the same instant: [a, b) then [b, c) do not overlap
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (mut active, mut peak) = (0i32, 0i32);
    for (_, d) in edges {
        active += d;
        peak = peak.max(active);
    }
    peak as usize
}

impl SceneSpec {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if !(self.clip_duration > 0.0 && self.clip_duration <= crate::audio::MAX_CLIP_SECONDS) {
            return Err(Error::InvalidArgument(format!("clip duration {} s outside (0, 10]", self.clip_duration)));
        }
        for e in &self.events {
            if e.class_id >= n_classes {
                return Err(Error::InvalidArgument(format!("event class {} outside [0, {n_classes})", e.class_id)));
            }
            if !(e.onset >= 0.0 && e.duration > 0.0 && e.offset() <= self.clip_duration + 1e-9) {
                return Err(Error::InvalidArgument(format!(
                    "event at {} s lasting {} s leaves the {} s clip",
                    e.onset, e.duration, self.clip_duration
                )));
            }
        }
        let p = polyphony(&self.events);
        if p > self.max_polyphony {
            return Err(Error::InvalidArgument(format!("polyphony {p} exceeds the maximum of {}", self.max_polyphony)));
        }
        Ok(())
    }
}

/// Mixes the scene's events over pink noise and returns the audio with its
/// ground-truth events. The mix is scaled down if its peak would clip.
pub fn synth_clip(spec: &SceneSpec, protos: &[ClassPrototype], sample_rate: u32, rng: &mut impl Rng) -> Result<(Waveform, Vec<Event>)> {
    spec.validate(protos.len())?;
    let n = (spec.clip_duration * sample_rate as f64).round() as usize;
    let mut mix = pink_noise(n, sample_rate, rng);
    let bg_rms = 10f64.powf(spec.background_level / 20.0);
    normalize_rms(&mut mix, bg_rms);
    let mut labels = Vec::with_capacity(spec.events.len());
    for e in &spec.events {
        let proto = protos
            .iter()
            .find(|p| p.class_id == e.class_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no prototype for class {}", e.class_id)))?;
        let w = synth_event_waveform(proto, e.duration, sample_rate, rng)?;
        let gain = bg_rms * 10f64.powf(e.snr_db / 20.0);
        let start = (e.onset * sample_rate as f64).round() as usize;
        for (i, &s) in w.samples().iter().enumerate() {
            if let Some(m) = mix.get_mut(start + i) {
                *m += gain * s as f64;
            }
        }
        labels.push(Event::new(e.class_id, e.onset, e.offset()));
    }
    let peak = mix.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.99 {
        mix.iter_mut().for_each(|v| *v *= 0.99 / peak);
    }
    Ok((Waveform::new(mix.into_iter().map(|v| v as f32).collect(), sample_rate)?, labels))
}

/// Clip counts per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub strong: usize,
    pub weak: usize,
    pub unlabeled: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self { strong: 40, weak: 80, unlabeled: 400, validation: 60, test: 60 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub counts: SplitCounts,
    pub seed: u64,
    pub sample_rate: u32,
    /// Corpus directory; relative paths resolve against the config file.
    pub output_dir: PathBuf,
    pub max_polyphony: usize,
    /// `[low, high]` event SNR range in dB
    pub snr_db: (f64, f64),
    pub background_dbfs: f64,
    pub clip_duration: f64,
    /// Upper bound on events per clip.
    pub max_events: usize,
    /// Smallest gap between two events of the same class, in seconds.
    pub min_same_class_gap: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            counts: SplitCounts::default(),
            seed: 0,
            sample_rate: 16_000,
            output_dir: PathBuf::from("corpus"),
            max_polyphony: 3,
            snr_db: (6.0, 24.0),
            background_dbfs: -30.0,
            clip_duration: 10.0,
            max_events: 4,
            min_same_class_gap: 0.5,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("corpus: {m}")));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.max_polyphony == 0 {
            return bad("max_polyphony must be at least 1");
        }
        if !(self.snr_db.0 <= self.snr_db.1) {
            return bad("snr_db must be an ordered [low, high] pair");
        }
        if !(self.clip_duration > 0.0 && self.clip_duration <= crate::audio::MAX_CLIP_SECONDS) {
            return bad("clip_duration must lie in (0, 10]");
        }
        Ok(())
    }
}

/// The five corpus splits, in generation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Strong,
    Weak,
    Unlabeled,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Strong, Split::Weak, Split::Unlabeled, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Strong => "strong",
            Split::Weak => "weak",
            Split::Unlabeled => "unlabeled",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn count(self, c: &SplitCounts) -> usize {
        match self {
            Split::Strong => c.strong,
            Split::Weak => c.weak,
            Split::Unlabeled => c.unlabeled,
            Split::Validation => c.validation,
            Split::Test => c.test,
        }
    }

    pub fn manifest_path(self, corpus: &Path) -> PathBuf {
        corpus.join("metadata").join(format!("{}.tsv", self.name()))
    }

    pub fn audio_dir(self, corpus: &Path) -> PathBuf {
        corpus.join("audio").join(self.name())
    }
}

/// Draws a random scene that respects the polyphony and same-class gap limits.
pub fn draw_scene(cfg: &CorpusConfig, protos: &[ClassPrototype], rng: &mut impl Rng) -> SceneSpec {
    let target = rng.random_range(1..=cfg.max_events.max(1));
    let mut events: Vec<SceneEvent> = Vec::new();
    let mut attempts = 0;
    while events.len() < target && attempts < 50 {
        attempts += 1;
        let proto = &protos[rng.random_range(0..protos.len())];
        let (lo, hi) = proto.duration_range;
        let duration = ((rng.random_range(lo..=hi) * 1000.0).round() / 1000.0).min(cfg.clip_duration);
        let max_onset = cfg.clip_duration - duration;
        let onset = ((rng.random_range(0.0..=max_onset) * 1000.0).floor() / 1000.0).max(0.0);
        let snr_db = rng.random_range(cfg.snr_db.0..=cfg.snr_db.1);
        let candidate = SceneEvent { class_id: proto.class_id, onset, duration, snr_db };
        let gap = cfg.min_same_class_gap;
        let clashes = events.iter().any(|e| {
            e.class_id == candidate.class_id && candidate.onset < e.offset() + gap && e.onset < candidate.offset() + gap
        });
        if clashes {
            continue;
        }
        events.push(candidate);
        if polyphony(&events) > cfg.max_polyphony {
            events.pop();
        }
    }
    events.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.class_id.cmp(&b.class_id)));
    SceneSpec { clip_duration: cfg.clip_duration, events, background_level: cfg.background_dbfs, max_polyphony: cfg.max_polyphony }
}

fn clip_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 40) | index as u64);
    rng
}

pub fn clip_filename(split: Split, index: usize) -> String {
    format!("{}_{index:04}.wav", split.name())
}

fn format_strong_rows(filename: &str, events: &[Event], out: &mut String) {
    if events.is_empty() {
        out.push_str(&format!("{filename}\t\t\t\n"));
    }
    for e in events {
        out.push_str(&format!("{filename}\t{:.3}\t{:.3}\t{}\n", e.onset, e.offset, class_name(e.class_id)));
    }
}

/// Writes `bytes` unless the file already holds exactly them; returns
/// whether anything was written.
fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if std::fs::read(path).map(|old| old == bytes).unwrap_or(false) {
        return Ok(false);
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSummary {
    pub manifests: Vec<(Split, PathBuf)>,
    pub counts: SplitCounts,
    /// True when every file already existed with identical contents.
    pub unchanged: bool,
}

/// Synthesizes every split and writes audio plus manifests below
/// `cfg.output_dir`.
pub fn generate_corpus(cfg: &CorpusConfig, protos: &[ClassPrototype]) -> Result<CorpusSummary> {
    cfg.validate()?;
    if protos.is_empty() {
        return Err(Error::InvalidArgument("no class prototypes".into()));
    }
    let root = &cfg.output_dir;
    let mut changed = false;
    let mut manifests = Vec::new();
    for split in Split::ALL {
        let dir = split.audio_dir(root);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let mut text = match split {
            Split::Weak => "filename\tevent_labels\n".to_string(),
            Split::Unlabeled => "filename\n".to_string(),
            _ => "filename\tonset\toffset\tevent_label\n".to_string(),
        };
        for index in 0..split.count(&cfg.counts) {
            let mut rng = clip_rng(cfg.seed, split, index);
            let scene = draw_scene(cfg, protos, &mut rng);
            let (wave, events) = synth_clip(&scene, protos, cfg.sample_rate, &mut rng)?;
            let filename = clip_filename(split, index);
            changed |= write_if_changed(&dir.join(&filename), &encode_wav_pcm16(&wave)?)?;
            match split {
                Split::Weak => {
                    let tags: BTreeSet<usize> = events.iter().map(|e| e.class_id).collect();
                    let names: Vec<String> = tags.into_iter().map(class_name).collect();
                    text.push_str(&format!("{filename}\t{}\n", names.join(",")));
                }
                Split::Unlabeled => text.push_str(&format!("{filename}\n")),
                _ => format_strong_rows(&filename, &events, &mut text),
            }
        }
        let path = split.manifest_path(root);
        changed |= write_if_changed(&path, text.as_bytes())?;
        manifests.push((split, path));
    }
    Ok(CorpusSummary { manifests, counts: cfg.counts, unchanged: !changed })
}

/// Labels attached to one manifest clip.
#[derive(Clone, Debug, PartialEq)]
pub enum ClipLabels {
    Strong(Vec<Event>),
    Weak(BTreeSet<usize>),
    Unlabeled,
}

impl ClipLabels {
    /// Clip-level tag set, when the tier provides one.
    pub fn tags(&self) -> Option<BTreeSet<usize>> {
        match self {
            ClipLabels::Strong(events) => Some(events.iter().map(|e| e.class_id).collect()),
            ClipLabels::Weak(tags) => Some(tags.clone()),
            ClipLabels::Unlabeled => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestClip {
    pub filename: String,
    pub labels: ClipLabels,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifestKind {
    Strong,
    Weak,
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    pub kind: ManifestKind,
    pub clips: Vec<ManifestClip>,
}

impl Manifest {
    /// Audio file of `clip`: `<corpus>/audio/<manifest stem>/<filename>`,
    /// where `<corpus>` is the parent of the manifest's directory.
    pub fn audio_path(&self, clip: &ManifestClip) -> PathBuf {
        let stem = self.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let corpus = self.path.parent().and_then(Path::parent).unwrap_or(Path::new("."));
        corpus.join("audio").join(stem).join(&clip.filename)
    }
}

/// Parses a manifest in any of the three formats, detected from its header.
pub fn read_manifest(path: &Path, n_classes: usize) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
    let bad = |line: usize, msg: String| Error::Manifest { path: path.to_path_buf(), msg: format!("line {line}: {msg}") };
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, h)| h.trim_end_matches('\r')).unwrap_or("");
    let kind = match header.split('\t').collect::<Vec<_>>().as_slice() {
        ["filename", "onset", "offset", "event_label"] => ManifestKind::Strong,
        ["filename", "event_labels"] => ManifestKind::Weak,
        ["filename"] => ManifestKind::Unlabeled,
        _ => return Err(bad(1, format!("unrecognized header {header:?}"))),
    };
    let class_of = |line: usize, name: &str| {
        parse_class_name(name, n_classes).ok_or_else(|| bad(line, format!("unknown class label {name:?}")))
    };
    let mut clips: Vec<ManifestClip> = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let filename = fields[0].to_string();
        if filename.is_empty() {
            return Err(bad(line_no, "empty filename".into()));
        }
        match kind {
            ManifestKind::Strong => {
                if fields.len() != 4 {
                    return Err(bad(line_no, format!("expected 4 fields, found {}", fields.len())));
                }
                let event = if fields[1..].iter().all(|f| f.is_empty()) {
                    None
                } else {
                    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line_no, format!("bad time {s:?}")));
                    let e = Event::new(class_of(line_no, fields[3])?, num(fields[1])?, num(fields[2])?);
                    if !e.is_valid() {
                        return Err(bad(line_no, format!("invalid interval [{}, {})", e.onset, e.offset)));
                    }
                    Some(e)
                };
                // rows of one clip are grouped; a new filename starts a new clip
                match clips.last_mut() {
                    Some(last) if last.filename == filename => {
                        if let (ClipLabels::Strong(events), Some(e)) = (&mut last.labels, event) {
                            events.push(e);
                        }
                    }
                    _ => clips.push(ManifestClip { filename, labels: ClipLabels::Strong(event.into_iter().collect()) }),
                }
            }
            ManifestKind::Weak => {
                if fields.len() > 2 {
                    return Err(bad(line_no, format!("expected 2 fields, found {}", fields.len())));
                }
                let tags = match fields.get(1) {
                    Some(list) if !list.is_empty() => {
                        list.split(',').map(|n| class_of(line_no, n.trim())).collect::<Result<BTreeSet<_>>>()?
                    }
                    _ => BTreeSet::new(),
                };
                clips.push(ManifestClip { filename, labels: ClipLabels::Weak(tags) });
            }
            ManifestKind::Unlabeled => clips.push(ManifestClip { filename, labels: ClipLabels::Unlabeled }),
        }
    }
    let mut seen = BTreeSet::new();
    for c in &clips {
        if !seen.insert(&c.filename) {
            return Err(bad(0, format!("clip {} appears in non-adjacent rows", c.filename)));
        }
    }
    Ok(Manifest { path: path.to_path_buf(), kind, clips })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::read_wav;
    use proptest::prelude::*;

    fn band_energy_fraction(x: &[f32], sample_rate: u32, band: (f64, f64)) -> f64 {
        let n = x.len();
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let df = sample_rate as f64 / n as f64;
        let (mut inside, mut total) = (0.0, 0.0);
        for (k, v) in buf.iter().enumerate() {
            let e = v.norm_sqr();
            let f = k.min(n - k) as f64 * df;
            total += e;
            if f >= band.0 && f <= band.1 {
                inside += e;
            }
        }
        inside / total
    }

    fn steady(band: (f64, f64)) -> ClassPrototype {
        ClassPrototype { class_id: 0, band, modulation: Modulation::Steady, duration_range: (0.5, 3.0) }
    }

    #[test]
    fn steady_event_energy_stays_in_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = synth_event_waveform(&steady((900.0, 1100.0)), 2.0, 16_000, &mut rng).unwrap();
        let frac = band_energy_fraction(w.samples(), 16_000, (900.0, 1100.0));
        assert!(frac >= 0.8, "in-band fraction {frac}");
    }

    #[test]
    fn every_prototype_concentrates_energy_near_its_band() {
        for p in default_prototypes() {
            let mut rng = ChaCha8Rng::seed_from_u64(p.class_id as u64);
            let w = synth_event_waveform(&p, p.duration_range.1, 16_000, &mut rng).unwrap();
            // gating and ramps leak a little energy just outside the band
            let frac = band_energy_fraction(w.samples(), 16_000, (p.band.0 - 100.0, p.band.1 + 100.0));
            assert!(frac >= 0.8, "class {} fraction {frac}", p.class_id);
        }
    }

    #[test]
    fn event_length_and_determinism() {
        let p = steady((300.0, 400.0));
        let a = synth_event_waveform(&p, 0.5, 16_000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.samples().len(), 8000);
        let b = synth_event_waveform(&p, 0.5, 16_000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert!(synth_event_waveform(&p, 0.4, 16_000, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn prototypes_have_distinct_signatures_within_nyquist() {
        let protos = default_prototypes();
        assert_eq!(protos.len(), 10);
        for (i, a) in protos.iter().enumerate() {
            assert!(a.band.0 < a.band.1 && a.band.1 <= 8000.0);
            for b in &protos[i + 1..] {
                assert!(a.band != b.band || a.modulation != b.modulation);
            }
        }
    }

    fn scene(events: Vec<SceneEvent>) -> SceneSpec {
        SceneSpec { clip_duration: 10.0, events, background_level: -30.0, max_polyphony: 3 }
    }

    #[test]
    fn empty_scene_is_background_only() {
        let (w, labels) = synth_clip(&scene(vec![]), &default_prototypes(), 16_000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(labels.is_empty());
        assert_eq!(w.samples().len(), 160_000);
        let r = rms(&w.samples().iter().map(|&v| v as f64).collect::<Vec<_>>());
        assert!((20.0 * r.log10() + 30.0).abs() < 0.1);
    }

    #[test]
    fn overlapping_events_keep_their_times() {
        let events = vec![
            SceneEvent { class_id: 0, onset: 1.0, duration: 2.0, snr_db: 10.0 },
            SceneEvent { class_id: 5, onset: 2.0, duration: 1.5, snr_db: 10.0 },
        ];
        let (_, labels) = synth_clip(&scene(events), &default_prototypes(), 16_000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(labels, vec![Event::new(0, 1.0, 3.0), Event::new(5, 2.0, 3.5)]);
    }

    #[test]
    fn polyphony_violation_is_rejected() {
        let e = |c, onset| SceneEvent { class_id: c, onset, duration: 2.0, snr_db: 10.0 };
        let mut s = scene(vec![e(0, 1.0), e(3, 1.5), e(5, 2.0), e(8, 2.5)]);
        assert!(synth_clip(&s, &default_prototypes(), 16_000, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
        s.max_polyphony = 4;
        assert!(synth_clip(&s, &default_prototypes(), 16_000, &mut ChaCha8Rng::seed_from_u64(5)).is_ok());
    }

    #[test]
    fn loud_event_dominates_its_band() {
        let protos = default_prototypes();
        let events = vec![SceneEvent { class_id: 3, onset: 4.0, duration: 2.0, snr_db: 20.0 }];
        let (w, _) = synth_clip(&scene(events), &protos, 16_000, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let s = w.samples();
        let band = protos[3].band;
        let during = band_energy_fraction(&s[64_000..96_000], 16_000, band) * s[64_000..96_000].iter().map(|v| v * v).sum::<f32>() as f64;
        let before = band_energy_fraction(&s[16_000..48_000], 16_000, band) * s[16_000..48_000].iter().map(|v| v * v).sum::<f32>() as f64;
        assert!(during > 10.0 * before, "during {during} before {before}");
    }

    fn small_config(dir: &Path, counts: SplitCounts) -> CorpusConfig {
        CorpusConfig { counts, output_dir: dir.to_path_buf(), clip_duration: 2.0, ..CorpusConfig::default() }
    }

    #[test]
    fn corpus_manifests_and_weakening() {
        let dir = tempfile::tempdir().unwrap();
        let counts = SplitCounts { strong: 3, weak: 3, unlabeled: 2, validation: 2, test: 1 };
        let cfg = CorpusConfig { clip_duration: 10.0, ..small_config(dir.path(), counts) };
        let summary = generate_corpus(&cfg, &default_prototypes()).unwrap();
        assert!(!summary.unchanged);
        let strong = read_manifest(&Split::Strong.manifest_path(dir.path()), 10).unwrap();
        assert_eq!(strong.kind, ManifestKind::Strong);
        assert_eq!(strong.clips.len(), 3);
        for split in Split::ALL {
            let m = read_manifest(&split.manifest_path(dir.path()), 10).unwrap();
            assert_eq!(m.clips.len(), split.count(&counts));
            for c in &m.clips {
                let w = read_wav(&m.audio_path(c)).unwrap();
                assert_eq!(w.samples().len(), 160_000);
                if let ClipLabels::Strong(events) = &c.labels {
                    assert!(events.iter().all(|e| e.onset < e.offset && e.offset <= 10.0));
                }
            }
        }
        // weak tags are the class sets of the same clips synthesized as strong
        let weak = read_manifest(&Split::Weak.manifest_path(dir.path()), 10).unwrap();
        for (i, c) in weak.clips.iter().enumerate() {
            let mut rng = clip_rng(cfg.seed, Split::Weak, i);
            let scene = draw_scene(&cfg, &default_prototypes(), &mut rng);
            let expected: BTreeSet<usize> = scene.events.iter().map(|e| e.class_id).collect();
            assert_eq!(c.labels, ClipLabels::Weak(expected));
        }
        let unlabeled = std::fs::read_to_string(Split::Unlabeled.manifest_path(dir.path())).unwrap();
        assert!(unlabeled.lines().all(|l| !l.contains('\t')));
    }

    #[test]
    fn single_test_clip_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let counts = SplitCounts { strong: 0, weak: 0, unlabeled: 0, validation: 0, test: 1 };
        generate_corpus(&small_config(dir.path(), counts), &default_prototypes()).unwrap();
        for split in [Split::Strong, Split::Weak, Split::Unlabeled, Split::Validation] {
            let text = std::fs::read_to_string(split.manifest_path(dir.path())).unwrap();
            assert_eq!(text.lines().count(), 1, "{split:?} should hold only a header");
        }
        assert_eq!(read_manifest(&Split::Test.manifest_path(dir.path()), 10).unwrap().clips.len(), 1);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let counts = SplitCounts { strong: 2, weak: 1, unlabeled: 1, validation: 1, test: 1 };
        let cfg = small_config(dir.path(), counts);
        generate_corpus(&cfg, &default_prototypes()).unwrap();
        let before = std::fs::read(Split::Strong.manifest_path(dir.path())).unwrap();
        let again = generate_corpus(&cfg, &default_prototypes()).unwrap();
        assert!(again.unchanged);
        assert_eq!(std::fs::read(Split::Strong.manifest_path(dir.path())).unwrap(), before);
    }

    #[test]
    fn manifest_errors_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        std::fs::write(&path, "filename\tonset\toffset\tevent_label\na.wav\t1.0\tx\tclass_0\n").unwrap();
        assert!(matches!(read_manifest(&path, 10), Err(Error::Manifest { .. })));
        std::fs::write(&path, "file\n").unwrap();
        assert!(read_manifest(&path, 10).is_err());
        std::fs::write(&path, "filename\tevent_labels\na.wav\tclass_12\n").unwrap();
        assert!(read_manifest(&path, 10).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn drawn_scenes_are_valid(seed in 0u64..10_000) {
            let cfg = CorpusConfig::default();
            let protos = default_prototypes();
            let s = draw_scene(&cfg, &protos, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(s.validate(10).is_ok());
            prop_assert!(!s.events.is_empty());
            for e in &s.events {
                let (lo, hi) = protos[e.class_id].duration_range;
                prop_assert!(e.duration >= lo - 1e-9 && e.duration <= hi + 1e-9);
                prop_assert!(e.snr_db >= 6.0 && e.snr_db <= 24.0);
            }
        }
    }
}
