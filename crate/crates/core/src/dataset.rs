//! Loading manifests into standardized feature clips with targets.
//!
//! Extracted features are cached per split below `<corpus>/cache/`. The
//! cache key covers the feature settings, the manifest bytes and the size
//! and modification time of every referenced audio file.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use crate::audio::read_wav;
use crate::augment::SoftTargets;
use crate::datagen::{read_manifest, ClipLabels, Manifest, ManifestKind, Split};
use crate::error::{Error, Result};
use crate::evaluation::Event;
use crate::featurize::{labels_to_frame_targets, FeatureClip, FeatureConfig, FeatureExtractor, FeatureStats};

/// Supervision tier of a training clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tier {
    Strong,
    Weak,
    Unlabeled,
}

/// One clip ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub clip: FeatureClip,
    pub tier: Tier,
    /// Reference events (strong tier and evaluation splits).
    pub events: Option<Vec<Event>>,
    pub targets: SoftTargets,
}

/// 64-bit FNV-1a, used for cache keys.
fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const CACHE_MAGIC: &[u8; 8] = b"SEDFEAT1";

fn cache_key(manifest: &Manifest, features: &FeatureConfig) -> Result<u64> {
    let mut h = fnv1a(serde_json::to_string(features).expect("serializable").as_bytes(), FNV_OFFSET);
    let bytes = std::fs::read(&manifest.path).map_err(|e| Error::io(format!("reading {}", manifest.path.display()), e))?;
    h = fnv1a(&bytes, h);
    for clip in &manifest.clips {
        let path = manifest.audio_path(clip);
        let meta = std::fs::metadata(&path).map_err(|_| Error::MissingAudio(path.clone()))?;
        let mtime = meta
            .modified()
            .ok()
            .and_then(|t| t.duration_since(std::time::UNIX_EPOCH).ok())
            .map(|d| d.as_nanos())
            .unwrap_or(0);
        h = fnv1a(&meta.len().to_le_bytes(), h);
        h = fnv1a(&mtime.to_le_bytes(), h);
    }
    Ok(h)
}

fn cache_path(manifest: &Manifest, key: u64) -> PathBuf {
    let stem = manifest.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let corpus = manifest.path.parent().and_then(Path::parent).unwrap_or(Path::new("."));
    corpus.join("cache").join(format!("{stem}-{key:016x}.bin"))
}

fn write_cache(path: &Path, clips: &[FeatureClip]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(clips.len() as u64).to_le_bytes());
    for c in clips {
        let id = c.clip_id.as_bytes();
        out.extend_from_slice(&(id.len() as u64).to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&c.hop_seconds.to_le_bytes());
        out.extend_from_slice(&c.duration.to_le_bytes());
        out.extend_from_slice(&(c.n_frames() as u64).to_le_bytes());
        out.extend_from_slice(&(c.n_mels() as u64).to_le_bytes());
        for v in c.values.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    f.write_all(&out).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_cache(path: &Path) -> Option<Vec<FeatureClip>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).ok()?.read_to_end(&mut bytes).ok()?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Option<&[u8]> {
        let s = bytes.get(pos..pos + n)?;
        pos += n;
        Some(s)
    };
    if take(8)? != CACHE_MAGIC {
        return None;
    }
    let u64_of = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));
    let f64_of = |s: &[u8]| f64::from_le_bytes(s.try_into().expect("8 bytes"));
    let n = u64_of(take(8)?) as usize;
    let mut clips = Vec::with_capacity(n);
    for _ in 0..n {
        let len = u64_of(take(8)?) as usize;
        let clip_id = String::from_utf8(take(len)?.to_vec()).ok()?;
        let hop_seconds = f64_of(take(8)?);
        let duration = f64_of(take(8)?);
        let frames = u64_of(take(8)?) as usize;
        let mels = u64_of(take(8)?) as usize;
        let data: Vec<f32> =
            take(frames * mels * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        clips.push(FeatureClip { values: Array2::from_shape_vec((frames, mels), data).ok()?, hop_seconds, duration, clip_id });
    }
    Some(clips)
}

/// Raw (unstandardized) log-mel features of every clip in `manifest`.
pub fn manifest_features(manifest: &Manifest, features: &FeatureConfig) -> Result<Vec<FeatureClip>> {
    features.validate()?;
    let key = cache_key(manifest, features)?;
    let path = cache_path(manifest, key);
    if let Some(clips) = read_cache(&path) {
        if clips.len() == manifest.clips.len() && clips.iter().zip(&manifest.clips).all(|(a, b)| a.clip_id == b.filename) {
            return Ok(clips);
        }
    }
    let extractor = FeatureExtractor::new(features)?;
    let clips = manifest
        .clips
        .iter()
        .map(|c| extractor.extract(&read_wav(&manifest.audio_path(c))?, &c.filename))
        .collect::<Result<Vec<_>>>()?;
    // a failed cache write only costs recomputation later
    if let Err(e) = write_cache(&path, &clips) {
        log::warn!("feature cache not written: {e}");
    }
    Ok(clips)
}

fn clip_targets(tags: &BTreeSet<usize>, n_classes: usize) -> Array1<f32> {
    let mut t = Array1::zeros(n_classes);
    for &c in tags {
        t[c] = 1.0;
    }
    t
}

/// Builds items from raw features: standardizes with `stats` and attaches
/// targets according to each clip's labels.
pub fn make_items(
    manifest: &Manifest,
    raw: Vec<FeatureClip>,
    stats: &FeatureStats,
    time_pool: usize,
    n_classes: usize,
) -> Result<Vec<Item>> {
    raw.into_iter()
        .zip(&manifest.clips)
        .map(|(mut clip, entry)| {
            if clip.n_mels() != stats.mean.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} has {} mel bands but the statistics cover {}",
                    clip.clip_id,
                    clip.n_mels(),
                    stats.mean.len()
                )));
            }
            stats.apply(&mut clip.values);
            let (tier, events, targets) = match &entry.labels {
                ClipLabels::Strong(events) => {
                    let frame = labels_to_frame_targets(events, &clip, time_pool, n_classes)?.values;
                    let tags = entry.labels.tags().unwrap_or_default();
                    (Tier::Strong, Some(events.clone()), SoftTargets { frame: Some(frame), clip: Some(clip_targets(&tags, n_classes)) })
                }
                ClipLabels::Weak(tags) => (Tier::Weak, None, SoftTargets { frame: None, clip: Some(clip_targets(tags, n_classes)) }),
                ClipLabels::Unlabeled => (Tier::Unlabeled, None, SoftTargets::none()),
            };
            Ok(Item { clip, tier, events, targets })
        })
        .collect()
}

/// The three training pools plus the validation split, standardized with
/// statistics fitted on the training pools.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub strong: Vec<Item>,
    pub weak: Vec<Item>,
    pub unlabeled: Vec<Item>,
    pub validation: Vec<Item>,
    pub stats: FeatureStats,
}

impl TrainingData {
    pub fn pool(&self, tier: Tier) -> &[Item] {
        match tier {
            Tier::Strong => &self.strong,
            Tier::Weak => &self.weak,
            Tier::Unlabeled => &self.unlabeled,
        }
    }
}

fn load_manifest(corpus: &Path, split: Split, n_classes: usize) -> Result<Manifest> {
    let path = split.manifest_path(corpus);
    if !path.exists() {
        return Err(Error::Manifest { path, msg: "file not found".into() });
    }
    read_manifest(&path, n_classes)
}

/// Loads the training pools and validation split of a generated corpus.
pub fn load_training_data(corpus: &Path, features: &FeatureConfig, n_classes: usize) -> Result<TrainingData> {
    let mut manifests = Vec::new();
    let mut raws = Vec::new();
    for split in [Split::Strong, Split::Weak, Split::Unlabeled, Split::Validation] {
        let m = load_manifest(corpus, split, n_classes)?;
        let expected = if split == Split::Validation { ManifestKind::Strong } else { kind_of(split) };
        if m.kind != expected {
            return Err(Error::Manifest { path: m.path.clone(), msg: format!("expected a {expected:?} manifest") });
        }
        raws.push(manifest_features(&m, features)?);
        manifests.push(m);
    }
    let stats = FeatureStats::fit(raws[..3].iter().flatten().map(|c| &c.values))?;
    let mut built = manifests
        .iter()
        .zip(raws)
        .map(|(m, raw)| make_items(m, raw, &stats, features.time_pool, n_classes))
        .collect::<Result<Vec<_>>>()?;
    let validation = built.pop().expect("four splits");
    let unlabeled = built.pop().expect("four splits");
    let weak = built.pop().expect("four splits");
    let strong = built.pop().expect("four splits");
    Ok(TrainingData { strong, weak, unlabeled, validation, stats })
}

fn kind_of(split: Split) -> ManifestKind {
    match split {
        Split::Weak => ManifestKind::Weak,
        Split::Unlabeled => ManifestKind::Unlabeled,
        _ => ManifestKind::Strong,
    }
}

/// Loads an evaluation manifest (timed labels) with the given statistics.
pub fn load_eval_items(manifest_path: &Path, features: &FeatureConfig, stats: &FeatureStats, n_classes: usize) -> Result<Vec<Item>> {
    let m = read_manifest(manifest_path, n_classes)?;
    if m.kind != ManifestKind::Strong {
        return Err(Error::Manifest { path: m.path.clone(), msg: "evaluation needs a manifest with timed labels".into() });
    }
    if m.clips.is_empty() {
        return Err(Error::EmptySplit);
    }
    let raw = manifest_features(&m, features)?;
    make_items(&m, raw, stats, features.time_pool, n_classes)
}
