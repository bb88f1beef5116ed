//! Spectrogram augmentations and the per-branch pipelines.
//!
//! Branch map: 0 none, 1 mixup, 2 Gaussian noise, 3 frequency mask,
//! 4 Gaussian noise then frequency mask. The basic set (frequency filter,
//! time shift, time mask) runs on the underlying clip before fan-out.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::FeatureClip;

pub const N_BRANCHES: usize = 5;

/// One of the five augmentation-conditioned branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BranchId(usize);

impl BranchId {
    pub const NONE: BranchId = BranchId(0);
    pub const MIXUP: BranchId = BranchId(1);
    pub const NOISE: BranchId = BranchId(2);
    pub const FREQ_MASK: BranchId = BranchId(3);
    pub const NOISE_FREQ_MASK: BranchId = BranchId(4);

    pub fn new(index: usize) -> Result<Self> {
        if index < N_BRANCHES {
            Ok(Self(index))
        } else {
            Err(Error::InvalidArgument(format!("branch index {index} outside [0, {N_BRANCHES})")))
        }
    }

    pub fn index(self) -> usize {
        self.0
    }

    pub fn all() -> impl Iterator<Item = BranchId> {
        (0..N_BRANCHES).map(BranchId)
    }

    pub fn uses_noise(self) -> bool {
        matches!(self.0, 2 | 4)
    }

    pub fn uses_freq_mask(self) -> bool {
        matches!(self.0, 3 | 4)
    }

    pub fn name(self) -> &'static str {
        ["none", "mixup", "noise", "freq_mask", "noise+freq_mask"][self.0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Shape of the symmetric Beta distribution the mixup weight is drawn from.
    pub mixup_alpha: f64,
    /// Standard deviation of additive noise, in standardized feature units.
    pub noise_sigma: f64,
    /// Widest frequency mask, in mel bands.
    pub freq_mask_max: usize,
    /// Widest time mask, in pooled output frames.
    pub time_mask_max: usize,
    /// Largest circular shift, in input frames.
    pub time_shift_max: usize,
    pub freq_filter_max_db: f64,
    /// Applies frequency filter, time shift and time mask before branch fan-out.
    pub basic: bool,
    /// Salt mixed into the run seed for augmentation draws.
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mixup_alpha: 0.2,
            noise_sigma: 0.1,
            freq_mask_max: 16,
            time_mask_max: 20,
            time_shift_max: 16,
            freq_filter_max_db: 6.0,
            basic: true,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mixup_alpha > 0.0) {
            return Err(Error::Config("augment.mixup_alpha must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.freq_filter_max_db >= 0.0) {
            return Err(Error::Config("augment.noise_sigma and freq_filter_max_db must be non-negative".into()));
        }
        Ok(())
    }
}

/// Targets attached to a clip. Strong items carry both levels, weak items
/// only clip tags, unlabeled items neither.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTargets {
    /// `[n_output_frames × n_classes]`
    pub frame: Option<Array2<f32>>,
    /// `[n_classes]`
    pub clip: Option<Array1<f32>>,
}

impl SoftTargets {
    pub fn none() -> Self {
        Self { frame: None, clip: None }
    }

    pub fn in_unit_range(&self) -> bool {
        let ok = |v: &f32| (0.0..=1.0).contains(v);
        self.frame.iter().flatten().all(ok) && self.clip.iter().flatten().all(ok)
    }
}

/// Draws a mixup weight from `Beta(alpha, alpha)`.
pub fn draw_mixup_lambda(alpha: f64, rng: &mut (impl Rng + ?Sized)) -> Result<f32> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::InvalidArgument(format!("mixup alpha: {e}")))?;
    Ok(beta.sample(rng) as f32)
}

fn mix_opt<D: ndarray::Dimension>(
    a: &Option<ndarray::Array<f32, D>>,
    b: &Option<ndarray::Array<f32, D>>,
    lambda: f32,
) -> Result<Option<ndarray::Array<f32, D>>> {
    match (a, b) {
        (None, None) => Ok(None),
        (Some(a), Some(b)) if a.shape() == b.shape() => Ok(Some(a * lambda + b * (1.0 - lambda))),
        (Some(_), Some(_)) => Err(Error::ShapeMismatch("mixup targets differ in shape".into())),
        _ => Err(Error::InvalidArgument("mixup partners come from different supervision tiers".into())),
    }
}

/// Convex combination `λ·a + (1−λ)·b` of features and of both target levels.
pub fn mixup(
    a: &FeatureClip,
    ya: &SoftTargets,
    b: &FeatureClip,
    yb: &SoftTargets,
    lambda: f32,
) -> Result<(FeatureClip, SoftTargets)> {
    if a.values.dim() != b.values.dim() {
        return Err(Error::ShapeMismatch(format!("mixup of {:?} and {:?}", a.values.dim(), b.values.dim())));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    if lambda == 1.0 {
        return Ok((a.clone(), ya.clone()));
    }
    let values = &a.values * lambda + &b.values * (1.0 - lambda);
    let targets = SoftTargets { frame: mix_opt(&ya.frame, &yb.frame, lambda)?, clip: mix_opt(&ya.clip, &yb.clip, lambda)? };
    Ok((a.with_values(values), targets))
}

/// Adds i.i.d. `N(0, sigma²)` noise to every entry.
pub fn add_gaussian_noise(x: &FeatureClip, sigma: f64, rng: &mut (impl Rng + ?Sized)) -> FeatureClip {
    if sigma == 0.0 {
        return x.clone();
    }
    let sigma = sigma as f32;
    let values = x.values.mapv(|v| {
        let n: f32 = StandardNormal.sample(rng);
        v + sigma * n
    });
    x.with_values(values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAxis {
    Frequency,
    Time,
}

impl MaskAxis {
    fn ndarray_axis(self) -> Axis {
        match self {
            MaskAxis::Time => Axis(0),
            MaskAxis::Frequency => Axis(1),
        }
    }
}

/// Fills `width` consecutive rows (time) or columns (frequency) starting at
/// `start` with `fill`.
pub fn mask_band(x: &FeatureClip, axis: MaskAxis, start: usize, width: usize, fill: f32) -> Result<FeatureClip> {
    let extent = x.values.len_of(axis.ndarray_axis());
    if start + width > extent {
        return Err(Error::InvalidArgument(format!("mask [{start}, {}) exceeds extent {extent}", start + width)));
    }
    let mut values = x.values.clone();
    values.slice_axis_mut(axis.ndarray_axis(), (start..start + width).into()).fill(fill);
    Ok(x.with_values(values))
}

/// Draws `(start, width)` of a mask with `width ~ U{0..=max_width}`.
pub fn draw_mask(extent: usize, max_width: usize, rng: &mut (impl Rng + ?Sized)) -> Result<(usize, usize)> {
    if max_width > extent {
        return Err(Error::InvalidArgument(format!("mask width {max_width} exceeds axis extent {extent}")));
    }
    let width = rng.random_range(0..=max_width);
    let start = rng.random_range(0..=extent - width);
    Ok((start, width))
}

/// Replaces one random contiguous band along `axis` with the clip mean.
pub fn apply_mask(x: &FeatureClip, axis: MaskAxis, max_width: usize, rng: &mut (impl Rng + ?Sized)) -> Result<FeatureClip> {
    let extent = x.values.len_of(axis.ndarray_axis());
    let (start, width) = draw_mask(extent, max_width, rng)?;
    if width == 0 {
        return Ok(x.clone());
    }
    let fill = x.values.mean().unwrap_or(0.0);
    mask_band(x, axis, start, width, fill)
}

fn roll_rows(values: &Array2<f32>, shift: isize) -> Array2<f32> {
    let n = values.nrows() as isize;
    if n == 0 {
        return values.clone();
    }
    let k = shift.rem_euclid(n) as usize;
    if k == 0 {
        return values.clone();
    }
    let mut out = Array2::zeros(values.raw_dim());
    let n = n as usize;
    out.slice_mut(s![k.., ..]).assign(&values.slice(s![..n - k, ..]));
    out.slice_mut(s![..k, ..]).assign(&values.slice(s![n - k.., ..]));
    out
}

/// Circular shift by `shift` input frames; frame targets move by
/// `shift / time_pool` pooled frames (truncated toward zero).
pub fn time_shift(x: &FeatureClip, y: &SoftTargets, shift: isize, time_pool: usize) -> Result<(FeatureClip, SoftTargets)> {
    if shift.unsigned_abs() >= x.n_frames() {
        return Err(Error::InvalidArgument(format!("shift {shift} not smaller than {} frames", x.n_frames())));
    }
    if time_pool == 0 {
        return Err(Error::InvalidArgument("time_pool must be positive".into()));
    }
    let frame = y.frame.as_ref().map(|f| roll_rows(f, shift / time_pool as isize));
    Ok((x.with_values(roll_rows(&x.values, shift)), SoftTargets { frame, clip: y.clip.clone() }))
}

/// Adds one smooth random offset per mel band, constant over time.
/// The curve is piecewise linear through 2 to 5 knots whose values lie in
/// `±max_db·ln(10)/10`.
pub fn frequency_filter(x: &FeatureClip, rng: &mut (impl Rng + ?Sized), max_db: f64) -> Result<FeatureClip> {
    if !(max_db >= 0.0) {
        return Err(Error::InvalidArgument("max_db must be non-negative".into()));
    }
    if max_db == 0.0 || x.n_mels() == 0 {
        return Ok(x.clone());
    }
    let amplitude = max_db * std::f64::consts::LN_10 / 10.0;
    let bands = x.n_mels();
    let n_knots = rng.random_range(2..=5usize);
    let mut positions: Vec<f64> = (0..n_knots - 2).map(|_| rng.random_range(0.0..(bands - 1).max(1) as f64)).collect();
    positions.push(0.0);
    positions.push((bands - 1) as f64);
    positions.sort_by(f64::total_cmp);
    let levels: Vec<f64> = (0..n_knots).map(|_| rng.random_range(-amplitude..=amplitude)).collect();
    let curve: Vec<f32> = (0..bands)
        .map(|m| {
            let m = m as f64;
            let k = positions.windows(2).position(|w| m <= w[1]).unwrap_or(n_knots - 2);
            let (p0, p1) = (positions[k], positions[k + 1]);
            let t = if p1 > p0 { ((m - p0) / (p1 - p0)).clamp(0.0, 1.0) } else { 0.0 };
            (levels[k] + t * (levels[k + 1] - levels[k])) as f32
        })
        .collect();
    let curve = Array1::from(curve);
    Ok(x.with_values(&x.values + &curve))
}

/// Frequency filter, random time shift and time mask on the underlying clip.
pub fn basic_augment(
    x: &FeatureClip,
    y: &SoftTargets,
    cfg: &AugmentConfig,
    time_pool: usize,
    rng: &mut (impl Rng + ?Sized),
) -> Result<(FeatureClip, SoftTargets)> {
    let filtered = frequency_filter(x, rng, cfg.freq_filter_max_db)?;
    let max_shift = cfg.time_shift_max.min(x.n_frames().saturating_sub(1)) as i64;
    let shift = rng.random_range(-max_shift..=max_shift) as isize;
    let (shifted, y) = time_shift(&filtered, y, shift, time_pool)?;
    let width = (cfg.time_mask_max * time_pool).min(shifted.n_frames());
    let masked = apply_mask(&shifted, MaskAxis::Time, width, rng)?;
    Ok((masked, y))
}

/// A branch view together with the same content without the branch's own
/// noise; the latter is what the teacher sees (after its own perturbation).
#[derive(Clone, Debug)]
pub struct BranchView {
    pub student: FeatureClip,
    pub content: FeatureClip,
    pub targets: SoftTargets,
}

/// Runs the branch pipeline and also returns the noise-free content.
pub fn branch_view_with_content(
    branch: BranchId,
    x: &FeatureClip,
    y: &SoftTargets,
    partner: Option<(&FeatureClip, &SoftTargets)>,
    cfg: &AugmentConfig,
    rng: &mut (impl Rng + ?Sized),
) -> Result<BranchView> {
    if branch == BranchId::MIXUP {
        let (px, py) = partner.ok_or_else(|| Error::InvalidArgument("mixup branch needs a partner clip".into()))?;
        let lambda = draw_mixup_lambda(cfg.mixup_alpha, rng)?;
        let (mixed, targets) = mixup(x, y, px, py, lambda)?;
        return Ok(BranchView { student: mixed.clone(), content: mixed, targets });
    }
    let noisy = if branch.uses_noise() { add_gaussian_noise(x, cfg.noise_sigma, rng) } else { x.clone() };
    let (student, content) = if branch.uses_freq_mask() {
        let (start, width) = draw_mask(x.n_mels(), cfg.freq_mask_max.min(x.n_mels()), rng)?;
        if width == 0 {
            (noisy, x.clone())
        } else {
            let student_fill = noisy.values.mean().unwrap_or(0.0);
            let content_fill = x.values.mean().unwrap_or(0.0);
            (
                mask_band(&noisy, MaskAxis::Frequency, start, width, student_fill)?,
                mask_band(x, MaskAxis::Frequency, start, width, content_fill)?,
            )
        }
    } else {
        (noisy, x.clone())
    };
    Ok(BranchView { student, content, targets: y.clone() })
}

/// Applies the pipeline of `branch` to `(x, y)`.
pub fn branch_view(
    branch: BranchId,
    x: &FeatureClip,
    y: &SoftTargets,
    partner: Option<(&FeatureClip, &SoftTargets)>,
    cfg: &AugmentConfig,
    rng: &mut (impl Rng + ?Sized),
) -> Result<(FeatureClip, SoftTargets)> {
    let view = branch_view_with_content(branch, x, y, partner, cfg, rng)?;
    Ok((view.student, view.targets))
}
