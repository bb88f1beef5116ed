//! Loss composition, ramp-up schedule, batch composition, the Adam
//! optimizer and the training loop for the three regimes (mean-teacher
//! baseline, online knowledge distillation, peer collaborative learning).

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{add_gaussian_noise, basic_augment, branch_view_with_content, AugmentConfig, BranchId, SoftTargets};
use crate::autodiff::{lit, Graph, ParamId, ParamStore, Real, Var};
use crate::dataset::{Item, Tier, TrainingData};
use crate::error::{Error, Result};
use crate::evaluation::{decode_events, event_based_f1, match_events, ClassCounts, DecodeConfig, MatchConfig, MetricsReport};
use crate::featurize::{FeatureClip, FeatureConfig};
use crate::model::{
    build_student, build_teacher_from, ema_update, BranchOutput, Checkpoint, ForwardVars, ModelConfig, Network, NormMode,
    RngState, StudentModel, StudentOutput, TeacherModel, Views, CHECKPOINT_FORMAT,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Baseline,
    OnlineKd,
    Pcl,
}

impl ModeKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(ModeKind::Baseline),
            "online_kd" => Ok(ModeKind::OnlineKd),
            "pcl" => Ok(ModeKind::Pcl),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected baseline, online_kd or pcl)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModeKind::Baseline => "baseline",
            ModeKind::OnlineKd => "online_kd",
            ModeKind::Pcl => "pcl",
        }
    }
}

/// Which components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainerMode {
    pub kind: ModeKind,
    pub use_ensemble: bool,
    /// Per-branch augmentation pipelines; without it every branch sees the
    /// same basic-augmented view.
    pub branch_augment: bool,
}

impl TrainerMode {
    pub fn new(kind: ModeKind) -> Self {
        match kind {
            ModeKind::Baseline => Self { kind, use_ensemble: false, branch_augment: false },
            ModeKind::OnlineKd => Self { kind, use_ensemble: true, branch_augment: true },
            ModeKind::Pcl => Self { kind, use_ensemble: true, branch_augment: true },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.use_ensemble, self.branch_augment) {
            (ModeKind::Baseline, true, _) => Err(Error::Config("baseline mode has no ensemble".into())),
            (ModeKind::Baseline, _, true) => Err(Error::Config("baseline mode has a single unaugmented branch".into())),
            (ModeKind::OnlineKd, false, _) => Err(Error::Config("online_kd mode needs the ensemble".into())),
            _ => Ok(()),
        }
    }

    pub fn has_teacher(&self) -> bool {
        self.kind != ModeKind::OnlineKd
    }

    pub fn n_branches(&self, model: &ModelConfig) -> usize {
        if self.kind == ModeKind::Baseline {
            1
        } else {
            model.n_branches
        }
    }

    /// Row label in the comparison table.
    pub fn label(&self) -> &'static str {
        match (self.kind, self.use_ensemble, self.branch_augment) {
            (ModeKind::Baseline, ..) => "Baseline",
            (ModeKind::OnlineKd, ..) => "Online KD",
            (ModeKind::Pcl, false, _) => "PCL w/o ensemble",
            (ModeKind::Pcl, true, true) => "PCL w/ DA",
            (ModeKind::Pcl, true, false) => "PCL w/o DA",
        }
    }

    /// Names of the loss terms this mode logs.
    pub fn loss_terms(&self) -> Vec<&'static str> {
        let mut terms = vec!["L_cls"];
        if self.has_teacher() {
            terms.push("L_cons");
        }
        if self.use_ensemble {
            terms.push("L_ens");
        }
        if self.kind == ModeKind::Pcl {
            terms.push("L_teach");
        }
        terms
    }
}

/// Items per tier in one batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchQuota {
    pub strong: usize,
    pub weak: usize,
    pub unlabeled: usize,
}

impl BatchQuota {
    pub fn total(&self) -> usize {
        self.strong + self.weak + self.unlabeled
    }

    pub fn of(&self, tier: Tier) -> usize {
        match tier {
            Tier::Strong => self.strong,
            Tier::Weak => self.weak,
            Tier::Unlabeled => self.unlabeled,
        }
    }
}

/// Target of the inter-branch distillation term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeachTarget {
    /// Every branch regresses onto the mean of the teacher branches.
    #[default]
    Mean,
    /// Branch `k` regresses onto teacher branch `k`.
    Paired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_cons: f64,
    pub w_ens: f64,
    pub w_teach: f64,
    pub ramp_epochs: usize,
    pub ema_decay: f64,
    pub lr_max: f64,
    pub batch_quota: BatchQuota,
    pub teach_target: TeachTarget,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cls: 1.0,
            w_cons: 2.0,
            w_ens: 1.0,
            w_teach: 1.0,
            ramp_epochs: 50,
            ema_decay: 0.999,
            lr_max: 0.001,
            batch_quota: BatchQuota { strong: 6, weak: 6, unlabeled: 12 },
            teach_target: TeachTarget::Mean,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w_cls, self.w_cons, self.w_ens, self.w_teach].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        if !(self.lr_max > 0.0) {
            return Err(Error::Config("lr_max must be positive".into()));
        }
        if self.batch_quota.total() == 0 {
            return Err(Error::Config("batch quota is empty".into()));
        }
        Ok(())
    }
}

/// Model whose outputs are decoded when scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreModel {
    /// Mean of the teacher's branch outputs (student when there is no teacher).
    Teacher,
    /// Mean of the student's branch outputs.
    Student,
    /// The student's ensemble head.
    Ensemble,
}

impl ScoreModel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(ScoreModel::Teacher),
            "student" => Ok(ScoreModel::Student),
            "ensemble" => Ok(ScoreModel::Ensemble),
            other => Err(Error::Config(format!("unknown score model {other:?}"))),
        }
    }
}

/// `[trainer]` section of the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub mode: ModeKind,
    /// Defaults depend on the mode when absent.
    pub use_ensemble: Option<bool>,
    pub branch_augment: Option<bool>,
    pub epochs: usize,
    /// Validation F1 is computed every this many epochs and after the last.
    pub validate_every: usize,
    pub score_model: ScoreModel,
    pub w_cls: f64,
    pub w_cons: f64,
    pub w_ens: f64,
    pub w_teach: f64,
    pub ramp_epochs: usize,
    pub ema_decay: f64,
    pub lr_max: f64,
    /// `[strong, weak, unlabeled]`
    pub batch_quota: [usize; 3],
    pub teach_target: TeachTarget,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            mode: ModeKind::Pcl,
            use_ensemble: None,
            branch_augment: None,
            epochs: 100,
            validate_every: 1,
            score_model: ScoreModel::Teacher,
            w_cls: w.w_cls,
            w_cons: w.w_cons,
            w_ens: w.w_ens,
            w_teach: w.w_teach,
            ramp_epochs: w.ramp_epochs,
            ema_decay: w.ema_decay,
            lr_max: w.lr_max,
            batch_quota: [w.batch_quota.strong, w.batch_quota.weak, w.batch_quota.unlabeled],
            teach_target: w.teach_target,
        }
    }
}

impl TrainerConfig {
    pub fn trainer_mode(&self) -> TrainerMode {
        let base = TrainerMode::new(self.mode);
        TrainerMode {
            kind: self.mode,
            use_ensemble: self.use_ensemble.unwrap_or(base.use_ensemble),
            branch_augment: self.branch_augment.unwrap_or(base.branch_augment),
        }
    }

    pub fn weights(&self) -> LossWeights {
        let [strong, weak, unlabeled] = self.batch_quota;
        LossWeights {
            w_cls: self.w_cls,
            w_cons: self.w_cons,
            w_ens: self.w_ens,
            w_teach: self.w_teach,
            ramp_epochs: self.ramp_epochs,
            ema_decay: self.ema_decay,
            lr_max: self.lr_max,
            batch_quota: BatchQuota { strong, weak, unlabeled },
            teach_target: self.teach_target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer_mode().validate()?;
        self.weights().validate()?;
        if self.epochs == 0 || self.validate_every == 0 {
            return Err(Error::Config("trainer.epochs and trainer.validate_every must be positive".into()));
        }
        Ok(())
    }
}

/// `exp(−5·(1 − t)²)` with `t = min(epoch / ramp_epochs, 1)`; exactly 1
/// once the ramp is complete or when `ramp_epochs` is 0.
pub fn ramp_weight(epoch: f64, ramp_epochs: usize) -> f64 {
    if ramp_epochs == 0 {
        return 1.0;
    }
    let t = (epoch.max(0.0) / ramp_epochs as f64).min(1.0);
    if t >= 1.0 {
        1.0
    } else {
        (-5.0 * (1.0 - t) * (1.0 - t)).exp()
    }
}

/// Values of the loss components; absent terms are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub cls: Option<f64>,
    pub cons: Option<f64>,
    pub ens: Option<f64>,
    pub teach: Option<f64>,
}

impl LossComponents {
    pub fn named(&self) -> BTreeMap<&'static str, f64> {
        [("L_cls", self.cls), ("L_cons", self.cons), ("L_ens", self.ens), ("L_teach", self.teach)]
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k, v)))
            .collect()
    }
}

/// `w_cls·L_cls + ramp·(w_cons·L_cons + w_teach·L_teach) + w_ens·L_ens`
/// with `ramp = ramp_weight(epoch)`.
pub fn total_loss(c: &LossComponents, w: &LossWeights, epoch: f64) -> Result<f64> {
    for (name, v) in c.named() {
        if !(v >= 0.0) {
            return Err(Error::InvalidArgument(format!("{name} = {v} is not a non-negative loss")));
        }
    }
    let ramp = ramp_weight(epoch, w.ramp_epochs);
    let z = |v: Option<f64>| v.unwrap_or(0.0);
    Ok(w.w_cls * z(c.cls) + ramp * (w.w_cons * z(c.cons) + w.w_teach * z(c.teach)) + w.w_ens * z(c.ens))
}

/// Batched classification targets of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTargets<F: Real> {
    /// `[B, T', C]`
    pub frame: ArrayD<F>,
    /// 1 where a frame target exists (strong items)
    pub frame_mask: ArrayD<F>,
    /// `[B, C]`
    pub clip: ArrayD<F>,
    /// 1 where a clip target exists (strong and weak items)
    pub clip_mask: ArrayD<F>,
}

impl<F: Real> HeadTargets<F> {
    /// Stacks per-item targets; missing levels get zero mask.
    pub fn from_items(targets: &[&SoftTargets], frames: usize, n_classes: usize) -> Result<Self> {
        let b = targets.len();
        let mut frame = ArrayD::zeros(IxDyn(&[b, frames, n_classes]));
        let mut frame_mask = frame.clone();
        let mut clip = ArrayD::zeros(IxDyn(&[b, n_classes]));
        let mut clip_mask = clip.clone();
        for (i, t) in targets.iter().enumerate() {
            if let Some(f) = &t.frame {
                if f.dim() != (frames, n_classes) {
                    return Err(Error::ShapeMismatch(format!("frame targets {:?}, expected ({frames}, {n_classes})", f.dim())));
                }
                frame.index_axis_mut(Axis(0), i).assign(&f.mapv(|v| lit::<F>(v as f64)).into_dyn());
                frame_mask.index_axis_mut(Axis(0), i).fill(F::one());
            }
            if let Some(c) = &t.clip {
                if c.len() != n_classes {
                    return Err(Error::ShapeMismatch(format!("clip targets of length {}, expected {n_classes}", c.len())));
                }
                clip.index_axis_mut(Axis(0), i).assign(&c.mapv(|v| lit::<F>(v as f64)).into_dyn());
                clip_mask.index_axis_mut(Axis(0), i).fill(F::one());
            }
        }
        Ok(Self { frame, frame_mask, clip, clip_mask })
    }

    /// Element-wise mean of several target sets with identical masks.
    pub fn mean(parts: &[HeadTargets<F>]) -> Self {
        let k: F = lit(1.0 / parts.len() as f64);
        let mut out = parts[0].clone();
        for p in &parts[1..] {
            out.frame = out.frame + &p.frame;
            out.clip = out.clip + &p.clip;
        }
        out.frame.mapv_inplace(|v| v * k);
        out.clip.mapv_inplace(|v| v * k);
        out
    }
}

/// Detached strong/weak outputs used as regression targets.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadValues<F: Real> {
    /// `[B, T', C]`
    pub strong: ArrayD<F>,
    /// `[B, C]`
    pub weak: ArrayD<F>,
}

impl<F: Real> HeadValues<F> {
    pub fn mean(parts: &[HeadValues<F>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("mean of no outputs".into()))?;
        let k: F = lit(1.0 / parts.len() as f64);
        let mut out = first.clone();
        for p in &parts[1..] {
            if p.strong.shape() != out.strong.shape() || p.weak.shape() != out.weak.shape() {
                return Err(Error::ShapeMismatch("outputs differ in shape".into()));
            }
            out.strong = out.strong + &p.strong;
            out.weak = out.weak + &p.weak;
        }
        out.strong.mapv_inplace(|v| v * k);
        out.weak.mapv_inplace(|v| v * k);
        Ok(out)
    }
}

/// Loss nodes of one step. `frame_bce` is the branch-averaged frame-level
/// BCE on strong items, logged as a diagnostic.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cls: Option<Var>,
    pub cons: Option<Var>,
    pub ens: Option<Var>,
    pub teach: Option<Var>,
    pub total: Var,
    pub frame_bce: Var,
}

impl LossVars {
    pub fn components<F: Real>(&self, g: &Graph<F>) -> LossComponents {
        let v = |x: Option<Var>| x.map(|x| g.scalar(x).to_f64().unwrap_or(f64::NAN));
        LossComponents { cls: v(self.cls), cons: v(self.cons), ens: v(self.ens), teach: v(self.teach) }
    }
}

fn mean_of<F: Real>(g: &mut Graph<F>, terms: &[Var]) -> Var {
    let s = g.add_all(terms);
    g.scale(s, lit(1.0 / terms.len() as f64))
}

/// `MSE(strong) + MSE(weak)` of one head against detached values.
fn head_mse<F: Real>(g: &mut Graph<F>, strong: Var, weak: Var, target: &HeadValues<F>) -> Result<Var> {
    if g.shape(strong) != target.strong.shape() || g.shape(weak) != target.weak.shape() {
        return Err(Error::ShapeMismatch(format!(
            "output {:?}/{:?} against target {:?}/{:?}",
            g.shape(strong),
            g.shape(weak),
            target.strong.shape(),
            target.weak.shape()
        )));
    }
    let a = g.mse(strong, &target.strong);
    let b = g.mse(weak, &target.weak);
    Ok(g.add(a, b))
}

/// Mean over branches of `MSE(student branch k, target k)`.
fn branch_regression<F: Real>(
    g: &mut Graph<F>,
    heads: &[(Var, Var)],
    targets: &dyn Fn(usize) -> HeadValues<F>,
) -> Result<Var> {
    let terms = heads.iter().enumerate().map(|(k, &(s, w))| head_mse(g, s, w, &targets(k))).collect::<Result<Vec<_>>>()?;
    Ok(mean_of(g, &terms))
}

/// Classification BCE of one head: frame term on strong items plus clip term
/// on labeled items. Returns `(total, frame term)`.
fn head_bce<F: Real>(g: &mut Graph<F>, strong: Var, weak: Var, t: &HeadTargets<F>) -> (Var, Var) {
    let frame = g.bce(strong, &t.frame, &t.frame_mask);
    let clip = g.bce(weak, &t.clip, &t.clip_mask);
    (g.add(frame, clip), frame)
}

/// Everything `build_losses` needs besides the student forward pass.
pub struct LossInputs<'a, F: Real> {
    /// Per-branch classification targets.
    pub targets: &'a [HeadTargets<F>],
    pub ensemble_targets: &'a HeadTargets<F>,
    /// Per-branch teacher outputs (modes with a teacher).
    pub teacher: Option<&'a [HeadValues<F>]>,
    /// Replaces the detached ensemble output as the distillation target;
    /// used to hold the target fixed in finite-difference checks.
    pub frozen_ensemble: Option<&'a HeadValues<F>>,
}

/// Records every active loss term and the weighted total on `g`.
pub fn build_losses<F: Real>(
    g: &mut Graph<F>,
    out: &ForwardVars<F>,
    inputs: &LossInputs<'_, F>,
    mode: &TrainerMode,
    w: &LossWeights,
    ramp: f64,
) -> Result<LossVars> {
    let nb = out.branches.len();
    if inputs.targets.len() != nb {
        return Err(Error::ShapeMismatch(format!("{} target sets for {nb} branches", inputs.targets.len())));
    }
    let heads: Vec<(Var, Var)> = out.branches.iter().map(|h| (h.strong, h.weak)).collect();

    let mut cls_terms = Vec::new();
    let mut frame_terms = Vec::new();
    for (h, t) in heads.iter().zip(inputs.targets) {
        let (total, frame) = head_bce(g, h.0, h.1, t);
        cls_terms.push(total);
        frame_terms.push(frame);
    }
    let ensemble = if mode.use_ensemble {
        let e = out.ensemble.ok_or_else(|| Error::InvalidArgument("ensemble output missing in ensemble mode".into()))?;
        cls_terms.push(head_bce(g, e.strong, e.weak, inputs.ensemble_targets).0);
        Some(e)
    } else {
        None
    };
    let cls = mean_of(g, &cls_terms);
    let frame_bce = mean_of(g, &frame_terms);

    let cons = if mode.has_teacher() {
        let teacher = inputs.teacher.ok_or_else(|| Error::InvalidArgument("teacher outputs missing".into()))?;
        if teacher.len() != nb {
            return Err(Error::ShapeMismatch(format!("{} teacher outputs for {nb} branches", teacher.len())));
        }
        Some(branch_regression(g, &heads, &|k| teacher[k].clone())?)
    } else {
        None
    };

    let ens = match ensemble {
        Some(e) => {
            let target = match inputs.frozen_ensemble {
                Some(v) => v.clone(),
                None => HeadValues { strong: g.value(e.strong).clone(), weak: g.value(e.weak).clone() },
            };
            Some(branch_regression(g, &heads, &|_| target.clone())?)
        }
        None => None,
    };

    let teach = if mode.kind == ModeKind::Pcl {
        let teacher = inputs.teacher.ok_or_else(|| Error::InvalidArgument("teacher outputs missing".into()))?;
        if teacher.len() != nb {
            return Err(Error::ShapeMismatch(format!("{} teacher outputs for {nb} branches", teacher.len())));
        }
        match w.teach_target {
            TeachTarget::Mean => {
                let target = HeadValues::mean(teacher)?;
                Some(branch_regression(g, &heads, &|_| target.clone())?)
            }
            TeachTarget::Paired => Some(branch_regression(g, &heads, &|k| teacher[k].clone())?),
        }
    } else {
        None
    };

    let mut terms = vec![g.scale(cls, lit(w.w_cls))];
    if let Some(c) = cons {
        terms.push(g.scale(c, lit(ramp * w.w_cons)));
    }
    if let Some(t) = teach {
        terms.push(g.scale(t, lit(ramp * w.w_teach)));
    }
    if let Some(e) = ens {
        terms.push(g.scale(e, lit(w.w_ens)));
    }
    let total = g.add_all(&terms);
    Ok(LossVars { cls: Some(cls), cons, ens, teach, total, frame_bce })
}

fn single_head_values(o: &BranchOutput) -> HeadValues<f32> {
    let (t, c) = o.strong.dim();
    HeadValues {
        strong: o.strong.clone().into_shape_with_order(IxDyn(&[1, t, c])).expect("shape"),
        weak: o.weak.clone().into_shape_with_order(IxDyn(&[1, c])).expect("shape"),
    }
}

fn leaf_head(g: &mut Graph<f32>, o: &BranchOutput) -> (Var, Var) {
    let v = single_head_values(o);
    (g.constant(v.strong), g.constant(v.weak))
}

/// Classification loss of one clip's student output: frame BCE where frame
/// targets exist, clip BCE where clip targets exist, averaged over the
/// branch heads and, with `use_ensemble`, the ensemble head.
pub fn classification_loss(out: &StudentOutput, targets: &SoftTargets, use_ensemble: bool) -> Result<f64> {
    let Some(first) = out.branches.first() else {
        return Err(Error::InvalidArgument("no branch outputs".into()));
    };
    let (frames, classes) = first.strong.dim();
    let t = HeadTargets::<f32>::from_items(&[targets], frames, classes)?;
    let mut g = Graph::inference();
    let mut heads: Vec<&BranchOutput> = out.branches.iter().collect();
    if use_ensemble {
        heads.push(&out.ensemble);
    }
    let terms: Vec<Var> = heads
        .into_iter()
        .map(|o| {
            let (s, w) = leaf_head(&mut g, o);
            head_bce(&mut g, s, w, &t).0
        })
        .collect();
    let l = mean_of(&mut g, &terms);
    Ok(g.scalar(l) as f64)
}

/// Mean over branches of `MSE(strong) + MSE(weak)` between student and
/// teacher outputs.
pub fn consistency_loss(student: &[BranchOutput], teacher: &[BranchOutput]) -> Result<f64> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} student vs {} teacher branches", student.len(), teacher.len())));
    }
    let mut g = Graph::inference();
    let heads: Vec<(Var, Var)> = student.iter().map(|o| leaf_head(&mut g, o)).collect();
    let l = branch_regression(&mut g, &heads, &|k| single_head_values(&teacher[k]))?;
    Ok(g.scalar(l) as f64)
}

/// `(l_ens, l_teach)`: each branch regressed onto the ensemble output and
/// onto the mean teacher branch output.
pub fn distillation_losses(out: &StudentOutput, teacher: &[BranchOutput]) -> Result<(f64, f64)> {
    let mut g = Graph::inference();
    let heads: Vec<(Var, Var)> = out.branches.iter().map(|o| leaf_head(&mut g, o)).collect();
    let ens_target = single_head_values(&out.ensemble);
    let l_ens = branch_regression(&mut g, &heads, &|_| ens_target.clone())?;
    let teacher_mean = single_head_values(&BranchOutput::mean(teacher)?);
    let l_teach = branch_regression(&mut g, &heads, &|_| teacher_mean.clone())?;
    Ok((g.scalar(l_ens) as f64, g.scalar(l_teach) as f64))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Option<ArrayD<f32>>>,
    v: Vec<Option<ArrayD<f32>>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![None; n_params], v: vec![None; n_params], t: vec![0; n_params] }
    }

    /// One update of every parameter that received a gradient.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &HashMap<ParamId, ArrayD<f32>>, lr: f64) {
        let mut ids: Vec<&ParamId> = grads.keys().collect();
        ids.sort();
        for id in ids {
            let g = &grads[id];
            let i = id.0;
            self.t[i] += 1;
            let m = self.m[i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v[i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let c1 = 1.0 - self.beta1.powi(self.t[i] as i32);
            let c2 = 1.0 - self.beta2.powi(self.t[i] as i32);
            let step = (lr / c1) as f32;
            let (c2, eps) = (c2 as f32, self.eps as f32);
            let p = params.get_mut(*id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= step * m / ((v / c2).sqrt() + eps);
            });
        }
    }
}

/// Draws items of one pool without replacement, reshuffling when the pool
/// runs out.
#[derive(Clone, Debug)]
pub struct TierSampler {
    order: Vec<usize>,
    pos: usize,
}

impl TierSampler {
    pub fn new(n: usize, rng: &mut impl Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    pub fn take(&mut self, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if k > 0 && self.order.is_empty() {
            return Err(Error::InvalidArgument("batch quota asks for items from an empty pool".into()));
        }
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        Ok(out)
    }
}

/// Per-tier samplers for the three training pools.
#[derive(Clone, Debug)]
pub struct Samplers {
    pub strong: TierSampler,
    pub weak: TierSampler,
    pub unlabeled: TierSampler,
}

impl Samplers {
    pub fn new(data: &TrainingData, rng: &mut impl Rng) -> Self {
        Self {
            strong: TierSampler::new(data.strong.len(), rng),
            weak: TierSampler::new(data.weak.len(), rng),
            unlabeled: TierSampler::new(data.unlabeled.len(), rng),
        }
    }
}

/// One training batch. Item order is strong, weak, unlabeled.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `(tier, index into the pool)`
    pub items: Vec<(Tier, usize)>,
    /// Per-branch student inputs `[B, T, F]`; a single entry means every
    /// branch sees the same input.
    pub student_views: Vec<ArrayD<f32>>,
    /// Per-branch teacher inputs (empty without a teacher).
    pub teacher_views: Vec<ArrayD<f32>>,
    pub targets: Vec<HeadTargets<f32>>,
    pub ensemble_targets: HeadTargets<f32>,
}

impl Batch {
    pub fn student_inputs(&self) -> Views<'_, f32> {
        if self.student_views.len() == 1 {
            Views::Shared(&self.student_views[0])
        } else {
            Views::PerBranch(&self.student_views)
        }
    }
}

fn stack_clips(clips: &[&FeatureClip]) -> Result<ArrayD<f32>> {
    let views: Vec<_> = clips.iter().map(|c| c.values.view()).collect();
    ndarray::stack(Axis(0), &views)
        .map(|a: Array3<f32>| a.into_dyn())
        .map_err(|_| Error::ShapeMismatch("batch clips differ in shape".into()))
}

/// Static settings of batch composition.
#[derive(Clone, Debug)]
pub struct BatchSpec<'a> {
    pub quota: BatchQuota,
    pub mode: TrainerMode,
    pub n_branches: usize,
    pub augment: &'a AugmentConfig,
    pub time_pool: usize,
    pub n_classes: usize,
}

/// Samples a batch and builds per-branch student and teacher views.
///
/// The basic augmentations run once per item. With branch augmentation,
/// branch `k` applies its pipeline (mixup partners come from the same tier
/// within the batch); otherwise every branch gets the basic view. Teacher
/// views are the branch content with a fresh noise draw.
pub fn compose_batch(data: &TrainingData, samplers: &mut Samplers, spec: &BatchSpec<'_>, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let mut items = Vec::with_capacity(spec.quota.total());
    for (tier, sampler) in
        [(Tier::Strong, &mut samplers.strong), (Tier::Weak, &mut samplers.weak), (Tier::Unlabeled, &mut samplers.unlabeled)]
    {
        for i in sampler.take(spec.quota.of(tier), rng)? {
            items.push((tier, i));
        }
    }
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let base: Vec<(FeatureClip, SoftTargets)> = items
        .iter()
        .map(|&(tier, i)| {
            let item: &Item = &data.pool(tier)[i];
            if spec.augment.basic {
                basic_augment(&item.clip, &item.targets, spec.augment, spec.time_pool, rng)
            } else {
                Ok((item.clip.clone(), item.targets.clone()))
            }
        })
        .collect::<Result<_>>()?;

    let nb = spec.n_branches;
    let frames = base[0].0.n_frames().div_ceil(spec.time_pool);
    let mut student_views = Vec::new();
    let mut teacher_views = Vec::new();
    let mut targets = Vec::new();
    let sigma = spec.augment.noise_sigma;
    for k in 0..nb {
        let branch = BranchId::new(k % crate::augment::N_BRANCHES)?;
        let mut students = Vec::with_capacity(items.len());
        let mut contents = Vec::with_capacity(items.len());
        let mut ys = Vec::with_capacity(items.len());
        for (j, (x, y)) in base.iter().enumerate() {
            if spec.mode.branch_augment {
                let same_tier: Vec<usize> = (0..items.len()).filter(|&o| items[o].0 == items[j].0 && o != j).collect();
                let p = if same_tier.is_empty() { j } else { same_tier[rng.random_range(0..same_tier.len())] };
                let view = branch_view_with_content(branch, x, y, Some((&base[p].0, &base[p].1)), spec.augment, rng)?;
                students.push(view.student);
                contents.push(view.content);
                ys.push(view.targets);
            } else {
                students.push(x.clone());
                contents.push(x.clone());
                ys.push(y.clone());
            }
        }
        if spec.mode.branch_augment || k == 0 {
            student_views.push(stack_clips(&students.iter().collect::<Vec<_>>())?);
        }
        if spec.mode.has_teacher() {
            let noisy: Vec<FeatureClip> = contents.iter().map(|c| add_gaussian_noise(c, sigma, rng)).collect();
            teacher_views.push(stack_clips(&noisy.iter().collect::<Vec<_>>())?);
        }
        targets.push(HeadTargets::from_items(&ys.iter().collect::<Vec<_>>(), frames, spec.n_classes)?);
    }
    let ensemble_targets = HeadTargets::mean(&targets);
    Ok(Batch { items, student_views, teacher_views, targets, ensemble_targets })
}

/// Decodes and scores clips against their reference events.
pub fn score_items(
    net: &Network<f32>,
    items: &[Item],
    use_ensemble_head: bool,
    features: &FeatureConfig,
    decode: &DecodeConfig,
    matching: &MatchConfig,
) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::EmptySplit);
    }
    let hop = features.effective_hop_seconds();
    let mut counts = ClassCounts::default();
    for (item, strong) in items.iter().zip(predict_strong(net, items, use_ensemble_head)?) {
        let reference = item.events.as_deref().unwrap_or(&[]);
        let pred = decode_events(strong.view(), decode, hop)?;
        counts.merge(&match_events(reference, &pred, matching));
    }
    Ok(event_based_f1(&counts.with_classes(net.config().n_classes)))
}

const PREDICT_BATCH: usize = 8;

/// Evaluation-mode frame probabilities per item: the branch mean, or the
/// ensemble head's frame output.
pub fn predict_strong(net: &Network<f32>, items: &[Item], use_ensemble_head: bool) -> Result<Vec<Array2<f32>>> {
    let mut out = Vec::with_capacity(items.len());
    let mut start = 0;
    while start < items.len() {
        // batch consecutive clips of equal shape
        let shape = items[start].clip.values.dim();
        let mut end = start + 1;
        while end < items.len() && end - start < PREDICT_BATCH && items[end].clip.values.dim() == shape {
            end += 1;
        }
        let clips: Vec<&FeatureClip> = items[start..end].iter().map(|i| &i.clip).collect();
        let x = stack_clips(&clips)?;
        let mut g = Graph::inference();
        let fwd = net.forward(&mut g, Views::Shared(&x), NormMode::Running, None, use_ensemble_head)?;
        let probs: ArrayD<f32> = match fwd.ensemble {
            Some(e) if use_ensemble_head => g.value(e.strong).clone(),
            _ => {
                let mut acc = g.value(fwd.branches[0].strong).clone();
                for h in &fwd.branches[1..] {
                    acc = acc + g.value(h.strong);
                }
                acc / fwd.branches.len() as f32
            }
        };
        for row in probs.axis_iter(Axis(0)) {
            out.push(row.to_owned().into_dimensionality().expect("rank 2"));
        }
        start = end;
    }
    Ok(out)
}

/// Which network and head to score for `score` under `mode`.
pub fn scoring_network<'a>(
    score: ScoreModel,
    student: &'a StudentModel,
    teacher: Option<&'a TeacherModel>,
) -> (&'a Network<f32>, bool) {
    match (score, teacher) {
        (ScoreModel::Teacher, Some(t)) => (t.network(), false),
        (ScoreModel::Ensemble, _) => (student.network(), true),
        _ => (student.network(), false),
    }
}

/// Everything that defines one training run besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub augment: AugmentConfig,
    pub trainer: TrainerConfig,
    pub decode: DecodeConfig,
    pub matching: MatchConfig,
    pub seed: u64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Epoch means of the active loss terms.
    pub losses: BTreeMap<String, f64>,
    pub total: f64,
    /// Branch-averaged frame-level BCE on strong items.
    pub frame_bce: f64,
    pub lr: f64,
    pub ramp: f64,
    pub ema_decay: Option<f64>,
    pub val_macro_f1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub records: Vec<EpochRecord>,
    /// Validation report of the best checkpoint.
    pub best_validation: MetricsReport,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt.json";
pub const LAST_CHECKPOINT: &str = "last.ckpt.json";

/// Optimizer steps per epoch: one pass over the strong pool at the strong
/// quota (falling back to the first non-empty tier).
pub fn steps_per_epoch(data: &TrainingData, quota: &BatchQuota) -> usize {
    [(data.strong.len(), quota.strong), (data.weak.len(), quota.weak), (data.unlabeled.len(), quota.unlabeled)]
        .into_iter()
        .find(|&(n, q)| n > 0 && q > 0)
        .map(|(n, q)| n.div_ceil(q))
        .unwrap_or(1)
}

fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn head_values(g: &Graph<f32>, fwd: &ForwardVars<f32>) -> Vec<HeadValues<f32>> {
    fwd.branches.iter().map(|h| HeadValues { strong: g.value(h.strong).clone(), weak: g.value(h.weak).clone() }).collect()
}

/// Trains one run, writing the log and checkpoints below `out_dir`.
pub fn train(settings: &TrainSettings, data: &TrainingData, out_dir: &Path) -> Result<RunArtifacts> {
    let tc = &settings.trainer;
    tc.validate()?;
    settings.augment.validate()?;
    let mode = tc.trainer_mode();
    let weights = tc.weights();
    for tier in [Tier::Strong, Tier::Weak, Tier::Unlabeled] {
        if weights.batch_quota.of(tier) > 0 && data.pool(tier).is_empty() {
            return Err(Error::EmptySplit);
        }
    }
    if data.validation.is_empty() {
        return Err(Error::EmptySplit);
    }
    let model_cfg = ModelConfig { n_branches: mode.n_branches(&settings.model), ..settings.model.clone() };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;

    let mut init_rng = seeded_stream(settings.seed, 1);
    let mut batch_rng = seeded_stream(settings.seed, 2);
    let mut dropout_rng = seeded_stream(settings.seed, 3);
    let mut student = build_student(&model_cfg, &settings.features, &mut init_rng)?;
    let mut teacher = mode.has_teacher().then(|| build_teacher_from(&student));
    let mut adam = Adam::new(student.network().params().len());
    let mut samplers = Samplers::new(data, &mut batch_rng);
    let spec = BatchSpec {
        quota: weights.batch_quota,
        mode,
        n_branches: model_cfg.n_branches,
        augment: &settings.augment,
        time_pool: settings.features.time_pool,
        n_classes: model_cfg.n_classes,
    };
    let steps = steps_per_epoch(data, &weights.batch_quota);

    let log_path = out_dir.join(LOG_FILE);
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(format!("creating {}", log_path.display()), e))?;
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let checkpoint = |student: &StudentModel, teacher: Option<&TeacherModel>, rng: &ChaCha8Rng, epoch: usize, f1: Option<f64>| {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            model: model_cfg.clone(),
            features: settings.features.clone(),
            augment: settings.augment.clone(),
            feature_stats: Some(data.stats.clone()),
            student: student.network().state(),
            teacher: teacher.map(|t| t.network().state()),
            rng: Some(RngState::capture(rng)),
            run: serde_json::json!({
                "mode": mode.kind.name(),
                "use_ensemble": mode.use_ensemble,
                "branch_augment": mode.branch_augment,
                "label": mode.label(),
                "score_model": tc.score_model,
                "seed": settings.seed,
                "epoch": epoch,
                "val_macro_f1": f1,
            }),
        }
    };

    let mut records = Vec::with_capacity(tc.epochs);
    let mut best: Option<MetricsReport> = None;
    let mut global_step = 0u64;
    for epoch in 0..tc.epochs {
        let ramp = ramp_weight(epoch as f64, weights.ramp_epochs);
        let lr = weights.lr_max * ramp;
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let (mut total_sum, mut frame_sum) = (0.0, 0.0);
        let mut decay_used = None;
        for step in 0..steps {
            let batch = compose_batch(data, &mut samplers, &spec, &mut batch_rng)?;
            let (teacher_out, teacher_bn) = match &teacher {
                Some(t) => {
                    let mut tg = Graph::inference();
                    let tf = t.network().forward(&mut tg, Views::PerBranch(&batch.teacher_views), NormMode::Batch, None, false)?;
                    (Some(head_values(&tg, &tf)), tf.bn)
                }
                None => (None, Vec::new()),
            };
            let mut g = Graph::new();
            let dropout = (model_cfg.dropout > 0.0).then_some(&mut dropout_rng);
            let fwd = student.network().forward(&mut g, batch.student_inputs(), NormMode::Batch, dropout, mode.use_ensemble)?;
            let inputs = LossInputs {
                targets: &batch.targets,
                ensemble_targets: &batch.ensemble_targets,
                teacher: teacher_out.as_deref(),
                frozen_ensemble: None,
            };
            let losses = build_losses(&mut g, &fwd, &inputs, &mode, &weights, ramp)?;
            let components = losses.components(&g);
            let total = g.scalar(losses.total) as f64;
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    step,
                    detail: format!("total={total} components={:?}", components.named()),
                });
            }
            for (k, v) in components.named() {
                *sums.entry(k.to_string()).or_default() += v;
            }
            total_sum += total;
            frame_sum += g.scalar(losses.frame_bce) as f64;
            let grads = g.backward(losses.total).into_params();
            drop(g);
            student.network_mut().absorb_bn(&fwd.bn);
            adam.step(student.network_mut().params_mut(), &grads, lr);
            // a finite loss can still produce an overflowing update
            if let Some((name, _)) = student.network().params().iter().find(|(_, v)| v.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    step,
                    detail: format!("parameter {name} became non-finite after the update (lr={lr})"),
                });
            }
            if let Some(t) = teacher.as_mut() {
                // early steps average over fewer updates so the teacher tracks the student
                let decay = (1.0 - 1.0 / (global_step as f64 + 1.0)).min(weights.ema_decay);
                ema_update(t, &student, decay)?;
                // running statistics follow the teacher's own activations, not the student's
                t.absorb_bn(&teacher_bn);
                decay_used = Some(decay);
            }
            global_step += 1;
        }
        let n = steps as f64;
        let last = epoch + 1 == tc.epochs;
        let val = if (epoch + 1) % tc.validate_every == 0 || last {
            let (net, ens) = scoring_network(tc.score_model, &student, teacher.as_ref());
            let report = score_items(net, &data.validation, ens, &settings.features, &settings.decode, &settings.matching)?;
            let f1 = report.macro_f1;
            if best.as_ref().is_none_or(|b| f1 > b.macro_f1) {
                checkpoint(&student, teacher.as_ref(), &batch_rng, epoch + 1, Some(f1)).save(&best_path)?;
                best = Some(report);
            }
            Some(f1)
        } else {
            None
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            losses: sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
            total: total_sum / n,
            frame_bce: frame_sum / n,
            lr,
            ramp,
            ema_decay: decay_used,
            val_macro_f1: val,
        };
        let line = serde_json::to_string(&record).expect("serializable");
        writeln!(log, "{line}").map_err(|e| Error::io(format!("writing {}", log_path.display()), e))?;
        log::info!("epoch {} total {:.4} frame_bce {:.4} val_f1 {:?}", record.epoch, record.total, record.frame_bce, val);
        records.push(record);
    }
    checkpoint(&student, teacher.as_ref(), &batch_rng, tc.epochs, None).save(&last_path)?;
    let best_validation = best.expect("validated after the last epoch").named(mode.label(), "validation");
    Ok(RunArtifacts { best_checkpoint: best_path, last_checkpoint: last_path, log_path, records, best_validation })
}

/// Reads a training log back into records.
pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("{}: {e}", path.display()))))
        .collect()
}
