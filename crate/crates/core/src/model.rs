//! CRNN student with a shared convolutional trunk, per-branch sub-networks
//! and heads, an ensemble head, and the EMA teacher copy.
//!
//! Tensor layout inside the network: features `[B, T, F]` enter as
//! `[B, 1, T, F]`; each conv block is `conv3x3 → batch norm → GLU → avg pool`;
//! the branch tail reshapes to `[B, T', C·F']`, runs a bidirectional GRU and
//! two linear heads (frame probabilities and attention logits).

use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::autodiff::{lit, BatchNormMode, Graph, GruParams, ParamId, ParamStore, Real, Var};
use crate::error::{Error, Result};
use crate::featurize::{FeatureClip, FeatureConfig, FeatureStats};

/// One `conv → BN → GLU → pool` block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    /// Output channels after the gated linear unit.
    pub channels: usize,
    pub freq_pool: usize,
    pub time_pool: usize,
}

impl BlockSpec {
    pub const fn new(channels: usize, time_pool: usize, freq_pool: usize) -> Self {
        Self { channels, freq_pool, time_pool }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub n_branches: usize,
    pub trunk_blocks: Vec<BlockSpec>,
    pub branch_blocks: Vec<BlockSpec>,
    /// Hidden units per GRU direction; the embedding is twice this.
    pub recurrent_hidden: usize,
    /// Dropout on the recurrent input during student training.
    pub dropout: f64,
    /// Adds a frame-level ensemble classifier; otherwise the ensemble's
    /// frame output is the mean of the branch frame outputs.
    pub ensemble_frame_head: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            n_branches: 5,
            trunk_blocks: vec![BlockSpec::new(16, 2, 2), BlockSpec::new(32, 2, 2), BlockSpec::new(64, 1, 2)],
            branch_blocks: vec![BlockSpec::new(64, 1, 2), BlockSpec::new(64, 1, 2)],
            recurrent_hidden: 128,
            dropout: 0.2,
            ensemble_frame_head: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Small architecture sized for single-core desk experiments.
    pub fn desk() -> Self {
        Self {
            trunk_blocks: vec![BlockSpec::new(8, 2, 4), BlockSpec::new(16, 2, 4)],
            branch_blocks: vec![BlockSpec::new(16, 1, 2)],
            recurrent_hidden: 16,
            dropout: 0.1,
            ..Self::default()
        }
    }

    /// Minimal architecture for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            n_classes: 3,
            n_branches: 2,
            trunk_blocks: vec![BlockSpec::new(2, 2, 2)],
            branch_blocks: vec![BlockSpec::new(2, 2, 2)],
            recurrent_hidden: 8,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown model preset {other:?} (expected default, desk or tiny)"))),
        }
    }

    fn blocks(&self) -> impl Iterator<Item = &BlockSpec> {
        self.trunk_blocks.iter().chain(&self.branch_blocks)
    }

    /// Product of all time pooling factors.
    pub fn time_pool(&self) -> usize {
        self.blocks().map(|b| b.time_pool).product()
    }

    pub fn freq_pool(&self) -> usize {
        self.blocks().map(|b| b.freq_pool).product()
    }

    pub fn embedding_dim(&self) -> usize {
        2 * self.recurrent_hidden
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.n_classes == 0 {
            return bad("n_classes must be positive");
        }
        if self.n_branches == 0 {
            return bad("n_branches must be at least 1");
        }
        if self.branch_blocks.is_empty() && self.trunk_blocks.is_empty() {
            return bad("at least one conv block is required");
        }
        if self.blocks().any(|b| b.channels == 0 || b.time_pool == 0 || b.freq_pool == 0) {
            return bad("block channels and pooling factors must be positive");
        }
        if self.recurrent_hidden == 0 {
            return bad("recurrent_hidden must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return bad("bn_momentum must lie in [0, 1] and bn_eps be positive");
        }
        Ok(())
    }

    /// Checks the architecture against the feature front end.
    pub fn check_features(&self, features: &FeatureConfig) -> Result<()> {
        self.validate()?;
        if self.time_pool() != features.time_pool {
            return Err(Error::Config(format!(
                "model pools time by {} but features.time_pool is {}",
                self.time_pool(),
                features.time_pool
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    /// Running statistics, indices into the buffer store.
    mean: ParamId,
    var: ParamId,
    spec: BlockSpec,
}

#[derive(Clone, Copy, Debug)]
struct GruIds {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

#[derive(Clone, Debug)]
struct BranchLayer {
    convs: Vec<ConvLayer>,
    forward: GruIds,
    backward: GruIds,
    frame_w: ParamId,
    frame_b: ParamId,
    att_w: ParamId,
    att_b: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    trunk: Vec<ConvLayer>,
    branches: Vec<BranchLayer>,
    ens_clip_w: ParamId,
    ens_clip_b: ParamId,
    ens_frame: Option<(ParamId, ParamId)>,
}

/// Statistics source for batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with the running buffers.
    Running,
}

/// Input of a forward pass; every array is `[B, T, F]`.
#[derive(Clone, Copy, Debug)]
pub enum Views<'a, F: Real> {
    /// The same input feeds every branch; the trunk runs once.
    Shared(&'a ArrayD<F>),
    /// One input per branch.
    PerBranch(&'a [ArrayD<F>]),
}

/// Graph nodes of one head.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[B, T', C]` probabilities
    pub strong: Var,
    /// `[B, C]` probabilities
    pub weak: Var,
    /// `[B, E]`
    pub embedding: Var,
    /// `[B, T', E]` recurrent features
    pub frames: Var,
}

/// Batch statistics observed during a [`NormMode::Batch`] pass.
#[derive(Clone, Debug)]
pub struct BnObservation<F: Real> {
    mean_id: ParamId,
    var_id: ParamId,
    mean: Array1<F>,
    var: Array1<F>,
}

#[derive(Debug)]
pub struct ForwardVars<F: Real> {
    pub branches: Vec<HeadVars>,
    pub ensemble: Option<HeadVars>,
    pub bn: Vec<BnObservation<F>>,
}

/// Parameters and normalization buffers of the full network.
#[derive(Clone, Debug)]
pub struct Network<F: Real = f32> {
    cfg: ModelConfig,
    n_mels: usize,
    params: ParamStore<F>,
    buffers: ParamStore<F>,
    layout: Layout,
}

fn uniform<F: Real>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> ArrayD<F> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| lit(rng.random_range(-bound..=bound)))
}

fn to_array1<F: Real>(a: &ArrayD<F>) -> Array1<F> {
    a.view().into_dimensionality::<Ix1>().expect("rank-1 buffer").to_owned()
}

impl<F: Real> Network<F> {
    /// Builds a network for `n_mels`-band inputs with parameters drawn
    /// uniformly in `±1/√fan_in`.
    pub fn new(cfg: &ModelConfig, n_mels: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if n_mels == 0 {
            return Err(Error::Config("model input needs at least one mel band".into()));
        }
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut conv = |prefix: String, cin: usize, spec: BlockSpec, params: &mut ParamStore<F>, rng: &mut _| {
            let out = 2 * spec.channels;
            let fan_in = cin * 9;
            ConvLayer {
                weight: params.push(format!("{prefix}.conv.weight"), uniform(&[out, fan_in], 1.0 / (fan_in as f64).sqrt(), rng)),
                gamma: params.push(format!("{prefix}.bn.gamma"), ArrayD::ones(IxDyn(&[out]))),
                beta: params.push(format!("{prefix}.bn.beta"), ArrayD::zeros(IxDyn(&[out]))),
                mean: buffers.push(format!("{prefix}.bn.running_mean"), ArrayD::zeros(IxDyn(&[out]))),
                var: buffers.push(format!("{prefix}.bn.running_var"), ArrayD::ones(IxDyn(&[out]))),
                spec,
            }
        };

        let mut cin = 1;
        let mut bands = n_mels;
        let mut trunk = Vec::new();
        for (i, spec) in cfg.trunk_blocks.iter().enumerate() {
            trunk.push(conv(format!("trunk.{i}"), cin, *spec, &mut params, rng));
            cin = spec.channels;
            bands = bands.div_ceil(spec.freq_pool);
        }
        let (trunk_cin, trunk_bands) = (cin, bands);
        let hidden = cfg.recurrent_hidden;
        let emb = cfg.embedding_dim();
        let linear = |name: String, fan_in: usize, out: usize, params: &mut ParamStore<F>, rng: &mut _| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (
                params.push(format!("{name}.weight"), uniform(&[fan_in, out], bound, rng)),
                params.push(format!("{name}.bias"), uniform(&[out], bound, rng)),
            )
        };
        let mut branches = Vec::new();
        for b in 0..cfg.n_branches {
            let (mut cin, mut bands) = (trunk_cin, trunk_bands);
            let mut convs = Vec::new();
            for (i, spec) in cfg.branch_blocks.iter().enumerate() {
                convs.push(conv(format!("branch.{b}.{i}"), cin, *spec, &mut params, rng));
                cin = spec.channels;
                bands = bands.div_ceil(spec.freq_pool);
            }
            let input = cin * bands;
            let gru = |dir: &str, params: &mut ParamStore<F>, rng: &mut _| {
                let bound = 1.0 / (hidden as f64).sqrt();
                let p = format!("branch.{b}.gru.{dir}");
                GruIds {
                    w_ih: params.push(format!("{p}.w_ih"), uniform(&[input, 3 * hidden], bound, rng)),
                    w_hh: params.push(format!("{p}.w_hh"), uniform(&[hidden, 3 * hidden], bound, rng)),
                    b_ih: params.push(format!("{p}.b_ih"), uniform(&[3 * hidden], bound, rng)),
                    b_hh: params.push(format!("{p}.b_hh"), uniform(&[3 * hidden], bound, rng)),
                }
            };
            let forward = gru("forward", &mut params, rng);
            let backward = gru("backward", &mut params, rng);
            let (frame_w, frame_b) = linear(format!("branch.{b}.frame"), emb, cfg.n_classes, &mut params, rng);
            let (att_w, att_b) = linear(format!("branch.{b}.attention"), emb, cfg.n_classes, &mut params, rng);
            branches.push(BranchLayer { convs, forward, backward, frame_w, frame_b, att_w, att_b });
        }
        let concat = emb * cfg.n_branches;
        let (ens_clip_w, ens_clip_b) = linear("ensemble.clip".into(), concat, cfg.n_classes, &mut params, rng);
        let ens_frame = cfg
            .ensemble_frame_head
            .then(|| linear("ensemble.frame".into(), concat, cfg.n_classes, &mut params, rng));
        let layout = Layout { trunk, branches, ens_clip_w, ens_clip_b, ens_frame };
        Ok(Self { cfg: cfg.clone(), n_mels, params, buffers, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore<F> {
        &self.buffers
    }

    /// Ids of parameters whose names start with `prefix`.
    pub fn param_ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.params.ids().filter(move |id| self.params.name(*id).starts_with(prefix))
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.params.same_layout(&other.params) && self.buffers.same_layout(&other.buffers)
    }

    fn conv_block(
        &self,
        g: &mut Graph<F>,
        x: Var,
        layer: &ConvLayer,
        norm: NormMode,
        observed: &mut Vec<BnObservation<F>>,
    ) -> Var {
        let w = g.param(&self.params, layer.weight);
        let y = g.conv3x3(x, w);
        let (gamma, beta) = (g.param(&self.params, layer.gamma), g.param(&self.params, layer.beta));
        let (y, stats) = match norm {
            NormMode::Batch => g.batch_norm(y, gamma, beta, BatchNormMode::Train, self.cfg.bn_eps),
            NormMode::Running => {
                let (mean, var) = (to_array1(self.buffers.get(layer.mean)), to_array1(self.buffers.get(layer.var)));
                g.batch_norm(y, gamma, beta, BatchNormMode::Eval { mean: &mean, var: &var }, self.cfg.bn_eps)
            }
        };
        if let Some((mean, var)) = stats {
            observed.push(BnObservation { mean_id: layer.mean, var_id: layer.var, mean, var });
        }
        let y = g.glu(y);
        g.avg_pool(y, layer.spec.time_pool, layer.spec.freq_pool)
    }

    fn gru_params(&self, g: &mut Graph<F>, ids: GruIds) -> GruParams {
        GruParams {
            w_ih: g.param(&self.params, ids.w_ih),
            w_hh: g.param(&self.params, ids.w_hh),
            b_ih: g.param(&self.params, ids.b_ih),
            b_hh: g.param(&self.params, ids.b_hh),
        }
    }

    /// Records a forward pass on `g`. `dropout_rng` enables dropout;
    /// `ensemble` adds the ensemble head.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        views: Views<'_, F>,
        norm: NormMode,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
        ensemble: bool,
    ) -> Result<ForwardVars<F>> {
        let check = |x: &ArrayD<F>| -> Result<(usize, usize)> {
            match x.shape() {
                &[b, t, f] if b > 0 && t > 0 && f == self.n_mels => Ok((b, t)),
                s => Err(Error::ShapeMismatch(format!("model expects [batch, frames, {}] input, got {s:?}", self.n_mels))),
            }
        };
        let nb = self.cfg.n_branches;
        let (input, batch, groups) = match views {
            Views::Shared(x) => {
                let (b, t) = check(x)?;
                let v = x.to_shape(IxDyn(&[b, 1, t, self.n_mels])).expect("shape").into_owned();
                (g.constant(v), b, 1)
            }
            Views::PerBranch(xs) => {
                if xs.len() != nb {
                    return Err(Error::InvalidArgument(format!("expected {nb} branch views, got {}", xs.len())));
                }
                let dims = check(&xs[0])?;
                for x in xs {
                    if check(x)? != dims {
                        return Err(Error::ShapeMismatch("branch views differ in shape".into()));
                    }
                }
                let parts: Vec<_> = xs.iter().map(|x| x.view()).collect();
                let joined = ndarray::concatenate(Axis(0), &parts).expect("same shapes");
                let (b, t) = dims;
                let v = joined.into_shape_with_order(IxDyn(&[nb * b, 1, t, self.n_mels])).expect("shape");
                (g.constant(v), b, nb)
            }
        };

        let mut bn = Vec::new();
        let mut h = input;
        for layer in &self.layout.trunk {
            h = self.conv_block(g, h, layer, norm, &mut bn);
        }
        let mut heads = Vec::with_capacity(nb);
        for (b, branch) in self.layout.branches.iter().enumerate() {
            let mut hb = if groups == 1 { h } else { g.slice_items(h, b * batch, (b + 1) * batch) };
            for layer in &branch.convs {
                hb = self.conv_block(g, hb, layer, norm, &mut bn);
            }
            let mut seq = g.to_sequence(hb);
            if let Some(rng) = dropout_rng.as_deref_mut() {
                seq = g.dropout(seq, self.cfg.dropout, rng);
            }
            let (fwd, bwd) = (self.gru_params(g, branch.forward), self.gru_params(g, branch.backward));
            let frames = g.bigru(seq, fwd, bwd);
            let (fw, fb) = (g.param(&self.params, branch.frame_w), g.param(&self.params, branch.frame_b));
            let logits = g.linear(frames, fw, fb);
            let strong = g.sigmoid(logits);
            let (aw, ab) = (g.param(&self.params, branch.att_w), g.param(&self.params, branch.att_b));
            let att = g.linear(frames, aw, ab);
            let weak = g.attention_pool(strong, att);
            let embedding = g.mean_time(frames);
            heads.push(HeadVars { strong, weak, embedding, frames });
        }

        let ensemble = ensemble.then(|| {
            let embs: Vec<Var> = heads.iter().map(|h| h.embedding).collect();
            let embedding = g.concat_last(&embs);
            let (cw, cb) = (g.param(&self.params, self.layout.ens_clip_w), g.param(&self.params, self.layout.ens_clip_b));
            let clip_logits = g.linear(embedding, cw, cb);
            let weak = g.sigmoid(clip_logits);
            let seqs: Vec<Var> = heads.iter().map(|h| h.frames).collect();
            let frames = g.concat_last(&seqs);
            let strong = match self.layout.ens_frame {
                Some((w, b)) => {
                    let (w, b) = (g.param(&self.params, w), g.param(&self.params, b));
                    let logits = g.linear(frames, w, b);
                    g.sigmoid(logits)
                }
                None => {
                    let parts: Vec<Var> = heads.iter().map(|h| h.strong).collect();
                    let sum = g.add_all(&parts);
                    g.scale(sum, lit(1.0 / parts.len() as f64))
                }
            };
            HeadVars { strong, weak, embedding, frames }
        });
        Ok(ForwardVars { branches: heads, ensemble, bn })
    }

    /// Folds observed batch statistics into the running buffers.
    pub fn absorb_bn(&mut self, observed: &[BnObservation<F>]) {
        let m: F = lit(self.cfg.bn_momentum);
        for o in observed {
            let mean = self.buffers.get_mut(o.mean_id);
            mean.zip_mut_with(&o.mean.view().into_dyn(), |r, &b| *r = (F::one() - m) * *r + m * b);
            let var = self.buffers.get_mut(o.var_id);
            var.zip_mut_with(&o.var.view().into_dyn(), |r, &b| *r = (F::one() - m) * *r + m * b);
        }
    }

    /// Evaluation-mode forward on one clip per branch (or one shared clip)
    /// returning the branch outputs and, if requested, the ensemble output.
    fn eval_clips(&self, views: &[FeatureClip], ensemble: bool) -> Result<(Vec<BranchOutput>, Option<BranchOutput>)> {
        let arrays = views
            .iter()
            .map(|v| {
                let a = v.values.mapv(|x| lit::<F>(x as f64));
                let (t, f) = a.dim();
                a.into_shape_with_order(IxDyn(&[1, t, f])).expect("shape")
            })
            .collect::<Vec<_>>();
        let mut g = Graph::inference();
        let out = self.forward(&mut g, Views::PerBranch(&arrays), NormMode::Running, None, ensemble)?;
        let branches = out.branches.iter().map(|h| BranchOutput::from_graph(&g, h, 0)).collect();
        let ensemble = out.ensemble.as_ref().map(|h| BranchOutput::from_graph(&g, h, 0));
        Ok((branches, ensemble))
    }
}

/// Per-clip outputs of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutput {
    /// `[T' × C]` frame probabilities
    pub strong: Array2<f32>,
    /// `[C]` clip probabilities
    pub weak: Array1<f32>,
    pub embedding: Array1<f32>,
}

impl BranchOutput {
    /// Extracts item `item` of a head from the graph.
    pub fn from_graph<F: Real>(g: &Graph<F>, head: &HeadVars, item: usize) -> Self {
        let f32_of = |v: &F| v.to_f32().unwrap_or(f32::NAN);
        let strong = g.value(head.strong).index_axis(Axis(0), item).mapv(|v| f32_of(&v));
        let weak = g.value(head.weak).index_axis(Axis(0), item).mapv(|v| f32_of(&v));
        let embedding = g.value(head.embedding).index_axis(Axis(0), item).mapv(|v| f32_of(&v));
        Self {
            strong: strong.into_dimensionality().expect("rank 2"),
            weak: weak.into_dimensionality().expect("rank 1"),
            embedding: embedding.into_dimensionality().expect("rank 1"),
        }
    }

    /// Element-wise mean of several outputs.
    pub fn mean(outputs: &[BranchOutput]) -> Result<BranchOutput> {
        let first = outputs.first().ok_or_else(|| Error::InvalidArgument("mean of no outputs".into()))?;
        let k = outputs.len() as f32;
        let mut acc = first.clone();
        for o in &outputs[1..] {
            if o.strong.dim() != acc.strong.dim() || o.embedding.len() != acc.embedding.len() {
                return Err(Error::ShapeMismatch("branch outputs differ in shape".into()));
            }
            acc.strong += &o.strong;
            acc.weak += &o.weak;
            acc.embedding += &o.embedding;
        }
        acc.strong /= k;
        acc.weak /= k;
        acc.embedding /= k;
        Ok(acc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentOutput {
    pub branches: Vec<BranchOutput>,
    pub ensemble: BranchOutput,
}

/// The trainable model.
#[derive(Clone, Debug)]
pub struct StudentModel<F: Real = f32>(Network<F>);

/// EMA copy of the student. Its parameters change only through
/// [`ema_update`]; the ensemble head is carried but never evaluated.
#[derive(Clone, Debug)]
pub struct TeacherModel<F: Real = f32>(Network<F>);

impl<F: Real> StudentModel<F> {
    pub fn from_network(net: Network<F>) -> Self {
        Self(net)
    }

    pub fn network(&self) -> &Network<F> {
        &self.0
    }

    pub fn network_mut(&mut self) -> &mut Network<F> {
        &mut self.0
    }
}

impl<F: Real> TeacherModel<F> {
    pub fn from_network(net: Network<F>) -> Self {
        Self(net)
    }

    pub fn network(&self) -> &Network<F> {
        &self.0
    }

    /// Folds batch statistics of the teacher's own forward pass into its
    /// normalization buffers; parameters stay untouched.
    pub fn absorb_bn(&mut self, observed: &[BnObservation<F>]) {
        self.0.absorb_bn(observed);
    }
}

/// Builds a student whose input and pooling match `features`.
pub fn build_student(cfg: &ModelConfig, features: &FeatureConfig, rng: &mut impl Rng) -> Result<StudentModel> {
    cfg.check_features(features)?;
    Ok(StudentModel(Network::new(cfg, features.n_mels, rng)?))
}

/// Deep copy of every student parameter and buffer.
pub fn build_teacher_from<F: Real>(s: &StudentModel<F>) -> TeacherModel<F> {
    TeacherModel(s.0.clone())
}

/// Evaluation-mode forward of one clip per branch.
pub fn student_forward(m: &StudentModel, views: &[FeatureClip]) -> Result<StudentOutput> {
    let (branches, ensemble) = m.0.eval_clips(views, true)?;
    Ok(StudentOutput { branches, ensemble: ensemble.expect("ensemble requested") })
}

/// Evaluation-mode forward of one clip per branch, without the ensemble.
pub fn teacher_forward(m: &TeacherModel, views: &[FeatureClip]) -> Result<Vec<BranchOutput>> {
    Ok(m.0.eval_clips(views, false)?.0)
}

/// `θt ← decay·θt + (1 − decay)·θs` for every parameter. Normalization buffers
/// are left alone; the teacher tracks its own (see [`TeacherModel::absorb_bn`]).
pub fn ema_update<F: Real>(teacher: &mut TeacherModel<F>, student: &StudentModel<F>, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::InvalidArgument(format!("EMA decay {decay} outside [0, 1]")));
    }
    if !teacher.0.same_layout(&student.0) {
        return Err(Error::ShapeMismatch("teacher and student parameter layouts differ".into()));
    }
    let (d, rest): (F, F) = (lit(decay), lit(1.0 - decay));
    let mix = |t: &mut ArrayD<F>, s: &ArrayD<F>| {
        if decay == 0.0 {
            t.assign(s);
        } else if decay < 1.0 {
            t.zip_mut_with(s, |t, &s| *t = d * *t + rest * s);
        }
    };
    let student_params: Vec<&ArrayD<F>> = student.0.params.iter().map(|(_, v)| v).collect();
    for (t, s) in teacher.0.params.values_mut().zip(student_params) {
        mix(t, s);
    }
    Ok(())
}

pub const CHECKPOINT_FORMAT: &str = "sed-pcl-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub params: Vec<NamedArray>,
    pub buffers: Vec<NamedArray>,
}

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Self-describing model archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub augment: AugmentConfig,
    pub feature_stats: Option<FeatureStats>,
    pub student: NetworkState,
    pub teacher: Option<NetworkState>,
    pub rng: Option<RngState>,
    /// Free-form run metadata (mode, epoch, validation score).
    pub run: serde_json::Value,
}

fn store_to_named(store: &ParamStore<f32>) -> Vec<NamedArray> {
    store
        .iter()
        .map(|(name, v)| NamedArray { name: name.to_string(), shape: v.shape().to_vec(), data: v.iter().copied().collect() })
        .collect()
}

fn fill_store(store: &mut ParamStore<f32>, arrays: &[NamedArray]) -> std::result::Result<(), String> {
    if arrays.len() != store.len() {
        return Err(format!("expected {} arrays, found {}", store.len(), arrays.len()));
    }
    let ids: Vec<ParamId> = store.ids().collect();
    for (id, a) in ids.into_iter().zip(arrays) {
        if store.name(id) != a.name || store.get(id).shape() != a.shape.as_slice() {
            return Err(format!("array {} {:?} does not match expected {} {:?}", a.name, a.shape, store.name(id), store.get(id).shape()));
        }
        *store.get_mut(id) = ArrayD::from_shape_vec(IxDyn(&a.shape), a.data.clone()).map_err(|e| format!("{}: {e}", a.name))?;
    }
    Ok(())
}

impl Network<f32> {
    pub fn state(&self) -> NetworkState {
        NetworkState { params: store_to_named(&self.params), buffers: store_to_named(&self.buffers) }
    }

    /// Rebuilds a network of this layout and loads `state` into it.
    pub fn from_state(cfg: &ModelConfig, n_mels: usize, state: &NetworkState) -> std::result::Result<Self, String> {
        use rand::SeedableRng;
        let mut net = Network::new(cfg, n_mels, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
        fill_store(&mut net.params, &state.params)?;
        fill_store(&mut net.buffers, &state.buffers)?;
        Ok(net)
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint { path: path.into(), msg: e.to_string() })?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let err = |msg: String| Error::Checkpoint { path: path.into(), msg };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(err(format!("unsupported format tag {:?}", ckpt.format)));
        }
        ckpt.model.check_features(&ckpt.features).map_err(|e| err(e.to_string()))?;
        Ok(ckpt)
    }

    pub fn student(&self) -> Result<StudentModel> {
        Network::from_state(&self.model, self.features.n_mels, &self.student)
            .map(StudentModel)
            .map_err(|msg| Error::Checkpoint { path: "<checkpoint>".into(), msg })
    }

    /// The stored teacher, or a copy of the student when none was stored.
    pub fn teacher(&self) -> Result<TeacherModel> {
        match &self.teacher {
            Some(state) => Network::from_state(&self.model, self.features.n_mels, state)
                .map(TeacherModel)
                .map_err(|msg| Error::Checkpoint { path: "<checkpoint>".into(), msg }),
            None => Ok(build_teacher_from(&self.student()?)),
        }
    }
}
