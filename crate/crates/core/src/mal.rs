//! Selection-depression training: λ schedules, anchor selection from bags,
//! attention maps, feature depression, and the per-iteration loop for both
//! the MAL arm and the fixed-assignment baseline.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    decode_box_clamped, encode_box, generate_anchors, AnchorGridConfig, AnchorSet, BBox, PyramidLevel,
    DEFAULT_MAX_LOG_DELTA,
};
use crate::losses::{detection_loss, joint_score, LossConfig, PositiveTerm};
use crate::matching::{
    assign_baseline_from_table, build_bags_from_table, empty_bag_warnings, mal_negatives_from_table, AnchorBag,
    IouTable,
};
use crate::model::{
    backward, forward, render_features, Checkpoint, FeatureLevel, FeatureMap, ModelSpec, RenderConfig, ScorerParams,
    Sgd,
};
use crate::scenes::{derive_seed, Dataset, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionStrategy {
    /// Every bag anchor supervises at every iteration.
    #[serde(rename = "all")]
    All,
    /// Linearly shrink from the whole bag to its single best anchor.
    #[serde(rename = "all-top1")]
    AllToTop1,
}

impl SelectionStrategy {
    pub fn name(self) -> &'static str {
        match self {
            SelectionStrategy::All => "all",
            SelectionStrategy::AllToTop1 => "all-top1",
        }
    }
}

impl std::str::FromStr for SelectionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(SelectionStrategy::All),
            "all-top1" => Ok(SelectionStrategy::AllToTop1),
            _ => Err(Error::InvalidArgument(format!("unknown selection strategy '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepressionVariant {
    /// Depression disabled: features pass through unmodified.
    None,
    Constant,
    Step,
    SymmetricStep,
}

impl DepressionVariant {
    pub fn name(self) -> &'static str {
        match self {
            DepressionVariant::None => "none",
            DepressionVariant::Constant => "constant",
            DepressionVariant::Step => "step",
            DepressionVariant::SymmetricStep => "symmetric_step",
        }
    }
}

impl std::str::FromStr for DepressionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DepressionVariant::None),
            "constant" => Ok(DepressionVariant::Constant),
            "step" => Ok(DepressionVariant::Step),
            "symmetric_step" => Ok(DepressionVariant::SymmetricStep),
            _ => Err(Error::InvalidArgument(format!("unknown depression schedule '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepressionSchedule {
    pub variant: DepressionVariant,
    pub peak_fraction: f64,
    pub step_count: usize,
}

impl Default for DepressionSchedule {
    fn default() -> Self {
        DepressionSchedule {
            variant: DepressionVariant::SymmetricStep,
            peak_fraction: 0.5,
            step_count: 5,
        }
    }
}

impl DepressionSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.peak_fraction) {
            return Err(Error::Config(format!("peak_fraction {} not in [0, 1]", self.peak_fraction)));
        }
        if self.step_count == 0 {
            return Err(Error::Config("step_count must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} not in [0, 1]")));
    }
    Ok(())
}

/// `min(bag, floor(bag * (1 - λ) + 1))`; an empty bag selects nothing.
pub fn selection_count(lambda: f64, bag_size: usize) -> Result<usize> {
    check_lambda(lambda)?;
    if bag_size == 0 {
        return Ok(0);
    }
    let raw = (bag_size as f64 * (1.0 - lambda) + 1.0).floor() as usize;
    Ok(raw.clamp(1, bag_size))
}

/// Number of anchors a strategy supervises from a bag at `lambda`.
pub fn strategy_count(strategy: SelectionStrategy, lambda: f64, bag_size: usize) -> Result<usize> {
    match strategy {
        SelectionStrategy::All => {
            check_lambda(lambda)?;
            Ok(bag_size)
        }
        SelectionStrategy::AllToTop1 => selection_count(lambda, bag_size),
    }
}

/// Fraction of attention positions left undepressed at `lambda`.
pub fn depression_fraction(lambda: f64, schedule: &DepressionSchedule) -> Result<f64> {
    check_lambda(lambda)?;
    let peak = schedule.peak_fraction;
    let n = schedule.step_count.max(1) as f64;
    Ok(match schedule.variant {
        DepressionVariant::None => 0.0,
        DepressionVariant::Constant => peak,
        DepressionVariant::Step => peak * (lambda * n).floor() / n,
        DepressionVariant::SymmetricStep => {
            let rise = if lambda <= 0.5 { 2.0 * lambda } else { 2.0 * (1.0 - lambda) };
            peak * (rise * n).floor() / n
        }
    })
}

/// Anchor indices of the `count` highest-confidence bag entries.
///
/// `confidences[j]` belongs to `bag.anchor_indices[j]`. Ties keep bag order,
/// which is already descending IoU then ascending anchor index.
pub fn select_anchors(bag: &AnchorBag, confidences: &[f64], count: usize) -> Result<Vec<usize>> {
    if confidences.len() != bag.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} confidences for a bag of {}",
            confidences.len(),
            bag.len()
        )));
    }
    if count > bag.len() {
        return Err(Error::InvalidArgument(format!("select {count} from a bag of {}", bag.len())));
    }
    let mut order: Vec<usize> = (0..bag.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]));
    Ok(order[..count].iter().map(|&j| bag.anchor_indices[j]).collect())
}

/// `M[h,w] = Σ_c mean(U_c) U_c[h,w]`, row-major `H x W`.
pub fn attention_map(level: &FeatureLevel) -> Vec<f64> {
    let n = level.cells();
    let mut m = vec![0.0; n];
    if n == 0 {
        return m;
    }
    for c in 0..level.channels {
        let ch = level.channel(c);
        let w = ch.iter().sum::<f64>() / n as f64;
        if w == 0.0 {
            continue;
        }
        for (mv, u) in m.iter_mut().zip(ch) {
            *mv += w * u;
        }
    }
    m
}

/// Row-major positions of the top `ceil(fraction * len)` values of `m`, ties to the earlier position.
pub fn protected_positions(m: &[f64], fraction: f64) -> Vec<usize> {
    let n = m.len();
    let count = ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[b].total_cmp(&m[a]));
    order.truncate(count);
    order.sort_unstable();
    order
}

/// `V = (1 + M') ∘ U` where `M'` is `M` zeroed on the protected set.
pub fn depress(level: &FeatureLevel, m: &[f64], fraction: f64) -> Result<FeatureLevel> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("depression fraction {fraction} not in [0, 1]")));
    }
    let n = level.cells();
    if m.len() != n {
        return Err(Error::ShapeMismatch(format!("attention map of {} for {n} cells", m.len())));
    }
    let mut scale: Vec<f64> = m.iter().map(|v| 1.0 + v).collect();
    for p in protected_positions(m, fraction) {
        scale[p] = 1.0;
    }
    let mut out = level.clone();
    for ch in out.values.chunks_exact_mut(n) {
        for (v, s) in ch.iter_mut().zip(&scale) {
            *v *= s;
        }
    }
    Ok(out)
}

pub fn depress_features(u: &FeatureMap, fraction: f64) -> Result<FeatureMap> {
    let levels = u
        .levels
        .iter()
        .map(|l| depress(l, &attention_map(l), fraction))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureMap { levels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mal,
    Baseline,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mal => "mal",
            Method::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mal" => Ok(Method::Mal),
            "baseline" => Ok(Method::Baseline),
            _ => Err(Error::InvalidArgument(format!("unknown method '{s}'"))),
        }
    }
}

/// Pyramid used at the default 96x96 scene size.
pub fn desk_levels() -> Vec<PyramidLevel> {
    [8u32, 16, 32]
        .iter()
        .map(|&s| PyramidLevel {
            stride: s,
            base_size: 2.0 * s as f64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear warmup length; `None` means `min(500, iterations / 10)`.
    pub warmup: Option<usize>,
    /// Fractions of `iterations` at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub bag_size: usize,
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub selection: SelectionStrategy,
    pub depression: DepressionSchedule,
    pub loss: LossConfig,
    pub hidden: usize,
    pub init_prior: f64,
    /// Hidden-layer init std, in units of `1 / sqrt(in_channels)`.
    pub hidden_init_scale: f64,
    pub max_log_delta: f64,
    pub seed: u64,
    pub levels: Vec<PyramidLevel>,
    pub octave_scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 4,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup: None,
            lr_milestones: vec![0.8, 0.95],
            lr_decay: 0.1,
            bag_size: 50,
            positive_iou: 0.5,
            negative_iou: 0.4,
            selection: SelectionStrategy::AllToTop1,
            depression: DepressionSchedule::default(),
            loss: LossConfig::default(),
            hidden: 64,
            init_prior: 0.01,
            hidden_init_scale: 6.0,
            max_log_delta: DEFAULT_MAX_LOG_DELTA,
            seed: 0,
            levels: desk_levels(),
            octave_scales: AnchorGridConfig::default_scales(),
            aspect_ratios: AnchorGridConfig::default_ratios(),
            render: RenderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} not in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("lr_milestones must lie in [0, 1]".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} not in (0, 1]", self.lr_decay));
        }
        if self.bag_size == 0 {
            return bad("bag_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.negative_iou)
            || !(0.0..=1.0).contains(&self.positive_iou)
            || self.negative_iou > self.positive_iou
        {
            return bad(format!(
                "need 0 <= negative_iou ({}) <= positive_iou ({}) <= 1",
                self.negative_iou, self.positive_iou
            ));
        }
        if self.hidden == 0 {
            return bad("hidden must be >= 1".into());
        }
        if !(self.init_prior > 0.0 && self.init_prior < 1.0) {
            return bad(format!("init_prior {} not in (0, 1)", self.init_prior));
        }
        if !(self.hidden_init_scale > 0.0 && self.hidden_init_scale.is_finite()) {
            return bad(format!("hidden_init_scale {} must be positive", self.hidden_init_scale));
        }
        if !(self.max_log_delta > 0.0) {
            return bad("max_log_delta must be positive".into());
        }
        self.depression.validate()?;
        self.loss.validate()?;
        Ok(())
    }

    pub fn warmup_iterations(&self) -> usize {
        self.warmup.unwrap_or(500.min(self.iterations / 10))
    }

    pub fn learning_rate_at(&self, t: usize) -> f64 {
        let w = self.warmup_iterations();
        let mut lr = self.learning_rate;
        if t < w {
            lr *= (t + 1) as f64 / w as f64;
        }
        for &m in &self.lr_milestones {
            if t as f64 >= m * self.iterations as f64 {
                lr *= self.lr_decay;
            }
        }
        lr
    }

    pub fn grid(&self, image_width: u32, image_height: u32) -> AnchorGridConfig {
        AnchorGridConfig {
            levels: self.levels.clone(),
            octave_scales: self.octave_scales.clone(),
            aspect_ratios: self.aspect_ratios.clone(),
            image_width,
            image_height,
        }
    }

    pub fn model_spec(&self, dataset: &Dataset) -> ModelSpec {
        ModelSpec::new(
            self.grid(dataset.image_width, dataset.image_height),
            self.render.clone(),
            dataset.class_count,
            self.hidden,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub t: usize,
    pub total: usize,
    pub seed: u64,
    pub optimizer: Sgd,
}

impl TrainState {
    pub fn lambda(&self) -> f64 {
        self.t as f64 / self.total as f64
    }
}

/// Scene data that does not change during training.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scene: Scene,
    pub features: FeatureMap,
    pub bags: Vec<AnchorBag>,
    pub mal_negatives: Vec<usize>,
    pub baseline_positives: Vec<PositiveTerm>,
    pub baseline_negatives: Vec<usize>,
}

pub fn prepare_scene(
    scene: &Scene,
    spec: &ModelSpec,
    anchors: &AnchorSet,
    noise_level: f64,
    cfg: &TrainConfig,
) -> Result<PreparedScene> {
    let features = render_features(scene, &spec.feature_config(noise_level))?;
    let boxes: Vec<BBox> = anchors.boxes().copied().collect();
    let gt = scene.boxes();
    let table = IouTable::new(&boxes, &gt);
    let bags = build_bags_from_table(&table, cfg.bag_size);
    for w in empty_bag_warnings(&bags) {
        log::warn!("scene {}: {w}", scene.id);
    }
    let assignment = assign_baseline_from_table(&table, cfg.positive_iou, cfg.negative_iou);
    let baseline_positives = assignment
        .positives()
        .map(|(a, o)| PositiveTerm {
            anchor: a,
            class_id: scene.objects[o].class_id,
            target: encode_box(&boxes[a], &gt[o]),
        })
        .collect();
    Ok(PreparedScene {
        scene: scene.clone(),
        features,
        bags,
        mal_negatives: mal_negatives_from_table(&table, cfg.negative_iou),
        baseline_positives,
        baseline_negatives: assignment.negatives().collect(),
    })
}

/// Per-scene outcome of one training pass, before the batch merge.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneStep {
    pub grads: ScorerParams,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub positives: usize,
    /// Σ over bags of the selected count, and the bag count.
    pub selected: usize,
    pub bags: usize,
    pub selected_f_sum: f64,
}

pub struct TrainContext<'a> {
    pub cfg: &'a TrainConfig,
    pub anchors: &'a AnchorSet,
}

fn diverged(t: usize, scene: &Scene, message: impl Into<String>) -> Error {
    Error::Diverged {
        iteration: t,
        scene: scene.id,
        message: message.into(),
    }
}

/// One MAL pass over a scene: depress, forward, score bags, select, loss, backward.
pub fn mal_scene_step(
    ctx: &TrainContext<'_>,
    scene: &PreparedScene,
    params: &ScorerParams,
    t: usize,
    lambda: f64,
) -> Result<SceneStep> {
    let cfg = ctx.cfg;
    let features = if cfg.depression.variant == DepressionVariant::None {
        scene.features.clone()
    } else {
        depress_features(&scene.features, depression_fraction(lambda, &cfg.depression)?)?
    };
    let (pred, cache) = forward(&features, params)?;
    let mut positives = Vec::new();
    let (mut selected, mut bags, mut f_sum) = (0usize, 0usize, 0.0);
    for bag in scene.bags.iter().filter(|b| !b.is_empty()) {
        let obj = &scene.scene.objects[bag.object_index];
        let mut conf = Vec::with_capacity(bag.len());
        for &a in &bag.anchor_indices {
            let anchor = &ctx.anchors.anchors[a].bbox;
            let decoded = decode_box_clamped(anchor, &pred.deltas_of(a), cfg.max_log_delta)
                .map_err(|e| diverged(t, &scene.scene, e.to_string()))?;
            conf.push(joint_score(pred.prob(a, obj.class_id), decoded.iou(&obj.bbox), cfg.loss.beta));
        }
        let count = strategy_count(cfg.selection, lambda, bag.len())?;
        let chosen = select_anchors(bag, &conf, count)?;
        for (j, &a) in bag.anchor_indices.iter().enumerate() {
            if chosen.contains(&a) {
                f_sum += conf[j];
            }
        }
        for a in chosen {
            positives.push(PositiveTerm {
                anchor: a,
                class_id: obj.class_id,
                target: encode_box(&ctx.anchors.anchors[a].bbox, &obj.bbox),
            });
        }
        selected += count;
        bags += 1;
    }
    let loss = detection_loss(&positives, &scene.mal_negatives, &pred.heads(), &cfg.loss)?;
    finish_step(params, &cache, loss, t, &scene.scene, selected, bags, f_sum)
}

/// One fixed-assignment pass: plain features, IoU-threshold positives and negatives.
pub fn baseline_scene_step(
    ctx: &TrainContext<'_>,
    scene: &PreparedScene,
    params: &ScorerParams,
    t: usize,
) -> Result<SceneStep> {
    let (pred, cache) = forward(&scene.features, params)?;
    let loss = detection_loss(
        &scene.baseline_positives,
        &scene.baseline_negatives,
        &pred.heads(),
        &ctx.cfg.loss,
    )?;
    let n = scene.baseline_positives.len();
    finish_step(params, &cache, loss, t, &scene.scene, n, 0, 0.0)
}

#[allow(clippy::too_many_arguments)]
fn finish_step(
    params: &ScorerParams,
    cache: &crate::model::ForwardCache,
    loss: crate::losses::LossOutput,
    t: usize,
    scene: &Scene,
    selected: usize,
    bags: usize,
    selected_f_sum: f64,
) -> Result<SceneStep> {
    if !loss.total.is_finite() {
        return Err(diverged(t, scene, format!("loss {}", loss.total)));
    }
    let grads = backward(params, cache, &loss.grad_logits, &loss.grad_deltas)?;
    if !grads.is_finite() {
        return Err(diverged(t, scene, "non-finite gradient"));
    }
    Ok(SceneStep {
        grads,
        loss: loss.total,
        cls: loss.cls,
        reg: loss.reg,
        positives: loss.positives,
        selected,
        bags,
        selected_f_sum,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub lambda: f64,
    pub depression: f64,
    pub learning_rate: f64,
    /// Mean selected anchors per bag (MAL) or mean positives per scene (baseline).
    pub mean_selected: f64,
    pub mean_selected_f: f64,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub positives: usize,
}

impl fmt::Display for IterationMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} lambda={:.6} psi={:.6} lr={:.8} selected={:.4} mean_f={:.6} loss={:.9} cls={:.9} reg={:.9} positives={}",
            self.iteration,
            self.lambda,
            self.depression,
            self.learning_rate,
            self.mean_selected,
            self.mean_selected_f,
            self.loss,
            self.cls,
            self.reg,
            self.positives
        )
    }
}

impl IterationMetrics {
    /// Parses one log line written by `Display`.
    pub fn parse(line: &str) -> Result<Self> {
        let mut m = IterationMetrics {
            iteration: 0,
            lambda: 0.0,
            depression: 0.0,
            learning_rate: 0.0,
            mean_selected: 0.0,
            mean_selected_f: 0.0,
            loss: 0.0,
            cls: 0.0,
            reg: 0.0,
            positives: 0,
        };
        let mut seen = 0;
        for field in line.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("bad log field '{field}'")))?;
            let num = |v: &str| -> Result<f64> {
                v.parse().map_err(|_| Error::InvalidArgument(format!("bad number '{v}' for {k}")))
            };
            let int = |v: &str| -> Result<usize> {
                v.parse().map_err(|_| Error::InvalidArgument(format!("bad integer '{v}' for {k}")))
            };
            match k {
                "iter" => m.iteration = int(v)?,
                "lambda" => m.lambda = num(v)?,
                "psi" => m.depression = num(v)?,
                "lr" => m.learning_rate = num(v)?,
                "selected" => m.mean_selected = num(v)?,
                "mean_f" => m.mean_selected_f = num(v)?,
                "loss" => m.loss = num(v)?,
                "cls" => m.cls = num(v)?,
                "reg" => m.reg = num(v)?,
                "positives" => m.positives = int(v)?,
                _ => return Err(Error::InvalidArgument(format!("unknown log key '{k}'"))),
            }
            seen += 1;
        }
        if seen != 10 {
            return Err(Error::InvalidArgument(format!("log line has {seen} of 10 fields")));
        }
        Ok(m)
    }
}

fn merge_batch(
    cfg: &TrainConfig,
    state: &mut TrainState,
    params: &mut ScorerParams,
    steps: Vec<SceneStep>,
    lambda: f64,
    depression: f64,
) -> Result<IterationMetrics> {
    let n = steps.len() as f64;
    let mut grads = ScorerParams::zeros(params.shape);
    let (mut loss, mut cls, mut reg, mut positives) = (0.0, 0.0, 0.0, 0);
    let (mut selected, mut bags, mut f_sum) = (0usize, 0usize, 0.0);
    for s in &steps {
        grads.add_assign(&s.grads);
        loss += s.loss;
        cls += s.cls;
        reg += s.reg;
        positives += s.positives;
        selected += s.selected;
        bags += s.bags;
        f_sum += s.selected_f_sum;
    }
    let lr = cfg.learning_rate_at(state.t);
    state.optimizer.step(params, &grads, lr)?;
    let metrics = IterationMetrics {
        iteration: state.t,
        lambda,
        depression,
        learning_rate: lr,
        mean_selected: if bags > 0 { selected as f64 / bags as f64 } else { selected as f64 / n },
        mean_selected_f: if selected > 0 && bags > 0 { f_sum / selected as f64 } else { 0.0 },
        loss: loss / n,
        cls: cls / n,
        reg: reg / n,
        positives,
    };
    state.t += 1;
    Ok(metrics)
}

fn check_state(state: &TrainState, batch: &[&PreparedScene]) -> Result<()> {
    if state.t >= state.total {
        return Err(Error::InvalidArgument(format!(
            "iteration {} past total {}",
            state.t, state.total
        )));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(())
}

/// One MAL update: per-scene steps in parallel, ordered gradient merge, one SGD step.
pub fn train_iteration(
    ctx: &TrainContext<'_>,
    state: &mut TrainState,
    batch: &[&PreparedScene],
    params: &mut ScorerParams,
) -> Result<IterationMetrics> {
    check_state(state, batch)?;
    let lambda = state.lambda();
    let depression = depression_fraction(lambda, &ctx.cfg.depression)?;
    let t = state.t;
    let frozen: &ScorerParams = params;
    let steps = batch
        .par_iter()
        .map(|s| mal_scene_step(ctx, s, frozen, t, lambda))
        .collect::<Result<Vec<_>>>()?;
    merge_batch(ctx.cfg, state, params, steps, lambda, depression)
}

/// The fixed-assignment control arm with the same merge and update.
pub fn train_baseline_iteration(
    ctx: &TrainContext<'_>,
    state: &mut TrainState,
    batch: &[&PreparedScene],
    params: &mut ScorerParams,
) -> Result<IterationMetrics> {
    check_state(state, batch)?;
    let lambda = state.lambda();
    let t = state.t;
    let frozen: &ScorerParams = params;
    let steps = batch
        .par_iter()
        .map(|s| baseline_scene_step(ctx, s, frozen, t))
        .collect::<Result<Vec<_>>>()?;
    merge_batch(ctx.cfg, state, params, steps, lambda, 0.0)
}

/// Full training run over a dataset's train split.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub method: Method,
    pub spec: ModelSpec,
    pub anchors: AnchorSet,
    pub scenes: Vec<PreparedScene>,
    pub params: ScorerParams,
    pub state: TrainState,
    epoch: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    pub fn new(dataset: &Dataset, scenes: &[Scene], method: Method, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if scenes.is_empty() {
            return Err(Error::InvalidArgument("no training scenes".into()));
        }
        let spec = cfg.model_spec(dataset);
        spec.validate()?;
        let anchors = generate_anchors(&spec.grid)?;
        let prepared = scenes
            .par_iter()
            .map(|s| prepare_scene(s, &spec, &anchors, dataset.noise_level, &cfg))
            .collect::<Result<Vec<_>>>()?;
        let params = ScorerParams::init(spec.shape, derive_seed(cfg.seed, 1), cfg.init_prior, cfg.hidden_init_scale);
        let state = TrainState {
            t: 0,
            total: cfg.iterations,
            seed: cfg.seed,
            optimizer: Sgd::new(spec.shape, cfg.momentum, cfg.weight_decay),
        };
        Ok(Trainer {
            cfg,
            method,
            spec,
            anchors,
            scenes: prepared,
            params,
            state,
            epoch: None,
        })
    }

    pub fn is_done(&self) -> bool {
        self.state.t >= self.state.total
    }

    /// Scene indices for iteration `t`: consecutive slices of seeded per-epoch permutations.
    fn batch_indices(&mut self, t: usize) -> Vec<usize> {
        let n = self.scenes.len();
        let b = self.cfg.batch_size;
        (0..b)
            .map(|j| {
                let pos = t * b + j;
                let epoch = pos / n;
                if self.epoch.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut perm: Vec<usize> = (0..n).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, 1_000_000 + epoch as u64));
                    perm.shuffle(&mut rng);
                    self.epoch = Some((epoch, perm));
                }
                self.epoch.as_ref().map(|(_, p)| p[pos % n]).unwrap_or(0)
            })
            .collect()
    }

    pub fn step(&mut self) -> Result<IterationMetrics> {
        let idx = self.batch_indices(self.state.t);
        let batch: Vec<&PreparedScene> = idx.iter().map(|&i| &self.scenes[i]).collect();
        let ctx = TrainContext {
            cfg: &self.cfg,
            anchors: &self.anchors,
        };
        match self.method {
            Method::Mal => train_iteration(&ctx, &mut self.state, &batch, &mut self.params),
            Method::Baseline => train_baseline_iteration(&ctx, &mut self.state, &batch, &mut self.params),
        }
    }

    /// Runs the remaining iterations, writing one metrics line per iteration.
    pub fn run(&mut self, log: &mut dyn Write) -> Result<Vec<IterationMetrics>> {
        let mut all = Vec::with_capacity(self.state.total - self.state.t);
        while !self.is_done() {
            let m = self.step()?;
            writeln!(log, "{m}").map_err(|e| Error::io("metrics log", e))?;
            all.push(m);
        }
        Ok(all)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.spec.clone(),
            params: self.params.clone(),
        }
    }
}
