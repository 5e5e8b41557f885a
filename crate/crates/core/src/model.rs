//! Scene rendering and the hand-differentiated scorer.
//!
//! Rendering stands in for a backbone: each object paints a separable
//! raised-cosine bump over its box into its class channel on every pyramid
//! level, weighted by how well its size matches the level's anchors. The
//! cell's dominant object also writes its normalized center offset and log
//! size into four geometry channels. Seeded noise channels follow.
//!
//! Channel layout per level, `K` classes and `n` noise channels:
//! `[class_0 .. class_{K-1}, objectness, dx, dy, log_w, log_h, noise_0 .. noise_{n-1}]`.
//!
//! The scorer is shared across levels: per cell, `hidden = softplus(W_h x + b_h) - ln 2`,
//! then linear classification and regression heads emit `A*K` logits and
//! `4*A` deltas for the cell's `A` anchor shapes.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnchorGridConfig, PyramidLevel};
use crate::losses::sigmoid;
use crate::scenes::{derive_seed, Scene};

pub const GEOMETRY_CHANNELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub noise_channels: usize,
    /// Width, in octaves, of the size-to-level match weight.
    pub level_sigma: f64,
    /// Multiplier on the offset and log-size channels.
    pub geometry_scale: f64,
    /// Overall feature units; the scorer multiplies its input by `1 / amplitude`.
    pub amplitude: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            noise_channels: 2,
            level_sigma: 1.0,
            geometry_scale: 1.0,
            amplitude: 0.6,
        }
    }
}

/// Everything needed to turn a scene into features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub grid: AnchorGridConfig,
    pub render: RenderConfig,
    pub num_classes: usize,
    pub noise_level: f64,
}

impl FeatureConfig {
    pub fn channels(&self) -> usize {
        self.num_classes + GEOMETRY_CHANNELS + self.render.noise_channels
    }
}

/// One pyramid level, `channels x height x width`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureLevel {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureLevel {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.values[(c * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f64) {
        self.values[(c * self.height + row) * self.width + col] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.cells();
        &self.values[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub levels: Vec<FeatureLevel>,
}

fn raised_cosine(d: f64, half: f64) -> f64 {
    if d.abs() >= half {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * d / half).cos())
    }
}

/// Geometric-mean anchor side at a level; the reference length for normalization.
fn level_reference(level: &PyramidLevel, scales: &[f64]) -> f64 {
    let mean_log = scales.iter().map(|s| s.ln()).sum::<f64>() / scales.len() as f64;
    level.base_size * mean_log.exp()
}

pub fn render_features(scene: &Scene, cfg: &FeatureConfig) -> Result<FeatureMap> {
    cfg.grid.validate()?;
    if scene.image_width != cfg.grid.image_width || scene.image_height != cfg.grid.image_height {
        return Err(Error::ShapeMismatch(format!(
            "scene {}x{} vs grid {}x{}",
            scene.image_width, scene.image_height, cfg.grid.image_width, cfg.grid.image_height
        )));
    }
    if let Some(o) = scene.objects.iter().find(|o| o.class_id >= cfg.num_classes) {
        return Err(Error::ShapeMismatch(format!(
            "class id {} with {} classes",
            o.class_id, cfg.num_classes
        )));
    }
    let k = cfg.num_classes;
    let channels = cfg.channels();
    let sigma = cfg.render.level_sigma.max(1e-6);
    let mut levels = Vec::with_capacity(cfg.grid.levels.len());
    for (li, level) in cfg.grid.levels.iter().enumerate() {
        let (h, w) = cfg.grid.level_dims(li);
        let stride = level.stride as f64;
        let reference = level_reference(level, &cfg.grid.octave_scales);
        let mut fl = FeatureLevel::zeros(channels, h, w);
        let matches: Vec<f64> = scene
            .objects
            .iter()
            .map(|o| {
                let octaves = (o.bbox.area().sqrt() / reference).log2() / sigma;
                (-0.5 * octaves * octaves).exp()
            })
            .collect();
        for row in 0..h {
            let cy = (row as f64 + 0.5) * stride;
            for col in 0..w {
                let cx = (col as f64 + 0.5) * stride;
                let mut dominant: Option<(usize, f64)> = None;
                for (oi, o) in scene.objects.iter().enumerate() {
                    let (ox, oy) = o.bbox.center();
                    let hx = (0.5 * o.bbox.width()).max(0.6 * stride);
                    let hy = (0.5 * o.bbox.height()).max(0.6 * stride);
                    let q = matches[oi] * raised_cosine(cx - ox, hx) * raised_cosine(cy - oy, hy);
                    if q <= 0.0 {
                        continue;
                    }
                    let prev = fl.get(o.class_id, row, col);
                    fl.set(o.class_id, row, col, prev + q);
                    if dominant.is_none_or(|(_, dq)| q > dq) {
                        dominant = Some((oi, q));
                    }
                }
                if let Some((oi, q)) = dominant {
                    let b = &scene.objects[oi].bbox;
                    let (ox, oy) = b.center();
                    fl.set(k, row, col, q);
                    let g = cfg.render.geometry_scale;
                    fl.set(k + 1, row, col, g * (ox - cx) / reference);
                    fl.set(k + 2, row, col, g * (oy - cy) / reference);
                    fl.set(k + 3, row, col, g * (b.width() / reference).ln());
                    fl.set(k + 4, row, col, g * (b.height() / reference).ln());
                }
            }
        }
        if cfg.noise_level > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scene.seed, 1000 + li as u64));
            for row in 0..h {
                for col in 0..w {
                    let jitter = fl.get(k, row, col) > 0.0;
                    for c in k + 1..k + GEOMETRY_CHANNELS {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        if jitter {
                            let v = fl.get(c, row, col);
                            fl.set(c, row, col, v + cfg.render.geometry_scale * cfg.noise_level * z);
                        }
                    }
                    for c in k + GEOMETRY_CHANNELS..channels {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        fl.set(c, row, col, cfg.noise_level * z);
                    }
                }
            }
        }
        if cfg.render.amplitude != 1.0 {
            fl.values.iter_mut().for_each(|v| *v *= cfg.render.amplitude);
        }
        levels.push(fl);
    }
    Ok(FeatureMap { levels })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelShape {
    pub in_channels: usize,
    pub hidden: usize,
    pub anchors_per_cell: usize,
    pub num_classes: usize,
    /// Fixed multiplier applied to every input before the hidden layer.
    pub input_gain: f64,
}

impl ModelShape {
    pub fn cls_outputs(&self) -> usize {
        self.anchors_per_cell * self.num_classes
    }

    pub fn reg_outputs(&self) -> usize {
        self.anchors_per_cell * 4
    }
}

/// Learnable scorer weights, all row-major. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    pub shape: ModelShape,
    /// `hidden x in_channels`
    pub hidden_w: Vec<f64>,
    pub hidden_b: Vec<f64>,
    /// `(anchors_per_cell * num_classes) x hidden`
    pub cls_w: Vec<f64>,
    pub cls_b: Vec<f64>,
    /// `(anchors_per_cell * 4) x hidden`
    pub reg_w: Vec<f64>,
    pub reg_b: Vec<f64>,
}

pub const PARAM_GROUPS: [&str; 6] = ["hidden_w", "hidden_b", "cls_w", "cls_b", "reg_w", "reg_b"];

impl ScorerParams {
    pub fn zeros(shape: ModelShape) -> Self {
        let (c, d) = (shape.in_channels, shape.hidden);
        ScorerParams {
            shape,
            hidden_w: vec![0.0; d * c],
            hidden_b: vec![0.0; d],
            cls_w: vec![0.0; shape.cls_outputs() * d],
            cls_b: vec![0.0; shape.cls_outputs()],
            reg_w: vec![0.0; shape.reg_outputs() * d],
            reg_b: vec![0.0; shape.reg_outputs()],
        }
    }

    /// Seeded Gaussian init. Hidden weights have std `hidden_scale / sqrt(in_channels)`;
    /// classification biases start at the logit of `prior`.
    pub fn init(shape: ModelShape, seed: u64, prior: f64, hidden_scale: f64) -> Self {
        let mut p = Self::zeros(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden_std = hidden_scale / (shape.in_channels.max(1) as f64).sqrt();
        let mut normal = |std: f64| -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            std * z
        };
        p.hidden_w.iter_mut().for_each(|v| *v = normal(hidden_std));
        p.cls_w.iter_mut().for_each(|v| *v = normal(0.01));
        p.reg_w.iter_mut().for_each(|v| *v = normal(0.01));
        let bias = -((1.0 - prior) / prior).ln();
        p.cls_b.iter_mut().for_each(|v| *v = bias);
        p
    }

    pub fn groups(&self) -> [&Vec<f64>; 6] {
        [&self.hidden_w, &self.hidden_b, &self.cls_w, &self.cls_b, &self.reg_w, &self.reg_b]
    }

    pub fn groups_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.hidden_w,
            &mut self.hidden_b,
            &mut self.cls_w,
            &mut self.cls_b,
            &mut self.reg_w,
            &mut self.reg_b,
        ]
    }

    pub fn num_values(&self) -> usize {
        self.groups().iter().map(|g| g.len()).sum()
    }

    pub fn add_assign(&mut self, other: &ScorerParams) {
        for (a, b) in self.groups_mut().into_iter().zip(other.groups()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.groups_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Per-anchor outputs in anchor order.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub num_classes: usize,
    /// `anchors x classes`
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// `anchors x 4`
    pub deltas: Vec<f64>,
}

impl Predictions {
    pub fn num_anchors(&self) -> usize {
        self.deltas.len() / 4
    }

    pub fn prob(&self, anchor: usize, class_id: usize) -> f64 {
        self.probs[anchor * self.num_classes + class_id]
    }

    pub fn deltas_of(&self, anchor: usize) -> [f64; 4] {
        let d = &self.deltas[4 * anchor..4 * anchor + 4];
        [d[0], d[1], d[2], d[3]]
    }

    pub fn heads(&self) -> crate::losses::HeadOutputs<'_> {
        crate::losses::HeadOutputs {
            num_classes: self.num_classes,
            logits: &self.logits,
            deltas: &self.deltas,
        }
    }
}

/// Intermediates kept by [`forward`] for [`backward`]; rows are cells in anchor order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardCache {
    pub cells: usize,
    inputs: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
}

/// `softplus(x) - ln 2`: smooth, zero at zero, derivative `sigmoid(x)`.
fn shifted_softplus(x: f64) -> f64 {
    let sp = if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    };
    sp - std::f64::consts::LN_2
}

fn matvec_add(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(n).zip(b)) {
        *o = bias + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

pub fn forward(features: &FeatureMap, params: &ScorerParams) -> Result<(Predictions, ForwardCache)> {
    let shape = params.shape;
    let (c, d) = (shape.in_channels, shape.hidden);
    let (nc, nr) = (shape.cls_outputs(), shape.reg_outputs());
    if let Some(l) = features.levels.iter().find(|l| l.channels != c) {
        return Err(Error::ShapeMismatch(format!(
            "feature level has {} channels, scorer expects {c}",
            l.channels
        )));
    }
    let cells: usize = features.levels.iter().map(|l| l.cells()).sum();
    let mut cache = ForwardCache {
        cells,
        inputs: Vec::with_capacity(cells * c),
        pre: vec![0.0; cells * d],
        hidden: vec![0.0; cells * d],
    };
    let mut logits = vec![0.0; cells * nc];
    let mut deltas = vec![0.0; cells * nr];
    let mut x = vec![0.0; c];
    let mut cell = 0;
    for level in &features.levels {
        let n = level.cells();
        for pos in 0..n {
            for (ch, xv) in x.iter_mut().enumerate() {
                *xv = shape.input_gain * level.values[ch * n + pos];
            }
            cache.inputs.extend_from_slice(&x);
            let pre = &mut cache.pre[cell * d..(cell + 1) * d];
            matvec_add(&params.hidden_w, &params.hidden_b, &x, pre);
            let hid = &mut cache.hidden[cell * d..(cell + 1) * d];
            for (h, p) in hid.iter_mut().zip(pre.iter()) {
                *h = shifted_softplus(*p);
            }
            matvec_add(&params.cls_w, &params.cls_b, hid, &mut logits[cell * nc..(cell + 1) * nc]);
            matvec_add(&params.reg_w, &params.reg_b, hid, &mut deltas[cell * nr..(cell + 1) * nr]);
            cell += 1;
        }
    }
    let probs = logits.iter().map(|&z| sigmoid(z)).collect();
    Ok((
        Predictions {
            num_classes: shape.num_classes,
            logits,
            probs,
            deltas,
        },
        cache,
    ))
}

/// Parameter gradients from gradients w.r.t. logits (`anchors x classes`) and deltas (`anchors x 4`).
pub fn backward(
    params: &ScorerParams,
    cache: &ForwardCache,
    grad_logits: &[f64],
    grad_deltas: &[f64],
) -> Result<ScorerParams> {
    let shape = params.shape;
    let (c, d) = (shape.in_channels, shape.hidden);
    let (nc, nr) = (shape.cls_outputs(), shape.reg_outputs());
    if cache.cells == 0 || cache.inputs.len() != cache.cells * c || cache.pre.len() != cache.cells * d {
        return Err(Error::MissingCache);
    }
    if grad_logits.len() != cache.cells * nc || grad_deltas.len() != cache.cells * nr {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradients ({}, {}) for {} cells",
            grad_logits.len(),
            grad_deltas.len(),
            cache.cells
        )));
    }
    let mut g = ScorerParams::zeros(shape);
    let mut dh = vec![0.0; d];
    for cell in 0..cache.cells {
        let gl = &grad_logits[cell * nc..(cell + 1) * nc];
        let gd = &grad_deltas[cell * nr..(cell + 1) * nr];
        if gl.iter().chain(gd).all(|v| *v == 0.0) {
            continue;
        }
        let hid = &cache.hidden[cell * d..(cell + 1) * d];
        let pre = &cache.pre[cell * d..(cell + 1) * d];
        let x = &cache.inputs[cell * c..(cell + 1) * c];
        dh.iter_mut().for_each(|v| *v = 0.0);
        for (o, &go) in gl.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            g.cls_b[o] += go;
            let wrow = &params.cls_w[o * d..(o + 1) * d];
            let grow = &mut g.cls_w[o * d..(o + 1) * d];
            for j in 0..d {
                grow[j] += go * hid[j];
                dh[j] += go * wrow[j];
            }
        }
        for (o, &go) in gd.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            g.reg_b[o] += go;
            let wrow = &params.reg_w[o * d..(o + 1) * d];
            let grow = &mut g.reg_w[o * d..(o + 1) * d];
            for j in 0..d {
                grow[j] += go * hid[j];
                dh[j] += go * wrow[j];
            }
        }
        for j in 0..d {
            let dp = dh[j] * sigmoid(pre[j]);
            if dp == 0.0 {
                continue;
            }
            g.hidden_b[j] += dp;
            let grow = &mut g.hidden_w[j * c..(j + 1) * c];
            for (gw, xv) in grow.iter_mut().zip(x) {
                *gw += dp * xv;
            }
        }
    }
    Ok(g)
}

/// Momentum SGD with L2 weight decay folded into the velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: ScorerParams,
}

impl Sgd {
    pub fn new(shape: ModelShape, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: ScorerParams::zeros(shape),
        }
    }

    /// `v = momentum * v + grad + weight_decay * param; param -= lr * v`.
    pub fn step(&mut self, params: &mut ScorerParams, grads: &ScorerParams, lr: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("parameter gradients".into()));
        }
        if grads.shape != params.shape || self.velocity.shape != params.shape {
            return Err(Error::ShapeMismatch("optimizer / parameter shapes differ".into()));
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((p, g), v) in params
            .groups_mut()
            .into_iter()
            .zip(grads.groups())
            .zip(self.velocity.groups_mut())
        {
            for i in 0..p.len() {
                v[i] = mu * v[i] + g[i] + wd * p[i];
                p[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}

/// Everything a checkpoint carries besides the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub grid: AnchorGridConfig,
    pub render: RenderConfig,
    pub shape: ModelShape,
}

impl ModelSpec {
    pub fn new(grid: AnchorGridConfig, render: RenderConfig, num_classes: usize, hidden: usize) -> Self {
        let shape = ModelShape {
            in_channels: num_classes + GEOMETRY_CHANNELS + render.noise_channels,
            hidden,
            anchors_per_cell: grid.anchors_per_cell(),
            num_classes,
            input_gain: 1.0 / render.amplitude,
        };
        ModelSpec { grid, render, shape }
    }

    pub fn feature_config(&self, noise_level: f64) -> FeatureConfig {
        FeatureConfig {
            grid: self.grid.clone(),
            render: self.render.clone(),
            num_classes: self.shape.num_classes,
            noise_level,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let s = self.shape;
        if s.anchors_per_cell != self.grid.anchors_per_cell()
            || s.in_channels != s.num_classes + GEOMETRY_CHANNELS + self.render.noise_channels
            || s.hidden == 0
            || s.num_classes == 0
            || !(self.render.amplitude > 0.0 && self.render.amplitude.is_finite())
            || s.input_gain != 1.0 / self.render.amplitude
        {
            return Err(Error::Checkpoint(format!("inconsistent model spec {s:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ScorerParams,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MALCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint, little-endian throughout:
///
/// ```text
/// magic "MALCKPT\0" | u32 version
/// u32 num_classes | u32 in_channels | u32 hidden | u32 anchors_per_cell
/// u32 image_width | u32 image_height
/// u32 n_levels    | n_levels x (u32 stride, f64 base_size)
/// u32 n_scales    | n_scales x f64
/// u32 n_ratios    | n_ratios x f64
/// u32 noise_channels | f64 level_sigma | f64 geometry_scale | f64 amplitude
/// 6 x (u64 length, length x f64): hidden_w, hidden_b, cls_w, cls_b, reg_w, reg_b
/// ```
impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let u32le = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
        let f64le = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&v.to_le_bytes());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        u32le(&mut out, CHECKPOINT_VERSION);
        let s = self.spec.shape;
        for v in [s.num_classes, s.in_channels, s.hidden, s.anchors_per_cell] {
            u32le(&mut out, v as u32);
        }
        let g = &self.spec.grid;
        u32le(&mut out, g.image_width);
        u32le(&mut out, g.image_height);
        u32le(&mut out, g.levels.len() as u32);
        for l in &g.levels {
            u32le(&mut out, l.stride);
            f64le(&mut out, l.base_size);
        }
        for list in [&g.octave_scales, &g.aspect_ratios] {
            u32le(&mut out, list.len() as u32);
            for &v in list.iter() {
                f64le(&mut out, v);
            }
        }
        u32le(&mut out, self.spec.render.noise_channels as u32);
        f64le(&mut out, self.spec.render.level_sigma);
        f64le(&mut out, self.spec.render.geometry_scale);
        f64le(&mut out, self.spec.render.amplitude);
        for group in self.params.groups() {
            out.extend_from_slice(&(group.len() as u64).to_le_bytes());
            for &v in group.iter() {
                f64le(&mut out, v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let num_classes = read_u32(&mut r)? as usize;
        let in_channels = read_u32(&mut r)? as usize;
        let hidden = read_u32(&mut r)? as usize;
        let anchors_per_cell = read_u32(&mut r)? as usize;
        let image_width = read_u32(&mut r)?;
        let image_height = read_u32(&mut r)?;
        let n_levels = read_u32(&mut r)? as usize;
        let mut levels = Vec::with_capacity(n_levels.min(64));
        for _ in 0..n_levels {
            let stride = read_u32(&mut r)?;
            let base_size = read_f64(&mut r)?;
            levels.push(PyramidLevel { stride, base_size });
        }
        let mut lists = [Vec::new(), Vec::new()];
        for list in lists.iter_mut() {
            let n = read_u32(&mut r)? as usize;
            for _ in 0..n {
                list.push(read_f64(&mut r)?);
            }
        }
        let [octave_scales, aspect_ratios] = lists;
        let noise_channels = read_u32(&mut r)? as usize;
        let level_sigma = read_f64(&mut r)?;
        let geometry_scale = read_f64(&mut r)?;
        let amplitude = read_f64(&mut r)?;
        let spec = ModelSpec {
            grid: AnchorGridConfig {
                levels,
                octave_scales,
                aspect_ratios,
                image_width,
                image_height,
            },
            render: RenderConfig {
                noise_channels,
                level_sigma,
                geometry_scale,
                amplitude,
            },
            shape: ModelShape {
                in_channels,
                hidden,
                anchors_per_cell,
                num_classes,
                input_gain: 1.0 / amplitude,
            },
        };
        spec.validate()?;
        let mut params = ScorerParams::zeros(spec.shape);
        for (name, group) in PARAM_GROUPS.iter().zip(params.groups_mut()) {
            let n = read_u64(&mut r)? as usize;
            if n != group.len() {
                return Err(Error::Checkpoint(format!(
                    "{name}: {n} values, shape wants {}",
                    group.len()
                )));
            }
            for v in group.iter_mut() {
                *v = read_f64(&mut r)?;
            }
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint { spec, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}
