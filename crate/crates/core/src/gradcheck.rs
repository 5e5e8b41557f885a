//! Central finite-difference checks of the analytic loss and scorer gradients.
//!
//! Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
//! A coordinate is skipped when the perturbation `±step` changes a branch:
//! the smooth-L1 quadratic/linear switch or the probability clamp.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{
    detection_loss, focal_loss, focal_loss_grad, focal_loss_logit, sigmoid, smooth_l1, smooth_l1_grad, LossConfig,
    PositiveTerm, PROB_EPS,
};
use crate::model::{backward, forward, FeatureLevel, FeatureMap, ModelShape, ScorerParams, PARAM_GROUPS};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseKind {
    Focal,
    SmoothL1,
    Detection,
}

/// Outcome of one randomized instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub kind: CaseKind,
    pub seed: u64,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    /// Parameter group names that had at least one checked coordinate.
    pub groups: Vec<&'static str>,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= FD_TOLERANCE
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

fn in_clamp(p: f64) -> bool {
    !(PROB_EPS..=1.0 - PROB_EPS).contains(&p)
}

/// Focal loss w.r.t. the probability and w.r.t. the logit, both labels.
pub fn focal_case(seed: u64) -> CaseReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LossConfig {
        gamma_focal: rng.random_range(0.0..3.0),
        alpha_focal: rng.random_range(0.05..0.95),
        ..LossConfig::default()
    };
    let mut report = CaseReport {
        kind: CaseKind::Focal,
        seed,
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        groups: Vec::new(),
    };
    for positive in [true, false] {
        let z: f64 = rng.random_range(-8.0..8.0);
        let a = focal_loss_logit(z, positive, &cfg).1;
        let n = central(|v| focal_loss_logit(v, positive, &cfg).0, z);
        if in_clamp(sigmoid(z - FD_STEP)) || in_clamp(sigmoid(z + FD_STEP)) {
            report.skipped += 1;
        } else {
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err(a, n));
        }
        let p: f64 = rng.random_range(0.001..0.999);
        let a = focal_loss_grad(p, positive, &cfg).unwrap_or(f64::NAN);
        let n = central(|v| focal_loss(v, positive, &cfg).unwrap_or(f64::NAN), p);
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(rel_err(a, n));
    }
    report
}

pub fn smooth_l1_case(seed: u64) -> CaseReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta = rng.random_range(0.05..1.0);
    let target: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    // half the coordinates land in the quadratic zone
    let pred: [f64; 4] = std::array::from_fn(|i| {
        let spread = if i % 2 == 0 { delta } else { 3.0 };
        target[i] + rng.random_range(-spread..spread)
    });
    let grad = smooth_l1_grad(&pred, &target, delta);
    let mut report = CaseReport {
        kind: CaseKind::SmoothL1,
        seed,
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        groups: Vec::new(),
    };
    for i in 0..4 {
        let d = (pred[i] - target[i]).abs();
        if (d - delta).abs() <= FD_STEP {
            report.skipped += 1;
            continue;
        }
        let n = central(
            |v| {
                let mut p = pred;
                p[i] = v;
                smooth_l1(&p, &target, delta)
            },
            pred[i],
        );
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(rel_err(grad[i], n));
    }
    report
}

/// A randomized small scorer problem: features, parameters and supervision.
#[derive(Debug, Clone)]
pub struct DetectionProblem {
    pub features: FeatureMap,
    pub params: ScorerParams,
    pub positives: Vec<PositiveTerm>,
    pub negatives: Vec<usize>,
    pub loss: LossConfig,
}

impl DetectionProblem {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = rng.random_range(2..6);
        let shape = ModelShape {
            in_channels: channels,
            hidden: rng.random_range(2..6),
            anchors_per_cell: rng.random_range(1..4),
            num_classes: rng.random_range(1..4),
            input_gain: rng.random_range(0.5..2.0),
        };
        let dims = [(rng.random_range(1..4), rng.random_range(1..4)), (1, rng.random_range(1..3))];
        let levels = dims
            .iter()
            .map(|&(h, w)| {
                let mut l = FeatureLevel::zeros(channels, h, w);
                l.values.iter_mut().for_each(|v| *v = rng.random_range(-1.5..1.5));
                l
            })
            .collect();
        let mut params = ScorerParams::init(shape, rng.random(), 0.3, 1.0);
        for g in params.groups_mut() {
            g.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
        let cells: usize = dims.iter().map(|(h, w)| h * w).sum();
        let anchors = cells * shape.anchors_per_cell;
        let mut order: Vec<usize> = (0..anchors).collect();
        order.shuffle(&mut rng);
        let n_pos = rng.random_range(1..=anchors.min(3));
        let positives = order[..n_pos]
            .iter()
            .map(|&a| PositiveTerm {
                anchor: a,
                class_id: rng.random_range(0..shape.num_classes),
                target: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            })
            .collect();
        let negatives = order[n_pos..].iter().copied().filter(|_| rng.random_bool(0.7)).collect();
        let loss = LossConfig {
            smooth_l1_delta: rng.random_range(0.05..0.5),
            ..LossConfig::default()
        };
        DetectionProblem {
            features: FeatureMap { levels },
            params,
            positives,
            negatives,
            loss,
        }
    }

    /// Total loss and a branch signature (smooth-L1 zones, clamped probabilities).
    pub fn evaluate(&self, params: &ScorerParams) -> Result<(f64, Vec<bool>)> {
        let (pred, _) = forward(&self.features, params)?;
        let out = detection_loss(&self.positives, &self.negatives, &pred.heads(), &self.loss)?;
        let mut sig: Vec<bool> = pred.probs.iter().map(|&p| in_clamp(p)).collect();
        for t in &self.positives {
            let d = pred.deltas_of(t.anchor);
            sig.extend((0..4).map(|i| (d[i] - t.target[i]).abs() < self.loss.smooth_l1_delta));
        }
        Ok((out.total, sig))
    }

    pub fn analytic_gradient(&self) -> Result<ScorerParams> {
        let (pred, cache) = forward(&self.features, &self.params)?;
        let out = detection_loss(&self.positives, &self.negatives, &pred.heads(), &self.loss)?;
        backward(&self.params, &cache, &out.grad_logits, &out.grad_deltas)
    }
}

/// Full detection loss through the scorer; up to `per_group` coordinates per parameter group.
pub fn detection_case(seed: u64, per_group: usize) -> Result<CaseReport> {
    let problem = DetectionProblem::random(seed);
    let grads = problem.analytic_gradient()?;
    let (_, base_sig) = problem.evaluate(&problem.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut report = CaseReport {
        kind: CaseKind::Detection,
        seed,
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        groups: Vec::new(),
    };
    for (gi, name) in PARAM_GROUPS.iter().enumerate() {
        let len = grads.groups()[gi].len();
        let picks: Vec<usize> = if len <= per_group {
            (0..len).collect()
        } else {
            (0..per_group).map(|_| rng.random_range(0..len)).collect()
        };
        let mut any = false;
        for idx in picks {
            let mut plus = problem.params.clone();
            plus.groups_mut()[gi][idx] += FD_STEP;
            let mut minus = problem.params.clone();
            minus.groups_mut()[gi][idx] -= FD_STEP;
            let (lp, sp) = problem.evaluate(&plus)?;
            let (lm, sm) = problem.evaluate(&minus)?;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err(grads.groups()[gi][idx], numeric));
            any = true;
        }
        if any {
            report.groups.push(name);
        }
    }
    Ok(report)
}
