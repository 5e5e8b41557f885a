//! Focal and smooth-L1 losses, the joint classification/localization
//! confidence, and the combined detection loss with gradients w.r.t. the
//! scorer outputs (class logits and box deltas).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the localization term, both in the joint confidence and the loss.
    pub beta: f64,
    pub alpha_focal: f64,
    pub gamma_focal: f64,
    pub smooth_l1_delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.75,
            alpha_focal: 0.25,
            gamma_focal: 2.0,
            smooth_l1_delta: 1.0 / 9.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta.is_finite()
            && self.beta >= 0.0
            && self.alpha_focal > 0.0
            && self.alpha_focal < 1.0
            && self.gamma_focal.is_finite()
            && self.gamma_focal >= 0.0
            && self.smooth_l1_delta.is_finite()
            && self.smooth_l1_delta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss config {self:?}")))
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_prob(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")))
    }
}

fn focal_parts(p: f64, positive: bool, cfg: &LossConfig) -> (f64, f64) {
    let clamped = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let (pt, alpha_t, sign) = if positive {
        (clamped, cfg.alpha_focal, 1.0)
    } else {
        (1.0 - clamped, 1.0 - cfg.alpha_focal, -1.0)
    };
    let g = cfg.gamma_focal;
    let q = 1.0 - pt;
    let ln_pt = pt.ln();
    let loss = -alpha_t * q.powf(g) * ln_pt;
    let grad_p = if clamped != p {
        0.0
    } else {
        let lead = if g == 0.0 { 0.0 } else { g * q.powf(g - 1.0) * ln_pt };
        sign * alpha_t * (lead - q.powf(g) / pt)
    };
    (loss, grad_p)
}

/// `-alpha_t (1 - p_t)^gamma ln(p_t)`.
pub fn focal_loss(p: f64, positive: bool, cfg: &LossConfig) -> Result<f64> {
    check_prob(p)?;
    Ok(focal_parts(p, positive, cfg).0)
}

/// Derivative of [`focal_loss`] w.r.t. `p`; zero inside the clamp region.
pub fn focal_loss_grad(p: f64, positive: bool, cfg: &LossConfig) -> Result<f64> {
    check_prob(p)?;
    Ok(focal_parts(p, positive, cfg).1)
}

/// Focal loss of `sigmoid(logit)` and its derivative w.r.t. the logit.
pub fn focal_loss_logit(logit: f64, positive: bool, cfg: &LossConfig) -> (f64, f64) {
    let p = sigmoid(logit);
    let (loss, dp) = focal_parts(p, positive, cfg);
    (loss, dp * p * (1.0 - p))
}

pub fn smooth_l1(pred: &[f64; 4], target: &[f64; 4], delta: f64) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| {
            let d = (p - t).abs();
            if d < delta {
                0.5 * d * d / delta
            } else {
                d - 0.5 * delta
            }
        })
        .sum()
}

pub fn smooth_l1_grad(pred: &[f64; 4], target: &[f64; 4], delta: f64) -> [f64; 4] {
    let mut g = [0.0; 4];
    for i in 0..4 {
        let d = pred[i] - target[i];
        g[i] = if d.abs() < delta { d / delta } else { d.signum() };
    }
    g
}

/// `f + beta * g`.
pub fn joint_score(class_prob: f64, localization: f64, beta: f64) -> f64 {
    class_prob + beta * localization
}

/// Joint confidence of an anchor for an object: the predicted probability of
/// the object's class plus `beta` times the IoU of the decoded box with the
/// object's box. Lies in `[0, 1 + beta]`.
pub fn joint_confidence(class_prob: f64, predicted: &BBox, gt: &BBox, beta: f64) -> Result<f64> {
    check_prob(class_prob)?;
    Ok(joint_score(class_prob, predicted.iou(gt), beta))
}

/// One supervised (anchor, object) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveTerm {
    pub anchor: usize,
    pub class_id: usize,
    /// Encoded regression target of the object relative to the anchor.
    pub target: [f64; 4],
}

/// Dense per-anchor scorer outputs the loss reads.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs<'a> {
    pub num_classes: usize,
    /// `anchors x classes`, row-major.
    pub logits: &'a [f64],
    /// `anchors x 4`, row-major.
    pub deltas: &'a [f64],
}

impl HeadOutputs<'_> {
    pub fn num_anchors(&self) -> usize {
        self.deltas.len() / 4
    }

    pub fn deltas_of(&self, anchor: usize) -> [f64; 4] {
        let d = &self.deltas[4 * anchor..4 * anchor + 4];
        [d[0], d[1], d[2], d[3]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub cls: f64,
    /// Unweighted regression sum, normalized; `total = cls + beta * reg`.
    pub reg: f64,
    pub positives: usize,
    /// Set when no positive pair was supplied; the loss then covers negatives only.
    pub no_positives: bool,
    pub grad_logits: Vec<f64>,
    pub grad_deltas: Vec<f64>,
}

/// Detection loss over supervised pairs and background anchors.
///
/// Each positive pair adds `focal(p_class, 1) + beta * smooth_l1`. An
/// anchor that is positive for some classes is trained toward 0 on every
/// other class once. Negative anchors are trained toward 0 on all classes;
/// anchors that also appear as positives are skipped. The sum is divided by
/// `max(1, positives.len())`.
pub fn detection_loss(
    positives: &[PositiveTerm],
    negatives: &[usize],
    out: &HeadOutputs<'_>,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let k = out.num_classes;
    let n = out.num_anchors();
    if out.logits.len() != n * k {
        return Err(Error::ShapeMismatch(format!(
            "{} logits for {n} anchors x {k} classes",
            out.logits.len()
        )));
    }
    let mut grad_logits = vec![0.0; n * k];
    let mut grad_deltas = vec![0.0; n * 4];
    let mut cls = 0.0;
    let mut reg = 0.0;

    // positive class mask per anchor touched by a positive term
    let mut pos_mask: Vec<(usize, Vec<bool>)> = Vec::new();
    let mut slot = std::collections::HashMap::new();
    for t in positives {
        if t.anchor >= n || t.class_id >= k {
            return Err(Error::InvalidArgument(format!(
                "positive term anchor {} class {} out of range",
                t.anchor, t.class_id
            )));
        }
        let s = *slot.entry(t.anchor).or_insert_with(|| {
            pos_mask.push((t.anchor, vec![false; k]));
            pos_mask.len() - 1
        });
        pos_mask[s].1[t.class_id] = true;

        let (l, dz) = focal_loss_logit(out.logits[t.anchor * k + t.class_id], true, cfg);
        cls += l;
        grad_logits[t.anchor * k + t.class_id] += dz;

        let pred = out.deltas_of(t.anchor);
        reg += smooth_l1(&pred, &t.target, cfg.smooth_l1_delta);
        let g = smooth_l1_grad(&pred, &t.target, cfg.smooth_l1_delta);
        for (i, gi) in g.iter().enumerate() {
            grad_deltas[t.anchor * 4 + i] += cfg.beta * gi;
        }
    }
    for (anchor, mask) in &pos_mask {
        for (c, &is_pos) in mask.iter().enumerate() {
            if !is_pos {
                let (l, dz) = focal_loss_logit(out.logits[anchor * k + c], false, cfg);
                cls += l;
                grad_logits[anchor * k + c] += dz;
            }
        }
    }
    for &a in negatives {
        if a >= n {
            return Err(Error::InvalidArgument(format!("negative anchor {a} out of range")));
        }
        if slot.contains_key(&a) {
            continue;
        }
        for c in 0..k {
            let (l, dz) = focal_loss_logit(out.logits[a * k + c], false, cfg);
            cls += l;
            grad_logits[a * k + c] += dz;
        }
    }

    let norm = positives.len().max(1) as f64;
    grad_logits.iter_mut().for_each(|g| *g /= norm);
    grad_deltas.iter_mut().for_each(|g| *g /= norm);
    let cls = cls / norm;
    let reg = reg / norm;
    let total = cls + cfg.beta * reg;
    if !total.is_finite() {
        return Err(Error::NonFinite("detection loss".into()));
    }
    Ok(LossOutput {
        total,
        cls,
        reg,
        positives: positives.len(),
        no_positives: positives.is_empty(),
        grad_logits,
        grad_deltas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn focal_examples() {
        let c = cfg();
        assert!(focal_loss(1.0, true, &c).unwrap() < 1e-15);
        assert!(focal_loss(0.0, false, &c).unwrap() < 1e-15);
        let v = focal_loss(0.5, true, &c).unwrap();
        assert!((v - 0.043_321_698_784_996_6).abs() < 1e-12, "{v}");
        let ce = LossConfig { alpha_focal: 0.5, gamma_focal: 0.0, ..c };
        for p in [0.1f64, 0.3, 0.77] {
            assert!((focal_loss(p, true, &ce).unwrap() - 0.5 * -p.ln()).abs() < 1e-15);
            assert!((focal_loss(p, false, &ce).unwrap() - 0.5 * -(1.0 - p).ln()).abs() < 1e-15);
        }
        assert!(focal_loss(1.5, true, &c).is_err());
        assert!(focal_loss(-0.1, false, &c).is_err());
    }

    #[test]
    fn focal_monotone_in_pt() {
        let c = cfg();
        let mut prev = f64::INFINITY;
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let v = focal_loss(p, true, &c).unwrap();
            assert!(v < prev);
            prev = v;
            assert!(focal_loss_grad(p, true, &c).unwrap() < 0.0);
            assert!(focal_loss_grad(p, false, &c).unwrap() > 0.0);
        }
    }

    #[test]
    fn smooth_l1_examples() {
        let z = [0.0; 4];
        assert_eq!(smooth_l1(&z, &z, 1.0 / 9.0), 0.0);
        let delta = 0.3;
        let at = smooth_l1(&[delta, 0., 0., 0.], &z, delta);
        assert!((at - 0.5 * delta).abs() < 1e-15);
        let below = smooth_l1(&[delta - 1e-12, 0., 0., 0.], &z, delta);
        assert!((below - at).abs() < 1e-11);
        let v = smooth_l1(&[1.0, 0., 0., 0.], &z, 1.0 / 9.0);
        assert!((v - (1.0 - 1.0 / 18.0)).abs() < 1e-15);
    }

    #[test]
    fn joint_confidence_examples() {
        let a = BBox::new(0., 0., 10., 10.).unwrap();
        let far = BBox::new(20., 20., 30., 30.).unwrap();
        assert_eq!(joint_confidence(1.0, &a, &a, 0.75).unwrap(), 1.75);
        assert_eq!(joint_confidence(0.0, &a, &far, 0.75).unwrap(), 0.0);
        assert!((joint_score(0.6, 0.4, 0.75) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn focal_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..100 {
            let c = LossConfig {
                alpha_focal: rng.random_range(0.05..0.95),
                gamma_focal: rng.random_range(0.0..4.0),
                ..cfg()
            };
            let p: f64 = rng.random_range(0.01..0.99);
            let y = rng.random_bool(0.5);
            let fd = (focal_loss(p + h, y, &c).unwrap() - focal_loss(p - h, y, &c).unwrap()) / (2.0 * h);
            let an = focal_loss_grad(p, y, &c).unwrap();
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-8), "p={p} y={y} fd={fd} an={an}");

            let z: f64 = rng.random_range(-6.0..6.0);
            let (_, dz) = focal_loss_logit(z, y, &c);
            let fdz = (focal_loss_logit(z + h, y, &c).0 - focal_loss_logit(z - h, y, &c).0) / (2.0 * h);
            assert!((fdz - dz).abs() <= 1e-4 * dz.abs().max(1e-8), "z={z} fd={fdz} an={dz}");
        }
    }

    #[test]
    fn smooth_l1_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-5;
        let delta = 1.0 / 9.0;
        let mut checked = 0;
        while checked < 100 {
            let pred: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let target: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            if pred.iter().zip(&target).any(|(p, t)| ((p - t).abs() - delta).abs() < 1e-4) {
                continue;
            }
            let g = smooth_l1_grad(&pred, &target, delta);
            for i in 0..4 {
                let mut up = pred;
                let mut dn = pred;
                up[i] += h;
                dn[i] -= h;
                let fd = (smooth_l1(&up, &target, delta) - smooth_l1(&dn, &target, delta)) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1e-8), "fd={fd} an={}", g[i]);
            }
            checked += 1;
        }
    }

    #[test]
    fn perfect_predictions_give_near_zero_loss() {
        // anchors 0,1 positive for class 0 at their targets; 2,3 negative
        let logits = [30.0, -30.0, 30.0, -30.0, -30.0, -30.0, -30.0, -30.0];
        let t = [0.1, -0.2, 0.3, 0.0];
        let mut deltas = vec![0.0; 16];
        deltas[..4].copy_from_slice(&t);
        deltas[4..8].copy_from_slice(&t);
        let out = HeadOutputs { num_classes: 2, logits: &logits, deltas: &deltas };
        let pos = [
            PositiveTerm { anchor: 0, class_id: 0, target: t },
            PositiveTerm { anchor: 1, class_id: 0, target: t },
        ];
        let l = detection_loss(&pos, &[2, 3], &out, &cfg()).unwrap();
        assert!(l.total < 1e-6, "{}", l.total);
    }

    #[test]
    fn single_positive_focal_only() {
        let out = HeadOutputs { num_classes: 1, logits: &[0.0], deltas: &[0.2, 0.1, 0.0, -0.3] };
        let pos = [PositiveTerm { anchor: 0, class_id: 0, target: [0.2, 0.1, 0.0, -0.3] }];
        let l = detection_loss(&pos, &[], &out, &cfg()).unwrap();
        assert!((l.total - 0.043_321_698_784_996_6).abs() < 1e-12);
        assert_eq!(l.reg, 0.0);
    }

    #[test]
    fn beta_scales_only_regression() {
        let logits = [0.3, -1.0, 0.2, 0.5];
        let deltas = [0.5, 0.0, -0.2, 0.1, 0.0, 0.0, 0.0, 0.0];
        let out = HeadOutputs { num_classes: 2, logits: &logits, deltas: &deltas };
        let pos = [PositiveTerm { anchor: 0, class_id: 1, target: [0.0, 0.3, 0.1, 0.1] }];
        let c1 = cfg();
        let c2 = LossConfig { beta: 2.0 * c1.beta, ..c1 };
        let a = detection_loss(&pos, &[1], &out, &c1).unwrap();
        let b = detection_loss(&pos, &[1], &out, &c2).unwrap();
        assert_eq!(a.cls, b.cls);
        assert_eq!(a.reg, b.reg);
        assert!(((b.total - b.cls) - 2.0 * (a.total - a.cls)).abs() < 1e-12);
    }

    #[test]
    fn no_positive_flag_and_range_errors() {
        let out = HeadOutputs { num_classes: 1, logits: &[0.0, 0.0], deltas: &[0.0; 8] };
        let l = detection_loss(&[], &[0, 1], &out, &cfg()).unwrap();
        assert!(l.no_positives && l.total > 0.0);
        assert!(detection_loss(&[], &[5], &out, &cfg()).is_err());
    }

    #[test]
    fn opposite_signed_influence() {
        let c = cfg();
        let logits_for = |z: f64| [z];
        let d = [0.0; 4];
        let pos = [PositiveTerm { anchor: 0, class_id: 0, target: d }];
        let mut prev_pos = f64::INFINITY;
        let mut prev_neg = f64::NEG_INFINITY;
        for i in -40..40 {
            let z = i as f64 * 0.2;
            let lg = logits_for(z);
            let out = HeadOutputs { num_classes: 1, logits: &lg, deltas: &d };
            let lp = detection_loss(&pos, &[], &out, &c).unwrap().total;
            let ln = detection_loss(&[], &[0], &out, &c).unwrap().total;
            assert!(lp <= prev_pos && ln >= prev_neg);
            prev_pos = lp;
            prev_neg = ln;
        }
    }
}
