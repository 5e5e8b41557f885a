//! Inference and detection metrics.
//!
//! Inference is the plain scorer forward on undepressed features, followed
//! by score filtering, decoding, clipping and per-class NMS; training
//! method plays no part in it.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{decode_box_clamped, generate_anchors, nms, AnchorSet, BBox, Detection, DEFAULT_MAX_LOG_DELTA};
use crate::model::{forward, render_features, Checkpoint, FeatureMap, Predictions, ScorerParams};
use crate::scenes::{Dataset, GroundTruthObject, Scene, Split};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
    pub max_log_delta: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            score_threshold: 0.05,
            nms_threshold: 0.5,
            max_detections: 100,
            max_log_delta: DEFAULT_MAX_LOG_DELTA,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.score_threshold) {
            return Err(Error::InvalidArgument(format!(
                "score threshold {} not in [0, 1)",
                self.score_threshold
            )));
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "nms threshold {} not in (0, 1)",
                self.nms_threshold
            )));
        }
        if !(self.max_log_delta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "max_log_delta {} must be positive",
                self.max_log_delta
            )));
        }
        Ok(())
    }
}

/// Detections of one image before and after NMS.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetections {
    /// Score-filtered, decoded and clipped candidates in anchor-then-class order.
    pub candidates: Vec<Detection>,
    /// After per-class NMS and the per-image cap, by descending score.
    pub detections: Vec<Detection>,
}

pub fn postprocess(
    pred: &Predictions,
    anchors: &AnchorSet,
    image_width: u32,
    image_height: u32,
    cfg: &InferenceConfig,
) -> Result<ImageDetections> {
    cfg.validate()?;
    if pred.num_anchors() != anchors.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} anchors",
            pred.num_anchors(),
            anchors.len()
        )));
    }
    let mut candidates = Vec::new();
    for (a, anchor) in anchors.anchors.iter().enumerate() {
        let mut decoded: Option<Option<BBox>> = None;
        for c in 0..pred.num_classes {
            let score = pred.prob(a, c);
            if score <= cfg.score_threshold {
                continue;
            }
            let bbox = match decoded {
                Some(b) => b,
                None => {
                    let b = decode_box_clamped(&anchor.bbox, &pred.deltas_of(a), cfg.max_log_delta)?
                        .clip(image_width as f64, image_height as f64);
                    decoded = Some(b);
                    b
                }
            };
            if let Some(bbox) = bbox {
                candidates.push(Detection { bbox, class_id: c, score });
            }
        }
    }
    let mut detections = nms(&candidates, cfg.nms_threshold)?;
    detections.truncate(cfg.max_detections);
    Ok(ImageDetections { candidates, detections })
}

pub fn detect(
    features: &FeatureMap,
    params: &ScorerParams,
    anchors: &AnchorSet,
    image_width: u32,
    image_height: u32,
    cfg: &InferenceConfig,
) -> Result<ImageDetections> {
    let (pred, _) = forward(features, params)?;
    postprocess(&pred, anchors, image_width, image_height, cfg)
}

/// One evaluated image: detections (post-NMS), pre-NMS candidates and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub detections: Vec<Detection>,
    pub candidates: Vec<Detection>,
    pub ground_truth: Vec<GroundTruthObject>,
}

/// Detection indices by descending score, ties in input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Tp,
    Fp,
    Ignored,
}

/// Greedy matching with COCO-style ignore flags; outcomes are in input order.
fn match_with_ignore(
    dets: &[Detection],
    gts: &[GroundTruthObject],
    gt_ignored: &[bool],
    det_ignored: &dyn Fn(&Detection) -> bool,
    iou_thr: f64,
) -> (Vec<Outcome>, Vec<bool>) {
    let mut taken = vec![false; gts.len()];
    let mut out = vec![Outcome::Fp; dets.len()];
    for i in score_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        // non-ignored ground truth first, then ignored
        for pass_ignored in [false, true] {
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.class_id != d.class_id || gt_ignored[g] != pass_ignored {
                    continue;
                }
                let v = d.bbox.iou(&gt.bbox);
                if v >= iou_thr && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            if best.is_some() {
                break;
            }
        }
        out[i] = match best {
            Some((g, _)) => {
                taken[g] = true;
                if gt_ignored[g] {
                    Outcome::Ignored
                } else {
                    Outcome::Tp
                }
            }
            None if det_ignored(d) => Outcome::Ignored,
            None => Outcome::Fp,
        };
    }
    (out, taken)
}

/// TP flag per detection (input order) under greedy same-class matching at `iou_thr`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthObject], iou_thr: f64) -> Vec<bool> {
    let ignored = vec![false; gts.len()];
    match_with_ignore(dets, gts, &ignored, &|_| false, iou_thr)
        .0
        .into_iter()
        .map(|o| o == Outcome::Tp)
        .collect()
}

/// 101-point interpolated area under the precision-recall curve of ranked TP flags.
pub fn interpolated_ap(ranked_tp: &[bool], n_positives: usize) -> Option<f64> {
    if n_positives == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &t in ranked_tp {
        if t {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_positives as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let idx = recall.partition_point(|&v| v < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

#[derive(Debug, Clone, Copy)]
struct AreaRange {
    lo: f64,
    hi: f64,
}

impl AreaRange {
    fn contains(&self, area: f64) -> bool {
        area >= self.lo && area < self.hi
    }
}

fn class_ap(images: &[EvalImage], class: usize, iou_thr: f64, area: Option<AreaRange>) -> Option<f64> {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut npos = 0;
    for img in images {
        let dets: Vec<Detection> = img.detections.iter().filter(|d| d.class_id == class).copied().collect();
        let gts: Vec<GroundTruthObject> = img.ground_truth.iter().filter(|g| g.class_id == class).copied().collect();
        let gt_ignored: Vec<bool> = gts
            .iter()
            .map(|g| area.is_some_and(|r| !r.contains(g.bbox.area())))
            .collect();
        npos += gt_ignored.iter().filter(|i| !**i).count();
        let det_ignored = |d: &Detection| area.is_some_and(|r| !r.contains(d.bbox.area()));
        let (outcomes, _) = match_with_ignore(&dets, &gts, &gt_ignored, &det_ignored, iou_thr);
        for i in score_order(&dets) {
            match outcomes[i] {
                Outcome::Tp => scored.push((dets[i].score, true)),
                Outcome::Fp => scored.push((dets[i].score, false)),
                Outcome::Ignored => {}
            }
        }
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let ranked: Vec<bool> = order.iter().map(|&i| scored[i].1).collect();
    interpolated_ap(&ranked, npos)
}

fn num_classes(images: &[EvalImage]) -> usize {
    images
        .iter()
        .flat_map(|i| i.ground_truth.iter().map(|g| g.class_id).chain(i.detections.iter().map(|d| d.class_id)))
        .max()
        .map_or(0, |m| m + 1)
}

fn mean_over_classes(images: &[EvalImage], classes: usize, iou_thr: f64, area: Option<AreaRange>) -> Option<f64> {
    let aps: Vec<f64> = (0..classes).filter_map(|c| class_ap(images, c, iou_thr, area)).collect();
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

/// Per-class AP averaged over classes with at least one ground-truth object.
pub fn average_precision(images: &[EvalImage], iou_thr: f64) -> Option<f64> {
    mean_over_classes(images, num_classes(images), iou_thr, None)
}

pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApSweep {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub per_threshold: Vec<(f64, Option<f64>)>,
}

fn sweep(images: &[EvalImage], classes: usize, area: Option<AreaRange>) -> ApSweep {
    let per_threshold: Vec<(f64, Option<f64>)> = iou_thresholds()
        .into_iter()
        .map(|t| (t, mean_over_classes(images, classes, t, area)))
        .collect();
    let ap = per_threshold
        .iter()
        .map(|(_, v)| *v)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64);
    ApSweep {
        ap,
        ap50: per_threshold[0].1,
        ap75: per_threshold[5].1,
        per_threshold,
    }
}

pub fn ap_sweep(images: &[EvalImage]) -> ApSweep {
    sweep(images, num_classes(images), None)
}

/// Area cutoffs splitting all ground-truth areas into three equal-count groups.
pub fn area_tertiles(images: &[EvalImage]) -> Option<(f64, f64)> {
    let mut areas: Vec<f64> = images
        .iter()
        .flat_map(|i| i.ground_truth.iter().map(|g| g.bbox.area()))
        .collect();
    if areas.is_empty() {
        return None;
    }
    areas.sort_by(f64::total_cmp);
    let q = |f: f64| areas[((areas.len() as f64 * f).floor() as usize).min(areas.len() - 1)];
    Some((q(1.0 / 3.0), q(2.0 / 3.0)))
}

/// Sweep-averaged AP for small, medium and large objects by dataset-relative area tertile.
pub fn ap_by_size(images: &[EvalImage]) -> [Option<f64>; 3] {
    let Some((t1, t2)) = area_tertiles(images) else {
        return [None, None, None];
    };
    let classes = num_classes(images);
    let ranges = [
        AreaRange { lo: 0.0, hi: t1 },
        AreaRange { lo: t1, hi: t2 },
        AreaRange { lo: t2, hi: f64::INFINITY },
    ];
    ranges.map(|r| sweep(images, classes, Some(r)).ap)
}

/// Elongation buckets used for the localization-error breakdown.
pub const ELONGATION_BUCKETS: [(f64, f64, &str); 3] =
    [(1.0, 2.0, "1-2"), (2.0, 4.0, "2-4"), (4.0, f64::INFINITY, "4+")];

#[derive(Debug, Clone, PartialEq)]
pub struct BucketShare {
    pub label: &'static str,
    pub errors: usize,
    pub localization: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationErrors {
    pub errors: usize,
    pub localization: usize,
    pub share: f64,
    pub buckets: Vec<BucketShare>,
}

fn bucket_of(elongation: f64) -> usize {
    ELONGATION_BUCKETS
        .iter()
        .position(|(lo, hi, _)| elongation >= *lo && elongation < *hi)
        .unwrap_or(ELONGATION_BUCKETS.len() - 1)
}

/// Share of false positives at IoU 0.5 that are localization errors.
///
/// A false positive is a localization error when its best same-class ground
/// truth left unmatched after matching overlaps it with IoU in `[0.1, 0.5)`.
/// Each false positive is attributed to the elongation bucket of the ground
/// truth it overlaps most (any class); false positives overlapping nothing
/// count only toward the overall figure. Shares with no errors are 0.
pub fn localization_error_share(images: &[EvalImage]) -> LocalizationErrors {
    let mut errors = 0;
    let mut loc = 0;
    let mut be = [0usize; 3];
    let mut bl = [0usize; 3];
    for img in images {
        let gts = &img.ground_truth;
        let ignored = vec![false; gts.len()];
        let (outcomes, taken) = match_with_ignore(&img.detections, gts, &ignored, &|_| false, 0.5);
        for (d, o) in img.detections.iter().zip(&outcomes) {
            if *o != Outcome::Fp {
                continue;
            }
            errors += 1;
            let best_free = gts
                .iter()
                .enumerate()
                .filter(|(g, gt)| !taken[*g] && gt.class_id == d.class_id)
                .map(|(_, gt)| d.bbox.iou(&gt.bbox))
                .fold(0.0, f64::max);
            let is_loc = (0.1..0.5).contains(&best_free);
            if is_loc {
                loc += 1;
            }
            let mut owner: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                let v = d.bbox.iou(&gt.bbox);
                if v > 0.0 && owner.is_none_or(|(_, bv)| v > bv) {
                    owner = Some((g, v));
                }
            }
            if let Some((g, _)) = owner {
                let b = bucket_of(gts[g].bbox.elongation());
                be[b] += 1;
                if is_loc {
                    bl[b] += 1;
                }
            }
        }
    }
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    LocalizationErrors {
        errors,
        localization: loc,
        share: ratio(loc, errors),
        buckets: ELONGATION_BUCKETS
            .iter()
            .enumerate()
            .map(|(i, (_, _, label))| BucketShare {
                label,
                errors: be[i],
                localization: bl[i],
                share: ratio(bl[i], be[i]),
            })
            .collect(),
    }
}

/// Ranks starting at 1, ties share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation with averaged tie ranks. `None` below two samples or with a constant side.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// (score, best same-class IoU) for every pre-NMS candidate that overlaps a same-class object.
pub fn score_iou_pairs(images: &[EvalImage]) -> Vec<(f64, f64)> {
    let mut pairs = Vec::new();
    for img in images {
        for d in &img.candidates {
            let best = img
                .ground_truth
                .iter()
                .filter(|g| g.class_id == d.class_id)
                .map(|g| d.bbox.iou(&g.bbox))
                .fold(0.0, f64::max);
            if best > 0.0 {
                pairs.push((d.score, best));
            }
        }
    }
    pairs
}

pub fn score_iou_correlation(images: &[EvalImage]) -> Option<f64> {
    let pairs = score_iou_pairs(images);
    let (s, i): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    spearman(&s, &i)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: Split,
    pub scenes: usize,
    pub ground_truth: usize,
    pub detections: usize,
    pub sweep: ApSweep,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub per_class_ap: Vec<Option<f64>>,
    pub localization: LocalizationErrors,
    pub correlation: Option<f64>,
    pub correlation_samples: usize,
}

pub fn evaluate_images(images: &[EvalImage], num_classes: usize, split: Split) -> EvalReport {
    let sweep_all = sweep(images, num_classes, None);
    let [s, m, l] = ap_by_size(images);
    let per_class_ap = (0..num_classes)
        .map(|c| {
            let v: Option<Vec<f64>> = iou_thresholds().into_iter().map(|t| class_ap(images, c, t, None)).collect();
            v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    EvalReport {
        split,
        scenes: images.len(),
        ground_truth: images.iter().map(|i| i.ground_truth.len()).sum(),
        detections: images.iter().map(|i| i.detections.len()).sum(),
        sweep: sweep_all,
        ap_small: s,
        ap_medium: m,
        ap_large: l,
        per_class_ap,
        localization: localization_error_share(images),
        correlation: score_iou_correlation(images),
        correlation_samples: score_iou_pairs(images).len(),
    }
}

/// Runs inference for every scene of a split.
pub fn infer_scenes(
    checkpoint: &Checkpoint,
    scenes: &[Scene],
    noise_level: f64,
    cfg: &InferenceConfig,
) -> Result<Vec<EvalImage>> {
    let spec = &checkpoint.spec;
    let anchors = generate_anchors(&spec.grid)?;
    let fcfg = spec.feature_config(noise_level);
    scenes
        .par_iter()
        .map(|scene| {
            let features = render_features(scene, &fcfg)?;
            let out = detect(&features, &checkpoint.params, &anchors, scene.image_width, scene.image_height, cfg)?;
            Ok(EvalImage {
                detections: out.detections,
                candidates: out.candidates,
                ground_truth: scene.objects.clone(),
            })
        })
        .collect()
}

pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, split: Split, cfg: &InferenceConfig) -> Result<EvalReport> {
    let spec = &checkpoint.spec;
    if dataset.class_count != spec.shape.num_classes
        || dataset.image_width != spec.grid.image_width
        || dataset.image_height != spec.grid.image_height
    {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint expects {} classes at {}x{}, dataset has {} classes at {}x{}",
            spec.shape.num_classes,
            spec.grid.image_width,
            spec.grid.image_height,
            dataset.class_count,
            dataset.image_width,
            dataset.image_height
        )));
    }
    let images = infer_scenes(checkpoint, dataset.split(split), dataset.noise_level, cfg)?;
    Ok(evaluate_images(&images, dataset.class_count, split))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |v| format!("{v:.6}"))
}

impl EvalReport {
    /// Ordered `(metric, value)` rows; absent values are `none`.
    pub fn rows(&self) -> Vec<(String, String)> {
        let split = match self.split {
            Split::Train => "train",
            Split::Val => "val",
            Split::All => "all",
        };
        let mut rows = vec![
            ("split".to_string(), split.to_string()),
            ("scenes".into(), self.scenes.to_string()),
            ("ground_truth".into(), self.ground_truth.to_string()),
            ("detections".into(), self.detections.to_string()),
            ("ap".into(), opt(self.sweep.ap)),
            ("ap50".into(), opt(self.sweep.ap50)),
            ("ap75".into(), opt(self.sweep.ap75)),
            ("ap_small".into(), opt(self.ap_small)),
            ("ap_medium".into(), opt(self.ap_medium)),
            ("ap_large".into(), opt(self.ap_large)),
        ];
        for (t, v) in &self.sweep.per_threshold {
            rows.push((format!("ap@{:.2}", t), opt(*v)));
        }
        for (c, v) in self.per_class_ap.iter().enumerate() {
            rows.push((format!("ap_class_{c}"), opt(*v)));
        }
        let loc = &self.localization;
        rows.push(("errors".into(), loc.errors.to_string()));
        rows.push(("loc_errors".into(), loc.localization.to_string()));
        rows.push(("loc_error_share".into(), format!("{:.6}", loc.share)));
        for b in &loc.buckets {
            rows.push((format!("loc_error_share_{}", b.label), format!("{:.6}", b.share)));
            rows.push((format!("errors_{}", b.label), b.errors.to_string()));
        }
        rows.push(("score_iou_correlation".into(), opt(self.correlation)));
        rows.push(("correlation_samples".into(), self.correlation_samples.to_string()));
        rows
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.rows() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tvalue\n");
        for (k, v) in self.rows() {
            let _ = writeln!(s, "{k}\t{v}");
        }
        s
    }
}

/// Parses a `key=value` report back into ordered pairs.
pub fn parse_report(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Parse {
                    line: i + 1,
                    message: format!("expected key=value, got '{l}'"),
                })
        })
        .collect()
}
