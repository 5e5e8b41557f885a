//! Anchor-to-object assignment: the IoU-threshold baseline and per-object anchor bags.

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub labels: Vec<AnchorLabel>,
}

impl Assignment {
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels.iter().enumerate().filter_map(|(i, l)| match l {
            AnchorLabel::Positive(o) => Some((i, *o)),
            _ => None,
        })
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == AnchorLabel::Negative)
            .map(|(i, _)| i)
    }
}

/// Top-k anchors of one object, in descending IoU (ties by lower anchor index).
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorBag {
    pub object_index: usize,
    pub anchor_indices: Vec<usize>,
    pub ious: Vec<f64>,
}

impl AnchorBag {
    pub fn len(&self) -> usize {
        self.anchor_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor_indices.is_empty()
    }
}

/// Row-major `anchors x objects` IoU table.
#[derive(Debug, Clone)]
pub struct IouTable {
    pub n_anchors: usize,
    pub n_objects: usize,
    values: Vec<f64>,
}

impl IouTable {
    pub fn new(anchors: &[BBox], objects: &[BBox]) -> Self {
        let mut values = Vec::with_capacity(anchors.len() * objects.len());
        for a in anchors {
            values.extend(objects.iter().map(|o| a.iou(o)));
        }
        IouTable {
            n_anchors: anchors.len(),
            n_objects: objects.len(),
            values,
        }
    }

    pub fn get(&self, anchor: usize, object: usize) -> f64 {
        self.values[anchor * self.n_objects + object]
    }

    /// Best object for an anchor (ties by lower object index) and its IoU.
    pub fn best_object(&self, anchor: usize) -> Option<(usize, f64)> {
        let row = &self.values[anchor * self.n_objects..(anchor + 1) * self.n_objects];
        let mut best: Option<(usize, f64)> = None;
        for (o, &v) in row.iter().enumerate() {
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((o, v));
            }
        }
        best
    }

    pub fn max_iou(&self, anchor: usize) -> f64 {
        self.best_object(anchor).map_or(0.0, |(_, v)| v)
    }
}

fn check_thresholds(neg_upper: f64, pos_thr: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&neg_upper) || !(0.0..=1.0).contains(&pos_thr) || neg_upper > pos_thr {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= neg_upper ({neg_upper}) <= pos_thr ({pos_thr}) <= 1"
        )));
    }
    Ok(())
}

/// RetinaNet-style assignment with low-quality rescue: every object also
/// claims its best anchor (ties by lower index) when that IoU is positive.
/// Rescues are applied in object order, so a later object wins a contested anchor.
pub fn assign_baseline(
    anchors: &[BBox],
    gt_boxes: &[BBox],
    pos_thr: f64,
    neg_upper: f64,
) -> Result<Assignment> {
    check_thresholds(neg_upper, pos_thr)?;
    let table = IouTable::new(anchors, gt_boxes);
    Ok(assign_baseline_from_table(&table, pos_thr, neg_upper))
}

pub fn assign_baseline_from_table(table: &IouTable, pos_thr: f64, neg_upper: f64) -> Assignment {
    let mut labels: Vec<AnchorLabel> = (0..table.n_anchors)
        .map(|a| match table.best_object(a) {
            None => AnchorLabel::Negative,
            Some((o, v)) if v >= pos_thr => AnchorLabel::Positive(o),
            Some((_, v)) if v < neg_upper => AnchorLabel::Negative,
            Some(_) => AnchorLabel::Ignore,
        })
        .collect();
    for o in 0..table.n_objects {
        let mut best: Option<(usize, f64)> = None;
        for a in 0..table.n_anchors {
            let v = table.get(a, o);
            if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((a, v));
            }
        }
        if let Some((a, _)) = best {
            labels[a] = AnchorLabel::Positive(o);
        }
    }
    Assignment { labels }
}

pub fn build_bags(anchors: &[BBox], gt_boxes: &[BBox], k: usize) -> Result<Vec<AnchorBag>> {
    if k == 0 {
        return Err(Error::InvalidArgument("bag size k must be >= 1".into()));
    }
    let table = IouTable::new(anchors, gt_boxes);
    Ok(build_bags_from_table(&table, k))
}

pub fn build_bags_from_table(table: &IouTable, k: usize) -> Vec<AnchorBag> {
    (0..table.n_objects)
        .map(|o| {
            let mut cand: Vec<(usize, f64)> = (0..table.n_anchors)
                .map(|a| (a, table.get(a, o)))
                .filter(|&(_, v)| v > 0.0)
                .collect();
            cand.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            cand.truncate(k);
            AnchorBag {
                object_index: o,
                anchor_indices: cand.iter().map(|c| c.0).collect(),
                ious: cand.iter().map(|c| c.1).collect(),
            }
        })
        .collect()
}

/// Warning lines for objects that overlap no anchor.
pub fn empty_bag_warnings(bags: &[AnchorBag]) -> Vec<String> {
    bags.iter()
        .filter(|b| b.is_empty())
        .map(|b| format!("object {} overlaps no anchor; its bag is empty", b.object_index))
        .collect()
}

/// Anchors whose best IoU over all objects is below `neg_upper`, ascending.
pub fn mal_negatives(anchors: &[BBox], gt_boxes: &[BBox], neg_upper: f64) -> Vec<usize> {
    mal_negatives_from_table(&IouTable::new(anchors, gt_boxes), neg_upper)
}

pub fn mal_negatives_from_table(table: &IouTable, neg_upper: f64) -> Vec<usize> {
    (0..table.n_anchors)
        .filter(|&a| table.max_iou(a) < neg_upper)
        .collect()
}
