//! Boxes, IoU, multi-level anchor tiling, box-delta coding and greedy NMS.
//!
//! Boxes are half-open corner pairs in continuous pixel coordinates, so the
//! area of `(x1, y1, x2, y2)` is `(x2 - x1) * (y2 - y1)` with no `+1` term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default upper bound on log-size deltas before exponentiation.
pub const DEFAULT_MAX_LOG_DELTA: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn validate(&self) -> Result<()> {
        let reason = if ![self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
        {
            Some("non-finite coordinate")
        } else if self.x1 >= self.x2 {
            Some("x1 >= x2")
        } else if self.y1 >= self.y2 {
            Some("y1 >= y2")
        } else {
            None
        };
        match reason {
            None => Ok(()),
            Some(reason) => Err(Error::InvalidBox {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
                reason,
            }),
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// `max(w/h, h/w)`; 1 for squares.
    pub fn elongation(&self) -> f64 {
        let r = self.width() / self.height();
        r.max(1.0 / r)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// IoU without validation; both boxes must already be valid.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    /// Clip to `[0, width] x [0, height]`. Returns `None` if nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        };
        b.validate().ok().map(|_| b)
    }
}

/// Checked IoU.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(a.iou(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidLevel {
    pub stride: u32,
    pub base_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorGridConfig {
    pub levels: Vec<PyramidLevel>,
    pub octave_scales: Vec<f64>,
    /// Width-to-height ratios; `sqrt(r)` multiplies the width.
    pub aspect_ratios: Vec<f64>,
    pub image_width: u32,
    pub image_height: u32,
}

impl AnchorGridConfig {
    pub fn default_scales() -> Vec<f64> {
        vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)]
    }

    pub fn default_ratios() -> Vec<f64> {
        vec![0.5, 1.0, 2.0]
    }

    /// Five-level pyramid (strides 8..128, base size 4x stride).
    pub fn retinanet(image_width: u32, image_height: u32) -> Self {
        AnchorGridConfig {
            levels: [8u32, 16, 32, 64, 128]
                .iter()
                .map(|&s| PyramidLevel {
                    stride: s,
                    base_size: 4.0 * s as f64,
                })
                .collect(),
            octave_scales: Self::default_scales(),
            aspect_ratios: Self::default_ratios(),
            image_width,
            image_height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("anchor grid: {m}")));
        if self.levels.is_empty() {
            return bad("no pyramid levels");
        }
        if self.octave_scales.is_empty() || self.aspect_ratios.is_empty() {
            return bad("octave_scales and aspect_ratios must be non-empty");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image dimensions must be positive");
        }
        for l in &self.levels {
            if l.stride == 0 || !(l.base_size.is_finite() && l.base_size > 0.0) {
                return bad("stride and base_size must be positive");
            }
        }
        if self
            .octave_scales
            .iter()
            .chain(&self.aspect_ratios)
            .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return bad("scales and ratios must be positive and finite");
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.octave_scales.len() * self.aspect_ratios.len()
    }

    /// Feature-map `(height, width)` of a level, by ceiling division.
    pub fn level_dims(&self, level: usize) -> (usize, usize) {
        let s = self.levels[level].stride;
        (
            self.image_height.div_ceil(s) as usize,
            self.image_width.div_ceil(s) as usize,
        )
    }

    /// `(width, height)` of anchor shape `shape` (scale-major, ratio-minor) at `level`.
    pub fn shape_size(&self, level: usize, shape: usize) -> (f64, f64) {
        let nr = self.aspect_ratios.len();
        let s = self.octave_scales[shape / nr];
        let r = self.aspect_ratios[shape % nr];
        let side = self.levels[level].base_size * s;
        (side * r.sqrt(), side / r.sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub shape: usize,
}

/// All anchors of a grid, in level-major, row-major cell, scale-major / ratio-minor order.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
    /// Index of each level's first anchor.
    pub level_offsets: Vec<usize>,
    pub level_dims: Vec<(usize, usize)>,
    pub per_cell: usize,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn boxes(&self) -> impl Iterator<Item = &BBox> {
        self.anchors.iter().map(|a| &a.bbox)
    }

    pub fn index_of(&self, level: usize, row: usize, col: usize, shape: usize) -> usize {
        let (_, w) = self.level_dims[level];
        self.level_offsets[level] + (row * w + col) * self.per_cell + shape
    }
}

pub fn generate_anchors(cfg: &AnchorGridConfig) -> Result<AnchorSet> {
    cfg.validate()?;
    let per_cell = cfg.anchors_per_cell();
    let mut anchors = Vec::new();
    let mut level_offsets = Vec::with_capacity(cfg.levels.len());
    let mut level_dims = Vec::with_capacity(cfg.levels.len());
    for (li, level) in cfg.levels.iter().enumerate() {
        let (h, w) = cfg.level_dims(li);
        level_offsets.push(anchors.len());
        level_dims.push((h, w));
        let stride = level.stride as f64;
        let sizes: Vec<(f64, f64)> = (0..per_cell).map(|a| cfg.shape_size(li, a)).collect();
        for row in 0..h {
            let cy = (row as f64 + 0.5) * stride;
            for col in 0..w {
                let cx = (col as f64 + 0.5) * stride;
                for (shape, &(aw, ah)) in sizes.iter().enumerate() {
                    anchors.push(Anchor {
                        bbox: BBox::from_center(cx, cy, aw, ah)?,
                        level: li,
                        row,
                        col,
                        shape,
                    });
                }
            }
        }
    }
    Ok(AnchorSet {
        anchors,
        level_offsets,
        level_dims,
        per_cell,
    })
}

/// `(tx, ty, tw, th)`: center offsets normalized by anchor size, log size ratios.
pub fn encode_box(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let (gx, gy) = target.center();
    [
        (gx - ax) / aw,
        (gy - ay) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

pub fn decode_box(anchor: &BBox, deltas: &[f64; 4]) -> Result<BBox> {
    decode_box_clamped(anchor, deltas, DEFAULT_MAX_LOG_DELTA)
}

/// Log-size deltas are clamped to `[-max_log_delta, max_log_delta]`; the lower bound keeps
/// extreme shrinking from collapsing the box to zero width in floating point.
pub fn decode_box_clamped(anchor: &BBox, deltas: &[f64; 4], max_log_delta: f64) -> Result<BBox> {
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("box deltas".into()));
    }
    if !(max_log_delta > 0.0) {
        return Err(Error::InvalidArgument(format!("max_log_delta {max_log_delta} must be positive")));
    }
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + deltas[0] * aw;
    let cy = ay + deltas[1] * ah;
    let w = aw * deltas[2].clamp(-max_log_delta, max_log_delta).exp();
    let h = ah * deltas[3].clamp(-max_log_delta, max_log_delta).exp();
    BBox::from_center(cx, cy, w, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Indices ordered by descending score, ties by lower index.
pub(crate) fn rank_by_score(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy per-class NMS. Same-class detections with IoU strictly above the
/// threshold against an already-kept detection are dropped.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "nms threshold {iou_threshold} not in (0, 1)"
        )));
    }
    let order = rank_by_score(dets.iter().map(|d| d.score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept.iter().any(|&k| {
            dets[k].class_id == d.class_id && dets[k].bbox.iou(&d.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept.into_iter().map(|i| dets[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0., 0., 4., 4.), &b(0., 0., 4., 4.)).unwrap(), 1.0);
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(2., 2., 3., 3.)).unwrap(), 0.0);
        assert!((iou(&b(0., 0., 2., 2.), &b(1., 1., 3., 3.)).unwrap() - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn iou_rejects_degenerate_boxes() {
        let bad = BBox { x1: 1.0, y1: 0.0, x2: 1.0, y2: 2.0 };
        assert!(matches!(iou(&bad, &b(0., 0., 1., 1.)), Err(Error::InvalidBox { .. })));
        assert!(BBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
    }

    #[test]
    fn single_level_anchor_count() {
        let cfg = AnchorGridConfig {
            levels: vec![PyramidLevel { stride: 8, base_size: 32.0 }],
            octave_scales: AnchorGridConfig::default_scales(),
            aspect_ratios: AnchorGridConfig::default_ratios(),
            image_width: 16,
            image_height: 16,
        };
        let set = generate_anchors(&cfg).unwrap();
        assert_eq!(set.len(), 36);
        let first_square = set.anchors[1];
        assert_eq!(first_square.bbox, b(-12.0, -12.0, 20.0, 20.0));
        assert_eq!(first_square.bbox.center(), (4.0, 4.0));
    }

    #[test]
    fn anchor_ordering_is_level_row_col_shape() {
        let mut cfg = AnchorGridConfig::retinanet(64, 48);
        cfg.levels.truncate(2);
        let set = generate_anchors(&cfg).unwrap();
        for (i, a) in set.anchors.iter().enumerate() {
            assert_eq!(set.index_of(a.level, a.row, a.col, a.shape), i);
        }
        assert_eq!(set.level_dims, vec![(6, 8), (3, 4)]);
        // ratio 2 (w:h) is wider than tall
        let wide = set.anchors[2].bbox;
        assert!(wide.width() > wide.height());
    }

    #[test]
    fn retinanet_scale_span() {
        let set = generate_anchors(&AnchorGridConfig::retinanet(800, 800)).unwrap();
        let sides: Vec<f64> = set
            .anchors
            .iter()
            .filter(|a| a.shape % 3 == 1)
            .map(|a| a.bbox.width())
            .collect();
        let min = sides.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = sides.iter().cloned().fold(0.0, f64::max);
        assert!((min - 32.0).abs() < 1e-9);
        assert!((max - 812.7).abs() < 0.1, "max side {max}");
    }

    #[test]
    fn encode_examples() {
        let a = b(0., 0., 10., 10.);
        assert_eq!(encode_box(&a, &a), [0.0; 4]);
        let d = encode_box(&a, &b(0., 0., 20., 20.));
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] - 0.5).abs() < 1e-15);
        assert!((d[2] - 2f64.ln()).abs() < 1e-15 && (d[3] - 2f64.ln()).abs() < 1e-15);
        let back = decode_box(&a, &[0.5, 0.5, 2f64.ln(), 2f64.ln()]).unwrap();
        assert!((back.x2 - 20.0).abs() < 1e-12 && back.x1.abs() < 1e-12);
        assert_eq!(decode_box(&a, &[0.0; 4]).unwrap(), a);
    }

    #[test]
    fn decode_clamps_and_rejects_nan() {
        let a = b(0., 0., 16., 16.);
        let big = decode_box(&a, &[0.0, 0.0, 50.0, 50.0]).unwrap();
        assert!((big.width() - 1000.0).abs() < 1e-6);
        assert!(matches!(
            decode_box(&a, &[f64::NAN, 0.0, 0.0, 0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn nms_examples() {
        let d = |s: f64| Detection { bbox: b(0., 0., 10., 10.), class_id: 0, score: s };
        assert_eq!(nms(&[d(0.3)], 0.5).unwrap(), vec![d(0.3)]);
        assert_eq!(nms(&[d(0.8), d(0.9)], 0.5).unwrap(), vec![d(0.9)]);
        // other class survives
        let mut other = d(0.1);
        other.class_id = 1;
        assert_eq!(nms(&[d(0.8), other], 0.5).unwrap().len(), 2);
        assert!(nms(&[d(0.8)], 1.0).is_err());
    }

    #[test]
    fn nms_ties_keep_lower_index() {
        let x = Detection { bbox: b(0., 0., 10., 10.), class_id: 0, score: 0.5 };
        let y = Detection { bbox: b(1., 0., 11., 10.), class_id: 0, score: 0.5 };
        assert_eq!(nms(&[x, y], 0.5).unwrap(), vec![x]);
        assert_eq!(nms(&[y, x], 0.5).unwrap(), vec![y]);
    }

    #[test]
    fn clip_to_image() {
        let c = b(-5., -5., 5., 200.).clip(100.0, 100.0).unwrap();
        assert_eq!(c, b(0., 0., 5., 100.));
        assert!(b(-10., -10., -1., -1.).clip(100.0, 100.0).is_none());
    }
}
