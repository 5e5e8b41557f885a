//! Independent reference implementations shared by the integration and acceptance tests.
#![allow(dead_code)]

use mal_core::geometry::{BBox, Detection};
use rand::Rng;

/// Samples per unit length for the raster oracle.
pub const RASTER_RES: f64 = 1e4;

fn covered_samples(lo: f64, hi: f64) -> u64 {
    // sample centers at (i + 0.5) / RASTER_RES
    let mut n = 0;
    let start = (lo * RASTER_RES).floor() as i64;
    let end = (hi * RASTER_RES).ceil() as i64;
    for i in start..end {
        let x = (i as f64 + 0.5) / RASTER_RES;
        if x >= lo && x < hi {
            n += 1;
        }
    }
    n
}

/// IoU by counting covered sample points; boxes are axis-aligned so counts factor per axis.
pub fn raster_iou(a: &BBox, b: &BBox) -> f64 {
    let area = |x: u64, y: u64| x as f64 * y as f64;
    let aa = area(covered_samples(a.x1, a.x2), covered_samples(a.y1, a.y2));
    let ab = area(covered_samples(b.x1, b.x2), covered_samples(b.y1, b.y2));
    let ix = covered_samples(a.x1.max(b.x1), a.x2.min(b.x2).max(a.x1.max(b.x1)));
    let iy = covered_samples(a.y1.max(b.y1), a.y2.min(b.y2).max(a.y1.max(b.y1)));
    let inter = area(ix, iy);
    let union = aa + ab - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn random_box(rng: &mut impl Rng, extent: f64, min_side: f64) -> BBox {
    let w = rng.random_range(min_side..extent / 2.0);
    let h = rng.random_range(min_side..extent / 2.0);
    let x = rng.random_range(0.0..extent - w);
    let y = rng.random_range(0.0..extent - h);
    BBox::new(x, y, x + w, y + h).unwrap()
}

/// Repeatedly take the best remaining detection and strike out what it suppresses.
pub fn brute_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if !alive[i] {
                continue;
            }
            best = match best {
                Some(b) if dets[b].score >= dets[i].score => Some(b),
                _ => Some(i),
            };
        }
        let Some(b) = best else { break };
        alive[b] = false;
        out.push(dets[b]);
        for i in 0..dets.len() {
            if alive[i] && dets[i].class_id == dets[b].class_id && raster_free_iou(&dets[i].bbox, &dets[b].bbox) > thr {
                alive[i] = false;
            }
        }
    }
    out
}

/// Plain closed-form IoU, written separately from the library.
pub fn raster_free_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Bag positions ranked by confidence (ties: earlier position first), truncated to `count`.
pub fn brute_topk(confidences: &[f64], count: usize) -> Vec<usize> {
    let beats = |i: usize, j: usize| confidences[i] > confidences[j] || (confidences[i] == confidences[j] && i < j);
    let mut ranked: Vec<(usize, usize)> = (0..confidences.len())
        .map(|j| ((0..confidences.len()).filter(|&i| i != j && beats(i, j)).count(), j))
        .collect();
    ranked.sort();
    ranked.into_iter().take(count).map(|(_, j)| j).collect()
}
