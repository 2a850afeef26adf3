//! Oriented-box IoU, greedy matching and 101-point interpolated AP.

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::geometry::{clip_convex, signed_area};
use crate::scene::OrientedBox;

pub const IOU_THRESHOLDS: [f64; 3] = [0.5, 0.65, 0.8];

/// Intersection-over-union of two oriented rectangles by convex clipping.
pub fn oriented_iou(a: &OrientedBox, b: &OrientedBox) -> Result<f64> {
    let (area_a, area_b) = (a.area(), b.area());
    if !(area_a > 0.0 && area_b > 0.0) {
        return Err(Error::DegenerateGeometry("zero-area box in IoU".into()));
    }
    let r2 = 0.25 * (a.length.hypot(a.width) + b.length.hypot(b.width)).powi(2);
    let (dx, dy) = (a.cx - b.cx, a.cy - b.cy);
    if dx * dx + dy * dy > r2 {
        return Ok(0.0);
    }
    let inter = signed_area(&clip_convex(&a.corners(), &b.corners())).max(0.0);
    Ok((inter / (area_a + area_b - inter)).clamp(0.0, 1.0))
}

/// Greedy one-to-one matching result; `tp` is aligned with the input order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub tp: Vec<bool>,
    pub false_negatives: usize,
}

/// Visit detections by descending confidence (stable) and give each the
/// unmatched ground truth of highest IoU at or above `iou_thr`.
pub fn match_detections(dets: &[Detection], gts: &[OrientedBox], iou_thr: f64) -> Result<MatchResult> {
    let conf: Vec<f64> = dets.iter().map(|d| d.confidence).collect();
    let iou = dets
        .iter()
        .map(|d| gts.iter().map(|g| oriented_iou(&d.bbox, g)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(match_iou_matrix(&conf, &iou, gts.len(), iou_thr))
}

/// `match_detections` over a precomputed `iou[detection][ground_truth]`.
pub fn match_iou_matrix(conf: &[f64], iou: &[Vec<f64>], n_gt: usize, iou_thr: f64) -> MatchResult {
    let mut taken = vec![false; n_gt];
    let mut tp = vec![false; conf.len()];
    for i in confidence_order(conf) {
        let mut best: Option<(usize, f64)> = None;
        for (g, &v) in iou[i].iter().enumerate() {
            if !taken[g] && v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            tp[i] = true;
        }
    }
    MatchResult {
        false_negatives: taken.iter().filter(|t| !**t).count(),
        tp,
    }
}

/// Indices by descending confidence; ties keep index order.
pub fn confidence_order(conf: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..conf.len()).collect();
    order.sort_by(|&i, &j| conf[j].total_cmp(&conf[i]));
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APResult {
    pub iou_threshold: f64,
    pub ap: f64,
    pub curve: Vec<PrPoint>,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
}

/// One evaluated frame: detections and the ground truth they are scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFrame {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<OrientedBox>,
}

/// Confidence-ranked TP flags pooled over frames. Ties keep frame order, then
/// detection order.
pub fn ranked_hits(frames: &[EvalFrame], iou_thr: f64) -> Result<(Vec<(f64, bool)>, usize)> {
    let mut scored = Vec::new();
    let mut n_gt = 0;
    for f in frames {
        let m = match_detections(&f.detections, &f.ground_truth, iou_thr)?;
        n_gt += f.ground_truth.len();
        scored.extend(f.detections.iter().zip(m.tp).map(|(d, tp)| (d.confidence, tp)));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok((scored, n_gt))
}

/// One frame of scores against precomputed IoU, for repeated evaluation of
/// the same boxes under different confidences.
#[derive(Debug, Clone, Copy)]
pub struct MatrixFrame<'a> {
    pub confidences: &'a [f64],
    /// `iou[detection][ground_truth]`.
    pub iou: &'a [Vec<f64>],
    pub n_gt: usize,
}

/// `ranked_hits` for matrix frames; ranks identically for identical inputs.
pub fn ranked_hits_matrix(frames: &[MatrixFrame], iou_thr: f64) -> (Vec<(f64, bool)>, usize) {
    let mut scored = Vec::new();
    let mut n_gt = 0;
    for f in frames {
        let m = match_iou_matrix(f.confidences, f.iou, f.n_gt, iou_thr);
        n_gt += f.n_gt;
        scored.extend(f.confidences.iter().copied().zip(m.tp));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    (scored, n_gt)
}

pub fn average_precision_matrix(frames: &[MatrixFrame], iou_thr: f64) -> Result<APResult> {
    let (scored, n_gt) = ranked_hits_matrix(frames, iou_thr);
    let hits: Vec<bool> = scored.iter().map(|s| s.1).collect();
    ap_from_ranked(&hits, n_gt, iou_thr)
}

/// 101-point interpolated AP over a ranked list of TP flags.
pub fn ap_from_ranked(hits: &[bool], n_gt: usize, iou_thr: f64) -> Result<APResult> {
    if n_gt == 0 {
        return Err(Error::UndefinedAp("dataset has no ground-truth boxes".into()));
    }
    let mut curve = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        curve.push(PrPoint {
            recall: tp as f64 / n_gt as f64,
            precision: tp as f64 / (k + 1) as f64,
        });
    }
    // suffix maximum of precision; recall is non-decreasing along the curve
    let mut best = vec![0.0f64; curve.len() + 1];
    for k in (0..curve.len()).rev() {
        best[k] = best[k + 1].max(curve[k].precision);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        while k < curve.len() && curve[k].recall < r {
            k += 1;
        }
        sum += best[k];
    }
    Ok(APResult {
        iou_threshold: iou_thr,
        ap: sum / 101.0,
        curve,
        tp,
        fp: hits.len() - tp,
        fn_count: n_gt - tp,
    })
}

pub fn average_precision(frames: &[EvalFrame], iou_thr: f64) -> Result<APResult> {
    let (scored, n_gt) = ranked_hits(frames, iou_thr)?;
    let hits: Vec<bool> = scored.iter().map(|s| s.1).collect();
    ap_from_ranked(&hits, n_gt, iou_thr)
}

/// Reference AP: for every recall level scan all ranking prefixes directly.
pub fn brute_force_ap(hits: &[bool], n_gt: usize) -> f64 {
    let mut prefixes = Vec::new();
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        prefixes.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = prefixes
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, prec)| *prec)
            .fold(0.0, f64::max);
        sum += p;
    }
    sum / 101.0
}

/// Fraction of uniform samples over the joint bounding box that fall in both
/// boxes versus either.
pub fn monte_carlo_iou<R: rand::Rng>(a: &OrientedBox, b: &OrientedBox, samples: usize, rng: &mut R) -> f64 {
    let corners: Vec<_> = a.corners().into_iter().chain(b.corners()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for c in &corners {
        x0 = x0.min(c.x);
        x1 = x1.max(c.x);
        y0 = y0.min(c.y);
        y1 = y1.max(c.y);
    }
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..samples {
        let p = crate::geometry::Point2::new(rng.random_range(x0..x1), rng.random_range(y0..y1));
        let (ia, ib) = (a.contains(p, 0.0), b.contains(p, 0.0));
        both += (ia && ib) as usize;
        either += (ia || ib) as usize;
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}
