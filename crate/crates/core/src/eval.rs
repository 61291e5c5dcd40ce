//! Detection evaluation: overlap, greedy suppression, average precision and
//! the precision of mined boxes.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, Dataset};
use crate::error::{Error, Result};
use crate::mining::MiningAssignment;
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bag_id: String,
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_match: f64,
    pub nms_threshold: f64,
    /// Categories to score; every category with ground truth when absent.
    pub categories: Option<Vec<String>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_match: 0.5,
            nms_threshold: 0.3,
            categories: None,
        }
    }
}

impl EvalConfig {
    pub fn check(&self) -> Result<()> {
        for (name, v) in [("iou_match", self.iou_match), ("nms_threshold", self.nms_threshold)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Ground-truth boxes, `bag id → category → boxes`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: BTreeMap<String, BTreeMap<String, Vec<BBox>>>,
}

impl GroundTruth {
    pub fn boxes_for(&self, bag_id: &str, category: &str) -> &[BBox] {
        self.boxes
            .get(bag_id)
            .and_then(|m| m.get(category))
            .map_or(&[], Vec::as_slice)
    }

    pub fn count(&self, category: &str) -> usize {
        self.boxes.values().filter_map(|m| m.get(category)).map(Vec::len).sum()
    }

    /// Only the bags whose ids appear in `d`.
    pub fn restricted_to(&self, d: &Dataset) -> GroundTruth {
        GroundTruth {
            boxes: self
                .boxes
                .iter()
                .filter(|(id, _)| d.find_bag(id).is_some())
                .map(|(id, m)| (id.clone(), m.clone()))
                .collect(),
        }
    }

    pub fn categories(&self) -> Vec<String> {
        let mut c: Vec<String> = self.boxes.values().flat_map(|m| m.keys().cloned()).collect();
        c.sort();
        c.dedup();
        c
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

/// Greedy non-maximum suppression. Keeps the best remaining detection and
/// drops everything overlapping it by at least `iou_threshold`. Output is
/// ordered by score (descending), ties in input order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<&Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) < iou_threshold) {
            kept.push(d);
        }
    }
    kept.into_iter().cloned().collect()
}

/// One point of a precision–recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Ranks detections and marks each as true (`true`) or false positive.
/// Each detection claims the best-overlapping unclaimed ground-truth box with
/// IoU at least `iou_match`.
fn match_detections(dets: &[&Detection], gt: &GroundTruth, category: &str, iou_match: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut claimed: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    order
        .into_iter()
        .map(|i| {
            let d = dets[i];
            let boxes = gt.boxes_for(&d.bag_id, category);
            let used = claimed
                .entry(d.bag_id.as_str())
                .or_insert_with(|| vec![false; boxes.len()]);
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in boxes.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let o = iou(&d.bbox, g);
                if o >= iou_match && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Precision–recall points in ranking order, or `None` without ground truth.
pub fn pr_curve(dets: &[Detection], gt: &GroundTruth, category: &str, iou_match: f64) -> Option<Vec<PrPoint>> {
    let n_gt = gt.count(category);
    if n_gt == 0 {
        return None;
    }
    let dets: Vec<&Detection> = dets.iter().filter(|d| d.category == category).collect();
    let flags = match_detections(&dets, gt, category, iou_match);
    let (mut tp, mut fp) = (0usize, 0usize);
    Some(
        flags
            .into_iter()
            .map(|hit| {
                if hit {
                    tp += 1;
                } else {
                    fp += 1;
                }
                PrPoint {
                    recall: tp as f64 / n_gt as f64,
                    precision: tp as f64 / (tp + fp) as f64,
                }
            })
            .collect(),
    )
}

/// All-points interpolated average precision for `category`. Returns `None`
/// when the category has no ground truth.
///
/// Precisions are kept as fractions `tp / rank` and summed exactly, so the
/// result is the correctly rounded value of the rational AP.
pub fn average_precision(dets: &[Detection], gt: &GroundTruth, category: &str, iou_match: f64) -> Option<f64> {
    let n_gt = gt.count(category);
    if n_gt == 0 {
        return None;
    }
    let dets: Vec<&Detection> = dets.iter().filter(|d| d.category == category).collect();
    let flags = match_detections(&dets, gt, category, iou_match);
    let mut tp = 0u64;
    let hits: Vec<(u64, u64)> = flags
        .iter()
        .enumerate()
        .filter_map(|(i, &hit)| {
            hit.then(|| {
                tp += 1;
                (tp, i as u64 + 1)
            })
        })
        .collect();
    // Between hits precision only falls, so the envelope at a hit is the best
    // precision over this and later hits.
    let mut best = (0u64, 1u64);
    let mut sum = BigRational::zero();
    for &(num, den) in hits.iter().rev() {
        if u128::from(num) * u128::from(best.1) > u128::from(best.0) * u128::from(den) {
            best = (num, den);
        }
        sum += BigRational::new(BigInt::from(best.0), BigInt::from(best.1));
    }
    let ap = sum / BigRational::from_integer(BigInt::from(n_gt));
    Some(ap.to_f64().expect("AP lies in [0, 1]"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapReport {
    /// `None` for categories without ground truth.
    pub per_category: BTreeMap<String, Option<f64>>,
    pub mean: Option<f64>,
}

/// Scores every region of every bag of `d` with each detector in
/// `categories`, suppresses per bag and category, and returns the detections.
pub fn detect(model: &Model, d: &Dataset, categories: &[String], nms_threshold: f64) -> Result<Vec<Detection>> {
    let slots = categories.iter().map(|k| model.slot(k)).collect::<Result<Vec<_>>>()?;
    let per_bag: Vec<Result<Vec<Detection>>> = d
        .bags()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|bag| {
            let phis = bag
                .regions
                .iter()
                .map(|r| model.repr.forward(&r.feature))
                .collect::<Result<Vec<_>>>()?;
            let mut out = Vec::new();
            for (k, &slot) in categories.iter().zip(&slots) {
                let dets: Vec<Detection> = bag
                    .regions
                    .iter()
                    .zip(&phis)
                    .map(|(r, phi)| Detection {
                        bag_id: bag.id.clone(),
                        category: k.clone(),
                        bbox: r.bbox,
                        score: model.score_feature(slot, phi),
                    })
                    .collect();
                out.extend(nms(&dets, nms_threshold));
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for p in per_bag {
        all.extend(p?);
    }
    Ok(all)
}

/// Per-category AP and their mean over categories with ground truth.
/// `categories` defaults to every category present in `gt`.
pub fn map(
    model: &Model,
    d: &Dataset,
    gt: &GroundTruth,
    categories: Option<&[String]>,
    iou_match: f64,
    nms_threshold: f64,
) -> Result<MapReport> {
    let cats: Vec<String> = match categories {
        Some(c) => c.to_vec(),
        None => gt.categories(),
    };
    let dets = detect(model, d, &cats, nms_threshold)?;
    Ok(map_from_detections(&dets, gt, &cats, iou_match))
}

pub fn map_from_detections(dets: &[Detection], gt: &GroundTruth, categories: &[String], iou_match: f64) -> MapReport {
    let per_category: BTreeMap<String, Option<f64>> = categories
        .iter()
        .map(|k| (k.clone(), average_precision(dets, gt, k, iou_match)))
        .collect();
    let present: Vec<f64> = per_category.values().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    MapReport { per_category, mean }
}

/// Fraction of assignments whose region overlaps a same-category ground-truth
/// box of its bag by at least `iou_match`; `None` for no assignments.
pub fn mined_precision(assignments: &[MiningAssignment], d: &Dataset, gt: &GroundTruth, iou_match: f64) -> Option<f64> {
    if assignments.is_empty() {
        return None;
    }
    let hits = assignments
        .iter()
        .filter(|a| {
            let Some(bag) = d.find_bag(&a.bag_id) else {
                return false;
            };
            let Some(region) = bag.regions.get(a.region_index) else {
                return false;
            };
            gt.boxes_for(&a.bag_id, &a.category)
                .iter()
                .any(|g| iou(&region.bbox, g) >= iou_match)
        })
        .count();
    Some(hits as f64 / assignments.len() as f64)
}
