//! Detection quality: greedy IoU matching and 101-point interpolated AP at a
//! single IoU threshold, averaged over classes present in the ground truth.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou_unchecked, BBox};
use crate::detector::{DecodeConfig, Detector, ParamVector};
use crate::error::{Error, Result};
use crate::synthgen::SceneSample;

pub use crate::boxes::iou;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image_id: u64,
    /// Position of the detection within its image's detection list.
    pub index: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub image_id: u64,
    pub bbox: BBox,
}

/// Sort key: score descending, then image id, then detection index.
pub fn ranking(a: &ScoredBox, b: &ScoredBox) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image_id.cmp(&b.image_id))
        .then(a.index.cmp(&b.index))
}

/// True/false positive flag per detection, in ranking order.
fn match_detections(sorted: &[ScoredBox], gts: &[GtBox], iou_threshold: f64) -> Vec<bool> {
    let mut by_image: BTreeMap<u64, Vec<(BBox, bool)>> = BTreeMap::new();
    for g in gts {
        by_image.entry(g.image_id).or_default().push((g.bbox, false));
    }
    sorted
        .iter()
        .map(|d| {
            let Some(cands) = by_image.get_mut(&d.image_id) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (k, (g, used)) in cands.iter().enumerate() {
                if *used {
                    continue;
                }
                let v = iou_unchecked(&d.bbox, g);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((k, v));
                }
            }
            match best {
                Some((k, _)) => {
                    cands[k].1 = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated average precision for one class.
///
/// Returns 0 when there is no ground truth.
pub fn average_precision(dets: &[ScoredBox], gts: &[GtBox], iou_threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut sorted = dets.to_vec();
    sorted.sort_by(ranking);
    let tp = match_detections(&sorted, gts, iou_threshold);

    let n_gt = gts.len() as f64;
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &is_tp) in tp.iter().enumerate() {
        hits += is_tp as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / n_gt);
    }
    // precision envelope, right to left
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut total = 0.0;
    let mut cursor = 0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        while cursor < recall.len() && recall[cursor] < r {
            cursor += 1;
        }
        if cursor < recall.len() {
            total += precision[cursor];
        }
    }
    total / 101.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map: f64,
    pub n_images: usize,
    pub n_gt: usize,
    pub n_detections: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Scores a detector on labeled scenes without augmentation.
pub fn evaluate(
    detector: &Detector,
    params: &ParamVector,
    test_set: &[SceneSample],
    decode: &DecodeConfig,
    iou_threshold: f64,
) -> Result<EvalReport> {
    if test_set.is_empty() {
        return Err(Error::config("empty test set"));
    }
    let per_image = test_set
        .par_iter()
        .map(|s| detector.detect(params, &s.image, decode))
        .collect::<Result<Vec<_>>>()?;

    let mut dets: BTreeMap<usize, Vec<ScoredBox>> = BTreeMap::new();
    let mut gts: BTreeMap<usize, Vec<GtBox>> = BTreeMap::new();
    let mut n_detections = 0;
    for (sample, set) in test_set.iter().zip(&per_image) {
        n_detections += set.len();
        for (index, d) in set.detections.iter().enumerate() {
            dets.entry(d.class_id).or_default().push(ScoredBox {
                image_id: sample.sample_id,
                index,
                score: d.score,
                bbox: d.bbox,
            });
        }
        for o in &sample.objects {
            gts.entry(o.class_id).or_default().push(GtBox {
                image_id: sample.sample_id,
                bbox: o.bbox,
            });
        }
    }
    // gt order per image must not depend on test-set order
    for list in gts.values_mut() {
        list.sort_by(|a, b| {
            a.image_id
                .cmp(&b.image_id)
                .then(a.bbox.cx.total_cmp(&b.bbox.cx))
                .then(a.bbox.cy.total_cmp(&b.bbox.cy))
        });
    }

    let per_class_ap: BTreeMap<usize, f64> = gts
        .iter()
        .map(|(&class, g)| {
            let d = dets.get(&class).map(Vec::as_slice).unwrap_or(&[]);
            (class, average_precision(d, g, iou_threshold))
        })
        .collect();
    let map = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    Ok(EvalReport {
        per_class_ap,
        map,
        n_images: test_set.len(),
        n_gt: gts.values().map(Vec::len).sum(),
        n_detections,
    })
}
