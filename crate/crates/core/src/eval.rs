//! Rotated-box detection evaluation.
//!
//! Detections are matched greedily in descending score order to the unmatched
//! ground truth with the highest rotated IoU at or above the threshold. AP is
//! computed over all detections ranked jointly across images; precision,
//! recall and F1 use only detections scoring at least the confidence
//! threshold. Single category, no ignore regions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Detection;
use crate::geometry::{rotated_iou, ObbBox};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
/// Recall grid points `0, 0.01, …, 1`.
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no ground-truth boxes; recall is undefined")]
    NoGroundTruth,
    #[error("duplicate image id `{0}`")]
    DuplicateImage(String),
    #[error("detections reference image ids missing from ground truth: {0:?}")]
    UnknownImages(Vec<String>),
}

/// Ground-truth boxes for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<ObbBox>,
}

/// Ground truth keyed by unique image id, in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthSet {
    images: Vec<ImageAnnotation>,
}

impl GroundTruthSet {
    pub fn new(images: Vec<ImageAnnotation>) -> Result<Self, EvalError> {
        let mut seen = HashMap::with_capacity(images.len());
        for img in &images {
            if seen.insert(img.image_id.as_str(), ()).is_some() {
                return Err(EvalError::DuplicateImage(img.image_id.clone()));
            }
        }
        Ok(Self { images })
    }

    pub fn images(&self) -> &[ImageAnnotation] {
        &self.images
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageAnnotation> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    pub fn box_count(&self) -> usize {
        self.images.iter().map(|i| i.boxes.len()).sum()
    }

    pub fn into_images(self) -> Vec<ImageAnnotation> {
        self.images
    }
}

/// Detections for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub detections: Vec<Detection>,
}

/// One detection's outcome within its image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    /// Index into the image's detection list as given.
    pub detection: usize,
    pub score: f64,
    /// Matched ground-truth index, if any.
    pub gt: Option<usize>,
    /// IoU with the matched box; for unmatched detections, the best IoU with
    /// any ground-truth box (0 when there are none).
    pub iou: f64,
}

impl MatchEntry {
    pub fn is_true_positive(&self) -> bool {
        self.gt.is_some()
    }
}

/// Greedy matching for one image. The ledger is in processing order
/// (descending score, ties by input order).
pub fn match_image(dets: &[Detection], gts: &[ObbBox], iou_threshold: f64) -> Vec<MatchEntry> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|di| {
            let ious: Vec<f64> = gts.iter().map(|g| rotated_iou(&dets[di].bbox, g)).collect();
            let best = ious
                .iter()
                .enumerate()
                .filter(|&(gi, &iou)| !taken[gi] && iou >= iou_threshold)
                .fold(None, |acc: Option<(usize, f64)>, (gi, &iou)| match acc {
                    Some((_, b)) if b >= iou => acc,
                    _ => Some((gi, iou)),
                });
            match best {
                Some((gi, iou)) => {
                    taken[gi] = true;
                    MatchEntry {
                        detection: di,
                        score: dets[di].score,
                        gt: Some(gi),
                        iou,
                    }
                }
                None => MatchEntry {
                    detection: di,
                    score: dets[di].score,
                    gt: None,
                    iou: ious.iter().copied().fold(0.0, f64::max),
                },
            }
        })
        .collect()
}

/// How the interpolated precision samples are combined into one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApIntegration {
    /// Area over the 100 recall bins: each bin `(r_{i-1}, r_i]` contributes
    /// `0.01 · p_interp(r_i)`.
    #[default]
    RecallBins,
    /// Plain mean of all 101 samples, as pycocotools computes it.
    CocoMean,
}

/// Interpolated precision `max{p(r') : r' >= r}` sampled on the 101-point
/// recall grid. `ranked` is `(score, is_true_positive)` for every detection.
pub fn interpolated_precision(ranked: &[(f64, bool)], gt_count: usize) -> Result<Vec<f64>, EvalError> {
    if gt_count == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| ranked[b].0.total_cmp(&ranked[a].0).then(a.cmp(&b)));

    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(order.len());
    for (rank, &i) in order.iter().enumerate() {
        if ranked[i].1 {
            tp += 1;
        }
        let precision = tp as f64 / (rank + 1) as f64;
        let recall = tp as f64 / gt_count as f64;
        curve.push((recall, precision));
    }
    // envelope from the right
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    Ok((0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            let first = curve.partition_point(|&(rec, _)| rec < r);
            curve.get(first).map_or(0.0, |&(_, p)| p)
        })
        .collect())
}

pub fn average_precision_with(
    ranked: &[(f64, bool)],
    gt_count: usize,
    integration: ApIntegration,
) -> Result<f64, EvalError> {
    let samples = interpolated_precision(ranked, gt_count)?;
    Ok(match integration {
        ApIntegration::RecallBins => samples[1..].iter().sum::<f64>() / (RECALL_POINTS - 1) as f64,
        ApIntegration::CocoMean => samples.iter().sum::<f64>() / RECALL_POINTS as f64,
    })
}

/// 101-point interpolated AP over detections ranked jointly across images.
pub fn average_precision(ledgers: &[Vec<MatchEntry>], gt_count: usize) -> Result<f64, EvalError> {
    let ranked: Vec<(f64, bool)> = ledgers
        .iter()
        .flatten()
        .map(|m| (m.score, m.is_true_positive()))
        .collect();
    average_precision_with(&ranked, gt_count, ApIntegration::default())
}

/// Ledger entry tagged with its image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub image_id: String,
    #[serde(flatten)]
    pub entry: MatchEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap50: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gt_count: usize,
    /// Detections at or above the confidence threshold.
    pub predicted: usize,
    pub true_positives: usize,
    pub matches: Vec<LedgerRow>,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Full evaluation. Images with ground truth but no detection entry count
/// all their boxes as misses; precision with no predictions is 0.
pub fn report(
    gt: &GroundTruthSet,
    dets: &[ImageDetections],
    conf_threshold: f64,
    iou_threshold: f64,
) -> Result<EvalReport, EvalError> {
    let unknown: Vec<String> = dets
        .iter()
        .filter(|d| gt.get(&d.image_id).is_none())
        .map(|d| d.image_id.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(EvalError::UnknownImages(unknown));
    }
    let gt_count = gt.box_count();
    if gt_count == 0 {
        return Err(EvalError::NoGroundTruth);
    }

    let mut ledgers = Vec::with_capacity(dets.len());
    let mut matches = Vec::new();
    for d in dets {
        let boxes = &gt.get(&d.image_id).expect("checked above").boxes;
        let ledger = match_image(&d.detections, boxes, iou_threshold);
        matches.extend(ledger.iter().map(|&entry| LedgerRow {
            image_id: d.image_id.clone(),
            entry,
        }));
        ledgers.push(ledger);
    }
    let ap50 = average_precision(&ledgers, gt_count)?;

    // Greedy matching visits higher scores first, so the matches of the
    // confident subset are exactly those it would get on its own.
    let confident = ledgers.iter().flatten().filter(|m| m.score >= conf_threshold);
    let (predicted, true_positives) = confident.fold((0, 0), |(n, tp), m| (n + 1, tp + m.is_true_positive() as usize));
    let precision = if predicted > 0 {
        true_positives as f64 / predicted as f64
    } else {
        0.0
    };
    let recall = true_positives as f64 / gt_count as f64;
    Ok(EvalReport {
        ap50,
        precision,
        recall,
        f1: f1_score(precision, recall),
        gt_count,
        predicted,
        true_positives,
        matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: ObbBox, score: f64) -> Detection {
        Detection { bbox: b, score }
    }

    fn boxes() -> Vec<ObbBox> {
        vec![
            ObbBox::new(10.0, 10.0, 4.0, 8.0, 0.0),
            ObbBox::new(40.0, 12.0, 5.0, 9.0, 0.5),
            ObbBox::new(25.0, 40.0, 3.0, 7.0, -1.0),
        ]
    }

    #[test]
    fn identical_detections_all_match() {
        let gts = boxes();
        let dets: Vec<_> = gts.iter().map(|&b| det(b, 1.0)).collect();
        let ledger = match_image(&dets, &gts, 0.5);
        assert!(ledger.iter().all(|m| m.is_true_positive()));
        assert_eq!(ledger.iter().map(|m| m.gt.unwrap()).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn no_detections_is_all_misses() {
        let gt = GroundTruthSet::new(vec![ImageAnnotation {
            image_id: "a".into(),
            width: 64,
            height: 64,
            boxes: vec![boxes()[0]],
        }])
        .unwrap();
        let r = report(&gt, &[], 0.3, 0.5).unwrap();
        assert_eq!((r.recall, r.precision, r.ap50), (0.0, 0.0, 0.0));
    }

    #[test]
    fn highest_iou_wins() {
        // gt0 overlaps the detection at 0.8, gt1 at 0.6
        let d = ObbBox::new(0.0, 0.0, 10.0, 10.0, 0.0);
        let g0 = ObbBox::new(0.0, 10.0 / 9.0, 10.0, 10.0, 0.0);
        let g1 = ObbBox::new(2.5, 0.0, 10.0, 10.0, 0.0);
        assert!((rotated_iou(&d, &g0) - 0.8).abs() < 1e-12);
        assert!((rotated_iou(&d, &g1) - 0.6).abs() < 1e-12);
        let ledger = match_image(&[det(d, 0.9)], &[g1, g0], 0.5);
        assert_eq!(ledger[0].gt, Some(1));
    }

    #[test]
    fn one_gt_never_matched_twice() {
        let g = boxes()[0];
        let ledger = match_image(&[det(g, 0.9), det(g, 0.95)], &[g], 0.5);
        assert_eq!(ledger[0].detection, 1);
        assert_eq!(ledger[0].gt, Some(0));
        assert_eq!(ledger[1].gt, None);
        assert!(ledger[1].iou > 0.99);
    }

    #[test]
    fn ties_keep_input_order() {
        let g = boxes()[0];
        let ledger = match_image(&[det(g, 0.5), det(g, 0.5)], &[g], 0.5);
        assert_eq!(ledger[0].detection, 0);
        assert_eq!(ledger[0].gt, Some(0));
    }

    #[test]
    fn two_gt_fixture() {
        // TP at 0.9, FP at 0.8, one gt never found
        let ranked = [(0.9, true), (0.8, false)];
        assert_eq!(
            average_precision_with(&ranked, 2, ApIntegration::RecallBins).unwrap(),
            0.5
        );
        assert_eq!(
            average_precision_with(&ranked, 2, ApIntegration::CocoMean).unwrap(),
            51.0 / 101.0
        );
        let p = interpolated_precision(&ranked, 2).unwrap();
        assert!(p[..=50].iter().all(|&v| v == 1.0));
        assert!(p[51..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perfect_and_empty_ap() {
        let perfect = [(0.9, true), (0.7, true), (0.3, true)];
        for mode in [ApIntegration::RecallBins, ApIntegration::CocoMean] {
            assert_eq!(average_precision_with(&perfect, 3, mode).unwrap(), 1.0);
            assert_eq!(average_precision_with(&[(0.9, false)], 3, mode).unwrap(), 0.0);
        }
        assert_eq!(
            average_precision_with(&perfect, 0, ApIntegration::default()),
            Err(EvalError::NoGroundTruth)
        );
    }

    #[test]
    fn envelope_uses_later_higher_precision() {
        // FP, TP: precision 0 at recall 0, then 0.5 at recall 1
        let ranked = [(0.9, false), (0.8, true)];
        let p = interpolated_precision(&ranked, 1).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn unknown_image_ids_listed() {
        let gt = GroundTruthSet::new(vec![]).unwrap();
        let dets = vec![
            ImageDetections {
                image_id: "x".into(),
                width: 8,
                height: 8,
                detections: vec![],
            },
            ImageDetections {
                image_id: "y".into(),
                width: 8,
                height: 8,
                detections: vec![],
            },
        ];
        assert_eq!(
            report(&gt, &dets, 0.3, 0.5),
            Err(EvalError::UnknownImages(vec!["x".into(), "y".into()]))
        );
    }

    #[test]
    fn duplicate_ids_rejected() {
        let img = ImageAnnotation {
            image_id: "a".into(),
            width: 4,
            height: 4,
            boxes: vec![],
        };
        assert!(matches!(
            GroundTruthSet::new(vec![img.clone(), img]),
            Err(EvalError::DuplicateImage(_))
        ));
    }

    #[test]
    fn conf_threshold_above_all_scores() {
        let gts = boxes();
        let gt = GroundTruthSet::new(vec![ImageAnnotation {
            image_id: "a".into(),
            width: 64,
            height: 64,
            boxes: gts.clone(),
        }])
        .unwrap();
        let dets = vec![ImageDetections {
            image_id: "a".into(),
            width: 64,
            height: 64,
            detections: gts.iter().map(|&b| det(b, 0.6)).collect(),
        }];
        let r = report(&gt, &dets, 0.7, 0.5).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.predicted), (0.0, 0.0, 0.0, 0));
        assert_eq!(r.ap50, 1.0);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_score(0.0, 0.0), 0.0);
        assert_eq!(f1_score(1.0, 1.0), 1.0);
        assert!((f1_score(0.5, 1.0) - 2.0 / 3.0).abs() < 1e-15);
    }
}
