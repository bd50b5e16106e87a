//! IoU and per-image greedy matching of detections to ground truth.

use serde::{Deserialize, Serialize};

use crate::anno::BoundingBox;

/// Intersection area over union area. Symmetric in its arguments.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    TruePositive,
    FalsePositive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub detection: usize,
    pub ground_truth: usize,
    pub iou: f64,
}

/// Outcome of matching one image's detections against its ground truth.
///
/// `order` lists detection input indices by descending confidence and
/// `verdicts[k]` is the verdict of detection `order[k]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub pairs: Vec<MatchPair>,
    pub order: Vec<usize>,
    pub verdicts: Vec<Verdict>,
}

impl MatchResult {
    /// Verdict for detection `det` (input index).
    pub fn verdict_of(&self, det: usize) -> Option<Verdict> {
        self.order
            .iter()
            .position(|&d| d == det)
            .map(|k| self.verdicts[k])
    }

    pub fn precision_recall(&self) -> PrecisionRecall {
        precision_recall(self)
    }
}

/// Greedy matching for a single class: detections are visited by descending
/// confidence (ties by input order) and each takes the unmatched ground
/// truth with the highest IoU at or above `iou_threshold` (ties by lowest
/// ground-truth index).
pub fn match_image(
    gts: &[BoundingBox],
    dets: &[(BoundingBox, f64)],
    iou_threshold: f64,
) -> MatchResult {
    let gts: Vec<(BoundingBox, i64)> = gts.iter().map(|&b| (b, 0)).collect();
    let dets: Vec<(BoundingBox, i64, f64)> = dets.iter().map(|&(b, c)| (b, 0, c)).collect();
    match_image_by_class(&gts, &dets, iou_threshold)
}

/// Class-aware variant of [`match_image`]: a detection can only match ground
/// truth carrying the same category id.
pub fn match_image_by_class(
    gts: &[(BoundingBox, i64)],
    dets: &[(BoundingBox, i64, f64)],
    iou_threshold: f64,
) -> MatchResult {
    debug_assert!(iou_threshold > 0.0 && iou_threshold <= 1.0);
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].2.total_cmp(&dets[a].2));

    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    let mut verdicts = Vec::with_capacity(dets.len());
    for &d in &order {
        let (dbox, dcat, _) = dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, &(gbox, gcat)) in gts.iter().enumerate() {
            if taken[g] || gcat != dcat {
                continue;
            }
            let overlap = iou(&dbox, &gbox);
            if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        match best {
            Some((g, overlap)) => {
                taken[g] = true;
                pairs.push(MatchPair {
                    detection: d,
                    ground_truth: g,
                    iou: overlap,
                });
                verdicts.push(Verdict::TruePositive);
            }
            None => verdicts.push(Verdict::FalsePositive),
        }
    }

    let tp = pairs.len();
    MatchResult {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
        pairs,
        order,
        verdicts,
    }
}

/// Precision and recall; `None` marks a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn precision_recall(m: &MatchResult) -> PrecisionRecall {
    PrecisionRecall::from_counts(m.tp, m.fp, m.fn_)
}

impl PrecisionRecall {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        Self {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
        }
    }
}
