//! Dataset-level ranking metrics: precision-recall curves, all-point
//! interpolated AP, mAP and F1 at a confidence cut.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anno::{Dataset, Detection};
use crate::error::{Error, Result};
use crate::geom::{match_image_by_class, PrecisionRecall, Verdict};
use crate::report;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_CONFIDENCE_CUT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub confidence: f64,
}

/// Precision-recall curve of one class, one point per detection rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub category_id: i64,
    pub points: Vec<PrPoint>,
    pub gt_count: usize,
}

/// Verdict of every detection in `dets` against `gt`, with images matched
/// independently and class-aware. Index `i` of the result belongs to `dets[i]`.
fn dataset_verdicts(dets: &[&Detection], gt: &Dataset, iou_threshold: f64) -> Result<Vec<Verdict>> {
    let index = gt.index();
    let mut per_image: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, d) in dets.iter().enumerate() {
        let &img = index
            .get(d.image_id.as_str())
            .ok_or_else(|| Error::UnknownImage(d.image_id.clone()))?;
        per_image.entry(img).or_default().push(i);
    }

    let mut verdicts = vec![Verdict::FalsePositive; dets.len()];
    for (img, members) in per_image {
        let gts: Vec<_> = gt.images[img]
            .annotations
            .iter()
            .map(|a| (a.bbox, a.category_id))
            .collect();
        let local: Vec<_> = members
            .iter()
            .map(|&i| (dets[i].bbox, dets[i].category_id, dets[i].confidence))
            .collect();
        let m = match_image_by_class(&gts, &local, iou_threshold);
        for (&local_idx, &v) in m.order.iter().zip(&m.verdicts) {
            verdicts[members[local_idx]] = v;
        }
    }
    Ok(verdicts)
}

/// Builds the precision-recall curve for `category_id`. Every detection must
/// belong to that category.
pub fn pr_curve(
    category_id: i64,
    dets: &[Detection],
    gt: &Dataset,
    iou_threshold: f64,
) -> Result<PrCurve> {
    if !gt.categories.contains_key(&category_id) {
        return Err(Error::UnknownCategory(category_id));
    }
    if let Some(d) = dets.iter().find(|d| d.category_id != category_id) {
        return Err(Error::InvalidArgument(format!(
            "pr_curve for category {category_id} received a detection of category {}",
            d.category_id
        )));
    }
    let refs: Vec<&Detection> = dets.iter().collect();
    curve_from_refs(category_id, &refs, gt, iou_threshold)
}

fn curve_from_refs(
    category_id: i64,
    dets: &[&Detection],
    gt: &Dataset,
    iou_threshold: f64,
) -> Result<PrCurve> {
    let gt_count = gt
        .images
        .iter()
        .flat_map(|i| &i.annotations)
        .filter(|a| a.category_id == category_id)
        .count();
    let verdicts = dataset_verdicts(dets, gt, iou_threshold)?;

    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));

    let (mut tp, mut fp) = (0usize, 0usize);
    let points = order
        .into_iter()
        .map(|i| {
            match verdicts[i] {
                Verdict::TruePositive => tp += 1,
                Verdict::FalsePositive => fp += 1,
            }
            PrPoint {
                recall: if gt_count > 0 {
                    tp as f64 / gt_count as f64
                } else {
                    0.0
                },
                precision: tp as f64 / (tp + fp) as f64,
                confidence: dets[i].confidence,
            }
        })
        .collect();
    Ok(PrCurve {
        category_id,
        points,
        gt_count,
    })
}

/// Interpolated precision at every point: the maximum precision over the
/// point itself and all later (higher-or-equal recall) points.
pub fn interpolated_envelope(curve: &PrCurve) -> Vec<f64> {
    let mut env: Vec<f64> = curve.points.iter().map(|p| p.precision).collect();
    for j in (0..env.len().saturating_sub(1)).rev() {
        env[j] = env[j].max(env[j + 1]);
    }
    env
}

/// All-point interpolated AP. A virtual point at recall 0 precedes the curve
/// so the first recall step is counted. An empty curve scores 0.
pub fn average_precision(curve: &PrCurve) -> f64 {
    let env = interpolated_envelope(curve);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (p, &prec) in curve.points.iter().zip(&env) {
        ap += (p.recall - prev_recall) * prec;
        prev_recall = p.recall;
    }
    ap
}

/// Harmonic mean of precision and recall; `None` when either is undefined
/// or both are zero.
pub fn f1_score(precision: Option<f64>, recall: Option<f64>) -> Option<f64> {
    let (p, r) = (precision?, recall?);
    (p + r > 0.0).then(|| 2.0 * p * r / (p + r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(serialize_with = "report::ser_opt_f64")]
    pub precision: Option<f64>,
    #[serde(serialize_with = "report::ser_opt_f64")]
    pub recall: Option<f64>,
    #[serde(serialize_with = "report::ser_opt_f64")]
    pub f1: Option<f64>,
    #[serde(serialize_with = "report::ser_f64")]
    pub map: f64,
    #[serde(rename = "per_class", serialize_with = "report::ser_map_f64")]
    pub per_class_ap: BTreeMap<i64, f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_threshold: f64,
    pub confidence_cut: f64,
    /// mAP averaged over IoU 0.50:0.05:0.95, when requested.
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        serialize_with = "report::ser_opt_f64"
    )]
    pub map_coco: Option<f64>,
}

impl EvalReport {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Full evaluation of one detector run.
///
/// mAP averages AP over categories that have at least one ground-truth box;
/// such categories without detections score 0. Precision, recall and F1 use
/// only detections with confidence >= `confidence_cut`.
pub fn evaluate(
    dets: &[Detection],
    gt: &Dataset,
    iou_threshold: f64,
    confidence_cut: f64,
) -> Result<EvalReport> {
    let mut gt_classes: BTreeMap<i64, usize> = BTreeMap::new();
    for a in gt.images.iter().flat_map(|i| &i.annotations) {
        *gt_classes.entry(a.category_id).or_default() += 1;
    }

    let mut per_class_ap = BTreeMap::new();
    for &cat in gt_classes.keys() {
        let class_dets: Vec<&Detection> = dets.iter().filter(|d| d.category_id == cat).collect();
        let curve = curve_from_refs(cat, &class_dets, gt, iou_threshold)?;
        per_class_ap.insert(cat, average_precision(&curve));
    }
    let map = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };

    let confident: Vec<&Detection> = dets
        .iter()
        .filter(|d| d.confidence >= confidence_cut)
        .collect();
    let verdicts = dataset_verdicts(&confident, gt, iou_threshold)?;
    let tp = verdicts
        .iter()
        .filter(|&&v| v == Verdict::TruePositive)
        .count();
    let fp = verdicts.len() - tp;
    let fn_ = gt.annotation_count() - tp;
    let pr = PrecisionRecall::from_counts(tp, fp, fn_);

    Ok(EvalReport {
        precision: pr.precision,
        recall: pr.recall,
        f1: f1_score(pr.precision, pr.recall),
        map,
        per_class_ap,
        tp,
        fp,
        fn_,
        iou_threshold,
        confidence_cut,
        map_coco: None,
    })
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * f64::from(i)).collect()
}

/// mAP averaged over several IoU thresholds (COCO-style when given
/// [`coco_iou_thresholds`]).
pub fn map_over_iou_thresholds(dets: &[Detection], gt: &Dataset, thresholds: &[f64]) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("no IoU thresholds given".into()));
    }
    let mut total = 0.0;
    for &t in thresholds {
        total += evaluate(dets, gt, t, DEFAULT_CONFIDENCE_CUT)?.map;
    }
    Ok(total / thresholds.len() as f64)
}
