//! Whole-image filter for generated datasets based on how well a filtering
//! detector recovers each image's intended layout.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::anno::{Dataset, Detection};
use crate::error::{Error, Result};
use crate::geom::{match_image_by_class, PrecisionRecall};
use crate::report;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    Pass,
    LowPrecision,
    LowRecall,
    /// No ground truth and no detections: nothing contradicts the layout.
    EmptyUndefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub image_id: String,
    #[serde(flatten)]
    pub metrics: PrecisionRecall,
    pub kept: bool,
    pub reason: FilterReason,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrFilterConfig {
    pub precision_threshold: f64,
    pub recall_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for PrFilterConfig {
    fn default() -> Self {
        Self {
            precision_threshold: 1.0,
            recall_threshold: 1.0,
            iou_threshold: 0.5,
        }
    }
}

impl PrFilterConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("precision threshold", self.precision_threshold),
            ("recall threshold", self.recall_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "IoU threshold {} outside (0, 1]",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// Decides one image. Undefined precision (no detections) passes the
/// precision test and undefined recall (no ground truth) passes the recall
/// test.
pub fn decide(image_id: &str, metrics: PrecisionRecall, cfg: &PrFilterConfig) -> FilterDecision {
    let precision_ok = metrics
        .precision
        .is_none_or(|p| p >= cfg.precision_threshold);
    let recall_ok = metrics.recall.is_none_or(|r| r >= cfg.recall_threshold);
    let reason = match (precision_ok, recall_ok) {
        (true, true) if metrics.precision.is_none() && metrics.recall.is_none() => {
            FilterReason::EmptyUndefined
        }
        (true, true) => FilterReason::Pass,
        (false, _) => FilterReason::LowPrecision,
        (true, false) => FilterReason::LowRecall,
    };
    FilterDecision {
        image_id: image_id.to_owned(),
        metrics,
        kept: precision_ok && recall_ok,
        reason,
    }
}

/// Runs the filter over every image of `gen_gt`. Returns the kept
/// sub-dataset (annotations untouched) and one decision per input image.
pub fn pr_filter(
    gen_gt: &Dataset,
    filter_dets: &[Detection],
    cfg: &PrFilterConfig,
) -> Result<(Dataset, Vec<FilterDecision>)> {
    cfg.validate()?;
    let index = gen_gt.index();
    let mut per_image: HashMap<usize, Vec<&Detection>> = HashMap::new();
    for d in filter_dets {
        let &i = index
            .get(d.image_id.as_str())
            .ok_or_else(|| Error::UnknownImage(d.image_id.clone()))?;
        per_image.entry(i).or_default().push(d);
    }

    let decisions: Vec<FilterDecision> = gen_gt
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let gts: Vec<_> = img
                .annotations
                .iter()
                .map(|a| (a.bbox, a.category_id))
                .collect();
            let dets: Vec<_> = per_image
                .get(&i)
                .map(|ds| {
                    ds.iter()
                        .map(|d| (d.bbox, d.category_id, d.confidence))
                        .collect()
                })
                .unwrap_or_default();
            let m = match_image_by_class(&gts, &dets, cfg.iou_threshold);
            decide(&img.image_id, m.precision_recall(), cfg)
        })
        .collect();

    let kept = Dataset {
        categories: gen_gt.categories.clone(),
        images: gen_gt
            .images
            .iter()
            .zip(&decisions)
            .filter(|(_, d)| d.kept)
            .map(|(img, _)| img.clone())
            .collect(),
    };
    Ok((kept, decisions))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrFilterReport {
    pub precision_threshold: f64,
    pub recall_threshold: f64,
    pub iou_threshold: f64,
    pub images: usize,
    pub kept: usize,
    #[serde(serialize_with = "report::ser_f64")]
    pub kept_fraction: f64,
    pub decisions: Vec<FilterDecision>,
}

impl PrFilterReport {
    pub fn new(cfg: &PrFilterConfig, decisions: Vec<FilterDecision>) -> Self {
        let kept = decisions.iter().filter(|d| d.kept).count();
        let images = decisions.len();
        Self {
            precision_threshold: cfg.precision_threshold,
            recall_threshold: cfg.recall_threshold,
            iou_threshold: cfg.iou_threshold,
            images,
            kept,
            kept_fraction: if images == 0 {
                1.0
            } else {
                kept as f64 / images as f64
            },
            decisions,
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("filter report serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
