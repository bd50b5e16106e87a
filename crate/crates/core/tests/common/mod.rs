#![allow(dead_code)]

use std::collections::BTreeMap;

use detcurate::{AnnotatedImage, Annotation, BoundingBox, Dataset, Detection};
use rand::Rng;

pub fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
    BoundingBox::new(x, y, w, h).unwrap()
}

pub fn categories(ids: &[i64]) -> BTreeMap<i64, String> {
    ids.iter().map(|&i| (i, format!("class{i}"))).collect()
}

/// Builds a dataset plus detections with exactly `tp` true positives,
/// `fp` false positives and `fn_` missed boxes at IoU 0.5. Items sit in
/// disjoint 100 px cells, one hundred per 1000 x 1000 image.
pub fn counts_fixture(tp: usize, fp: usize, fn_: usize) -> (Dataset, Vec<Detection>) {
    let total = tp + fp + fn_;
    let n_images = total.div_ceil(100);
    let mut images: Vec<AnnotatedImage> = (0..n_images)
        .map(|i| AnnotatedImage {
            image_id: format!("img{i:04}"),
            width: 1000,
            height: 1000,
            annotations: Vec::new(),
        })
        .collect();
    let mut dets = Vec::new();
    for k in 0..total {
        let (img, cell) = (k / 100, k % 100);
        let b = bx(
            (cell % 10) as f64 * 100.0 + 10.0,
            (cell / 10) as f64 * 100.0 + 10.0,
            50.0,
            50.0,
        );
        let id = images[img].image_id.clone();
        if k < tp + fn_ {
            images[img].annotations.push(Annotation {
                bbox: b,
                category_id: 1,
            });
        }
        if k < tp || k >= tp + fn_ {
            let conf = if k < tp { 0.9 } else { 0.8 };
            dets.push(Detection::new(id, 1, b, conf).unwrap());
        }
    }
    (Dataset::new(categories(&[1]), images).unwrap(), dets)
}

/// Random box inside a `size` x `size` canvas, biased towards overlaps.
pub fn random_box(rng: &mut impl Rng, size: f64) -> BoundingBox {
    let w = rng.random_range(0.1..0.5) * size;
    let h = rng.random_range(0.1..0.5) * size;
    let x = rng.random_range(0.0..size - w);
    let y = rng.random_range(0.0..size - h);
    bx(x, y, w, h)
}

/// Jitters `b` so it usually overlaps it above IoU 0.5.
pub fn near(rng: &mut impl Rng, b: &BoundingBox) -> BoundingBox {
    let s = 0.25;
    let dx = rng.random_range(-s..s) * b.w();
    let dy = rng.random_range(-s..s) * b.h();
    let sw = rng.random_range(0.8..1.25);
    let sh = rng.random_range(0.8..1.25);
    bx(b.x() + dx, b.y() + dy, b.w() * sw, b.h() * sh)
}

/// Reference IoU written from the corner definition.
pub fn ref_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x() + a.w()).min(b.x() + b.w()) - a.x().max(b.x());
    let iy = (a.y() + a.h()).min(b.y() + b.h()) - a.y().max(b.y());
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.w() * a.h() + b.w() * b.h() - inter)
}

/// Small random evaluation instance: up to 5 images, up to 2 classes and up
/// to 10 detections with distinct confidences.
pub fn random_instance(rng: &mut impl Rng) -> (Dataset, Vec<Detection>) {
    let n_classes = rng.random_range(1..=2);
    let class_ids: Vec<i64> = (1..=n_classes).collect();
    let n_images = rng.random_range(1..=5);
    let images: Vec<AnnotatedImage> = (0..n_images)
        .map(|i| AnnotatedImage {
            image_id: format!("i{i}"),
            width: 100,
            height: 100,
            annotations: (0..rng.random_range(0..=3))
                .map(|_| Annotation {
                    bbox: random_box(rng, 100.0),
                    category_id: class_ids[rng.random_range(0..class_ids.len())],
                })
                .collect(),
        })
        .collect();
    let n_dets = rng.random_range(0..=10);
    let mut confidences: Vec<f64> = Vec::new();
    while confidences.len() < n_dets {
        let c: f64 = rng.random_range(0.01..1.0);
        if confidences.iter().all(|&o| o != c) {
            confidences.push(c);
        }
    }
    let dets = confidences
        .into_iter()
        .map(|c| {
            let img = &images[rng.random_range(0..images.len())];
            let (bbox, cat) = match img.annotations.get(rng.random_range(0..4)) {
                Some(a) if rng.random_bool(0.7) => (near(rng, &a.bbox), a.category_id),
                _ => (
                    random_box(rng, 100.0),
                    class_ids[rng.random_range(0..class_ids.len())],
                ),
            };
            Detection::new(img.image_id.clone(), cat, bbox, c).unwrap()
        })
        .collect();
    (Dataset::new(categories(&class_ids), images).unwrap(), dets)
}

/// Independent mAP reference: for every distinct confidence threshold the
/// detections at or above it are matched from scratch, giving one
/// (recall, precision) point; the max-precision envelope is integrated over
/// the recall breakpoints, starting from recall 0.
pub fn brute_force_map(gt: &Dataset, dets: &[Detection], iou_thr: f64) -> f64 {
    let mut aps = Vec::new();
    for &cat in gt.categories.keys() {
        let n_gt: usize = gt
            .images
            .iter()
            .flat_map(|i| &i.annotations)
            .filter(|a| a.category_id == cat)
            .count();
        if n_gt == 0 {
            continue;
        }
        let cat_dets: Vec<&Detection> = dets.iter().filter(|d| d.category_id == cat).collect();
        let mut thresholds: Vec<f64> = cat_dets.iter().map(|d| d.confidence).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        let mut points: Vec<(f64, f64)> = Vec::new();
        for &t in &thresholds {
            let kept: Vec<&Detection> = cat_dets.iter().copied().filter(|d| d.confidence >= t).collect();
            let mut tp = 0usize;
            for img in &gt.images {
                let gts: Vec<BoundingBox> = img
                    .annotations
                    .iter()
                    .filter(|a| a.category_id == cat)
                    .map(|a| a.bbox)
                    .collect();
                let mut mine: Vec<&Detection> =
                    kept.iter().copied().filter(|d| d.image_id == img.image_id).collect();
                mine.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
                let mut used = vec![false; gts.len()];
                for d in mine {
                    let mut best: Option<(usize, f64)> = None;
                    for (g, gb) in gts.iter().enumerate() {
                        if used[g] {
                            continue;
                        }
                        let v = ref_iou(&d.bbox, gb);
                        if v >= iou_thr && best.is_none_or(|(_, bv)| v > bv) {
                            best = Some((g, v));
                        }
                    }
                    if let Some((g, _)) = best {
                        used[g] = true;
                        tp += 1;
                    }
                }
            }
            points.push((tp as f64 / n_gt as f64, tp as f64 / kept.len() as f64));
        }
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for i in 0..points.len() {
            let r = points[i].0;
            if r > prev_recall {
                let p = points[i..].iter().map(|&(_, p)| p).fold(0.0, f64::max);
                ap += (r - prev_recall) * p;
                prev_recall = r;
            }
        }
        aps.push(ap);
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}
