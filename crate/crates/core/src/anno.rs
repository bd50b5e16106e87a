//! Ground-truth and detection records, their JSON file formats, and the
//! small-box exclusion rule.
//!
//! Boxes use the COCO `(x, y, w, h)` convention with a top-left origin.
//! Geometry code works on corners via [`BoundingBox::corners`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box with strictly positive width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::Schema(format!(
                "bbox [{x}, {y}, {w}, {h}] has non-finite coordinates"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Schema(format!(
                "bbox [{x}, {y}, {w}, {h}] must have positive width and height"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// `[x1, y1, x2, y2]`.
    pub fn corners(&self) -> [f64; 4] {
        [self.x, self.y, self.x + self.w, self.y + self.h]
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    /// Multiplies every coordinate by `s` (> 0).
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            x: self.x * s,
            y: self.y * s,
            w: self.w * s,
            h: self.h * s,
        }
    }

    /// Intersection with `[0, width] x [0, height]`, or `None` when nothing
    /// of positive area remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<Self> {
        let (x, w) = clip_axis(self.x, self.w, width)?;
        let (y, h) = clip_axis(self.y, self.h, height)?;
        Some(Self { x, y, w, h })
    }
}

/// Clips `[lo, lo + len]` to `[0, limit]`. An axis already inside is
/// returned untouched so that clipping is idempotent.
fn clip_axis(lo: f64, len: f64, limit: f64) -> Option<(f64, f64)> {
    if lo >= 0.0 && lo + len <= limit {
        return Some((lo, len));
    }
    let (a, b) = (lo.max(0.0), (lo + len).min(limit));
    (b > a).then_some((a, b - a))
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x, self.y, self.w, self.h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub bbox: BoundingBox,
    pub category_id: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<Annotation>,
}

impl AnnotatedImage {
    pub fn area(&self) -> f64 {
        f64::from(self.width) * f64::from(self.height)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub category_id: i64,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(
        image_id: impl Into<String>,
        category_id: i64,
        bbox: BoundingBox,
        confidence: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Schema(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Self {
            image_id: image_id.into(),
            category_id,
            bbox,
            confidence,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub categories: BTreeMap<i64, String>,
    pub images: Vec<AnnotatedImage>,
}

impl Dataset {
    /// Builds a dataset after checking id uniqueness, image dimensions and
    /// category references.
    pub fn new(categories: BTreeMap<i64, String>, images: Vec<AnnotatedImage>) -> Result<Self> {
        let ds = Self { categories, images };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.images.len());
        for img in &self.images {
            if !seen.insert(img.image_id.as_str()) {
                return Err(Error::Schema(format!(
                    "duplicate image id {:?}",
                    img.image_id
                )));
            }
            if img.width == 0 || img.height == 0 {
                return Err(Error::Schema(format!(
                    "image {:?} has non-positive dimensions",
                    img.image_id
                )));
            }
            for ann in &img.annotations {
                if !self.categories.contains_key(&ann.category_id) {
                    return Err(Error::UnknownCategory(ann.category_id));
                }
            }
        }
        Ok(())
    }

    pub fn annotation_count(&self) -> usize {
        self.images.iter().map(|i| i.annotations.len()).sum()
    }

    /// Map from image id to position in `images`.
    pub fn index(&self) -> HashMap<&str, usize> {
        self.images
            .iter()
            .enumerate()
            .map(|(i, img)| (img.image_id.as_str(), i))
            .collect()
    }

    pub fn image(&self, image_id: &str) -> Option<&AnnotatedImage> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    pub fn to_json_string(&self) -> String {
        let raw = RawGroundTruth::from(self);
        serde_json::to_string_pretty(&raw).expect("ground truth serializes")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

/// A loaded value together with the non-fatal issues found while loading.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded<T> {
    pub value: T,
    pub warnings: Vec<String>,
}

impl<T> Loaded<T> {
    pub fn clean(value: T) -> Self {
        Self {
            value,
            warnings: Vec::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// File schema

/// Image ids are strings; integer ids from COCO exports are accepted and
/// stringified.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
enum RawId {
    Str(String),
    Int(i64),
}

impl From<RawId> for String {
    fn from(id: RawId) -> Self {
        match id {
            RawId::Str(s) => s,
            RawId::Int(i) => i.to_string(),
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct RawImage {
    id: RawId,
    width: i64,
    height: i64,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawAnnotation {
    image_id: RawId,
    category_id: i64,
    bbox: Vec<f64>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawCategory {
    id: i64,
    name: String,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawGroundTruth {
    images: Vec<RawImage>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<RawCategory>,
}

impl From<&Dataset> for RawGroundTruth {
    fn from(ds: &Dataset) -> Self {
        Self {
            images: ds
                .images
                .iter()
                .map(|i| RawImage {
                    id: RawId::Str(i.image_id.clone()),
                    width: i64::from(i.width),
                    height: i64::from(i.height),
                })
                .collect(),
            annotations: ds
                .images
                .iter()
                .flat_map(|i| {
                    i.annotations.iter().map(move |a| RawAnnotation {
                        image_id: RawId::Str(i.image_id.clone()),
                        category_id: a.category_id,
                        bbox: <[f64; 4]>::from(a.bbox).to_vec(),
                    })
                })
                .collect(),
            categories: ds
                .categories
                .iter()
                .map(|(&id, name)| RawCategory {
                    id,
                    name: name.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct RawDetection {
    image_id: RawId,
    category_id: i64,
    bbox: Vec<f64>,
    score: f64,
}

fn parse_bbox(v: &[f64]) -> Result<BoundingBox> {
    match v {
        [x, y, w, h] => BoundingBox::new(*x, *y, *w, *h),
        _ => Err(Error::Schema(format!(
            "bbox must have 4 numbers, got {}",
            v.len()
        ))),
    }
}

fn positive_dim(v: i64, what: &str, id: &str) -> Result<u32> {
    u32::try_from(v)
        .ok()
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Schema(format!("image {id:?}: {what} must be positive, got {v}")))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<Loaded<Dataset>> {
    parse_ground_truth(&read_text(path.as_ref())?)
}

/// Parses the ground-truth JSON schema. Boxes reaching past the image are
/// clipped; boxes entirely outside are dropped. Both produce warnings.
pub fn parse_ground_truth(text: &str) -> Result<Loaded<Dataset>> {
    let raw: RawGroundTruth = serde_json::from_str(text)?;
    let mut warnings = Vec::new();

    let mut categories = BTreeMap::new();
    for c in raw.categories {
        if categories.insert(c.id, c.name).is_some() {
            return Err(Error::Schema(format!("duplicate category id {}", c.id)));
        }
    }

    let mut images = Vec::with_capacity(raw.images.len());
    let mut index: HashMap<String, usize> = HashMap::with_capacity(raw.images.len());
    for ri in raw.images {
        let image_id = String::from(ri.id);
        let width = positive_dim(ri.width, "width", &image_id)?;
        let height = positive_dim(ri.height, "height", &image_id)?;
        if index.insert(image_id.clone(), images.len()).is_some() {
            return Err(Error::Schema(format!("duplicate image id {image_id:?}")));
        }
        images.push(AnnotatedImage {
            image_id,
            width,
            height,
            annotations: Vec::new(),
        });
    }

    for ra in raw.annotations {
        let image_id = String::from(ra.image_id);
        let &slot = index
            .get(&image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.clone()))?;
        if !categories.contains_key(&ra.category_id) {
            return Err(Error::UnknownCategory(ra.category_id));
        }
        let bbox = parse_bbox(&ra.bbox)?;
        let img = &mut images[slot];
        match bbox.clip(f64::from(img.width), f64::from(img.height)) {
            Some(clipped) => {
                if clipped != bbox {
                    warnings.push(format!(
                        "image {image_id:?}: box {bbox} clipped to {clipped}"
                    ));
                }
                img.annotations.push(Annotation {
                    bbox: clipped,
                    category_id: ra.category_id,
                });
            }
            None => warnings.push(format!(
                "image {image_id:?}: box {bbox} lies outside the image and was dropped"
            )),
        }
    }

    Ok(Loaded {
        value: Dataset { categories, images },
        warnings,
    })
}

pub fn load_detections(path: impl AsRef<Path>, gt: &Dataset) -> Result<Vec<Detection>> {
    parse_detections(&read_text(path.as_ref())?, gt)
}

/// Parses a detection list, checking every image id against `gt`. The result
/// is sorted by image id, then by descending confidence; ties keep file order.
pub fn parse_detections(text: &str, gt: &Dataset) -> Result<Vec<Detection>> {
    let raw: Vec<RawDetection> = serde_json::from_str(text)?;
    let known = gt.index();
    let mut dets = raw
        .into_iter()
        .map(|r| {
            let image_id = String::from(r.image_id);
            if !known.contains_key(image_id.as_str()) {
                return Err(Error::UnknownImage(image_id));
            }
            let bbox = parse_bbox(&r.bbox)?;
            Detection::new(image_id, r.category_id, bbox, r.score)
        })
        .collect::<Result<Vec<_>>>()?;
    sort_detections(&mut dets);
    Ok(dets)
}

pub(crate) fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then(b.confidence.total_cmp(&a.confidence))
    });
}

pub fn detections_to_json_string(dets: &[Detection]) -> String {
    let raw: Vec<RawDetection> = dets
        .iter()
        .map(|d| RawDetection {
            image_id: RawId::Str(d.image_id.clone()),
            category_id: d.category_id,
            bbox: <[f64; 4]>::from(d.bbox).to_vec(),
            score: d.confidence,
        })
        .collect();
    serde_json::to_string_pretty(&raw).expect("detections serialize")
}

pub fn write_detections(path: impl AsRef<Path>, dets: &[Detection]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, detections_to_json_string(dets)).map_err(|e| Error::io(path, e))
}

/// Default area fraction below which boxes are excluded (0.2% of the image).
pub const DEFAULT_MIN_AREA_FRACTION: f64 = 0.002;

/// Drops annotations whose area is strictly less than
/// `min_area_fraction * width * height`. Images are kept even when emptied.
/// Returns the filtered dataset and the number of removed annotations.
pub fn filter_small_boxes(ds: &Dataset, min_area_fraction: f64) -> Result<(Dataset, usize)> {
    if !(0.0..1.0).contains(&min_area_fraction) {
        return Err(Error::InvalidArgument(format!(
            "min_area_fraction must lie in [0, 1), got {min_area_fraction}"
        )));
    }
    let mut removed = 0;
    let images = ds
        .images
        .iter()
        .map(|img| {
            let min_area = min_area_fraction * img.area();
            let before = img.annotations.len();
            let annotations: Vec<_> = img
                .annotations
                .iter()
                .filter(|a| a.bbox.area() >= min_area)
                .copied()
                .collect();
            removed += before - annotations.len();
            AnnotatedImage {
                annotations,
                ..img.clone()
            }
        })
        .collect();
    Ok((
        Dataset {
            categories: ds.categories.clone(),
            images,
        },
        removed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bbox(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    const MINIMAL: &str = r#"{
        "images": [{"id": "a", "width": 100, "height": 100}],
        "annotations": [{"image_id": "a", "category_id": 1, "bbox": [10, 10, 20, 20]}],
        "categories": [{"id": 1, "name": "car"}]
    }"#;

    #[test]
    fn minimal_file_loads() {
        let loaded = parse_ground_truth(MINIMAL).unwrap();
        assert!(loaded.warnings.is_empty());
        let ds = loaded.value;
        assert_eq!(ds.images.len(), 1);
        assert_eq!(ds.annotation_count(), 1);
        assert_eq!(ds.images[0].annotations[0].bbox, bbox(10.0, 10.0, 20.0, 20.0));
        assert_eq!(ds.categories[&1], "car");
    }

    #[test]
    fn box_past_edge_is_clipped_with_warning() {
        let text = MINIMAL.replace("[10, 10, 20, 20]", "[90, 10, 20, 20]");
        let loaded = parse_ground_truth(&text).unwrap();
        assert_eq!(loaded.warnings.len(), 1);
        assert!(loaded.warnings[0].contains("clipped"));
        assert_eq!(
            loaded.value.images[0].annotations[0].bbox,
            bbox(90.0, 10.0, 10.0, 20.0)
        );
    }

    #[test]
    fn box_fully_outside_is_dropped_with_warning() {
        let text = MINIMAL.replace("[10, 10, 20, 20]", "[150, 10, 20, 20]");
        let loaded = parse_ground_truth(&text).unwrap();
        assert_eq!(loaded.value.annotation_count(), 0);
        assert!(loaded.warnings[0].contains("dropped"));
    }

    #[test]
    fn unknown_category_is_rejected() {
        let text = MINIMAL.replace("\"category_id\": 1", "\"category_id\": 7");
        let err = parse_ground_truth(&text).unwrap_err();
        assert!(err.to_string().contains("unknown category"), "{err}");
    }

    #[test]
    fn schema_violations_are_rejected() {
        let zero_width = MINIMAL.replace("\"width\": 100", "\"width\": 0");
        assert!(matches!(
            parse_ground_truth(&zero_width),
            Err(Error::Schema(_))
        ));
        let bad_box = MINIMAL.replace("[10, 10, 20, 20]", "[10, 10, 0, 20]");
        assert!(matches!(parse_ground_truth(&bad_box), Err(Error::Schema(_))));
        let short_box = MINIMAL.replace("[10, 10, 20, 20]", "[10, 10, 20]");
        assert!(matches!(
            parse_ground_truth(&short_box),
            Err(Error::Schema(_))
        ));
        let missing = r#"{"images": [], "annotations": []}"#;
        assert!(matches!(parse_ground_truth(missing), Err(Error::Json(_))));
    }

    #[test]
    fn duplicate_image_ids_are_rejected() {
        let text = MINIMAL.replace(
            r#"[{"id": "a", "width": 100, "height": 100}]"#,
            r#"[{"id": "a", "width": 100, "height": 100}, {"id": "a", "width": 5, "height": 5}]"#,
        );
        assert!(matches!(parse_ground_truth(&text), Err(Error::Schema(_))));
    }

    #[test]
    fn integer_image_ids_are_accepted() {
        let text = MINIMAL.replace("\"id\": \"a\"", "\"id\": 42").replace("\"image_id\": \"a\"", "\"image_id\": 42");
        let ds = parse_ground_truth(&text).unwrap().value;
        assert_eq!(ds.images[0].image_id, "42");
    }

    #[test]
    fn detections_sorted_by_descending_confidence() {
        let gt = parse_ground_truth(MINIMAL).unwrap().value;
        let text = r#"[
            {"image_id": "a", "category_id": 1, "bbox": [0, 0, 5, 5], "score": 0.3},
            {"image_id": "a", "category_id": 1, "bbox": [1, 1, 5, 5], "score": 0.9}
        ]"#;
        let dets = parse_detections(text, &gt).unwrap();
        let scores: Vec<f64> = dets.iter().map(|d| d.confidence).collect();
        assert_eq!(scores, vec![0.9, 0.3]);
    }

    #[test]
    fn empty_detection_list() {
        let gt = parse_ground_truth(MINIMAL).unwrap().value;
        assert!(parse_detections("[]", &gt).unwrap().is_empty());
    }

    #[test]
    fn detection_validation() {
        let gt = parse_ground_truth(MINIMAL).unwrap().value;
        let high = r#"[{"image_id": "a", "category_id": 1, "bbox": [0, 0, 5, 5], "score": 1.5}]"#;
        assert!(parse_detections(high, &gt).is_err());
        let unknown = r#"[{"image_id": "zz", "category_id": 1, "bbox": [0, 0, 5, 5], "score": 0.5}]"#;
        assert!(matches!(
            parse_detections(unknown, &gt),
            Err(Error::UnknownImage(_))
        ));
    }

    fn single_box_dataset(w: f64, h: f64) -> Dataset {
        let mut categories = BTreeMap::new();
        categories.insert(1, "fish".to_string());
        Dataset::new(
            categories,
            vec![AnnotatedImage {
                image_id: "img".into(),
                width: 100,
                height: 100,
                annotations: vec![Annotation {
                    bbox: bbox(0.0, 0.0, w, h),
                    category_id: 1,
                }],
            }],
        )
        .unwrap()
    }

    #[test]
    fn small_box_below_threshold_is_removed() {
        // 0.2% of 100x100 is 20; 4x4 = 16 falls below.
        let (out, removed) = filter_small_boxes(&single_box_dataset(4.0, 4.0), 0.002).unwrap();
        assert_eq!(removed, 1);
        assert_eq!(out.images.len(), 1);
        assert_eq!(out.annotation_count(), 0);
    }

    #[test]
    fn small_box_on_threshold_is_kept() {
        let (out, removed) = filter_small_boxes(&single_box_dataset(5.0, 4.0), 0.002).unwrap();
        assert_eq!(removed, 0);
        assert_eq!(out.annotation_count(), 1);
    }

    #[test]
    fn zero_fraction_is_identity() {
        let ds = single_box_dataset(0.5, 0.5);
        let (out, removed) = filter_small_boxes(&ds, 0.0).unwrap();
        assert_eq!(removed, 0);
        assert_eq!(out, ds);
    }

    #[test]
    fn fraction_out_of_range_is_rejected() {
        assert!(filter_small_boxes(&single_box_dataset(5.0, 5.0), 1.0).is_err());
        assert!(filter_small_boxes(&single_box_dataset(5.0, 5.0), -0.1).is_err());
    }
}
