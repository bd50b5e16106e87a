//! Gaussian statistics of ground-truth layouts and sampling of grounding
//! instructions for a layout-to-image generator.
//!
//! Each box is parameterized as normalized `(center_x, center_y, width,
//! height)`; every parameter and the per-image box count get an independent
//! normal distribution.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anno::{AnnotatedImage, Annotation, BoundingBox, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

impl Moments {
    /// Sample mean and unbiased variance; needs at least two values.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InsufficientSamples {
                needed: 2,
                got: values.len(),
            });
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Self { mean, variance })
    }

    fn normal(&self, name: &str) -> Result<Normal<f64>> {
        if !self.mean.is_finite() || !self.variance.is_finite() || self.variance < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "layout statistic {name} has invalid moments ({}, {})",
                self.mean, self.variance
            )));
        }
        Normal::new(self.mean, self.variance.sqrt())
            .map_err(|e| Error::InvalidArgument(format!("{name}: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutStats {
    pub count: Moments,
    pub center_x: Moments,
    pub center_y: Moments,
    pub width: Moments,
    pub height: Moments,
}

impl LayoutStats {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout stats serialize")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Pools per-image box counts and normalized box parameters over every
/// image that has at least one annotation.
pub fn fit_layout(ds: &Dataset) -> Result<LayoutStats> {
    let annotated: Vec<&AnnotatedImage> = ds
        .images
        .iter()
        .filter(|i| !i.annotations.is_empty())
        .collect();
    if annotated.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: annotated.len(),
        });
    }
    let counts: Vec<f64> = annotated.iter().map(|i| i.annotations.len() as f64).collect();
    let mut cx = Vec::new();
    let mut cy = Vec::new();
    let mut w = Vec::new();
    let mut h = Vec::new();
    for img in &annotated {
        let (iw, ih) = (f64::from(img.width), f64::from(img.height));
        for a in &img.annotations {
            let (x, y) = a.bbox.center();
            cx.push(x / iw);
            cy.push(y / ih);
            w.push(a.bbox.w() / iw);
            h.push(a.bbox.h() / ih);
        }
    }
    Ok(LayoutStats {
        count: Moments::of(&counts)?,
        center_x: Moments::of(&cx)?,
        center_y: Moments::of(&cy)?,
        width: Moments::of(&w)?,
        height: Moments::of(&h)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    /// Text phrase or reference-image path describing the object.
    pub reference: String,
    /// Box in normalized image coordinates.
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingInstruction {
    pub prompt: String,
    pub style_ref: Option<String>,
    pub entities: Vec<Entity>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOptions {
    pub k_max: usize,
    pub min_size: f64,
    pub max_attempts: usize,
    /// Background/style reference images, assigned round-robin.
    pub style_refs: Vec<String>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            k_max: 30,
            min_size: 0.01,
            max_attempts: 100,
            style_refs: Vec::new(),
        }
    }
}

/// Substitutes `{n}` (box count) and `{phrase}` in a prompt template.
pub fn render_prompt(template: &str, count: usize, phrase: &str) -> String {
    template
        .replace("{n}", &count.to_string())
        .replace("{phrase}", phrase)
}

struct Samplers {
    count: Normal<f64>,
    center_x: Normal<f64>,
    center_y: Normal<f64>,
    width: Normal<f64>,
    height: Normal<f64>,
}

impl Samplers {
    fn new(stats: &LayoutStats) -> Result<Self> {
        Ok(Self {
            count: stats.count.normal("count")?,
            center_x: stats.center_x.normal("center_x")?,
            center_y: stats.center_y.normal("center_y")?,
            width: stats.width.normal("width")?,
            height: stats.height.normal("height")?,
        })
    }

    fn sample_box(&self, rng: &mut ChaCha8Rng, opts: &SampleOptions) -> Result<BoundingBox> {
        let mut failed = "width";
        for _ in 0..opts.max_attempts {
            let cx = self.center_x.sample(rng);
            let cy = self.center_y.sample(rng);
            let w = self.width.sample(rng);
            let h = self.height.sample(rng);
            let x1 = (cx - 0.5 * w).clamp(0.0, 1.0);
            let x2 = (cx + 0.5 * w).clamp(0.0, 1.0);
            let y1 = (cy - 0.5 * h).clamp(0.0, 1.0);
            let y2 = (cy + 0.5 * h).clamp(0.0, 1.0);
            if x2 - x1 < opts.min_size {
                failed = "width";
            } else if y2 - y1 < opts.min_size {
                failed = "height";
            } else {
                return BoundingBox::from_corners(x1, y1, x2, y2);
            }
        }
        Err(Error::ResampleExhausted(failed))
    }
}

/// Samples `n_images` grounding instructions. Image `i` draws from its own
/// generator seeded with `seed + i`, so output is reproducible and can be
/// produced image by image.
pub fn sample_layout(
    stats: &LayoutStats,
    seed: u64,
    n_images: usize,
    entity_phrase: &str,
    prompt_template: &str,
    opts: &SampleOptions,
) -> Result<Vec<GroundingInstruction>> {
    if n_images == 0 {
        return Err(Error::InvalidArgument("n_images must be at least 1".into()));
    }
    if opts.k_max == 0 {
        return Err(Error::InvalidArgument("k_max must be at least 1".into()));
    }
    let samplers = Samplers::new(stats)?;
    (0..n_images)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            sample_one(&samplers, &mut rng, i, entity_phrase, prompt_template, opts)
        })
        .collect()
}

fn sample_one(
    samplers: &Samplers,
    rng: &mut ChaCha8Rng,
    index: usize,
    entity_phrase: &str,
    prompt_template: &str,
    opts: &SampleOptions,
) -> Result<GroundingInstruction> {
    let raw = samplers.count.sample(rng).round();
    let k = if raw.is_finite() {
        raw.clamp(1.0, opts.k_max as f64) as usize
    } else {
        1
    };
    let entities = (0..k)
        .map(|_| {
            Ok(Entity {
                reference: entity_phrase.to_owned(),
                bbox: samplers.sample_box(rng, opts)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let style_ref = (!opts.style_refs.is_empty())
        .then(|| opts.style_refs[index % opts.style_refs.len()].clone());
    Ok(GroundingInstruction {
        prompt: render_prompt(prompt_template, k, entity_phrase),
        style_ref,
        entities,
    })
}

/// Turns instructions into a ground-truth dataset on a `width x height`
/// canvas with a single category, as a generator would be expected to honor
/// them.
pub fn render_dataset(
    instructions: &[GroundingInstruction],
    width: u32,
    height: u32,
    category: (i64, &str),
) -> Result<Dataset> {
    let (fw, fh) = (f64::from(width), f64::from(height));
    let images = instructions
        .iter()
        .enumerate()
        .map(|(i, ins)| {
            let annotations = ins
                .entities
                .iter()
                .map(|e| {
                    let [x1, y1, x2, y2] = e.bbox.corners();
                    Ok(Annotation {
                        bbox: BoundingBox::from_corners(x1 * fw, y1 * fh, x2 * fw, y2 * fh)?,
                        category_id: category.0,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AnnotatedImage {
                image_id: format!("gen_{i:06}"),
                width,
                height,
                annotations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut categories = BTreeMap::new();
    categories.insert(category.0, category.1.to_owned());
    Dataset::new(categories, images)
}

// ---------------------------------------------------------------------------
// Instruction file

#[derive(Debug, Serialize, Deserialize)]
struct RawEntity {
    #[serde(rename = "ref")]
    reference: String,
    /// `[cx, cy, w, h]`, normalized.
    bbox_norm: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct RawInstruction {
    prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    style_ref: Option<String>,
    entities: Vec<RawEntity>,
}

pub fn instructions_to_json_string(instructions: &[GroundingInstruction]) -> String {
    let raw: Vec<RawInstruction> = instructions
        .iter()
        .map(|ins| RawInstruction {
            prompt: ins.prompt.clone(),
            style_ref: ins.style_ref.clone(),
            entities: ins
                .entities
                .iter()
                .map(|e| {
                    let (cx, cy) = e.bbox.center();
                    RawEntity {
                        reference: e.reference.clone(),
                        bbox_norm: [cx, cy, e.bbox.w(), e.bbox.h()],
                    }
                })
                .collect(),
        })
        .collect();
    serde_json::to_string_pretty(&raw).expect("instructions serialize")
}

pub fn parse_instructions(text: &str) -> Result<Vec<GroundingInstruction>> {
    let raw: Vec<RawInstruction> = serde_json::from_str(text)?;
    raw.into_iter()
        .map(|r| {
            if r.entities.is_empty() {
                return Err(Error::Schema("instruction without entities".into()));
            }
            let entities = r
                .entities
                .into_iter()
                .map(|e| {
                    let [cx, cy, w, h] = e.bbox_norm;
                    let bbox = BoundingBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h)?;
                    let [x1, y1, x2, y2] = bbox.corners();
                    let eps = 1e-9;
                    if x1 < -eps || y1 < -eps || x2 > 1.0 + eps || y2 > 1.0 + eps {
                        return Err(Error::Schema(format!(
                            "normalized box {:?} leaves the unit square",
                            e.bbox_norm
                        )));
                    }
                    Ok(Entity {
                        reference: e.reference,
                        bbox,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(GroundingInstruction {
                prompt: r.prompt,
                style_ref: r.style_ref,
                entities,
            })
        })
        .collect()
}
