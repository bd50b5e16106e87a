//! Desk-scale stand-in for the generate / pretrain / fine-tune pipeline.
//!
//! Scenes are unit-square canvases observed through a fixed grid of square
//! anchors. Every anchor carries a feature vector: a fixed object signature
//! scaled by the anchor's best IoU with a visible object, plus Gaussian noise.
//! Ground-truth boxes come from the layout sampler and are snapped to the
//! anchor cell holding their center, so each object owns exactly one anchor.
//!
//! Generated scenes can be corrupted the way layout-to-image output fails:
//! an intended object may not be drawn (its label stays, its signal does
//! not), a phantom object may be drawn where no box was requested, and the
//! whole domain may be offset.
//!
//! The detector is a per-anchor logistic scorer trained with
//! [`crate::optim`]; evaluation goes through [`crate::metrics::evaluate`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anno::{AnnotatedImage, Annotation, BoundingBox, Dataset, Detection};
use crate::error::{Error, Result};
use crate::geom::iou;
use crate::layout::{self, fit_layout, LayoutStats, Moments, SampleOptions};
use crate::metrics;
use crate::optim::{
    EarlyStopper, Hyper, LrSchedule, OptimizerState, StopVerdict, TraceAction, TraceRow,
};
use crate::prfilter::{self, PrFilterConfig};
use crate::report;

/// Side of the virtual canvas, in pixels, used when scenes are evaluated.
pub const CANVAS_PX: u32 = 256;
const CATEGORY: i64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    /// Probability that an intended object is not drawn.
    pub p_miss: f64,
    /// Probability, per intended object, that a phantom object is drawn in
    /// an empty cell.
    pub p_spur: f64,
    /// Offset added to every feature of a corrupted scene.
    pub domain_shift: Vec<f64>,
    /// Extra feature noise on top of the scene noise.
    pub noise_sigma: f64,
}

impl CorruptionConfig {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        for (name, p) in [("p_miss", self.p_miss), ("p_spur", self.p_spur)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument("noise_sigma must be non-negative".into()));
        }
        if !self.domain_shift.is_empty() && self.domain_shift.len() != feature_dim {
            return Err(Error::DimensionMismatch(feature_dim, self.domain_shift.len()));
        }
        Ok(())
    }
}

/// Observation model shared by every scene of one experiment seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneModel {
    pub grid: usize,
    /// Unit-norm direction along which objects show up in anchor features.
    pub signature: Vec<f64>,
    pub signal: f64,
    pub noise_sigma: f64,
}

impl SceneModel {
    pub fn new(grid: usize, feature_dim: usize, signal: f64, noise_sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5157, 0));
        let mut v: Vec<f64> = (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Self {
            grid,
            signature: v,
            signal,
            noise_sigma,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.signature.len()
    }

    pub fn anchor_count(&self) -> usize {
        self.grid * self.grid
    }

    /// Normalized box of anchor `a` (row-major).
    pub fn anchor_box(&self, a: usize) -> BoundingBox {
        let s = 1.0 / self.grid as f64;
        let (row, col) = (a / self.grid, a % self.grid);
        BoundingBox::new(col as f64 * s, row as f64 * s, s, s).expect("anchor box is valid")
    }

    fn cell_of(&self, b: &BoundingBox) -> usize {
        let (cx, cy) = b.center();
        let g = self.grid as f64;
        let col = ((cx * g).floor() as usize).min(self.grid - 1);
        let row = ((cy * g).floor() as usize).min(self.grid - 1);
        row * self.grid + col
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    pub image_id: String,
    /// Normalized ground-truth boxes (anchor-aligned).
    pub gt_boxes: Vec<BoundingBox>,
    /// One feature vector per anchor, row-major.
    pub features: Vec<Vec<f64>>,
    /// Anchor labels: IoU with some ground-truth box >= 0.5.
    pub labels: Vec<bool>,
}

impl ToyScene {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.image_id.as_bytes().to_vec();
        for b in &self.gt_boxes {
            for c in <[f64; 4]>::from(*b) {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        for f in self.features.iter().flatten() {
            out.extend_from_slice(&f.to_le_bytes());
        }
        out.extend(self.labels.iter().map(|&l| u8::from(l)));
        out
    }
}

/// Deterministic 64-bit mix of a seed with a stream tag and an index.
fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws one scene. The layout comes from `stats`; `corruption` marks the
/// scene as generated output.
pub fn gen_scene(
    stats: &LayoutStats,
    seed: u64,
    corruption: Option<&CorruptionConfig>,
    model: &SceneModel,
) -> Result<ToyScene> {
    if let Some(c) = corruption {
        c.validate(model.feature_dim())?;
    }
    let opts = SampleOptions {
        k_max: model.anchor_count().min(30),
        ..Default::default()
    };
    let instruction = layout::sample_layout(stats, seed, 1, "object", "{n}", &opts)?
        .pop()
        .expect("one instruction");

    let mut cells: Vec<usize> = instruction
        .entities
        .iter()
        .map(|e| model.cell_of(&e.bbox))
        .collect();
    cells.sort_unstable();
    cells.dedup();
    let gt_boxes: Vec<BoundingBox> = cells.iter().map(|&c| model.anchor_box(c)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xF0E7, 0));
    let mut visible = Vec::with_capacity(gt_boxes.len());
    let mut phantoms = 0usize;
    for b in &gt_boxes {
        match corruption {
            Some(c) => {
                if !rng.random_bool(c.p_miss) {
                    visible.push(*b);
                }
                if rng.random_bool(c.p_spur) {
                    phantoms += 1;
                }
            }
            None => visible.push(*b),
        }
    }
    let mut empty: Vec<usize> = (0..model.anchor_count())
        .filter(|a| !cells.contains(a))
        .collect();
    empty.shuffle(&mut rng);
    visible.extend(empty.iter().take(phantoms).map(|&a| model.anchor_box(a)));

    let extra = corruption.map_or(0.0, |c| c.noise_sigma);
    let sigma = (model.noise_sigma.powi(2) + extra.powi(2)).sqrt();
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let shift = corruption.map(|c| c.domain_shift.as_slice()).unwrap_or(&[]);

    let mut features = Vec::with_capacity(model.anchor_count());
    let mut labels = Vec::with_capacity(model.anchor_count());
    for a in 0..model.anchor_count() {
        let anchor = model.anchor_box(a);
        let strength = visible.iter().map(|v| iou(&anchor, v)).fold(0.0, f64::max);
        let f: Vec<f64> = model
            .signature
            .iter()
            .enumerate()
            .map(|(d, u)| {
                model.signal * strength * u + noise.sample(&mut rng) + shift.get(d).copied().unwrap_or(0.0)
            })
            .collect();
        features.push(f);
        labels.push(gt_boxes.iter().any(|g| iou(&anchor, g) >= 0.5));
    }

    Ok(ToyScene {
        image_id: format!("scene_{seed:016x}"),
        gt_boxes,
        features,
        labels,
    })
}

/// Logistic scorer shared by every anchor: `sigmoid(w . f + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDetector {
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Binary cross-entropy from a logit, stable for large |z|.
fn bce_with_logit(z: f64, label: bool) -> f64 {
    let y = if label { 1.0 } else { 0.0 };
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

impl ToyDetector {
    /// Random weights of scale `scale` and a bias matching a prior object
    /// probability of `prior`.
    pub fn random(feature_dim: usize, scale: f64, prior: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x1417, 0));
        let weights = (0..feature_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            weights,
            bias: (prior / (1.0 - prior)).ln(),
        }
    }

    fn from_theta(theta: &[f64]) -> Self {
        let (w, b) = theta.split_at(theta.len() - 1);
        Self {
            weights: w.to_vec(),
            bias: b[0],
        }
    }

    fn theta(&self) -> Vec<f64> {
        let mut t = self.weights.clone();
        t.push(self.bias);
        t
    }

    fn logit(&self, f: &[f64]) -> f64 {
        self.weights.iter().zip(f).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    pub fn score(&self, f: &[f64]) -> f64 {
        sigmoid(self.logit(f))
    }

    /// Mean per-anchor cross-entropy on one scene.
    pub fn scene_loss(&self, scene: &ToyScene) -> f64 {
        let total: f64 = scene
            .features
            .iter()
            .zip(&scene.labels)
            .map(|(f, &l)| bce_with_logit(self.logit(f), l))
            .sum();
        total / scene.features.len() as f64
    }

    /// Mean loss over scenes.
    pub fn loss(&self, scenes: &[ToyScene]) -> f64 {
        scenes.iter().map(|s| self.scene_loss(s)).sum::<f64>() / scenes.len() as f64
    }

    /// Loss and gradient with respect to `[weights.., bias]` on one scene.
    fn scene_loss_grad(&self, scene: &ToyScene) -> (f64, Vec<f64>) {
        let n = scene.features.len() as f64;
        let mut grad = vec![0.0; self.weights.len() + 1];
        let mut loss = 0.0;
        for (f, &l) in scene.features.iter().zip(&scene.labels) {
            let z = self.logit(f);
            loss += bce_with_logit(z, l);
            let r = sigmoid(z) - if l { 1.0 } else { 0.0 };
            for (g, x) in grad.iter_mut().zip(f) {
                *g += r * x;
            }
            *grad.last_mut().unwrap() += r;
        }
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }

    /// Anchor detections at or above `floor`, in canvas pixels.
    pub fn detect(&self, scene: &ToyScene, model: &SceneModel, floor: f64) -> Vec<Detection> {
        let px = f64::from(CANVAS_PX);
        scene
            .features
            .iter()
            .enumerate()
            .filter_map(|(a, f)| {
                let c = self.score(f);
                (c >= floor).then(|| Detection {
                    image_id: scene.image_id.clone(),
                    category_id: CATEGORY,
                    bbox: model.anchor_box(a).scaled(px),
                    confidence: c,
                })
            })
            .collect()
    }
}

/// Ground truth of `scenes` on the pixel canvas.
pub fn scenes_dataset(scenes: &[ToyScene]) -> Result<Dataset> {
    let px = f64::from(CANVAS_PX);
    let images = scenes
        .iter()
        .map(|s| AnnotatedImage {
            image_id: s.image_id.clone(),
            width: CANVAS_PX,
            height: CANVAS_PX,
            annotations: s
                .gt_boxes
                .iter()
                .map(|b| Annotation {
                    bbox: b.scaled(px),
                    category_id: CATEGORY,
                })
                .collect(),
        })
        .collect();
    let mut categories = BTreeMap::new();
    categories.insert(CATEGORY, "object".to_string());
    Dataset::new(categories, images)
}

/// mAP of `detector` on `scenes` at IoU 0.5.
pub fn evaluate_detector(
    detector: &ToyDetector,
    scenes: &[ToyScene],
    model: &SceneModel,
    floor: f64,
) -> Result<f64> {
    let gt = scenes_dataset(scenes)?;
    let dets: Vec<Detection> = scenes
        .iter()
        .flat_map(|s| detector.detect(s, model, floor))
        .collect();
    Ok(metrics::evaluate(&dets, &gt, 0.5, metrics::DEFAULT_CONFIDENCE_CUT)?.map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Generated-scene counts used for pretraining (0 = no pretraining).
    pub n_generated: Vec<usize>,
    /// Real-scene counts used for fine-tuning (0 = no fine-tuning).
    pub n_real: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Also run the arm pretrained on precision/recall-filtered scenes.
    pub use_pr_filter: bool,
    pub grid: usize,
    pub feature_dim: usize,
    pub signal: f64,
    pub noise_sigma: f64,
    pub corruption: CorruptionConfig,
    /// Layout distribution of the real domain.
    pub real_layout: LayoutStats,
    /// Labeled real shots the generated layouts are fitted on.
    pub layout_shots: usize,
    pub n_test: usize,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub val_fraction: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub init_scale: f64,
    pub init_prior: f64,
    /// Detections below this confidence are not emitted.
    pub detection_floor: f64,
    /// Real scenes the filtering detector is trained on.
    pub filter_train_real: usize,
    /// The filtered arm screens at most this many candidates per kept scene.
    pub filter_pool_factor: usize,
    pub filter: FilterSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSettings {
    pub precision_threshold: f64,
    pub recall_threshold: f64,
    pub confidence: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let feature_dim = 16;
        Self {
            n_generated: vec![0, 10, 25, 50, 100, 200, 400],
            n_real: vec![0, 5, 10, 20, 50],
            seeds: (0..10).collect(),
            use_pr_filter: true,
            grid: 8,
            feature_dim,
            signal: 4.0,
            noise_sigma: 1.0,
            corruption: CorruptionConfig {
                p_miss: 0.1,
                p_spur: 0.1,
                domain_shift: vec![0.25; feature_dim],
                noise_sigma: 0.0,
            },
            real_layout: LayoutStats {
                count: Moments {
                    mean: 3.0,
                    variance: 1.5,
                },
                center_x: Moments {
                    mean: 0.5,
                    variance: 0.06,
                },
                center_y: Moments {
                    mean: 0.55,
                    variance: 0.04,
                },
                width: Moments {
                    mean: 0.12,
                    variance: 0.001,
                },
                height: Moments {
                    mean: 0.12,
                    variance: 0.001,
                },
            },
            layout_shots: 10,
            n_test: 40,
            pretrain: StageConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                weight_decay: 0.001,
            },
            finetune: StageConfig {
                learning_rate: 0.01,
                momentum: 0.9,
                weight_decay: 0.01,
            },
            val_fraction: 0.15,
            plateau_patience: 5,
            early_stop_patience: 10,
            max_epochs: 200,
            init_scale: 0.5,
            init_prior: 0.01,
            detection_floor: 0.05,
            filter_train_real: 10,
            filter_pool_factor: 20,
            filter: FilterSettings {
                precision_threshold: 1.0,
                recall_threshold: 1.0,
                confidence: 0.5,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.n_generated.is_empty() || self.n_real.is_empty() {
            return bad("n_generated and n_real grids must be non-empty".into());
        }
        if self.grid == 0 || self.feature_dim == 0 {
            return bad("grid and feature_dim must be positive".into());
        }
        if self.n_test == 0 {
            return bad("n_test must be positive".into());
        }
        if self.layout_shots < 2 {
            return bad("layout_shots must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if !(self.init_prior > 0.0 && self.init_prior < 1.0) {
            return bad(format!("init_prior {} outside (0, 1)", self.init_prior));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return bad("noise_sigma must be non-negative".into());
        }
        self.corruption.validate(self.feature_dim)?;
        for s in [&self.pretrain, &self.finetune] {
            Hyper {
                momentum: s.momentum,
                weight_decay: s.weight_decay,
                learning_rate: s.learning_rate,
            }
            .validate()?;
        }
        Ok(())
    }

    fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Pretrain => &self.pretrain,
            Stage::Finetune => &self.finetune,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub detector: ToyDetector,
    pub trace: Vec<TraceRow>,
    /// Epoch whose weights were returned.
    pub best_epoch: usize,
}

/// Trains a detector on `scenes`.
///
/// `Pretrain` holds out the last `val_fraction` of the scenes for
/// validation and runs the plateau schedule with early stopping, returning
/// the best-validation weights. `Finetune` runs the fixed 12-epoch schedule
/// on all scenes and returns the final weights.
pub fn train_toy_detector(
    scenes: &[ToyScene],
    stage: Stage,
    init: Option<&ToyDetector>,
    config: &ExperimentConfig,
    init_seed: u64,
) -> Result<TrainOutcome> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("no scenes to train on".into()));
    }
    let dim = scenes[0].features.first().map_or(0, Vec::len);
    let start = match init {
        Some(d) if d.weights.len() != dim => {
            return Err(Error::DimensionMismatch(dim, d.weights.len()));
        }
        Some(d) => d.clone(),
        None => ToyDetector::random(dim, config.init_scale, config.init_prior, init_seed),
    };
    let sc = config.stage(stage);
    let mut opt = OptimizerState::new(
        start.theta(),
        Hyper {
            momentum: sc.momentum,
            weight_decay: sc.weight_decay,
            learning_rate: sc.learning_rate,
        },
    )?;

    match stage {
        Stage::Pretrain => {
            let n_val = if scenes.len() >= 2 {
                ((scenes.len() as f64 * config.val_fraction).round() as usize)
                    .clamp(1, scenes.len() - 1)
            } else {
                0
            };
            let (train, val) = scenes.split_at(scenes.len() - n_val);
            let val = if val.is_empty() { train } else { val };
            let mut schedule = LrSchedule::Plateau(crate::optim::Plateau::new(
                0.1,
                config.plateau_patience,
                0.0,
            ));
            let mut stopper = EarlyStopper::new(config.early_stop_patience, config.max_epochs);
            let mut multiplier = 1.0;
            let mut trace = Vec::new();
            for epoch in 1..=config.max_epochs {
                let gamma = sc.learning_rate * multiplier;
                opt.set_learning_rate(gamma)?;
                let train_loss = run_epoch(&mut opt, train, epoch)?;
                let val_loss = ToyDetector::from_theta(opt.theta()).loss(val);
                if !val_loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        loss: val_loss,
                    });
                }
                let next = schedule.schedule_epoch(epoch, Some(val_loss))?;
                let verdict = stopper.update(epoch, val_loss, &opt.theta().to_vec());
                let action = if verdict == StopVerdict::Stop {
                    TraceAction::Stop
                } else if next < multiplier {
                    TraceAction::LrDrop
                } else {
                    TraceAction::Continue
                };
                trace.push(TraceRow {
                    epoch,
                    gamma,
                    train_loss,
                    val_loss: Some(val_loss),
                    action,
                });
                multiplier = next;
                if verdict == StopVerdict::Stop {
                    break;
                }
            }
            let best = stopper.into_best().expect("at least one epoch ran");
            Ok(TrainOutcome {
                detector: ToyDetector::from_theta(&best.weights),
                trace,
                best_epoch: best.epoch,
            })
        }
        Stage::Finetune => {
            let mut schedule = LrSchedule::one_x();
            let total = schedule.total_epochs().expect("fixed schedule");
            let mut trace = Vec::with_capacity(total);
            for epoch in 1..=total {
                let gamma = sc.learning_rate * schedule.schedule_epoch(epoch, None)?;
                let action = if gamma < opt.hyper().learning_rate {
                    TraceAction::LrDrop
                } else {
                    TraceAction::Continue
                };
                opt.set_learning_rate(gamma)?;
                let train_loss = run_epoch(&mut opt, scenes, epoch)?;
                trace.push(TraceRow {
                    epoch,
                    gamma,
                    train_loss,
                    val_loss: None,
                    action,
                });
            }
            Ok(TrainOutcome {
                detector: ToyDetector::from_theta(opt.theta()),
                trace,
                best_epoch: total,
            })
        }
    }
}

/// One SGD step per scene; returns the mean pre-step loss.
fn run_epoch(opt: &mut OptimizerState, scenes: &[ToyScene], epoch: usize) -> Result<f64> {
    let mut total = 0.0;
    for scene in scenes {
        let (loss, grad) = ToyDetector::from_theta(opt.theta()).scene_loss_grad(scene);
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        total += loss;
        opt.step(&grad)?;
    }
    Ok(total / scenes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub n_generated: usize,
    pub n_real: usize,
    pub filtered: bool,
    pub seed: u64,
    #[serde(serialize_with = "report::ser_f64")]
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub n_generated: usize,
    pub n_real: usize,
    pub filtered: bool,
    pub seeds: usize,
    #[serde(serialize_with = "report::ser_f64")]
    pub mean_map: f64,
    #[serde(serialize_with = "report::ser_f64")]
    pub std_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub seed: u64,
    pub screened: usize,
    pub kept: usize,
    #[serde(serialize_with = "report::ser_f64")]
    pub discarded_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub cells: Vec<CellResult>,
    pub summary: Vec<CellSummary>,
    pub filter: Vec<FilterStats>,
}

impl ExperimentResults {
    pub fn mean_map(&self, n_generated: usize, n_real: usize, filtered: bool) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.n_generated == n_generated && s.n_real == n_real && s.filtered == filtered)
            .map(|s| s.mean_map)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n_generated,n_real,filtered,seed,map\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.n_generated,
                c.n_real,
                c.filtered,
                c.seed,
                report::fmt6(c.map)
            );
        }
        out
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// SVG of mean mAP against the number of generated scenes: one curve per
    /// real-scene count, solid for the filtered arm and dashed otherwise.
    pub fn to_svg(&self) -> String {
        plot_svg(&self.summary)
    }
}

/// Parses the CSV written by [`ExperimentResults::to_csv`].
pub fn parse_results_csv(text: &str) -> Result<Vec<CellResult>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("n_generated,n_real,filtered,seed,map") => {}
        other => {
            return Err(Error::Schema(format!(
                "unexpected results header {other:?}"
            )))
        }
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let bad = || Error::Schema(format!("malformed results row {l:?}"));
            let f: Vec<&str> = l.split(',').collect();
            let [g, r, filt, seed, map] = f.as_slice() else {
                return Err(bad());
            };
            Ok(CellResult {
                n_generated: g.parse().map_err(|_| bad())?,
                n_real: r.parse().map_err(|_| bad())?,
                filtered: filt.parse().map_err(|_| bad())?,
                seed: seed.parse().map_err(|_| bad())?,
                map: map.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn summarize(cells: &[CellResult]) -> Vec<CellSummary> {
    let mut groups: BTreeMap<(usize, usize, bool), Vec<f64>> = BTreeMap::new();
    for c in cells {
        groups
            .entry((c.n_generated, c.n_real, c.filtered))
            .or_default()
            .push(c.map);
    }
    groups
        .into_iter()
        .map(|((n_generated, n_real, filtered), maps)| {
            let n = maps.len() as f64;
            let mean = maps.iter().sum::<f64>() / n;
            let var = if maps.len() > 1 {
                maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            CellSummary {
                n_generated,
                n_real,
                filtered,
                seeds: maps.len(),
                mean_map: mean,
                std_map: var.sqrt(),
            }
        })
        .collect()
}

struct SeedWorld {
    model: SceneModel,
    gen_stats: LayoutStats,
    test: Vec<ToyScene>,
    real_pool: Vec<ToyScene>,
}

impl SeedWorld {
    fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let model = SceneModel::new(
            config.grid,
            config.feature_dim,
            config.signal,
            config.noise_sigma,
            seed,
        );
        let real = |stream: u64, n: usize| -> Result<Vec<ToyScene>> {
            (0..n)
                .map(|i| gen_scene(&config.real_layout, mix(seed, stream, i as u64), None, &model))
                .collect()
        };
        let shots = real(1, config.layout_shots)?;
        let gen_stats = fit_layout(&scenes_dataset(&shots)?)?;
        let max_real = config
            .n_real
            .iter()
            .copied()
            .max()
            .unwrap_or(0)
            .max(if config.use_pr_filter { config.filter_train_real } else { 0 });
        Ok(Self {
            test: real(2, config.n_test)?,
            real_pool: real(3, max_real)?,
            gen_stats,
            model,
        })
    }

    fn generated(&self, config: &ExperimentConfig, seed: u64, index: usize) -> Result<ToyScene> {
        gen_scene(
            &self.gen_stats,
            mix(seed, 4, index as u64),
            Some(&config.corruption),
            &self.model,
        )
    }
}

/// Screens generated scenes with the filtering detector until `wanted`
/// pass or the candidate budget runs out.
fn filtered_pool(
    world: &SeedWorld,
    config: &ExperimentConfig,
    seed: u64,
    filter_detector: &ToyDetector,
    wanted: usize,
) -> Result<(Vec<ToyScene>, FilterStats)> {
    let cfg = PrFilterConfig {
        precision_threshold: config.filter.precision_threshold,
        recall_threshold: config.filter.recall_threshold,
        iou_threshold: 0.5,
    };
    let budget = wanted.saturating_mul(config.filter_pool_factor.max(1));
    let mut kept = Vec::with_capacity(wanted);
    let mut screened = 0;
    while kept.len() < wanted && screened < budget {
        let scene = world.generated(config, seed, screened)?;
        screened += 1;
        let gt = scenes_dataset(std::slice::from_ref(&scene))?;
        let dets = filter_detector.detect(&scene, &world.model, config.filter.confidence);
        let (_, decisions) = prfilter::pr_filter(&gt, &dets, &cfg)?;
        if decisions[0].kept {
            kept.push(scene);
        }
    }
    let stats = FilterStats {
        seed,
        screened,
        kept: kept.len(),
        discarded_fraction: if screened == 0 {
            0.0
        } else {
            1.0 - kept.len() as f64 / screened as f64
        },
    };
    Ok((kept, stats))
}

fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<(Vec<CellResult>, Option<FilterStats>)> {
    let world = SeedWorld::new(config, seed)?;
    let init_seed = mix(seed, 5, 0);
    let max_gen = config.n_generated.iter().copied().max().unwrap_or(0);
    let unfiltered: Vec<ToyScene> = (0..max_gen)
        .map(|i| world.generated(config, seed, i))
        .collect::<Result<_>>()?;

    let (filtered, filter_stats) = if config.use_pr_filter && max_gen > 0 {
        let n = config.filter_train_real.min(world.real_pool.len());
        let filter_detector = if n > 0 {
            train_toy_detector(
                &world.real_pool[..n],
                Stage::Pretrain,
                None,
                config,
                mix(seed, 6, 0),
            )?
            .detector
        } else {
            ToyDetector::random(config.feature_dim, config.init_scale, config.init_prior, mix(seed, 6, 0))
        };
        let (pool, stats) = filtered_pool(&world, config, seed, &filter_detector, max_gen)?;
        (Some(pool), Some(stats))
    } else {
        (None, None)
    };

    let mut arms: Vec<(bool, &[ToyScene])> = vec![(false, &unfiltered)];
    if let Some(pool) = &filtered {
        arms.push((true, pool));
    }

    let mut cells = Vec::new();
    for &n_gen in &config.n_generated {
        for &(is_filtered, pool) in &arms {
            if n_gen == 0 && is_filtered {
                continue;
            }
            let base = if n_gen == 0 {
                ToyDetector::random(config.feature_dim, config.init_scale, config.init_prior, init_seed)
            } else {
                let take = n_gen.min(pool.len());
                if take == 0 {
                    ToyDetector::random(config.feature_dim, config.init_scale, config.init_prior, init_seed)
                } else {
                    train_toy_detector(&pool[..take], Stage::Pretrain, None, config, init_seed)?.detector
                }
            };
            for &n_real in &config.n_real {
                let detector = if n_real == 0 {
                    base.clone()
                } else {
                    train_toy_detector(
                        &world.real_pool[..n_real],
                        Stage::Finetune,
                        Some(&base),
                        config,
                        init_seed,
                    )?
                    .detector
                };
                let map = evaluate_detector(&detector, &world.test, &world.model, config.detection_floor)?;
                cells.push(CellResult {
                    n_generated: n_gen,
                    n_real,
                    filtered: is_filtered,
                    seed,
                    map,
                });
            }
        }
    }
    Ok((cells, filter_stats))
}

/// Runs the full grid. Seeds run in parallel on the current rayon pool;
/// every seed is computed sequentially, so the output does not depend on
/// the thread count.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResults> {
    config.validate()?;
    let per_seed: Vec<_> = config
        .seeds
        .par_iter()
        .map(|&seed| run_seed(config, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::new();
    let mut filter = Vec::new();
    for (c, f) in per_seed {
        cells.extend(c);
        filter.extend(f);
    }
    cells.sort_by(|a, b| {
        (a.n_generated, a.n_real, a.filtered, a.seed).cmp(&(b.n_generated, b.n_real, b.filtered, b.seed))
    });
    Ok(ExperimentResults {
        summary: summarize(&cells),
        cells,
        filter,
    })
}

fn plot_svg(summary: &[CellSummary]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 56.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

    let mut gens: Vec<usize> = summary.iter().map(|s| s.n_generated).collect();
    gens.sort_unstable();
    gens.dedup();
    let mut reals: Vec<usize> = summary.iter().map(|s| s.n_real).collect();
    reals.sort_unstable();
    reals.dedup();
    let xpos = |g: usize| {
        let i = gens.iter().position(|&x| x == g).unwrap_or(0) as f64;
        let span = (gens.len().max(2) - 1) as f64;
        M + i / span * (W - 2.0 * M)
    };
    let ypos = |m: f64| H - M - m.clamp(0.0, 1.0) * (H - 2.0 * M);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#,
        H - M,
        W - M,
        H - M,
        H - M
    );
    for t in 0..=5 {
        let v = f64::from(t) / 5.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            M - 6.0,
            ypos(v) + 4.0
        );
    }
    for &g in &gens {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{g}</text>"#,
            xpos(g),
            H - M + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">generated scenes</text><text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">mAP@0.5</text>"#,
        W / 2.0,
        H - 14.0,
        H / 2.0,
        H / 2.0
    );

    for (ci, &r) in reals.iter().enumerate() {
        let color = COLORS[ci % COLORS.len()];
        for filtered in [false, true] {
            let mut pts: Vec<(f64, f64)> = summary
                .iter()
                .filter(|s| s.n_real == r && (s.filtered == filtered || s.n_generated == 0))
                .map(|s| (xpos(s.n_generated), ypos(s.mean_map)))
                .collect();
            if pts.len() < 2 || (filtered && !summary.iter().any(|s| s.filtered)) {
                continue;
            }
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
            let dash = if filtered { "" } else { r#" stroke-dasharray="5,4""# };
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
                path.join(" ")
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{r} real</text>"#,
            W - M + 4.0,
            M + 14.0 * ci as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Byte serialization of a scene, for determinism checks.
pub fn scene_bytes(scene: &ToyScene) -> Vec<u8> {
    scene.to_bytes()
}
