//! Tooling for object-detection pipelines that pretrain on generated images.
//!
//! The crate covers evaluation (IoU matching, precision/recall, interpolated
//! AP, mAP, F1), curation of generated datasets (Fréchet-distance filtering
//! and per-image precision/recall filtering), grounding-layout synthesis, the
//! SGD/scheduler stack used for training, and a small synthetic experiment
//! that exercises the whole pretrain-then-fine-tune loop.

pub mod anno;
pub mod cli;
pub mod error;
pub mod frechet;
pub mod geom;
pub mod layout;
pub mod metrics;
pub mod optim;
pub mod prfilter;
pub mod report;
pub mod toyxfer;

pub use anno::{AnnotatedImage, Annotation, BoundingBox, Dataset, Detection, Loaded};
pub use error::{Error, Result};
pub use geom::{iou, match_image, precision_recall, MatchResult, PrecisionRecall};
pub use metrics::{average_precision, evaluate, pr_curve, EvalReport, PrCurve};
