//! Building footprint polygons as fixed-length vertex sequences.
//!
//! Rings are encoded into `m` vertices with per-vertex corner flags, decoded
//! back by score filtering and circular NMS, matched to ground truth with a
//! rectangular Hungarian solver and scored with COCO-style and geometric
//! metrics. Also included: the training losses with analytic gradients and a
//! reference multi-scale deformable attention kernel.

pub mod assignment;
pub mod attention;
pub mod config;
pub mod dataset;
pub mod encoding;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod refinement;
pub mod selfcheck;

pub use assignment::{solve, Assignment, CostMatrix, MatchWeights};
pub use config::HyperParams;
pub use dataset::{PredictionRecord, Scene};
pub use encoding::{encode, EncodedPolygon, EncodingConfig, Scheme};
pub use geometry::{canonicalize, rasterize, BoundingBox, GeometryError, Mask, Point, Ring};
pub use losses::{FocalParams, LossWeights};
pub use metrics::{evaluate, EvalConfig, EvalReport, GtInstance, PredInstance};
pub use refinement::{refine, RefineConfig, RefineStage};
