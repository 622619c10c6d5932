//! Turns a predicted fixed-length polygon into a clean ring.
//!
//! Uniform-sampling predictions go through corner-score thresholding and a
//! circular 1-d non-maximum suppression; zero-padding predictions keep the
//! leading run of confident vertices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{EncodedPolygon, Scheme};
use crate::geometry::{Point, Ring};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error("expected a {expected:?} prediction, got {actual:?}")]
    SchemeMismatch { expected: Scheme, actual: Scheme },
    #[error("prediction has fewer than {0} distinct vertices")]
    Degenerate(usize),
    #[error("invalid refine config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub score_threshold: f64,
    /// Circular radius, in vertices, of the suppression window.
    pub nms_window: usize,
    pub min_vertices: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            score_threshold: 0.1,
            nms_window: 2,
            min_vertices: 3,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(RefineError::InvalidConfig(format!(
                "threshold {} outside [0, 1]",
                self.score_threshold
            )));
        }
        if self.nms_window < 1 {
            return Err(RefineError::InvalidConfig("nms window must be at least 1".into()));
        }
        if self.min_vertices < 3 {
            return Err(RefineError::InvalidConfig("min_vertices must be at least 3".into()));
        }
        Ok(())
    }
}

/// How much of the refinement to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefineStage {
    /// Every vertex kept.
    Raw,
    /// Score threshold only.
    ScoreFilter,
    /// Score threshold followed by circular NMS.
    Full,
}

#[cfg(test)]
fn circular_distance(i: usize, j: usize, n: usize) -> usize {
    let d = i.abs_diff(j);
    d.min(n - d)
}

/// Index `i` survives iff no index within circular distance `window` scores
/// higher, and no equal-scoring index within the window has a lower index.
/// A plateau therefore keeps one survivor, except that a plateau wrapping
/// past index 0 can keep its first member and index 0.
pub fn nms_1d_circular(scores: &[f64], window: usize) -> Vec<usize> {
    let n = scores.len();
    let reach = window.min(n / 2);
    let mut keep = Vec::new();
    'outer: for i in 0..n {
        for d in 1..=reach {
            for j in [(i + d) % n, (i + n - d) % n] {
                if j == i {
                    continue;
                }
                if scores[j] > scores[i] || (scores[j] == scores[i] && j < i) {
                    continue 'outer;
                }
            }
        }
        keep.push(i);
    }
    keep
}

/// Indices of the `count` highest scores (ties by lowest index), returned in
/// sequence order.
fn top_indices(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(count);
    order.sort_unstable();
    order
}

/// Builds a ring from the chosen indices, topping up from the best remaining
/// scores when too few distinct vertices survive.
fn assemble(pred: &EncodedPolygon, chosen: Vec<usize>, min_vertices: usize) -> Result<Ring, RefineError> {
    let coords = pred.coords();
    let distinct = |idx: &[usize]| -> Vec<Point> {
        crate::geometry::dedup_cyclic(idx.iter().map(|&i| coords[i]).collect())
    };
    let points = distinct(&chosen);
    if points.len() >= min_vertices {
        if let Ok(r) = Ring::new(points) {
            return Ok(r);
        }
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    let scores = pred.corner_flags();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = chosen;
    for i in order {
        if distinct(&picked).len() >= min_vertices {
            break;
        }
        if !picked.contains(&i) {
            picked.push(i);
            picked.sort_unstable();
        }
    }
    Ring::new(distinct(&picked)).map_err(|_| RefineError::Degenerate(min_vertices))
}

/// Indices selected at `stage` for a uniform-sampling prediction, before the
/// minimum-vertex fallback.
pub fn select_vertices(scores: &[f64], cfg: &RefineConfig, stage: RefineStage) -> Vec<usize> {
    match stage {
        RefineStage::Raw => (0..scores.len()).collect(),
        RefineStage::ScoreFilter => (0..scores.len()).filter(|&i| scores[i] >= cfg.score_threshold).collect(),
        RefineStage::Full => {
            let masked: Vec<f64> = scores
                .iter()
                .map(|&s| if s >= cfg.score_threshold { s } else { f64::NEG_INFINITY })
                .collect();
            nms_1d_circular(&masked, cfg.nms_window)
                .into_iter()
                .filter(|&i| masked[i] != f64::NEG_INFINITY)
                .collect()
        }
    }
}

pub fn refine_stage(pred: &EncodedPolygon, cfg: &RefineConfig, stage: RefineStage) -> Result<Ring, RefineError> {
    cfg.validate()?;
    if pred.scheme() != Scheme::UniformSampling {
        return Err(RefineError::SchemeMismatch {
            expected: Scheme::UniformSampling,
            actual: pred.scheme(),
        });
    }
    let scores = pred.corner_flags();
    let mut chosen = select_vertices(scores, cfg, stage);
    if chosen.len() < cfg.min_vertices {
        chosen = top_indices(scores, cfg.min_vertices);
    }
    assemble(pred, chosen, cfg.min_vertices)
}

/// Threshold then circular NMS, falling back to the top-scoring vertices
/// when fewer than `min_vertices` survive.
pub fn refine(pred: &EncodedPolygon, cfg: &RefineConfig) -> Result<Ring, RefineError> {
    refine_stage(pred, cfg, RefineStage::Full)
}

/// Keeps the longest prefix whose scores reach the threshold.
pub fn refine_zeropad(pred: &EncodedPolygon, cfg: &RefineConfig) -> Result<Ring, RefineError> {
    cfg.validate()?;
    if pred.scheme() != Scheme::ZeroPad {
        return Err(RefineError::SchemeMismatch {
            expected: Scheme::ZeroPad,
            actual: pred.scheme(),
        });
    }
    let scores = pred.corner_flags();
    let prefix = scores.iter().take_while(|&&s| s >= cfg.score_threshold).count();
    let chosen = if prefix < cfg.min_vertices {
        top_indices(scores, cfg.min_vertices)
    } else {
        (0..prefix).collect()
    };
    assemble(pred, chosen, cfg.min_vertices)
}

/// Dispatches on the prediction's scheme.
pub fn refine_any(pred: &EncodedPolygon, cfg: &RefineConfig) -> Result<Ring, RefineError> {
    match pred.scheme() {
        Scheme::UniformSampling => refine(pred, cfg),
        Scheme::ZeroPad => refine_zeropad(pred, cfg),
    }
}
