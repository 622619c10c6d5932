//! Rectangular linear sum assignment and the box matching cost used to pair
//! predicted instances with ground truth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::EncodedPolygon;
use crate::geometry::BoundingBox;
use crate::losses::{focal_loss, giou, polygon_l1, FocalParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignmentError {
    #[error("cost at ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("expected {expected} cost values, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("polygon lengths differ: {0} vs {1}")]
    PolygonLength(usize, usize),
}

/// Dense row-major cost table.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, AssignmentError> {
        if values.len() != rows * cols {
            return Err(AssignmentError::ShapeMismatch {
                expected: rows * cols,
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(AssignmentError::NonFinite {
                row: i / cols,
                col: i % cols,
            });
        }
        Ok(CostMatrix { rows, cols, values })
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, AssignmentError> {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        CostMatrix::new(rows, cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn transposed(&self) -> CostMatrix {
        let mut values = Vec::with_capacity(self.values.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                values.push(self.get(r, c));
            }
        }
        CostMatrix {
            rows: self.cols,
            cols: self.rows,
            values,
        }
    }
}

/// Injective row -> column pairing, sorted by row.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn empty() -> Self {
        Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        }
    }

    pub fn col_for_row(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }
}

/// Minimum-cost assignment of size `min(rows, cols)`.
///
/// Shortest augmenting path Hungarian method with row/column potentials,
/// `O(n^2 m)` for `n <= m`. Wider-than-tall inputs are transposed.
pub fn solve(costs: &CostMatrix) -> Assignment {
    if costs.rows == 0 || costs.cols == 0 {
        return Assignment::empty();
    }
    let mut pairs = if costs.rows <= costs.cols {
        solve_tall(costs)
    } else {
        solve_tall(&costs.transposed()).into_iter().map(|(c, r)| (r, c)).collect()
    };
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(r, c)| costs.get(r, c)).sum();
    Assignment { pairs, total_cost }
}

fn solve_tall(costs: &CostMatrix) -> Vec<(usize, usize)> {
    let n = costs.rows;
    let m = costs.cols;
    debug_assert!(n <= m);
    // 1-based with column 0 as the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut min_slack = vec![f64::INFINITY; m + 1];
    let mut used = vec![false; m + 1];

    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        min_slack.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = costs.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < min_slack[j] {
                    min_slack[j] = cur;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect()
}

/// One predicted instance: class probability, box and polygon.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePrediction {
    pub class_prob: f64,
    pub bbox: BoundingBox,
    pub polygon: EncodedPolygon,
}

/// Weights of the matching cost. `lambda_poly` adds an optional polygon L1
/// term (off by default) used only by [`match_instances_with_polygons`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub lambda_cls: f64,
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    pub lambda_poly: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            lambda_cls: 2.0,
            lambda_iou: 2.0,
            lambda_l1: 5.0,
            lambda_poly: 0.0,
        }
    }
}

/// `lambda_cls * focal(p) + lambda_iou * (1 - giou) + lambda_l1 * |b - b'|_1`,
/// with the focal term taken on the positive class only.
pub fn matching_cost(
    gt_box: &BoundingBox,
    pred: &InstancePrediction,
    w: &MatchWeights,
    focal: &FocalParams,
) -> f64 {
    let cls = focal_loss(pred.class_prob, true, focal).value;
    let iou = 1.0 - giou(gt_box, &pred.bbox).value;
    let l1: f64 = gt_box
        .to_array()
        .iter()
        .zip(pred.bbox.to_array())
        .map(|(a, b)| (a - b).abs())
        .sum();
    w.lambda_cls * cls + w.lambda_iou * iou + w.lambda_l1 * l1
}

pub fn match_instances(
    gts: &[BoundingBox],
    preds: &[InstancePrediction],
    w: &MatchWeights,
    focal: &FocalParams,
) -> Result<Assignment, AssignmentError> {
    let costs = CostMatrix::from_fn(gts.len(), preds.len(), |r, c| {
        matching_cost(&gts[r], &preds[c], w, focal)
    })?;
    Ok(solve(&costs))
}

/// Ground truth with its encoded polygon, for the polygon-aware cost.
#[derive(Debug, Clone, PartialEq)]
pub struct GtTarget {
    pub bbox: BoundingBox,
    pub polygon: EncodedPolygon,
}

/// Box cost plus `w.lambda_poly` times the polygon L1 distance.
pub fn match_instances_with_polygons(
    gts: &[GtTarget],
    preds: &[InstancePrediction],
    w: &MatchWeights,
    focal: &FocalParams,
) -> Result<Assignment, AssignmentError> {
    let mut values = Vec::with_capacity(gts.len() * preds.len());
    for gt in gts {
        for pred in preds {
            let poly = polygon_l1(&gt.polygon, &pred.polygon).map_err(|_| {
                AssignmentError::PolygonLength(gt.polygon.len(), pred.polygon.len())
            })?;
            values.push(matching_cost(&gt.bbox, pred, w, focal) + w.lambda_poly * poly.value);
        }
    }
    let costs = CostMatrix::new(gts.len(), preds.len(), values)?;
    Ok(solve(&costs))
}
