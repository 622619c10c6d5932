//! Training losses as scalar functions with analytic gradients.
//!
//! None of these run an optimizer; they exist so that the loss surface can be
//! checked against finite differences and composed exactly as in training.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{Assignment, GtTarget, InstancePrediction};
use crate::encoding::EncodedPolygon;
use crate::geometry::BoundingBox;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("assignment refers to missing instance (gt {gt}, pred {pred})")]
    BadAssignment { gt: usize, pred: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_poly: f64,
    pub lambda_cnr: f64,
    pub lambda_iou: f64,
    pub lambda_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 2.0,
            lambda_poly: 5.0,
            lambda_cnr: 1.0,
            lambda_iou: 2.0,
            lambda_l1: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarGrad {
    pub value: f64,
    pub grad: f64,
}

/// Value plus gradient with respect to the first (predicted) argument.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// GIoU value and its gradients with respect to `(cx, cy, w, h)` of each box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GiouOutput {
    pub value: f64,
    pub grad_a: [f64; 4],
    pub grad_b: [f64; 4],
}

fn clamp_prob(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (c, c != p)
}

/// Per-instance focal loss. Positive: `-a (1-p)^g ln p`; negative:
/// `-(1-a) p^g ln(1-p)`. The gradient is zero where clamping was active.
pub fn focal_loss(p_hat: f64, is_object: bool, fp: &FocalParams) -> ScalarGrad {
    let (p, clamped) = clamp_prob(p_hat);
    let (a, g) = (fp.alpha, fp.gamma);
    let (value, grad) = if is_object {
        let q = 1.0 - p;
        let value = -a * q.powf(g) * p.ln();
        let dq = if g == 0.0 { 0.0 } else { a * g * q.powf(g - 1.0) * p.ln() };
        (value, dq - a * q.powf(g) / p)
    } else {
        let q = 1.0 - p;
        let value = -(1.0 - a) * p.powf(g) * q.ln();
        let dp = if g == 0.0 { 0.0 } else { g * p.powf(g - 1.0) * q.ln() };
        (value, -(1.0 - a) * (dp - p.powf(g) / q))
    };
    ScalarGrad {
        value,
        grad: if clamped { 0.0 } else { grad },
    }
}

/// Generalized IoU of two boxes: `IoU - (|C| - |A u B|) / |C|` with `C` the
/// smallest enclosing box. The loss form is `1 - value`.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> GiouOutput {
    let ac = a.corners();
    let bc = b.corners();

    // Per axis: overlap and enclosing extents with their corner partials.
    // Corner order is [x_lo, y_lo, x_hi, y_hi].
    let mut inter = [0.0; 2];
    let mut enc = [0.0; 2];
    let mut d_inter = [[[0.0; 4]; 2]; 2]; // [axis][box][corner]
    let mut d_enc = [[[0.0; 4]; 2]; 2];
    for k in 0..2 {
        let (a_lo, a_hi, b_lo, b_hi) = (ac[k], ac[k + 2], bc[k], bc[k + 2]);
        inter[k] = a_hi.min(b_hi) - a_lo.max(b_lo);
        enc[k] = a_hi.max(b_hi) - a_lo.min(b_lo);
        if a_lo >= b_lo {
            d_inter[k][0][k] = -1.0;
        } else {
            d_inter[k][1][k] = -1.0;
        }
        if a_hi <= b_hi {
            d_inter[k][0][k + 2] = 1.0;
        } else {
            d_inter[k][1][k + 2] = 1.0;
        }
        if a_lo <= b_lo {
            d_enc[k][0][k] = -1.0;
        } else {
            d_enc[k][1][k] = -1.0;
        }
        if a_hi >= b_hi {
            d_enc[k][0][k + 2] = 1.0;
        } else {
            d_enc[k][1][k + 2] = 1.0;
        }
    }

    let overlapping = inter[0] > 0.0 && inter[1] > 0.0;
    let i_area = if overlapping { inter[0] * inter[1] } else { 0.0 };
    let c_area = enc[0] * enc[1];
    let areas = [a.w * a.h, b.w * b.h];
    let u_area = areas[0] + areas[1] - i_area;
    let value = i_area / u_area - 1.0 + u_area / c_area;

    let sizes = [[a.w, a.h], [b.w, b.h]];
    let mut corner_grads = [[0.0; 4]; 2];
    for bx in 0..2 {
        for corner in 0..4 {
            let di = if overlapping {
                d_inter[0][bx][corner] * inter[1] + d_inter[1][bx][corner] * inter[0]
            } else {
                0.0
            };
            let dc = d_enc[0][bx][corner] * enc[1] + d_enc[1][bx][corner] * enc[0];
            // Own area: d(w*h)/dx_lo = -h, /dx_hi = h, /dy_lo = -w, /dy_hi = w.
            let [w, h] = sizes[bx];
            let da = match corner {
                0 => -h,
                1 => -w,
                2 => h,
                _ => w,
            };
            let du = da - di;
            corner_grads[bx][corner] =
                di / u_area - i_area * du / (u_area * u_area) + du / c_area - u_area * dc / (c_area * c_area);
        }
    }
    let to_params = |g: [f64; 4]| {
        [
            g[0] + g[2],
            g[1] + g[3],
            0.5 * (g[2] - g[0]),
            0.5 * (g[3] - g[1]),
        ]
    };
    GiouOutput {
        value,
        grad_a: to_params(corner_grads[0]),
        grad_b: to_params(corner_grads[1]),
    }
}

/// `sum |a_i - b_i|`; gradient with respect to `a`, zero at ties.
pub fn l1_seq(a: &[f64], b: &[f64]) -> Result<SeqGrad, LossError> {
    if a.len() != b.len() {
        return Err(LossError::LengthMismatch(a.len(), b.len()));
    }
    let mut value = 0.0;
    let grad = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            value += d.abs();
            if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(SeqGrad { value, grad })
}

/// L1 over the flattened `x0, y0, x1, y1, ...` coordinates; gradient with
/// respect to `pred`.
pub fn polygon_l1(gt: &EncodedPolygon, pred: &EncodedPolygon) -> Result<SeqGrad, LossError> {
    if gt.len() != pred.len() {
        return Err(LossError::LengthMismatch(gt.len(), pred.len()));
    }
    l1_seq(&pred.flat_coords(), &gt.flat_coords())
}

/// Binary cross entropy summed over vertices; gradient with respect to the
/// predicted probabilities.
pub fn corner_bce(gt_flags: &[f64], pred_probs: &[f64]) -> Result<SeqGrad, LossError> {
    if gt_flags.len() != pred_probs.len() {
        return Err(LossError::LengthMismatch(gt_flags.len(), pred_probs.len()));
    }
    let mut value = 0.0;
    let grad = gt_flags
        .iter()
        .zip(pred_probs)
        .map(|(&c, &raw)| {
            let (p, clamped) = clamp_prob(raw);
            value += -c * p.ln() - (1.0 - c) * (1.0 - p).ln();
            if clamped {
                0.0
            } else {
                -c / p + (1.0 - c) / (1.0 - p)
            }
        })
        .collect();
    Ok(SeqGrad { value, grad })
}

/// Unweighted per-head loss sums for one decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub cls: f64,
    /// Sum of `1 - giou` over matched pairs.
    pub iou: f64,
    /// Sum of box L1 over matched pairs.
    pub l1: f64,
    pub poly: f64,
    pub cnr: f64,
}

pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> f64 {
    w.lambda_cls * terms.cls
        + (w.lambda_iou * terms.iou + w.lambda_l1 * terms.l1)
        + w.lambda_poly * terms.poly
        + w.lambda_cnr * terms.cnr
}

/// Sum of the per-layer losses.
pub fn deep_supervision(layer_losses: &[f64]) -> f64 {
    layer_losses.iter().sum()
}

/// Collects the loss terms of one image given a matching with ground truth
/// as rows and predictions as columns. Unmatched predictions only enter the
/// classification term, as the no-object class.
pub fn image_loss_terms(
    gts: &[GtTarget],
    preds: &[InstancePrediction],
    matching: &Assignment,
    fp: &FocalParams,
) -> Result<LossTerms, LossError> {
    let mut matched_gt = vec![None; preds.len()];
    for &(g, p) in &matching.pairs {
        if g >= gts.len() || p >= preds.len() {
            return Err(LossError::BadAssignment { gt: g, pred: p });
        }
        matched_gt[p] = Some(g);
    }
    let mut terms = LossTerms::default();
    for (pred, gt) in preds.iter().zip(&matched_gt) {
        terms.cls += focal_loss(pred.class_prob, gt.is_some(), fp).value;
        let Some(g) = *gt else { continue };
        let gt = &gts[g];
        terms.iou += 1.0 - giou(&gt.bbox, &pred.bbox).value;
        terms.l1 += l1_seq(&pred.bbox.to_array(), &gt.bbox.to_array())?.value;
        terms.poly += polygon_l1(&gt.polygon, &pred.polygon)?.value;
        terms.cnr += corner_bce(gt.polygon.corner_flags(), pred.polygon.corner_flags())?.value;
    }
    Ok(terms)
}
