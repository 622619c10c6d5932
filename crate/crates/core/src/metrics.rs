//! Polygon evaluation: pixel IoU, COCO-style AP/AR, max tangent angle
//! error, vertex-count ratio and complexity-aware IoU.
//!
//! Masks are rasterized at each image's native size. AP/AR follow the COCO
//! recipe: detections sorted by score, greedy matching to the best unmatched
//! ground truth, 101-point interpolated precision, recall at up to 100
//! detections per image. The geometric metrics use a separate greedy
//! matching at IoU >= 0.5.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::{perimeter, rasterize, Mask, Point, Ring};

#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub image_id: u64,
    pub ring: Ring,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredInstance {
    pub image_id: u64,
    pub ring: Ring,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IouMode {
    /// Mean over images of the per-image union-mask IoU.
    PerImage,
    /// Total intersection over total union.
    Pooled,
}

impl IouMode {
    pub fn as_str(self) -> &'static str {
        match self {
            IouMode::PerImage => "per-image",
            IouMode::Pooled => "pooled",
        }
    }
}

impl std::str::FromStr for IouMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-image" => Ok(IouMode::PerImage),
            "pooled" => Ok(IouMode::Pooled),
            other => Err(format!("unknown IoU mode `{other}` (expected per-image or pooled)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CIouMode {
    /// Mean of the per-pair score over all ground truth; unmatched count 0.
    PerPairMean,
    /// Complexity-weighted intersections over the pooled union.
    Pooled,
}

impl CIouMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CIouMode::PerPairMean => "per-pair-mean",
            CIouMode::Pooled => "pooled",
        }
    }
}

impl std::str::FromStr for CIouMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-pair-mean" => Ok(CIouMode::PerPairMean),
            "pooled" => Ok(CIouMode::Pooled),
            other => Err(format!("unknown C-IoU mode `{other}` (expected per-pair-mean or pooled)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Raster size for images missing from `image_sizes`.
    pub default_size: (usize, usize),
    /// `image_id -> (width, height)`.
    pub image_sizes: BTreeMap<u64, (usize, usize)>,
    pub iou_thresholds: Vec<f64>,
    pub max_dets: usize,
    pub match_iou: f64,
    pub mta_samples: usize,
    pub iou_mode: IouMode,
    pub c_iou_mode: CIouMode,
    /// With no ground truth at all, report AP/AR as 1 (no detections) or 0
    /// instead of NaN.
    pub empty_as_perfect: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            default_size: (300, 300),
            image_sizes: BTreeMap::new(),
            iou_thresholds: coco_iou_thresholds(),
            max_dets: 100,
            match_iou: 0.5,
            mta_samples: 1000,
            iou_mode: IouMode::PerImage,
            c_iou_mode: CIouMode::PerPairMean,
            empty_as_perfect: false,
        }
    }
}

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Rasterized instance with the pixel box of its set bits.
#[derive(Debug, Clone)]
struct InstanceMask {
    mask: Mask,
    count: usize,
    rows: (usize, usize),
    cols: (usize, usize),
}

impl InstanceMask {
    fn new(ring: &Ring, (w, h): (usize, usize)) -> Self {
        let mask = rasterize(ring, w, h);
        let mut count = 0;
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for r in 0..h {
            for c in 0..w {
                if mask.get(c, r) {
                    count += 1;
                    r0 = r0.min(r);
                    r1 = r1.max(r);
                    c0 = c0.min(c);
                    c1 = c1.max(c);
                }
            }
        }
        InstanceMask {
            mask,
            count,
            rows: (r0, r1),
            cols: (c0, c1),
        }
    }

    fn intersection(&self, other: &InstanceMask) -> usize {
        if self.count == 0 || other.count == 0 {
            return 0;
        }
        let r0 = self.rows.0.max(other.rows.0);
        let r1 = self.rows.1.min(other.rows.1);
        let c0 = self.cols.0.max(other.cols.0);
        let c1 = self.cols.1.min(other.cols.1);
        if r0 > r1 || c0 > c1 {
            return 0;
        }
        let mut n = 0;
        for r in r0..=r1 {
            for c in c0..=c1 {
                n += (self.mask.get(c, r) && other.mask.get(c, r)) as usize;
            }
        }
        n
    }
}

/// Per-image inputs with all pairwise overlaps precomputed.
#[derive(Debug)]
struct ImageEval<'a> {
    gts: Vec<&'a GtInstance>,
    /// Sorted by descending score, ties in input order.
    preds: Vec<&'a PredInstance>,
    gt_masks: Vec<InstanceMask>,
    pred_masks: Vec<InstanceMask>,
    /// `inter[p][g]` pixel intersections.
    inter: Vec<Vec<usize>>,
}

impl ImageEval<'_> {
    fn iou(&self, p: usize, g: usize) -> f64 {
        let i = self.inter[p][g];
        let u = self.pred_masks[p].count + self.gt_masks[g].count - i;
        if u == 0 {
            1.0
        } else {
            i as f64 / u as f64
        }
    }

    fn union_mask(masks: &[InstanceMask], size: (usize, usize)) -> Mask {
        let mut out = Mask::empty(size.0, size.1);
        for m in masks {
            out.union_with(&m.mask).expect("masks share the image size");
        }
        out
    }
}

/// Inputs grouped per image, in image-id order.
#[derive(Debug)]
pub struct PreparedEval<'a> {
    images: BTreeMap<u64, (ImageEval<'a>, (usize, usize))>,
    total_gts: usize,
}

impl<'a> PreparedEval<'a> {
    pub fn new(gts: &'a [GtInstance], preds: &'a [PredInstance], cfg: &EvalConfig) -> Self {
        let mut grouped: BTreeMap<u64, (Vec<&'a GtInstance>, Vec<&'a PredInstance>)> = BTreeMap::new();
        for g in gts {
            grouped.entry(g.image_id).or_default().0.push(g);
        }
        for p in preds {
            grouped.entry(p.image_id).or_default().1.push(p);
        }
        let images = grouped
            .into_iter()
            .map(|(id, (g, mut p))| {
                p.sort_by(|a, b| b.score.total_cmp(&a.score));
                let size = cfg.image_sizes.get(&id).copied().unwrap_or(cfg.default_size);
                let gt_masks: Vec<InstanceMask> = g.iter().map(|x| InstanceMask::new(&x.ring, size)).collect();
                let pred_masks: Vec<InstanceMask> = p.iter().map(|x| InstanceMask::new(&x.ring, size)).collect();
                let inter = pred_masks
                    .iter()
                    .map(|pm| gt_masks.iter().map(|gm| pm.intersection(gm)).collect())
                    .collect();
                let eval = ImageEval {
                    gts: g,
                    preds: p,
                    gt_masks,
                    pred_masks,
                    inter,
                };
                (id, (eval, size))
            })
            .collect();
        PreparedEval {
            images,
            total_gts: gts.len(),
        }
    }
}

/// Per-threshold AP and AR, as fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct ApAr {
    pub thresholds: Vec<f64>,
    pub ap: Vec<f64>,
    pub ar: Vec<f64>,
}

impl ApAr {
    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn mean_ap(&self) -> f64 {
        Self::mean(&self.ap)
    }

    pub fn mean_ar(&self) -> f64 {
        Self::mean(&self.ar)
    }

    /// AP at the threshold closest to `t`.
    pub fn ap_at(&self, t: f64) -> f64 {
        self.ap[self.index_of(t)]
    }

    pub fn ar_at(&self, t: f64) -> f64 {
        self.ar[self.index_of(t)]
    }

    fn index_of(&self, t: f64) -> usize {
        (0..self.thresholds.len())
            .min_by(|&a, &b| (self.thresholds[a] - t).abs().total_cmp(&(self.thresholds[b] - t).abs()))
            .expect("at least one threshold")
    }
}

fn ap_ar_prepared(prep: &PreparedEval, thresholds: &[f64], cfg: &EvalConfig) -> ApAr {
    let mut ap = Vec::with_capacity(thresholds.len());
    let mut ar = Vec::with_capacity(thresholds.len());
    let npos = prep.total_gts;
    for &t in thresholds {
        let thr = t.min(1.0 - 1e-10);
        // (score, is_true_positive) in image order, then stably by score.
        let mut dets: Vec<(f64, bool)> = Vec::new();
        for (img, _) in prep.images.values() {
            let mut taken = vec![false; img.gts.len()];
            for p in 0..img.preds.len().min(cfg.max_dets) {
                let mut best: Option<(usize, f64)> = None;
                for (g, used) in taken.iter().enumerate() {
                    if *used {
                        continue;
                    }
                    let v = img.iou(p, g);
                    if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((g, v));
                    }
                }
                if let Some((g, _)) = best {
                    taken[g] = true;
                }
                dets.push((img.preds[p].score, best.is_some()));
            }
        }
        if npos == 0 {
            let v = if cfg.empty_as_perfect {
                if dets.is_empty() {
                    1.0
                } else {
                    0.0
                }
            } else {
                f64::NAN
            };
            ap.push(v);
            ar.push(v);
            continue;
        }
        dets.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut recall = Vec::with_capacity(dets.len());
        let mut precision = Vec::with_capacity(dets.len());
        for &(_, is_tp) in &dets {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            recall.push(tp as f64 / npos as f64);
            precision.push(tp as f64 / (tp + fp) as f64);
        }
        for i in (0..precision.len().saturating_sub(1)).rev() {
            precision[i] = precision[i].max(precision[i + 1]);
        }
        let interpolated: f64 = (0..=100)
            .map(|i| {
                let r = i as f64 * 0.01;
                let idx = recall.partition_point(|&x| x < r);
                precision.get(idx).copied().unwrap_or(0.0)
            })
            .sum();
        ap.push(interpolated / 101.0);
        ar.push(recall.last().copied().unwrap_or(0.0));
    }
    ApAr {
        thresholds: thresholds.to_vec(),
        ap,
        ar,
    }
}

pub fn coco_ap_ar(gts: &[GtInstance], preds: &[PredInstance], iou_thresholds: &[f64], cfg: &EvalConfig) -> ApAr {
    ap_ar_prepared(&PreparedEval::new(gts, preds, cfg), iou_thresholds, cfg)
}

fn dataset_iou_prepared(prep: &PreparedEval, mode: IouMode) -> f64 {
    let mut inter_total = 0usize;
    let mut union_total = 0usize;
    let mut per_image = Vec::with_capacity(prep.images.len());
    for (img, size) in prep.images.values() {
        let g = ImageEval::union_mask(&img.gt_masks, *size);
        let p = ImageEval::union_mask(&img.pred_masks, *size);
        let (i, u) = g.overlap_counts(&p).expect("same size");
        inter_total += i;
        union_total += u;
        per_image.push(if u == 0 { 1.0 } else { i as f64 / u as f64 });
    }
    match mode {
        IouMode::PerImage if per_image.is_empty() => f64::NAN,
        IouMode::PerImage => per_image.iter().sum::<f64>() / per_image.len() as f64,
        IouMode::Pooled if union_total == 0 => f64::NAN,
        IouMode::Pooled => inter_total as f64 / union_total as f64,
    }
}

pub fn dataset_iou(gts: &[GtInstance], preds: &[PredInstance], cfg: &EvalConfig) -> f64 {
    dataset_iou_prepared(&PreparedEval::new(gts, preds, cfg), cfg.iou_mode)
}

/// A ground truth / prediction pair from the geometric-metric matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair<'a> {
    pub gt: &'a Ring,
    pub pred: &'a Ring,
    pub intersection: usize,
    pub union: usize,
}

impl MatchedPair<'_> {
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

struct Matching<'a> {
    pairs: Vec<MatchedPair<'a>>,
    /// Pixel areas of ground truth left unmatched.
    unmatched_gt_area: usize,
    total_gts: usize,
}

fn greedy_pairs<'a>(prep: &PreparedEval<'a>, match_iou: f64) -> Matching<'a> {
    let mut pairs = Vec::new();
    let mut unmatched_gt_area = 0;
    for (img, _) in prep.images.values() {
        let mut taken = vec![false; img.gts.len()];
        for p in 0..img.preds.len() {
            let mut best: Option<(usize, f64)> = None;
            for (g, used) in taken.iter().enumerate() {
                let v = img.iou(p, g);
                if !*used && v >= match_iou && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
                let i = img.inter[p][g];
                pairs.push(MatchedPair {
                    gt: &img.gts[g].ring,
                    pred: &img.preds[p].ring,
                    intersection: i,
                    union: img.pred_masks[p].count + img.gt_masks[g].count - i,
                });
            }
        }
        unmatched_gt_area += taken
            .iter()
            .zip(&img.gt_masks)
            .filter(|(t, _)| !**t)
            .map(|(_, m)| m.count)
            .sum::<usize>();
    }
    Matching {
        pairs,
        unmatched_gt_area,
        total_gts: prep.total_gts,
    }
}

/// Greedy score-ordered pairs with mask IoU at least `match_iou`.
pub fn match_pairs<'a>(
    gts: &'a [GtInstance],
    preds: &'a [PredInstance],
    cfg: &EvalConfig,
) -> Vec<MatchedPair<'a>> {
    greedy_pairs(&PreparedEval::new(gts, preds, cfg), cfg.match_iou).pairs
}

fn direction_degrees(a: Point, b: Point) -> f64 {
    (b.y - a.y).atan2(b.x - a.x).to_degrees()
}

/// Difference of two undirected line directions, in `[0, 90]`.
pub fn line_angle_difference(a_deg: f64, b_deg: f64) -> f64 {
    let d = (a_deg - b_deg).abs() % 180.0;
    d.min(180.0 - d)
}

fn distance_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    };
    p.distance(a.lerp(b, t))
}

/// Largest tangent disagreement between `pred` and `gt`: `samples` points
/// spaced evenly by arc length on `pred` are each compared with the edge of
/// `gt` nearest to them. When the nearest point is shared by several edges
/// (a vertex), the best-aligned one is used.
pub fn max_tangent_error(gt: &Ring, pred: &Ring, samples: usize) -> f64 {
    let total = perimeter(pred);
    let pv = pred.vertices();
    let n = pv.len();
    let gt_edges: Vec<(Point, Point, f64)> = gt.edges().map(|(a, b)| (a, b, direction_degrees(a, b))).collect();
    let mut worst: f64 = 0.0;
    let mut edge = 0;
    let mut edge_start = 0.0;
    let mut edge_len = pv[0].distance(pv[1 % n]);
    for k in 0..samples {
        let s = total * k as f64 / samples as f64;
        while edge + 1 < n && edge_start + edge_len <= s {
            edge_start += edge_len;
            edge += 1;
            edge_len = pv[edge].distance(pv[(edge + 1) % n]);
        }
        let (a, b) = (pv[edge], pv[(edge + 1) % n]);
        let point = a.lerp(b, ((s - edge_start) / edge_len).clamp(0.0, 1.0));
        let dir = direction_degrees(a, b);

        let dists: Vec<f64> = gt_edges.iter().map(|&(ga, gb, _)| distance_to_segment(point, ga, gb)).collect();
        let nearest = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let err = gt_edges
            .iter()
            .zip(&dists)
            .filter(|(_, &d)| d <= nearest + 1e-9)
            .map(|(&(_, _, gdir), _)| line_angle_difference(dir, gdir))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(err);
    }
    worst
}

fn mta_from(matching: &Matching, samples: usize) -> f64 {
    if matching.pairs.is_empty() {
        return f64::NAN;
    }
    let sum: f64 = matching
        .pairs
        .iter()
        .map(|p| max_tangent_error(p.gt, p.pred, samples))
        .sum();
    sum / matching.pairs.len() as f64
}

/// Mean over matched pairs of the max tangent angle error, in degrees.
/// NaN when nothing matches.
pub fn mta(gts: &[GtInstance], preds: &[PredInstance], cfg: &EvalConfig) -> f64 {
    mta_from(&greedy_pairs(&PreparedEval::new(gts, preds, cfg), cfg.match_iou), cfg.mta_samples)
}

fn n_ratio_from(matching: &Matching) -> f64 {
    if matching.pairs.is_empty() {
        return f64::NAN;
    }
    let pred: usize = matching.pairs.iter().map(|p| p.pred.len()).sum();
    let gt: usize = matching.pairs.iter().map(|p| p.gt.len()).sum();
    pred as f64 / gt as f64
}

/// Predicted over ground-truth vertex totals across matched pairs.
pub fn n_ratio(gts: &[GtInstance], preds: &[PredInstance], cfg: &EvalConfig) -> f64 {
    n_ratio_from(&greedy_pairs(&PreparedEval::new(gts, preds, cfg), cfg.match_iou))
}

/// `1 - |n_a - n_b| / (n_a + n_b)`.
pub fn complexity_weight(n_gt: usize, n_pred: usize) -> f64 {
    1.0 - n_gt.abs_diff(n_pred) as f64 / (n_gt + n_pred) as f64
}

/// Complexity-aware IoU of a single pair.
pub fn c_iou_pair(n_gt: usize, n_pred: usize, iou: f64) -> f64 {
    complexity_weight(n_gt, n_pred) * iou
}

fn c_iou_from(matching: &Matching, mode: CIouMode) -> f64 {
    if matching.total_gts == 0 {
        return f64::NAN;
    }
    match mode {
        CIouMode::PerPairMean => {
            let sum: f64 = matching
                .pairs
                .iter()
                .map(|p| c_iou_pair(p.gt.len(), p.pred.len(), p.iou()))
                .sum();
            sum / matching.total_gts as f64
        }
        CIouMode::Pooled => {
            let num: f64 = matching
                .pairs
                .iter()
                .map(|p| complexity_weight(p.gt.len(), p.pred.len()) * p.intersection as f64)
                .sum();
            let den = matching.pairs.iter().map(|p| p.union).sum::<usize>() + matching.unmatched_gt_area;
            if den == 0 {
                f64::NAN
            } else {
                num / den as f64
            }
        }
    }
}

pub fn c_iou(gts: &[GtInstance], preds: &[PredInstance], cfg: &EvalConfig) -> f64 {
    c_iou_from(&greedy_pairs(&PreparedEval::new(gts, preds, cfg), cfg.match_iou), cfg.c_iou_mode)
}

/// Metric suite. AP/AR, IoU and C-IoU are percentages; MTA is in degrees.
/// Undefined values are NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar: f64,
    pub ar50: f64,
    pub ar75: f64,
    pub iou: f64,
    pub mta_degrees: f64,
    pub n_ratio: f64,
    pub c_iou: f64,
    pub iou_mode: IouMode,
    pub c_iou_mode: CIouMode,
}

pub const REPORT_KEYS: [&str; 10] = ["AP", "AP50", "AP75", "AR", "AR50", "AR75", "IoU", "MTA", "N_ratio", "C_IoU"];

impl EvalReport {
    pub fn values(&self) -> [f64; 10] {
        [
            self.ap,
            self.ap50,
            self.ap75,
            self.ar,
            self.ar50,
            self.ar75,
            self.iou,
            self.mta_degrees,
            self.n_ratio,
            self.c_iou,
        ]
    }

    /// `KEY=value` lines preceded by `#` lines naming the aggregation modes.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# iou_mode={}", self.iou_mode.as_str()).unwrap();
        writeln!(out, "# c_iou_mode={}", self.c_iou_mode.as_str()).unwrap();
        writeln!(out, "# categories=all").unwrap();
        for (k, v) in REPORT_KEYS.iter().zip(self.values()) {
            if v.is_nan() {
                writeln!(out, "{k}=nan").unwrap();
            } else {
                writeln!(out, "{k}={v:.4}").unwrap();
            }
        }
        out
    }

    /// Reads the `KEY=value` lines back into a key/value map.
    pub fn parse_text(text: &str) -> Result<BTreeMap<String, f64>, String> {
        let mut out = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected KEY=value", n + 1))?;
            let v: f64 = v.trim().parse().map_err(|e| format!("line {}: {e}", n + 1))?;
            out.insert(k.trim().to_string(), v);
        }
        Ok(out)
    }
}

pub fn evaluate(gts: &[GtInstance], preds: &[PredInstance], cfg: &EvalConfig) -> EvalReport {
    let prep = PreparedEval::new(gts, preds, cfg);
    let apar = ap_ar_prepared(&prep, &cfg.iou_thresholds, cfg);
    let matching = greedy_pairs(&prep, cfg.match_iou);
    EvalReport {
        ap: 100.0 * apar.mean_ap(),
        ap50: 100.0 * apar.ap_at(0.5),
        ap75: 100.0 * apar.ap_at(0.75),
        ar: 100.0 * apar.mean_ar(),
        ar50: 100.0 * apar.ar_at(0.5),
        ar75: 100.0 * apar.ar_at(0.75),
        iou: 100.0 * dataset_iou_prepared(&prep, cfg.iou_mode),
        mta_degrees: mta_from(&matching, cfg.mta_samples),
        n_ratio: n_ratio_from(&matching),
        c_iou: 100.0 * c_iou_from(&matching, cfg.c_iou_mode),
        iou_mode: cfg.iou_mode,
        c_iou_mode: cfg.c_iou_mode,
    }
}
