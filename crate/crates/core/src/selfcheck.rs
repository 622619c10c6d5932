//! Seeded invariant checks for the attention kernel and finite-difference
//! checks for the loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    bilinear_taps, level_location, msda_forward, normalize_weights, AttentionParams, FeatureGrid, FeaturePyramid,
    Matrix, Query,
};
use crate::encoding::{EncodedPolygon, Scheme};
use crate::geometry::{BoundingBox, Point};
use crate::losses::{corner_bce, focal_loss, giou, l1_seq, polygon_l1, FocalParams};

/// Deliberate bugs for exercising the failure path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Attention weights are used without the per-head softmax.
    UnnormalizedWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelCheckConfig {
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    /// Channels per head.
    pub head_dim: usize,
    pub seed: u64,
    pub configurations: usize,
    pub gradient_samples: usize,
    pub fault: Option<Fault>,
}

impl Default for KernelCheckConfig {
    fn default() -> Self {
        KernelCheckConfig {
            heads: 8,
            levels: 4,
            points: 4,
            head_dim: 2,
            seed: 0,
            configurations: 100,
            gradient_samples: 100,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed deviation, or the first failure.
    pub detail: String,
}

pub const LINEARITY_TOL: f64 = 1e-10;
pub const NORMALIZATION_TOL: f64 = 1e-12;
pub const GRADIENT_RTOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

struct Setup {
    pyramid: FeaturePyramid,
    params: AttentionParams,
    queries: Vec<Query>,
}

fn random_grid(rng: &mut ChaCha8Rng, channels: usize) -> FeatureGrid {
    let h = rng.random_range(1..=8);
    let w = rng.random_range(1..=8);
    FeatureGrid::from_fn(h, w, channels, |_, _, _| rng.random_range(-1.0..1.0))
}

fn random_pyramid(rng: &mut ChaCha8Rng, levels: usize, channels: usize) -> FeaturePyramid {
    let grids = (0..levels).map(|_| random_grid(rng, channels)).collect();
    FeaturePyramid::new(grids).expect("shared channel count")
}

fn same_shape_pyramid(rng: &mut ChaCha8Rng, like: &FeaturePyramid) -> FeaturePyramid {
    let grids = like
        .levels()
        .iter()
        .map(|g| FeatureGrid::from_fn(g.height(), g.width(), g.channels(), |_, _, _| rng.random_range(-1.0..1.0)))
        .collect();
    FeaturePyramid::new(grids).expect("shared channel count")
}

impl KernelCheckConfig {
    fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    fn slots(&self) -> usize {
        self.heads * self.levels * self.points
    }

    /// The weight pipeline under test: softmax, or nothing when faulted.
    fn weights(&self, raw: &[f64]) -> Vec<f64> {
        match self.fault {
            Some(Fault::UnnormalizedWeights) => raw.to_vec(),
            None => normalize_weights(raw, self.heads),
        }
    }

    fn random_query(&self, rng: &mut ChaCha8Rng) -> Query {
        let raw: Vec<f64> = (0..self.slots()).map(|_| rng.random_range(-2.0..2.0)).collect();
        Query {
            ref_point: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
            attn_weights: self.weights(&raw),
            offsets: (0..self.slots())
                .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
                .collect(),
        }
    }

    fn random_params(&self, rng: &mut ChaCha8Rng) -> AttentionParams {
        let c = self.channels();
        let d = self.head_dim;
        AttentionParams {
            heads: self.heads,
            levels: self.levels,
            points: self.points,
            value_proj: (0..self.heads)
                .map(|_| Matrix::from_fn(d, c, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
            out_proj: (0..self.heads)
                .map(|_| Matrix::from_fn(c, d, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
        }
    }

    fn setup(&self, rng: &mut ChaCha8Rng, identity_proj: bool) -> Setup {
        let pyramid = random_pyramid(rng, self.levels, self.channels());
        let params = if identity_proj {
            AttentionParams::partitioned_identity(self.heads, self.levels, self.points, self.channels())
                .expect("channels split into heads")
        } else {
            self.random_params(rng)
        };
        let queries = (0..4).map(|_| self.random_query(rng)).collect();
        Setup {
            pyramid,
            params,
            queries,
        }
    }

    fn rng(&self, salt: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(salt);
        rng
    }
}

fn result(name: &'static str, failure: Option<String>, worst: f64) -> PropertyResult {
    PropertyResult {
        name,
        passed: failure.is_none(),
        detail: failure.unwrap_or_else(|| format!("max deviation {worst:.3e}")),
    }
}

/// One level, one point, zero offset, reference at a cell centre: every
/// head returns its own channels of that cell.
fn check_identity(cfg: &KernelCheckConfig) -> PropertyResult {
    let mut rng = cfg.rng(1);
    let mut failure = None;
    for i in 0..cfg.configurations {
        let grid = random_grid(&mut rng, cfg.channels());
        let (r, c) = (rng.random_range(0..grid.height()), rng.random_range(0..grid.width()));
        let pyramid = FeaturePyramid::new(vec![grid.clone()]).expect("one level");
        let params = AttentionParams::partitioned_identity(cfg.heads, 1, 1, cfg.channels()).expect("divisible");
        let q = Query {
            ref_point: [(c as f64 + 0.5) / grid.width() as f64, (r as f64 + 0.5) / grid.height() as f64],
            attn_weights: cfg.weights(&vec![0.0; cfg.heads]),
            offsets: vec![[0.0, 0.0]; cfg.heads],
        };
        let out = msda_forward(&pyramid, &[q], &params).expect("shapes agree");
        if out[0] != grid.cell(r, c) {
            failure = Some(format!("configuration {i}: output {:?} != cell {:?}", out[0], grid.cell(r, c)));
            break;
        }
    }
    result("identity", failure, 0.0)
}

fn check_normalization(cfg: &KernelCheckConfig) -> PropertyResult {
    let mut rng = cfg.rng(2);
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for i in 0..cfg.configurations {
        let q = cfg.random_query(&mut rng);
        for (m, block) in q.attn_weights.chunks(cfg.levels * cfg.points).enumerate() {
            let dev = (block.iter().sum::<f64>() - 1.0).abs();
            worst = worst.max(dev);
            if dev > NORMALIZATION_TOL || block.iter().any(|&w| w < 0.0) {
                failure.get_or_insert_with(|| format!("configuration {i}, head {m}: weights sum off by {dev:.3e}"));
            }
        }
    }
    result("weight-normalization", failure, worst)
}

fn check_linearity(cfg: &KernelCheckConfig) -> PropertyResult {
    let mut rng = cfg.rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.configurations {
        let s = cfg.setup(&mut rng, false);
        let other = same_shape_pyramid(&mut rng, &s.pyramid);
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mixed = s.pyramid.combine(a, &other, b).expect("same shapes");
        let fx = msda_forward(&s.pyramid, &s.queries, &s.params).expect("shapes agree");
        let fy = msda_forward(&other, &s.queries, &s.params).expect("shapes agree");
        let fm = msda_forward(&mixed, &s.queries, &s.params).expect("shapes agree");
        for ((x, y), m) in fx.iter().zip(&fy).zip(&fm) {
            for ((xv, yv), mv) in x.iter().zip(y).zip(m) {
                worst = worst.max((a * xv + b * yv - mv).abs());
            }
        }
    }
    let failure = (worst > LINEARITY_TOL).then(|| format!("deviation {worst:.3e} exceeds {LINEARITY_TOL:.0e}"));
    result("linearity", failure, worst)
}

/// With channel-preserving projections each output channel is a convex
/// combination of that channel's cell values and of the zero padding.
fn check_convex_envelope(cfg: &KernelCheckConfig) -> PropertyResult {
    let mut rng = cfg.rng(4);
    let c = cfg.channels();
    let mut failure = None;
    'outer: for i in 0..cfg.configurations {
        let s = cfg.setup(&mut rng, true);
        let mut lo = vec![0.0f64; c];
        let mut hi = vec![0.0f64; c];
        for g in s.pyramid.levels() {
            for (k, v) in g.data().iter().enumerate() {
                lo[k % c] = lo[k % c].min(*v);
                hi[k % c] = hi[k % c].max(*v);
            }
        }
        let out = msda_forward(&s.pyramid, &s.queries, &s.params).expect("shapes agree");
        for o in &out {
            for ch in 0..c {
                if o[ch] < lo[ch] || o[ch] > hi[ch] {
                    failure = Some(format!(
                        "configuration {i}, channel {ch}: {} outside [{}, {}]",
                        o[ch], lo[ch], hi[ch]
                    ));
                    break 'outer;
                }
            }
        }
    }
    result("convex-envelope", failure, 0.0)
}

/// Shuffling the (level, point) slots of a head, weights and offsets
/// together, only reorders a sum.
fn check_permutation(cfg: &KernelCheckConfig) -> PropertyResult {
    let mut rng = cfg.rng(5);
    let mut worst: f64 = 0.0;
    let per_head = cfg.levels * cfg.points;
    for _ in 0..cfg.configurations {
        let s = cfg.setup(&mut rng, false);
        // Only points within a level can move: the level fixes the grid.
        let permuted: Vec<Query> = s
            .queries
            .iter()
            .map(|q| {
                let mut p = q.clone();
                for m in 0..cfg.heads {
                    for l in 0..cfg.levels {
                        let base = m * per_head + l * cfg.points;
                        for k in (1..cfg.points).rev() {
                            let j = rng.random_range(0..=k);
                            p.attn_weights.swap(base + k, base + j);
                            p.offsets.swap(base + k, base + j);
                        }
                    }
                }
                p
            })
            .collect();
        let a = msda_forward(&s.pyramid, &s.queries, &s.params).expect("shapes agree");
        let b = msda_forward(&s.pyramid, &permuted, &s.params).expect("shapes agree");
        for (x, y) in a.iter().zip(&b) {
            for (u, v) in x.iter().zip(y) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    let failure = (worst > LINEARITY_TOL).then(|| format!("deviation {worst:.3e}"));
    result("permutation-invariance", failure, worst)
}

/// The output is linear in each cell value; its coefficient from the
/// bilinear taps must match a central difference.
fn check_cell_coefficients(cfg: &KernelCheckConfig) -> PropertyResult {
    let mut rng = cfg.rng(6);
    let c = cfg.channels();
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.configurations {
        let s = cfg.setup(&mut rng, false);
        let q = &s.queries[0];
        let l = rng.random_range(0..cfg.levels);
        let m = rng.random_range(0..cfg.heads);
        let k = rng.random_range(0..cfg.points);
        let slot = s.params.slot(m, l, k);
        let grid = &s.pyramid.levels()[l];
        let base = level_location(grid, q.ref_point);
        let [dx, dy] = q.offsets[slot];
        let taps = bilinear_taps(grid, [base[0] + dx, base[1] + dy]);
        let Some(&((row, col), _)) = taps.first() else {
            continue;
        };
        let ch = rng.random_range(0..c);

        // Analytic: sum over all slots hitting (row, col) on level l.
        let mut coeff = vec![0.0; c];
        for h in 0..cfg.heads {
            let mut a = 0.0;
            for kk in 0..cfg.points {
                let s2 = s.params.slot(h, l, kk);
                let [ox, oy] = q.offsets[s2];
                for ((r2, c2), w) in bilinear_taps(grid, [base[0] + ox, base[1] + oy]) {
                    if (r2, c2) == (row, col) {
                        a += q.attn_weights[s2] * w;
                    }
                }
            }
            let mut unit = vec![0.0; c];
            unit[ch] = a;
            let y = s.params.out_proj[h].mul_vec(&s.params.value_proj[h].mul_vec(&unit));
            for (acc, v) in coeff.iter_mut().zip(y) {
                *acc += v;
            }
        }

        let idx = (row * grid.width() + col) * c + ch;
        let mut plus = s.pyramid.clone();
        plus.levels_mut()[l].data_mut()[idx] += FD_STEP;
        let mut minus = s.pyramid.clone();
        minus.levels_mut()[l].data_mut()[idx] -= FD_STEP;
        let fp = msda_forward(&plus, &s.queries[..1], &s.params).expect("shapes agree");
        let fm = msda_forward(&minus, &s.queries[..1], &s.params).expect("shapes agree");
        for o in 0..c {
            let fd = (fp[0][o] - fm[0][o]) / (2.0 * FD_STEP);
            worst = worst.max((fd - coeff[o]).abs());
        }
    }
    let failure = (worst > 1e-6).then(|| format!("deviation {worst:.3e}"));
    result("cell-coefficient-fd", failure, worst)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn central_difference(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

fn gradient_result(name: &'static str, worst: f64) -> PropertyResult {
    let failure = (worst >= GRADIENT_RTOL).then(|| format!("relative error {worst:.3e}"));
    result(name, failure, worst)
}

fn check_focal(cfg: &KernelCheckConfig) -> PropertyResult {
    let mut rng = cfg.rng(10);
    let fp = FocalParams::default();
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.gradient_samples {
        let p = rng.random_range(0.01..0.99);
        let pos = rng.random_bool(0.5);
        let fd = central_difference(|x| focal_loss(x, pos, &fp).value, p);
        worst = worst.max(relative_error(focal_loss(p, pos, &fp).grad, fd));
    }
    gradient_result("focal-gradient", worst)
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    BoundingBox::new(
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
        rng.random_range(0.05..0.5),
        rng.random_range(0.05..0.5),
    )
}

/// Boxes whose corresponding edges are far apart relative to the step, so
/// that no min/max switches inside the stencil.
fn boxes_separated(a: &BoundingBox, b: &BoundingBox) -> bool {
    let (ac, bc) = (a.corners(), b.corners());
    let all = [ac, bc].concat();
    (0..4).all(|i| (ac[i] - bc[i]).abs() > 1e-3)
        && (0..2).all(|k| {
            let (lo, hi) = (ac[k].max(bc[k]), ac[k + 2].min(bc[k + 2]));
            (hi - lo).abs() > 1e-3
        })
        && all.iter().all(|v| v.is_finite())
}

fn check_giou(cfg: &KernelCheckConfig) -> PropertyResult {
    let mut rng = cfg.rng(11);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < cfg.gradient_samples {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        if !boxes_separated(&a, &b) {
            continue;
        }
        done += 1;
        let out = giou(&a, &b);
        for i in 0..4 {
            let fa = central_difference(
                |x| {
                    let mut v = a.to_array();
                    v[i] = x;
                    giou(&BoundingBox::from_array(v), &b).value
                },
                a.to_array()[i],
            );
            let fb = central_difference(
                |x| {
                    let mut v = b.to_array();
                    v[i] = x;
                    giou(&a, &BoundingBox::from_array(v)).value
                },
                b.to_array()[i],
            );
            worst = worst.max(relative_error(out.grad_a[i], fa)).max(relative_error(out.grad_b[i], fb));
        }
    }
    gradient_result("giou-gradient", worst)
}

/// Pairs at least `gap` apart in every coordinate (L1 is kinked at ties).
fn untied_pair(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> (Vec<f64>, Vec<f64>) {
    let a: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
    let b = a
        .iter()
        .map(|&x| {
            let d = rng.random_range(gap..3.0);
            if rng.random_bool(0.5) {
                x + d
            } else {
                x - d
            }
        })
        .collect();
    (a, b)
}

fn check_l1(cfg: &KernelCheckConfig) -> PropertyResult {
    let mut rng = cfg.rng(12);
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.gradient_samples {
        let (a, b) = untied_pair(&mut rng, 4, 1e-3);
        let g = l1_seq(&a, &b).expect("equal lengths");
        for i in 0..a.len() {
            let fd = central_difference(
                |x| {
                    let mut v = a.clone();
                    v[i] = x;
                    l1_seq(&v, &b).expect("equal lengths").value
                },
                a[i],
            );
            worst = worst.max(relative_error(g.grad[i], fd));
        }
    }
    gradient_result("l1-gradient", worst)
}

fn points(flat: &[f64]) -> Vec<Point> {
    flat.chunks(2).map(|c| Point::new(c[0], c[1])).collect()
}

fn check_polygon_l1(cfg: &KernelCheckConfig) -> PropertyResult {
    let mut rng = cfg.rng(13);
    let mut worst: f64 = 0.0;
    let m = 8;
    for _ in 0..cfg.gradient_samples {
        let (pred, gt) = untied_pair(&mut rng, 2 * m, 1e-3);
        let flags = vec![0.0; m];
        let gt_enc = EncodedPolygon::new(points(&gt), flags.clone(), Scheme::UniformSampling);
        let pred_enc = EncodedPolygon::new(points(&pred), flags.clone(), Scheme::UniformSampling);
        let g = polygon_l1(&gt_enc, &pred_enc).expect("equal lengths");
        for i in 0..pred.len() {
            let fd = central_difference(
                |x| {
                    let mut v = pred.clone();
                    v[i] = x;
                    let p = EncodedPolygon::new(points(&v), flags.clone(), Scheme::UniformSampling);
                    polygon_l1(&gt_enc, &p).expect("equal lengths").value
                },
                pred[i],
            );
            worst = worst.max(relative_error(g.grad[i], fd));
        }
    }
    gradient_result("polygon-l1-gradient", worst)
}

fn check_corner_bce(cfg: &KernelCheckConfig) -> PropertyResult {
    let mut rng = cfg.rng(14);
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.gradient_samples {
        let n = 6;
        let flags: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let g = corner_bce(&flags, &probs).expect("equal lengths");
        for i in 0..n {
            let fd = central_difference(
                |x| {
                    let mut v = probs.clone();
                    v[i] = x;
                    corner_bce(&flags, &v).expect("equal lengths").value
                },
                probs[i],
            );
            worst = worst.max(relative_error(g.grad[i], fd));
        }
    }
    gradient_result("corner-bce-gradient", worst)
}

pub fn attention_checks(cfg: &KernelCheckConfig) -> Vec<PropertyResult> {
    vec![
        check_identity(cfg),
        check_normalization(cfg),
        check_linearity(cfg),
        check_convex_envelope(cfg),
        check_permutation(cfg),
        check_cell_coefficients(cfg),
    ]
}

pub fn gradient_checks(cfg: &KernelCheckConfig) -> Vec<PropertyResult> {
    vec![
        check_focal(cfg),
        check_giou(cfg),
        check_l1(cfg),
        check_polygon_l1(cfg),
        check_corner_bce(cfg),
    ]
}

/// Attention invariants followed by loss gradients.
pub fn run_all(cfg: &KernelCheckConfig) -> Vec<PropertyResult> {
    let mut out = attention_checks(cfg);
    out.extend(gradient_checks(cfg));
    out
}
