//! COCO annotation ingestion, prediction files, synthetic scenes, a noisy
//! prediction simulator and SVG overlays.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{encode_uniform, EncodingConfig, EncodingError, Scheme};
use crate::geometry::{canonicalize, signed_area, Point, Ring};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("record {index}: {message}")]
    InvalidRecord { index: usize, message: String },
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn json(e: serde_json::Error) -> Self {
        DatasetError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub instances: Vec<Ring>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    OddCoordinateCount,
    TooFewVertices,
    /// Missing segmentation, RLE masks, non-numeric values.
    UnsupportedSegmentation,
    InvalidGeometry,
    UnknownImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedAnnotation {
    pub annotation_id: Option<u64>,
    pub image_id: u64,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CocoData {
    /// Sorted by image id.
    pub scenes: Vec<Scene>,
    pub skipped: Vec<SkippedAnnotation>,
}

#[derive(Deserialize)]
struct RawCoco {
    images: Vec<RawImage>,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
}

#[derive(Deserialize)]
struct RawImage {
    id: u64,
    #[serde(default)]
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Deserialize)]
struct RawAnnotation {
    #[serde(default)]
    id: Option<u64>,
    image_id: u64,
    #[serde(default)]
    segmentation: serde_json::Value,
}

fn first_ring(seg: &serde_json::Value) -> Result<Vec<f64>, SkipReason> {
    let ring = seg
        .as_array()
        .and_then(|rings| rings.first())
        .and_then(|r| r.as_array())
        .ok_or(SkipReason::UnsupportedSegmentation)?;
    ring.iter()
        .map(|v| v.as_f64().ok_or(SkipReason::UnsupportedSegmentation))
        .collect()
}

fn parse_ring(coords: &[f64], width: usize, height: usize) -> Result<Ring, SkipReason> {
    if !coords.len().is_multiple_of(2) {
        return Err(SkipReason::OddCoordinateCount);
    }
    if coords.len() < 6 {
        return Err(SkipReason::TooFewVertices);
    }
    let clamped: Vec<f64> = coords
        .chunks(2)
        .flat_map(|c| [c[0].clamp(0.0, width as f64), c[1].clamp(0.0, height as f64)])
        .collect();
    match Ring::from_flat_lenient(&clamped) {
        Ok(r) => Ok(r),
        Err(crate::geometry::GeometryError::TooFewVertices(_)) => Err(SkipReason::TooFewVertices),
        Err(_) => Err(SkipReason::InvalidGeometry),
    }
}

/// Parses the COCO subset: `images[]` and `annotations[]`, first ring of each
/// segmentation. Bad polygons are skipped and listed; only JSON syntax and
/// missing required fields fail the whole document.
pub fn parse_coco(text: &str) -> Result<CocoData, DatasetError> {
    let raw: RawCoco = serde_json::from_str(text).map_err(DatasetError::json)?;
    let mut scenes: BTreeMap<u64, Scene> = BTreeMap::new();
    for img in raw.images {
        scenes.insert(
            img.id,
            Scene {
                image_id: img.id,
                file_name: img.file_name,
                width: img.width,
                height: img.height,
                instances: Vec::new(),
            },
        );
    }
    let mut skipped = Vec::new();
    for ann in raw.annotations {
        let skip = |reason| SkippedAnnotation {
            annotation_id: ann.id,
            image_id: ann.image_id,
            reason,
        };
        let Some(scene) = scenes.get_mut(&ann.image_id) else {
            skipped.push(skip(SkipReason::UnknownImage));
            continue;
        };
        match first_ring(&ann.segmentation).and_then(|c| parse_ring(&c, scene.width, scene.height)) {
            Ok(ring) => scene.instances.push(ring),
            Err(reason) => skipped.push(skip(reason)),
        }
    }
    Ok(CocoData {
        scenes: scenes.into_values().collect(),
        skipped,
    })
}

pub fn read_coco(path: &Path) -> Result<CocoData, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    parse_coco(&text)
}

#[derive(Serialize)]
struct OutImage<'a> {
    id: u64,
    file_name: &'a str,
    width: usize,
    height: usize,
}

#[derive(Serialize)]
struct OutAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    segmentation: Vec<Vec<f64>>,
    bbox: [f64; 4],
    area: f64,
    iscrowd: u8,
}

#[derive(Serialize)]
struct OutCategory {
    id: u64,
    name: &'static str,
}

#[derive(Serialize)]
struct OutCoco<'a> {
    images: Vec<OutImage<'a>>,
    annotations: Vec<OutAnnotation>,
    categories: [OutCategory; 1],
}

/// COCO document with one `building` category; annotation ids count from 1.
pub fn coco_to_string(scenes: &[Scene]) -> String {
    let mut annotations = Vec::new();
    for s in scenes {
        for ring in &s.instances {
            let v = ring.vertices();
            let (x0, x1) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.x), b.max(p.x)));
            let (y0, y1) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.y), b.max(p.y)));
            annotations.push(OutAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: s.image_id,
                category_id: 1,
                segmentation: vec![ring.to_flat()],
                bbox: [x0, y0, x1 - x0, y1 - y0],
                area: signed_area(ring).abs(),
                iscrowd: 0,
            });
        }
    }
    let doc = OutCoco {
        images: scenes
            .iter()
            .map(|s| OutImage {
                id: s.image_id,
                file_name: &s.file_name,
                width: s.width,
                height: s.height,
            })
            .collect(),
        annotations,
        categories: [OutCategory { id: 1, name: "building" }],
    };
    serde_json::to_string_pretty(&doc).expect("plain data serializes")
}

pub fn write_coco(path: &Path, scenes: &[Scene]) -> Result<(), DatasetError> {
    std::fs::write(path, coco_to_string(scenes)).map_err(|e| DatasetError::io(path, e))
}

/// One predicted instance. `polygon` is a flat `x, y` list; encoded
/// predictions also carry per-vertex corner scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub score: f64,
    pub polygon: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corner_scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
}

impl PredictionRecord {
    pub fn points(&self) -> Vec<Point> {
        self.polygon.chunks(2).map(|c| Point::new(c[0], c[1])).collect()
    }

    fn validate(&self) -> Result<(), String> {
        if !self.polygon.len().is_multiple_of(2) || self.polygon.len() < 6 {
            return Err(format!(
                "polygon needs an even number of at least 6 coordinates, got {}",
                self.polygon.len()
            ));
        }
        if !self.polygon.iter().all(|v| v.is_finite()) {
            return Err("polygon has non-finite coordinates".into());
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [0, 1]", self.score));
        }
        if let Some(cs) = &self.corner_scores {
            if cs.len() * 2 != self.polygon.len() {
                return Err(format!(
                    "{} corner scores for {} vertices",
                    cs.len(),
                    self.polygon.len() / 2
                ));
            }
            if !cs.iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err("corner scores must lie in [0, 1]".into());
            }
        }
        Ok(())
    }
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRecord>, DatasetError> {
    let records: Vec<PredictionRecord> = serde_json::from_str(text).map_err(DatasetError::json)?;
    for (index, r) in records.iter().enumerate() {
        r.validate().map_err(|message| DatasetError::InvalidRecord { index, message })?;
    }
    Ok(records)
}

/// JSON array. Reals are written in shortest round-trip form, so reading
/// back gives identical values.
pub fn predictions_to_string(records: &[PredictionRecord]) -> String {
    serde_json::to_string_pretty(records).expect("plain data serializes")
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    parse_predictions(&text)
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<(), DatasetError> {
    std::fs::write(path, predictions_to_string(records)).map_err(|e| DatasetError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    AxisRect,
    RotatedRect,
    LShape,
    RegularPolygon,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::AxisRect,
        ShapeKind::RotatedRect,
        ShapeKind::LShape,
        ShapeKind::RegularPolygon,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub min_buildings: usize,
    pub max_buildings: usize,
    /// Side range of a building's bounding square before rotation.
    pub min_size: f64,
    pub max_size: f64,
    /// Clearance between building boxes and to the frame edge.
    pub gap: f64,
    pub shapes: Vec<ShapeKind>,
    pub first_image_id: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 300,
            height: 300,
            min_buildings: 1,
            max_buildings: 6,
            min_size: 24.0,
            max_size: 72.0,
            gap: 3.0,
            shapes: ShapeKind::ALL.to_vec(),
            first_image_id: 1,
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 64;

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Local outline (screen-clockwise) centred on the origin.
fn outline(kind: ShapeKind, size: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let rect = |w: f64, h: f64| vec![(-w / 2.0, -h / 2.0), (w / 2.0, -h / 2.0), (w / 2.0, h / 2.0), (-w / 2.0, h / 2.0)];
    let rotate = |pts: Vec<(f64, f64)>, t: f64| {
        let (s, c) = t.sin_cos();
        pts.into_iter().map(|(x, y)| (c * x - s * y, s * x + c * y)).collect()
    };
    match kind {
        ShapeKind::AxisRect => {
            let h = size * rng.random_range(0.5..=1.0);
            rect(size, h)
        }
        ShapeKind::RotatedRect => {
            let h = size * rng.random_range(0.5..=1.0);
            rotate(rect(size, h), rng.random_range(0.0..PI))
        }
        ShapeKind::LShape => {
            let w = size;
            let h = size * rng.random_range(0.6..=1.0);
            let a = w * rng.random_range(0.35..=0.6);
            let b = h * rng.random_range(0.35..=0.6);
            let (x0, y0) = (-w / 2.0, -h / 2.0);
            // Notch cut from the top-right corner.
            let pts = vec![
                (x0, y0),
                (x0 + w - a, y0),
                (x0 + w - a, y0 + b),
                (x0 + w, y0 + b),
                (x0 + w, y0 + h),
                (x0, y0 + h),
            ];
            let quarter = rng.random_range(0..4) as f64 * PI / 2.0;
            rotate(pts, quarter)
        }
        ShapeKind::RegularPolygon => {
            let n = rng.random_range(4..=12);
            let r = size / 2.0;
            let phase = rng.random_range(0.0..2.0 * PI / n as f64);
            (0..n)
                .map(|k| {
                    let t = phase + 2.0 * PI * k as f64 / n as f64;
                    (r * t.cos(), r * t.sin())
                })
                .collect()
        }
    }
}

fn bounds(pts: &[Point]) -> [f64; 4] {
    pts.iter().fold(
        [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
        |b, p| [b[0].min(p.x), b[1].min(p.y), b[2].max(p.x), b[3].max(p.y)],
    )
}

/// Shortest edge at least 1/24 of the perimeter, so that corners stay well
/// apart after uniform resampling.
fn well_spread(ring: &Ring) -> bool {
    let per = crate::geometry::perimeter(ring);
    ring.edges().all(|(a, b)| a.distance(b) >= per / 24.0)
}

fn synth_scene(index: usize, seed: u64, cfg: &SynthConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let target = rng.random_range(cfg.min_buildings..=cfg.max_buildings.max(cfg.min_buildings));
    let (fw, fh) = (cfg.width as f64, cfg.height as f64);
    let mut boxes: Vec<[f64; 4]> = Vec::new();
    let mut instances = Vec::new();
    for _ in 0..target {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let kind = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
            let size = rng.random_range(cfg.min_size..=cfg.max_size);
            let local = outline(kind, size, &mut rng);
            let cx = rng.random_range(0.0..fw);
            let cy = rng.random_range(0.0..fh);
            let pts: Vec<Point> = local.iter().map(|&(x, y)| Point::new(round2(cx + x), round2(cy + y))).collect();
            let b = bounds(&pts);
            let g = cfg.gap;
            if b[0] < g || b[1] < g || b[2] > fw - g || b[3] > fh - g {
                continue;
            }
            let clear = boxes
                .iter()
                .all(|o| b[2] + g <= o[0] || o[2] + g <= b[0] || b[3] + g <= o[1] || o[3] + g <= b[1]);
            if !clear {
                continue;
            }
            let Ok(ring) = Ring::new(pts).and_then(|r| canonicalize(&r)) else {
                continue;
            };
            if !well_spread(&ring) {
                continue;
            }
            boxes.push(b);
            instances.push(ring);
            break;
        }
    }
    let image_id = cfg.first_image_id + index as u64;
    Scene {
        image_id,
        file_name: format!("synth_{image_id:06}.png"),
        width: cfg.width,
        height: cfg.height,
        instances,
    }
}

/// Deterministic scenes of separated buildings. Scene `i` draws from its own
/// stream of the seeded generator, so scenes do not depend on `count`.
pub fn synth_scenes(count: usize, seed: u64, cfg: &SynthConfig) -> Vec<Scene> {
    (0..count).map(|i| synth_scene(i, seed, cfg)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub m: usize,
    /// Std-dev of additive coordinate noise, pixels.
    pub coord_sigma: f64,
    /// Corner score degradation level.
    pub score_sigma: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            m: 96,
            coord_sigma: 0.0,
            score_sigma: 0.0,
            seed: 42,
        }
    }
}

/// Corner score before multiplicative noise, given the circular index
/// distance to the nearest true corner. Neighbours of a corner get a
/// decaying response; far samples stay low.
fn base_corner_score(distance: usize, sigma: f64) -> f64 {
    match distance {
        0 => 1.0 - sigma / 2.0,
        1 => (6.0 * sigma).min(0.9),
        2 => (3.0 * sigma).min(0.9),
        _ => sigma / 5.0,
    }
}

/// Stand-in for model output: each ground-truth ring is uniformly encoded,
/// then coordinates get Gaussian noise and corner flags are replaced by a
/// blurred, noisy score profile. With both sigmas 0 the records are the
/// encoded ground truth.
pub fn simulate_predictions(scenes: &[Scene], cfg: &NoiseConfig) -> Result<Vec<PredictionRecord>, DatasetError> {
    let enc = EncodingConfig {
        m: cfg.m,
        phase1_labels: false,
    };
    let coord_noise = Normal::new(0.0, cfg.coord_sigma.max(0.0)).expect("finite sigma");
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(si as u64);
        for ring in &scene.instances {
            let e = encode_uniform(ring, &enc)?;
            let corners = e.corner_indices();
            let n = e.len();
            let mut polygon = Vec::with_capacity(2 * n);
            for p in e.coords() {
                if cfg.coord_sigma > 0.0 {
                    polygon.push(p.x + coord_noise.sample(&mut rng));
                    polygon.push(p.y + coord_noise.sample(&mut rng));
                } else {
                    polygon.extend([p.x, p.y]);
                }
            }
            let scores = if cfg.score_sigma > 0.0 {
                (0..n)
                    .map(|i| {
                        let d = corners
                            .iter()
                            .map(|&c| {
                                let d = i.abs_diff(c);
                                d.min(n - d)
                            })
                            .min()
                            .unwrap_or(usize::MAX);
                        let base = base_corner_score(d, cfg.score_sigma);
                        (base * (1.0 + cfg.score_sigma * unit.sample(&mut rng))).clamp(0.0, 1.0)
                    })
                    .collect()
            } else {
                e.corner_flags().to_vec()
            };
            out.push(PredictionRecord {
                image_id: scene.image_id,
                score: 1.0,
                polygon,
                corner_scores: Some(scores),
                scheme: Some(Scheme::UniformSampling),
            });
        }
    }
    Ok(out)
}

const GT_STROKE: &str = "#1f77b4";
const PRED_STROKE: &str = "#d62728";

fn svg_ring(out: &mut String, ring: &Ring, color: &str) {
    let mut d = String::new();
    for (i, p) in ring.vertices().iter().enumerate() {
        let _ = write!(d, "{}{} {} ", if i == 0 { "M" } else { "L" }, p.x, p.y);
    }
    d.push('Z');
    let _ = writeln!(out, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1"/>"#);
    for p in ring.vertices() {
        let _ = writeln!(out, r#"<circle cx="{}" cy="{}" r="1.5" fill="{color}"/>"#, p.x, p.y);
    }
}

/// SVG 1.1 overlay: frame, ground truth in blue, predictions in red.
pub fn render_svg(scene: &Scene, preds: &[Ring]) -> String {
    let (w, h) = (scene.width, scene.height);
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white" stroke="black"/>"#);
    for r in &scene.instances {
        svg_ring(&mut out, r, GT_STROKE);
    }
    for r in preds {
        svg_ring(&mut out, r, PRED_STROKE);
    }
    out.push_str("</svg>\n");
    out
}

pub fn write_svg(path: &Path, scene: &Scene, preds: &[Ring]) -> Result<(), DatasetError> {
    std::fs::write(path, render_svg(scene, preds)).map_err(|e| DatasetError::io(path, e))
}
