//! Fixed-length polygon encodings.
//!
//! Two schemes turn a variable-length ring into `m` vertices plus a parallel
//! corner-flag sequence:
//!
//! * uniform sampling: `m` points at equal arc-length spacing, with each
//!   annotated corner snapped onto a distinct sample through a linear sum
//!   assignment on Euclidean distance;
//! * zero padding: the ring's own vertices followed by `(0, 0)` entries.
//!
//! Both start from the canonical ring (screen-clockwise, top extreme vertex
//! first). Rings with more than `m` vertices are first reduced by repeatedly
//! merging the shortest edge into its midpoint.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{solve, AssignmentError, CostMatrix};
use crate::geometry::{canonicalize, perimeter, GeometryError, Point, Ring};

/// Relative slack under which two edge lengths count as tied.
const EDGE_TIE_RTOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodingError {
    #[error("ring has {corners} vertices but only {m} samples were requested")]
    TooManyCorners { corners: usize, m: usize },
    #[error("{corners} corners cannot be snapped onto {samples} samples")]
    SizeMismatch { corners: usize, samples: usize },
    #[error("vertex count must be at least {min}, got {m}")]
    InvalidCount { m: usize, min: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[serde(rename = "uniform")]
    UniformSampling,
    #[serde(rename = "zeropad")]
    ZeroPad,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::UniformSampling => "uniform",
            Scheme::ZeroPad => "zeropad",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Scheme::UniformSampling),
            "zeropad" => Ok(Scheme::ZeroPad),
            other => Err(format!("unknown scheme `{other}` (expected uniform or zeropad)")),
        }
    }
}

/// `m` coordinates with a parallel corner score per vertex. Ground truth
/// flags are exactly 0 or 1; predictions carry probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPolygon {
    coords: Vec<Point>,
    corner_flags: Vec<f64>,
    scheme: Scheme,
}

impl EncodedPolygon {
    /// # Panics
    /// If `coords` and `corner_flags` differ in length.
    pub fn new(coords: Vec<Point>, corner_flags: Vec<f64>, scheme: Scheme) -> Self {
        assert_eq!(coords.len(), corner_flags.len(), "coords and flags must align");
        EncodedPolygon {
            coords,
            corner_flags,
            scheme,
        }
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn corner_flags(&self) -> &[f64] {
        &self.corner_flags
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn flat_coords(&self) -> Vec<f64> {
        self.coords.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn with_flags(mut self, flags: Vec<f64>) -> Self {
        assert_eq!(flags.len(), self.coords.len(), "coords and flags must align");
        self.corner_flags = flags;
        self
    }

    pub fn with_coords(mut self, coords: Vec<Point>) -> Self {
        assert_eq!(coords.len(), self.corner_flags.len(), "coords and flags must align");
        self.coords = coords;
        self
    }

    /// Indices whose flag is exactly 1.
    pub fn corner_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.corner_flags[i] == 1.0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub m: usize,
    /// Emit all-ones corner flags (first training phase).
    pub phase1_labels: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            m: 96,
            phase1_labels: false,
        }
    }
}

impl EncodingConfig {
    pub const MIN_M: usize = 4;

    pub fn validate(&self) -> Result<(), EncodingError> {
        if self.m < Self::MIN_M {
            return Err(EncodingError::InvalidCount {
                m: self.m,
                min: Self::MIN_M,
            });
        }
        Ok(())
    }
}

/// `m` points spaced `perimeter / m` apart along the ring, starting at
/// vertex 0. A sample that lands on a vertex (to within rounding) is that
/// vertex exactly.
pub fn uniform_sample(ring: &Ring, m: usize) -> Result<Vec<Point>, EncodingError> {
    let n = ring.len();
    if n > m {
        return Err(EncodingError::TooManyCorners { corners: n, m });
    }
    let verts = ring.vertices();
    let total = perimeter(ring);
    let snap_tol = total * 1e-12;
    let mut cumulative = Vec::with_capacity(n + 1);
    cumulative.push(0.0);
    for (a, b) in ring.edges() {
        let last = *cumulative.last().unwrap();
        cumulative.push(last + a.distance(b));
    }

    let mut out = Vec::with_capacity(m);
    let mut edge = 0;
    for k in 0..m {
        let target = total * k as f64 / m as f64;
        while edge + 1 < n && cumulative[edge + 1] <= target + snap_tol {
            edge += 1;
        }
        let start = cumulative[edge];
        if (target - start).abs() <= snap_tol {
            out.push(verts[edge]);
            continue;
        }
        let len = cumulative[edge + 1] - start;
        out.push(verts[edge].lerp(verts[(edge + 1) % n], (target - start) / len));
    }
    Ok(out)
}

/// Replaces samples with corners under the minimum total Euclidean distance
/// assignment (corners as rows). Returns the new sequence and the sorted
/// indices that now hold corners.
pub fn snap_corners(
    samples: &[Point],
    corners: &[Point],
) -> Result<(Vec<Point>, Vec<usize>), EncodingError> {
    if corners.len() > samples.len() {
        return Err(EncodingError::SizeMismatch {
            corners: corners.len(),
            samples: samples.len(),
        });
    }
    let costs = CostMatrix::from_fn(corners.len(), samples.len(), |r, c| corners[r].distance(samples[c]))?;
    let assignment = solve(&costs);
    let mut out = samples.to_vec();
    let mut indices = Vec::with_capacity(corners.len());
    for (corner, sample) in assignment.pairs {
        out[sample] = corners[corner];
        indices.push(sample);
    }
    indices.sort_unstable();
    Ok((out, indices))
}

/// Merges the shortest edge into its midpoint until at most `m` vertices
/// remain. Ties go to the lowest edge index; the closing edge keeps its
/// merged vertex at position 0.
pub fn simplify_to(ring: &Ring, m: usize) -> Result<Ring, EncodingError> {
    if ring.len() <= m {
        return Ok(ring.clone());
    }
    if m < 3 {
        return Err(GeometryError::ZeroArea.into());
    }
    let mut verts = ring.vertices().to_vec();
    while verts.len() > m {
        let n = verts.len();
        let lengths: Vec<f64> = (0..n).map(|i| verts[i].distance(verts[(i + 1) % n])).collect();
        let min = lengths.iter().cloned().fold(f64::INFINITY, f64::min);
        let limit = min + EDGE_TIE_RTOL * min.max(f64::MIN_POSITIVE);
        let i = lengths.iter().position(|&l| l <= limit).unwrap();
        let mid = verts[i].midpoint(verts[(i + 1) % n]);
        if i + 1 < n {
            verts[i] = mid;
            verts.remove(i + 1);
        } else {
            verts[0] = mid;
            verts.pop();
        }
    }
    let simplified = Ring::new(crate::geometry::dedup_cyclic(verts))?;
    if simplified.len() < 3 {
        return Err(GeometryError::ZeroArea.into());
    }
    Ok(simplified)
}

/// Canonical ring reduced to at most `m` vertices, re-canonicalized since a
/// merge may move the top extreme vertex.
pub fn prepare_ring(ring: &Ring, m: usize) -> Result<Ring, EncodingError> {
    let canonical = canonicalize(ring)?;
    if canonical.len() <= m {
        return Ok(canonical);
    }
    Ok(canonicalize(&simplify_to(&canonical, m)?)?)
}

pub fn encode_uniform(ring: &Ring, cfg: &EncodingConfig) -> Result<EncodedPolygon, EncodingError> {
    cfg.validate()?;
    let prepared = prepare_ring(ring, cfg.m)?;
    let samples = uniform_sample(&prepared, cfg.m)?;
    let (coords, corner_idx) = snap_corners(&samples, prepared.vertices())?;
    let flags = if cfg.phase1_labels {
        vec![1.0; cfg.m]
    } else {
        let mut flags = vec![0.0; cfg.m];
        for i in corner_idx {
            flags[i] = 1.0;
        }
        flags
    };
    Ok(EncodedPolygon::new(coords, flags, Scheme::UniformSampling))
}

pub fn encode_zeropad(ring: &Ring, cfg: &EncodingConfig) -> Result<EncodedPolygon, EncodingError> {
    cfg.validate()?;
    let prepared = prepare_ring(ring, cfg.m)?;
    let n = prepared.len();
    let mut coords = prepared.into_vertices();
    coords.resize(cfg.m, Point::ORIGIN);
    let flags = if cfg.phase1_labels {
        vec![1.0; cfg.m]
    } else {
        (0..cfg.m).map(|i| if i < n { 1.0 } else { 0.0 }).collect()
    };
    Ok(EncodedPolygon::new(coords, flags, Scheme::ZeroPad))
}

pub fn encode(ring: &Ring, scheme: Scheme, cfg: &EncodingConfig) -> Result<EncodedPolygon, EncodingError> {
    match scheme {
        Scheme::UniformSampling => encode_uniform(ring, cfg),
        Scheme::ZeroPad => encode_zeropad(ring, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(pts: &[(f64, f64)]) -> Ring {
        Ring::new(pts.iter().map(|&p| p.into()).collect()).unwrap()
    }

    fn square() -> Ring {
        ring(&[(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)])
    }

    fn regular(n: usize, r: f64, phase: f64) -> Ring {
        Ring::new(
            (0..n)
                .map(|k| {
                    let t = phase + 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                    Point::new(50.0 + r * t.cos(), 50.0 + r * t.sin())
                })
                .collect(),
        )
        .unwrap()
    }

    /// Walks the boundary accumulating edge lengths independently of
    /// `uniform_sample` and returns the point at arc length `s`.
    fn point_at(ring: &Ring, s: f64) -> Point {
        let mut rest = s;
        for (a, b) in ring.edges() {
            let l = a.distance(b);
            if rest <= l {
                return a.lerp(b, rest / l);
            }
            rest -= l;
        }
        ring.vertices()[0]
    }

    #[test]
    fn square_eight_samples() {
        let s = uniform_sample(&square(), 8).unwrap();
        let expected = [(0.0, 0.0), (5.0, 0.0), (10.0, 0.0), (10.0, 5.0), (10.0, 10.0), (5.0, 10.0), (0.0, 10.0), (0.0, 5.0)];
        assert_eq!(s, expected.iter().map(|&p| p.into()).collect::<Vec<Point>>());
        for w in 0..8 {
            let next = s[(w + 1) % 8];
            assert!((s[w].distance(next) - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn samples_follow_arc_length() {
        let r = canonicalize(&ring(&[(3.0, 1.0), (17.5, 4.0), (12.0, 19.0), (1.0, 11.0)])).unwrap();
        let m = 37;
        let s = uniform_sample(&r, m).unwrap();
        let p = perimeter(&r);
        for (k, got) in s.iter().enumerate() {
            let want = point_at(&r, p * k as f64 / m as f64);
            assert!(got.distance(want) < 1e-9, "sample {k}");
        }
    }

    #[test]
    fn sample_count_equal_to_vertices() {
        let hex = canonicalize(&regular(6, 20.0, 0.3)).unwrap();
        let s = uniform_sample(&hex, 6).unwrap();
        for (a, b) in s.iter().zip(hex.vertices()) {
            assert!(a.distance(*b) < 1e-9);
        }
        assert_eq!(s[0], hex.vertices()[0]);
        assert_eq!(
            uniform_sample(&hex, 5),
            Err(EncodingError::TooManyCorners { corners: 6, m: 5 })
        );
    }

    #[test]
    fn snapping() {
        let samples = uniform_sample(&square(), 8).unwrap();
        let (out, idx) = snap_corners(&samples, square().vertices()).unwrap();
        assert_eq!(idx, vec![0, 2, 4, 6]);
        assert_eq!(out, samples);

        let nudged: Vec<Point> = samples.iter().map(|p| Point::new(p.x + 0.3, p.y - 0.2)).collect();
        let (out, idx) = snap_corners(&nudged, &[Point::new(10.0, 10.0)]).unwrap();
        let nearest = (0..8)
            .min_by(|&a, &b| nudged[a].distance(Point::new(10.0, 10.0)).total_cmp(&nudged[b].distance(Point::new(10.0, 10.0))))
            .unwrap();
        assert_eq!(idx, vec![nearest]);
        assert_eq!(out[nearest], Point::new(10.0, 10.0));

        assert!(matches!(
            snap_corners(&samples[..2], square().vertices()),
            Err(EncodingError::SizeMismatch { corners: 4, samples: 2 })
        ));
    }

    #[test]
    fn snapping_resolves_shared_nearest_sample() {
        // Both corners are nearest to sample 1; the assignment splits them.
        let samples = [Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(2.0, 0.0)];
        let corners = [Point::new(0.9, 0.0), Point::new(1.2, 0.0)];
        let (out, idx) = snap_corners(&samples, &corners).unwrap();
        assert_eq!(idx.len(), 2);
        assert!(out.contains(&corners[0]) && out.contains(&corners[1]));
    }

    #[test]
    fn encode_square_uniform() {
        let cfg = EncodingConfig { m: 8, phase1_labels: false };
        let e = encode_uniform(&square(), &cfg).unwrap();
        assert_eq!(e.len(), 8);
        assert_eq!(e.corner_flags().iter().sum::<f64>(), 4.0);
        for c in square().vertices() {
            assert!(e.coords().contains(c));
        }
        let p1 = encode_uniform(&square(), &EncodingConfig { m: 8, phase1_labels: true }).unwrap();
        assert_eq!(p1.coords(), e.coords());
        assert!(p1.corner_flags().iter().all(|&f| f == 1.0));
    }

    #[test]
    fn simplify_noop_and_ties() {
        let sq = square();
        assert_eq!(simplify_to(&sq, 4).unwrap(), sq);
        assert_eq!(simplify_to(&sq, 10).unwrap(), sq);

        let hex = regular(6, 10.0, 0.0);
        let v = hex.vertices();
        let s = simplify_to(&hex, 5).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.vertices()[0], v[0].midpoint(v[1]));
        assert_eq!(&s.vertices()[1..], &v[2..]);
    }

    #[test]
    fn simplify_removes_notch_first() {
        // Rectangle whose top edge has a 1 px step: the step edge goes first.
        let notched = ring(&[(0.0, 0.0), (20.0, 0.0), (20.0, 1.0), (40.0, 1.0), (40.0, 20.0), (0.0, 20.0)]);
        let s = simplify_to(&notched, 5).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.vertices()[1], Point::new(20.0, 0.5));
        let s4 = simplify_to(&notched, 4).unwrap();
        assert_eq!(s4.len(), 4);
    }

    #[test]
    fn simplify_too_far() {
        assert!(simplify_to(&square(), 2).is_err());
    }

    #[test]
    fn zeropad_square() {
        let e = encode_zeropad(&square(), &EncodingConfig { m: 8, phase1_labels: false }).unwrap();
        assert_eq!(e.corner_flags(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(&e.coords()[..4], square().vertices());
        assert!(e.coords()[4..].iter().all(|p| *p == Point::ORIGIN));
        assert_eq!(e.scheme(), Scheme::ZeroPad);

        let full = encode_zeropad(&square(), &EncodingConfig { m: 4, phase1_labels: false }).unwrap();
        assert!(full.corner_flags().iter().all(|&f| f == 1.0));
    }

    #[test]
    fn hundred_gon() {
        let big = regular(100, 100.0, 0.01);
        let cfg = EncodingConfig::default();
        for e in [encode_uniform(&big, &cfg).unwrap(), encode_zeropad(&big, &cfg).unwrap()] {
            assert_eq!(e.len(), 96);
            assert!(e.corner_flags().iter().all(|&f| f == 1.0));
        }
    }

    #[test]
    fn config_validation() {
        let cfg = EncodingConfig { m: 3, phase1_labels: false };
        assert!(matches!(encode_uniform(&square(), &cfg), Err(EncodingError::InvalidCount { .. })));
        let flat = ring(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        assert_eq!(
            encode_uniform(&flat, &EncodingConfig::default()),
            Err(EncodingError::Geometry(GeometryError::ZeroArea))
        );
        assert_eq!("zeropad".parse::<Scheme>(), Ok(Scheme::ZeroPad));
        assert!("spline".parse::<Scheme>().is_err());
    }
}
