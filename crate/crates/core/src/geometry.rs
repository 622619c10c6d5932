//! Polygon primitives in image coordinates (x right, y down).
//!
//! A [`Ring`] is a closed polygon stored without the repeated closing vertex.
//! Orientation follows the screen: a positive shoelace sum means the ring
//! runs clockwise on screen.

use thiserror::Error;

/// Rings with `|signed_area|` below this are treated as degenerate.
pub const ZERO_AREA_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("ring needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("vertex {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("vertex {0} repeats its predecessor")]
    DuplicateVertex(usize),
    #[error("ring has zero area")]
    ZeroArea,
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const ORIGIN: Point = Point { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Point at parameter `t` on the segment `self -> other`.
    pub fn lerp(self, other: Point, t: f64) -> Point {
        Point::new(self.x + (other.x - self.x) * t, self.y + (other.y - self.y) * t)
    }

    pub fn midpoint(self, other: Point) -> Point {
        Point::new(0.5 * (self.x + other.x), 0.5 * (self.y + other.y))
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Point::new(x, y)
    }
}

/// A closed polygon with at least three vertices, finite coordinates and no
/// two cyclically consecutive vertices equal.
#[derive(Debug, Clone, PartialEq)]
pub struct Ring {
    vertices: Vec<Point>,
}

impl Ring {
    pub fn new(vertices: Vec<Point>) -> Result<Self, GeometryError> {
        let n = vertices.len();
        if n < 3 {
            return Err(GeometryError::TooFewVertices(n));
        }
        for (i, v) in vertices.iter().enumerate() {
            if !v.is_finite() {
                return Err(GeometryError::NonFinite(i));
            }
        }
        for i in 0..n {
            if vertices[i] == vertices[(i + 1) % n] {
                return Err(GeometryError::DuplicateVertex((i + 1) % n));
            }
        }
        Ok(Ring { vertices })
    }

    /// Builds a ring from a flat `x0, y0, x1, y1, ...` list, dropping
    /// consecutive repeats (including a repeated closing vertex).
    pub fn from_flat_lenient(coords: &[f64]) -> Result<Self, GeometryError> {
        if !coords.len().is_multiple_of(2) {
            return Err(GeometryError::TooFewVertices(coords.len() / 2));
        }
        let points: Vec<Point> = coords.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect();
        Ring::new(dedup_cyclic(points))
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn into_vertices(self) -> Vec<Point> {
        self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Edges as `(start, end)` pairs, closing edge last.
    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.vertices.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Ring {
        Ring {
            vertices: self.vertices.iter().map(|p| Point::new(p.x + dx, p.y + dy)).collect(),
        }
    }

    pub fn reversed(&self) -> Ring {
        let mut vertices = self.vertices.clone();
        vertices.reverse();
        Ring { vertices }
    }

    /// Cyclic rotation so that `start` becomes vertex 0.
    pub fn rotated(&self, start: usize) -> Ring {
        let mut vertices = self.vertices.clone();
        vertices.rotate_left(start % self.vertices.len());
        Ring { vertices }
    }
}

/// Removes cyclically consecutive duplicates.
pub fn dedup_cyclic(mut points: Vec<Point>) -> Vec<Point> {
    points.dedup();
    while points.len() > 1 && points.first() == points.last() {
        points.pop();
    }
    points
}

/// Normalized axis-aligned box: center and size as fractions of the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoundingBox { cx, cy, w, h }
    }

    /// From `(x0, y0, x1, y1)` corners.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoundingBox {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoundingBox::new(a[0], a[1], a[2], a[3])
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        in_unit(self.cx) && in_unit(self.cy) && self.w > 0.0 && self.h > 0.0
    }
}

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// In-place union.
    pub fn union_with(&mut self, other: &Mask) -> Result<(), GeometryError> {
        self.check_dims(other)?;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    /// `(|a and b|, |a or b|)`.
    pub fn overlap_counts(&self, other: &Mask) -> Result<(usize, usize), GeometryError> {
        self.check_dims(other)?;
        let mut inter = 0;
        let mut union = 0;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok((inter, union))
    }

    fn check_dims(&self, other: &Mask) -> Result<(), GeometryError> {
        if self.width != other.width || self.height != other.height {
            return Err(GeometryError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }
}

/// Shoelace sum over the closed ring in raw image coordinates.
pub fn signed_area(ring: &Ring) -> f64 {
    0.5 * ring.edges().map(|(a, b)| a.x * b.y - b.x * a.y).sum::<f64>()
}

pub fn perimeter(ring: &Ring) -> f64 {
    ring.edges().map(|(a, b)| a.distance(b)).sum()
}

/// Index of the top extreme vertex: minimal y, ties by minimal x, then by
/// lowest index.
pub fn top_extreme_index(vertices: &[Point]) -> usize {
    let mut best = 0;
    for (i, v) in vertices.iter().enumerate().skip(1) {
        let b = vertices[best];
        if v.y < b.y || (v.y == b.y && v.x < b.x) {
            best = i;
        }
    }
    best
}

/// Screen-clockwise orientation starting at the top extreme vertex.
pub fn canonicalize(ring: &Ring) -> Result<Ring, GeometryError> {
    let area = signed_area(ring);
    if area.abs() < ZERO_AREA_TOLERANCE {
        return Err(GeometryError::ZeroArea);
    }
    let oriented = if area < 0.0 { ring.reversed() } else { ring.clone() };
    let start = top_extreme_index(oriented.vertices());
    Ok(oriented.rotated(start))
}

/// Pixel `(i, j)` is set iff its center `(i + 0.5, j + 0.5)` has nonzero
/// winding number. An edge counts for a center when it crosses the center's
/// row half-open in y (`min <= y < max`) strictly to the right of it.
pub fn rasterize(ring: &Ring, width: usize, height: usize) -> Mask {
    let mut mask = Mask::empty(width, height);
    if width == 0 || height == 0 {
        return mask;
    }
    let (min_y, max_y) = ring
        .vertices()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.y), hi.max(p.y)));
    let first_row = (min_y - 0.5).floor().max(0.0) as usize;
    let last_row = ((max_y - 0.5).ceil().max(0.0) as usize).min(height - 1);

    let mut crossings: Vec<(f64, i32)> = Vec::with_capacity(ring.len());
    for row in first_row..=last_row {
        let py = row as f64 + 0.5;
        crossings.clear();
        for (a, b) in ring.edges() {
            let dir = if a.y <= py && py < b.y {
                1
            } else if b.y <= py && py < a.y {
                -1
            } else {
                continue;
            };
            let x = a.x + (py - a.y) * (b.x - a.x) / (b.y - a.y);
            crossings.push((x, dir));
        }
        if crossings.is_empty() {
            continue;
        }
        crossings.sort_by(|l, r| l.0.total_cmp(&r.0));
        let total: i32 = crossings.iter().map(|c| c.1).sum();
        let mut passed = 0i32;
        let mut next = 0;
        for col in 0..width {
            let px = col as f64 + 0.5;
            while next < crossings.len() && crossings[next].0 <= px {
                passed += crossings[next].1;
                next += 1;
            }
            if total - passed != 0 {
                mask.set(col, row, true);
            }
        }
    }
    mask
}

/// Intersection over union; two empty masks score 1.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64, GeometryError> {
    let (inter, union) = a.overlap_counts(b)?;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Tight box of the vertices, normalized by the image size and clamped to
/// the unit square.
pub fn bbox_of(ring: &Ring, image_w: f64, image_h: f64) -> BoundingBox {
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in ring.vertices() {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let nx = |v: f64| (v / image_w).clamp(0.0, 1.0);
    let ny = |v: f64| (v / image_h).clamp(0.0, 1.0);
    BoundingBox::from_corners(nx(x0), ny(y0), nx(x1), ny(y1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(pts: &[(f64, f64)]) -> Ring {
        Ring::new(pts.iter().map(|&p| p.into()).collect()).unwrap()
    }

    fn square(x0: f64, y0: f64, side: f64) -> Ring {
        ring(&[(x0, y0), (x0 + side, y0), (x0 + side, y0 + side), (x0, y0 + side)])
    }

    #[test]
    fn ring_validation() {
        assert_eq!(
            Ring::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)]),
            Err(GeometryError::TooFewVertices(2))
        );
        assert_eq!(
            Ring::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(0.0, 0.0)]),
            Err(GeometryError::DuplicateVertex(0))
        );
        assert_eq!(
            Ring::new(vec![Point::new(0.0, 0.0), Point::new(f64::NAN, 0.0), Point::new(0.0, 1.0)]),
            Err(GeometryError::NonFinite(1))
        );
        let lenient = Ring::from_flat_lenient(&[0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(lenient.len(), 3);
    }

    #[test]
    fn shoelace_sign_follows_screen_orientation() {
        // Down the left side first: counter-clockwise on screen.
        let ccw = ring(&[(0.0, 0.0), (0.0, 10.0), (10.0, 10.0), (10.0, 0.0)]);
        assert_eq!(signed_area(&ccw), -100.0);
        assert_eq!(signed_area(&ccw.reversed()), 100.0);
        let thin = ring(&[(0.0, 0.0), (10.0, 0.0), (5.0, 1e-9)]);
        assert!(signed_area(&thin).abs() < 1e-8);
    }

    #[test]
    fn canonical_form() {
        // CCW square starting bottom-right.
        let r = ring(&[(10.0, 10.0), (10.0, 0.0), (0.0, 0.0), (0.0, 10.0)]);
        let c = canonicalize(&r).unwrap();
        assert_eq!(c, square(0.0, 0.0, 10.0));
        assert!(signed_area(&c) > 0.0);
        assert_eq!(canonicalize(&c).unwrap(), c);

        let tie = ring(&[(5.0, 0.0), (5.0, 5.0), (0.0, 5.0), (2.0, 0.0)]);
        let c = canonicalize(&tie).unwrap();
        assert_eq!(c.vertices()[0], Point::new(2.0, 0.0));
    }

    #[test]
    fn canonicalize_rejects_degenerate() {
        let flat = ring(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        assert_eq!(canonicalize(&flat), Err(GeometryError::ZeroArea));
    }

    #[test]
    fn perimeters() {
        assert_eq!(perimeter(&square(0.0, 0.0, 10.0)), 40.0);
        assert_eq!(perimeter(&ring(&[(0.0, 0.0), (3.0, 0.0), (3.0, 4.0)])), 12.0);
        let hex: Vec<Point> = (0..6)
            .map(|k| {
                let t = k as f64 * std::f64::consts::PI / 3.0;
                Point::new(t.cos(), t.sin())
            })
            .collect();
        assert!((perimeter(&Ring::new(hex).unwrap()) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn rasterize_squares() {
        let sq = square(0.0, 0.0, 10.0);
        assert_eq!(rasterize(&sq, 10, 10).count(), 100);
        let big = rasterize(&sq, 20, 20);
        assert_eq!(big.count(), 100);
        assert!(big.get(9, 9) && !big.get(10, 9) && !big.get(9, 10));
        assert!(rasterize(&square(50.0, 50.0, 10.0), 20, 20).is_empty());
        assert!(rasterize(&square(-30.0, 2.0, 10.0), 20, 20).is_empty());
        assert_eq!(rasterize(&sq, 0, 5).count(), 0);
    }

    #[test]
    fn rasterize_is_orientation_agnostic() {
        let sq = square(1.3, 2.7, 6.1);
        assert_eq!(rasterize(&sq, 12, 12), rasterize(&sq.reversed(), 12, 12));
    }

    #[test]
    fn iou_cases() {
        let a = rasterize(&square(0.0, 0.0, 10.0), 20, 20);
        let b = rasterize(&square(5.0, 0.0, 10.0), 20, 20);
        let far = rasterize(&square(10.0, 10.0, 10.0), 20, 20);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &far).unwrap(), 0.0);
        assert_eq!(mask_iou(&a, &b).unwrap(), 50.0 / 150.0);
        assert_eq!(mask_iou(&Mask::empty(3, 3), &Mask::empty(3, 3)).unwrap(), 1.0);
        assert!(matches!(
            mask_iou(&a, &Mask::empty(3, 3)),
            Err(GeometryError::DimensionMismatch(20, 20, 3, 3))
        ));
    }

    #[test]
    fn boxes() {
        let b = bbox_of(&square(10.0, 10.0, 10.0), 100.0, 100.0);
        assert!((b.cx - 0.15).abs() < 1e-12 && (b.cy - 0.15).abs() < 1e-12);
        assert!((b.w - 0.1).abs() < 1e-12 && (b.h - 0.1).abs() < 1e-12);
        let full = bbox_of(&square(0.0, 0.0, 100.0), 100.0, 100.0);
        assert_eq!(full, BoundingBox::new(0.5, 0.5, 1.0, 1.0));
        let over = bbox_of(&square(-20.0, 50.0, 100.0), 100.0, 100.0);
        let [x0, y0, x1, y1] = over.corners();
        assert_eq!((x0, y0, x1, y1), (0.0, 0.5, 0.8, 1.0));
    }
}
