//! Reference forward pass of multi-scale deformable attention.
//!
//! For each query and head, `L * K` locations are sampled bilinearly from
//! the pyramid around the query's reference point, weighted, projected into
//! the head's value space and projected back:
//!
//! ```text
//! out(q) = sum_m W_m [ sum_{l,k} A_mlqk * W'_m x_l(phi_l(p_q) + dp_mlqk) ]
//! ```
//!
//! Cell `(row, col)` of a level has its value at pixel coordinate
//! `(x = col, y = row)`. A normalized reference point maps to level pixels
//! as `phi_l(p) = p * size_l - 0.5`, so the point `((col + 0.5) / W,
//! (row + 0.5) / H)` lands exactly on a cell. Samples outside the grid read
//! zeros.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T, AttentionError> {
    Err(AttentionError::ShapeMismatch(msg.into()))
}

/// One pyramid level: `height x width` cells of `channels` values, stored
/// row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, AttentionError> {
        if data.len() != height * width * channels {
            return shape_err(format!(
                "grid {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            ));
        }
        if height == 0 || width == 0 || channels == 0 {
            return shape_err("grid dimensions must be positive");
        }
        Ok(FeatureGrid {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        FeatureGrid {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureGrid {
        FeatureGrid {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureGrid>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureGrid>) -> Result<Self, AttentionError> {
        let Some(first) = levels.first() else {
            return shape_err("pyramid needs at least one level");
        };
        let c = first.channels;
        if let Some(l) = levels.iter().position(|g| g.channels != c) {
            return shape_err(format!("level {l} has {} channels, expected {c}", levels[l].channels));
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn levels(&self) -> &[FeatureGrid] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [FeatureGrid] {
        &mut self.levels
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels
    }

    /// Element-wise `alpha * self + beta * other`.
    pub fn combine(&self, alpha: f64, other: &FeaturePyramid, beta: f64) -> Result<FeaturePyramid, AttentionError> {
        if self.levels.len() != other.levels.len() {
            return shape_err("pyramids differ in level count");
        }
        let mut levels = Vec::with_capacity(self.levels.len());
        for (a, b) in self.levels.iter().zip(&other.levels) {
            if a.data.len() != b.data.len() || a.height != b.height || a.width != b.width {
                return shape_err("pyramid levels differ in shape");
            }
            let data = a.data.iter().zip(&b.data).map(|(x, y)| alpha * x + beta * y).collect();
            levels.push(FeatureGrid { data, ..a.clone() });
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AttentionError> {
        if data.len() != rows * cols {
            return shape_err(format!("matrix {rows}x{cols} needs {} values", rows * cols));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Shared projections of one attention layer. Head `m` projects the `C`
/// input channels to `head_dim` values with `value_proj[m]` (`head_dim x C`)
/// and back with `out_proj[m]` (`C x head_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub value_proj: Vec<Matrix>,
    pub out_proj: Vec<Matrix>,
}

impl AttentionParams {
    /// Each head reads and writes its own contiguous block of
    /// `channels / heads` channels unchanged.
    pub fn partitioned_identity(heads: usize, levels: usize, points: usize, channels: usize) -> Result<Self, AttentionError> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return shape_err(format!("{channels} channels do not split into {heads} heads"));
        }
        let d = channels / heads;
        let value_proj = (0..heads)
            .map(|m| Matrix::from_fn(d, channels, |r, c| if c == m * d + r { 1.0 } else { 0.0 }))
            .collect();
        let out_proj = (0..heads)
            .map(|m| Matrix::from_fn(channels, d, |r, c| if r == m * d + c { 1.0 } else { 0.0 }))
            .collect();
        Ok(AttentionParams {
            heads,
            levels,
            points,
            value_proj,
            out_proj,
        })
    }

    pub fn slots(&self) -> usize {
        self.heads * self.levels * self.points
    }

    /// Flat index of `(head, level, point)`.
    pub fn slot(&self, head: usize, level: usize, point: usize) -> usize {
        (head * self.levels + level) * self.points + point
    }

    fn validate(&self, channels: usize, pyramid_levels: usize) -> Result<(), AttentionError> {
        if self.levels != pyramid_levels {
            return shape_err(format!("params expect {} levels, pyramid has {pyramid_levels}", self.levels));
        }
        if self.value_proj.len() != self.heads || self.out_proj.len() != self.heads {
            return shape_err(format!("need {} value and output projections", self.heads));
        }
        for (m, (vp, op)) in self.value_proj.iter().zip(&self.out_proj).enumerate() {
            if vp.cols != channels || op.rows != channels || vp.rows != op.cols {
                return shape_err(format!(
                    "head {m}: value projection {}x{} and output projection {}x{} do not fit {channels} channels",
                    vp.rows, vp.cols, op.rows, op.cols
                ));
            }
        }
        Ok(())
    }
}

/// A query: normalized reference point plus, per `(head, level, point)`
/// slot, its attention weight and its sampling offset in level pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub ref_point: [f64; 2],
    pub attn_weights: Vec<f64>,
    pub offsets: Vec<[f64; 2]>,
}

/// Bilinear interpolation at `loc = [x, y]` in level pixels; out-of-grid
/// neighbours contribute zero.
pub fn bilinear_sample(grid: &FeatureGrid, loc: [f64; 2]) -> Vec<f64> {
    let mut out = vec![0.0; grid.channels];
    for ((row, col), w) in bilinear_taps(grid, loc) {
        for (o, v) in out.iter_mut().zip(grid.cell(row, col)) {
            *o += w * v;
        }
    }
    out
}

/// In-grid neighbours of `loc` with their bilinear weights.
pub fn bilinear_taps(grid: &FeatureGrid, loc: [f64; 2]) -> Vec<((usize, usize), f64)> {
    let [x, y] = loc;
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut taps = Vec::with_capacity(4);
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let w = wx * wy;
            let (r, c) = (y0 + dy, x0 + dx);
            if w == 0.0 || r < 0.0 || c < 0.0 || r >= grid.height as f64 || c >= grid.width as f64 {
                continue;
            }
            taps.push(((r as usize, c as usize), w));
        }
    }
    taps
}

/// Maps a normalized point to level pixels.
pub fn level_location(grid: &FeatureGrid, p: [f64; 2]) -> [f64; 2] {
    [p[0] * grid.width as f64 - 0.5, p[1] * grid.height as f64 - 0.5]
}

/// Softmax over the `L * K` slots of each head.
pub fn normalize_weights(raw: &[f64], heads: usize) -> Vec<f64> {
    if heads == 0 || raw.is_empty() {
        return Vec::new();
    }
    let per_head = raw.len() / heads;
    let mut out = Vec::with_capacity(raw.len());
    for block in raw.chunks(per_head) {
        let max = block.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = block.iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    out
}

pub fn msda_forward(
    pyramid: &FeaturePyramid,
    queries: &[Query],
    params: &AttentionParams,
) -> Result<Vec<Vec<f64>>, AttentionError> {
    let channels = pyramid.channels();
    params.validate(channels, pyramid.levels.len())?;
    let slots = params.slots();
    queries
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            if q.attn_weights.len() != slots || q.offsets.len() != slots {
                return shape_err(format!(
                    "query {qi} has {} weights and {} offsets, expected {slots}",
                    q.attn_weights.len(),
                    q.offsets.len()
                ));
            }
            let mut out = vec![0.0; channels];
            for m in 0..params.heads {
                // W'_m is linear, so the weighted sum of samples is projected once.
                let mut mixed = vec![0.0; channels];
                for (l, grid) in pyramid.levels.iter().enumerate() {
                    let base = level_location(grid, q.ref_point);
                    for k in 0..params.points {
                        let s = params.slot(m, l, k);
                        let a = q.attn_weights[s];
                        let [dx, dy] = q.offsets[s];
                        let sample = bilinear_sample(grid, [base[0] + dx, base[1] + dy]);
                        for (acc, v) in mixed.iter_mut().zip(sample) {
                            *acc += a * v;
                        }
                    }
                }
                let head_value = params.value_proj[m].mul_vec(&mixed);
                for (o, v) in out.iter_mut().zip(params.out_proj[m].mul_vec(&head_value)) {
                    *o += v;
                }
            }
            Ok(out)
        })
        .collect()
}

/// Forward pass from unnormalized weights: each query's weights go through
/// [`normalize_weights`] first.
pub fn msda_forward_raw(
    pyramid: &FeaturePyramid,
    queries: &[Query],
    params: &AttentionParams,
) -> Result<Vec<Vec<f64>>, AttentionError> {
    let normalized: Vec<Query> = queries
        .iter()
        .map(|q| Query {
            attn_weights: normalize_weights(&q.attn_weights, params.heads),
            ..q.clone()
        })
        .collect();
    msda_forward(pyramid, &normalized, params)
}
