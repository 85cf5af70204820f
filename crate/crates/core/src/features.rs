//! Dense feature maps, flat embeddings, pixel masks, and correspondence
//! search over them.
//!
//! Feature maps live on a grid coarser than (or equal to) the image they were
//! computed from. Grid cell `(row, col)` covers the image pixels
//! `[col * sx - 0.5, (col + 1) * sx - 0.5)` horizontally, where
//! `sx = image_width / grid_width`, so its center sits at pixel
//! `(col + 0.5) * sx - 0.5`. The same holds vertically.

use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{containing_pixel, pixel_in_bounds};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatureMap {
    pub grid_height: usize,
    pub grid_width: usize,
    pub channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub normalized: bool,
    data: Vec<f32>,
}

impl DenseFeatureMap {
    pub fn new(
        grid_height: usize,
        grid_width: usize,
        channels: usize,
        image_height: usize,
        image_width: usize,
        normalized: bool,
        data: Vec<f32>,
    ) -> Result<Self> {
        if grid_height == 0 || grid_width == 0 || channels == 0 {
            return Err(Error::DimensionMismatch("feature grid must be nonempty".into()));
        }
        if image_height == 0 || image_width == 0 {
            return Err(Error::DimensionMismatch("image size must be nonzero".into()));
        }
        let expected = grid_height * grid_width * channels;
        if data.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{grid_height}x{grid_width}x{channels} grid needs {expected} floats, got {}",
                data.len()
            )));
        }
        Ok(Self {
            grid_height,
            grid_width,
            channels,
            image_height,
            image_width,
            normalized,
            data,
        })
    }

    /// Checks the unit-norm claim of a normalized map and finiteness of all
    /// values.
    pub fn validate(&self) -> Result<()> {
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidData("feature map contains non-finite values".into()));
        }
        if self.normalized {
            for (i, cell) in self.data.chunks_exact(self.channels).enumerate() {
                let n = norm(cell);
                if n != 0.0 && (n - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidData(format!(
                        "cell {i} has norm {n} in a map flagged as normalized"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn num_cells(&self) -> usize {
        self.grid_height * self.grid_width
    }

    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        self.cell_at(row * self.grid_width + col)
    }

    #[inline]
    pub fn cell_at(&self, index: usize) -> &[f32] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn scale(&self) -> (f64, f64) {
        (
            self.image_width as f64 / self.grid_width as f64,
            self.image_height as f64 / self.grid_height as f64,
        )
    }

    /// Image-pixel coordinates of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> Point2<f64> {
        let (sx, sy) = self.scale();
        Point2::new((col as f64 + 0.5) * sx - 0.5, (row as f64 + 0.5) * sy - 0.5)
    }

    /// Continuous grid coordinates `(x, y)` of an image pixel.
    pub fn pixel_to_grid(&self, u: f64, v: f64) -> (f64, f64) {
        let (sx, sy) = self.scale();
        ((u + 0.5) / sx - 0.5, (v + 0.5) / sy - 0.5)
    }

    /// Row-major indices of the cells whose center pixel lies in `mask`; all
    /// cells when no mask is given.
    pub fn cells_in_mask(&self, mask: Option<&PixelMask>) -> Result<Vec<usize>> {
        let Some(mask) = mask else {
            return Ok((0..self.num_cells()).collect());
        };
        if mask.width != self.image_width || mask.height != self.image_height {
            return Err(Error::DimensionMismatch(format!(
                "mask is {}x{} but feature map image is {}x{}",
                mask.width, mask.height, self.image_width, self.image_height
            )));
        }
        let mut cells = Vec::new();
        for row in 0..self.grid_height {
            for col in 0..self.grid_width {
                let c = self.cell_center(row, col);
                let (pc, pr) = containing_pixel(c.x, c.y);
                if mask.get(pc.min(mask.width - 1), pr.min(mask.height - 1)) {
                    cells.push(row * self.grid_width + col);
                }
            }
        }
        Ok(cells)
    }
}

#[inline]
fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Divides every feature vector by its L2 norm. Zero vectors are left as they
/// are; their count is returned alongside the map. A map that is already
/// normalized is returned unchanged.
pub fn normalize_features(mut map: DenseFeatureMap) -> (DenseFeatureMap, usize) {
    let mut zeros = 0;
    let channels = map.channels;
    for cell in map.data.chunks_exact_mut(channels) {
        let n = norm(cell);
        if n == 0.0 {
            zeros += 1;
        } else if !map.normalized {
            for x in cell.iter_mut() {
                *x = (*x as f64 / n) as f32;
            }
        }
    }
    map.normalized = true;
    (map, zeros)
}

/// Bilinearly interpolated feature at image pixel `(u, v)`, clamped at the
/// grid border. Re-normalized when the map is normalized.
pub fn sample_feature(map: &DenseFeatureMap, u: f64, v: f64) -> Result<Vec<f32>> {
    if !pixel_in_bounds(u, v, map.image_width, map.image_height) {
        return Err(Error::OutOfBounds {
            u,
            v,
            width: map.image_width,
            height: map.image_height,
        });
    }
    let (gx, gy) = map.pixel_to_grid(u, v);
    let gx = gx.clamp(0.0, (map.grid_width - 1) as f64);
    let gy = gy.clamp(0.0, (map.grid_height - 1) as f64);
    let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(map.grid_width - 1), (y0 + 1).min(map.grid_height - 1));
    let (wx, wy) = (gx - x0 as f64, gy - y0 as f64);

    let corners = [
        (y0, x0, (1.0 - wx) * (1.0 - wy)),
        (y0, x1, wx * (1.0 - wy)),
        (y1, x0, (1.0 - wx) * wy),
        (y1, x1, wx * wy),
    ];
    let mut out = vec![0.0f64; map.channels];
    for (r, c, w) in corners {
        if w == 0.0 {
            continue;
        }
        for (o, &x) in out.iter_mut().zip(map.cell(r, c)) {
            *o += w * x as f64;
        }
    }
    if map.normalized {
        let n = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            out.iter_mut().for_each(|x| *x /= n);
        }
    }
    Ok(out.into_iter().map(|x| x as f32).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeatureMatch {
    /// Image-pixel coordinates of the matched cell center.
    pub pixel: Point2<f64>,
    pub row: usize,
    pub col: usize,
    /// Cosine similarity between the query and the matched cell.
    pub score: f64,
}

/// Grid cell of `target` with the highest cosine similarity to `query`.
///
/// Only cells whose center lies in `mask` are considered. Zero cells never
/// match. Ties go to the smallest row-major index.
pub fn best_match(
    query: &[f32],
    target: &DenseFeatureMap,
    mask: Option<&PixelMask>,
) -> Result<FeatureMatch> {
    if !target.normalized {
        return Err(Error::InvalidData("target feature map must be normalized".into()));
    }
    if query.len() != target.channels {
        return Err(Error::DimensionMismatch(format!(
            "query has {} channels, target has {}",
            query.len(),
            target.channels
        )));
    }
    let qn = norm(query);
    if qn == 0.0 {
        return Err(Error::ZeroVector);
    }
    let cells = target.cells_in_mask(mask)?;
    best_match_in(query, qn, target, &cells)
}

pub(crate) fn best_match_in(
    query: &[f32],
    query_norm: f64,
    target: &DenseFeatureMap,
    cells: &[usize],
) -> Result<FeatureMatch> {
    let mut best: Option<(usize, f64)> = None;
    for &idx in cells {
        let cell = target.cell_at(idx);
        // zero padding cells rank at -inf
        if cell.iter().all(|&x| x == 0.0) {
            continue;
        }
        let s = dot(query, cell);
        if best.map_or(true, |(_, bs)| s > bs) {
            best = Some((idx, s));
        }
    }
    let (idx, s) = best.ok_or(Error::EmptyMask)?;
    let (row, col) = (idx / target.grid_width, idx % target.grid_width);
    Ok(FeatureMatch {
        pixel: target.cell_center(row, col),
        row,
        col,
        score: (s / query_norm).clamp(-1.0, 1.0),
    })
}

/// Cosine similarity of two equally sized nonzero vectors.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "vectors have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub kind: EmbeddingKind,
    pub values: Vec<f32>,
}

impl Embedding {
    pub fn new(kind: EmbeddingKind, values: Vec<f32>) -> Self {
        Self { kind, values }
    }

    pub fn image(values: Vec<f32>) -> Self {
        Self::new(EmbeddingKind::Image, values)
    }

    pub fn text(values: Vec<f32>) -> Self {
        Self::new(EmbeddingKind::Text, values)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidData("embedding has non-finite values".into()));
        }
        if self.values.iter().all(|&x| x == 0.0) {
            return Err(Error::ZeroVector);
        }
        Ok(())
    }

    pub fn cosine(&self, other: &Embedding) -> Result<f64> {
        cosine(&self.values, &other.values)
    }

    pub fn l2_distance(&self, other: &Embedding) -> Result<f64> {
        if self.values.len() != other.values.len() {
            return Err(Error::DimensionMismatch(format!(
                "embeddings have dims {} and {}",
                self.values.len(),
                other.values.len()
            )));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            .sqrt())
    }
}

/// Binary per-pixel mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub width: usize,
    pub height: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|r| (0..width).map(move |c| (c, r)))
            .map(|(c, r)| f(c, r))
            .collect();
        Self {
            width,
            height,
            bits,
        }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    /// Whether the pixel containing continuous coordinate `(u, v)` is set.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        if !pixel_in_bounds(u, v, self.width, self.height) {
            return false;
        }
        let (c, r) = containing_pixel(u, v);
        self.get(c, r)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }
}
