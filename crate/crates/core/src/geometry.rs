//! Pinhole camera model, depth back-projection, and local surface normals.
//!
//! Pixel convention: integer coordinates address pixel centers, `(0, 0)` is
//! the top-left pixel, `u` grows rightward and `v` downward. A continuous
//! coordinate `(u, v)` is inside the image when it falls on some pixel, i.e.
//! `-0.5 <= u < width - 0.5` (likewise for `v`).

use nalgebra::{Matrix3, Point2, Point3, SymmetricEigen, UnitVector2, UnitVector3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::PixelMask;

/// Default half-size of the hole-filling search window, in pixels.
pub const DEFAULT_HOLE_RADIUS: usize = 5;
/// Default 3D step used to project directions into the image, in meters.
pub const DEFAULT_DIRECTION_DELTA: f64 = 0.05;
/// Default neighborhood size for normal estimation.
pub const DEFAULT_NORMAL_NEIGHBORS: usize = 30;

const MIN_IMAGE_DISPLACEMENT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics("image size must be nonzero".into()));
        }
        let cx_ok = self.cx >= 0.0 && self.cx < self.width as f64;
        let cy_ok = self.cy >= 0.0 && self.cy < self.height as f64;
        if !(cx_ok && cy_ok) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        pixel_in_bounds(u, v, self.width, self.height)
    }
}

/// Whether continuous pixel coordinate `(u, v)` lies on a pixel of a
/// `width` x `height` image.
pub fn pixel_in_bounds(u: f64, v: f64, width: usize, height: usize) -> bool {
    u.is_finite()
        && v.is_finite()
        && u >= -0.5
        && v >= -0.5
        && u < width as f64 - 0.5
        && v < height as f64 - 0.5
}

/// Integer pixel `(col, row)` containing continuous coordinate `(u, v)`.
/// Caller guarantees the coordinate is in bounds.
pub fn containing_pixel(u: f64, v: f64) -> (usize, usize) {
    ((u + 0.5).floor() as usize, (v + 0.5).floor() as usize)
}

/// Per-pixel metric depth, row-major. Non-finite or non-positive values mark
/// holes.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "depth has {} values for a {}x{} image",
                values.len(),
                width,
                height
            )));
        }
        if values.iter().any(|d| d.is_finite() && *d < 0.0) {
            return Err(Error::InvalidData("negative finite depth".into()));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, depth: f32) -> Self {
        Self {
            width,
            height,
            values: vec![depth; width * height],
        }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.values[row * self.width + col]
    }

    /// Depth at `(col, row)` if that pixel is valid.
    #[inline]
    pub fn valid(&self, col: usize, row: usize) -> Option<f64> {
        let d = self.get(col, row);
        (d.is_finite() && d > 0.0).then_some(d as f64)
    }

    pub fn check_matches(&self, k: &CameraIntrinsics) -> Result<()> {
        if self.width != k.width || self.height != k.height {
            return Err(Error::DimensionMismatch(format!(
                "depth is {}x{} but intrinsics describe {}x{}",
                self.width, self.height, k.width, k.height
            )));
        }
        Ok(())
    }
}

/// Result of back-projecting a pixel, including which pixel supplied the depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BackProjection {
    pub point: Point3<f64>,
    /// `(col, row)` of the pixel whose depth was used.
    pub depth_pixel: (usize, usize),
    /// True when the requested pixel was a hole and a neighbor was used.
    pub substituted: bool,
}

/// Lifts `(u, v)` to a camera-frame 3D point.
///
/// The depth comes from the pixel containing `(u, v)` if it is valid,
/// otherwise from the nearest valid pixel within a `(2r+1)^2` window (ties in
/// row-major order). When a neighbor substitutes, the neighbor's own pixel
/// center is back-projected so the result lies on the observed surface.
pub fn back_project(
    u: f64,
    v: f64,
    depth: &DepthImage,
    k: &CameraIntrinsics,
    window_radius: usize,
) -> Result<BackProjection> {
    if !pixel_in_bounds(u, v, depth.width, depth.height) {
        return Err(Error::OutOfBounds {
            u,
            v,
            width: depth.width,
            height: depth.height,
        });
    }
    let (col, row) = containing_pixel(u, v);
    if let Some(z) = depth.valid(col, row) {
        return Ok(BackProjection {
            point: unproject(u, v, z, k),
            depth_pixel: (col, row),
            substituted: false,
        });
    }

    let r = window_radius as isize;
    let mut best: Option<(isize, usize, usize, f64)> = None;
    for dr in -r..=r {
        let rr = row as isize + dr;
        if rr < 0 || rr >= depth.height as isize {
            continue;
        }
        for dc in -r..=r {
            let cc = col as isize + dc;
            if cc < 0 || cc >= depth.width as isize {
                continue;
            }
            if let Some(z) = depth.valid(cc as usize, rr as usize) {
                let d2 = dr * dr + dc * dc;
                // row-major scan: only a strictly closer pixel replaces the incumbent
                if best.map_or(true, |(bd, ..)| d2 < bd) {
                    best = Some((d2, cc as usize, rr as usize, z));
                }
            }
        }
    }
    let (_, bc, br, z) = best.ok_or(Error::NoValidDepth { u, v })?;
    Ok(BackProjection {
        point: unproject(bc as f64, br as f64, z, k),
        depth_pixel: (bc, br),
        substituted: true,
    })
}

#[inline]
pub fn unproject(u: f64, v: f64, z: f64, k: &CameraIntrinsics) -> Point3<f64> {
    Point3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z)
}

/// Projects a camera-frame point to pixel coordinates. The result may fall
/// outside the image.
pub fn project(p: &Point3<f64>, k: &CameraIntrinsics) -> Result<Point2<f64>> {
    if !(p.z > 0.0) {
        return Err(Error::BehindCamera { z: p.z });
    }
    Ok(Point2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// Image-plane direction of a 3D motion `dir` starting at `origin`.
pub fn project_direction(
    origin: &Point3<f64>,
    dir: &UnitVector3<f64>,
    k: &CameraIntrinsics,
    delta: f64,
) -> Result<UnitVector2<f64>> {
    let a = project(origin, k)?;
    let b = project(&(origin + dir.into_inner() * delta), k)?;
    let d: Vector2<f64> = b - a;
    if d.norm() < MIN_IMAGE_DISPLACEMENT {
        return Err(Error::DegenerateProjection);
    }
    Ok(UnitVector2::new_normalize(d))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    /// Row-major source pixel index per point, when the cloud came from depth.
    pub pixels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Point3<f64>>) -> Self {
        Self {
            points,
            pixels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One point per valid depth pixel (restricted to `mask` when given).
pub fn depth_to_cloud(
    depth: &DepthImage,
    k: &CameraIntrinsics,
    mask: Option<&PixelMask>,
) -> Result<PointCloud> {
    depth.check_matches(k)?;
    if let Some(m) = mask {
        if m.width != depth.width || m.height != depth.height {
            return Err(Error::DimensionMismatch(format!(
                "mask is {}x{} but depth is {}x{}",
                m.width, m.height, depth.width, depth.height
            )));
        }
    }
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for row in 0..depth.height {
        for col in 0..depth.width {
            if mask.is_some_and(|m| !m.get(col, row)) {
                continue;
            }
            if let Some(z) = depth.valid(col, row) {
                points.push(unproject(col as f64, row as f64, z, k));
                pixels.push(row * depth.width + col);
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(PointCloud {
        points,
        pixels: Some(pixels),
    })
}

/// Points within `radius` of `center`, order preserved.
pub fn crop_cloud(cloud: &PointCloud, center: &Point3<f64>, radius: f64) -> Result<PointCloud> {
    if !(radius > 0.0) {
        return Err(Error::InvalidParameter(format!("crop radius {radius} must be positive")));
    }
    let keep: Vec<usize> = cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| (*p - center).norm() <= radius)
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyCrop);
    }
    Ok(PointCloud {
        points: keep.iter().map(|&i| cloud.points[i]).collect(),
        pixels: cloud
            .pixels
            .as_ref()
            .map(|px| keep.iter().map(|&i| px[i]).collect()),
    })
}

/// PCA normals over each point and its `k` nearest neighbors, oriented to
/// face `view_origin`.
///
/// Neighbors are found by exhaustive search; equal distances resolve to the
/// lower index.
pub fn estimate_normals(
    cloud: &PointCloud,
    k: usize,
    view_origin: &Point3<f64>,
) -> Result<Vec<UnitVector3<f64>>> {
    if k < 3 {
        return Err(Error::InvalidParameter(format!("k = {k} must be at least 3")));
    }
    let n = cloud.len();
    if n < k + 1 {
        return Err(Error::InsufficientNeighbors {
            points: n,
            required: k + 1,
        });
    }

    let pts = &cloud.points;
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for (i, p) in pts.iter().enumerate() {
        dists.clear();
        dists.extend(
            pts.iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(j, q)| ((q - p).norm_squared(), j)),
        );
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        dists.select_nth_unstable_by(k - 1, by_dist);

        let neighborhood = std::iter::once(*p).chain(dists[..k].iter().map(|&(_, j)| pts[j]));
        let normal = plane_normal(neighborhood, k + 1).ok_or(Error::DegenerateNeighborhood { index: i })?;
        let oriented = if normal.dot(&(view_origin - p)) < 0.0 {
            -normal
        } else {
            normal
        };
        normals.push(UnitVector3::new_unchecked(oriented));
    }
    Ok(normals)
}

/// Eigenvector of the smallest covariance eigenvalue, or `None` when the
/// points span fewer than two dimensions.
fn plane_normal(points: impl Iterator<Item = Point3<f64>> + Clone, count: usize) -> Option<Vector3<f64>> {
    let mean = points
        .clone()
        .fold(Vector3::zeros(), |acc, p| acc + p.coords)
        / count as f64;
    let cov = points.fold(Matrix3::zeros(), |acc, p| {
        let d = p.coords - mean;
        acc + d * d.transpose()
    }) / count as f64;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (smallest, middle, largest) = (order[0], order[1], order[2]);
    let lmax = eig.eigenvalues[largest];
    if !(lmax > 0.0) || eig.eigenvalues[middle] <= 1e-12 * lmax {
        return None;
    }
    Some(eig.eigenvectors.column(smallest).normalize())
}
