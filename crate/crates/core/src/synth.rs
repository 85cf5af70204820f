//! Deterministic synthetic scenes and feature maps with analytic ground
//! truth.
//!
//! Planes use Hessian normal form `n . p + d = 0` with the unit normal facing
//! the camera, so a visible plane has `d > 0` equal to its distance from the
//! camera center.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Isometry3, Matrix2, Point2, Point3, UnitVector3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{normalize_features, DenseFeatureMap, PixelMask};
use crate::geometry::{containing_pixel, project, unproject, CameraIntrinsics, DepthImage};

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub intrinsics: CameraIntrinsics,
    pub depth: DepthImage,
    /// Analytic surface normal per pixel (camera frame, facing the camera);
    /// `None` where no surface is hit.
    pub normals: Vec<Option<Vector3<f64>>>,
    pub face_masks: BTreeMap<String, PixelMask>,
    pub points: BTreeMap<String, Point3<f64>>,
    pub directions: BTreeMap<String, Vector3<f64>>,
    pub pixels: BTreeMap<String, Point2<f64>>,
}

impl SyntheticScene {
    fn empty(k: &CameraIntrinsics) -> Self {
        Self {
            intrinsics: *k,
            depth: DepthImage::filled(k.width, k.height, 0.0),
            normals: vec![None; k.width * k.height],
            face_masks: BTreeMap::new(),
            points: BTreeMap::new(),
            directions: BTreeMap::new(),
            pixels: BTreeMap::new(),
        }
    }

    /// Mask of every pixel that hit a surface.
    pub fn object_mask(&self) -> PixelMask {
        PixelMask::from_fn(self.depth.width, self.depth.height, |c, r| {
            self.normals[r * self.depth.width + c].is_some()
        })
    }

    fn add_noise(&mut self, sigma: f64, seed: u64) -> Result<()> {
        if sigma == 0.0 {
            return Ok(());
        }
        let dist = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(format!("noise: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (d, n) in self.depth.values.iter_mut().zip(&self.normals) {
            if n.is_some() {
                *d = (*d as f64 + dist.sample(&mut rng)).max(f64::MIN_POSITIVE) as f32;
            }
        }
        Ok(())
    }
}

/// Viewing ray through pixel `(u, v)` with unit z component.
pub fn pixel_ray(u: f64, v: f64, k: &CameraIntrinsics) -> Vector3<f64> {
    Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0)
}

/// Camera-facing plane `normal . p + distance = 0` filling the whole image,
/// with optional Gaussian depth noise.
pub fn make_plane_scene(
    normal: &UnitVector3<f64>,
    distance: f64,
    k: &CameraIntrinsics,
    noise: f64,
    seed: u64,
) -> Result<SyntheticScene> {
    k.validate()?;
    if !(distance > 0.0) || !(noise >= 0.0) {
        return Err(Error::PlaneNotVisible);
    }
    let mut scene = SyntheticScene::empty(k);
    for row in 0..k.height {
        for col in 0..k.width {
            let ray = pixel_ray(col as f64, row as f64, k);
            let facing = normal.dot(&ray);
            if !(facing < 0.0) {
                return Err(Error::PlaneNotVisible);
            }
            let i = row * k.width + col;
            scene.depth.values[i] = (-distance / facing) as f32;
            scene.normals[i] = Some(normal.into_inner());
        }
    }
    scene
        .face_masks
        .insert("plane".into(), PixelMask::full(k.width, k.height));
    scene.directions.insert("normal".into(), normal.into_inner());
    scene.add_noise(noise, seed)?;
    Ok(scene)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoxFace {
    #[serde(rename = "+x")]
    PosX,
    #[serde(rename = "-x")]
    NegX,
    #[serde(rename = "+y")]
    PosY,
    #[serde(rename = "-y")]
    NegY,
    #[serde(rename = "+z")]
    PosZ,
    #[serde(rename = "-z")]
    NegZ,
}

impl BoxFace {
    pub const ALL: [BoxFace; 6] = [
        BoxFace::PosX,
        BoxFace::NegX,
        BoxFace::PosY,
        BoxFace::NegY,
        BoxFace::PosZ,
        BoxFace::NegZ,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BoxFace::PosX => "+x",
            BoxFace::NegX => "-x",
            BoxFace::PosY => "+y",
            BoxFace::NegY => "-y",
            BoxFace::PosZ => "+z",
            BoxFace::NegZ => "-z",
        }
    }

    fn axis(&self) -> usize {
        match self {
            BoxFace::PosX | BoxFace::NegX => 0,
            BoxFace::PosY | BoxFace::NegY => 1,
            BoxFace::PosZ | BoxFace::NegZ => 2,
        }
    }

    fn sign(&self) -> f64 {
        match self {
            BoxFace::PosX | BoxFace::PosY | BoxFace::PosZ => 1.0,
            _ => -1.0,
        }
    }

    /// Outward normal in the box frame.
    pub fn normal(&self) -> Vector3<f64> {
        let mut n = Vector3::zeros();
        n[self.axis()] = self.sign();
        n
    }

    fn from_axis(axis: usize, sign: f64) -> Self {
        match (axis, sign > 0.0) {
            (0, true) => BoxFace::PosX,
            (0, false) => BoxFace::NegX,
            (1, true) => BoxFace::PosY,
            (1, false) => BoxFace::NegY,
            (2, true) => BoxFace::PosZ,
            _ => BoxFace::NegZ,
        }
    }

    /// The two in-face axes, in increasing order.
    fn tangent_axes(&self) -> (usize, usize) {
        match self.axis() {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        }
    }
}

/// Handle location on a box face: `offset` is measured from the face center
/// along the face's two in-plane box axes (in increasing axis order).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandleSpec {
    pub face: BoxFace,
    pub offset: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSceneSpec {
    pub half_extents: Vector3<f64>,
    pub camera_from_box: Isometry3<f64>,
    pub handle: HandleSpec,
    pub noise: f64,
    pub seed: u64,
}

/// Ray-cast box with per-face masks and normals. The handle point is snapped
/// to the pixel center nearest its nominal projection and re-intersected with
/// its face, so `pixels["handle"]` back-projects exactly onto
/// `points["handle"]` at zero noise.
pub fn make_box_scene(spec: &BoxSceneSpec, k: &CameraIntrinsics) -> Result<SyntheticScene> {
    k.validate()?;
    if spec.half_extents.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "box half extents must be positive, got {:?}",
            spec.half_extents
        )));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::InvalidParameter("noise must be non-negative".into()));
    }
    let box_from_camera = spec.camera_from_box.inverse();
    let origin_b = box_from_camera.translation.vector;
    let rot = spec.camera_from_box.rotation;
    let h = spec.half_extents;

    let mut scene = SyntheticScene::empty(k);
    let mut hit_faces: Vec<Option<BoxFace>> = vec![None; k.width * k.height];
    for row in 0..k.height {
        for col in 0..k.width {
            let ray_b = box_from_camera.rotation * pixel_ray(col as f64, row as f64, k);
            let Some((t, face)) = slab_hit(&origin_b, &ray_b, &h) else {
                continue;
            };
            let i = row * k.width + col;
            scene.depth.values[i] = t as f32;
            scene.normals[i] = Some(rot * face.normal());
            hit_faces[i] = Some(face);
        }
    }
    for face in BoxFace::ALL {
        let mask = PixelMask::from_fn(k.width, k.height, |c, r| hit_faces[r * k.width + c] == Some(face));
        if !mask.is_empty() {
            scene.face_masks.insert(face.name().into(), mask);
        }
    }

    let face = spec.handle.face;
    let (a0, a1) = face.tangent_axes();
    let [o0, o1] = spec.handle.offset;
    if o0.abs() > h[a0] || o1.abs() > h[a1] {
        return Err(Error::InvalidParameter("handle offset lies outside its face".into()));
    }
    let mut nominal_b = face.normal() * h[face.axis()];
    nominal_b[a0] = o0;
    nominal_b[a1] = o1;
    let nominal_c = spec.camera_from_box * Point3::from(nominal_b);
    let px = project(&nominal_c, k)?;
    if !k.contains(px.x, px.y) {
        return Err(Error::InvalidParameter("handle projects outside the image".into()));
    }
    let (col, row) = containing_pixel(px.x, px.y);
    if hit_faces[row * k.width + col] != Some(face) {
        return Err(Error::InvalidParameter(format!(
            "handle pixel ({col}, {row}) does not see face {}",
            face.name()
        )));
    }
    let n_c = rot * face.normal();
    let ray = pixel_ray(col as f64, row as f64, k);
    let face_point = spec.camera_from_box * Point3::from(face.normal() * h[face.axis()]);
    let t = n_c.dot(&face_point.coords) / n_c.dot(&ray);
    scene
        .points
        .insert("handle".into(), unproject(col as f64, row as f64, t, k));
    scene.directions.insert("handle_normal".into(), n_c);
    scene
        .pixels
        .insert("handle".into(), Point2::new(col as f64, row as f64));
    for f in BoxFace::ALL {
        scene
            .directions
            .insert(format!("normal{}", f.name()), rot * f.normal());
    }

    scene.add_noise(spec.noise, spec.seed)?;
    Ok(scene)
}

/// Nearest positive entry of a ray into an axis-aligned box centered at the
/// origin, with the face it enters through.
fn slab_hit(origin: &Vector3<f64>, dir: &Vector3<f64>, half: &Vector3<f64>) -> Option<(f64, BoxFace)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut face = None;
    for axis in 0..3 {
        if dir[axis] == 0.0 {
            if origin[axis].abs() > half[axis] {
                return None;
            }
            continue;
        }
        let t1 = (-half[axis] - origin[axis]) / dir[axis];
        let t2 = (half[axis] - origin[axis]) / dir[axis];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if lo > t_near {
            t_near = lo;
            face = Some(BoxFace::from_axis(axis, -dir[axis].signum()));
        }
        t_far = t_far.min(hi);
    }
    (t_near <= t_far && t_near > 0.0).then_some(()).and(face.map(|f| (t_near, f)))
}

/// 2D affine map `x -> matrix * x + translation` over grid coordinates
/// `(x = col, y = row)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2 {
    pub matrix: Matrix2<f64>,
    pub translation: Vector2<f64>,
}

impl Affine2 {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix2::identity(),
            translation: Vector2::zeros(),
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            matrix: Matrix2::identity(),
            translation: Vector2::new(dx, dy),
        }
    }

    /// Rotation by `angle` and uniform `scale` about `center`, then a shift.
    pub fn similarity(angle: f64, scale: f64, center: Point2<f64>, shift: Vector2<f64>) -> Self {
        let (s, c) = angle.sin_cos();
        let m = Matrix2::new(c, -s, s, c) * scale;
        Self {
            matrix: m,
            translation: center.coords - m * center.coords + shift,
        }
    }

    pub fn apply(&self, p: &Point2<f64>) -> Point2<f64> {
        Point2::from(self.matrix * p.coords + self.translation)
    }

    pub fn inverse(&self) -> Result<Self> {
        if self.matrix.determinant().abs() < 1e-12 {
            return Err(Error::NonInvertibleWarp);
        }
        let inv = self.matrix.try_inverse().ok_or(Error::NonInvertibleWarp)?;
        Ok(Self {
            matrix: inv,
            translation: -(inv * self.translation),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordinateFeatureSpec {
    pub grid_height: usize,
    pub grid_width: usize,
    pub channels: usize,
    /// Image pixels per grid cell along each axis.
    pub image_scale: usize,
    /// Maps source grid coordinates to target grid coordinates.
    pub warp: Affine2,
    pub seed: u64,
}

impl CoordinateFeatureSpec {
    pub fn new(grid_height: usize, grid_width: usize, channels: usize, warp: Affine2, seed: u64) -> Self {
        Self {
            grid_height,
            grid_width,
            channels,
            image_scale: 1,
            warp,
            seed,
        }
    }
}

/// Sinusoidal positional code. Cosine similarity between two codes depends
/// only on the displacement between their positions and peaks uniquely at
/// zero displacement for displacements up to twice the grid extent.
pub struct PositionalCode {
    freqs: Vec<f64>,
    phases: Vec<[f64; 2]>,
    channels: usize,
}

impl PositionalCode {
    pub fn new(grid_height: usize, grid_width: usize, channels: usize, seed: u64) -> Result<Self> {
        if channels < 4 {
            return Err(Error::InvalidParameter(format!("need at least 4 channels, got {channels}")));
        }
        let pairs = channels / 4;
        let extent = grid_height.max(grid_width).max(1) as f64;
        let (lo, hi) = (PI / (2.0 * extent), PI / 2.0);
        let freqs: Vec<f64> = (0..pairs)
            .map(|i| {
                if pairs == 1 {
                    lo
                } else {
                    lo * (hi / lo).powf(i as f64 / (pairs - 1) as f64)
                }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases = (0..pairs)
            .map(|_| [rng.random::<f64>() * 2.0 * PI, rng.random::<f64>() * 2.0 * PI])
            .collect();
        Ok(Self {
            freqs,
            phases,
            channels,
        })
    }

    pub fn encode(&self, x: f64, y: f64, out: &mut [f32]) {
        let scale = 1.0 / ((2 * self.freqs.len()) as f64).sqrt();
        out.fill(0.0);
        for (i, (w, [px, py])) in self.freqs.iter().zip(&self.phases).enumerate() {
            let (sx, cx) = (w * x + px).sin_cos();
            let (sy, cy) = (w * y + py).sin_cos();
            out[4 * i] = (cx * scale) as f32;
            out[4 * i + 1] = (sx * scale) as f32;
            out[4 * i + 2] = (cy * scale) as f32;
            out[4 * i + 3] = (sy * scale) as f32;
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// Source map encoding each cell's own position and a target map whose cell
/// `q` holds the source code of `warp^-1(q)`. Both maps are normalized.
pub fn make_coordinate_features(spec: &CoordinateFeatureSpec) -> Result<(DenseFeatureMap, DenseFeatureMap)> {
    let CoordinateFeatureSpec {
        grid_height: gh,
        grid_width: gw,
        channels: c,
        image_scale,
        warp,
        seed,
    } = *spec;
    if gh == 0 || gw == 0 || image_scale == 0 {
        return Err(Error::InvalidParameter("grid and scale must be nonzero".into()));
    }
    let inverse = warp.inverse()?;
    let code = PositionalCode::new(gh, gw, c, seed)?;
    let mut src = vec![0f32; gh * gw * c];
    let mut tgt = vec![0f32; gh * gw * c];
    for row in 0..gh {
        for col in 0..gw {
            let i = (row * gw + col) * c;
            code.encode(col as f64, row as f64, &mut src[i..i + c]);
            let back = inverse.apply(&Point2::new(col as f64, row as f64));
            code.encode(back.x, back.y, &mut tgt[i..i + c]);
        }
    }
    let (ih, iw) = (gh * image_scale, gw * image_scale);
    let source = normalize_features(DenseFeatureMap::new(gh, gw, c, ih, iw, false, src)?).0;
    let target = normalize_features(DenseFeatureMap::new(gh, gw, c, ih, iw, false, tgt)?).0;
    Ok((source, target))
}
