#![allow(dead_code)]

use std::path::{Path, PathBuf};

use afford_core::cli::run_with;
use afford_core::features::{normalize_features, DenseFeatureMap, Embedding, PixelMask};
use afford_core::geometry::{containing_pixel, project_direction, CameraIntrinsics};
use afford_core::lift::GraspCandidate;
use afford_core::memory::{AffordanceEntry, DemoSource};
use afford_core::synth::{make_box_scene, BoxFace, BoxSceneSpec, HandleSpec, SyntheticScene};
use afford_core::transfer::Affordance2D;
use nalgebra::{Isometry3, Point2, Point3, Translation3, UnitQuaternion, UnitVector3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0..1.0f32)).collect()
}

pub fn random_map(rng: &mut ChaCha8Rng, gh: usize, gw: usize, c: usize, scale: usize) -> DenseFeatureMap {
    let data = random_vec(rng, gh * gw * c);
    let map = DenseFeatureMap::new(gh, gw, c, gh * scale, gw * scale, false, data).unwrap();
    normalize_features(map).0
}

pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, density: f64) -> PixelMask {
    let bits = (0..w * h).map(|_| rng.random_bool(density)).collect();
    PixelMask::from_bits(w, h, bits).unwrap()
}

pub fn entry(id: &str, task: &str, task_emb: Vec<f32>, img_emb: Vec<f32>, w: usize, h: usize) -> AffordanceEntry {
    AffordanceEntry {
        id: id.into(),
        source: DemoSource::Custom,
        image_path: PathBuf::from(format!("assets/{id}/image.png")),
        image_size: [w, h],
        task: task.into(),
        object_name: "thing".into(),
        waypoints: vec![Point2::new(0.0, 0.0), Point2::new(1.0, 1.0)],
        offset: Vector2::zeros(),
        task_embedding: Embedding::text(task_emb),
        image_embedding: Embedding::image(img_emb),
        feature_map_path: PathBuf::from(format!("assets/{id}/features.dfm")),
        mask_path: None,
    }
}

// ---- exhaustive oracles ----

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn cell_selected(map: &DenseFeatureMap, mask: Option<&PixelMask>, row: usize, col: usize) -> bool {
    match mask {
        None => true,
        Some(m) => {
            let sx = map.image_width as f64 / map.grid_width as f64;
            let sy = map.image_height as f64 / map.grid_height as f64;
            let u = (col as f64 + 0.5) * sx - 0.5;
            let v = (row as f64 + 0.5) * sy - 0.5;
            let (c, r) = containing_pixel(u, v);
            m.get(c.min(m.width - 1), r.min(m.height - 1))
        }
    }
}

/// `(row, col, cosine)` of the best cell by full cosine, lowest index on ties.
pub fn oracle_best_match(query: &[f32], map: &DenseFeatureMap, mask: Option<&PixelMask>) -> Option<(usize, usize, f64)> {
    let qn = dot64(query, query).sqrt();
    if qn == 0.0 {
        return None;
    }
    let mut best: Option<(usize, usize, f64)> = None;
    for row in 0..map.grid_height {
        for col in 0..map.grid_width {
            if !cell_selected(map, mask, row, col) {
                continue;
            }
            let cell = map.cell(row, col);
            let cn = dot64(cell, cell).sqrt();
            if cn == 0.0 {
                continue;
            }
            let s = dot64(query, cell) / (qn * cn);
            if best.map_or(true, |(_, _, b)| s > b) {
                best = Some((row, col, s));
            }
        }
    }
    best
}

pub fn oracle_imd(src: &DenseFeatureMap, src_mask: Option<&PixelMask>, tgt: &DenseFeatureMap, tgt_mask: Option<&PixelMask>) -> f64 {
    let cells = |m: &DenseFeatureMap, mask: Option<&PixelMask>| -> Vec<Vec<f32>> {
        let mut out = Vec::new();
        for row in 0..m.grid_height {
            for col in 0..m.grid_width {
                if cell_selected(m, mask, row, col) {
                    out.push(m.cell(row, col).to_vec());
                }
            }
        }
        out
    };
    let s = cells(src, src_mask);
    let t = cells(tgt, tgt_mask);
    let mut total = 0.0;
    for a in &s {
        let nn = t
            .iter()
            .map(|b| a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min);
        total += nn;
    }
    total / s.len() as f64
}

pub fn oracle_select_grasp(candidates: &[GraspCandidate], contact: &Point3<f64>) -> usize {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let da = (candidates[a].position - contact).norm();
        let db = (candidates[b].position - contact).norm();
        da.total_cmp(&db)
            .then(candidates[b].score.total_cmp(&candidates[a].score))
            .then(a.cmp(&b))
    });
    order[0]
}

pub fn oracle_crop(points: &[Point3<f64>], center: &Point3<f64>, radius: f64) -> Vec<Point3<f64>> {
    points
        .iter()
        .filter(|p| {
            let d = *p - center;
            (d.x * d.x + d.y * d.y + d.z * d.z).sqrt() <= radius
        })
        .copied()
        .collect()
}

pub fn angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos().to_degrees()
}

// ---- scene fixtures ----

pub fn camera() -> CameraIntrinsics {
    CameraIntrinsics::new(150.0, 150.0, 79.5, 59.5, 160, 120).unwrap()
}

/// A box whose camera-facing front carries a handle, posed from `seed`.
/// Poses whose handle is not visible on its face are redrawn from the same
/// generator.
pub fn drawer_front(seed: u64, noise: f64) -> SyntheticScene {
    let mut r = rng(0x5eed_0000 + seed);
    let k = camera();
    loop {
        let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let yaw = sign * r.random_range(10.0..35.0f64).to_radians();
        let pitch = r.random_range(-15.0..15.0f64).to_radians();
        let t = Translation3::new(
            r.random_range(-0.05..0.05),
            r.random_range(-0.05..0.05),
            r.random_range(0.95..1.2),
        );
        let spec = BoxSceneSpec {
            half_extents: Vector3::new(0.3, 0.25, 0.2),
            camera_from_box: Isometry3::from_parts(t, UnitQuaternion::from_euler_angles(pitch, yaw, 0.0)),
            handle: HandleSpec {
                face: BoxFace::NegZ,
                offset: [r.random_range(-0.15..0.15), r.random_range(-0.1..0.1)],
            },
            noise,
            seed,
        };
        if let Ok(scene) = make_box_scene(&spec, &k) {
            return scene;
        }
    }
}

/// The 2D affordance a perfect transfer would produce for the scene's handle:
/// contact at the handle pixel, direction along the projected outward normal.
pub fn handle_affordance(scene: &SyntheticScene) -> Affordance2D {
    let contact = scene.pixels["handle"];
    let n = UnitVector3::new_normalize(scene.directions["handle_normal"]);
    let dir = project_direction(&scene.points["handle"], &n, &scene.intrinsics, 0.05).unwrap();
    Affordance2D {
        contact,
        direction: dir.into_inner(),
        waypoints: vec![contact, contact + dir.into_inner() * 10.0],
        scores: vec![1.0, 1.0],
        inliers: vec![true, true],
        confidence: 1.0,
    }
}

/// A box viewed across one vertical edge so two faces fill the crop around
/// the returned edge point.
pub fn corner(seed: u64) -> (SyntheticScene, Point3<f64>, [Vector3<f64>; 2]) {
    let mut r = rng(0xc0_0000 + seed);
    let k = camera();
    let h = Vector3::new(0.25, 0.25, 0.25);
    let yaw = (45.0 + r.random_range(-8.0..8.0f64)).to_radians();
    let pitch = r.random_range(-10.0..10.0f64).to_radians();
    let rot = UnitQuaternion::from_euler_angles(pitch, yaw, 0.0);
    let edge_b = Point3::new(h.x, r.random_range(-0.1..0.1), -h.z);
    // place the box so the edge point sits near the optical axis at ~1 m
    let target = Point3::new(r.random_range(-0.03..0.03), r.random_range(-0.03..0.03), 1.0);
    let t = target.coords - rot * edge_b.coords;
    let pose = Isometry3::from_parts(Translation3::from(t), rot);
    let spec = BoxSceneSpec {
        half_extents: h,
        camera_from_box: pose,
        handle: HandleSpec { face: BoxFace::NegZ, offset: [0.1, 0.0] },
        noise: 0.0,
        seed,
    };
    let scene = make_box_scene(&spec, &k).unwrap();
    let normals = [rot * Vector3::new(1.0, 0.0, 0.0), rot * Vector3::new(0.0, 0.0, -1.0)];
    (scene, pose * edge_b, normals)
}

// ---- CLI ----

pub fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run_with(std::iter::once("afford").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
