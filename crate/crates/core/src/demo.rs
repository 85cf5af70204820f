//! A self-consistent synthetic world on disk: an affordance memory whose
//! best demonstration, transferred and lifted, lands on a known handle of a
//! ray-cast box. Used by the `synth demo` command and by the tests.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use nalgebra::{Isometry3, Point2, Point3, Translation3, UnitQuaternion, UnitVector3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{normalize_features, DenseFeatureMap, Embedding, PixelMask};
use crate::formats::{save_depth, save_embedding, save_feature_map, save_mask, write_atomic};
use crate::geometry::{project_direction, CameraIntrinsics, DEFAULT_DIRECTION_DELTA};
use crate::lift::GraspCandidate;
use crate::memory::{save_memory, AffordanceEntry, AffordanceMemory, DemoSource, Demonstration, EntryMeta, MANIFEST_FILE};
use crate::scene::SceneBundle;
use crate::synth::{make_box_scene, make_coordinate_features, Affine2, BoxFace, BoxSceneSpec, CoordinateFeatureSpec, HandleSpec, PositionalCode, SyntheticScene};

const TASK_NAMES: [&str; 10] = [
    "open", "pull", "push", "lift", "pour", "press", "turn", "wipe", "hang", "cut",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoSpec {
    pub entries: usize,
    pub tasks: usize,
    /// Feature grid side length; the image is `grid * image_scale` pixels.
    pub grid: usize,
    pub channels: usize,
    pub image_scale: usize,
    pub embedding_dim: usize,
    /// Depth noise standard deviation (meters).
    pub noise: f64,
    pub seed: u64,
}

impl Default for DemoSpec {
    fn default() -> Self {
        Self {
            entries: 20,
            tasks: 4,
            grid: 32,
            channels: 32,
            image_scale: 2,
            embedding_dim: 16,
            noise: 0.0,
            seed: 0,
        }
    }
}

/// Ground truth of the generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoTruth {
    pub entry_id: String,
    pub task: String,
    pub contact_pixel: Point2<f64>,
    pub contact_point: Point3<f64>,
    pub direction: Vector3<f64>,
    pub direction_2d: nalgebra::Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoPaths {
    pub memory_dir: PathBuf,
    pub manifest: PathBuf,
    pub scene: PathBuf,
    pub instruction: PathBuf,
    pub object: PathBuf,
    pub grasps: PathBuf,
    pub truth: PathBuf,
}

impl DemoPaths {
    pub fn new(dir: &Path) -> Self {
        let memory_dir = dir.join("memory");
        Self {
            manifest: memory_dir.join(MANIFEST_FILE),
            memory_dir,
            scene: dir.join("scene").join("scene.json"),
            instruction: dir.join("query").join("instruction.emb"),
            object: dir.join("query").join("object.emb"),
            grasps: dir.join("query").join("grasps.json"),
            truth: dir.join("truth.json"),
        }
    }
}

const WAYPOINTS: usize = 8;
const STEP_PX: f64 = 3.0;

fn unit(v: Vec<f64>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn blend(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + w * y).collect()
}

pub fn task_name(i: usize) -> String {
    TASK_NAMES
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("task-{i}"))
}

fn shaded(scene: &SyntheticScene) -> GrayImage {
    let k = &scene.intrinsics;
    GrayImage::from_fn(k.width as u32, k.height as u32, |c, r| {
        let n = scene.normals[r as usize * k.width + c as usize];
        Luma([n.map_or(20, |n| (60.0 + 180.0 * n.z.abs()) as u8)])
    })
}

fn mask_image(mask: &PixelMask) -> GrayImage {
    GrayImage::from_fn(mask.width as u32, mask.height as u32, |c, r| {
        Luma([if mask.get(c as usize, r as usize) { 200 } else { 30 }])
    })
}

fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::InvalidData(format!("png encoding failed: {e}")))?;
    write_atomic(path, &bytes)
}

fn shift_mask(mask: &PixelMask, dx: i64, dy: i64) -> PixelMask {
    PixelMask::from_fn(mask.width, mask.height, |c, r| {
        let (sc, sr) = (c as i64 + dx, r as i64 + dy);
        sc >= 0
            && sr >= 0
            && (sc as usize) < mask.width
            && (sr as usize) < mask.height
            && mask.get(sc as usize, sr as usize)
    })
}

/// Target-image waypoints starting at the handle pixel and moving along the
/// projected handle normal, if all stay on the face and the shifted source
/// copies stay in the image.
fn handle_track(
    scene: &SyntheticScene,
    face_mask: &PixelMask,
    shift_px: (f64, f64),
) -> Option<(Vec<Point2<f64>>, nalgebra::Vector2<f64>)> {
    let k = &scene.intrinsics;
    let h = scene.pixels["handle"];
    let n = UnitVector3::new_normalize(scene.directions["handle_normal"]);
    let tau = project_direction(&scene.points["handle"], &n, k, DEFAULT_DIRECTION_DELTA).ok()?;
    let track: Vec<Point2<f64>> = (0..WAYPOINTS)
        .map(|i| h + tau.into_inner() * (i as f64 * STEP_PX))
        .collect();
    let ok = track.iter().all(|p| {
        let s = Point2::new(p.x - shift_px.0, p.y - shift_px.1);
        face_mask.contains(p.x, p.y) && k.contains(s.x, s.y)
    });
    ok.then(|| (track, tau.into_inner()))
}

/// Writes memory, scene, query embeddings, grasp candidates, and the truth
/// file under `dir`.
pub fn write_demo(spec: &DemoSpec, dir: &Path) -> Result<(DemoPaths, DemoTruth)> {
    if spec.entries == 0 || spec.tasks == 0 || spec.tasks > spec.embedding_dim || spec.entries < spec.tasks {
        return Err(Error::InvalidParameter(
            "need entries >= tasks >= 1 and embedding_dim >= tasks".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.grid * spec.image_scale;
    let f = 1.2 * size as f64;
    let c = (size as f64 - 1.0) / 2.0;
    let k = CameraIntrinsics::new(f, f, c, c, size, size)?;

    let yaw = rng.random_range(15.0..30.0_f64).to_radians() * if rng.random::<bool>() { 1.0 } else { -1.0 };
    let pitch = rng.random_range(-12.0..12.0_f64).to_radians();
    let rotation = UnitQuaternion::from_euler_angles(pitch, yaw, 0.0);
    let camera_from_box = Isometry3::from_parts(Translation3::new(0.0, 0.0, 1.3), rotation);
    let half_extents = Vector3::new(0.32, 0.26, 0.2);

    let cells = (rng.random_range(-4..=4_i64), rng.random_range(-4..=4_i64));
    let shift_px = (
        (cells.0 * spec.image_scale as i64) as f64,
        (cells.1 * spec.image_scale as i64) as f64,
    );

    let mut found = None;
    'search: for oy in [0.0, -0.08, 0.08, -0.14, 0.14] {
        for ox in [0.0, 0.08, -0.08, 0.16, -0.16, 0.22, -0.22] {
            let box_spec = BoxSceneSpec {
                half_extents,
                camera_from_box,
                handle: HandleSpec { face: BoxFace::NegZ, offset: [ox, oy] },
                noise: spec.noise,
                seed: spec.seed,
            };
            let Ok(scene) = make_box_scene(&box_spec, &k) else { continue };
            let Some(face) = scene.face_masks.get(BoxFace::NegZ.name()) else { continue };
            if let Some((track, tau)) = handle_track(&scene, face, shift_px) {
                found = Some((scene, track, tau));
                break 'search;
            }
        }
    }
    let (scene, track, tau) =
        found.ok_or_else(|| Error::InvalidParameter("no handle placement keeps the track on the face".into()))?;

    let paths = DemoPaths::new(dir);
    let scene_dir = paths.scene.parent().expect("scene has a parent").to_path_buf();
    let query_dir = paths.instruction.parent().expect("query has a parent").to_path_buf();
    for d in [&paths.memory_dir, &scene_dir, &query_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    // Target scene.
    let code_seed = rng.random::<u64>();
    let warp = Affine2::translation(cells.0 as f64, cells.1 as f64);
    let mut feature_spec = CoordinateFeatureSpec::new(spec.grid, spec.grid, spec.channels, warp, code_seed);
    feature_spec.image_scale = spec.image_scale;
    let (source_map, target_map) = make_coordinate_features(&feature_spec)?;
    let object_mask = scene.object_mask();

    let dim = spec.embedding_dim;
    let object = random_unit(&mut rng, dim);
    let target_image = blend(&object, &random_unit(&mut rng, dim), 0.3);

    save_gray(&shaded(&scene), &scene_dir.join("image.png"))?;
    save_depth(&scene.depth, scene_dir.join("depth.dpt"))?;
    write_atomic(
        &scene_dir.join("intrinsics.json"),
        serde_json::to_string_pretty(&k).expect("serializes").as_bytes(),
    )?;
    save_mask(&object_mask, scene_dir.join("mask.msk"))?;
    save_embedding(&Embedding::image(unit(target_image)), scene_dir.join("image.emb"))?;
    save_feature_map(&target_map, scene_dir.join("features.dfm"))?;
    let bundle = SceneBundle {
        image: "image.png".into(),
        depth: "depth.dpt".into(),
        intrinsics: "intrinsics.json".into(),
        mask: Some("mask.msk".into()),
        image_embedding: "image.emb".into(),
        feature_map: "features.dfm".into(),
    };
    write_atomic(
        &paths.scene,
        serde_json::to_string_pretty(&bundle).expect("serializes").as_bytes(),
    )?;

    // Query.
    let task_vec = |t: usize| -> Vec<f64> { (0..dim).map(|i| if i == t { 1.0 } else { 0.0 }).collect() };
    let nudge = task_vec((1 % spec.tasks.max(2)).min(dim - 1));
    let instruction = blend(&task_vec(0), &nudge, 0.05);
    save_embedding(&Embedding::text(unit(instruction)), &paths.instruction)?;
    save_embedding(&Embedding::text(unit(object.clone())), &paths.object)?;

    // Memory. Entry 0 is the true demonstration; the rest are distractors.
    let source_mask = shift_mask(&object_mask, cells.0 * spec.image_scale as i64, cells.1 * spec.image_scale as i64);
    let mut memory = AffordanceMemory::new(&paths.memory_dir);
    let noise = Normal::new(0.0, 0.35).expect("valid");
    for j in 0..spec.entries {
        let id = format!("demo-{j:04}");
        let task = j % spec.tasks;
        let asset_dir = PathBuf::from("assets").join(&id);
        fs::create_dir_all(paths.memory_dir.join(&asset_dir)).map_err(|e| Error::io(&asset_dir, e))?;

        let waypoints: Vec<Point2<f64>> = if j == 0 {
            track
                .iter()
                .map(|p| Point2::new(p.x - shift_px.0, p.y - shift_px.1))
                .collect()
        } else {
            let a = rng.random_range(0.0..2.0 * PI);
            let start = Point2::new(
                rng.random_range(0.35..0.65) * size as f64,
                rng.random_range(0.35..0.65) * size as f64,
            );
            let step = STEP_PX.min(0.3 * size as f64 / WAYPOINTS as f64);
            (0..WAYPOINTS)
                .map(|i| start + nalgebra::Vector2::new(a.cos(), a.sin()) * (i as f64 * step))
                .collect()
        };

        let map = if j == 0 {
            source_map.clone()
        } else if task == 0 && j % 2 == 0 {
            // Same appearance, corrupted features.
            let mut data = source_map.data().to_vec();
            for v in &mut data {
                *v += noise.sample(&mut rng) as f32 / (spec.channels as f32).sqrt();
            }
            normalize_features(DenseFeatureMap::new(
                spec.grid, spec.grid, spec.channels, size, size, false, data,
            )?)
            .0
        } else {
            let code = PositionalCode::new(spec.grid, spec.grid, spec.channels, rng.random::<u64>())?;
            let mut data = vec![0f32; spec.grid * spec.grid * spec.channels];
            for (i, cell) in data.chunks_mut(spec.channels).enumerate() {
                code.encode((i % spec.grid) as f64, (i / spec.grid) as f64, cell);
            }
            normalize_features(DenseFeatureMap::new(
                spec.grid, spec.grid, spec.channels, size, size, false, data,
            )?)
            .0
        };

        // A third of the same-task distractors show a different object.
        let other_object = task == 0 && j != 0 && j % 3 == 0;
        let image_vec = if other_object {
            random_unit(&mut rng, dim)
        } else {
            blend(&object, &random_unit(&mut rng, dim), 0.3)
        };

        let image_rel = asset_dir.join("image.png");
        let map_rel = asset_dir.join("features.dfm");
        let mask_rel = asset_dir.join("mask.msk");
        save_gray(&mask_image(&source_mask), &paths.memory_dir.join(&image_rel))?;
        save_feature_map(&map, paths.memory_dir.join(&map_rel))?;
        save_mask(&source_mask, paths.memory_dir.join(&mask_rel))?;

        let demo = Demonstration {
            source: DemoSource::Custom,
            waypoints,
            image_width: size,
            image_height: size,
        };
        let meta = EntryMeta {
            id,
            image_path: image_rel,
            task: task_name(task),
            object_name: if other_object { "other".into() } else { "box".into() },
            task_embedding: Embedding::text(unit(task_vec(task))),
            image_embedding: Embedding::image(unit(image_vec)),
            feature_map_path: map_rel,
            mask_path: Some(mask_rel),
        };
        memory.insert(AffordanceEntry::from_demonstration(demo, meta)?)?;
    }
    save_memory(&memory, &paths.manifest)?;

    // Grasp candidates: one just off the handle, the rest farther away.
    let handle = scene.points["handle"];
    let normal = scene.directions["handle_normal"];
    let mut grasps = vec![GraspCandidate {
        position: handle + normal * 0.01,
        quaternion: [1.0, 0.0, 0.0, 0.0],
        score: 0.5,
    }];
    for _ in 0..4 {
        let offset = Vector3::new(
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.1..0.1),
        );
        let q = UnitQuaternion::from_euler_angles(0.0, rng.random_range(-1.0..1.0), 0.0);
        grasps.push(GraspCandidate {
            position: handle + normal * 0.01 + offset.normalize() * 0.08 + offset,
            quaternion: [q.w, q.i, q.j, q.k],
            score: rng.random_range(0.0..1.0),
        });
    }
    write_atomic(
        &paths.grasps,
        serde_json::to_string_pretty(&grasps).expect("serializes").as_bytes(),
    )?;

    let truth = DemoTruth {
        entry_id: "demo-0000".into(),
        task: task_name(0),
        contact_pixel: track[0],
        contact_point: handle,
        direction: normal,
        direction_2d: tau,
    };
    write_atomic(
        &paths.truth,
        serde_json::to_string_pretty(&truth).expect("serializes").as_bytes(),
    )?;
    Ok((paths, truth))
}
