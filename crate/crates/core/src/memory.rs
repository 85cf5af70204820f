//! Affordance memory: demonstrations with 2D waypoints, their embeddings, and
//! references to dense features, plus the ingestion procedures that turn
//! robot rollouts, hand-object videos, and manual clicks into waypoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Isometry3, Point2, Point3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Embedding, PixelMask};
use crate::formats::{load_feature_map_header, write_atomic};
use crate::geometry::{pixel_in_bounds, project, CameraIntrinsics};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "memory.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemoSource {
    Robotic,
    Hoi,
    Custom,
}

impl DemoSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            DemoSource::Robotic => "robotic",
            DemoSource::Hoi => "hoi",
            DemoSource::Custom => "custom",
        }
    }
}

/// Waypoints extracted from one demonstration, before it is attached to
/// embeddings and assets.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub source: DemoSource,
    pub waypoints: Vec<Point2<f64>>,
    pub image_width: usize,
    pub image_height: usize,
}

/// Everything an entry needs besides its waypoints.
#[derive(Debug, Clone)]
pub struct EntryMeta {
    pub id: String,
    pub image_path: PathBuf,
    pub task: String,
    pub object_name: String,
    pub task_embedding: Embedding,
    pub image_embedding: Embedding,
    pub feature_map_path: PathBuf,
    pub mask_path: Option<PathBuf>,
}

fn is_zero_offset(o: &Vector2<f64>) -> bool {
    *o == Vector2::zeros()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffordanceEntry {
    pub id: String,
    pub source: DemoSource,
    /// First frame of the demonstration, relative to the manifest directory.
    pub image_path: PathBuf,
    /// `[width, height]` of the demonstration image in pixels.
    pub image_size: [usize; 2],
    pub task: String,
    pub object_name: String,
    /// Recorded waypoints; the first one is the contact point.
    pub waypoints: Vec<Point2<f64>>,
    /// Manual pixel correction added to every waypoint when read.
    #[serde(default = "Vector2::zeros", skip_serializing_if = "is_zero_offset")]
    pub offset: Vector2<f64>,
    pub task_embedding: Embedding,
    pub image_embedding: Embedding,
    pub feature_map_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

impl AffordanceEntry {
    pub fn from_demonstration(demo: Demonstration, meta: EntryMeta) -> Result<Self> {
        let entry = Self {
            id: meta.id,
            source: demo.source,
            image_path: meta.image_path,
            image_size: [demo.image_width, demo.image_height],
            task: meta.task,
            object_name: meta.object_name,
            waypoints: demo.waypoints,
            offset: Vector2::zeros(),
            task_embedding: meta.task_embedding,
            image_embedding: meta.image_embedding,
            feature_map_path: meta.feature_map_path,
            mask_path: meta.mask_path,
        };
        entry.validate()?;
        Ok(entry)
    }

    /// Waypoints with the manual offset applied.
    pub fn waypoints(&self) -> Vec<Point2<f64>> {
        self.waypoints.iter().map(|p| p + self.offset).collect()
    }

    pub fn contact(&self) -> Point2<f64> {
        self.waypoints[0] + self.offset
    }

    /// Checks the invariants that do not need the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidData("entry id is empty".into()));
        }
        if self.waypoints.len() < 2 {
            return Err(Error::DegenerateTrajectory(format!(
                "entry {} has {} waypoints, need at least 2",
                self.id,
                self.waypoints.len()
            )));
        }
        let [w, h] = self.image_size;
        for p in self.waypoints() {
            if !pixel_in_bounds(p.x, p.y, w, h) {
                return Err(Error::OutOfBounds {
                    u: p.x,
                    v: p.y,
                    width: w,
                    height: h,
                });
            }
        }
        self.task_embedding.validate()?;
        self.image_embedding.validate()?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    entries: Vec<AffordanceEntry>,
}

/// Demonstrations indexed by task. Asset paths resolve against `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffordanceMemory {
    root: PathBuf,
    entries: Vec<AffordanceEntry>,
    task_index: BTreeMap<String, Vec<String>>,
}

impl AffordanceMemory {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            entries: Vec::new(),
            task_index: BTreeMap::new(),
        }
    }

    pub fn from_entries(root: impl Into<PathBuf>, entries: Vec<AffordanceEntry>) -> Result<Self> {
        let mut m = Self::new(root);
        for e in entries {
            m.insert(e)?;
        }
        Ok(m)
    }

    pub fn insert(&mut self, entry: AffordanceEntry) -> Result<()> {
        entry.validate()?;
        if self.entry(&entry.id).is_some() {
            return Err(Error::DuplicateId(entry.id));
        }
        self.task_index
            .entry(entry.task.clone())
            .or_default()
            .push(entry.id.clone());
        self.entries.push(entry);
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn entries(&self) -> &[AffordanceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: &str) -> Option<&AffordanceEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Task name to entry ids, in insertion order within each task.
    pub fn task_index(&self) -> &BTreeMap<String, Vec<String>> {
        &self.task_index
    }

    pub fn entries_for_task<'a>(&'a self, task: &'a str) -> impl Iterator<Item = &'a AffordanceEntry> + 'a {
        self.entries.iter().filter(move |e| e.task == task)
    }

    /// An id of the form `{prefix}-{n:04}` not yet present.
    pub fn fresh_id(&self, prefix: &str) -> String {
        (self.entries.len()..)
            .map(|n| format!("{prefix}-{n:04}"))
            .find(|id| self.entry(id).is_none())
            .expect("unbounded search")
    }

    /// Checks that every referenced file exists and that feature map headers
    /// agree with the recorded image sizes.
    pub fn validate_assets(&self) -> Result<()> {
        for e in &self.entries {
            let image = self.resolve(&e.image_path);
            if !image.is_file() {
                return Err(Error::MissingAsset(image));
            }
            if let Some(mask) = &e.mask_path {
                let mask = self.resolve(mask);
                if !mask.is_file() {
                    return Err(Error::MissingAsset(mask));
                }
            }
            let header = load_feature_map_header(self.resolve(&e.feature_map_path))?;
            if [header.image_width, header.image_height] != e.image_size {
                return Err(Error::DimensionMismatch(format!(
                    "entry {}: feature map image is {}x{} but entry records {}x{}",
                    e.id, header.image_width, header.image_height, e.image_size[0], e.image_size[1]
                )));
            }
        }
        Ok(())
    }
}

/// Parses and validates a manifest; asset paths resolve against its directory.
pub fn load_memory(manifest_path: impl AsRef<Path>) -> Result<AffordanceMemory> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::ManifestParse(e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::ManifestParse(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let memory = AffordanceMemory::from_entries(root, manifest.entries)?;
    memory.validate_assets()?;
    Ok(memory)
}

pub fn save_memory(memory: &AffordanceMemory, manifest_path: impl AsRef<Path>) -> Result<()> {
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        entries: memory.entries.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_atomic(manifest_path.as_ref(), text.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    /// End-effector position in the world frame, meters.
    pub position: Point3<f64>,
    pub gripper_closed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoboticIngestParams {
    /// Post-contact steps tracked after the gripper closes.
    pub max_steps: usize,
    /// A step shorter than this (meters) counts as stationary.
    pub stop_epsilon: f64,
    /// Consecutive stationary steps that end the trajectory.
    pub stop_steps: usize,
}

impl Default for RoboticIngestParams {
    fn default() -> Self {
        Self {
            max_steps: 10,
            stop_epsilon: 0.005,
            stop_steps: 3,
        }
    }
}

/// Waypoints from a robot rollout: the end-effector position when the gripper
/// first closes, followed by up to `max_steps` positions, projected into the
/// first frame.
///
/// Tracking stops early once the end-effector has been stationary for
/// `stop_steps` consecutive steps; those stationary steps are dropped.
/// Post-contact points leaving the image truncate the trajectory.
pub fn ingest_robotic(
    samples: &[TrajectorySample],
    k: &CameraIntrinsics,
    camera_from_world: &Isometry3<f64>,
    params: &RoboticIngestParams,
) -> Result<Demonstration> {
    if params.stop_steps == 0 {
        return Err(Error::InvalidParameter("stop_steps must be positive".into()));
    }
    let contact = samples
        .iter()
        .position(|s| s.gripper_closed)
        .ok_or(Error::NoContactEvent)?;

    let mut steps = vec![contact];
    let mut still = 0;
    for j in (contact + 1..samples.len()).take(params.max_steps) {
        let moved = (samples[j].position - samples[j - 1].position).norm();
        still = if moved < params.stop_epsilon { still + 1 } else { 0 };
        steps.push(j);
        if still == params.stop_steps {
            steps.truncate(steps.len() - still);
            break;
        }
    }

    let to_pixel = |j: usize| -> Option<Point2<f64>> {
        let pc = camera_from_world * samples[j].position;
        project(&pc, k).ok().filter(|p| k.contains(p.x, p.y))
    };
    let first = to_pixel(contact).ok_or_else(|| {
        let pc = camera_from_world * samples[contact].position;
        let (u, v) = project(&pc, k).map(|p| (p.x, p.y)).unwrap_or((f64::NAN, f64::NAN));
        Error::ProjectionOutOfImage { u, v }
    })?;
    let mut waypoints = vec![first];
    waypoints.extend(steps[1..].iter().map_while(|&j| to_pixel(j)));
    if waypoints.len() < 2 {
        return Err(Error::DegenerateTrajectory(
            "end-effector does not move visibly after contact".into(),
        ));
    }
    Ok(Demonstration {
        source: DemoSource::Robotic,
        waypoints,
        image_width: k.width,
        image_height: k.height,
    })
}

fn mean(points: &[Point2<f64>]) -> Point2<f64> {
    let sum = points.iter().fold(Vector2::zeros(), |acc, p| acc + p.coords);
    Point2::from(sum / points.len() as f64)
}

/// Waypoints from per-frame hand keypoints.
///
/// The contact is the mean of the first-frame keypoints that fall inside the
/// object mask. Each frame contributes the mean of all its keypoints, and the
/// resulting trajectory is translated so it starts at the contact. Frames
/// without keypoints are skipped.
pub fn ingest_hoi(frames: &[Vec<Point2<f64>>], object_mask: &PixelMask) -> Result<Demonstration> {
    let first = frames.first().ok_or(Error::NoContactInMask)?;
    let inside: Vec<Point2<f64>> = first
        .iter()
        .copied()
        .filter(|p| object_mask.contains(p.x, p.y))
        .collect();
    if inside.is_empty() {
        return Err(Error::NoContactInMask);
    }
    let contact = mean(&inside);

    let track: Vec<Point2<f64>> = frames.iter().filter(|f| !f.is_empty()).map(|f| mean(f)).collect();
    if track.len() < 2 {
        return Err(Error::DegenerateTrajectory("need keypoints in at least 2 frames".into()));
    }
    let shift = contact - track[0];
    let mut waypoints: Vec<Point2<f64>> = track.iter().map(|p| p + shift).collect();
    // exact contact, free of the round trip through the shift
    waypoints[0] = contact;

    let (w, h) = (object_mask.width, object_mask.height);
    if let Some(p) = waypoints.iter().find(|p| !pixel_in_bounds(p.x, p.y, w, h)) {
        return Err(Error::OutOfBounds {
            u: p.x,
            v: p.y,
            width: w,
            height: h,
        });
    }
    Ok(Demonstration {
        source: DemoSource::Hoi,
        waypoints,
        image_width: w,
        image_height: h,
    })
}

/// `n_points` evenly spaced waypoints from `start` to `end` inclusive.
pub fn ingest_custom(
    start: Point2<f64>,
    end: Point2<f64>,
    n_points: usize,
    image_width: usize,
    image_height: usize,
) -> Result<Demonstration> {
    if n_points < 2 {
        return Err(Error::InvalidParameter(format!("n_points = {n_points} must be at least 2")));
    }
    for p in [start, end] {
        if !pixel_in_bounds(p.x, p.y, image_width, image_height) {
            return Err(Error::OutOfBounds {
                u: p.x,
                v: p.y,
                width: image_width,
                height: image_height,
            });
        }
    }
    if start == end {
        return Err(Error::DegenerateAnnotation);
    }
    let last = (n_points - 1) as f64;
    let waypoints = (0..n_points)
        .map(|i| {
            if i == n_points - 1 {
                end
            } else {
                start + (end - start) * (i as f64 / last)
            }
        })
        .collect();
    Ok(Demonstration {
        source: DemoSource::Custom,
        waypoints,
        image_width,
        image_height,
    })
}
