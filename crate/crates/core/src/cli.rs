//! The `afford` command-line interface.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{Isometry3, Point2, Quaternion, Translation3, UnitQuaternion, UnitVector3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::demo::{write_demo, DemoSpec};
use crate::error::{Error, Result, Stage};
use crate::features::{Embedding, EmbeddingKind};
use crate::formats::{load_embedding, load_feature_map_header, load_mask, save_depth, save_feature_map, save_mask, write_atomic};
use crate::geometry::CameraIntrinsics;
use crate::lift::GraspCandidate;
use crate::memory::{
    ingest_custom, ingest_hoi, ingest_robotic, load_memory, save_memory, AffordanceEntry, AffordanceMemory,
    Demonstration, EntryMeta, TrajectorySample, MANIFEST_FILE,
};
use crate::overlay::{render_overlay, save_png};
use crate::pipeline::{infer, lift_stage, retrieve_stage, transfer_stage, QueryEmbeddings};
use crate::scene::{Scene, SceneBundle};
use crate::synth::{
    make_box_scene, make_coordinate_features, make_plane_scene, Affine2, BoxFace, BoxSceneSpec, CoordinateFeatureSpec,
    HandleSpec, SyntheticScene,
};
use crate::transfer::Affordance2D;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RETRIEVAL: i32 = 3;
pub const EXIT_TRANSFER: i32 = 4;
pub const EXIT_LIFTING: i32 = 5;
pub const EXIT_USAGE: i32 = 64;

#[derive(Parser, Debug)]
#[command(name = "afford", version, about = "Retrieve, transfer, and lift object affordances from a demonstration memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Add a demonstration to a memory directory.
    #[command(subcommand)]
    Ingest(IngestCommand),
    /// Run hierarchical retrieval and print the report.
    Retrieve(RetrieveArgs),
    /// Transfer one stored demonstration into the scene.
    Transfer(TransferArgs),
    /// Lift a 2D affordance to 3D with the scene depth.
    Lift(LiftArgs),
    /// Retrieve, transfer, and lift in one go.
    Infer(InferArgs),
    /// Draw a 2D affordance over an image.
    Visualize(VisualizeArgs),
    /// Generate synthetic fixtures.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Configuration helpers.
    #[command(subcommand)]
    Config(ConfigCommand),
}

#[derive(Subcommand, Debug)]
enum IngestCommand {
    /// Waypoints interpolated between two clicked pixels.
    Custom {
        #[command(flatten)]
        entry: EntryArgs,
        #[arg(long, num_args = 2, value_names = ["U", "V"], allow_negative_numbers = true)]
        start: Vec<f64>,
        #[arg(long, num_args = 2, value_names = ["U", "V"], allow_negative_numbers = true)]
        end: Vec<f64>,
        /// Number of waypoints (defaults to the config value).
        #[arg(long)]
        points: Option<usize>,
    },
    /// Waypoints from a robot trajectory JSON file.
    Robotic {
        #[command(flatten)]
        entry: EntryArgs,
        #[arg(long)]
        trajectory: PathBuf,
    },
    /// Waypoints from per-frame hand keypoints.
    Hoi {
        #[command(flatten)]
        entry: EntryArgs,
        /// JSON `{"frames": [[[u, v], ...], ...]}`.
        #[arg(long)]
        keypoints: PathBuf,
        /// Object mask (.msk) of the first frame.
        #[arg(long)]
        object_mask: PathBuf,
    },
}

#[derive(Args, Debug)]
struct EntryArgs {
    /// Memory directory; created if missing.
    #[arg(long)]
    memory: PathBuf,
    /// First frame of the demonstration (PNG).
    #[arg(long)]
    image: PathBuf,
    /// Dense features of the first frame (.dfm).
    #[arg(long)]
    features: PathBuf,
    /// Object mask of the first frame (.msk).
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    task: String,
    #[arg(long)]
    object: String,
    /// Text embedding of the task (.emb).
    #[arg(long)]
    task_embedding: PathBuf,
    /// Image embedding of the first frame (.emb).
    #[arg(long)]
    image_embedding: PathBuf,
    /// Entry id; generated when omitted.
    #[arg(long)]
    id: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    memory: PathBuf,
    /// Scene bundle JSON.
    #[arg(long)]
    scene: PathBuf,
    /// Text embedding of the instruction's task (.emb).
    #[arg(long)]
    instruction: PathBuf,
    /// Text embedding of the object name (.emb).
    #[arg(long)]
    object: PathBuf,
    /// Task names to fall back to when the instruction matches no task.
    #[arg(long = "fallback-task")]
    fallback_tasks: Vec<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    #[command(flatten)]
    query: QueryArgs,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[arg(long)]
    memory: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    entry: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LiftArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Affordance2D JSON as written by `transfer`.
    #[arg(long)]
    affordance2d: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    query: QueryArgs,
    /// Grasp candidates JSON; the one nearest the contact is reported.
    #[arg(long)]
    grasps: Option<PathBuf>,
    /// Directory receiving retrieval.json, affordance2d.json,
    /// affordance3d.json, result.json, and overlay.png.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct VisualizeArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    affordance2d: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Copy)]
struct CameraArgs {
    #[arg(long, default_value_t = 160)]
    width: usize,
    #[arg(long, default_value_t = 120)]
    height: usize,
    #[arg(long, default_value_t = 150.0)]
    fx: f64,
    #[arg(long, default_value_t = 150.0)]
    fy: f64,
    /// Defaults to the image center.
    #[arg(long)]
    cx: Option<f64>,
    #[arg(long)]
    cy: Option<f64>,
}

impl CameraArgs {
    fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.fx,
            self.fy,
            self.cx.unwrap_or((self.width as f64 - 1.0) / 2.0),
            self.cy.unwrap_or((self.height as f64 - 1.0) / 2.0),
            self.width,
            self.height,
        )
    }
}

#[derive(Subcommand, Debug)]
enum SynthCommand {
    /// A plane `n . p + d = 0` filling the view.
    Plane {
        #[command(flatten)]
        camera: CameraArgs,
        #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"], allow_negative_numbers = true, default_values_t = [0.0, 0.0, -1.0])]
        normal: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        distance: f64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// A box seen from a given pose, with a handle point on one face.
    Box {
        #[command(flatten)]
        camera: CameraArgs,
        #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"], default_values_t = [0.3, 0.25, 0.2])]
        half_extents: Vec<f64>,
        /// Camera-to-box-center distance (meters).
        #[arg(long, default_value_t = 1.2)]
        distance: f64,
        /// Rotation of the box about the camera y axis (degrees).
        #[arg(long, default_value_t = 20.0, allow_negative_numbers = true)]
        yaw: f64,
        /// Rotation of the box about the camera x axis (degrees).
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        pitch: f64,
        /// Handle face: +x, -x, +y, -y, +z, or -z.
        #[arg(long, default_value = "-z", allow_hyphen_values = true)]
        handle_face: String,
        #[arg(long, num_args = 2, value_names = ["A", "B"], allow_negative_numbers = true, default_values_t = [0.1, 0.0])]
        handle_offset: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Coordinate-encoded source and target feature maps related by a warp.
    Features {
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        /// Image pixels per grid cell.
        #[arg(long, default_value_t = 1)]
        scale: usize,
        #[arg(long, num_args = 2, value_names = ["DX", "DY"], allow_negative_numbers = true, default_values_t = [0.0, 0.0])]
        translate: Vec<f64>,
        /// Rotation about the grid center (degrees).
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        rotate: f64,
        /// Uniform scale about the grid center.
        #[arg(long, default_value_t = 1.0)]
        zoom: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// A complete memory, scene, and query for trying `infer`.
    Demo {
        #[arg(long, default_value_t = 20)]
        entries: usize,
        #[arg(long, default_value_t = 4)]
        tasks: usize,
        #[arg(long, default_value_t = 32)]
        grid: usize,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 2)]
        scale: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum ConfigCommand {
    /// Print (or write) a config file with every default filled in.
    Init {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Rigid camera pose: `rotation` is a unit quaternion `[w, x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let q = iso.rotation;
        let t = iso.translation.vector;
        Self {
            rotation: [q.w, q.i, q.j, q.k],
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn to_isometry(&self) -> Result<Isometry3<f64>> {
        let [w, x, y, z] = self.rotation;
        let q = Quaternion::new(w, x, y, z);
        if !((q.norm() - 1.0).abs() <= 1e-6) {
            return Err(Error::InvalidData(format!("pose rotation has norm {}", q.norm())));
        }
        let [tx, ty, tz] = self.translation;
        Ok(Isometry3::from_parts(
            Translation3::new(tx, ty, tz),
            UnitQuaternion::from_quaternion(q),
        ))
    }
}

/// Input of `ingest robotic`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub intrinsics: CameraIntrinsics,
    pub camera_from_world: Pose,
    pub samples: Vec<TrajectorySample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointFile {
    pub frames: Vec<Vec<Point2<f64>>>,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
    stage: Option<Stage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<&'a Path>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e.stage() {
        Some(s) if s.is_retrieval() => EXIT_RETRIEVAL,
        Some(s) if s.is_transfer() => EXIT_TRANSFER,
        Some(_) => EXIT_LIFTING,
        None => EXIT_VALIDATION,
    }
}

fn error_json(e: &Error) -> String {
    let path = match e.root() {
        Error::MissingAsset(p) => Some(p.as_path()),
        Error::Io { path, .. } => Some(path.as_path()),
        _ => None,
    };
    let report = ErrorReport {
        error: e.kind(),
        message: e.root().to_string(),
        stage: e.stage(),
        path,
    };
    serde_json::to_string(&report).expect("error report serializes")
}

/// Parses `args` (including the program name) and runs the command, writing
/// machine output to `stdout` and errors to `stderr`. Returns the exit code.
pub fn run_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = stdout.write_all(text.as_bytes());
                    EXIT_OK
                }
                _ => {
                    let _ = stderr.write_all(text.as_bytes());
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_json(&e));
            exit_code(&e)
        }
    }
}

pub fn run() -> i32 {
    run_with(
        std::env::args_os(),
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    )
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) if !p.is_file() => Err(Error::MissingAsset(p.to_path_buf())),
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingAsset(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    s
}

fn emit(text: &str, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => stdout
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn load_text_embedding(path: &Path) -> Result<Embedding> {
    let e = load_embedding(path)?;
    if e.kind != EmbeddingKind::Text {
        return Err(Error::InvalidData(format!("{} is not a text embedding", path.display())));
    }
    Ok(e)
}

fn open_memory(dir: &Path) -> Result<AffordanceMemory> {
    let manifest = dir.join(MANIFEST_FILE);
    if !manifest.is_file() {
        return Err(Error::MissingAsset(manifest));
    }
    load_memory(manifest)
}

fn execute(command: Command, stdout: &mut dyn Write) -> Result<()> {
    match command {
        Command::Ingest(cmd) => cmd_ingest(cmd, stdout),
        Command::Retrieve(args) => {
            let config = load_config(args.query.config.as_deref())?;
            let (memory, scene, instruction, object) = load_query(&args.query)?;
            let q = QueryEmbeddings {
                instruction: &instruction,
                object_name: &object,
            };
            let report = retrieve_stage(&scene, &memory, &memory, q, &args.query.fallback_tasks, &config)?;
            emit(&to_json(&report), args.out.as_deref(), stdout)
        }
        Command::Transfer(args) => {
            let config = load_config(args.config.as_deref())?;
            let memory = open_memory(&args.memory)?;
            let scene = SceneBundle::load(&args.scene)?;
            let a2d = transfer_stage(&scene, &memory, &memory, &args.entry, &config)?;
            emit(&to_json(&a2d), args.out.as_deref(), stdout)
        }
        Command::Lift(args) => {
            let config = load_config(args.config.as_deref())?;
            let scene = SceneBundle::load(&args.scene)?;
            let a2d = read_affordance2d(&args.affordance2d)?;
            let a3d = lift_stage(&scene, &a2d, &config)?;
            emit(&to_json(&a3d), args.out.as_deref(), stdout)
        }
        Command::Infer(args) => cmd_infer(args, stdout),
        Command::Visualize(args) => {
            let a2d = read_affordance2d(&args.affordance2d)?;
            let img = render_overlay(&args.image, &a2d)?;
            save_png(&img, &args.out)
        }
        Command::Synth(cmd) => cmd_synth(cmd, stdout),
        Command::Config(ConfigCommand::Init { out }) => {
            let mut text = PipelineConfig::default().to_json();
            text.push('\n');
            emit(&text, out.as_deref(), stdout)
        }
    }
}

fn read_affordance2d(path: &Path) -> Result<Affordance2D> {
    let a: Affordance2D = read_json(path)?;
    a.validate()?;
    Ok(a)
}

fn load_query(args: &QueryArgs) -> Result<(AffordanceMemory, Scene, Embedding, Embedding)> {
    let memory = open_memory(&args.memory)?;
    let scene = SceneBundle::load(&args.scene)?;
    let instruction = load_text_embedding(&args.instruction)?;
    let object = load_text_embedding(&args.object)?;
    Ok((memory, scene, instruction, object))
}

#[derive(Serialize)]
struct InferResult<'a> {
    entry_id: &'a str,
    task: &'a str,
    contact: nalgebra::Point3<f64>,
    direction: Vector3<f64>,
    contact_2d: Point2<f64>,
    direction_2d: Vector2<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    grasp: Option<crate::lift::GraspChoice>,
    warnings: &'a [String],
}

fn cmd_infer(args: InferArgs, stdout: &mut dyn Write) -> Result<()> {
    let config = load_config(args.query.config.as_deref())?;
    let (memory, scene, instruction, object) = load_query(&args.query)?;
    let grasps: Option<Vec<GraspCandidate>> = args.grasps.as_deref().map(read_json).transpose()?;
    let q = QueryEmbeddings {
        instruction: &instruction,
        object_name: &object,
    };
    let out = infer(
        &scene,
        &memory,
        &memory,
        q,
        &args.query.fallback_tasks,
        grasps.as_deref(),
        &config,
    )?;
    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let dir = &args.out_dir;
    write_atomic(&dir.join("retrieval.json"), to_json(&out.retrieval).as_bytes())?;
    write_atomic(&dir.join("affordance2d.json"), to_json(&out.affordance2d).as_bytes())?;
    write_atomic(&dir.join("affordance3d.json"), to_json(&out.affordance3d).as_bytes())?;
    let overlay = render_overlay(&scene.image_path, &out.affordance2d)?;
    save_png(&overlay, &dir.join("overlay.png"))?;
    let result = InferResult {
        entry_id: &out.retrieval.entry_id,
        task: &out.retrieval.task,
        contact: out.affordance3d.contact,
        direction: out.affordance3d.direction,
        contact_2d: out.affordance2d.contact,
        direction_2d: out.affordance2d.direction,
        grasp: out.grasp,
        warnings: &out.warnings,
    };
    let text = to_json(&result);
    write_atomic(&dir.join("result.json"), text.as_bytes())?;
    emit(&text, None, stdout)
}

/// Copies `src` to `<memory>/assets/<id>/<name>` and returns the path
/// relative to the memory directory.
fn stage_asset(memory_dir: &Path, id: &str, src: &Path, name: &str) -> Result<PathBuf> {
    if !src.is_file() {
        return Err(Error::MissingAsset(src.to_path_buf()));
    }
    let rel = PathBuf::from("assets").join(id).join(name);
    let dst = memory_dir.join(&rel);
    let bytes = fs::read(src).map_err(|e| Error::io(src, e))?;
    let parent = dst.parent().expect("asset path has a parent");
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    write_atomic(&dst, &bytes)?;
    Ok(rel)
}

fn cmd_ingest(cmd: IngestCommand, stdout: &mut dyn Write) -> Result<()> {
    let entry_args = match &cmd {
        IngestCommand::Custom { entry, .. } | IngestCommand::Robotic { entry, .. } | IngestCommand::Hoi { entry, .. } => {
            entry
        }
    };
    let config = load_config(entry_args.config.as_deref())?;
    for p in [&entry_args.image, &entry_args.features, &entry_args.task_embedding, &entry_args.image_embedding]
        .into_iter()
        .chain(entry_args.mask.as_ref())
    {
        if !p.is_file() {
            return Err(Error::MissingAsset(p.clone()));
        }
    }
    let (iw, ih) = image::image_dimensions(&entry_args.image)
        .map_err(|e| Error::InvalidData(format!("{}: {e}", entry_args.image.display())))?;
    let (iw, ih) = (iw as usize, ih as usize);

    let (kind, demo): (&str, Demonstration) = match &cmd {
        IngestCommand::Custom { start, end, points, .. } => {
            let n = points.unwrap_or(config.custom.points);
            let demo = ingest_custom(Point2::new(start[0], start[1]), Point2::new(end[0], end[1]), n, iw, ih)?;
            ("custom", demo)
        }
        IngestCommand::Robotic { trajectory, .. } => {
            let t: TrajectoryFile = read_json(trajectory)?;
            t.intrinsics.validate()?;
            let pose = t.camera_from_world.to_isometry()?;
            ("robotic", ingest_robotic(&t.samples, &t.intrinsics, &pose, &config.robotic)?)
        }
        IngestCommand::Hoi { keypoints, object_mask, .. } => {
            let k: KeypointFile = read_json(keypoints)?;
            let mask = load_mask(object_mask)?;
            ("hoi", ingest_hoi(&k.frames, &mask)?)
        }
    };
    if (demo.image_width, demo.image_height) != (iw, ih) {
        return Err(Error::DimensionMismatch(format!(
            "demonstration covers {}x{} but the image is {iw}x{ih}",
            demo.image_width, demo.image_height
        )));
    }
    let header = load_feature_map_header(&entry_args.features)?;
    if (header.image_width, header.image_height) != (iw, ih) {
        return Err(Error::DimensionMismatch(format!(
            "feature map covers {}x{} but the image is {iw}x{ih}",
            header.image_width, header.image_height
        )));
    }
    if let Some(m) = &entry_args.mask {
        let mask = load_mask(m)?;
        if (mask.width, mask.height) != (iw, ih) {
            return Err(Error::DimensionMismatch(format!(
                "mask is {}x{} but the image is {iw}x{ih}",
                mask.width, mask.height
            )));
        }
    }
    let task_embedding = load_text_embedding(&entry_args.task_embedding)?;
    let image_embedding = load_embedding(&entry_args.image_embedding)?;
    if image_embedding.kind != EmbeddingKind::Image {
        return Err(Error::InvalidData(format!(
            "{} is not an image embedding",
            entry_args.image_embedding.display()
        )));
    }

    let dir = &entry_args.memory;
    let manifest = dir.join(MANIFEST_FILE);
    let mut memory = if manifest.is_file() {
        load_memory(&manifest)?
    } else {
        AffordanceMemory::new(dir)
    };
    let id = entry_args.id.clone().unwrap_or_else(|| memory.fresh_id(kind));
    if memory.entry(&id).is_some() {
        return Err(Error::DuplicateId(id));
    }
    let ext = entry_args
        .image
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("png")
        .to_string();
    let meta = EntryMeta {
        image_path: stage_asset(dir, &id, &entry_args.image, &format!("image.{ext}"))?,
        feature_map_path: stage_asset(dir, &id, &entry_args.features, "features.dfm")?,
        mask_path: entry_args
            .mask
            .as_deref()
            .map(|m| stage_asset(dir, &id, m, "mask.msk"))
            .transpose()?,
        id,
        task: entry_args.task.clone(),
        object_name: entry_args.object.clone(),
        task_embedding,
        image_embedding,
    };
    let entry = AffordanceEntry::from_demonstration(demo, meta)?;
    memory.insert(entry.clone())?;
    save_memory(&memory, &manifest)?;
    emit(&to_json(&entry), None, stdout)
}

#[derive(Serialize)]
struct SceneTruth<'a> {
    intrinsics: CameraIntrinsics,
    points: &'a std::collections::BTreeMap<String, nalgebra::Point3<f64>>,
    directions: &'a std::collections::BTreeMap<String, Vector3<f64>>,
    pixels: &'a std::collections::BTreeMap<String, Point2<f64>>,
}

fn write_scene(scene: &SyntheticScene, dir: &Path, stdout: &mut dyn Write) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_depth(&scene.depth, dir.join("depth.dpt"))?;
    write_atomic(&dir.join("intrinsics.json"), to_json(&scene.intrinsics).as_bytes())?;
    save_mask(&scene.object_mask(), dir.join("mask.msk"))?;
    for (name, mask) in &scene.face_masks {
        save_mask(mask, dir.join(format!("mask{name}.msk")))?;
    }
    let truth = SceneTruth {
        intrinsics: scene.intrinsics,
        points: &scene.points,
        directions: &scene.directions,
        pixels: &scene.pixels,
    };
    let text = to_json(&truth);
    write_atomic(&dir.join("truth.json"), text.as_bytes())?;
    emit(&text, None, stdout)
}

fn cmd_synth(cmd: SynthCommand, stdout: &mut dyn Write) -> Result<()> {
    match cmd {
        SynthCommand::Plane {
            camera,
            normal,
            distance,
            noise,
            seed,
            out_dir,
        } => {
            let n = Vector3::new(normal[0], normal[1], normal[2]);
            if n.norm() == 0.0 {
                return Err(Error::ZeroVector);
            }
            let scene = make_plane_scene(&UnitVector3::new_normalize(n), distance, &camera.intrinsics()?, noise, seed)?;
            write_scene(&scene, &out_dir, stdout)
        }
        SynthCommand::Box {
            camera,
            half_extents,
            distance,
            yaw,
            pitch,
            handle_face,
            handle_offset,
            noise,
            seed,
            out_dir,
        } => {
            let face = BoxFace::ALL
                .into_iter()
                .find(|f| f.name() == handle_face)
                .ok_or_else(|| Error::InvalidParameter(format!("unknown face '{handle_face}'")))?;
            let spec = BoxSceneSpec {
                half_extents: Vector3::new(half_extents[0], half_extents[1], half_extents[2]),
                camera_from_box: Isometry3::from_parts(
                    Translation3::new(0.0, 0.0, distance),
                    UnitQuaternion::from_euler_angles(pitch.to_radians(), yaw.to_radians(), 0.0),
                ),
                handle: HandleSpec {
                    face,
                    offset: [handle_offset[0], handle_offset[1]],
                },
                noise,
                seed,
            };
            let scene = make_box_scene(&spec, &camera.intrinsics()?)?;
            write_scene(&scene, &out_dir, stdout)
        }
        SynthCommand::Features {
            grid,
            channels,
            scale,
            translate,
            rotate,
            zoom,
            seed,
            out_dir,
        } => {
            let center = Point2::new((grid as f64 - 1.0) / 2.0, (grid as f64 - 1.0) / 2.0);
            let warp = Affine2::similarity(
                rotate.to_radians(),
                zoom,
                center,
                Vector2::new(translate[0], translate[1]),
            );
            let mut spec = CoordinateFeatureSpec::new(grid, grid, channels, warp, seed);
            spec.image_scale = scale;
            let (source, target) = make_coordinate_features(&spec)?;
            fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            save_feature_map(&source, out_dir.join("source.dfm"))?;
            save_feature_map(&target, out_dir.join("target.dfm"))?;
            let text = to_json(&warp);
            write_atomic(&out_dir.join("warp.json"), text.as_bytes())?;
            emit(&text, None, stdout)
        }
        SynthCommand::Demo {
            entries,
            tasks,
            grid,
            channels,
            scale,
            noise,
            seed,
            out_dir,
        } => {
            let spec = DemoSpec {
                entries,
                tasks,
                grid,
                channels,
                image_scale: scale,
                embedding_dim: DemoSpec::default().embedding_dim.max(tasks),
                noise,
                seed,
            };
            let (_, truth) = write_demo(&spec, &out_dir)?;
            emit(&to_json(&truth), None, stdout)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with(std::iter::once("afford").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        let (code, _, err) = run_capture(&["frobnicate"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("Usage"));
    }

    #[test]
    fn config_init_prints_defaults() {
        let (code, out, _) = run_capture(&["config", "init"]);
        assert_eq!(code, EXIT_OK);
        let c: PipelineConfig = serde_json::from_str(&out).unwrap();
        assert_eq!(c, PipelineConfig::default());
    }

    #[test]
    fn stage_errors_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::EmptyMemory.at(Stage::TaskRetrieval)), EXIT_RETRIEVAL);
        assert_eq!(exit_code(&Error::DegenerateLine.at(Stage::Transfer)), EXIT_TRANSFER);
        assert_eq!(exit_code(&Error::EmptyCrop.at(Stage::Crop)), EXIT_LIFTING);
        assert_eq!(exit_code(&Error::EmptyMask), EXIT_VALIDATION);
    }

    #[test]
    fn pose_round_trip() {
        let iso = Isometry3::from_parts(
            Translation3::new(0.1, -0.2, 0.3),
            UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3),
        );
        let back = Pose::from_isometry(&iso).to_isometry().unwrap();
        assert!((back.translation.vector - iso.translation.vector).norm() < 1e-12);
        assert!(back.rotation.angle_to(&iso.rotation) < 1e-9);
    }
}
