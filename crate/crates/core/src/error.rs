use std::fmt;
use std::path::PathBuf;

/// Pipeline stage an error originated from. Drives CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TaskRetrieval,
    SemanticFilter,
    GeometricRetrieval,
    Transfer,
    LiftContact,
    DepthToCloud,
    Crop,
    Normals,
    Clustering,
    DirectionSelection,
    GraspSelection,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::TaskRetrieval => "task_retrieval",
            Stage::SemanticFilter => "semantic_filter",
            Stage::GeometricRetrieval => "geometric_retrieval",
            Stage::Transfer => "transfer",
            Stage::LiftContact => "lift_contact",
            Stage::DepthToCloud => "depth_to_cloud",
            Stage::Crop => "crop",
            Stage::Normals => "normals",
            Stage::Clustering => "clustering",
            Stage::DirectionSelection => "direction_selection",
            Stage::GraspSelection => "grasp_selection",
        }
    }

    pub fn is_retrieval(&self) -> bool {
        matches!(
            self,
            Stage::TaskRetrieval | Stage::SemanticFilter | Stage::GeometricRetrieval
        )
    }

    pub fn is_transfer(&self) -> bool {
        matches!(self, Stage::Transfer)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(thiserror::Error, Debug)]
pub enum Error {
    // geometry
    #[error("pixel ({u}, {v}) is outside the {width}x{height} image")]
    OutOfBounds {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },
    #[error("no valid depth within the search window around ({u}, {v})")]
    NoValidDepth { u: f64, v: f64 },
    #[error("point is at or behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("direction projects to a degenerate image displacement")]
    DegenerateProjection,
    #[error("depth image has no valid pixel")]
    EmptyCloud,
    #[error("no point lies within the crop radius")]
    EmptyCrop,
    #[error("cloud has {points} points, need at least {required}")]
    InsufficientNeighbors { points: usize, required: usize },
    #[error("neighborhood of point {index} is degenerate (collinear or coincident)")]
    DegenerateNeighborhood { index: usize },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),

    // features and files
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("mask selects no cell")]
    EmptyMask,
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // memory
    #[error("no closed-gripper event in trajectory")]
    NoContactEvent,
    #[error("contact point projects outside the image at ({u}, {v})")]
    ProjectionOutOfImage { u: f64, v: f64 },
    #[error("no first-frame keypoint lies inside the object mask")]
    NoContactInMask,
    #[error("degenerate annotation: start and end coincide")]
    DegenerateAnnotation,
    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),
    #[error("manifest parse error: {0}")]
    ManifestParse(String),
    #[error("missing asset: {}", .0.display())]
    MissingAsset(PathBuf),
    #[error("duplicate entry id: {0}")]
    DuplicateId(String),
    #[error("unknown entry id: {0}")]
    UnknownEntry(String),

    // retrieval
    #[error("affordance memory is empty")]
    EmptyMemory,
    #[error("no candidate survived retrieval")]
    NoCandidates,

    // transfer
    #[error("need at least 2 points, got {0}")]
    InsufficientPoints(usize),
    #[error("all candidate point pairs coincide")]
    DegenerateLine,
    #[error("mean match score {mean:.4} is below the floor {floor:.4}")]
    LowConfidenceTransfer { mean: f64, floor: f64 },

    // lifting
    #[error("every candidate direction projects degenerately")]
    AmbiguousDirection,
    #[error("no grasp candidates supplied")]
    NoGraspCandidates,

    // synth
    #[error("plane is not visible from the camera")]
    PlaneNotVisible,
    #[error("warp is not invertible")]
    NonInvertibleWarp,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at(self, stage: Stage) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Outermost stage annotation, if any.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    /// The error with stage annotations stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// Short machine-readable name of the root error.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::OutOfBounds { .. } => "out_of_bounds",
            Error::NoValidDepth { .. } => "no_valid_depth",
            Error::BehindCamera { .. } => "behind_camera",
            Error::DegenerateProjection => "degenerate_projection",
            Error::EmptyCloud => "empty_cloud",
            Error::EmptyCrop => "empty_crop",
            Error::InsufficientNeighbors { .. } => "insufficient_neighbors",
            Error::DegenerateNeighborhood { .. } => "degenerate_neighborhood",
            Error::InvalidIntrinsics(_) => "invalid_intrinsics",
            Error::ZeroVector => "zero_vector",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::EmptyMask => "empty_mask",
            Error::BadMagic { .. } => "bad_magic",
            Error::TruncatedFile { .. } => "truncated_file",
            Error::InvalidData(_) => "invalid_data",
            Error::Io { .. } => "io",
            Error::NoContactEvent => "no_contact_event",
            Error::ProjectionOutOfImage { .. } => "projection_out_of_image",
            Error::NoContactInMask => "no_contact_in_mask",
            Error::DegenerateAnnotation => "degenerate_annotation",
            Error::DegenerateTrajectory(_) => "degenerate_trajectory",
            Error::ManifestParse(_) => "manifest_parse_error",
            Error::MissingAsset(_) => "missing_asset",
            Error::DuplicateId(_) => "duplicate_id",
            Error::UnknownEntry(_) => "unknown_entry",
            Error::EmptyMemory => "empty_memory",
            Error::NoCandidates => "no_candidates",
            Error::InsufficientPoints(_) => "insufficient_points",
            Error::DegenerateLine => "degenerate_line",
            Error::LowConfidenceTransfer { .. } => "low_confidence_transfer",
            Error::AmbiguousDirection => "ambiguous_direction",
            Error::NoGraspCandidates => "no_grasp_candidates",
            Error::PlaneNotVisible => "plane_not_visible",
            Error::NonInvertibleWarp => "non_invertible_warp",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Stage { .. } => unreachable!("root() strips stage annotations"),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
