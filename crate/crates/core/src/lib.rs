//! Affordance retrieval and transfer.
//!
//! A memory of 2D demonstrations is searched for the one most similar to a
//! target observation; its waypoints are carried over by dense feature
//! correspondence and lifted to a 3D contact point and motion direction
//! using the target depth.

pub mod cli;
pub mod config;
pub mod demo;
pub mod error;
pub mod features;
pub mod formats;
pub mod geometry;
pub mod lift;
pub mod memory;
pub mod overlay;
pub mod pipeline;
pub mod retrieval;
pub mod scene;
pub mod synth;
pub mod transfer;

pub use config::PipelineConfig;
pub use error::{Error, Result, Stage};
pub use features::{DenseFeatureMap, Embedding, EmbeddingKind, PixelMask};
pub use geometry::{CameraIntrinsics, DepthImage, PointCloud};
pub use lift::{Affordance3D, GraspCandidate, LiftParams};
pub use memory::{AffordanceEntry, AffordanceMemory};
pub use retrieval::{RetrievalParams, RetrievalReport};
pub use scene::{Scene, SceneBundle};
pub use transfer::{Affordance2D, TransferParams};
