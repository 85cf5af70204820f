//! Target observation bundle: a JSON file naming the target image, depth,
//! intrinsics, object mask, image embedding, and dense features.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{normalize_features, DenseFeatureMap, Embedding, EmbeddingKind, PixelMask};
use crate::formats::{load_depth, load_embedding, load_feature_map, load_mask};
use crate::geometry::{CameraIntrinsics, DepthImage};

/// On-disk scene description; paths are relative to the bundle file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneBundle {
    pub image: PathBuf,
    pub depth: PathBuf,
    pub intrinsics: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    pub image_embedding: PathBuf,
    pub feature_map: PathBuf,
}

/// A loaded and cross-checked scene. The feature map is normalized.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image_path: PathBuf,
    pub intrinsics: CameraIntrinsics,
    pub depth: DepthImage,
    pub mask: Option<PixelMask>,
    pub image_embedding: Embedding,
    pub feature_map: DenseFeatureMap,
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingAsset(path))
    }
}

pub fn load_intrinsics(path: impl AsRef<Path>) -> Result<CameraIntrinsics> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingAsset(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let k: CameraIntrinsics =
        serde_json::from_str(&text).map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
    k.validate()?;
    Ok(k)
}

impl SceneBundle {
    pub fn read(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingAsset(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        let bundle: Self =
            serde_json::from_str(&text).map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((bundle, root))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scene> {
        let (b, root) = Self::read(path)?;
        let image_path = require(root.join(&b.image))?;
        let intrinsics = load_intrinsics(root.join(&b.intrinsics))?;
        let depth = load_depth(root.join(&b.depth))?;
        let mask = b.mask.as_ref().map(|m| load_mask(root.join(m))).transpose()?;
        let image_embedding = load_embedding(root.join(&b.image_embedding))?;
        let feature_map = load_feature_map(root.join(&b.feature_map))?;
        let scene = Scene {
            image_path,
            intrinsics,
            depth,
            mask,
            image_embedding,
            feature_map: if feature_map.normalized {
                feature_map
            } else {
                normalize_features(feature_map).0
            },
        };
        scene.validate()?;
        Ok(scene)
    }
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        self.depth.check_matches(k)?;
        let (w, h) = (k.width, k.height);
        if let Some(m) = &self.mask {
            if (m.width, m.height) != (w, h) {
                return Err(Error::DimensionMismatch(format!(
                    "mask is {}x{}, scene is {w}x{h}",
                    m.width, m.height
                )));
            }
            if m.is_empty() {
                return Err(Error::EmptyMask);
            }
        }
        let f = &self.feature_map;
        if (f.image_width, f.image_height) != (w, h) {
            return Err(Error::DimensionMismatch(format!(
                "feature map covers a {}x{} image, scene is {w}x{h}",
                f.image_width, f.image_height
            )));
        }
        if self.image_embedding.kind != EmbeddingKind::Image {
            return Err(Error::InvalidData("scene embedding must be an image embedding".into()));
        }
        self.image_embedding.validate()?;
        let (iw, ih) = image::image_dimensions(&self.image_path)
            .map_err(|e| Error::InvalidData(format!("{}: {e}", self.image_path.display())))?;
        if (iw as usize, ih as usize) != (w, h) {
            return Err(Error::DimensionMismatch(format!(
                "target image is {iw}x{ih}, scene is {w}x{h}"
            )));
        }
        Ok(())
    }
}
