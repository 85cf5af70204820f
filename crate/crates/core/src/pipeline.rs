//! End-to-end composition: retrieval, transfer, lifting, grasp selection.

use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{Error, Result, Stage};
use crate::features::{normalize_features, Embedding};
use crate::lift::{lift_affordance, select_grasp, Affordance3D, GraspCandidate, GraspChoice};
use crate::memory::AffordanceMemory;
use crate::retrieval::{retrieve, AssetSource, RetrievalQuery, RetrievalReport};
use crate::scene::Scene;
use crate::transfer::{transfer_affordance, Affordance2D};

#[derive(Debug, Clone, Copy)]
pub struct QueryEmbeddings<'a> {
    pub instruction: &'a Embedding,
    pub object_name: &'a Embedding,
}

pub fn retrieve_stage(
    scene: &Scene,
    memory: &AffordanceMemory,
    assets: &dyn AssetSource,
    query: QueryEmbeddings<'_>,
    fallback_tasks: &[String],
    config: &PipelineConfig,
) -> Result<RetrievalReport> {
    let q = RetrievalQuery {
        instruction_embedding: query.instruction,
        object_name_embedding: query.object_name,
        target_image_embedding: &scene.image_embedding,
        target_map: &scene.feature_map,
        target_mask: scene.mask.as_ref(),
        fallback_tasks,
    };
    retrieve(&q, memory, assets, &config.retrieval)
}

/// Transfers the stored demonstration `entry_id` into the scene.
pub fn transfer_stage(
    scene: &Scene,
    memory: &AffordanceMemory,
    assets: &dyn AssetSource,
    entry_id: &str,
    config: &PipelineConfig,
) -> Result<Affordance2D> {
    let run = || -> Result<Affordance2D> {
        let entry = memory.entry(entry_id).ok_or_else(|| Error::UnknownEntry(entry_id.to_string()))?;
        let source = assets.feature_map(entry)?;
        let source = if source.normalized {
            source
        } else {
            normalize_features(source).0
        };
        transfer_affordance(entry, &source, &scene.feature_map, scene.mask.as_ref(), &config.transfer)
    };
    run().map_err(|e| e.at(Stage::Transfer))
}

pub fn lift_stage(scene: &Scene, a2d: &Affordance2D, config: &PipelineConfig) -> Result<Affordance3D> {
    lift_affordance(a2d, &scene.depth, &scene.intrinsics, &config.lift)
}

pub fn grasp_stage(candidates: &[GraspCandidate], a3d: &Affordance3D) -> Result<GraspChoice> {
    let run = || {
        for g in candidates {
            g.validate()?;
        }
        select_grasp(candidates, &a3d.contact)
    };
    run().map_err(|e| e.at(Stage::GraspSelection))
}

#[derive(Debug, Clone, Serialize)]
pub struct InferOutput {
    pub retrieval: RetrievalReport,
    pub affordance2d: Affordance2D,
    pub affordance3d: Affordance3D,
    pub grasp: Option<GraspChoice>,
    pub warnings: Vec<String>,
}

pub fn infer(
    scene: &Scene,
    memory: &AffordanceMemory,
    assets: &dyn AssetSource,
    query: QueryEmbeddings<'_>,
    fallback_tasks: &[String],
    grasps: Option<&[GraspCandidate]>,
    config: &PipelineConfig,
) -> Result<InferOutput> {
    config.validate()?;
    let retrieval = retrieve_stage(scene, memory, assets, query, fallback_tasks, config)?;
    let affordance2d = transfer_stage(scene, memory, assets, &retrieval.entry_id, config)?;
    let affordance3d = lift_stage(scene, &affordance2d, config)?;
    let grasp = grasps.map(|g| grasp_stage(g, &affordance3d)).transpose()?;
    let mut warnings = retrieval.warnings.clone();
    if affordance3d.contact_substituted {
        warnings.push(format!(
            "contact pixel had no depth; used pixel ({}, {})",
            affordance3d.contact_depth_pixel.0, affordance3d.contact_depth_pixel.1
        ));
    }
    Ok(InferOutput {
        retrieval,
        affordance2d,
        affordance3d,
        grasp,
        warnings,
    })
}
