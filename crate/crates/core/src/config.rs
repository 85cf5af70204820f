use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lift::LiftParams;
use crate::memory::RoboticIngestParams;
use crate::retrieval::RetrievalParams;
use crate::transfer::TransferParams;

/// Every tunable constant of the pipeline. Missing fields take their
/// defaults, so a partial file is valid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub retrieval: RetrievalParams,
    pub transfer: TransferParams,
    pub lift: LiftParams,
    pub robotic: RoboticIngestParams,
    pub custom: CustomIngestParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CustomIngestParams {
    /// Waypoints interpolated between the clicked start and end points.
    pub points: usize,
}

impl Default for CustomIngestParams {
    fn default() -> Self {
        Self { points: 10 }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        let r = &self.retrieval;
        if r.task_top_k == 0 {
            return bad("retrieval.task_top_k must be at least 1");
        }
        if !(-1.0..=1.0).contains(&r.semantic_threshold) {
            return bad("retrieval.semantic_threshold must lie in [-1, 1]");
        }
        if !(r.max_task_distance >= 0.0) {
            return bad("retrieval.max_task_distance must be non-negative");
        }
        let t = &self.transfer;
        if t.ransac_iterations == 0 || !(t.inlier_tol > 0.0) {
            return bad("transfer.ransac_iterations and transfer.inlier_tol must be positive");
        }
        if !(-1.0..=1.0).contains(&t.score_floor) {
            return bad("transfer.score_floor must lie in [-1, 1]");
        }
        self.lift.validate()?;
        let rb = &self.robotic;
        if rb.max_steps == 0 || rb.stop_steps == 0 || !(rb.stop_epsilon >= 0.0) {
            return bad("robotic parameters must be positive");
        }
        if self.custom.points < 2 {
            return bad("custom.points must be at least 2");
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let back: PipelineConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.transfer.ransac_iterations, 256);
        assert_eq!(c.lift.hole_window, 11);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c: PipelineConfig = serde_json::from_str(r#"{"lift": {"k_clusters": 2}}"#).unwrap();
        assert_eq!(c.lift.k_clusters, 2);
        assert_eq!(c.lift.k_neighbors, 30);
        assert_eq!(c.retrieval.semantic_threshold, 0.5);
    }

    #[test]
    fn out_of_range_rejected() {
        let mut c = PipelineConfig::default();
        c.transfer.inlier_tol = 0.0;
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
