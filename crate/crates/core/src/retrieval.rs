//! Coarse-to-fine demonstration retrieval: task retrieval over language
//! embeddings, semantic filtering over image/text embeddings, and geometric
//! retrieval by instance matching distance over dense features.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::features::{normalize_features, DenseFeatureMap, Embedding, PixelMask};
use crate::formats::{load_feature_map, load_mask};
use crate::memory::{AffordanceEntry, AffordanceMemory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalParams {
    /// Number of tasks kept by task retrieval.
    pub task_top_k: usize,
    /// Minimum joint similarity kept by semantic filtering.
    pub semantic_threshold: f64,
    /// Task distance beyond which the instruction is treated as an unknown
    /// task (fallback tasks are used if supplied, otherwise a warning).
    pub max_task_distance: f64,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            task_top_k: 1,
            semantic_threshold: 0.5,
            max_task_distance: 0.5,
        }
    }
}

pub struct RetrievalQuery<'a> {
    pub instruction_embedding: &'a Embedding,
    pub object_name_embedding: &'a Embedding,
    pub target_image_embedding: &'a Embedding,
    /// Normalized target features.
    pub target_map: &'a DenseFeatureMap,
    pub target_mask: Option<&'a PixelMask>,
    /// Tasks to use when the instruction matches no stored task.
    pub fallback_tasks: &'a [String],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskScore {
    pub task: String,
    pub distance: f64,
}

/// Distinct tasks ranked by L2 distance between `instruction` and the task
/// embeddings stored with each task's entries. A task's distance is the
/// minimum over its entries. Ties are ordered by task name.
pub fn retrieve_task(
    instruction: &Embedding,
    memory: &AffordanceMemory,
    top_k: usize,
) -> Result<Vec<TaskScore>> {
    if memory.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for e in memory.entries() {
        let d = instruction.l2_distance(&e.task_embedding)?;
        let slot = best.entry(e.task.as_str()).or_insert(f64::INFINITY);
        if d < *slot {
            *slot = d;
        }
    }
    let mut ranked: Vec<TaskScore> = best
        .into_iter()
        .map(|(task, distance)| TaskScore {
            task: task.to_string(),
            distance,
        })
        .collect();
    // stable sort keeps name order among equal distances
    ranked.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    ranked.truncate(top_k.max(1));
    Ok(ranked)
}

/// Joint similarity of a demonstration image with the target image and the
/// object name: `cos(img_s, img_t) * cos(img_s, name)`.
pub fn joint_similarity(entry: &AffordanceEntry, query: &RetrievalQuery<'_>) -> Result<f64> {
    let visual = entry.image_embedding.cosine(query.target_image_embedding)?;
    let semantic = entry.image_embedding.cosine(query.object_name_embedding)?;
    Ok(visual * semantic)
}

#[derive(Debug, Clone)]
pub struct SemanticFilterOutcome<'a> {
    /// Every input entry with its similarity, in input order.
    pub scored: Vec<(&'a AffordanceEntry, f64)>,
    /// Entries at or above the threshold, in input order.
    pub retained: Vec<(&'a AffordanceEntry, f64)>,
    /// True when nothing passed and the single best entry was kept instead.
    pub fail_open: bool,
}

/// Keeps entries whose joint similarity reaches `threshold`. If none does,
/// the best-scoring entry (earliest on ties) is kept so retrieval always has
/// a candidate.
pub fn semantic_filter<'a>(
    entries: &[&'a AffordanceEntry],
    query: &RetrievalQuery<'_>,
    threshold: f64,
) -> Result<SemanticFilterOutcome<'a>> {
    let scored = entries
        .iter()
        .map(|&e| joint_similarity(e, query).map(|s| (e, s)))
        .collect::<Result<Vec<_>>>()?;
    let mut retained: Vec<_> = scored.iter().copied().filter(|(_, s)| *s >= threshold).collect();
    let mut fail_open = false;
    if retained.is_empty() {
        if let Some(best) = scored
            .iter()
            .copied()
            .reduce(|best, x| if x.1 > best.1 { x } else { best })
        {
            retained.push(best);
            fail_open = true;
        }
    }
    Ok(SemanticFilterOutcome {
        scored,
        retained,
        fail_open,
    })
}

#[inline]
fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    let mut s: f32 = acc.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        s += d * d;
    }
    s
}

fn exact_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Instance matching distance: the mean, over source cells inside
/// `source_mask`, of the Euclidean distance from the source feature to its
/// nearest neighbor among target cells inside `target_mask`.
///
/// Both maps must be normalized. A missing mask selects every cell.
pub fn imd(
    source: &DenseFeatureMap,
    source_mask: Option<&PixelMask>,
    target: &DenseFeatureMap,
    target_mask: Option<&PixelMask>,
) -> Result<f64> {
    if !source.normalized || !target.normalized {
        return Err(Error::InvalidData("IMD requires normalized feature maps".into()));
    }
    if source.channels != target.channels {
        return Err(Error::DimensionMismatch(format!(
            "source has {} channels, target has {}",
            source.channels, target.channels
        )));
    }
    let src_cells = source.cells_in_mask(source_mask)?;
    let tgt_cells = target.cells_in_mask(target_mask)?;
    if src_cells.is_empty() || tgt_cells.is_empty() {
        return Err(Error::EmptyMask);
    }
    let c = target.channels;
    let packed: Vec<f32> = tgt_cells.iter().flat_map(|&i| target.cell_at(i)).copied().collect();

    let mut total = 0.0f64;
    for &si in &src_cells {
        let q = source.cell_at(si);
        let mut best = (0usize, f32::INFINITY);
        for (ti, t) in packed.chunks_exact(c).enumerate() {
            let d = squared_distance(q, t);
            if d < best.1 {
                best = (ti, d);
            }
        }
        total += exact_distance(q, &packed[best.0 * c..(best.0 + 1) * c]);
    }
    Ok(total / src_cells.len() as f64)
}

pub struct GeometricCandidate<'a> {
    pub entry: &'a AffordanceEntry,
    pub map: &'a DenseFeatureMap,
    pub mask: Option<&'a PixelMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImdScore {
    pub id: String,
    pub imd: f64,
}

/// Index of the candidate with the smallest IMD to the target (ties by entry
/// id), and every candidate's score in input order.
pub fn geometric_retrieve(
    candidates: &[GeometricCandidate<'_>],
    target_map: &DenseFeatureMap,
    target_mask: Option<&PixelMask>,
) -> Result<(usize, Vec<ImdScore>)> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let scores = candidates
        .iter()
        .map(|c| {
            imd(c.map, c.mask, target_map, target_mask).map(|imd| ImdScore {
                id: c.entry.id.clone(),
                imd,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = (0..scores.len())
        .min_by(|&a, &b| {
            scores[a]
                .imd
                .total_cmp(&scores[b].imd)
                .then_with(|| scores[a].id.cmp(&scores[b].id))
        })
        .expect("nonempty");
    Ok((best, scores))
}

/// Source of per-entry dense features and masks.
pub trait AssetSource {
    fn feature_map(&self, entry: &AffordanceEntry) -> Result<DenseFeatureMap>;
    fn mask(&self, entry: &AffordanceEntry) -> Result<Option<PixelMask>>;
}

/// Loads assets from files relative to the memory root.
impl AssetSource for AffordanceMemory {
    fn feature_map(&self, entry: &AffordanceEntry) -> Result<DenseFeatureMap> {
        load_feature_map(self.resolve(&entry.feature_map_path))
    }

    fn mask(&self, entry: &AffordanceEntry) -> Result<Option<PixelMask>> {
        entry
            .mask_path
            .as_ref()
            .map(|p| load_mask(self.resolve(p)))
            .transpose()
    }
}

/// Assets held in memory, keyed by entry id.
#[derive(Debug, Default, Clone)]
pub struct InMemoryAssets {
    pub maps: HashMap<String, DenseFeatureMap>,
    pub masks: HashMap<String, PixelMask>,
}

impl AssetSource for InMemoryAssets {
    fn feature_map(&self, entry: &AffordanceEntry) -> Result<DenseFeatureMap> {
        self.maps
            .get(&entry.id)
            .cloned()
            .ok_or_else(|| Error::MissingAsset(entry.feature_map_path.clone()))
    }

    fn mask(&self, entry: &AffordanceEntry) -> Result<Option<PixelMask>> {
        Ok(self.masks.get(&entry.id).cloned())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTrace {
    pub memory: usize,
    pub task: usize,
    pub semantic: usize,
    pub geometric: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemanticScore {
    pub id: String,
    pub similarity: f64,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalMetadata {
    pub imd_reduction: &'static str,
    pub imd_target_masked: bool,
    pub semantic_threshold: f64,
    pub semantic_fail_open: bool,
    pub imd_tie_break: &'static str,
    pub used_fallback_tasks: bool,
}

/// Outcome of the full retrieval, with per-stage scores for every candidate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub entry_id: String,
    pub task: String,
    pub task_score: f64,
    pub semantic_score: f64,
    pub imd_score: f64,
    pub stage_trace: StageTrace,
    pub tasks: Vec<TaskScore>,
    pub semantic: Vec<SemanticScore>,
    pub geometric: Vec<ImdScore>,
    pub warnings: Vec<String>,
    pub metadata: RetrievalMetadata,
}

fn prepared(map: DenseFeatureMap) -> DenseFeatureMap {
    if map.normalized {
        map
    } else {
        normalize_features(map).0
    }
}

/// Task retrieval, then semantic filtering, then geometric retrieval.
pub fn retrieve(
    query: &RetrievalQuery<'_>,
    memory: &AffordanceMemory,
    assets: &dyn AssetSource,
    params: &RetrievalParams,
) -> Result<RetrievalReport> {
    let mut warnings = Vec::new();
    let ranked = retrieve_task(query.instruction_embedding, memory, params.task_top_k)
        .map_err(|e| e.at(Stage::TaskRetrieval))?;

    let mut used_fallback = false;
    let mut tasks: Vec<TaskScore> = ranked.clone();
    if ranked[0].distance > params.max_task_distance {
        let known: Vec<&String> = query
            .fallback_tasks
            .iter()
            .filter(|t| memory.task_index().contains_key(*t))
            .collect();
        if known.is_empty() {
            warnings.push(format!(
                "instruction is {:.4} from the nearest task '{}' (limit {:.4}); using it anyway",
                ranked[0].distance, ranked[0].task, params.max_task_distance
            ));
        } else {
            used_fallback = true;
            warnings.push(format!(
                "instruction matches no stored task; using fallback tasks {known:?}"
            ));
            let all = retrieve_task(query.instruction_embedding, memory, usize::MAX)
                .map_err(|e| e.at(Stage::TaskRetrieval))?;
            tasks = all.into_iter().filter(|t| known.contains(&&t.task)).collect();
        }
    }

    let task_entries: Vec<&AffordanceEntry> = memory
        .entries()
        .iter()
        .filter(|e| tasks.iter().any(|t| t.task == e.task))
        .collect();

    let filtered = semantic_filter(&task_entries, query, params.semantic_threshold)
        .map_err(|e| e.at(Stage::SemanticFilter))?;
    if filtered.fail_open {
        warnings.push(format!(
            "no demonstration reached similarity {}; kept the best one",
            params.semantic_threshold
        ));
    }

    let geo = (|| -> Result<_> {
        let assets_loaded = filtered
            .retained
            .iter()
            .map(|(e, _)| Ok((prepared(assets.feature_map(e)?), assets.mask(e)?)))
            .collect::<Result<Vec<_>>>()?;
        let candidates: Vec<GeometricCandidate<'_>> = filtered
            .retained
            .iter()
            .zip(&assets_loaded)
            .map(|((entry, _), (map, mask))| GeometricCandidate {
                entry,
                map,
                mask: mask.as_ref(),
            })
            .collect();
        geometric_retrieve(&candidates, query.target_map, query.target_mask)
    })()
    .map_err(|e| e.at(Stage::GeometricRetrieval))?;
    let (best, imd_scores) = geo;

    let (entry, semantic_score) = filtered.retained[best];
    let task_score = tasks
        .iter()
        .find(|t| t.task == entry.task)
        .map(|t| t.distance)
        .unwrap_or(f64::NAN);
    let semantic = filtered
        .scored
        .iter()
        .map(|(e, s)| SemanticScore {
            id: e.id.clone(),
            similarity: *s,
            retained: filtered.retained.iter().any(|(r, _)| r.id == e.id),
        })
        .collect();

    Ok(RetrievalReport {
        entry_id: entry.id.clone(),
        task: entry.task.clone(),
        task_score,
        semantic_score,
        imd_score: imd_scores[best].imd,
        stage_trace: StageTrace {
            memory: memory.len(),
            task: task_entries.len(),
            semantic: filtered.retained.len(),
            geometric: 1,
        },
        tasks,
        semantic,
        geometric: imd_scores,
        warnings,
        metadata: RetrievalMetadata {
            imd_reduction: "mean",
            imd_target_masked: query.target_mask.is_some(),
            semantic_threshold: params.semantic_threshold,
            semantic_fail_open: filtered.fail_open,
            imd_tie_break: "entry id",
            used_fallback_tasks: used_fallback,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::DemoSource;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Point2, Vector2};
    use std::path::PathBuf;

    pub(crate) fn entry(id: &str, task: &str, task_emb: Vec<f32>, img_emb: Vec<f32>) -> AffordanceEntry {
        AffordanceEntry {
            id: id.into(),
            source: DemoSource::Custom,
            image_path: PathBuf::from("img.png"),
            image_size: [8, 8],
            task: task.into(),
            object_name: "drawer".into(),
            waypoints: vec![Point2::new(1.0, 1.0), Point2::new(2.0, 2.0)],
            offset: Vector2::zeros(),
            task_embedding: Embedding::text(task_emb),
            image_embedding: Embedding::image(img_emb),
            feature_map_path: PathBuf::from(format!("{id}.dfm")),
            mask_path: None,
        }
    }

    fn unit_map(vectors: &[[f32; 2]]) -> DenseFeatureMap {
        let data = vectors.iter().flatten().copied().collect();
        normalize_features(DenseFeatureMap::new(1, vectors.len(), 2, 1, vectors.len(), false, data).unwrap()).0
    }

    #[test]
    fn task_retrieval_exact_match_and_empty() {
        let mut m = AffordanceMemory::new(".");
        assert!(matches!(
            retrieve_task(&Embedding::text(vec![1.0]), &m, 1),
            Err(Error::EmptyMemory)
        ));
        m.insert(entry("a", "open drawer", vec![1.0, 0.0], vec![1.0, 0.0])).unwrap();
        m.insert(entry("b", "pick mug", vec![0.0, 1.0], vec![1.0, 0.0])).unwrap();
        let r = retrieve_task(&Embedding::text(vec![0.0, 1.0]), &m, 1).unwrap();
        assert_eq!(r, vec![TaskScore { task: "pick mug".into(), distance: 0.0 }]);
        let r = retrieve_task(&Embedding::text(vec![1.0, 1.0]), &m, 5).unwrap();
        // equidistant: name order
        assert_eq!(r[0].task, "open drawer");
        assert_eq!(r.len(), 2);
    }

    fn query<'a>(
        obj: &'a Embedding,
        img: &'a Embedding,
        map: &'a DenseFeatureMap,
    ) -> RetrievalQuery<'a> {
        RetrievalQuery {
            instruction_embedding: obj,
            object_name_embedding: obj,
            target_image_embedding: img,
            target_map: map,
            target_mask: None,
            fallback_tasks: &[],
        }
    }

    #[test]
    fn semantic_similarity_examples() {
        let map = unit_map(&[[1.0, 0.0]]);
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let (name, target) = (Embedding::text(vec![0.0, 1.0]), Embedding::image(vec![s, s]));
        let q = query(&name, &target, &map);
        let e = entry("a", "t", vec![1.0], vec![1.0, 0.0]);
        assert_eq!(joint_similarity(&e, &q).unwrap(), 0.0);

        let same = Embedding::image(vec![0.3, 0.4]);
        let q = query(&same, &same, &map);
        let e = entry("b", "t", vec![1.0], vec![0.3, 0.4]);
        assert_abs_diff_eq!(joint_similarity(&e, &q).unwrap(), 1.0, epsilon = 1e-12);

        // orthogonal to the target image: filtered at any positive threshold, then fail-open
        let (name, target) = (Embedding::text(vec![1.0, 0.0]), Embedding::image(vec![0.0, 1.0]));
        let q = query(&name, &target, &map);
        let e = entry("c", "t", vec![1.0], vec![1.0, 0.0]);
        let out = semantic_filter(&[&e], &q, 0.01).unwrap();
        assert!(out.fail_open);
        assert_eq!(out.retained.len(), 1);
    }

    #[test]
    fn imd_of_identical_maps_is_zero() {
        let m = unit_map(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]);
        assert_eq!(imd(&m, None, &m, None).unwrap(), 0.0);
    }

    #[test]
    fn imd_chord_length() {
        let src = unit_map(&[[1.0, 0.0]]);
        let thetas = [0.9f64, 0.3, 1.4];
        let tgt = unit_map(&thetas.map(|t| [t.cos() as f32, t.sin() as f32]));
        let expected = 2.0 * (0.3f64 / 2.0).sin();
        assert_abs_diff_eq!(imd(&src, None, &tgt, None).unwrap(), expected, epsilon = 1e-6);
    }

    #[test]
    fn imd_empty_masks() {
        let m = unit_map(&[[1.0, 0.0]]);
        let empty = PixelMask::new(1, 1);
        assert!(matches!(imd(&m, Some(&empty), &m, None), Err(Error::EmptyMask)));
        assert!(matches!(imd(&m, None, &m, Some(&empty)), Err(Error::EmptyMask)));
    }

    #[test]
    fn orthogonal_target_scores_higher() {
        let src = unit_map(&[[1.0, 0.0], [1.0, 0.1]]);
        let orth = unit_map(&[[0.0, 1.0], [0.0, 1.0]]);
        assert!(imd(&src, None, &orth, None).unwrap() > imd(&src, None, &src, None).unwrap());
    }
}
