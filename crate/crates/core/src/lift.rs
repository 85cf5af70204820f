//! Lifts a 2D affordance to a 3D contact point and motion direction, and
//! picks the externally generated grasp nearest the contact.
//!
//! The local surface around the back-projected contact is summarized by
//! clustering its normals; each cluster center (and its negation) is
//! projected into the image and the one best aligned with the 2D direction
//! wins.

use nalgebra::{Point3, UnitVector2, UnitVector3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::geometry::{
    back_project, crop_cloud, depth_to_cloud, estimate_normals, project_direction, BackProjection,
    CameraIntrinsics, DepthImage,
};
use crate::transfer::Affordance2D;

const MAX_LLOYD_ITERATIONS: usize = 100;
const ANGLE_TIE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiftParams {
    /// Radius (meters) of the local crop around the 3D contact.
    pub crop_radius: f64,
    pub k_neighbors: usize,
    pub k_clusters: usize,
    /// 3D step (meters) used to project candidate directions.
    pub delta_proj: f64,
    /// Side length (pixels) of the square window searched for depth when the
    /// contact pixel is a hole.
    pub hole_window: usize,
    pub seed: u64,
}

impl Default for LiftParams {
    fn default() -> Self {
        Self {
            crop_radius: 0.10,
            k_neighbors: 30,
            k_clusters: 4,
            delta_proj: 0.05,
            hole_window: 11,
            seed: 0,
        }
    }
}

impl LiftParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_radius > 0.0 && self.delta_proj > 0.0)
            || self.k_neighbors == 0
            || self.k_clusters == 0
            || self.hole_window == 0
        {
            return Err(Error::InvalidParameter(format!("lift parameters must be positive: {self:?}")));
        }
        Ok(())
    }

    fn hole_radius(&self) -> usize {
        self.hole_window / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalCluster {
    pub center: Vector3<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterDiagnostic {
    pub center: Vector3<f64>,
    pub count: usize,
    /// Smallest image-plane angle (radians) to the 2D direction over both
    /// signs of the center; `None` when both projections are degenerate.
    pub angle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affordance3D {
    pub contact: Point3<f64>,
    pub direction: Vector3<f64>,
    pub clusters: Vec<ClusterDiagnostic>,
    /// `(col, row)` of the pixel whose depth produced the contact.
    pub contact_depth_pixel: (usize, usize),
    pub contact_substituted: bool,
}

pub fn lift_contact(
    a2d: &Affordance2D,
    depth: &DepthImage,
    k: &CameraIntrinsics,
    params: &LiftParams,
) -> Result<BackProjection> {
    depth.check_matches(k)?;
    back_project(a2d.contact.x, a2d.contact.y, depth, k, params.hole_radius())
}

fn lexicographic(a: &Vector3<f64>, b: &Vector3<f64>) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.z.total_cmp(&b.z))
}

/// K-Means (k-means++ seeding, Lloyd iterations) on unit normals.
///
/// Inputs are sorted lexicographically first, so the result depends only on
/// the multiset of normals and the seed. `k` is clamped to the number of
/// distinct normals. Empty clusters are dropped; centers are re-normalized
/// and ordered by descending member count.
pub fn cluster_normals(normals: &[UnitVector3<f64>], k: usize, seed: u64) -> Vec<NormalCluster> {
    let mut pts: Vec<Vector3<f64>> = normals.iter().map(|n| n.into_inner()).collect();
    if pts.is_empty() || k == 0 {
        return Vec::new();
    }
    pts.sort_by(lexicographic);
    let distinct = 1 + pts.windows(2).filter(|w| w[0] != w[1]).count();
    let k = k.min(distinct);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![pts[rng.random_range(0..pts.len())]];
    let mut d2: Vec<f64> = pts.iter().map(|p| (p - centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = pts.len() - 1;
        for (i, w) in d2.iter().enumerate() {
            acc += w;
            if acc > target && *w > 0.0 {
                pick = i;
                break;
            }
        }
        let c = pts[pick];
        centers.push(c);
        for (d, p) in d2.iter_mut().zip(&pts) {
            *d = d.min((p - c).norm_squared());
        }
    }

    let nearest = |p: &Vector3<f64>, centers: &[Vector3<f64>]| -> usize {
        let mut best = (0, f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < best.1 {
                best = (ci, d);
            }
        }
        best.0
    };
    let mut assign: Vec<usize> = pts.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut sums = vec![Vector3::zeros(); centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &a) in pts.iter().zip(&assign) {
            sums[a] += p;
            counts[a] += 1;
        }
        for ((c, s), &n) in centers.iter_mut().zip(&sums).zip(&counts) {
            if n > 0 {
                *c = s / n as f64;
            }
        }
        let next: Vec<usize> = pts.iter().map(|p| nearest(p, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }

    let mut counts = vec![0usize; centers.len()];
    for &a in &assign {
        counts[a] += 1;
    }
    let mut clusters: Vec<NormalCluster> = centers
        .iter()
        .zip(&counts)
        .filter(|(c, &n)| n > 0 && c.norm() > 0.0)
        .map(|(c, &n)| NormalCluster {
            center: c.normalize(),
            count: n,
        })
        .collect();
    clusters.sort_by(|a, b| b.count.cmp(&a.count));
    clusters
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionChoice {
    pub direction: UnitVector3<f64>,
    pub cluster: usize,
    pub negated: bool,
    pub angle: f64,
    pub diagnostics: Vec<ClusterDiagnostic>,
}

/// Chooses the signed cluster center whose image projection at `contact`
/// makes the smallest angle with `tau2d`. Ties go to the larger cluster, then
/// to the earlier one. Degenerate projections are skipped.
pub fn select_direction(
    clusters: &[NormalCluster],
    tau2d: &UnitVector2<f64>,
    contact: &Point3<f64>,
    k: &CameraIntrinsics,
    delta: f64,
) -> Result<DirectionChoice> {
    let mut best: Option<(usize, bool, f64)> = None;
    let mut diagnostics = Vec::with_capacity(clusters.len());
    for (ci, cluster) in clusters.iter().enumerate() {
        let mut cluster_angle: Option<f64> = None;
        for negated in [false, true] {
            let v = if negated { -cluster.center } else { cluster.center };
            let Ok(proj) = project_direction(contact, &UnitVector3::new_normalize(v), k, delta) else {
                continue;
            };
            let angle = proj.dot(tau2d).clamp(-1.0, 1.0).acos();
            cluster_angle = Some(cluster_angle.map_or(angle, |a: f64| a.min(angle)));
            let better = match best {
                None => true,
                Some((bi, _, ba)) => {
                    angle < ba - ANGLE_TIE
                        || ((angle - ba).abs() <= ANGLE_TIE && cluster.count > clusters[bi].count)
                }
            };
            if better {
                best = Some((ci, negated, angle));
            }
        }
        diagnostics.push(ClusterDiagnostic {
            center: cluster.center,
            count: cluster.count,
            angle: cluster_angle,
        });
    }
    let (ci, negated, angle) = best.ok_or(Error::AmbiguousDirection)?;
    let c = clusters[ci].center;
    Ok(DirectionChoice {
        direction: UnitVector3::new_normalize(if negated { -c } else { c }),
        cluster: ci,
        negated,
        angle,
        diagnostics,
    })
}

/// Back-projection, local crop, normal estimation, clustering, and direction
/// selection.
pub fn lift_affordance(
    a2d: &Affordance2D,
    depth: &DepthImage,
    k: &CameraIntrinsics,
    params: &LiftParams,
) -> Result<Affordance3D> {
    params.validate()?;
    let contact = lift_contact(a2d, depth, k, params).map_err(|e| e.at(Stage::LiftContact))?;
    let cloud = depth_to_cloud(depth, k, None).map_err(|e| e.at(Stage::DepthToCloud))?;
    let local = crop_cloud(&cloud, &contact.point, params.crop_radius).map_err(|e| e.at(Stage::Crop))?;
    let normals = estimate_normals(&local, params.k_neighbors, &Point3::origin())
        .map_err(|e| e.at(Stage::Normals))?;
    let clusters = cluster_normals(&normals, params.k_clusters, params.seed);
    let choice = select_direction(&clusters, &a2d.direction(), &contact.point, k, params.delta_proj)
        .map_err(|e| e.at(Stage::DirectionSelection))?;
    Ok(Affordance3D {
        contact: contact.point,
        direction: choice.direction.into_inner(),
        clusters: choice.diagnostics,
        contact_depth_pixel: contact.depth_pixel,
        contact_substituted: contact.substituted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspCandidate {
    pub position: Point3<f64>,
    /// Unit quaternion `[w, x, y, z]`.
    pub quaternion: [f64; 4],
    pub score: f64,
}

impl GraspCandidate {
    pub fn validate(&self) -> Result<()> {
        let n = self.quaternion.iter().map(|q| q * q).sum::<f64>().sqrt();
        if !((n - 1.0).abs() <= 1e-6) {
            return Err(Error::InvalidData(format!("grasp quaternion has norm {n}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GraspChoice {
    pub index: usize,
    pub grasp: GraspCandidate,
    pub distance: f64,
}

/// The candidate closest to `contact`; ties go to the higher score, then the
/// earlier candidate.
pub fn select_grasp(candidates: &[GraspCandidate], contact: &Point3<f64>) -> Result<GraspChoice> {
    let mut best: Option<GraspChoice> = None;
    for (index, g) in candidates.iter().enumerate() {
        let distance = (g.position - contact).norm();
        let better = best.map_or(true, |b| {
            distance < b.distance || (distance == b.distance && g.score > b.grasp.score)
        });
        if better {
            best = Some(GraspChoice {
                index,
                grasp: *g,
                distance,
            });
        }
    }
    best.ok_or(Error::NoGraspCandidates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Point2, Vector2};

    #[test]
    fn identical_normals_collapse() {
        let n = UnitVector3::new_normalize(Vector3::new(0.2, -0.3, -0.9));
        let c = cluster_normals(&vec![n; 17], 4, 7);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].count, 17);
        assert_abs_diff_eq!(c[0].center, n.into_inner(), epsilon = 1e-12);
    }

    #[test]
    fn k_is_clamped_to_distinct_normals() {
        let ns: Vec<_> = [Vector3::x(), Vector3::y(), Vector3::z()]
            .iter()
            .cycle()
            .take(12)
            .map(|v| UnitVector3::new_normalize(*v))
            .collect();
        let c = cluster_normals(&ns, 10, 1);
        assert!(c.len() <= 3);
        assert_eq!(c.iter().map(|c| c.count).sum::<usize>(), 12);
    }

    #[test]
    fn grasp_selection() {
        let g = |x: f64, score: f64| GraspCandidate {
            position: Point3::new(x, 0.0, 1.0),
            quaternion: [1.0, 0.0, 0.0, 0.0],
            score,
        };
        let c = Point3::new(0.0, 0.0, 1.0);
        assert!(matches!(select_grasp(&[], &c), Err(Error::NoGraspCandidates)));
        let pick = select_grasp(&[g(0.3, 1.0), g(0.0, 0.1), g(0.1, 0.9)], &c).unwrap();
        assert_eq!(pick.index, 1);
        assert_eq!(pick.distance, 0.0);
        // equal distance: higher score, then earlier
        let pick = select_grasp(&[g(0.1, 0.2), g(-0.1, 0.5), g(0.1, 0.5)], &c).unwrap();
        assert_eq!(pick.index, 1);
    }

    #[test]
    fn direction_parallel_to_optical_axis_is_ambiguous() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let clusters = [NormalCluster { center: Vector3::new(0.0, 0.0, -1.0), count: 5 }];
        let tau = UnitVector2::new_normalize(Vector2::new(0.3, 0.7));
        assert!(matches!(
            select_direction(&clusters, &tau, &Point3::new(0.0, 0.0, 1.0), &k, 0.05),
            Err(Error::AmbiguousDirection)
        ));
    }

    #[test]
    fn exact_alignment_wins() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let clusters = [
            NormalCluster { center: Vector3::new(0.0, 1.0, 0.0), count: 9 },
            NormalCluster { center: Vector3::new(1.0, 0.0, 0.0), count: 3 },
        ];
        let tau = UnitVector2::new_normalize(Vector2::new(1.0, 0.0));
        let pick = select_direction(&clusters, &tau, &Point3::new(0.0, 0.0, 1.0), &k, 0.05).unwrap();
        assert_eq!(pick.cluster, 1);
        assert!(!pick.negated);
        assert_abs_diff_eq!(pick.angle, 0.0, epsilon = 1e-12);
        let tau = UnitVector2::new_normalize(Vector2::new(0.0, -1.0));
        let pick = select_direction(&clusters, &tau, &Point3::new(0.0, 0.0, 1.0), &k, 0.05).unwrap();
        assert_eq!((pick.cluster, pick.negated), (0, true));
    }

    #[test]
    fn lift_on_fully_invalid_depth() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let a2d = Affordance2D {
            contact: Point2::new(50.0, 50.0),
            direction: Vector2::new(1.0, 0.0),
            waypoints: vec![Point2::new(50.0, 50.0), Point2::new(52.0, 50.0)],
            scores: vec![1.0, 1.0],
            inliers: vec![true, true],
            confidence: 1.0,
        };
        let err = lift_affordance(&a2d, &DepthImage::filled(100, 100, 0.0), &k, &LiftParams::default())
            .unwrap_err();
        assert_eq!(err.stage(), Some(Stage::LiftContact));
        assert!(matches!(err.root(), Error::NoValidDepth { .. }));
    }
}
