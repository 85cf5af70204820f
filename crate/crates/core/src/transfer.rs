//! Moves a demonstration's waypoints into the target image by dense feature
//! correspondence and fits the post-contact direction with RANSAC.

use nalgebra::{Point2, UnitVector2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{best_match, sample_feature, DenseFeatureMap, PixelMask};
use crate::memory::AffordanceEntry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferParams {
    pub ransac_iterations: usize,
    /// Point-to-line distance (pixels) within which a waypoint is an inlier.
    pub inlier_tol: f64,
    pub seed: u64,
    /// Mean correspondence score below which the transfer is rejected.
    pub score_floor: f64,
    /// Restrict correspondence search to the target mask when one exists.
    pub masked_search: bool,
}

impl Default for TransferParams {
    fn default() -> Self {
        Self {
            ransac_iterations: 256,
            inlier_tol: 3.0,
            seed: 0,
            score_floor: 0.3,
            masked_search: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedWaypoint {
    pub pixel: Point2<f64>,
    pub score: f64,
}

/// Contact pixel and unit image-plane direction of the post-contact motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affordance2D {
    pub contact: Point2<f64>,
    pub direction: Vector2<f64>,
    pub waypoints: Vec<Point2<f64>>,
    pub scores: Vec<f64>,
    pub inliers: Vec<bool>,
    /// Mean correspondence score over all waypoints.
    pub confidence: f64,
}

impl Affordance2D {
    pub fn direction(&self) -> UnitVector2<f64> {
        UnitVector2::new_normalize(self.direction)
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.first() != Some(&self.contact) {
            return Err(Error::InvalidData("contact must equal the first waypoint".into()));
        }
        if self.scores.len() != self.waypoints.len() || self.inliers.len() != self.waypoints.len() {
            return Err(Error::InvalidData("per-waypoint arrays differ in length".into()));
        }
        if !((self.direction.norm() - 1.0).abs() <= 1e-6) {
            return Err(Error::InvalidData(format!(
                "direction has norm {}, expected 1",
                self.direction.norm()
            )));
        }
        if self.inliers.iter().filter(|&&b| b).count() < 2 {
            return Err(Error::InvalidData("fewer than 2 inliers".into()));
        }
        Ok(())
    }
}

/// Matches every waypoint of `entry` from `source` into `target`, in order.
pub fn transfer_waypoints(
    entry: &AffordanceEntry,
    source: &DenseFeatureMap,
    target: &DenseFeatureMap,
    target_mask: Option<&PixelMask>,
) -> Result<Vec<MatchedWaypoint>> {
    match_points(&entry.waypoints(), source, target, target_mask)
}

pub fn match_points(
    points: &[Point2<f64>],
    source: &DenseFeatureMap,
    target: &DenseFeatureMap,
    target_mask: Option<&PixelMask>,
) -> Result<Vec<MatchedWaypoint>> {
    if !source.normalized {
        return Err(Error::InvalidData("source feature map must be normalized".into()));
    }
    points
        .iter()
        .map(|p| {
            let q = sample_feature(source, p.x, p.y)?;
            let m = best_match(&q, target, target_mask)?;
            Ok(MatchedWaypoint {
                pixel: m.pixel,
                score: m.score,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineFit {
    pub direction: UnitVector2<f64>,
    /// A point on the fitted line (centroid of the inliers).
    pub anchor: Point2<f64>,
    pub inliers: Vec<bool>,
}

const COINCIDENT: f64 = 1e-12;

/// Two-point RANSAC line fit with a least-squares refit on the consensus set.
///
/// Hypotheses are ranked by the truncated quadratic cost
/// `sum(min(r^2, tol^2))` rather than by inlier count alone, so among lines
/// that explain the same points the tighter one wins.
///
/// When there are no more point pairs than `iterations`, every pair is tried
/// in index order instead of sampling. The returned direction points from the
/// earliest inlier toward the latest one.
pub fn ransac_line(points: &[Point2<f64>], iterations: usize, inlier_tol: f64, seed: u64) -> Result<LineFit> {
    let n = points.len();
    if n < 2 {
        return Err(Error::InsufficientPoints(n));
    }

    // truncated quadratic cost of the line through points i and j
    let evaluate = |i: usize, j: usize| -> Option<(f64, Vec<bool>)> {
        let d = points[j] - points[i];
        let len = d.norm();
        if len < COINCIDENT {
            return None;
        }
        let normal = Vector2::new(-d.y, d.x) / len;
        let tol2 = inlier_tol * inlier_tol;
        let mut cost = 0.0;
        let mask = points
            .iter()
            .map(|p| {
                let r2 = (p - points[i]).dot(&normal).powi(2);
                cost += r2.min(tol2);
                r2 <= tol2
            })
            .collect();
        Some((cost, mask))
    };
    let mut best: Option<(f64, Vec<bool>)> = None;
    let consider = |best: &mut Option<(f64, Vec<bool>)>, i: usize, j: usize| {
        if let Some((cost, mask)) = evaluate(i, j) {
            if best.as_ref().map_or(true, |(c, _)| cost < *c) {
                *best = Some((cost, mask));
            }
        }
    };

    let exhaustive = n * (n - 1) / 2 <= iterations;
    if !exhaustive {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..iterations {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            consider(&mut best, i, j);
        }
    }
    if exhaustive || best.is_none() {
        for i in 0..n {
            for j in i + 1..n {
                consider(&mut best, i, j);
            }
        }
    }
    let (_, inliers) = best.ok_or(Error::DegenerateLine)?;

    let members: Vec<Point2<f64>> = points
        .iter()
        .zip(&inliers)
        .filter(|(_, &b)| b)
        .map(|(p, _)| *p)
        .collect();
    let (anchor, axis) = principal_axis(&members);

    let first = inliers.iter().position(|&b| b).expect("pair is in its own consensus");
    let last = inliers.iter().rposition(|&b| b).expect("pair is in its own consensus");
    let span = points[last] - points[first];
    let direction = if axis.dot(&span) < 0.0 { -axis } else { axis };
    Ok(LineFit {
        direction: UnitVector2::new_normalize(direction),
        anchor,
        inliers,
    })
}

/// Centroid and dominant axis of a 2D point set.
fn principal_axis(points: &[Point2<f64>]) -> (Point2<f64>, Vector2<f64>) {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector2::zeros(), |a, p| a + p.coords) / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let d = p.coords - mean;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    (Point2::from(mean), Vector2::new(theta.cos(), theta.sin()))
}

/// Correspondence transfer followed by a RANSAC direction fit. The contact is
/// the first transferred waypoint whether or not RANSAC keeps it.
pub fn transfer_affordance(
    entry: &AffordanceEntry,
    source: &DenseFeatureMap,
    target: &DenseFeatureMap,
    target_mask: Option<&PixelMask>,
    params: &TransferParams,
) -> Result<Affordance2D> {
    let mask = target_mask.filter(|_| params.masked_search);
    let matched = transfer_waypoints(entry, source, target, mask)?;
    affordance_from_matches(&matched, params)
}

pub fn affordance_from_matches(matched: &[MatchedWaypoint], params: &TransferParams) -> Result<Affordance2D> {
    if matched.len() < 2 {
        return Err(Error::InsufficientPoints(matched.len()));
    }
    let confidence = matched.iter().map(|m| m.score).sum::<f64>() / matched.len() as f64;
    if confidence < params.score_floor {
        return Err(Error::LowConfidenceTransfer {
            mean: confidence,
            floor: params.score_floor,
        });
    }
    let pixels: Vec<Point2<f64>> = matched.iter().map(|m| m.pixel).collect();
    let fit = ransac_line(&pixels, params.ransac_iterations, params.inlier_tol, params.seed)?;
    Ok(Affordance2D {
        contact: pixels[0],
        direction: fit.direction.into_inner(),
        waypoints: pixels,
        scores: matched.iter().map(|m| m.score).collect(),
        inliers: fit.inliers,
        confidence,
    })
}
