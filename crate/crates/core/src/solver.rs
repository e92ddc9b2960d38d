//! Rigid registration and hypothesis handling: Kabsch alignment, RANSAC over
//! correspondences, depth-check validation and non-maximum suppression.

use nalgebra::Matrix3;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{ObjectModel, PointCloud, Pose, Vec3};
use crate::metrics::e_adi_below;
use crate::proposer::{Proposal, Proposer};
use crate::spatial::KdTree;

/// Ratio of the second to the largest singular value of the centred model
/// points below which the configuration counts as collinear.
const DEGENERATE_RATIO: f64 = 1e-9;

/// Weight of the inlier count in the score. Far below the smallest overlap step
/// `1 / n_points`, so inliers only break ties.
const INLIER_WEIGHT: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolverError {
    #[error("need at least 3 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("model points are collinear or coincident")]
    Degenerate,
    #[error("no pose reached 3 inliers")]
    NoConsensus,
    #[error("correspondence coordinates must be finite")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub model_point: Vec3,
    pub scene_point: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseHypothesis {
    pub pose: Pose,
    pub inlier_count: usize,
    pub depth_overlap: f64,
    pub score: f64,
    /// Position of the originating proposal within its batch.
    pub proposal_index: usize,
}

impl PoseHypothesis {
    pub fn new(pose: Pose, inlier_count: usize, depth_overlap: f64, proposal_index: usize) -> Self {
        Self { pose, inlier_count, depth_overlap, score: score(depth_overlap, inlier_count), proposal_index }
    }
}

/// Ranking score: depth overlap first, inlier count as tie-breaker.
pub fn score(depth_overlap: f64, inlier_count: usize) -> f64 {
    depth_overlap + INLIER_WEIGHT * inlier_count as f64
}

/// Least-squares rigid transform taking model points onto scene points.
pub fn kabsch(corrs: &[Correspondence]) -> Result<Pose, SolverError> {
    if corrs.len() < 3 {
        return Err(SolverError::TooFewCorrespondences(corrs.len()));
    }
    if !corrs.iter().all(|c| c.model_point.iter().chain(c.scene_point.iter()).all(|v| v.is_finite())) {
        return Err(SolverError::NonFinite);
    }
    let n = corrs.len() as f64;
    let cm = corrs.iter().fold(Vec3::zeros(), |a, c| a + c.model_point) / n;
    let cs = corrs.iter().fold(Vec3::zeros(), |a, c| a + c.scene_point) / n;
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for c in corrs {
        let m = c.model_point - cm;
        h += m * (c.scene_point - cs).transpose();
        spread += m * m.transpose();
    }
    let sv = spread.symmetric_eigenvalues();
    let (lo, hi) = sorted_pair(&sv);
    if hi <= 0.0 || lo <= DEGENERATE_RATIO * DEGENERATE_RATIO * hi {
        return Err(SolverError::Degenerate);
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    Pose::new(r, cs - r * cm).ok_or(SolverError::Degenerate)
}

/// Middle and largest eigenvalues of the model scatter.
fn sorted_pair(ev: &Vec3) -> (f64, f64) {
    let mut v = [ev.x, ev.y, ev.z];
    v.sort_by(f64::total_cmp);
    (v[1], v[2])
}

fn inliers(pose: &Pose, corrs: &[Correspondence], inlier_mm: f64) -> Vec<usize> {
    let r2 = inlier_mm * inlier_mm;
    corrs
        .iter()
        .enumerate()
        .filter(|(_, c)| (pose.transform_point(&c.model_point) - c.scene_point).norm_squared() <= r2)
        .map(|(i, _)| i)
        .collect()
}

/// Minimal-sample RANSAC followed by a Kabsch refit on the best consensus set.
pub fn ransac_pose(corrs: &[Correspondence], iterations: usize, inlier_mm: f64, seed: u64) -> Result<PoseHypothesis, SolverError> {
    if corrs.len() < 3 {
        return Err(SolverError::TooFewCorrespondences(corrs.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..iterations {
        let idx = sample_indices(&mut rng, corrs.len(), 3);
        let sample = [corrs[idx.index(0)], corrs[idx.index(1)], corrs[idx.index(2)]];
        let Ok(pose) = kabsch(&sample) else { continue };
        let set = inliers(&pose, corrs, inlier_mm);
        if set.len() > best.len() {
            best = set;
            if best.len() == corrs.len() {
                break;
            }
        }
    }
    if best.len() < 3 {
        return Err(SolverError::NoConsensus);
    }
    let subset: Vec<Correspondence> = best.iter().map(|&i| corrs[i]).collect();
    let pose = kabsch(&subset)?;
    let count = inliers(&pose, corrs, inlier_mm).len();
    if count < 3 {
        return Err(SolverError::NoConsensus);
    }
    Ok(PoseHypothesis::new(pose, count, 0.0, 0))
}

/// Fraction of posed model points that have a scene point within `tau_mm`.
/// The whole model is used; self-occlusion is not modelled.
pub fn depth_check(pose: &Pose, model: &ObjectModel, scene: &PointCloud, tau_mm: f64) -> f64 {
    match KdTree::build(&scene.points) {
        Some(tree) => depth_check_indexed(pose, model, &tree, tau_mm),
        None => 0.0,
    }
}

pub fn depth_check_indexed(pose: &Pose, model: &ObjectModel, scene: &KdTree, tau_mm: f64) -> f64 {
    let hits = model.points().iter().filter(|p| scene.any_within(&pose.transform_point(p), tau_mm)).count();
    hits as f64 / model.points().len() as f64
}

/// Like [`depth_check_indexed`] but gives up once `min_overlap` is out of reach.
pub fn depth_check_at_least(pose: &Pose, model: &ObjectModel, scene: &KdTree, tau_mm: f64, min_overlap: f64) -> Option<f64> {
    let pts = model.points();
    let n = pts.len();
    let needed = (min_overlap * n as f64).ceil() as usize;
    let mut hits = 0usize;
    for (i, p) in pts.iter().enumerate() {
        if hits + (n - i) < needed {
            return None;
        }
        if scene.any_within(&pose.transform_point(p), tau_mm) {
            hits += 1;
        }
    }
    let overlap = hits as f64 / n as f64;
    (overlap >= min_overlap).then_some(overlap)
}

/// Greedy suppression in descending score order. A hypothesis is dropped when
/// its `e_adi` to an already kept one is below `radius_mm`.
pub fn nms(hypotheses: &[PoseHypothesis], model: &ObjectModel, radius_mm: f64) -> Vec<PoseHypothesis> {
    let mut order: Vec<usize> = (0..hypotheses.len()).collect();
    // Stable on ties, so equal scores keep input order.
    order.sort_by(|&a, &b| hypotheses[b].score.total_cmp(&hypotheses[a].score));
    let mut kept: Vec<PoseHypothesis> = Vec::new();
    for i in order {
        let h = hypotheses[i];
        if kept.iter().all(|k| e_adi_below(model, &h.pose, &k.pose, radius_mm).is_none()) {
            kept.push(h);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverParams {
    pub tau_mm: f64,
    pub min_overlap: f64,
    pub nms_radius_mm: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self { tau_mm: 3.0, min_overlap: 0.6, nms_radius_mm: 10.0 }
    }
}

impl SolverParams {
    pub fn invalid_field(&self) -> Option<&'static str> {
        if !(self.tau_mm.is_finite() && self.tau_mm > 0.0) {
            Some("tau_mm")
        } else if !(0.0..=1.0).contains(&self.min_overlap) {
            Some("min_overlap")
        } else if !(self.nms_radius_mm.is_finite() && self.nms_radius_mm >= 0.0) {
            Some("nms_radius_mm")
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BatchResult {
    /// Every proposal in generation order; `None` where the proposer failed.
    pub proposals: Vec<Option<Proposal>>,
    /// Survivors of the depth check and NMS, best first.
    pub hypotheses: Vec<PoseHypothesis>,
}

/// Draws `k` proposals, proposal `i` from a generator seeded with `seed + i`,
/// keeps those passing the depth check, then suppresses duplicates.
pub fn estimate_batch(
    scene: &PointCloud,
    model: &ObjectModel,
    proposer: &dyn Proposer,
    k: usize,
    params: &SolverParams,
    seed: u64,
) -> BatchResult {
    let tree = KdTree::build(&scene.points);
    let mut proposals = Vec::with_capacity(k);
    let mut passed = Vec::new();
    for i in 0..k {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let p = proposer.propose(scene, &mut rng).ok();
        proposals.push(p);
        let (Some(p), Some(tree)) = (p, tree.as_ref()) else { continue };
        if let Some(overlap) = depth_check_at_least(&p.pose, model, tree, params.tau_mm, params.min_overlap) {
            passed.push(PoseHypothesis::new(p.pose, p.inlier_count, overlap, i));
        }
    }
    let hypotheses = nms(&passed, model, params.nms_radius_mm);
    BatchResult { proposals, hypotheses }
}
