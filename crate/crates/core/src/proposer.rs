//! Pose-proposal sources standing in for a learned estimator.
//!
//! [`OracleProposer`] perturbs ground truth with an [`ErrorModel`] that carries a
//! fixed systematic bias. [`KeypointProposer`] simulates keypoint matches and
//! solves them with RANSAC.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{random_perturbation, ObjectModel, PointCloud, Pose, Vec3};
use crate::learner::Calibration;
use crate::solver::{ransac_pose, Correspondence};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProposerError {
    #[error("scene has no objects")]
    EmptyScene,
    #[error("model has {0} keypoints, need at least 3")]
    TooFewKeypoints(usize),
    #[error("keypoint matches did not yield a pose")]
    NoSolution,
}

/// Proposal noise. The bias is applied on the object side, `truth · bias · noise`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErrorModel {
    pub sigma_t: f64,
    pub sigma_r: f64,
    pub p_flip: f64,
    pub p_gross: f64,
    pub bias_translation_mm: [f64; 3],
    /// Rotation vector of the bias, in degrees.
    pub bias_rotation_deg: [f64; 3],
}

impl Default for ErrorModel {
    fn default() -> Self {
        Self {
            sigma_t: 1.0,
            sigma_r: 2.0,
            p_flip: 0.1,
            p_gross: 0.1,
            // 4 mm and 8°, neither along nor across the cylinder axis.
            bias_translation_mm: [2.0, 0.0, 3.464101615],
            bias_rotation_deg: [5.656854249, 0.0, 5.656854249],
        }
    }
}

impl ErrorModel {
    pub fn zero() -> Self {
        Self {
            sigma_t: 0.0,
            sigma_r: 0.0,
            p_flip: 0.0,
            p_gross: 0.0,
            bias_translation_mm: [0.0; 3],
            bias_rotation_deg: [0.0; 3],
        }
    }

    pub fn with_bias(mut self, bias: &Pose) -> Self {
        let rv = nalgebra::Rotation3::from_matrix_unchecked(*bias.rotation()).scaled_axis();
        let t = bias.translation();
        self.bias_translation_mm = [t.x, t.y, t.z];
        self.bias_rotation_deg = [rv.x.to_degrees(), rv.y.to_degrees(), rv.z.to_degrees()];
        self
    }

    pub fn bias(&self) -> Pose {
        let [rx, ry, rz] = self.bias_rotation_deg;
        let [tx, ty, tz] = self.bias_translation_mm;
        Pose::from_rotation_vector_deg(&Vec3::new(rx, ry, rz), Vec3::new(tx, ty, tz))
    }

    pub fn invalid_field(&self) -> Option<&'static str> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let sigma = |s: f64| s.is_finite() && s >= 0.0;
        if !sigma(self.sigma_t) {
            Some("sigma_t")
        } else if !sigma(self.sigma_r) {
            Some("sigma_r")
        } else if !prob(self.p_flip) {
            Some("p_flip")
        } else if !prob(self.p_gross) || self.p_flip + self.p_gross > 1.0 {
            Some("p_gross")
        } else if !self.bias_translation_mm.iter().all(|v| v.is_finite()) {
            Some("bias_translation_mm")
        } else if !self.bias_rotation_deg.iter().all(|v| v.is_finite()) {
            Some("bias_rotation_deg")
        } else {
            None
        }
    }
}

/// Axis-aligned box that gross errors are drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinVolume {
    pub min: Vec3,
    pub max: Vec3,
}

impl BinVolume {
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        Vec3::new(
            uniform(rng, self.min.x, self.max.x),
            uniform(rng, self.min.y, self.max.y),
            uniform(rng, self.min.z, self.max.z),
        )
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo { rng.random_range(lo..hi) } else { lo }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub pose: Pose,
    /// Ground-truth object the proposal was derived from. Evaluation only.
    pub target_object_id: Option<u32>,
    pub inlier_count: usize,
}

/// One pose hypothesis per call. The scene cloud is the observation; truth is
/// whatever the implementation was constructed with.
pub trait Proposer {
    fn propose(&self, scene: &PointCloud, rng: &mut ChaCha8Rng) -> Result<Proposal, ProposerError>;
}

pub fn oracle_propose<R: Rng + ?Sized>(
    scene_truth: &[(u32, Pose)],
    em: &ErrorModel,
    volume: &BinVolume,
    rng: &mut R,
) -> Result<Proposal, ProposerError> {
    if scene_truth.is_empty() {
        return Err(ProposerError::EmptyScene);
    }
    let (id, truth) = scene_truth[rng.random_range(0..scene_truth.len())];
    let u: f64 = rng.random();
    let pose = if u < em.p_gross {
        Pose::random_rotation(rng).with_translation(volume.sample_point(rng))
    } else {
        let noise = random_perturbation(em.sigma_t, em.sigma_r, rng);
        let p = truth.compose(&em.bias()).compose(&noise);
        if u < em.p_gross + em.p_flip { p.flip_y() } else { p }
    };
    Ok(Proposal { pose, target_object_id: Some(id), inlier_count: 0 })
}

#[derive(Debug, Clone)]
pub struct OracleProposer {
    pub truth: Vec<(u32, Pose)>,
    pub error_model: ErrorModel,
    pub volume: BinVolume,
}

impl Proposer for OracleProposer {
    fn propose(&self, _scene: &PointCloud, rng: &mut ChaCha8Rng) -> Result<Proposal, ProposerError> {
        oracle_propose(&self.truth, &self.error_model, &self.volume, rng)
    }
}

/// Correspondences from model keypoints to their true scene positions plus
/// Gaussian noise. `round(outlier_rate · k)` of them get a random scene point,
/// or a random point in `volume` when the scene is empty.
pub fn keypoint_propose<R: Rng + ?Sized>(
    scene_truth: &[(u32, Pose)],
    model: &ObjectModel,
    scene: &PointCloud,
    volume: &BinVolume,
    kp_noise_mm: f64,
    outlier_rate: f64,
    rng: &mut R,
) -> Result<(u32, Vec<Correspondence>), ProposerError> {
    if scene_truth.is_empty() {
        return Err(ProposerError::EmptyScene);
    }
    let kps = model.keypoints();
    if kps.len() < 3 {
        return Err(ProposerError::TooFewKeypoints(kps.len()));
    }
    let (id, truth) = scene_truth[rng.random_range(0..scene_truth.len())];
    let normal = rand_distr::Normal::new(0.0, kp_noise_mm.max(0.0)).expect("finite sigma");
    let mut corrs: Vec<Correspondence> = kps
        .iter()
        .map(|k| {
            let n = Vec3::new(rng.sample(normal), rng.sample(normal), rng.sample(normal));
            Correspondence { model_point: *k, scene_point: truth.transform_point(k) + n }
        })
        .collect();
    let n_out = ((outlier_rate.clamp(0.0, 1.0) * kps.len() as f64).round() as usize).min(kps.len());
    for i in sample_indices(rng, kps.len(), n_out) {
        corrs[i].scene_point = if scene.is_empty() {
            volume.sample_point(rng)
        } else {
            scene.points[rng.random_range(0..scene.len())]
        };
    }
    Ok((id, corrs))
}

#[derive(Debug, Clone)]
pub struct KeypointProposer {
    pub truth: Vec<(u32, Pose)>,
    pub model: ObjectModel,
    pub volume: BinVolume,
    pub kp_noise_mm: f64,
    pub outlier_rate: f64,
    pub ransac_iterations: usize,
    pub inlier_mm: f64,
}

impl Proposer for KeypointProposer {
    fn propose(&self, scene: &PointCloud, rng: &mut ChaCha8Rng) -> Result<Proposal, ProposerError> {
        let (id, corrs) =
            keypoint_propose(&self.truth, &self.model, scene, &self.volume, self.kp_noise_mm, self.outlier_rate, rng)?;
        let seed: u64 = rng.random();
        let h = ransac_pose(&corrs, self.ransac_iterations, self.inlier_mm, seed).map_err(|_| ProposerError::NoSolution)?;
        Ok(Proposal { pose: h.pose, target_object_id: Some(id), inlier_count: h.inlier_count })
    }
}

/// Removes the estimated bias from a proposal: `pose · bias_estimate⁻¹`.
pub fn apply_calibration(p: &Proposal, cal: &Calibration) -> Proposal {
    Proposal { pose: p.pose.compose(&cal.bias_estimate.inverse()), ..*p }
}
