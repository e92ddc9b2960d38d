//! Bias calibration fitted from verified samples, the training-mix policies,
//! and recall evaluation on fresh simulated scenes.

use nalgebra::{Matrix4, Quaternion, SymmetricEigen, UnitQuaternion, Vector4};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Targets;
use crate::geometry::{farthest_point_sampling, rotation_geodesic, ObjectModel, Pose, Vec3};
use crate::labeling::label_task;
use crate::metrics::{e_theta, verify, VerificationThresholds};
use crate::proposer::{apply_calibration, oracle_propose, ErrorModel};
use crate::sim::{spawn_scene, BinGeometry, SimError};
use crate::store::{Body, EpisodeStore, StoreError};

/// Learner state: the estimated systematic offset of the proposer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub bias_estimate: Pose,
    pub n_samples: usize,
    pub residual_rms_t: f64,
    pub residual_rms_r: f64,
}

impl Calibration {
    pub fn identity() -> Self {
        Self { bias_estimate: Pose::identity(), n_samples: 0, residual_rms_t: 0.0, residual_rms_r: 0.0 }
    }
}

impl Default for Calibration {
    fn default() -> Self {
        Self::identity()
    }
}

/// Rotation minimising the summed squared chordal distance to `rotations`.
///
/// Computed as the dominant eigenvector of `Σ q qᵀ`, which is indifferent to
/// the sign of each quaternion.
pub fn chordal_mean(rotations: &[Pose]) -> Pose {
    if rotations.is_empty() {
        return Pose::identity();
    }
    let mut acc = Matrix4::<f64>::zeros();
    for r in rotations {
        let q = UnitQuaternion::from_matrix(r.rotation());
        let v: Vector4<f64> = q.into_inner().coords;
        acc += v * v.transpose();
    }
    let eig = SymmetricEigen::new(acc);
    let (imax, _) = eig.eigenvalues.argmax();
    let v = eig.eigenvectors.column(imax);
    let q = UnitQuaternion::from_quaternion(Quaternion::new(v[3], v[0], v[1], v[2]));
    Pose::from_rotation(q.to_rotation_matrix())
}

/// Averages the per-pair error transforms `true⁻¹ · proposed`: translation by
/// arithmetic mean, rotation by chordal mean.
pub fn fit_calibration(pairs: &[(Pose, Pose)]) -> Calibration {
    if pairs.is_empty() {
        return Calibration::identity();
    }
    let errors: Vec<Pose> = pairs.iter().map(|(proposed, truth)| truth.inverse().compose(proposed)).collect();
    let n = errors.len() as f64;
    let t = errors.iter().fold(Vec3::zeros(), |a, e| a + e.translation()) / n;
    let r = chordal_mean(&errors);
    let bias = r.with_translation(t);
    let rms_t = (errors.iter().map(|e| (e.translation() - t).norm_squared()).sum::<f64>() / n).sqrt();
    let rms_r = (errors.iter().map(|e| rotation_geodesic(e, &r).powi(2)).sum::<f64>() / n).sqrt();
    Calibration { bias_estimate: bias, n_samples: pairs.len(), residual_rms_t: rms_t, residual_rms_r: rms_r }
}

/// Composition of one training epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpochPlan {
    pub real_count: usize,
    pub base_count: usize,
    pub random_keypoint_fraction: f64,
    pub keypoint_count: usize,
}

impl Default for EpochPlan {
    fn default() -> Self {
        Self { real_count: 1000, base_count: 1000, random_keypoint_fraction: 0.4, keypoint_count: 8 }
    }
}

impl EpochPlan {
    pub fn total(&self) -> usize {
        self.real_count + self.base_count
    }
}

/// One epoch of `plan.total()` draws with replacement. Each draw comes from
/// `real` with probability `real_count / total`, and always from `base` when
/// `real` is empty.
pub fn epoch_sampler<T: Clone, R: Rng + ?Sized>(real: &[T], base: &[T], plan: &EpochPlan, rng: &mut R) -> Vec<T> {
    assert!(!base.is_empty(), "base set must be non-empty");
    let total = plan.total();
    let p_real = if real.is_empty() || total == 0 { 0.0 } else { plan.real_count as f64 / total as f64 };
    (0..total)
        .map(|_| {
            if rng.random_bool(p_real) {
                real[rng.random_range(0..real.len())].clone()
            } else {
                base[rng.random_range(0..base.len())].clone()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointDraw {
    pub keypoints: Vec<Vec3>,
    pub randomized: bool,
}

/// With probability `plan.random_keypoint_fraction`, distinct uniformly random
/// surface points; otherwise the farthest-point-sampled set.
pub fn keypoint_sampler<R: Rng + ?Sized>(model: &ObjectModel, rng: &mut R, plan: &EpochPlan) -> KeypointDraw {
    let pts = model.points();
    let k = plan.keypoint_count.min(pts.len());
    if rng.random_bool(plan.random_keypoint_fraction.clamp(0.0, 1.0)) {
        let keypoints = sample_indices(rng, pts.len(), k).into_iter().map(|i| pts[i]).collect();
        KeypointDraw { keypoints, randomized: true }
    } else {
        let keypoints = if k == model.keypoints().len() { model.keypoints().to_vec() } else { farthest_point_sampling(pts, k) };
        KeypointDraw { keypoints, randomized: false }
    }
}

/// Seed for evaluation episode `i` of a run seeded with `seed`.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(i as u64);
    r.random()
}

/// Search window around a verified pose for proposals on the same cloud.
pub const PAIR_WINDOW_MM: f64 = 15.0;
pub const PAIR_WINDOW_DEG: f64 = 30.0;

/// Verified object pose in the camera frame, `E · g · M`, from the grasped
/// estimate `E`, the grasp `g` and the measured in-hand pose `M`. Its spin
/// about the object axis is arbitrary.
pub fn verified_bin_pose(estimate: &Pose, grasp: &Pose, measured_inhand: &Pose) -> Pose {
    estimate.compose(grasp).compose(measured_inhand)
}

/// `truth` turned about its own axis to best match `proposed`, so the pair
/// error carries no unobservable spin.
pub fn align_spin(truth: &Pose, proposed: &Pose) -> Pose {
    let r = truth.rotation().transpose() * proposed.rotation();
    let phi = (r[(1, 0)] - r[(0, 1)]).atan2(r[(0, 0)] + r[(1, 1)]);
    truth.compose(&Pose::rot_z(phi.to_degrees()))
}

/// One accepted training sample's contribution to calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePairs {
    pub inhand_id: u64,
    /// `(proposed, verified)` pairs.
    pub pairs: Vec<(Pose, Pose)>,
}

/// Calibration pairs from the accepted training-split episodes of `task_id`,
/// in episode order.
///
/// Each accepted episode yields a verified pose; every other proposal on the
/// same cloud inside the search window pairs with it. An end-for-end flip is
/// applied after the bias, so a flipped proposal is flipped back before
/// pairing; pairing it against a flipped truth would conjugate the bias. The
/// grasped estimate is
/// left out: it was chosen because it passed the checks, so its error is
/// biased toward zero.
pub fn training_pairs(
    store: &EpisodeStore,
    task_id: u64,
    model: &ObjectModel,
    thresholds: &VerificationThresholds,
    targets: &Targets,
) -> Result<Vec<SamplePairs>, StoreError> {
    let decisions = label_task(store, task_id, model, thresholds)?;
    let mut out = Vec::new();
    for (j, d) in decisions.iter().filter(|d| d.accepted()).enumerate() {
        if targets.is_test(j) {
            continue;
        }
        let lin = store.lineage(d.episode_id)?;
        let (Body::InHand { measured_pose, .. }, Body::Grasp { grasp_in_object_frame, .. }, Body::PoseEst { pose, .. }) =
            (&lin.inhand.body, &lin.grasp.body, &lin.pose_est.body)
        else {
            unreachable!("lineage levels are checked by the store")
        };
        let verified = verified_bin_pose(&pose.to_pose(), &grasp_in_object_frame.to_pose(), &measured_pose.to_pose());
        let mut pairs = Vec::new();
        for rec in store.children(lin.cloud.id)? {
            let Body::PoseEst { pose, .. } = &rec.body else { continue };
            if rec.id == lin.pose_est.id {
                continue;
            }
            let proposed = pose.to_pose();
            let proposed = if e_theta(&verified, &proposed) > 90.0 { proposed.flip_y() } else { proposed };
            let truth = align_spin(&verified, &proposed);
            if (proposed.translation() - truth.translation()).norm() <= PAIR_WINDOW_MM
                && rotation_geodesic(&proposed, &truth) <= PAIR_WINDOW_DEG
            {
                pairs.push((proposed, truth));
            }
        }
        out.push(SamplePairs { inhand_id: d.episode_id, pairs });
    }
    Ok(out)
}

/// Calibration from the first `n` samples.
pub fn fit_from_samples(samples: &[SamplePairs], n: usize) -> Calibration {
    let pairs: Vec<(Pose, Pose)> = samples.iter().take(n).flat_map(|s| s.pairs.iter().copied()).collect();
    let mut cal = fit_calibration(&pairs);
    cal.n_samples = n.min(samples.len());
    cal
}

/// Fraction of `test_episodes` fresh single-object scenes in which one
/// calibrated proposal verifies against the true pose. Episode `i` draws from
/// `episode_seed(seed, i)` only.
pub fn evaluate_recall(
    error_model: &ErrorModel,
    calibration: &Calibration,
    model: &ObjectModel,
    bin: &BinGeometry,
    test_episodes: usize,
    thresholds: &VerificationThresholds,
    seed: u64,
) -> Result<f64, SimError> {
    assert!(test_episodes >= 1, "at least one test episode");
    let volume = bin.volume(model);
    let mut hits = 0usize;
    for i in 0..test_episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, i));
        let scene = spawn_scene(1, model, bin, &mut rng)?;
        let p = oracle_propose(&scene.objects, error_model, &volume, &mut rng).expect("scene has one object");
        let p = apply_calibration(&p, calibration);
        hits += verify(model, &p.pose, &scene.objects[0].1, thresholds).is_tp as usize;
    }
    Ok(hits as f64 / test_episodes as f64)
}

/// Fig.-7-style sample counts.
pub const DEFAULT_CHECKPOINTS: [usize; 7] = [0, 1, 10, 20, 200, 500, 1000];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub n_samples: usize,
    pub recall: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveParams {
    pub checkpoints: Vec<usize>,
    pub seeds: Vec<u64>,
    pub test_episodes: usize,
}

impl Default for CurveParams {
    fn default() -> Self {
        Self { checkpoints: DEFAULT_CHECKPOINTS.to_vec(), seeds: vec![0, 1, 2, 3, 4], test_episodes: 500 }
    }
}

/// Recall after calibrating on the first `n` training samples, for each
/// checkpoint and seed. Checkpoints beyond the available samples are dropped.
pub fn learning_curve(
    samples: &[SamplePairs],
    params: &CurveParams,
    error_model: &ErrorModel,
    model: &ObjectModel,
    bin: &BinGeometry,
    thresholds: &VerificationThresholds,
) -> Result<Vec<CurvePoint>, SimError> {
    let mut out = Vec::new();
    for &n in params.checkpoints.iter().filter(|&&n| n <= samples.len()) {
        let cal = fit_from_samples(samples, n);
        for &seed in &params.seeds {
            let recall = evaluate_recall(error_model, &cal, model, bin, params.test_episodes, thresholds, seed)?;
            out.push(CurvePoint { n_samples: n, recall, seed });
        }
    }
    Ok(out)
}

pub const CURVE_CSV_HEADER: &str = "n_samples,recall,seed";

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = format!("{CURVE_CSV_HEADER}\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.n_samples, p.recall, p.seed));
    }
    s
}



#[cfg(test)]
mod curve_tests {
    use super::*;
    use crate::config::CampaignConfig;
    use crate::geometry::random_perturbation;
    use crate::sim::run_campaign;
    use std::sync::OnceLock;

    fn cfg() -> CampaignConfig {
        let mut cfg = CampaignConfig::default();
        cfg.targets = Targets { train: 40, test: 10 };
        cfg
    }

    fn model() -> &'static ObjectModel {
        static M: OnceLock<ObjectModel> = OnceLock::new();
        M.get_or_init(|| cfg().object.build().unwrap())
    }

    /// A small default campaign and its pairs, shared across tests.
    fn campaign() -> &'static (EpisodeStore, crate::sim::CampaignReport, Vec<SamplePairs>) {
        static C: OnceLock<(EpisodeStore, crate::sim::CampaignReport, Vec<SamplePairs>)> = OnceLock::new();
        C.get_or_init(|| {
            let cfg = cfg();
            let mut store = EpisodeStore::in_memory();
            let r = run_campaign(&cfg, model(), &mut store, None).unwrap();
            let s = training_pairs(&store, r.task_id, model(), &cfg.thresholds, &cfg.targets).unwrap();
            (store, r, s)
        })
    }

    #[test]
    fn spin_alignment_recovers_the_turn() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let t = Pose::random_rotation(&mut rng).with_translation(Vec3::new(1.0, 2.0, 700.0));
            let psi = rng.random_range(-179.0..179.0);
            let p = t.compose(&Pose::rot_z(psi));
            let a = align_spin(&t, &p);
            assert!(rotation_geodesic(&a, &p) < 1e-9);
            assert_eq!(a.translation(), t.translation());
            // A swing-only error keeps the spin of the truth.
            let q = t.compose(&Pose::rot_x(5.0));
            assert!(rotation_geodesic(&align_spin(&t, &q), &t) < 1e-9);
        }
    }

    #[test]
    fn verified_pose_closes_the_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Pose::rot_y(90.0).with_translation(Vec3::new(10.0, -4.0, 695.0));
        let e = t.compose(&random_perturbation(1.0, 2.0, &mut rng));
        let g = crate::sim::plan_grasp(&e, 10.0);
        let actual = g.inverse().compose(&e.inverse()).compose(&t);
        let v = verified_bin_pose(&e, &g, &actual);
        assert!((v.translation() - t.translation()).norm() < 1e-9 && rotation_geodesic(&v, &t) < 1e-9);
    }

    #[test]
    fn recall_examples() {
        let c = cfg();
        let th = VerificationThresholds::default();
        let id = Calibration::identity();
        assert_eq!(evaluate_recall(&ErrorModel::zero(), &id, model(), &c.bin, 100, &th, 1).unwrap(), 1.0);
        let gross = ErrorModel { p_gross: 1.0, ..ErrorModel::zero() };
        assert!(evaluate_recall(&gross, &id, model(), &c.bin, 200, &th, 1).unwrap() < 0.02);
        let a = evaluate_recall(&c.error_model, &id, model(), &c.bin, 50, &th, 9).unwrap();
        let b = evaluate_recall(&c.error_model, &id, model(), &c.bin, 50, &th, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pairs_come_from_training_samples_and_recover_the_bias() {
        let (store, r, s) = campaign();
        assert_eq!(s.len(), r.accepted_train);
        let bias = cfg().error_model.bias();
        for sp in s {
            let Body::PoseEst { pose, .. } = store.lineage(sp.inhand_id).unwrap().pose_est.body else { unreachable!() };
            let grasped = pose.to_pose();
            for (p, t) in &sp.pairs {
                assert!(*p != grasped && *p != grasped.flip_y(), "grasped estimate is excluded");
                assert!(e_theta(t, p) < 90.0);
                let err = t.inverse().compose(p);
                assert!((err.translation() - bias.translation()).norm() < 8.0, "{err:?}");
            }
        }
        let cal = fit_from_samples(s, s.len());
        assert_eq!(cal.n_samples, s.len());
        // Along the axis the twist does not act, so that component is direct.
        assert!((cal.bias_estimate.translation().z - bias.translation().z).abs() < 0.3);
        assert!((cal.bias_estimate.translation().norm() - 4.0).abs() < 0.3);
        // All that is left of the rotation is the twist about the axis.
        let twist = bias.rotation()[(1, 0)].atan2(bias.rotation()[(0, 0)]).to_degrees().abs();
        assert!((rotation_geodesic(&cal.bias_estimate, &bias) - twist).abs() < 1.0);
    }

    #[test]
    fn calibration_beats_zero_shot_on_every_seed() {
        let (_, _, s) = campaign();
        let c = cfg();
        let cal = fit_from_samples(s, 20);
        for seed in 0..5 {
            let r0 = evaluate_recall(&c.error_model, &Calibration::identity(), model(), &c.bin, 200, &c.thresholds, seed).unwrap();
            let r1 = evaluate_recall(&c.error_model, &cal, model(), &c.bin, 200, &c.thresholds, seed).unwrap();
            assert!(r1 > r0, "seed {seed}: {r0} -> {r1}");
        }
    }

    #[test]
    fn curve_shape_and_csv() {
        let (_, _, s) = campaign();
        let c = cfg();
        let params = CurveParams { checkpoints: vec![0], seeds: vec![3, 4], test_episodes: 20 };
        let pts = learning_curve(s, &params, &c.error_model, model(), &c.bin, &c.thresholds).unwrap();
        assert_eq!(pts.iter().map(|p| (p.n_samples, p.seed)).collect::<Vec<_>>(), vec![(0, 3), (0, 4)]);

        let params = CurveParams { checkpoints: DEFAULT_CHECKPOINTS.to_vec(), seeds: vec![0], test_episodes: 20 };
        let pts = learning_curve(s, &params, &c.error_model, model(), &c.bin, &c.thresholds).unwrap();
        // 40 training samples reach the 20 checkpoint only.
        assert_eq!(pts.iter().map(|p| p.n_samples).collect::<Vec<_>>(), vec![0, 1, 10, 20]);
        let csv = curve_csv(&pts);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CURVE_CSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], format!("0,{},0", pts[0].recall));
    }
}
