//! Grasp execution, in-hand observation and insertion.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{random_perturbation, rotation_between, ObjectModel, Pose, Vec3};
use crate::metrics::{e_adi, e_adi_below, e_theta};

use super::scene::SceneState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisturbanceModel {
    pub p_move: f64,
    pub move_sigma_t: f64,
    pub move_sigma_r: f64,
    pub p_drop: f64,
    pub p_pushout: f64,
}

impl Default for DisturbanceModel {
    fn default() -> Self {
        Self { p_move: 0.05, move_sigma_t: 1.0, move_sigma_r: 2.0, p_drop: 0.05, p_pushout: 0.02 }
    }
}

impl DisturbanceModel {
    pub fn zero() -> Self {
        Self { p_move: 0.0, move_sigma_t: 0.0, move_sigma_r: 0.0, p_drop: 0.0, p_pushout: 0.0 }
    }

    pub fn invalid_field(&self) -> Option<&'static str> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let sigma = |s: f64| s.is_finite() && s >= 0.0;
        if !prob(self.p_move) {
            Some("p_move")
        } else if !sigma(self.move_sigma_t) {
            Some("move_sigma_t")
        } else if !sigma(self.move_sigma_r) {
            Some("move_sigma_r")
        } else if !prob(self.p_drop) {
            Some("p_drop")
        } else if !prob(self.p_pushout) {
            Some("p_pushout")
        } else {
            None
        }
    }
}

/// Template-matcher noise. The in-hand camera looks along the TCP z-axis, so
/// image-plane noise is translation in TCP x, y and rotation about TCP z.
/// Defaults are sub-pixel matching at 60 cm; false labels then come mostly
/// from objects moved in the gripper.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InHandObservationModel {
    pub obs_sigma_xy: f64,
    pub obs_sigma_rz: f64,
}

impl Default for InHandObservationModel {
    fn default() -> Self {
        Self { obs_sigma_xy: 0.05, obs_sigma_rz: 0.1 }
    }
}

impl InHandObservationModel {
    pub fn zero() -> Self {
        Self { obs_sigma_xy: 0.0, obs_sigma_rz: 0.0 }
    }

    pub fn invalid_field(&self) -> Option<&'static str> {
        if !(self.obs_sigma_xy.is_finite() && self.obs_sigma_xy >= 0.0) {
            Some("obs_sigma_xy")
        } else if !(self.obs_sigma_rz.is_finite() && self.obs_sigma_rz >= 0.0) {
            Some("obs_sigma_rz")
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraspResult {
    /// The object is in the gripper.
    Held,
    /// The gripper closed on an object that then fell out of the bin.
    Dropped,
    /// No object was near the estimate.
    Missed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspOutcome {
    /// True object pose in the TCP frame; `None` on a miss.
    pub actual_tcp_obj: Option<Pose>,
    pub succeeded: bool,
    pub target_id: Option<u32>,
    pub result: GraspResult,
    /// Another object knocked out of the bin by this attempt.
    pub pushed_out: Option<u32>,
    pub disturbed: bool,
}

/// Top-down grasp on the object axis at height `axial_offset_mm`: TCP x along
/// the object axis and TCP z pointing into the bin as seen from the camera
/// under `estimate`.
pub fn plan_grasp(estimate: &Pose, axial_offset_mm: f64) -> Pose {
    // Camera +z expressed in the object frame, projected onto the object xy-plane.
    let down = estimate.rotation().transpose() * Vec3::z();
    let psi = if down.x.hypot(down.y) > 1e-9 { down.y.atan2(down.x) } else { 0.0 };
    // Base grasp: columns [e_z, e_y, -e_x], so TCP z = -object x. Turning it
    // by psi + 180° about the object axis aligns TCP z with `down`.
    let base = Pose::new(
        nalgebra::Matrix3::from_columns(&[Vec3::z(), Vec3::y(), -Vec3::x()]),
        Vec3::zeros(),
    )
    .expect("proper rotation");
    Pose::rot_z(psi.to_degrees() + 180.0).compose(&base).with_translation(Vec3::new(0.0, 0.0, axial_offset_mm))
}

/// Grasp offsets along the axis: the center and one sixth of the height
/// either side.
pub fn grasp_offsets(height_mm: f64) -> [f64; 3] {
    [-height_mm / 6.0, 0.0, height_mm / 6.0]
}

/// Executes a grasp planned on `estimate`. The gripper closes on the object
/// nearest to the estimate by `e_adi`; beyond `miss_mm` nothing is grasped.
/// A held object leaves the source bin and is counted in the other bin.
pub fn execute_grasp<R: Rng + ?Sized>(
    scene: &mut SceneState,
    model: &ObjectModel,
    estimate: &Pose,
    grasp: &Pose,
    dm: &DisturbanceModel,
    miss_mm: f64,
    rng: &mut R,
) -> GraspOutcome {
    // e_adi == miss_mm still counts as a hit; ties go to the earlier object.
    let mut limit = miss_mm.next_up();
    let mut best: Option<(u32, Pose)> = None;
    for (id, truth) in &scene.objects {
        if let Some(d) = e_adi_below(model, estimate, truth, limit) {
            best = Some((*id, *truth));
            limit = d;
        }
    }
    let moved = rng.random_bool(dm.p_move);
    let disturbance = if moved { random_perturbation(dm.move_sigma_t, dm.move_sigma_r, rng) } else { Pose::identity() };
    let dropped = rng.random_bool(dm.p_drop);
    let push = rng.random_bool(dm.p_pushout);
    let push_pick: f64 = rng.random();

    let Some((target, truth)) = best else {
        return GraspOutcome { actual_tcp_obj: None, succeeded: false, target_id: None, result: GraspResult::Missed, pushed_out: None, disturbed: false };
    };
    let actual = grasp.inverse().compose(&estimate.inverse()).compose(&truth).compose(&disturbance);
    scene.remove(target);
    let pushed_out = if push && !scene.objects.is_empty() {
        let i = ((push_pick * scene.objects.len() as f64) as usize).min(scene.objects.len() - 1);
        let id = scene.objects[i].0;
        scene.remove(id);
        Some(id)
    } else {
        None
    };
    if dropped {
        GraspOutcome { actual_tcp_obj: Some(actual), succeeded: false, target_id: Some(target), result: GraspResult::Dropped, pushed_out, disturbed: moved }
    } else {
        *scene.count_mut(scene.source.other()) += 1;
        GraspOutcome { actual_tcp_obj: Some(actual), succeeded: true, target_id: Some(target), result: GraspResult::Held, pushed_out, disturbed: moved }
    }
}

/// Removes the unobservable spin about the object axis: the minimal rotation
/// taking TCP z onto the object axis, translation unchanged.
pub fn canonicalize_spin(p: &Pose) -> Pose {
    rotation_between(&Vec3::z(), &p.z_axis()).with_translation(*p.translation())
}

/// Template-matcher output for an object held at `actual_tcp_obj`.
pub fn observe_inhand<R: Rng + ?Sized>(actual_tcp_obj: &Pose, om: &InHandObservationModel, rng: &mut R) -> Pose {
    let n_xy = Normal::new(0.0, om.obs_sigma_xy).expect("finite sigma");
    let n_rz = Normal::new(0.0, om.obs_sigma_rz).expect("finite sigma");
    let dx = n_xy.sample(rng);
    let dy = n_xy.sample(rng);
    let rz = n_rz.sample(rng);
    let noise = Pose::rot_z(rz).with_translation(Vec3::new(dx, dy, 0.0));
    canonicalize_spin(&noise.compose(actual_tcp_obj))
}

/// Insertion succeeds iff the in-hand error is within tolerance. There is no
/// flip allowance: a part held end-for-end does not go in.
pub fn insertion_attempt(
    model: &ObjectModel,
    measured_inhand: &Pose,
    expected: &Pose,
    tolerance_mm: f64,
    tolerance_deg: f64,
) -> bool {
    e_theta(expected, measured_inhand) <= tolerance_deg && e_adi(model, expected, measured_inhand) <= tolerance_mm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_geodesic, sample_cylinder_model};
    use crate::labeling::expected_grasp_pose;
    use crate::metrics::{verify, VerificationThresholds};
    use crate::sim::{spawn_scene, BinGeometry};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn model() -> &'static ObjectModel {
        static M: OnceLock<ObjectModel> = OnceLock::new();
        M.get_or_init(|| sample_cylinder_model(5.0, 61.0, 2048, 1).unwrap())
    }

    fn scene(seed: u64) -> SceneState {
        spawn_scene(10, model(), &BinGeometry::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn near(a: &Pose, b: &Pose, tol: f64) -> bool {
        (a.translation() - b.translation()).norm() < tol && rotation_geodesic(a, b) < tol
    }

    #[test]
    fn planned_grasp_comes_from_above() {
        let s = scene(1);
        for (_, e) in &s.objects {
            for off in grasp_offsets(61.0) {
                let g = plan_grasp(e, off);
                let tcp = e.compose(&g);
                assert!(tcp.z_axis().dot(&Vec3::z()) > 0.999, "approach along camera +z");
                // TCP x runs along the object axis, origin on the axis.
                assert!((tcp.rotate_vector(&Vec3::x()) - e.z_axis()).norm() < 1e-9);
                assert!((g.translation() - Vec3::new(0.0, 0.0, off)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_estimate_leaves_object_at_inverse_grasp() {
        let mut s = scene(2);
        let (id, truth) = s.objects[3];
        let g = plan_grasp(&truth, 10.0);
        let before = s.objects.len();
        let o = execute_grasp(&mut s, model(), &truth, &g, &DisturbanceModel::zero(), 10.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(o.succeeded && o.result == GraspResult::Held);
        assert_eq!(o.target_id, Some(id));
        assert!(near(&o.actual_tcp_obj.unwrap(), &g.inverse(), 1e-12));
        assert_eq!(s.objects.len(), before - 1);
        assert_eq!((s.bin_a_count, s.bin_b_count), (9, 1));
        assert!(s.is_consistent());
    }

    #[test]
    fn estimate_error_propagates_into_the_hand() {
        let mut s = scene(3);
        let truth = s.objects[0].1;
        let estimate = truth.compose(&Pose::from_translation(Vec3::new(1.0, 0.0, 0.0)));
        let g = plan_grasp(&estimate, 0.0);
        let o = execute_grasp(&mut s, model(), &estimate, &g, &DisturbanceModel::zero(), 10.0, &mut ChaCha8Rng::seed_from_u64(1));
        let expected = expected_grasp_pose(&estimate, &g);
        let in_hand = e_adi(model(), &expected, &o.actual_tcp_obj.unwrap());
        let in_bin = e_adi(model(), &estimate, &truth);
        assert!((in_hand - in_bin).abs() < 1e-9);
        // No point moves further than the offset; most move nearly all of it.
        assert!(in_hand <= 1.0 && in_hand > 0.5, "{in_hand}");
    }

    #[test]
    fn drops_misses_and_pushouts() {
        let mut s = scene(4);
        let dm = DisturbanceModel { p_drop: 1.0, ..DisturbanceModel::zero() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let truth = s.objects[0].1;
            let o = execute_grasp(&mut s, model(), &truth, &plan_grasp(&truth, 0.0), &dm, 10.0, &mut rng);
            assert!(!o.succeeded && o.result == GraspResult::Dropped);
        }
        assert_eq!((s.bin_a_count, s.bin_b_count, s.objects.len()), (5, 0, 5));

        let far = Pose::from_translation(Vec3::new(1000.0, 0.0, 0.0));
        let o = execute_grasp(&mut s, model(), &far, &plan_grasp(&far, 0.0), &DisturbanceModel::zero(), 10.0, &mut rng);
        assert_eq!((o.result, o.target_id, o.actual_tcp_obj), (GraspResult::Missed, None, None));
        assert_eq!(s.objects.len(), 5);

        let dm = DisturbanceModel { p_pushout: 1.0, ..DisturbanceModel::zero() };
        let truth = s.objects[0].1;
        let o = execute_grasp(&mut s, model(), &truth, &plan_grasp(&truth, 0.0), &dm, 10.0, &mut rng);
        assert!(o.succeeded && o.pushed_out.is_some());
        assert_eq!((s.bin_a_count, s.bin_b_count), (3, 1));
        assert!(s.is_consistent());
    }

    #[test]
    fn observation_without_noise_only_drops_spin() {
        let s = scene(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let th = VerificationThresholds::default();
        for (_, truth) in &s.objects {
            let g = plan_grasp(truth, 10.0);
            let actual = g.inverse().compose(&truth.inverse()).compose(truth);
            let m = observe_inhand(&actual, &InHandObservationModel::zero(), &mut rng);
            assert!((m.z_axis() - actual.z_axis()).norm() < 1e-12);
            assert_eq!(m.translation(), actual.translation());
            assert!(near(&canonicalize_spin(&m), &m, 1e-12));
            let r = verify(model(), &expected_grasp_pose(truth, &g), &m, &th);
            assert!(r.is_tp && r.e_adi < 1e-9, "{r:?}");
        }
    }

    // Measured failure rate is about 0.65: the TCP x component runs along the
    // cylinder axis, where a shift barely moves the surface.
    #[test]
    #[ignore = "unattainable with an axially symmetric part: axial noise is invisible to e_adi"]
    fn five_mm_observation_noise_fails_verification() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let om = InHandObservationModel { obs_sigma_xy: 5.0, obs_sigma_rz: 0.0 };
        let th = VerificationThresholds::default();
        let expected = plan_grasp(&Pose::identity(), 0.0).inverse();
        let failures = (0..200).filter(|_| !verify(model(), &expected, &observe_inhand(&expected, &om, &mut rng), &th).is_tp).count();
        assert!(failures as f64 / 200.0 > 0.9, "{failures}");
    }

    #[test]
    fn observation_noise_matters_only_across_the_axis() {
        let th = VerificationThresholds::default();
        let expected = plan_grasp(&Pose::identity(), 0.0).inverse();
        let shifted = |v: Vec3| Pose::from_translation(v).compose(&expected);
        let along = verify(model(), &expected, &shifted(Vec3::new(5.0, 0.0, 0.0)), &th);
        let across = verify(model(), &expected, &shifted(Vec3::new(0.0, 5.0, 0.0)), &th);
        assert!(along.is_tp && along.e_adi < 1.0, "{along:?}");
        assert!(!across.is_tp && across.e_adi > 2.0, "{across:?}");

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let om = InHandObservationModel { obs_sigma_xy: 5.0, obs_sigma_rz: 0.0 };
        let n = 400;
        let failures = (0..n).filter(|_| !verify(model(), &expected, &observe_inhand(&expected, &om, &mut rng), &th).is_tp).count();
        // Upper bound: the across-axis component alone exceeding the gate,
        // 2 * (1 - Phi(2 / 5)) = 0.689.
        let rate = failures as f64 / n as f64;
        let se = (0.689f64 * 0.311 / n as f64).sqrt();
        assert!(rate < 0.689 + 3.0 * se && rate > 0.5, "{rate}");
    }

    #[test]
    fn insertion_examples() {
        let g = plan_grasp(&Pose::rot_x(10.0), 5.0).inverse();
        assert!(insertion_attempt(model(), &g, &g, 2.0, 15.0));
        assert!(!insertion_attempt(model(), &g.flip_y(), &g, 2.0, 15.0));
        assert!(insertion_attempt(model(), &g, &g, 0.0, 0.0));
        let off = g.compose(&Pose::from_translation(Vec3::new(0.01, 0.0, 0.0)));
        assert!(!insertion_attempt(model(), &off, &g, 0.0, 0.0));
        assert!(insertion_attempt(model(), &off, &g, 2.0, 15.0));
    }
}
