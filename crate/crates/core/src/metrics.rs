//! Pose-error metrics and the true-positive verification gate.
//!
//! A pair passes when `e_adi < adi_mm` and `e_theta < angle_deg`. If the
//! object axes disagree by more than `flip_trigger_deg`, the expected pose is
//! turned 180° about its own y-axis before the errors are measured.

use nalgebra::Rotation3;
use serde::{Deserialize, Serialize};

use crate::geometry::{angular_error_z, flip_y, ObjectModel, PointCloud, Pose, Symmetry, Vec3};
use crate::spatial::KdTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationThresholds {
    pub adi_mm: f64,
    pub angle_deg: f64,
    pub flip_trigger_deg: f64,
}

impl Default for VerificationThresholds {
    fn default() -> Self {
        Self { adi_mm: 2.0, angle_deg: 15.0, flip_trigger_deg: 90.0 }
    }
}

impl VerificationThresholds {
    /// Returns the name of the first field that breaks the invariants.
    pub fn invalid_field(&self) -> Option<&'static str> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.adi_mm) {
            Some("adi_mm")
        } else if !positive(self.angle_deg) {
            Some("angle_deg")
        } else if !positive(self.flip_trigger_deg) || self.flip_trigger_deg < self.angle_deg {
            Some("flip_trigger_deg")
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerificationResult {
    pub e_adi: f64,
    pub e_theta: f64,
    pub flipped: bool,
    pub is_tp: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("nearest-neighbour target cloud is empty")]
    EmptyTarget,
}

/// Average distance for indistinguishable views: the mean over model points
/// `p` of `min_q ‖a·p − b·q‖`.
///
/// Evaluated in the model frame as `min_q ‖(b⁻¹a)·p − q‖` against the model's
/// cached index. For a model symmetric about z the relative pose is first
/// reduced by [`swing_reduced`], which leaves the value of the ideal surface
/// unchanged and makes the sampled value exactly invariant to spin on either
/// side.
pub fn e_adi(model: &ObjectModel, a: &Pose, b: &Pose) -> f64 {
    if a == b {
        return 0.0;
    }
    let rel = relative(model, a, b);
    let index = model.index();
    let pts = model.points();
    let sum: f64 = pts.iter().map(|p| index.nearest_dist(&rel.transform_point(p))).sum();
    sum / pts.len() as f64
}

fn relative(model: &ObjectModel, a: &Pose, b: &Pose) -> Pose {
    let rel = b.inverse().compose(a);
    match model.symmetry() {
        Symmetry::None => rel,
        Symmetry::ContinuousAboutZ => swing_reduced(&rel),
    }
}

/// Writes the rotation as `Rz(α)·Ry(β)·Rz(γ)` and returns `p ↦ Ry(β)·p + Rz(−α)·t`.
///
/// For a surface symmetric about z, `Rz(γ)` maps the surface onto itself and
/// `Rz(α)` can be moved onto the target surface, so both only permute samples.
pub fn swing_reduced(rel: &Pose) -> Pose {
    let r = rel.rotation();
    let beta = r[(2, 2)].clamp(-1.0, 1.0).acos();
    let alpha = if beta.sin() > 1e-12 { r[(1, 2)].atan2(r[(0, 2)]) } else { 0.0 };
    let t = rel.translation();
    let (sa, ca) = alpha.sin_cos();
    let t = Vec3::new(ca * t.x + sa * t.y, -sa * t.x + ca * t.y, t.z);
    Pose::from_rotation(Rotation3::from_axis_angle(&Vec3::y_axis(), beta)).with_translation(t)
}

/// Lower bound on `e_adi(model, a, b)` that costs one transform.
///
/// Every posed point `b·q` lies within the bounding radius of `b`'s origin, and
/// the mean distance to that origin is at least the distance of the mean.
pub fn e_adi_lower_bound(model: &ObjectModel, a: &Pose, b: &Pose) -> f64 {
    let c = a.transform_point(model.centroid());
    ((c - b.translation()).norm() - model.bounding_radius()).max(0.0)
}

/// `e_adi`, or `None` as soon as the result is known to be at least `limit`.
pub fn e_adi_below(model: &ObjectModel, a: &Pose, b: &Pose, limit: f64) -> Option<f64> {
    if e_adi_lower_bound(model, a, b) >= limit {
        return None;
    }
    let rel = relative(model, a, b);
    let index = model.index();
    let pts = model.points();
    let budget = limit * pts.len() as f64;
    let mut sum = 0.0;
    for p in pts {
        sum += index.nearest_dist(&rel.transform_point(p));
        if sum >= budget {
            return None;
        }
    }
    Some(sum / pts.len() as f64)
}

/// Angle between the object z-axes, in degrees.
pub fn e_theta(a: &Pose, b: &Pose) -> f64 {
    angular_error_z(a, b)
}

/// Turns `expected` 180° about its own y-axis when its z-axis is more than
/// `trigger_deg` away from that of `found`. `found` is never modified, so the
/// post-flip angle is `180° − e_theta`.
pub fn normalize_flip(expected: &Pose, found: &Pose, trigger_deg: f64) -> (Pose, Pose, bool) {
    if angular_error_z(expected, found) > trigger_deg {
        (flip_y(expected), *found, true)
    } else {
        (*expected, *found, false)
    }
}

pub fn verify(model: &ObjectModel, expected: &Pose, found: &Pose, th: &VerificationThresholds) -> VerificationResult {
    let (exp, fnd, flipped) = normalize_flip(expected, found, th.flip_trigger_deg);
    let e_theta = angular_error_z(&exp, &fnd);
    let e_adi = e_adi(model, &exp, &fnd);
    VerificationResult { e_adi, e_theta, flipped, is_tp: e_adi < th.adi_mm && e_theta < th.angle_deg }
}

/// Exact distance from every query point to its nearest target point.
pub fn nn_distances(query: &PointCloud, target: &PointCloud) -> Result<Vec<f64>, MetricsError> {
    let tree = KdTree::build(&target.points).ok_or(MetricsError::EmptyTarget)?;
    Ok(query.iter().map(|q| tree.nearest_dist(q)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_perturbation, sample_cylinder_model, Symmetry, Vec3};
    use nalgebra::Matrix3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_e_adi(model: &ObjectModel, a: &Pose, b: &Pose) -> f64 {
        let pa: Vec<Vec3> = model.points().iter().map(|p| a.transform_point(p)).collect();
        let pb: Vec<Vec3> = model.points().iter().map(|p| b.transform_point(p)).collect();
        let sum: f64 = pa.iter().map(|x| pb.iter().map(|y| (x - y).norm()).fold(f64::INFINITY, f64::min)).sum();
        sum / pa.len() as f64
    }

    fn cylinder() -> ObjectModel {
        sample_cylinder_model(5.0, 61.0, 2048, 11).unwrap()
    }

    fn point_model() -> ObjectModel {
        ObjectModel::from_points("dot", vec![Vec3::zeros()], None, Symmetry::None, Some(1.0)).unwrap()
    }

    fn random_pose<R: Rng>(rng: &mut R) -> Pose {
        Pose::random_rotation(rng).with_translation(Vec3::new(
            rng.random_range(-200.0..200.0),
            rng.random_range(-200.0..200.0),
            rng.random_range(500.0..800.0),
        ))
    }

    /// Rotation about x with exact zero entries, so constructed errors are exact.
    fn exact_rot_x(deg: f64) -> Pose {
        let (s, c) = deg.to_radians().sin_cos();
        Pose::new(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c), Vec3::zeros()).unwrap()
    }

    #[test]
    fn e_adi_examples() {
        let m = cylinder();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pose(&mut rng);
        assert_eq!(e_adi(&m, &p, &p), 0.0);
        let dot = point_model();
        let a = Pose::from_translation(Vec3::new(0.0, 0.0, 3.0));
        assert_eq!(e_adi(&dot, &a, &Pose::identity()), 3.0);
    }

    /// Same points without the symmetry declaration, so `e_adi` is the literal mean.
    fn asymmetric(m: &ObjectModel) -> ObjectModel {
        ObjectModel::from_points("plain", m.points().to_vec(), Some(m.normals().to_vec()), Symmetry::None, Some(m.surface_area())).unwrap()
    }

    /// Independent swing extraction: tilt of the z-axis and its azimuth.
    fn brute_e_adi_symmetric(model: &ObjectModel, a: &Pose, b: &Pose) -> f64 {
        let rel = b.inverse().compose(a);
        let z = rel.z_axis();
        let tilt = z.z.clamp(-1.0, 1.0).acos().to_degrees();
        let azimuth = z.y.atan2(z.x).to_degrees();
        let t = Pose::rot_z(-azimuth).rotate_vector(rel.translation());
        let reduced = Pose::rot_y(tilt).with_translation(t);
        brute_e_adi(model, &reduced, &Pose::identity())
    }

    #[test]
    fn spin_about_axis_is_exactly_invisible() {
        let m = sample_cylinder_model(5.0, 61.0, 600, 2).unwrap();
        let plain = asymmetric(&m);
        let res = m.sampling_resolution();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_pose(&mut rng);
        for deg in [5.0, 37.0, 90.0, 181.0] {
            let q = p.compose(&Pose::rot_z(deg));
            assert!(e_adi(&m, &p, &q) < 1e-9);
            // The literal sampled mean sees only the sampling pattern.
            let brute = brute_e_adi(&m, &p, &q);
            assert!(brute <= 2.0 * res, "{deg}: {brute} vs {res}");
            assert!((e_adi(&plain, &p, &q) - brute).abs() < 1e-9);
        }
    }

    #[test]
    fn fast_e_adi_matches_brute_force() {
        let m = sample_cylinder_model(4.0, 32.0, 500, 3).unwrap();
        let plain = asymmetric(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random_pose(&mut rng);
            let b = a.compose(&random_perturbation(3.0, 10.0, &mut rng));
            assert!((e_adi(&plain, &a, &b) - brute_e_adi(&plain, &a, &b)).abs() < 1e-9);
            assert!((e_adi(&m, &a, &b) - brute_e_adi_symmetric(&m, &a, &b)).abs() < 1e-9);
            // Both estimate the same surface quantity.
            assert!((e_adi(&m, &a, &b) - e_adi(&plain, &a, &b)).abs() < 2.0 * m.sampling_resolution());
        }
    }

    #[test]
    fn lower_bound_and_early_exit_are_consistent() {
        let m = cylinder();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let b = if rng.random_bool(0.5) { random_pose(&mut rng) } else { a.compose(&random_perturbation(5.0, 20.0, &mut rng)) };
            let exact = e_adi(&m, &a, &b);
            assert!(e_adi_lower_bound(&m, &a, &b) <= exact + 1e-9);
            for limit in [1.0, 10.0, 100.0] {
                match e_adi_below(&m, &a, &b, limit) {
                    Some(v) => {
                        assert!(v < limit);
                        assert!((v - exact).abs() < 1e-9);
                    }
                    None => assert!(exact >= limit - 1e-9),
                }
            }
        }
    }

    #[test]
    fn normalize_flip_examples() {
        let e = Pose::identity();
        let (_, _, flipped) = normalize_flip(&e, &exact_rot_x(10.0), 90.0);
        assert!(!flipped);
        let (a, b, flipped) = normalize_flip(&e, &flip_y(&e), 90.0);
        assert!(flipped);
        assert_eq!(angular_error_z(&a, &b), 0.0);
        let (_, _, flipped) = normalize_flip(&e, &exact_rot_x(91.0), 90.0);
        assert!(flipped);
        let (_, _, flipped) = normalize_flip(&e, &exact_rot_x(90.0), 90.0);
        assert!(!flipped);
    }

    #[test]
    fn verify_examples() {
        let dot = point_model();
        let th = VerificationThresholds::default();
        let exp = Pose::from_translation(Vec3::new(1.5, 0.0, 0.0));
        let r = verify(&dot, &exp, &exact_rot_x(10.0), &th);
        assert_eq!((r.e_adi, r.e_theta), (1.5, 10.0));
        assert!(r.is_tp);
        let exp = Pose::from_translation(Vec3::new(2.5, 0.0, 0.0));
        assert!(!verify(&dot, &exp, &exact_rot_x(5.0), &th).is_tp);
    }

    #[test]
    fn exact_antipode_verifies_after_flip() {
        let m = cylinder();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = random_pose(&mut rng);
        let r = verify(&m, &e, &flip_y(&e), &VerificationThresholds::default());
        assert!(r.flipped && r.is_tp);
        assert_eq!(r.e_adi, 0.0);
        assert!(r.e_theta < 1e-6);
        assert!(brute_e_adi(&m, &flip_y(&e), &flip_y(&e)) <= m.symmetry_tolerance());
    }

    #[test]
    fn gate_truth_table_is_strict() {
        let dot = point_model();
        let th = VerificationThresholds::default();
        for d in [1.9, 2.0, 2.1] {
            for deg in [14.0, 15.0, 16.0, 89.0, 91.0, 180.0] {
                let r = verify(&dot, &Pose::from_translation(Vec3::new(d, 0.0, 0.0)), &exact_rot_x(deg), &th);
                let post = if deg > 90.0 { 180.0 - deg } else { deg };
                assert_eq!(r.e_adi, d);
                assert_eq!(r.e_theta, post, "{deg}");
                assert_eq!(r.flipped, deg > 90.0);
                assert_eq!(r.is_tp, d < 2.0 && post < 15.0, "{d} {deg}");
            }
        }
    }

    #[test]
    fn nn_distances_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c: PointCloud = (0..200).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        assert!(nn_distances(&c, &c).unwrap().iter().all(|&d| d == 0.0));
        let single = PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0)]);
        for (d, p) in nn_distances(&c, &single).unwrap().iter().zip(c.iter()) {
            assert!((d - (p - single.points[0]).norm()).abs() < 1e-12);
        }
        assert_eq!(nn_distances(&c, &PointCloud::default()), Err(MetricsError::EmptyTarget));
    }

    #[test]
    fn nn_distances_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cloud = |n| -> PointCloud {
            (0..n).map(|_| Vec3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0))).collect()
        };
        let q = cloud(500);
        let t = cloud(500);
        let fast = nn_distances(&q, &t).unwrap();
        for (d, p) in fast.iter().zip(q.iter()) {
            let brute = t.iter().map(|x| (x - p).norm()).fold(f64::INFINITY, f64::min);
            assert!((d - brute).abs() <= 1e-9);
        }
    }

    #[test]
    fn threshold_validation() {
        assert_eq!(VerificationThresholds::default().invalid_field(), None);
        let bad = VerificationThresholds { adi_mm: -1.0, ..Default::default() };
        assert_eq!(bad.invalid_field(), Some("adi_mm"));
        let bad = VerificationThresholds { flip_trigger_deg: 10.0, ..Default::default() };
        assert_eq!(bad.invalid_field(), Some("flip_trigger_deg"));
    }

    /// Dense enough that the symmetry tolerance band leaves room on both sides of the gate.
    fn dense_cylinder() -> &'static ObjectModel {
        static M: std::sync::OnceLock<ObjectModel> = std::sync::OnceLock::new();
        M.get_or_init(|| sample_cylinder_model(5.0, 61.0, 8192, 1).unwrap())
    }

    fn mixed_perturbation(rng: &mut ChaCha8Rng) -> Pose {
        if rng.random_bool(0.5) {
            random_perturbation(0.05, 0.3, rng)
        } else {
            random_perturbation(4.0, 6.0, rng)
        }
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (any::<u64>()).prop_map(|s| random_pose(&mut ChaCha8Rng::seed_from_u64(s)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn e_adi_self_zero_and_nonnegative(a in arb_pose(), b in arb_pose()) {
            let m = sample_cylinder_model(5.0, 40.0, 256, 1).unwrap();
            prop_assert_eq!(e_adi(&m, &a, &a), 0.0);
            prop_assert!(e_adi(&m, &a, &b) >= 0.0);
        }

        #[test]
        fn e_adi_left_invariant(a in arb_pose(), g in arb_pose(), s in any::<u64>()) {
            let m = sample_cylinder_model(5.0, 40.0, 256, 1).unwrap();
            let b = a.compose(&random_perturbation(4.0, 15.0, &mut ChaCha8Rng::seed_from_u64(s)));
            let base = e_adi(&m, &a, &b);
            let moved = e_adi(&m, &g.compose(&a), &g.compose(&b));
            prop_assert!((base - moved).abs() < 1e-9);
        }

        #[test]
        fn e_adi_ignores_spin_on_both_sides(a in arb_pose(), s in any::<u64>(), t1 in 0.0f64..360.0, t2 in 0.0f64..360.0) {
            let m = sample_cylinder_model(5.0, 40.0, 256, 1).unwrap();
            let th = VerificationThresholds::default();
            let found = a.compose(&mixed_perturbation(&mut ChaCha8Rng::seed_from_u64(s)));
            let base = verify(&m, &a, &found, &th);
            let spun = verify(&m, &a.compose(&Pose::rot_z(t1)), &found.compose(&Pose::rot_z(t2)), &th);
            prop_assert!((spun.e_adi - base.e_adi).abs() < 1e-9);
            prop_assert!((spun.e_theta - base.e_theta).abs() < 1e-6);
            prop_assume!((base.e_theta - th.angle_deg).abs() > 1e-6 && (base.e_adi - th.adi_mm).abs() > 1e-9);
            prop_assert_eq!(spun.is_tp, base.is_tp);
        }

        #[test]
        fn verify_invariant_under_joint_flip(a in arb_pose(), s in any::<u64>()) {
            let m = dense_cylinder();
            let th = VerificationThresholds::default();
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut found = a.compose(&mixed_perturbation(&mut rng));
            if rng.random_bool(0.5) {
                found = flip_y(&found);
            }
            let base = verify(m, &a, &found, &th);
            prop_assume!((base.e_adi - th.adi_mm).abs() > m.symmetry_tolerance());
            let both = verify(m, &flip_y(&a), &flip_y(&found), &th);
            prop_assert_eq!(both.is_tp, base.is_tp);
        }
    }
}
