//! Turns executed episodes into training labels.
//!
//! The in-hand observation checks the bin estimate: if the measured object
//! pose in the gripper matches the pose the grasp plan predicted, the bin
//! estimate was right and becomes an annotation. Negatives carry no usable
//! label and are discarded.

use std::fmt::Write as _;

use crate::geometry::{ObjectModel, Pose};
use crate::metrics::{verify, VerificationResult, VerificationThresholds};
use crate::numfmt::fmt_sig;
use crate::store::{Body, EpisodeStore, Level, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    AcceptTrainingSample,
    Discard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelDecision {
    pub verdict: Verdict,
    pub verification: VerificationResult,
    /// Id of the in-hand record, or 0 for a decision outside any store.
    pub episode_id: u64,
}

impl LabelDecision {
    pub fn accepted(&self) -> bool {
        self.verdict == Verdict::AcceptTrainingSample
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub episode_id: u64,
    pub pose_est_id: u64,
    pub scene_cloud_ref: u64,
    pub cloud_file: String,
    pub object_id: String,
    /// The verified in-bin estimate, turned about its y-axis when the check
    /// matched only after a flip.
    pub annotated_pose: Pose,
}

impl TrainingSample {
    /// `episode_id  object_id  cloud_file  r00 .. r22 tx ty tz`, tab-separated.
    pub fn export_line(&self) -> String {
        let mut s = format!("{}\t{}\t{}", self.episode_id, self.object_id, self.cloud_file);
        for v in self.annotated_pose.to_row_major() {
            let _ = write!(s, "\t{}", fmt_sig(v));
        }
        s
    }
}

/// Object pose in the camera frame when held at `cam_T_tcp`.
pub fn expected_inhand_pose(cam_t_tcp: &Pose, tcp_t_obj: &Pose) -> Pose {
    cam_t_tcp.compose(tcp_t_obj)
}

/// Object pose in the TCP frame predicted by the plan. The TCP was servoed to
/// `bin_pose_estimate · grasp`, so an exact estimate leaves the object at
/// `grasp⁻¹`; the estimate itself cancels.
pub fn expected_grasp_pose(_bin_pose_estimate: &Pose, grasp_in_object_frame: &Pose) -> Pose {
    grasp_in_object_frame.inverse()
}

pub fn label_episode(
    expected: &Pose,
    measured_inhand: &Pose,
    model: &ObjectModel,
    thresholds: &VerificationThresholds,
) -> LabelDecision {
    let verification = verify(model, expected, measured_inhand, thresholds);
    let verdict = if verification.is_tp { Verdict::AcceptTrainingSample } else { Verdict::Discard };
    LabelDecision { verdict, verification, episode_id: 0 }
}

/// Relabels every in-hand record under `task_id`, in id order.
pub fn label_task(
    store: &EpisodeStore,
    task_id: u64,
    model: &ObjectModel,
    thresholds: &VerificationThresholds,
) -> Result<Vec<LabelDecision>, StoreError> {
    match store.get(task_id) {
        Some(r) if r.level() == Level::Task => {}
        _ => return Err(StoreError::NotFound(task_id)),
    }
    let mut out = Vec::new();
    for rec in store.iter_level(Level::InHand) {
        let lineage = store.lineage(rec.id)?;
        if lineage.task.id != task_id {
            continue;
        }
        let Body::InHand { measured_pose, expected_pose, .. } = &rec.body else { unreachable!() };
        let mut d = label_episode(&expected_pose.to_pose(), &measured_pose.to_pose(), model, thresholds);
        d.episode_id = rec.id;
        out.push(d);
    }
    Ok(out)
}

/// One sample per accepted episode of `task_id`, ordered by episode id.
pub fn build_training_set(
    store: &EpisodeStore,
    task_id: u64,
    model: &ObjectModel,
    thresholds: &VerificationThresholds,
) -> Result<Vec<TrainingSample>, StoreError> {
    let mut out = Vec::new();
    for d in label_task(store, task_id, model, thresholds)? {
        if !d.accepted() {
            continue;
        }
        let l = store.lineage(d.episode_id)?;
        let (Body::PoseEst { pose, .. }, Body::Cloud { cloud_file, .. }, Body::Task { object_id, .. }) =
            (&l.pose_est.body, &l.cloud.body, &l.task.body)
        else {
            unreachable!("lineage levels are typed")
        };
        let estimate = pose.to_pose();
        out.push(TrainingSample {
            episode_id: d.episode_id,
            pose_est_id: l.pose_est.id,
            scene_cloud_ref: l.cloud.id,
            cloud_file: cloud_file.clone(),
            object_id: object_id.clone(),
            annotated_pose: if d.verification.flipped { estimate.flip_y() } else { estimate },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_cylinder_model, Vec3};
    use crate::store::StoredPose;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn model() -> &'static ObjectModel {
        static M: OnceLock<ObjectModel> = OnceLock::new();
        M.get_or_init(|| sample_cylinder_model(5.0, 61.0, 2048, 7).unwrap())
    }

    fn th() -> VerificationThresholds {
        VerificationThresholds::default()
    }

    #[test]
    fn inhand_pose_composes() {
        let standoff = Pose::from_translation(Vec3::new(0.0, 0.0, 600.0));
        assert_eq!(expected_inhand_pose(&standoff, &Pose::identity()), standoff);
        assert_eq!(expected_inhand_pose(&standoff, &Pose::identity()).translation().z, 600.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Pose::random_rotation(&mut rng).with_translation(Vec3::new(1.0, 2.0, 3.0));
        let b = Pose::random_rotation(&mut rng).with_translation(Vec3::new(-4.0, 0.5, 9.0));
        assert_eq!(expected_inhand_pose(&a, &b), crate::geometry::compose(&a, &b));
    }

    #[test]
    fn grasp_pose_is_inverse() {
        let e = Pose::rot_x(20.0).with_translation(Vec3::new(10.0, 0.0, 650.0));
        assert_eq!(expected_grasp_pose(&e, &Pose::identity()), Pose::identity());
        let g = Pose::from_translation(Vec3::new(0.0, 0.0, 30.0));
        assert_eq!(*expected_grasp_pose(&e, &g).translation(), Vec3::new(0.0, 0.0, -30.0));
    }

    #[test]
    fn label_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = Pose::random_rotation(&mut rng).with_translation(Vec3::new(3.0, -2.0, 40.0));
        let d = label_episode(&e, &e, model(), &th());
        assert!(d.accepted() && !d.verification.flipped);

        // Offset along the object x-axis, perpendicular to the cylinder axis.
        let off = e.compose(&Pose::from_translation(Vec3::new(5.0, 0.0, 0.0)));
        let d = label_episode(&e, &off, model(), &th());
        assert_eq!(d.verdict, Verdict::Discard);

        let d = label_episode(&e, &e.flip_y(), model(), &th());
        assert!(d.accepted() && d.verification.flipped);
    }

    /// Builds `n` episodes; episode `i` is accepted iff `accept(i)`.
    fn fixture(n: usize, accept: impl Fn(usize) -> bool) -> (EpisodeStore, u64, Vec<Pose>) {
        let mut s = EpisodeStore::in_memory();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = s.append(Body::Task { object_id: "cyl".into(), network_type: "oracle".into() }).unwrap();
        let mut estimates = Vec::new();
        for i in 0..n {
            let c = s.append(Body::Cloud { task_id: t, cloud_file: format!("clouds/{i}.ply"), timestamp_ms: i as u64 }).unwrap();
            let est = Pose::random_rotation(&mut rng).with_translation(Vec3::new(0.0, 0.0, 680.0));
            let est_q = StoredPose::from_pose(&est);
            estimates.push(est_q.to_pose());
            let p = s.append(Body::PoseEst { cloud_id: c, pose: est_q, score: 0.8 }).unwrap();
            let g = Pose::rot_y(90.0).with_translation(Vec3::new(0.0, 0.0, rng.random_range(-10.0..10.0)));
            let gq = StoredPose::from_pose(&g);
            let expected = gq.to_pose().inverse();
            let measured = if accept(i) { expected } else { expected.compose(&Pose::from_translation(Vec3::new(6.0, 0.0, 0.0))) };
            let gid = s.append(Body::Grasp { pose_est_id: p, grasp_in_object_frame: gq, succeeded: true }).unwrap();
            s.append(Body::InHand {
                grasp_id: gid,
                measured_pose: StoredPose::from_pose(&measured),
                expected_pose: StoredPose::from_pose(&expected),
            })
            .unwrap();
        }
        (s, t, estimates)
    }

    #[test]
    fn training_set_cardinality() {
        let (s, t, _) = fixture(0, |_| true);
        assert!(build_training_set(&s, t, model(), &th()).unwrap().is_empty());
        let accepted = [0, 2, 3, 5, 7, 9];
        let (s, t, est) = fixture(10, |i| accepted.contains(&i));
        let set = build_training_set(&s, t, model(), &th()).unwrap();
        assert_eq!(set.len(), 6);
        assert!(set.windows(2).all(|w| w[0].episode_id < w[1].episode_id));
        for (sample, &i) in set.iter().zip(&accepted) {
            assert_eq!(sample.annotated_pose, est[i]);
            assert_eq!(sample.cloud_file, format!("clouds/{i}.ply"));
            let line = sample.export_line();
            assert_eq!(line.split('\t').count(), 15);
        }
        // Rejected episodes never surface.
        let rejected: Vec<u64> = label_task(&s, t, model(), &th()).unwrap().iter().filter(|d| !d.accepted()).map(|d| d.episode_id).collect();
        assert_eq!(rejected.len(), 4);
        assert!(set.iter().all(|x| !rejected.contains(&x.episode_id)));
    }

    #[test]
    fn flipped_annotation_is_corrected() {
        let mut s = EpisodeStore::in_memory();
        let t = s.append(Body::Task { object_id: "cyl".into(), network_type: "oracle".into() }).unwrap();
        let c = s.append(Body::Cloud { task_id: t, cloud_file: "c.ply".into(), timestamp_ms: 0 }).unwrap();
        let est = StoredPose::from_pose(&Pose::rot_z(30.0).with_translation(Vec3::new(0.0, 0.0, 690.0)));
        let p = s.append(Body::PoseEst { cloud_id: c, pose: est, score: 1.0 }).unwrap();
        let g = s.append(Body::Grasp { pose_est_id: p, grasp_in_object_frame: StoredPose::from_pose(&Pose::identity()), succeeded: true }).unwrap();
        s.append(Body::InHand {
            grasp_id: g,
            measured_pose: StoredPose::from_pose(&Pose::flip_y_rotation()),
            expected_pose: StoredPose::from_pose(&Pose::identity()),
        })
        .unwrap();
        let set = build_training_set(&s, t, model(), &th()).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set[0].annotated_pose, est.to_pose().flip_y());
    }

    #[test]
    fn dangling_lineage_is_reported() {
        let text = "storev1\ntask\t1\tcyl\toracle\ninhand\t5\t4\t1\t0\t0\t0\t1\t0\t0\t0\t1\t0\t0\t0\t1\t0\t0\t0\t1\t0\t0\t0\t1\t0\t0\t0\n";
        let s = EpisodeStore::parse(text).unwrap();
        assert!(matches!(build_training_set(&s, 1, model(), &th()), Err(StoreError::Integrity { .. })));
        assert!(matches!(build_training_set(&s, 9, model(), &th()), Err(StoreError::NotFound(9))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn labeling_is_pure(seed in any::<u64>(), off in 0.0f64..6.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = Pose::random_rotation(&mut rng).with_translation(Vec3::new(0.0, 0.0, 30.0));
            let m = e.compose(&Pose::from_translation(Vec3::new(off, 0.0, 0.0)));
            let a = label_episode(&e, &m, model(), &th());
            let b = label_episode(&e, &m, model(), &th());
            prop_assert_eq!(a, b);
            prop_assert_eq!(a.accepted(), a.verification.is_tp);
        }
    }
}
