//! The collection loop: render, estimate, grasp, observe, label, record.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::CampaignConfig;
use crate::geometry::{ply, ObjectModel, Pose};
use crate::labeling::{expected_grasp_pose, label_episode};
use crate::metrics::{verify, VerificationResult};
use crate::proposer::OracleProposer;
use crate::solver::estimate_batch;
use crate::store::{Body, EpisodeStore, StoreError, StoredPose};

use super::scene::{place_objects, render_cloud, Bin, SceneState};
use super::workcell::{execute_grasp, grasp_offsets, insertion_attempt, observe_inhand, plan_grasp, GraspResult};
use super::SimError;

/// Ground truth for one in-hand episode. Evaluation only; labeling never
/// reads it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeTruth {
    pub episode: usize,
    pub inhand_id: u64,
    pub target_id: u32,
    pub accepted: bool,
    /// `verify(estimate, truth)`: the in-bin estimate against the true object pose.
    pub estimate_tp: bool,
    pub estimate_check: VerificationResult,
    pub inhand_check: VerificationResult,
    /// The object moved in the gripper during the grasp.
    pub disturbed: bool,
    pub test_split: bool,
    pub inserted: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CampaignReport {
    pub task_id: u64,
    pub episodes: usize,
    pub no_detection: usize,
    /// Source-bin shakes, one per no-detection episode.
    pub shakes: usize,
    pub held: usize,
    pub dropped: usize,
    pub missed: usize,
    pub pushed_out: usize,
    pub accepted: usize,
    pub accepted_train: usize,
    pub accepted_test: usize,
    pub insertions_succeeded: usize,
    pub swaps: usize,
    pub refills: usize,
    pub refilled_objects: usize,
    pub initial_objects: usize,
    pub final_counts: (usize, usize),
    pub conservation_checks: usize,
    pub reached_targets: bool,
    pub truth: Vec<EpisodeTruth>,
}

impl CampaignReport {
    pub fn acceptance_rate(&self) -> f64 {
        if self.episodes == 0 { 0.0 } else { self.accepted as f64 / self.episodes as f64 }
    }

    pub fn lost(&self) -> usize {
        self.dropped + self.pushed_out
    }

    /// Fraction of accepted samples whose in-bin estimate was truly correct.
    pub fn label_precision(&self) -> Option<f64> {
        let acc: Vec<_> = self.truth.iter().filter(|t| t.accepted).collect();
        (!acc.is_empty()).then(|| acc.iter().filter(|t| t.estimate_tp).count() as f64 / acc.len() as f64)
    }

    fn conserved(&self, scene: &SceneState) -> bool {
        scene.bin_a_count + scene.bin_b_count + self.lost() == self.initial_objects + self.refilled_objects
            && scene.is_consistent()
    }
}

/// The stored form and the pose it decodes to. Decisions are made on the
/// decoded pose so that relabeling from the log reproduces them exactly.
fn quantized(p: &Pose) -> (StoredPose, Pose) {
    let stored = StoredPose::from_pose(p);
    (stored, stored.to_pose())
}

/// Runs episodes until `targets.train + targets.test` samples are accepted or
/// the episode cap is hit. Cloud files go to `cloud_dir/clouds/` when given.
pub fn run_campaign(
    cfg: &CampaignConfig,
    model: &ObjectModel,
    store: &mut EpisodeStore,
    cloud_dir: Option<&Path>,
) -> Result<CampaignReport, SimError> {
    cfg.validate()?;
    let w = &cfg.workcell;
    if let Some(dir) = cloud_dir {
        std::fs::create_dir_all(dir.join("clouds")).map_err(StoreError::from)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let task_id =
        store.append(Body::Task { object_id: model.id().to_string(), network_type: cfg.network_type.clone() })?;
    let mut next_id = 0u32;
    let mut spawn = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<(u32, Pose)>, SimError> {
        let objs = place_objects(n, model, &cfg.bin, next_id, rng)?;
        next_id += n as u32;
        Ok(objs)
    };
    let mut scene = SceneState {
        objects: spawn(w.initial_source, &mut rng)?,
        bin: cfg.bin,
        source: Bin::A,
        bin_a_count: w.initial_source,
        bin_b_count: w.initial_destination,
    };
    let volume = cfg.bin.volume(model);
    let mut report = CampaignReport {
        task_id,
        initial_objects: w.initial_source + w.initial_destination,
        ..CampaignReport::default()
    };
    let target = cfg.targets.total();
    let mut transfers = 0usize;

    while report.accepted < target && report.episodes < cfg.max_episodes() {
        report.episodes += 1;
        let episode = report.episodes;
        if scene.objects.is_empty() {
            scene.objects = spawn(w.initial_source, &mut rng)?;
            *scene.count_mut(scene.source) += w.initial_source;
            report.refills += 1;
            report.refilled_objects += w.initial_source;
            log::debug!("episode {episode}: refilled source bin");
        }

        let cloud = render_cloud(&scene.objects, model, cfg.sensor.sigma_mm, cfg.sensor.dropout, &mut rng);
        let cloud_file = format!("clouds/{episode:06}.ply");
        if let Some(dir) = cloud_dir {
            let f = std::fs::File::create(dir.join(&cloud_file)).map_err(StoreError::from)?;
            let mut w = std::io::BufWriter::new(f);
            ply::write_ply_binary(&mut w, &cloud).and_then(|_| w.flush()).map_err(StoreError::from)?;
        }
        let cloud_id = store.append(Body::Cloud { task_id, cloud_file, timestamp_ms: episode as u64 * 1000 })?;

        let proposer = OracleProposer { truth: scene.objects.clone(), error_model: cfg.error_model, volume };
        let batch = estimate_batch(&cloud, model, &proposer, cfg.batch_k, &cfg.solver, rng.random());
        let mut pose_ids = vec![None; batch.proposals.len()];
        for (i, p) in batch.proposals.iter().enumerate() {
            let Some(p) = p else { continue };
            let score = batch.hypotheses.iter().find(|h| h.proposal_index == i).map_or(0.0, |h| h.score);
            let id = store.append(Body::PoseEst { cloud_id, pose: StoredPose::from_pose(&p.pose), score })?;
            pose_ids[i] = Some(id);
        }

        let chosen = batch.hypotheses.iter().find(|_| rng.random_bool(w.p_feasible));
        let Some(chosen) = chosen else {
            report.no_detection += 1;
            // Shake the source bin so the next capture sees a new arrangement.
            let ids: Vec<u32> = scene.objects.iter().map(|(id, _)| *id).collect();
            let placed = place_objects(ids.len(), model, &cfg.bin, 0, &mut rng)?;
            scene.objects = ids.into_iter().zip(placed).map(|(id, (_, pose))| (id, pose)).collect();
            report.shakes += 1;
            check(&mut report, &scene, episode)?;
            continue;
        };
        let pose_est_id = pose_ids[chosen.proposal_index].expect("survivors come from recorded proposals");
        let estimate = StoredPose::from_pose(&chosen.pose).to_pose();
        let offset = grasp_offsets(cfg.object.height_mm)[rng.random_range(0..3)];
        let (grasp_stored, grasp) = quantized(&plan_grasp(&estimate, offset));
        let before = scene.objects.clone();
        let outcome = execute_grasp(&mut scene, model, &estimate, &grasp, &cfg.disturbance, w.grasp_miss_mm, &mut rng);
        let grasp_id = store.append(Body::Grasp {
            pose_est_id,
            grasp_in_object_frame: grasp_stored,
            succeeded: outcome.succeeded,
        })?;
        if outcome.pushed_out.is_some() {
            report.pushed_out += 1;
        }
        match outcome.result {
            GraspResult::Missed => report.missed += 1,
            GraspResult::Dropped => report.dropped += 1,
            GraspResult::Held => {
                report.held += 1;
                let actual = outcome.actual_tcp_obj.expect("held objects have a pose");
                let (measured_pose, measured) = quantized(&observe_inhand(&actual, &cfg.observation, &mut rng));
                let (expected_pose, expected) = quantized(&expected_grasp_pose(&estimate, &grasp));
                let inhand_id = store.append(Body::InHand { grasp_id, measured_pose, expected_pose })?;
                let decision = label_episode(&expected, &measured, model, &cfg.thresholds);
                let inserted = insertion_attempt(
                    model,
                    &measured,
                    &expected,
                    w.insertion_tolerance_mm,
                    w.insertion_tolerance_deg,
                );
                store.append(Body::Insertion { inhand_id, succeeded: inserted })?;
                report.insertions_succeeded += inserted as usize;

                let target_id = outcome.target_id.expect("held objects have an id");
                let truth = before.iter().find(|(id, _)| *id == target_id).expect("target came from the scene").1;
                // Same argument order as the in-hand check: plan first, reality second.
                let estimate_check = verify(model, &estimate, &truth, &cfg.thresholds);
                let test_split = decision.accepted() && cfg.targets.is_test(report.accepted);
                if decision.accepted() {
                    report.accepted += 1;
                    if test_split {
                        report.accepted_test += 1;
                    } else {
                        report.accepted_train += 1;
                    }
                }
                report.truth.push(EpisodeTruth {
                    episode,
                    inhand_id,
                    target_id,
                    accepted: decision.accepted(),
                    estimate_tp: estimate_check.is_tp,
                    estimate_check,
                    inhand_check: decision.verification,
                    disturbed: outcome.disturbed,
                    test_split,
                    inserted,
                });

                transfers += 1;
                if transfers % w.transfers_per_swap == 0 {
                    let new_source = scene.source.other();
                    scene.objects = spawn(scene.count(new_source), &mut rng)?;
                    scene.source = new_source;
                    report.swaps += 1;
                }
            }
        }
        check(&mut report, &scene, episode)?;
    }
    report.reached_targets = report.accepted >= target;
    report.final_counts = (scene.bin_a_count, scene.bin_b_count);
    if !report.reached_targets {
        log::warn!("episode cap {} reached with {} of {target} samples", cfg.max_episodes(), report.accepted);
    }
    Ok(report)
}

fn check(report: &mut CampaignReport, scene: &SceneState, episode: usize) -> Result<(), SimError> {
    report.conservation_checks += 1;
    if report.conserved(scene) { Ok(()) } else { Err(SimError::Conservation { episode }) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Targets;
    use crate::labeling::{build_training_set, label_task};
    use crate::store::Level;

    fn small(mut cfg: CampaignConfig, train: usize, test: usize) -> (CampaignConfig, ObjectModel) {
        cfg.targets = Targets { train, test };
        let model = cfg.object.build().unwrap();
        (cfg, model)
    }

    #[test]
    fn zero_noise_campaign_accepts_every_held_object() {
        let (cfg, model) = small(CampaignConfig::zero_noise(), 10, 2);
        let mut store = EpisodeStore::in_memory();
        let r = run_campaign(&cfg, &model, &mut store, None).unwrap();
        assert!(r.reached_targets);
        assert_eq!((r.episodes, r.accepted, r.accepted_train, r.accepted_test), (12, 12, 10, 2));
        assert_eq!(r.label_precision(), Some(1.0));
        assert_eq!(r.insertions_succeeded, 12);
        assert!(r.truth.iter().all(|t| t.inhand_check.e_adi < 1e-6));
        assert_eq!(r.conservation_checks, r.episodes);
        assert_eq!(r.final_counts, (18, 22));
        store.check_integrity().unwrap();
    }

    #[test]
    fn empty_source_bin_is_refilled() {
        let (mut cfg, model) = small(CampaignConfig::zero_noise(), 10, 2);
        cfg.workcell.initial_source = 2;
        cfg.workcell.transfers_per_swap = 100;
        cfg.workcell.p_feasible = 1.0;
        let r = run_campaign(&cfg, &model, &mut EpisodeStore::in_memory(), None).unwrap();
        assert_eq!((r.episodes, r.refills, r.refilled_objects, r.swaps), (12, 5, 10, 0), "{r:?}");
        assert_eq!(r.final_counts, (0, 22));
    }

    #[test]
    fn gross_errors_only_run_into_the_cap() {
        let (mut cfg, model) = small(CampaignConfig::default(), 2, 0);
        cfg.error_model.p_gross = 1.0;
        cfg.error_model.p_flip = 0.0;
        let mut store = EpisodeStore::in_memory();
        let r = run_campaign(&cfg, &model, &mut store, None).unwrap();
        assert!(!r.reached_targets);
        assert_eq!(r.episodes, cfg.max_episodes());
        assert_eq!(r.episodes, 100);
    }

    #[test]
    fn campaign_is_reproducible_and_traceable() {
        let (mut cfg, model) = small(CampaignConfig::default(), 20, 5);
        cfg.workcell.transfers_per_swap = 4;
        cfg.workcell.initial_source = 6;
        let run = || {
            let mut store = EpisodeStore::in_memory();
            let r = run_campaign(&cfg, &model, &mut store, None).unwrap();
            (r, store)
        };
        let (r1, s1) = run();
        let (r2, s2) = run();
        assert_eq!(s1.to_text(), s2.to_text());
        assert_eq!(r1, r2);
        assert!(r1.swaps > 0 && r1.shakes == r1.no_detection);
        assert_eq!(r1.conservation_checks, r1.episodes);
        let (a, b) = r1.final_counts;
        assert_eq!(a + b + r1.lost(), r1.initial_objects + r1.refilled_objects);

        let inhand: Vec<_> = s1.iter_level(Level::InHand).collect();
        assert_eq!(inhand.len(), r1.held);
        for rec in &inhand {
            s1.lineage(rec.id).unwrap();
        }
        // Relabeling from the log reproduces every live decision.
        let decisions = label_task(&s1, r1.task_id, &model, &cfg.thresholds).unwrap();
        assert_eq!(decisions.len(), r1.truth.len());
        for (d, t) in decisions.iter().zip(&r1.truth) {
            assert_eq!((d.episode_id, d.accepted()), (t.inhand_id, t.accepted));
            assert_eq!(d.verification, t.inhand_check);
        }
        let samples = build_training_set(&s1, r1.task_id, &model, &cfg.thresholds).unwrap();
        assert_eq!(samples.len(), r1.accepted);
        assert_eq!(r1.accepted_train + r1.accepted_test, r1.accepted);
    }
}
