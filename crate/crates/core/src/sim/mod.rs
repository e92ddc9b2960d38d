//! Simulated bin-picking workcell that produces labeled episodes.

mod campaign;
mod scene;
mod workcell;

pub use campaign::{run_campaign, CampaignReport, EpisodeTruth};
pub use scene::{lying_pose, place_objects, render_cloud, spawn_scene, Bin, BinGeometry, SceneState, SensorModel};
pub use workcell::{
    canonicalize_spin, execute_grasp, grasp_offsets, insertion_attempt, observe_inhand, plan_grasp,
    DisturbanceModel, GraspOutcome, GraspResult, InHandObservationModel,
};

use crate::config::ConfigError;
use crate::geometry::GeometryError;
use crate::store::StoreError;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("could only place {placed} of {requested} objects in the bin")]
    Overfull { requested: usize, placed: usize },
    #[error("object count not conserved after episode {episode}")]
    Conservation { episode: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}
